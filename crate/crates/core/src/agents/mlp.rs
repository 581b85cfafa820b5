//! Fully connected network with rectifier hidden layers and a linear output.
//!
//! Parameters live in one flat vector; layer `l` stores its weight matrix
//! (`out × in`, row-major) followed by its bias.
//!
//! Weights file layout (all little-endian):
//! ```text
//! magic     8 bytes  b"MUNQNET1"
//! n         u32      number of layer sizes (layers + 1)
//! sizes     n × u32  input size, hidden sizes, output size
//! params    f64...   per layer: weights row-major (out × in), then biases
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::targets::{huber, huber_grad};
use crate::error::{invalid, Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MUNQNET1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Layer outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    /// `layers[0]` is the input, `layers[L]` the output. Hidden entries
    /// hold post-rectifier values.
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("non-empty")
    }
}

fn layout(sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut total = 0;
    for w in sizes.windows(2) {
        offsets.push(total);
        total += w[1] * w[0] + w[1];
    }
    (offsets, total)
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return invalid("network needs at least an input and an output layer of positive size");
        }
        let (offsets, total) = layout(sizes);
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Weights and biases drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.sizes[l] as f64).sqrt();
            let start = net.offsets[l];
            let len = net.sizes[l + 1] * (net.sizes[l] + 1);
            for p in &mut net.params[start..start + len] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", net.params.len()),
                got: params.len().to_string(),
            });
        }
        net.params = params;
        net.check_finite()?;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Fails on the first layer holding a NaN or infinite parameter.
    pub fn check_finite(&self) -> Result<()> {
        for l in 0..self.num_layers() {
            let start = self.offsets[l];
            let len = self.sizes[l + 1] * (self.sizes[l] + 1);
            if self.params[start..start + len].iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteParameter { layer: l });
            }
        }
        Ok(())
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + n_in * n_out];
        let b = &self.params[start + n_in * n_out..start + n_in * n_out + n_out];
        (w, b)
    }

    fn forward_unchecked(&self, x: &[f64]) -> Activations {
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let input = &layers[l];
            let n_in = self.sizes[l];
            let last = l + 1 == self.num_layers();
            let out: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            layers.push(out);
        }
        Activations { layers }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("input of length {}", self.input_dim()),
                got: x.len().to_string(),
            });
        }
        Ok(())
    }

    /// Q-values for one observation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.layers.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Activations> {
        self.check_input(x)?;
        self.check_finite()?;
        Ok(self.forward_unchecked(x))
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to the output is `d_out`.
    pub fn backward(&self, acts: &Activations, d_out: &[f64], grads: &mut [f64]) -> Result<()> {
        if d_out.len() != self.output_dim() || grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} outputs and {} gradients", self.output_dim(), self.params.len()),
                got: format!("{} and {}", d_out.len(), grads.len()),
            });
        }
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts.layers[l];
            let start = self.offsets[l];
            let (gw, rest) = grads[start..].split_at_mut(n_in * n_out);
            let gb = &mut rest[..n_out];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut prev = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
                // Rectifier derivative, read off the post-activation value.
                for (p, a) in prev.iter_mut().zip(&acts.layers[l]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// Mean Huber loss `(1/B) Σ h(y_i − q(s_i, a_i))` and its gradient.
    /// Targets are treated as constants.
    pub fn td_loss_and_grad(
        &self,
        observations: &[&[f64]],
        actions: &[usize],
        targets: &[f64],
        kappa: f64,
    ) -> Result<(f64, Vec<f64>)> {
        let n = observations.len();
        if n == 0 || actions.len() != n || targets.len() != n {
            return invalid("loss needs equally sized, non-empty batches");
        }
        self.check_finite()?;
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut d_out = vec![0.0; self.output_dim()];
        for ((x, &a), &y) in observations.iter().zip(actions).zip(targets) {
            self.check_input(x)?;
            if a >= self.output_dim() {
                return invalid(format!("action {a} out of range"));
            }
            let acts = self.forward_unchecked(x);
            let diff = y - acts.output()[a];
            loss += huber(diff, kappa);
            d_out.iter_mut().for_each(|d| *d = 0.0);
            d_out[a] = -huber_grad(diff, kappa) / n as f64;
            self.backward(&acts, &d_out, &mut grads)?;
        }
        Ok((loss / n as f64, grads))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(WEIGHTS_MAGIC)?;
        out.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            out.write_all(&(s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Parse("not a network weights file".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let n = u32::from_le_bytes(word) as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Parse(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut word)?;
            sizes.push(u32::from_le_bytes(word) as usize);
        }
        let (_, total) = layout(&sizes);
        let mut params = Vec::with_capacity(total);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            input.read_exact(&mut buf)?;
            params.push(f64::from_le_bytes(buf));
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::Parse("trailing bytes after network weights".into()));
        }
        Self::from_params(&sizes, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(net.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::init(&[3, 2], &mut rng).unwrap();
        let x = [0.5, -1.0, 2.0];
        let acts = net.forward_cached(&x).unwrap();
        let d = [0.3, -0.7];
        let mut g = vec![0.0; net.num_params()];
        net.backward(&acts, &d, &mut g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g[o * 3 + i] - d[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(g[6 + o], d[o]);
        }
    }

    #[test]
    fn nan_parameter_is_a_hard_error() {
        let mut net = Mlp::zeros(&[2, 3, 2]).unwrap();
        let last = net.num_params() - 1;
        net.params_mut()[last] = f64::NAN;
        assert!(matches!(net.forward(&[0.0, 0.0]), Err(Error::NonFiniteParameter { layer: 1 })));
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(Mlp::zeros(&[2]).is_err());
        assert!(Mlp::from_params(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::init(&[4, 8, 3], &mut rng).unwrap();
        let mut bytes = Vec::new();
        net.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], WEIGHTS_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 8 + 4 + 12 + 8 * net.num_params());
        let first = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        assert_eq!(first, net.params()[0]);
        assert_eq!(Mlp::read_from(bytes.as_slice()).unwrap(), net);
        bytes.push(0);
        assert!(Mlp::read_from(bytes.as_slice()).is_err());
        assert!(Mlp::read_from(&b"NOTMAGIC"[..]).is_err());
    }
}
