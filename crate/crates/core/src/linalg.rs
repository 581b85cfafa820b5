//! Dense resolvent solves for policy-induced kernels.
//!
//! For a policy `π`, the state-action kernel `P_π` acts on q-functions as
//! `(P_π q)(s,a) = Σ_s' P(s'|s,a) ⟨π, q⟩(s')`. Its resolvent
//! `(I − γP_π)^{-1}` is applied without forming the `|S||A|` square matrix:
//! writing `y = x + γ P w` with `w = ⟨π, y⟩` reduces the system to the
//! state-level `(I − γP^π) w = ⟨π, x⟩`, which is LU-factored once.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, QFunction, StochasticPolicy};

/// LU factorization of `I − γP^π` for one policy.
pub struct Resolvent<'a> {
    mdp: &'a FiniteMdp,
    policy: StochasticPolicy,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl<'a> Resolvent<'a> {
    pub fn new(mdp: &'a FiniteMdp, policy: &StochasticPolicy) -> Result<Self> {
        mdp.check_policy(policy)?;
        let n = mdp.num_states();
        let kernel = mdp.state_kernel(policy);
        let mut m = DMatrix::<f64>::identity(n, n);
        for s in 0..n {
            for t in 0..n {
                m[(s, t)] -= mdp.gamma() * kernel[s * n + t];
            }
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(Self {
            mdp,
            policy: policy.clone(),
            lu,
        })
    }

    /// Solves `(I − γP^π) w = b` at the state level.
    pub fn solve_states(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        let w = self.lu.solve(&rhs).ok_or(Error::Singular)?;
        Ok(w.iter().copied().collect())
    }

    /// Applies `(I − γP_π)^{-1}` to a state-action table.
    pub fn apply(&self, x: &QFunction) -> Result<QFunction> {
        let b = self.policy.expectation(x);
        let w = self.solve_states(&b)?;
        let pw = self.mdp.expect_next(&w);
        let gamma = self.mdp.gamma();
        let values = x
            .values()
            .iter()
            .zip(&pw)
            .map(|(xi, pi)| xi + gamma * pi)
            .collect();
        QFunction::from_vec(x.num_states(), x.num_actions(), values)
    }
}

/// Applies `P_π` (no discount) to a state-action table.
pub fn apply_kernel(mdp: &FiniteMdp, policy: &StochasticPolicy, x: &QFunction) -> QFunction {
    let v = policy.expectation(x);
    let values = mdp.expect_next(&v);
    QFunction::from_vec(x.num_states(), x.num_actions(), values).expect("shape preserved")
}
