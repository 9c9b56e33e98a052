//! Controller-side dropout compensator.
//!
//! On a received state the estimate is reset to it; otherwise the previous
//! estimate is propagated with the acknowledged applied input. The residual of
//! that propagation is the compensator disturbance `w̃` fed to the policy.

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::model::LinearSystem;

#[derive(Clone, Debug)]
pub struct CompensatorState {
    pub x_tilde: Vector,
    pub x_tilde_prev: Vector,
    pub u_a_prev: Vector,
    pub w_tilde_last: Vector,
    /// consecutive downlink losses ending at the current step
    pub consecutive_dropouts: usize,
    updates: usize,
}

impl CompensatorState {
    /// `x̃_{−1} = 0`, `uᵃ_{−1} = 0`.
    pub fn new(d: usize, m: usize) -> Self {
        Self {
            x_tilde: Vector::zeros(d),
            x_tilde_prev: Vector::zeros(d),
            u_a_prev: Vector::zeros(m),
            w_tilde_last: Vector::zeros(d),
            consecutive_dropouts: 0,
            updates: 0,
        }
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Advance the estimate with downlink bit `s_t`; `u_a_prev` is the input
    /// applied at `t−1` as reconstructed from acknowledgments.
    pub fn update(
        &mut self,
        sys: &LinearSystem,
        s_t: bool,
        received: Option<&Vector>,
        u_a_prev: &Vector,
    ) -> Result<()> {
        let propagated = &sys.a * &self.x_tilde + &sys.b * u_a_prev;
        let next = match (s_t, received) {
            (true, Some(x)) => {
                if x.len() != sys.state_dim() {
                    return Err(Error::dims("received state", sys.state_dim(), x.len()));
                }
                self.consecutive_dropouts = 0;
                x.clone()
            }
            (true, None) => {
                return Err(Error::Protocol(
                    "successful downlink without a state payload".into(),
                ));
            }
            (false, _) => {
                self.consecutive_dropouts += 1;
                propagated.clone()
            }
        };
        self.x_tilde_prev = std::mem::replace(&mut self.x_tilde, next);
        self.u_a_prev = u_a_prev.clone();
        self.w_tilde_last = &self.x_tilde - propagated;
        self.updates += 1;
        Ok(())
    }

    /// `w̃_{t−1} = x̃_t − (A x̃_{t−1} + B uᵃ_{t−1})`
    pub fn reconstruct_w_tilde(&self, sys: &LinearSystem) -> Result<Vector> {
        if self.updates == 0 {
            return Err(Error::State(
                "compensator disturbance requested before the first update".into(),
            ));
        }
        Ok(&self.x_tilde - (&sys.a * &self.x_tilde_prev + &sys.b * &self.u_a_prev))
    }

    /// Controller error `x̃_t − xʳ_t`.
    pub fn controller_error(&self, x_r: &Vector) -> Vector {
        &self.x_tilde - x_r
    }
}

/// Estimator error recursion `eᴰ_t = (1 − s_t)(A eᴰ_{t−1} + w_{t−1})`, kept as
/// an independent reference for the closed-loop value `x_t − x̃_t`.
pub fn estimator_error_step(
    e_d_prev: &Vector,
    s_t: bool,
    w_prev: &Vector,
    sys: &LinearSystem,
) -> Vector {
    if s_t {
        Vector::zeros(e_d_prev.len())
    } else {
        &sys.a * e_d_prev + w_prev
    }
}
