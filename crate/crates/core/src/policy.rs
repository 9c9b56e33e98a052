//! Saturated disturbance-feedback policies
//! `u_{t+i} = uʳ_{t+i} + η_{t+i} + Σ_{j≤i} θ_{i,j} ψ(w̃_{t+j−1})`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

/// Anti-symmetric bounded scalar map applied element-wise to compensator
/// disturbances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum SaturationFn {
    /// `(1 − e^{−x}) / (1 + e^{−x})`, bounded by 1.
    #[default]
    Sigmoid,
    /// Hard clipping to `[−limit, limit]`.
    Clip { limit: f64 },
}

impl SaturationFn {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            SaturationFn::Sigmoid => sigmoid(x),
            SaturationFn::Clip { limit } => x.clamp(-limit, limit),
        }
    }

    /// `sup |ψ|`
    pub fn phi_max(&self) -> f64 {
        match *self {
            SaturationFn::Sigmoid => 1.0,
            SaturationFn::Clip { limit } => limit,
        }
    }

    pub fn apply_vec(&self, v: &Vector) -> Vector {
        v.map(|x| self.apply(x))
    }
}

/// `(1 − e^{−x}) / (1 + e^{−x})`, evaluated on the non-positive exponent side.
pub fn sigmoid(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let e = (-x.abs()).exp();
    let v = (1.0 - e) / (1.0 + e);
    v.copysign(x)
}

/// Decision pair `(η, Θ)` for one prediction window.
///
/// `Θ` is stored densely (Nm × Nd); block `(i, j)` of size m × d multiplies
/// `ψ(w̃_{t+j−1})` and may be nonzero only when `j ≤ i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub eta: Vector,
    pub theta: Mat,
    horizon: usize,
    m: usize,
    d: usize,
}

impl PolicyParams {
    pub fn zeros(horizon: usize, m: usize, d: usize) -> Self {
        Self {
            eta: Vector::zeros(horizon * m),
            theta: Mat::zeros(horizon * m, horizon * d),
            horizon,
            m,
            d,
        }
    }

    pub fn from_parts(eta: Vector, theta: Mat, horizon: usize, m: usize, d: usize) -> Result<Self> {
        if eta.len() != horizon * m {
            return Err(Error::dims("η", horizon * m, eta.len()));
        }
        if theta.shape() != (horizon * m, horizon * d) {
            return Err(Error::config(format!(
                "Θ must be {}×{}, got {:?}",
                horizon * m,
                horizon * d,
                theta.shape()
            )));
        }
        for i in 0..horizon {
            for j in (i + 1)..horizon {
                if theta.view((i * m, j * d), (m, d)).iter().any(|&v| v != 0.0) {
                    return Err(Error::Structure { row: i, col: j });
                }
            }
        }
        Ok(Self {
            eta,
            theta,
            horizon,
            m,
            d,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn state_dim(&self) -> usize {
        self.d
    }

    /// Whether block `(i, j)` of Θ is a free decision.
    pub fn is_free(i: usize, j: usize) -> bool {
        j <= i
    }

    pub fn block(&self, i: usize, j: usize) -> Mat {
        self.theta
            .view((i * self.m, j * self.d), (self.m, self.d))
            .into_owned()
    }

    pub fn set_block(&mut self, i: usize, j: usize, block: &Mat) -> Result<()> {
        if !Self::is_free(i, j) {
            return Err(Error::Structure { row: i, col: j });
        }
        if block.shape() != (self.m, self.d) {
            return Err(Error::config("feedback block has the wrong shape"));
        }
        self.theta
            .view_mut((i * self.m, j * self.d), (self.m, self.d))
            .copy_from(block);
        Ok(())
    }

    /// Set a single scalar entry of Θ, rejecting masked positions.
    pub fn set_entry(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        let (i, j) = (row / self.m, col / self.d);
        if !Self::is_free(i, j) {
            return Err(Error::Structure { row: i, col: j });
        }
        self.theta[(row, col)] = value;
        Ok(())
    }

    pub fn eta_block(&self, i: usize) -> Vector {
        self.eta.rows(i * self.m, self.m).into_owned()
    }

    /// `uʳ_{t+i} + η_{t+i}`
    pub fn nominal(&self, u_r: &Vector, step: usize) -> Vector {
        u_r + self.eta_block(step)
    }

    /// Control at window offset `step` from the causally available saturated
    /// disturbances `psi_hist = [ψ(w̃_{t−1}), ψ(w̃_t), …]`.
    pub fn compute_control(
        &self,
        u_r: &Vector,
        psi_hist: &[Vector],
        step: usize,
    ) -> Result<Vector> {
        if step >= self.horizon {
            return Err(Error::config(format!(
                "step {step} beyond horizon {}",
                self.horizon
            )));
        }
        if psi_hist.len() < step + 1 {
            return Err(Error::Causality {
                step,
                needed: step + 1,
                available: psi_hist.len(),
            });
        }
        let mut u = self.nominal(u_r, step);
        for (j, psi) in psi_hist.iter().take(step + 1).enumerate() {
            u += self
                .theta
                .view((step * self.m, j * self.d), (self.m, self.d))
                * psi;
        }
        Ok(u)
    }
}

/// One row of the hard-input constraint in decision form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintRow {
    pub satisfied: bool,
    /// `u_max − (|uʳ + η|_i + ‖Θ_i‖₁ φ_max)`
    pub margin: f64,
}

/// `|uʳ_i + η_i| + ‖Θ^{(i,:)}‖₁ φ_max ≤ u_max` for every scalar row i.
pub fn input_constraint_rows(
    params: &PolicyParams,
    u_r_stack: &Vector,
    phi_max: f64,
    u_max: f64,
) -> Vec<ConstraintRow> {
    (0..params.eta.len())
        .map(|i| {
            let nominal = (u_r_stack[i] + params.eta[i]).abs();
            let l1: f64 = params.theta.row(i).iter().map(|v| v.abs()).sum();
            let margin = u_max - (nominal + l1 * phi_max);
            ConstraintRow {
                satisfied: margin >= 0.0,
                margin,
            }
        })
        .collect()
}

/// The saturated-disturbance realization that maximizes `(u_i)` in magnitude:
/// `ψ = φ_max · sign(Θ_i)` aligned with the sign of the nominal part.
pub fn extremal_psi(params: &PolicyParams, u_r_stack: &Vector, phi_max: f64, row: usize) -> Vector {
    let sign = if u_r_stack[row] + params.eta[row] >= 0.0 {
        1.0
    } else {
        -1.0
    };
    params.theta.row(row).transpose().map(|v| {
        if v > 0.0 {
            sign * phi_max
        } else if v < 0.0 {
            -sign * phi_max
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vec_from;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.0);
        assert_relative_eq!(sigmoid(1.0), 0.5f64.tanh(), epsilon = 1e-12);
        assert!((sigmoid(1.0) - 0.46212).abs() < 1e-5);
        assert_eq!(sigmoid(1e6), 1.0);
        assert_eq!(sigmoid(-1e6), -1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-50.0..50.0);
            assert_eq!(sigmoid(-x), -sigmoid(x));
            assert!(sigmoid(x).abs() <= 1.0);
        }
    }

    #[test]
    fn open_loop_control() {
        let p =
            PolicyParams::from_parts(vec_from(&[0.3, -0.2]), Mat::zeros(2, 2), 2, 1, 1).unwrap();
        let u = p
            .compute_control(&vec_from(&[1.0]), &[vec_from(&[0.7]), vec_from(&[0.1])], 1)
            .unwrap();
        assert_relative_eq!(u[0], 0.8);
        let mut p = PolicyParams::zeros(2, 1, 1);
        p.eta[1] = 0.5;
        p.theta[(1, 0)] = 3.0;
        let u = p
            .compute_control(&vec_from(&[1.0]), &[vec_from(&[0.0]), vec_from(&[0.0])], 1)
            .unwrap();
        assert_relative_eq!(u[0], 1.5);
    }

    #[test]
    fn hand_evaluated_feedback() {
        let mut p = PolicyParams::zeros(2, 1, 1);
        p.set_entry(1, 0, 2.0).unwrap();
        p.set_entry(1, 1, 1.0).unwrap();
        let u = p
            .compute_control(&vec_from(&[0.0]), &[vec_from(&[0.5]), vec_from(&[0.1])], 1)
            .unwrap();
        assert_relative_eq!(u[0], 1.1, epsilon = 1e-15);
    }

    #[test]
    fn causality_enforced() {
        let p = PolicyParams::zeros(3, 1, 2);
        let err = p
            .compute_control(&vec_from(&[0.0]), &[Vector::zeros(2)], 1)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::Causality {
                step: 1,
                needed: 2,
                available: 1
            }
        ));
    }

    #[test]
    fn mask_enforced() {
        let mut p = PolicyParams::zeros(3, 1, 2);
        assert!(matches!(
            p.set_entry(0, 2, 1.0),
            Err(Error::Structure { row: 0, col: 1 })
        ));
        assert!(p.set_block(2, 1, &Mat::zeros(1, 2)).is_ok());
        let mut theta = Mat::zeros(3, 6);
        theta[(1, 5)] = 1.0;
        assert!(PolicyParams::from_parts(Vector::zeros(3), theta, 3, 1, 2).is_err());
    }

    #[test]
    fn constraint_margins() {
        let p = PolicyParams::zeros(2, 1, 1);
        let rows = input_constraint_rows(&p, &Vector::zeros(2), 1.0, 5.0);
        assert!(rows.iter().all(|r| r.satisfied && r.margin == 5.0));

        let mut p = PolicyParams::zeros(2, 1, 2);
        p.eta[0] = 1.0;
        p.theta[(0, 0)] = 1.0;
        p.theta[(0, 1)] = -0.5;
        let rows = input_constraint_rows(&p, &vec_from(&[2.5, 0.0]), 1.0, 5.0);
        assert_relative_eq!(rows[0].margin, 0.0);
        assert!(rows[0].satisfied);
    }
}
