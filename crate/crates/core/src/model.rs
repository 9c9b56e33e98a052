//! Plant model, process noise and horizon-stacked prediction matrices.

use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{blkdiag, mat_pow, min_eigenvalue, Mat, Vector};

const SYM_TOL: f64 = 1e-10;
const PSD_TOL: f64 = -1e-10;

/// Discrete-time LTI plant `x⁺ = A x + B uᵃ + w` with `‖uᵃ‖∞ ≤ u_max`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: Mat,
    pub b: Mat,
    pub noise_cov: Mat,
    pub u_max: f64,
}

impl LinearSystem {
    pub fn new(a: Mat, b: Mat, noise_cov: Mat, u_max: f64) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::config(format!(
                "A must be square and nonempty, got {:?}",
                a.shape()
            )));
        }
        if b.nrows() != d || b.ncols() == 0 {
            return Err(Error::config(format!(
                "B must be {d}×m with m ≥ 1, got {:?}",
                b.shape()
            )));
        }
        if noise_cov.shape() != (d, d) {
            return Err(Error::config(format!("noise covariance must be {d}×{d}")));
        }
        if (&noise_cov - noise_cov.transpose()).amax() > SYM_TOL {
            return Err(Error::config("noise covariance is not symmetric"));
        }
        if min_eigenvalue(&noise_cov) < PSD_TOL {
            return Err(Error::config(
                "noise covariance is not positive semidefinite",
            ));
        }
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::config(format!(
                "u_max must be positive, got {u_max}"
            )));
        }
        Ok(Self {
            a,
            b,
            noise_cov,
            u_max,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `A x + B uᵃ + w`
    pub fn step(&self, x: &Vector, u_a: &Vector, w: &Vector) -> Result<Vector> {
        let d = self.state_dim();
        if x.len() != d {
            return Err(Error::dims("state", d, x.len()));
        }
        if u_a.len() != self.input_dim() {
            return Err(Error::dims("input", self.input_dim(), u_a.len()));
        }
        if w.len() != d {
            return Err(Error::dims("noise", d, w.len()));
        }
        Ok(&self.a * x + &self.b * u_a + w)
    }
}

/// Stage and terminal weights of the tracking cost.
#[derive(Clone, Debug)]
pub struct CostWeights {
    pub q: Mat,
    pub q_f: Mat,
    pub r: Mat,
}

impl CostWeights {
    pub fn new(q: Mat, q_f: Mat, r: Mat) -> Result<Self> {
        for (name, m, strict) in [("Q", &q, false), ("Q_f", &q_f, false), ("R", &r, true)] {
            if m.nrows() != m.ncols() {
                return Err(Error::config(format!("{name} must be square")));
            }
            if (m - m.transpose()).amax() > SYM_TOL {
                return Err(Error::config(format!("{name} is not symmetric")));
            }
            let lo = min_eigenvalue(m);
            if strict && lo <= 0.0 {
                return Err(Error::config(format!("{name} must be positive definite")));
            }
            if !strict && lo < PSD_TOL {
                return Err(Error::config(format!(
                    "{name} must be positive semidefinite"
                )));
            }
        }
        if q.shape() != q_f.shape() {
            return Err(Error::config("Q and Q_f differ in size"));
        }
        Ok(Self { q, q_f, r })
    }

    pub fn identity(d: usize, m: usize) -> Self {
        Self {
            q: Mat::identity(d, d),
            q_f: Mat::identity(d, d),
            r: Mat::identity(m, m),
        }
    }
}

/// Draws zero-mean, component-wise symmetric process noise.
pub trait NoiseSampler: Send + Sync {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vector;
    fn dim(&self) -> usize;
}

/// Gaussian noise `N(0, Σ_w)` drawn through a Cholesky (or eigen) factor.
#[derive(Clone, Debug)]
pub struct GaussianNoise {
    factor: Mat,
}

impl GaussianNoise {
    pub fn new(cov: &Mat) -> Result<Self> {
        let d = cov.nrows();
        if cov.ncols() != d {
            return Err(Error::config("noise covariance must be square"));
        }
        if min_eigenvalue(cov) < PSD_TOL {
            return Err(Error::config(
                "noise covariance is not positive semidefinite",
            ));
        }
        let factor = match Cholesky::new(cov.clone()) {
            Some(ch) => ch.l(),
            None => {
                // singular PSD: use the symmetric square root
                let eig = SymmetricEigen::new(cov.clone());
                let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
                &eig.eigenvectors * Mat::from_diagonal(&sqrt)
            }
        };
        Ok(Self { factor })
    }
}

impl NoiseSampler for GaussianNoise {
    fn sample(&self, rng: &mut dyn rand::RngCore) -> Vector {
        let d = self.factor.nrows();
        let z = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }

    fn dim(&self) -> usize {
        self.factor.nrows()
    }
}

/// Horizon-stacked prediction matrices for one optimization window.
#[derive(Clone, Debug)]
pub struct HorizonStack {
    pub horizon: usize,
    pub recalc: usize,
    pub d: usize,
    pub m: usize,
    /// `[I; A; …; A^N]`, (N+1)d × d
    pub cal_a: Mat,
    /// (N+1)d × Nm, strictly block lower triangular
    pub cal_b: Mat,
    /// (N+1)d × Nd
    pub cal_d: Mat,
    pub cal_q: Mat,
    pub cal_r: Mat,
    /// `ℬᵀ𝒬ℬ + ℛ`
    pub alpha: Mat,
}

impl HorizonStack {
    pub fn build(
        sys: &LinearSystem,
        weights: &CostWeights,
        horizon: usize,
        recalc: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon N must be at least 1"));
        }
        if recalc == 0 || recalc > horizon {
            return Err(Error::config(format!(
                "recalculation interval N_r = {recalc} must satisfy 1 ≤ N_r ≤ N = {horizon}"
            )));
        }
        let d = sys.state_dim();
        let m = sys.input_dim();
        if weights.q.nrows() != d || weights.r.nrows() != m {
            return Err(Error::config(
                "cost weights do not match the system dimensions",
            ));
        }
        let n = horizon;
        let powers: Vec<Mat> = (0..=n).map(|k| mat_pow(&sys.a, k)).collect();

        let mut cal_a = Mat::zeros((n + 1) * d, d);
        let mut cal_b = Mat::zeros((n + 1) * d, n * m);
        let mut cal_d = Mat::zeros((n + 1) * d, n * d);
        for i in 0..=n {
            cal_a.view_mut((i * d, 0), (d, d)).copy_from(&powers[i]);
            for j in 0..i {
                let p = &powers[i - 1 - j];
                cal_b
                    .view_mut((i * d, j * m), (d, m))
                    .copy_from(&(p * &sys.b));
                cal_d.view_mut((i * d, j * d), (d, d)).copy_from(p);
            }
        }

        let mut q_blocks: Vec<&Mat> = vec![&weights.q; n];
        q_blocks.push(&weights.q_f);
        let cal_q = blkdiag(&q_blocks);
        let cal_r = blkdiag(&vec![&weights.r; n]);
        let alpha = crate::linalg::symmetrize(&(cal_b.transpose() * &cal_q * &cal_b + &cal_r));

        Ok(Self {
            horizon: n,
            recalc,
            d,
            m,
            cal_a,
            cal_b,
            cal_d,
            cal_q,
            cal_r,
            alpha,
        })
    }

    /// `𝒜 e_t + ℬ uᵉ + 𝒟 w`
    pub fn stacked_error(&self, e_t: &Vector, u_e: &Vector, w_stack: &Vector) -> Result<Vector> {
        if e_t.len() != self.d {
            return Err(Error::dims("e_t", self.d, e_t.len()));
        }
        if u_e.len() != self.horizon * self.m {
            return Err(Error::dims(
                "stacked input",
                self.horizon * self.m,
                u_e.len(),
            ));
        }
        if w_stack.len() != self.horizon * self.d {
            return Err(Error::dims(
                "stacked noise",
                self.horizon * self.d,
                w_stack.len(),
            ));
        }
        Ok(&self.cal_a * e_t + &self.cal_b * u_e + &self.cal_d * w_stack)
    }

    /// `𝒜ᵀ𝒬ℬ`, d × Nm
    pub fn a_q_b(&self) -> Mat {
        self.cal_a.transpose() * &self.cal_q * &self.cal_b
    }

    /// `𝒟ᵀ𝒬ℬ`, Nd × Nm
    pub fn d_q_b(&self) -> Mat {
        self.cal_d.transpose() * &self.cal_q * &self.cal_b
    }
}
