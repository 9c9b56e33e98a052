//! Standing assumptions, orthogonal/Schur-stable split of the plant, the
//! reachability index of the orthogonal part and the drift constraints that
//! keep the controller error mean-square bounded.

use nalgebra::Complex;

use crate::error::{Error, Result};
use crate::linalg::{
    mat_pow, null_space, orthogonality_residual, pinv, pivoted_basis, polar_orthogonal, rank,
    shifted_real_embedding, sigma_max, Mat, Vector,
};
use crate::model::LinearSystem;

/// Eigenvalues within this distance of the unit circle are treated as on it.
pub const UNIT_TOL: f64 = 1e-8;
/// Eigenvalues with modulus in `(1 − AMBIGUOUS_TOL, 1 − UNIT_TOL)` cannot be classified.
pub const AMBIGUOUS_TOL: f64 = 1e-4;
const CLUSTER_TOL: f64 = 1e-6;
const RANK_TOL: f64 = 1e-8;
const REORTHO_EVERY: usize = 100;

pub fn eigenvalues(a: &Mat) -> Vec<Complex<f64>> {
    let mut ev: Vec<Complex<f64>> = a.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| {
        y.norm()
            .partial_cmp(&x.norm())
            .unwrap()
            .then(y.re.partial_cmp(&x.re).unwrap())
            .then(y.im.partial_cmp(&x.im).unwrap())
    });
    ev
}

/// Group eigenvalues closer than `CLUSTER_TOL`; returns (representative, multiplicity).
fn cluster(ev: &[Complex<f64>]) -> Vec<(Complex<f64>, usize)> {
    let mut out: Vec<(Complex<f64>, usize)> = Vec::new();
    for &l in ev {
        match out.iter_mut().find(|(c, _)| (c - l).norm() < CLUSTER_TOL) {
            Some((_, k)) => *k += 1,
            None => out.push((l, 1)),
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub eigenvalues: Vec<Complex<f64>>,
    /// all |λ| ≤ 1
    pub spectrum_in_disk: bool,
    /// unit-circle eigenvalues are semi-simple
    pub unit_semisimple: bool,
    pub controllable: bool,
    /// Human-readable notes on each failed check.
    pub failures: Vec<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.spectrum_in_disk && self.unit_semisimple && self.controllable
    }

    pub fn into_result(self) -> Result<Self> {
        if !(self.spectrum_in_disk && self.unit_semisimple) {
            return Err(Error::Assumption {
                assumption: "A2",
                detail: self.failures.join("; "),
            });
        }
        if !self.controllable {
            return Err(Error::Assumption {
                assumption: "A3",
                detail: self.failures.join("; "),
            });
        }
        Ok(self)
    }
}

/// Checks the spectral and controllability assumptions on `(A, B)`. The noise
/// moment assumption holds for the built-in Gaussian sampler.
pub fn validate_assumptions(sys: &LinearSystem) -> AssumptionReport {
    let a = &sys.a;
    let d = sys.state_dim();
    let ev = eigenvalues(a);
    let mut failures = Vec::new();

    let spectrum_in_disk = ev.iter().all(|l| l.norm() <= 1.0 + 1e-10);
    if !spectrum_in_disk {
        let worst = ev.iter().map(|l| l.norm()).fold(0.0, f64::max);
        failures.push(format!("A2: spectral radius {worst:.6} exceeds 1"));
    }

    let mut unit_semisimple = true;
    for (l, alg) in cluster(&ev) {
        if (l.norm() - 1.0).abs() > CLUSTER_TOL {
            continue;
        }
        let geo = d - rank(&shifted_real_embedding(a, l.re, l.im), RANK_TOL) / 2;
        if geo != alg {
            unit_semisimple = false;
            failures.push(format!(
                "A2: unit eigenvalue {:.4}{:+.4}i has algebraic multiplicity {alg} but geometric {geo}",
                l.re, l.im
            ));
        }
    }

    let mut ctrb = Mat::zeros(d, d * sys.input_dim());
    let mut blk = sys.b.clone();
    for k in 0..d {
        ctrb.view_mut((0, k * sys.input_dim()), blk.shape())
            .copy_from(&blk);
        blk = a * blk;
    }
    let ctrb_rank = rank(&ctrb, 1e-10);
    let controllable = ctrb_rank == d;
    if !controllable {
        failures.push(format!(
            "A3: controllability matrix has rank {ctrb_rank} < {d}"
        ));
    }

    AssumptionReport {
        eigenvalues: ev,
        spectrum_in_disk,
        unit_semisimple,
        controllable,
        failures,
    }
}

/// `T A T⁻¹ = blkdiag(A_o, A_s)` with `A_o` orthogonal and `A_s` Schur stable.
#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub t: Mat,
    pub t_inv: Mat,
    pub a_o: Mat,
    pub a_s: Mat,
    pub b_o: Mat,
    pub b_s: Mat,
    pub d_o: usize,
    pub d_s: usize,
    /// `‖T A T⁻¹ − blkdiag(A_o, A_s)‖_F` after orthogonal projection of `A_o`.
    pub residual: f64,
}

impl SpectralSplit {
    /// Orthogonal-part coordinates `(T e)^o`.
    pub fn orthogonal_part(&self, e: &Vector) -> Vector {
        (&self.t * e).rows(0, self.d_o).into_owned()
    }
}

/// Real basis of the unit-circle invariant subspace in which `A` acts by
/// plane rotations and ±1 reflections.
fn rotation_basis(a: &Mat, unit: &[(Complex<f64>, usize)]) -> Result<Mat> {
    let d = a.nrows();
    let eye = Mat::identity(d, d);
    let mut cols: Vec<Vector> = Vec::new();
    for &(l, _) in unit {
        if l.im.abs() < CLUSTER_TOL {
            let ns = null_space(&(a - &eye * l.re.signum()), RANK_TOL);
            cols.extend(ns.column_iter().map(|c| c.into_owned()));
        } else if l.im > 0.0 {
            let (c, s) = (l.re, l.im);
            let ns = null_space(&(a * a - a * (2.0 * c) + &eye), RANK_TOL);
            let mut chosen: Vec<Vector> = Vec::new();
            while chosen.len() < ns.ncols() {
                // pick the null-space direction farthest from what is already spanned
                let mut best: Option<Vector> = None;
                let mut best_norm = 0.0;
                for col in ns.column_iter() {
                    let mut r = col.into_owned();
                    for q in &chosen {
                        let proj = q.dot(&r) / q.norm_squared();
                        r -= q * proj;
                    }
                    if r.norm() > best_norm {
                        best_norm = r.norm();
                        best = Some(r);
                    }
                }
                let Some(av) = best.filter(|_| best_norm > 1e-8) else {
                    return Err(Error::Assumption {
                        assumption: "A2",
                        detail: "could not build a rotation basis for the unit-circle part".into(),
                    });
                };
                let av = &av / av.norm();
                let bv = (&av * c - a * &av) / s;
                chosen.push(av);
                chosen.push(bv);
            }
            cols.extend(chosen);
        }
    }
    Ok(if cols.is_empty() {
        Mat::zeros(d, 0)
    } else {
        Mat::from_columns(&cols)
    })
}

/// Splits the plant into an orthogonal part (unit-circle eigenvalues) and a
/// Schur-stable part.
pub fn decompose(a: &Mat, b: &Mat) -> Result<SpectralSplit> {
    let d = a.nrows();
    let ev = eigenvalues(a);
    for l in &ev {
        let gap = 1.0 - l.norm();
        if gap < -1e-10 {
            return Err(Error::Assumption {
                assumption: "A2",
                detail: format!("eigenvalue with |λ| = {} outside the unit disk", l.norm()),
            });
        }
        if gap > UNIT_TOL && gap < AMBIGUOUS_TOL {
            return Err(Error::AmbiguousSplit { modulus: l.norm() });
        }
    }
    let unit: Vec<(Complex<f64>, usize)> = cluster(&ev)
        .into_iter()
        .filter(|(l, _)| (l.norm() - 1.0).abs() <= CLUSTER_TOL)
        .collect();
    let d_o: usize = unit.iter().map(|(_, k)| k).sum();
    let d_s = d - d_o;
    let eye = Mat::identity(d, d);

    // annihilating polynomial of the unit part; its range is the stable subspace
    let mut poly = eye.clone();
    let mut null_cols: Vec<Vector> = Vec::new();
    for &(l, _) in &unit {
        let factor = if l.im.abs() < CLUSTER_TOL {
            a - &eye * l.re.signum()
        } else if l.im > 0.0 {
            a * a - a * (2.0 * l.re) + &eye
        } else {
            continue;
        };
        let ns = null_space(&factor, RANK_TOL);
        null_cols.extend(ns.column_iter().map(|c| c.into_owned()));
        poly = factor * poly;
    }
    if null_cols.len() != d_o {
        return Err(Error::Assumption {
            assumption: "A2",
            detail: format!(
                "unit-circle eigenvalues are not semi-simple (eigenspace dimension {} < {d_o})",
                null_cols.len()
            ),
        });
    }

    let (basis_o, a_o) = if d_o == 0 {
        (Mat::zeros(d, 0), Mat::zeros(0, 0))
    } else {
        let raw = pivoted_basis(&Mat::from_columns(&null_cols), d_o);
        let projector = &raw * raw.transpose();
        let u_o = pivoted_basis(&projector, d_o);
        let m_o = u_o.transpose() * a * &u_o;
        if orthogonality_residual(&m_o) <= 1e-6 {
            (u_o, polar_orthogonal(&m_o))
        } else {
            let w_o = rotation_basis(a, &unit)?;
            let m_o = pinv(&w_o) * a * &w_o;
            (w_o, polar_orthogonal(&m_o))
        }
    };
    let basis_s = if d_s == 0 {
        Mat::zeros(d, 0)
    } else {
        pivoted_basis(&poly, d_s)
    };
    if basis_s.ncols() != d_s {
        return Err(Error::Assumption {
            assumption: "A2",
            detail: "stable invariant subspace has the wrong dimension".into(),
        });
    }

    let mut t_inv = Mat::zeros(d, d);
    t_inv.columns_mut(0, d_o).copy_from(&basis_o);
    t_inv.columns_mut(d_o, d_s).copy_from(&basis_s);
    let t = t_inv
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Assumption {
            assumption: "A2",
            detail: "spectral basis is singular".into(),
        })?;
    let similar = &t * a * &t_inv;
    let a_s = similar.view((d_o, d_o), (d_s, d_s)).into_owned();
    let tb = &t * b;
    let b_o = tb.rows(0, d_o).into_owned();
    let b_s = tb.rows(d_o, d_s).into_owned();
    let block = crate::linalg::blkdiag(&[&a_o, &a_s]);
    let residual = (similar - block).norm();

    Ok(SpectralSplit {
        t,
        t_inv,
        a_o,
        a_s,
        b_o,
        b_s,
        d_o,
        d_s,
        residual,
    })
}

/// `R_κ = [A_o^{κ−1}B_o ⋯ A_oB_o B_o]`
pub fn reachability_matrix(a_o: &Mat, b_o: &Mat, kappa: usize) -> Mat {
    let (d_o, m) = b_o.shape();
    let mut r = Mat::zeros(d_o, kappa * m);
    for i in 0..kappa {
        let blk = mat_pow(a_o, kappa - 1 - i) * b_o;
        r.view_mut((0, i * m), (d_o, m)).copy_from(&blk);
    }
    r
}

/// Smallest κ with `rank R_κ = d_o`.
pub fn reachability(a_o: &Mat, b_o: &Mat) -> Result<(usize, Mat)> {
    let d_o = a_o.nrows();
    if d_o == 0 {
        return Ok((0, Mat::zeros(0, 0)));
    }
    for kappa in 1..=d_o {
        let r = reachability_matrix(a_o, b_o, kappa);
        if rank(&r, 1e-10) == d_o {
            return Ok((kappa, r));
        }
    }
    Err(Error::Assumption {
        assumption: "A3",
        detail: "orthogonal part of (A, B) is not controllable".into(),
    })
}

/// `(1 − δ) u_max / (√d_o σ₁(R_κ†))`, or `None` when there is no orthogonal part.
pub fn zeta_max(delta: f64, u_max: f64, r_kappa: &Mat, d_o: usize) -> Option<f64> {
    if d_o == 0 {
        return None;
    }
    let s = sigma_max(&pinv(r_kappa));
    Some((1.0 - delta) * u_max / ((d_o as f64).sqrt() * s))
}

/// Per-path drift machinery; keeps a running power `A_oᵗ`.
#[derive(Clone, Debug)]
pub struct DriftParams {
    pub kappa: usize,
    pub r_kappa: Mat,
    pub zeta: f64,
    pub c: f64,
    a_o: Mat,
    power: Mat,
    power_t: usize,
    since_reortho: usize,
}

impl DriftParams {
    pub fn new(
        split: &SpectralSplit,
        kappa: usize,
        r_kappa: Mat,
        zeta: f64,
        c: f64,
    ) -> Result<Self> {
        if split.d_o > 0 && !(zeta > 0.0 && c > 0.0) {
            return Err(Error::config(format!(
                "drift parameters must be positive (ζ = {zeta}, c = {c})"
            )));
        }
        Ok(Self {
            kappa,
            r_kappa,
            zeta,
            c,
            a_o: split.a_o.clone(),
            power: Mat::identity(split.d_o, split.d_o),
            power_t: 0,
            since_reortho: 0,
        })
    }

    pub fn d_o(&self) -> usize {
        self.a_o.nrows()
    }

    /// `A_oᵗ`; time only moves forward.
    pub fn power_at(&mut self, t: usize) -> Result<&Mat> {
        if t < self.power_t {
            return Err(Error::Scheduling(format!(
                "A_o power requested at t = {t} after t = {}",
                self.power_t
            )));
        }
        while self.power_t < t {
            self.power = &self.power * &self.a_o;
            self.power_t += 1;
            self.since_reortho += 1;
            if self.since_reortho >= REORTHO_EVERY {
                self.power = polar_orthogonal(&self.power);
                self.since_reortho = 0;
            }
        }
        Ok(&self.power)
    }
}

/// Direction of a single drift constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriftSense {
    /// `(coeffᵀ E[uᵉ]) ≤ −ζ`
    Decrease,
    /// `(coeffᵀ E[uᵉ]) ≥ ζ`
    Increase,
}

#[derive(Clone, Debug)]
pub struct DriftRow {
    pub coord: usize,
    pub sense: DriftSense,
    /// row `j` of `(A_o^{t+κ})ᵀ R_κ`, length κm
    pub coeff: Vector,
    pub zeta: f64,
}

impl DriftRow {
    /// As `aᵀ E[uᵉ] ≤ b`.
    pub fn as_leq(&self) -> (Vector, f64) {
        match self.sense {
            DriftSense::Decrease => (self.coeff.clone(), -self.zeta),
            DriftSense::Increase => (-&self.coeff, -self.zeta),
        }
    }

    pub fn satisfied_by(&self, expected_ue: &Vector, tol: f64) -> bool {
        let (a, b) = self.as_leq();
        a.dot(expected_ue) <= b + tol
    }
}

/// Drift constraints active at optimization instant `t` (a multiple of κ),
/// expressed on `E[uᵉ_{t:κ}]`.
pub fn drift_constraints(
    split: &SpectralSplit,
    drift: &mut DriftParams,
    e_c: &Vector,
    t: usize,
) -> Result<Vec<DriftRow>> {
    if split.d_o == 0 {
        return Ok(Vec::new());
    }
    if drift.kappa == 0 || !t.is_multiple_of(drift.kappa) {
        return Err(Error::Scheduling(format!(
            "drift constraints requested at t = {t}, not a multiple of κ = {}",
            drift.kappa
        )));
    }
    let e_o = split.orthogonal_part(e_c);
    let p_t = drift.power_at(t)?.clone();
    let rotated = p_t.transpose() * e_o;
    let p_next = &p_t * mat_pow(&split.a_o, drift.kappa);
    let gain = p_next.transpose() * &drift.r_kappa;
    let mut rows = Vec::new();
    for j in 0..split.d_o {
        let sense = if rotated[j] > drift.c {
            DriftSense::Decrease
        } else if rotated[j] < -drift.c {
            DriftSense::Increase
        } else {
            continue;
        };
        rows.push(DriftRow {
            coord: j,
            sense,
            coeff: gain.row(j).transpose(),
            zeta: drift.zeta,
        });
    }
    Ok(rows)
}

/// Affine map from decisions to `E[uᵉ_{t:κ}]` given time-t information:
/// `(μ_G − I)uʳ + μ_G η + μ_S Θ^{(:,t)} ψ(w̃_{t−1})` restricted to the first κ
/// blocks (the `uʳ` term vanishes when the actuator stores `uʳ`).
#[derive(Clone, Debug)]
pub struct ExpectedDriftInput {
    pub offset: Vector,
    /// diagonal of the leading κm block of `μ_G`
    pub eta_gain: Vector,
    /// diagonal of the leading κm block of `μ_S`
    pub theta_gain: Vector,
    pub psi_last: Vector,
}

impl ExpectedDriftInput {
    pub fn new(
        mu_g_diag: &Vector,
        mu_s_diag: &Vector,
        u_r: &Vector,
        h_equals_g: bool,
        psi_last: Vector,
        km: usize,
    ) -> Self {
        let eta_gain = mu_g_diag.rows(0, km).into_owned();
        let offset = if h_equals_g {
            u_r.rows(0, km).component_mul(&eta_gain.map(|g| g - 1.0))
        } else {
            Vector::zeros(km)
        };
        Self {
            offset,
            eta_gain,
            theta_gain: mu_s_diag.rows(0, km).into_owned(),
            psi_last,
        }
    }

    pub fn evaluate(&self, eta: &Vector, theta: &Mat) -> Vector {
        let km = self.offset.len();
        let d = self.psi_last.len();
        let fb = theta.view((0, 0), (km, d)) * &self.psi_last;
        &self.offset
            + self.eta_gain.component_mul(&eta.rows(0, km))
            + self.theta_gain.component_mul(&fb)
    }
}
