//! Dense primal-dual interior-point method (Mehrotra predictor-corrector) for
//! `min ½zᵀHz + fᵀz  s.t.  Gz ≤ h` with sparse constraint rows.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let (idx, val) = entries.into_iter().filter(|&(_, v)| v != 0.0).unzip();
        Self { idx, val }
    }

    pub fn dot(&self, z: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * z[i]).sum()
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            out[i] += v;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: Mat,
    pub linear: Vector,
    pub rows: Vec<SparseRow>,
    pub rhs: Vec<f64>,
}

impl QpProblem {
    pub fn new(hessian: Mat, linear: Vector) -> Result<Self> {
        let n = linear.len();
        if hessian.shape() != (n, n) {
            return Err(Error::dims("QP Hessian", n, hessian.nrows()));
        }
        Ok(Self {
            hessian,
            linear,
            rows: Vec::new(),
            rhs: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    /// Append `rowᵀ z ≤ rhs`.
    pub fn push(&mut self, row: SparseRow, rhs: f64) {
        self.rows.push(row);
        self.rhs.push(rhs);
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// `max_i (g_iᵀz − h_i)⁺`
    pub fn max_violation(&self, z: &Vector) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .map(|(r, &b)| (r.dot(z.as_slice()) - b).max(0.0))
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if self
            .hessian
            .iter()
            .chain(self.linear.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Solver("non-finite objective data".into()));
        }
        for (k, (r, b)) in self.rows.iter().zip(&self.rhs).enumerate() {
            if !b.is_finite() || r.val.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver(format!("constraint row {k} is not finite")));
            }
            if r.idx.iter().any(|&i| i >= n) {
                return Err(Error::Solver(format!(
                    "constraint row {k} indexes past the decision vector"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub z: Vector,
    pub multipliers: Vector,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// rows violated by the least-infeasible point, when infeasible
    pub violated_rows: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpmSettings {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol_feas: 1e-9,
            tol_opt: 1e-9,
            max_iter: 80,
        }
    }
}

/// Solver backend seam.
pub trait QpBackend: Send + Sync {
    fn solve(&self, problem: &QpProblem) -> Result<QpSolution>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InteriorPoint {
    pub settings: IpmSettings,
}

impl QpBackend for InteriorPoint {
    fn solve(&self, problem: &QpProblem) -> Result<QpSolution> {
        problem.validate()?;
        let sol = mehrotra(problem, &self.settings)?;
        if sol.status == QpStatus::Optimal {
            return Ok(sol);
        }
        // stalled: decide feasibility with the phase-one program
        let (tau, z1) = phase_one(problem, &self.settings)?;
        let tol = self.settings.tol_feas.sqrt() * (1.0 + inf(&problem.rhs));
        if tau > tol {
            let violated = problem
                .rows
                .iter()
                .zip(&problem.rhs)
                .enumerate()
                .filter(|(_, (r, &b))| r.dot(z1.as_slice()) - b > 0.5 * tau)
                .map(|(k, _)| k)
                .collect();
            return Ok(QpSolution {
                status: QpStatus::Infeasible,
                violated_rows: violated,
                primal_residual: tau,
                ..sol
            });
        }
        Ok(sol)
    }
}

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Kkt<'a> {
    p: &'a QpProblem,
}

impl Kkt<'_> {
    fn g_mul(&self, z: &[f64]) -> Vec<f64> {
        self.p.rows.iter().map(|r| r.dot(z)).collect()
    }

    fn gt_mul(&self, y: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.p.n());
        for (r, &yk) in self.p.rows.iter().zip(y) {
            if yk != 0.0 {
                for (&i, &v) in r.idx.iter().zip(&r.val) {
                    out[i] += v * yk;
                }
            }
        }
        out
    }

    fn factor(&self, w: &[f64]) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let n = self.p.n();
        let mut k = self.p.hessian.clone();
        for (r, &wk) in self.p.rows.iter().zip(w) {
            for (a, &ia) in r.idx.iter().enumerate() {
                let va = wk * r.val[a];
                for (b, &ib) in r.idx.iter().enumerate() {
                    k[(ia, ib)] += va * r.val[b];
                }
            }
        }
        let scale = (0..n).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
        let mut reg = 0.0;
        for _ in 0..8 {
            let mut kr = k.clone();
            if reg > 0.0 {
                for i in 0..n {
                    kr[(i, i)] += reg;
                }
            }
            if let Some(ch) = Cholesky::new(kr) {
                return Ok(ch);
            }
            reg = if reg == 0.0 {
                1e-14 * scale
            } else {
                reg * 100.0
            };
        }
        Err(Error::Solver("KKT system is not positive definite".into()))
    }
}

fn max_step(x: &[f64], dx: &[f64]) -> f64 {
    x.iter()
        .zip(dx)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&v, &d)| -v / d)
        .fold(1.0, f64::min)
}

fn mehrotra(p: &QpProblem, set: &IpmSettings) -> Result<QpSolution> {
    let n = p.n();
    let m = p.rows.len();
    let kkt = Kkt { p };
    let h = &p.rhs;

    if m == 0 {
        let ch = Cholesky::new(p.hessian.clone())
            .ok_or_else(|| Error::Solver("unconstrained QP with a singular Hessian".into()))?;
        let z = -ch.solve(&p.linear);
        return Ok(QpSolution {
            objective: p.objective(&z),
            z,
            multipliers: Vector::zeros(0),
            status: QpStatus::Optimal,
            iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            gap: 0.0,
            violated_rows: Vec::new(),
        });
    }

    let mut z = Vector::zeros(n);
    let gz = kkt.g_mul(z.as_slice());
    let mut s: Vec<f64> = h.iter().zip(&gz).map(|(&b, &g)| (b - g).max(1.0)).collect();
    let mut lam = vec![1.0; m];

    let h_scale = 1.0 + inf(h);
    let f_scale = 1.0 + p.linear.amax() + p.hessian.amax();
    let mut best: Option<QpSolution> = None;

    for iter in 0..=set.max_iter {
        let gz = kkt.g_mul(z.as_slice());
        let r_p: Vec<f64> = (0..m).map(|k| gz[k] + s[k] - h[k]).collect();
        let r_d = &p.hessian * &z + &p.linear + kkt.gt_mul(&lam);
        let mu = s.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        let obj = p.objective(&z);
        let pres = inf(&r_p);
        let dres = r_d.amax();

        let converged = pres <= set.tol_feas * h_scale
            && dres <= set.tol_opt * f_scale
            && mu <= set.tol_opt * (1.0 + obj.abs());
        let snapshot = |status| QpSolution {
            z: z.clone(),
            multipliers: Vector::from_vec(lam.clone()),
            objective: obj,
            status,
            iterations: iter,
            primal_residual: pres,
            dual_residual: dres,
            gap: mu,
            violated_rows: Vec::new(),
        };
        if converged {
            return Ok(snapshot(QpStatus::Optimal));
        }
        let merit = pres / h_scale + dres / f_scale + mu;
        if best
            .as_ref()
            .is_none_or(|b| merit < b.primal_residual / h_scale + b.dual_residual / f_scale + b.gap)
        {
            best = Some(snapshot(QpStatus::MaxIterations));
        }
        if iter == set.max_iter || lam.iter().any(|l| !l.is_finite() || *l > 1e14) {
            break;
        }

        let w: Vec<f64> = (0..m).map(|k| lam[k] / s[k]).collect();
        let ch = kkt.factor(&w)?;

        let solve = |r_c: &[f64]| -> (Vector, Vec<f64>, Vec<f64>) {
            // KΔz = −r_d − GᵀS⁻¹(−r_c + Λ r_p)
            let t: Vec<f64> = (0..m).map(|k| (-r_c[k] + lam[k] * r_p[k]) / s[k]).collect();
            let rhs = -&r_d - kkt.gt_mul(&t);
            let dz = ch.solve(&rhs);
            let gdz = kkt.g_mul(dz.as_slice());
            let ds: Vec<f64> = (0..m).map(|k| -r_p[k] - gdz[k]).collect();
            let dl: Vec<f64> = (0..m).map(|k| (-r_c[k] - lam[k] * ds[k]) / s[k]).collect();
            (dz, ds, dl)
        };

        let r_c: Vec<f64> = (0..m).map(|k| s[k] * lam[k]).collect();
        let (_, ds_a, dl_a) = solve(&r_c);
        let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (0..m)
            .map(|k| (s[k] + a_aff * ds_a[k]) * (lam[k] + a_aff * dl_a[k]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let r_c: Vec<f64> = (0..m)
            .map(|k| s[k] * lam[k] + ds_a[k] * dl_a[k] - sigma * mu)
            .collect();
        let (dz, ds, dl) = solve(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);

        z += dz * alpha;
        for k in 0..m {
            s[k] = (s[k] + alpha * ds[k]).max(1e-300);
            lam[k] = (lam[k] + alpha * dl[k]).max(1e-300);
        }
    }
    let mut out = best.expect("at least one iterate");
    // accept a slightly loose but clearly converged point
    if out.primal_residual <= 1e-7 * h_scale
        && out.dual_residual <= 1e-6 * f_scale
        && out.gap <= 1e-6 * (1.0 + out.objective.abs())
    {
        out.status = QpStatus::Optimal;
    }
    Ok(out)
}

/// `min τ s.t. Gz − τ ≤ h, τ ≥ −1`, with a tiny proximal term on z.
fn phase_one(p: &QpProblem, set: &IpmSettings) -> Result<(f64, Vector)> {
    let n = p.n();
    let mut hess = Mat::identity(n + 1, n + 1) * 1e-8;
    hess[(n, n)] = 0.0;
    let mut lin = Vector::zeros(n + 1);
    lin[n] = 1.0;
    let mut q = QpProblem::new(hess, lin)?;
    for (r, &b) in p.rows.iter().zip(&p.rhs) {
        let mut row = r.clone();
        row.idx.push(n);
        row.val.push(-1.0);
        q.push(row, b);
    }
    q.push(SparseRow::new([(n, -1.0)]), 1.0);
    let sol = mehrotra(&q, set)?;
    let z = sol.z.rows(0, n).into_owned();
    Ok((p.max_violation(&z), z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solve(p: &QpProblem) -> QpSolution {
        InteriorPoint::default().solve(p).unwrap()
    }

    #[test]
    fn single_active_constraint() {
        let mut p = QpProblem::new(Mat::from_element(1, 1, 2.0), Vector::zeros(1)).unwrap();
        p.push(SparseRow::new([(0, 1.0)]), -1.0);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], -1.0, epsilon = 1e-7);
    }

    #[test]
    fn inactive_constraints_recover_newton_step() {
        let h = Mat::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let f = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let exact = -h.clone().cholesky().unwrap().solve(&f);
        let mut p = QpProblem::new(h, f).unwrap();
        for i in 0..3 {
            p.push(SparseRow::new([(i, 1.0)]), 1e3);
            p.push(SparseRow::new([(i, -1.0)]), 1e3);
        }
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z - exact).amax() < 1e-6);
    }

    #[test]
    fn detects_infeasibility() {
        let mut p = QpProblem::new(Mat::identity(2, 2), Vector::zeros(2)).unwrap();
        p.push(SparseRow::new([(0, 1.0)]), -1.0);
        p.push(SparseRow::new([(0, -1.0)]), -1.0);
        p.push(SparseRow::new([(1, 1.0)]), 5.0);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Infeasible);
        assert_eq!(s.violated_rows, vec![0, 1]);
        assert!(s.primal_residual > 0.5);
    }

    #[test]
    fn linear_program_with_psd_hessian() {
        // min −z₀ − z₁  s.t. z₀ + 2z₁ ≤ 4, 3z₀ + z₁ ≤ 6, z ≥ 0
        let mut p = QpProblem::new(Mat::zeros(2, 2), Vector::from_vec(vec![-1.0, -1.0])).unwrap();
        p.push(SparseRow::new([(0, 1.0), (1, 2.0)]), 4.0);
        p.push(SparseRow::new([(0, 3.0), (1, 1.0)]), 6.0);
        p.push(SparseRow::new([(0, -1.0)]), 0.0);
        p.push(SparseRow::new([(1, -1.0)]), 0.0);
        let s = solve(&p);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.z[0], 1.6, epsilon = 1e-6);
        assert_relative_eq!(s.z[1], 1.2, epsilon = 1e-6);
    }

    #[test]
    fn deterministic() {
        let mut p = QpProblem::new(Mat::identity(2, 2), Vector::from_vec(vec![3.0, -1.0])).unwrap();
        p.push(SparseRow::new([(0, 1.0), (1, 1.0)]), 0.5);
        p.push(SparseRow::new([(0, -1.0)]), 1.0);
        let a = solve(&p);
        let b = solve(&p);
        assert_eq!(a.z, b.z);
        assert_eq!(a.iterations, b.iterations);
    }
}
