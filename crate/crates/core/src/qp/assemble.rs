use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::config::ObjectiveForm;
use crate::error::{Error, Result};
use crate::linalg::{kron, Mat, Vector};
use crate::model::HorizonStack;
use crate::moments::{ChannelMoments, NoiseMoments};
use crate::policy::PolicyParams;
use crate::qp::ipm::{QpProblem, SparseRow};
use crate::stability::{DriftRow, ExpectedDriftInput};

/// Flat decision vector: `η`, the free entries of Θ (column-major), then
/// the auxiliaries `a_i ≥ |uʳ_i + η_i|` and `s_k ≥ |θ_k|`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionLayout {
    pub horizon: usize,
    pub m: usize,
    pub d: usize,
    /// `(row, col)` of each free Θ entry
    pub theta_entries: Vec<(usize, usize)>,
    theta_index: Vec<Option<usize>>,
}

impl DecisionLayout {
    pub fn new(horizon: usize, m: usize, d: usize) -> Self {
        let (rows, cols) = (horizon * m, horizon * d);
        let mut theta_entries = Vec::new();
        let mut theta_index = vec![None; rows * cols];
        for c in 0..cols {
            for r in 0..rows {
                if PolicyParams::is_free(r / m, c / d) {
                    theta_index[c * rows + r] = Some(theta_entries.len());
                    theta_entries.push((r, c));
                }
            }
        }
        Self {
            horizon,
            m,
            d,
            theta_entries,
            theta_index,
        }
    }

    pub fn n_eta(&self) -> usize {
        self.horizon * self.m
    }

    pub fn n_theta(&self) -> usize {
        self.theta_entries.len()
    }

    /// Number of policy decisions (without auxiliaries).
    pub fn n_policy(&self) -> usize {
        self.n_eta() + self.n_theta()
    }

    pub fn n_total(&self) -> usize {
        2 * self.n_policy()
    }

    pub fn eta(&self, i: usize) -> usize {
        i
    }

    /// Decision index of Θ entry `(row, col)`, `None` when masked.
    pub fn theta(&self, row: usize, col: usize) -> Option<usize> {
        self.theta_index[col * self.n_eta() + row].map(|k| self.n_eta() + k)
    }

    pub fn abs_nominal(&self, i: usize) -> usize {
        self.n_policy() + i
    }

    pub fn abs_theta(&self, k: usize) -> usize {
        self.n_policy() + self.n_eta() + k
    }

    /// Position of each policy decision inside `[η; vec(Θ)]`.
    fn full_index(&self) -> Vec<usize> {
        let ne = self.n_eta();
        (0..ne)
            .chain(self.theta_entries.iter().map(|&(r, c)| ne + c * ne + r))
            .collect()
    }

    pub fn unpack(&self, z: &Vector) -> Result<PolicyParams> {
        let ne = self.n_eta();
        let eta = z.rows(0, ne).into_owned();
        let mut theta = Mat::zeros(ne, self.horizon * self.d);
        for (k, &(r, c)) in self.theta_entries.iter().enumerate() {
            theta[(r, c)] = z[ne + k];
        }
        PolicyParams::from_parts(eta, theta, self.horizon, self.m, self.d)
    }

    /// Policy decisions with tight auxiliaries.
    pub fn pack(&self, params: &PolicyParams, u_r_stack: &Vector) -> Vector {
        let ne = self.n_eta();
        let mut z = Vector::zeros(self.n_total());
        for i in 0..ne {
            z[i] = params.eta[i];
            z[self.abs_nominal(i)] = (u_r_stack[i] + params.eta[i]).abs();
        }
        for (k, &(r, c)) in self.theta_entries.iter().enumerate() {
            z[ne + k] = params.theta[(r, c)];
            z[self.abs_theta(k)] = params.theta[(r, c)].abs();
        }
        z
    }
}

/// Window-invariant products of the horizon stack.
#[derive(Clone, Debug)]
pub struct ObjectiveData {
    /// `𝒜ᵀ𝒬ℬ`, d × Nm
    pub aqb: Mat,
    /// `𝒟ᵀ𝒬ℬ`, Nd × Nm
    pub dqb: Mat,
}

impl ObjectiveData {
    pub fn new(stack: &HorizonStack) -> Self {
        Self {
            aqb: stack.a_q_b(),
            dqb: stack.d_q_b(),
        }
    }
}

/// Information available at an optimization instant.
#[derive(Clone, Debug)]
pub struct WindowData<'a> {
    pub channel: &'a ChannelMoments,
    pub noise: &'a NoiseMoments,
    pub e_c: &'a Vector,
    pub u_r_stack: &'a Vector,
    pub psi_last: &'a Vector,
    pub form: ObjectiveForm,
}

/// `V′ = vᵀPv + lᵀv` over `v = [η; vec(Θ)]` (column-major, masked entries
/// included).
pub fn full_objective(data: &ObjectiveData, w: &WindowData<'_>) -> Result<(Mat, Vector)> {
    let ne = w.channel.mu_g.nrows();
    let d = w.psi_last.len();
    let nd_cols = w.noise.sigma_psi_w.ncols();
    if d == 0 || nd_cols == 0 || !nd_cols.is_multiple_of(d) {
        return Err(Error::StaleCache(
            "noise moments do not match the horizon".into(),
        ));
    }
    let horizon = nd_cols / d;
    if w.u_r_stack.len() != ne
        || data.aqb.ncols() != ne
        || w.noise.sigma_psi.nrows() != (horizon - 1) * d
    {
        return Err(Error::StaleCache(
            "moment dimensions do not match the window".into(),
        ));
    }
    let nt = ne * horizon * d;
    let nv = ne + nt;
    let first = ne * d;
    let mut p = Mat::zeros(nv, nv);
    let mut l = Vector::zeros(nv);
    let ch = w.channel;

    // ηᵀΣ_Gη
    p.view_mut((0, 0), (ne, ne)).copy_from(&ch.sigma_g);
    // 2ηᵀΣ_GS Θ^{(:,t)}ψ, with L = ψᵀ ⊗ I
    let psi_row = Mat::from_row_slice(1, d, w.psi_last.as_slice());
    let gs_l = kron(&psi_row, &ch.sigma_gs);
    p.view_mut((0, ne), (ne, first)).copy_from(&gs_l);
    p.view_mut((ne, 0), (first, ne))
        .copy_from(&gs_l.transpose());
    // tr(Σ_S Θ^{(:,t)} Π_w Θ^{(:,t)ᵀ})
    let pi = w.psi_last * w.psi_last.transpose();
    p.view_mut((ne, ne), (first, first))
        .copy_from(&kron(&pi, &ch.sigma_s));
    // tr(Σ_S Θ′ Σ_ψ Θ′ᵀ)
    if horizon > 1 {
        let rest = nt - first;
        p.view_mut((ne + first, ne + first), (rest, rest))
            .copy_from(&kron(&w.noise.sigma_psi, &ch.sigma_s));
    }

    let bqa_ec = data.aqb.transpose() * w.e_c;
    // 2 e_Cᵀ𝒜ᵀ𝒬ℬ μ_G η + 2 uʳᵀ Σ_HG η
    let l_eta = (ch.mu_g.transpose() * &bqa_ec + ch.sigma_hg.transpose() * w.u_r_stack) * 2.0;
    l.rows_mut(0, ne).copy_from(&l_eta);
    // terms linear in Θ^{(:,t)}ψ: 2yᵀΘ^{(:,t)}ψ contributes vec(2 y ψᵀ)
    let mut y = ch.sigma_hs.transpose() * w.u_r_stack;
    if w.form == ObjectiveForm::Exact {
        y += ch.mu_s.transpose() * &bqa_ec;
    }
    let g = (y * w.psi_last.transpose()) * 2.0;
    l.rows_mut(ne, first)
        .copy_from(&Vector::from_column_slice(g.as_slice()));
    // 2tr(𝒟ᵀ𝒬ℬμ_S Θ′ Σ_ψw) + 2tr(𝒜ᵀ𝒬ℬμ_S Θ′ Σ_eψ)
    if horizon > 1 {
        let m1 = &w.noise.sigma_psi_w * &data.dqb * &ch.mu_s;
        let m2 = &w.noise.sigma_e_psi * &data.aqb * &ch.mu_s;
        let grad = (m1 + m2).transpose() * 2.0;
        l.rows_mut(ne + first, nt - first)
            .copy_from(&Vector::from_column_slice(grad.as_slice()));
    }
    Ok((p, l))
}

/// Direct evaluation of `V′` term by term.
pub fn objective_value(data: &ObjectiveData, w: &WindowData<'_>, params: &PolicyParams) -> f64 {
    let ch = w.channel;
    let d = w.psi_last.len();
    let eta = &params.eta;
    let theta0 = params.theta.columns(0, d).into_owned();
    let rest = params.theta.ncols() - d;
    let theta1 = params.theta.columns(d, rest).into_owned();
    let fb0 = &theta0 * w.psi_last;
    let pi = w.psi_last * w.psi_last.transpose();

    let mut v = eta.dot(&(&ch.sigma_g * eta));
    v += 2.0 * eta.dot(&(&ch.sigma_gs * &fb0));
    v += (&ch.sigma_s * &theta0 * pi * theta0.transpose()).trace();
    if rest > 0 {
        v += (&ch.sigma_s * &theta1 * &w.noise.sigma_psi * theta1.transpose()).trace();
        v += 2.0 * (&data.dqb * &ch.mu_s * &theta1 * &w.noise.sigma_psi_w).trace();
        v += 2.0 * (&data.aqb * &ch.mu_s * &theta1 * &w.noise.sigma_e_psi).trace();
    }
    v += 2.0 * w.e_c.dot(&(&data.aqb * &ch.mu_g * eta));
    if w.form == ObjectiveForm::Exact {
        v += 2.0 * w.e_c.dot(&(&data.aqb * &ch.mu_s * &fb0));
    }
    v += 2.0 * w.u_r_stack.dot(&(&ch.sigma_hs * &fb0));
    v += 2.0 * w.u_r_stack.dot(&(&ch.sigma_hg * eta));
    v
}

/// Symmetric eigenvalue clipping; returns the largest clipped magnitude.
pub fn psd_guard(h: &mut Mat) -> f64 {
    let eig = SymmetricEigen::new(h.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return 0.0;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    *h = &eig.eigenvectors * Mat::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    *h = (&*h + h.transpose()) * 0.5;
    -min
}

/// Provenance of each constraint row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    NominalAbs { row: usize },
    ThetaAbs { entry: usize },
    InputBound { row: usize },
    Drift { coord: usize },
}

#[derive(Clone, Debug)]
pub struct WindowQp {
    pub layout: DecisionLayout,
    pub problem: QpProblem,
    pub kinds: Vec<RowKind>,
    /// largest eigenvalue magnitude removed by the PSD guard
    pub psd_clip: f64,
    /// minimum eigenvalue before clipping
    pub min_eigenvalue: f64,
}

/// Objective restricted to the free decisions, mapped to `½zᵀHz + fᵀz`.
pub fn assemble_objective(
    layout: &DecisionLayout,
    data: &ObjectiveData,
    w: &WindowData<'_>,
) -> Result<(Mat, Vector, f64, f64)> {
    let (p, l) = full_objective(data, w)?;
    let idx = layout.full_index();
    let np = idx.len();
    let mut hp = Mat::from_fn(np, np, |a, b| 2.0 * p[(idx[a], idx[b])]);
    let scale = hp.amax();
    let min_eig = SymmetricEigen::new(hp.clone()).eigenvalues.min();
    let clip = psd_guard(&mut hp);
    if clip > 1e-6 * scale.max(1e-300) {
        log::warn!(
            "PSD guard clipped {clip:.3e} (‖H‖ = {scale:.3e}); moments may be under-sampled"
        );
    }
    let n = layout.n_total();
    let mut h = Mat::zeros(n, n);
    h.view_mut((0, 0), (np, np)).copy_from(&hp);
    let mut f = Vector::zeros(n);
    for (a, &i) in idx.iter().enumerate() {
        f[a] = l[i];
    }
    Ok((h, f, clip, min_eig))
}

/// Rows of `|uʳ_i + η_i| + φ_max ‖Θ_i‖₁ ≤ u_max` through auxiliaries.
pub fn assemble_input_constraints(
    layout: &DecisionLayout,
    u_r_stack: &Vector,
    phi_max: f64,
    u_max: f64,
    qp: &mut QpProblem,
    kinds: &mut Vec<RowKind>,
) {
    let ne = layout.n_eta();
    for i in 0..ne {
        let a = layout.abs_nominal(i);
        qp.push(
            SparseRow::new([(layout.eta(i), 1.0), (a, -1.0)]),
            -u_r_stack[i],
        );
        kinds.push(RowKind::NominalAbs { row: i });
        qp.push(
            SparseRow::new([(layout.eta(i), -1.0), (a, -1.0)]),
            u_r_stack[i],
        );
        kinds.push(RowKind::NominalAbs { row: i });
    }
    for k in 0..layout.n_theta() {
        let t = layout.n_eta() + k;
        let s = layout.abs_theta(k);
        qp.push(SparseRow::new([(t, 1.0), (s, -1.0)]), 0.0);
        kinds.push(RowKind::ThetaAbs { entry: k });
        qp.push(SparseRow::new([(t, -1.0), (s, -1.0)]), 0.0);
        kinds.push(RowKind::ThetaAbs { entry: k });
    }
    let mut per_row: Vec<Vec<(usize, f64)>> = (0..ne)
        .map(|i| vec![(layout.abs_nominal(i), 1.0)])
        .collect();
    for (k, &(r, _)) in layout.theta_entries.iter().enumerate() {
        per_row[r].push((layout.abs_theta(k), phi_max));
    }
    for (i, entries) in per_row.into_iter().enumerate() {
        qp.push(SparseRow::new(entries), u_max);
        kinds.push(RowKind::InputBound { row: i });
    }
}

/// Drift rows on `E[uᵉ_{t:κ}]` as rows over the decisions.
pub fn drift_rows(
    layout: &DecisionLayout,
    rows: &[DriftRow],
    expected: &ExpectedDriftInput,
) -> Vec<(SparseRow, f64, RowKind)> {
    let d = expected.psi_last.len();
    rows.iter()
        .map(|row| {
            let (a, b) = row.as_leq();
            let mut entries = Vec::new();
            for i in 0..a.len() {
                entries.push((layout.eta(i), a[i] * expected.eta_gain[i]));
                for c in 0..d {
                    if let Some(k) = layout.theta(i, c) {
                        entries.push((k, a[i] * expected.theta_gain[i] * expected.psi_last[c]));
                    }
                }
            }
            (
                SparseRow::new(entries),
                b - a.dot(&expected.offset),
                RowKind::Drift { coord: row.coord },
            )
        })
        .collect()
}

/// Serializable copy of a window problem for external solvers.
#[derive(Clone, Debug, Serialize)]
pub struct QpDump {
    pub n: usize,
    /// row-major Hessian of `½zᵀHz + fᵀz`
    pub hessian: Vec<Vec<f64>>,
    pub linear: Vec<f64>,
    /// dense rows of `Gz ≤ h`
    pub ineq_matrix: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    pub row_kinds: Vec<RowKind>,
    pub n_eta: usize,
    pub theta_entries: Vec<(usize, usize)>,
}

impl WindowQp {
    pub fn dump(&self) -> QpDump {
        let n = self.problem.n();
        QpDump {
            n,
            hessian: (0..n)
                .map(|i| self.problem.hessian.row(i).iter().copied().collect())
                .collect(),
            linear: self.problem.linear.iter().copied().collect(),
            ineq_matrix: self.problem.rows.iter().map(|r| r.to_dense(n)).collect(),
            ineq_rhs: self.problem.rhs.clone(),
            row_kinds: self.kinds.clone(),
            n_eta: self.layout.n_eta(),
            theta_entries: self.layout.theta_entries.clone(),
        }
    }
}
