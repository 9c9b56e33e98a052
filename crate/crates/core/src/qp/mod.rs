//! The per-window convex program: objective, hard input rows, drift rows.

pub mod assemble;
pub mod ipm;

use serde::{Deserialize, Serialize};

pub use assemble::{
    assemble_input_constraints, assemble_objective, objective_value, psd_guard, DecisionLayout,
    ObjectiveData, QpDump, RowKind, WindowData, WindowQp,
};
pub use ipm::{InteriorPoint, IpmSettings, QpBackend, QpProblem, QpSolution, QpStatus, SparseRow};

use crate::config::{InfeasiblePolicy, ObjectiveForm};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::moments::{ChannelMoments, NoiseMoments};
use crate::policy::{input_constraint_rows, PolicyParams};
use crate::stability::{DriftRow, ExpectedDriftInput};

/// Fraction of `u_max` kept free of round-off in the returned policy.
const BOUND_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WindowSettings {
    pub phi_max: f64,
    pub u_max: f64,
    pub form: ObjectiveForm,
    pub on_infeasible: InfeasiblePolicy,
    pub ipm: IpmSettings,
}

/// Time-`t` inputs of one window problem.
#[derive(Clone, Debug)]
pub struct WindowRequest<'a> {
    pub channel: &'a ChannelMoments,
    pub noise: &'a NoiseMoments,
    pub e_c: &'a Vector,
    pub u_r_stack: &'a Vector,
    pub psi_last: &'a Vector,
    pub drift: &'a [DriftRow],
    pub expected: &'a ExpectedDriftInput,
}

#[derive(Clone, Debug)]
pub struct WindowOutcome {
    pub params: PolicyParams,
    /// `V′` at the returned decisions
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub drift_rows: usize,
    /// largest drift-row violation of the returned policy (0 when satisfied)
    pub drift_violation: f64,
    /// the drift rows were infeasible and had to be relaxed
    pub relaxed: bool,
    pub psd_clip: f64,
    pub min_eigenvalue: f64,
}

pub fn build_window_qp(
    layout: &DecisionLayout,
    data: &ObjectiveData,
    settings: &WindowSettings,
    req: &WindowRequest<'_>,
) -> Result<WindowQp> {
    let w = WindowData {
        channel: req.channel,
        noise: req.noise,
        e_c: req.e_c,
        u_r_stack: req.u_r_stack,
        psi_last: req.psi_last,
        form: settings.form,
    };
    let (h, f, psd_clip, min_eigenvalue) = assemble_objective(layout, data, &w)?;
    let mut problem = QpProblem::new(h, f)?;
    let mut kinds = Vec::new();
    let bound = settings.u_max * (1.0 - 1e-9);
    assemble_input_constraints(
        layout,
        req.u_r_stack,
        settings.phi_max,
        bound,
        &mut problem,
        &mut kinds,
    );
    for (row, rhs, kind) in assemble::drift_rows(layout, req.drift, req.expected) {
        problem.push(row, rhs);
        kinds.push(kind);
    }
    Ok(WindowQp {
        layout: layout.clone(),
        problem,
        kinds,
        psd_clip,
        min_eigenvalue,
    })
}

fn drift_indices(qp: &WindowQp) -> Vec<usize> {
    (0..qp.kinds.len())
        .filter(|&k| matches!(qp.kinds[k], RowKind::Drift { .. }))
        .collect()
}

/// Smallest total drift-row violation compatible with the hard rows:
/// `min Σe  s.t.  hard rows, aᵀz − e ≤ b, e ≥ 0` (tiny proximal term on z).
fn minimal_drift_violation(qp: &WindowQp, backend: &InteriorPoint) -> Result<Vec<f64>> {
    let p = &qp.problem;
    let n = p.n();
    let drift = drift_indices(qp);
    let nn = n + drift.len();
    let mut h = crate::linalg::Mat::zeros(nn, nn);
    for i in 0..n {
        h[(i, i)] = 1e-8;
    }
    let mut f = Vector::zeros(nn);
    for e in n..nn {
        f[e] = 1.0;
    }
    let mut lp = QpProblem::new(h, f)?;
    let mut slack = n;
    for (k, (row, &b)) in p.rows.iter().zip(&p.rhs).enumerate() {
        let mut row = row.clone();
        if drift.contains(&k) {
            row.idx.push(slack);
            row.val.push(-1.0);
            lp.push(SparseRow::new([(slack, -1.0)]), 0.0);
            slack += 1;
        }
        lp.push(row, b);
    }
    let sol = backend.solve(&lp)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver(format!(
            "drift relaxation stopped with {:?} (primal {:.2e})",
            sol.status, sol.primal_residual
        )));
    }
    Ok((n..nn).map(|e| sol.z[e].max(0.0)).collect())
}

/// The window problem with each drift row loosened by its minimal violation.
fn relaxed(qp: &WindowQp, backend: &InteriorPoint) -> Result<QpProblem> {
    let excess = minimal_drift_violation(qp, backend)?;
    let mut p = qp.problem.clone();
    for (k, e) in drift_indices(qp).into_iter().zip(excess) {
        p.rhs[k] += e + 1e-7 * (1.0 + p.rhs[k].abs());
    }
    Ok(p)
}

/// Scale rows of the policy that exceed `u_max(1 − BOUND_GUARD)` so the
/// returned decisions satisfy the input constraint without tolerance.
fn enforce_input_bound(params: &mut PolicyParams, u_r_stack: &Vector, phi_max: f64, u_max: f64) {
    let target = u_max * (1.0 - BOUND_GUARD);
    for i in 0..params.eta.len() {
        let nominal = u_r_stack[i] + params.eta[i];
        let l1: f64 = params.theta.row(i).iter().map(|v| v.abs()).sum();
        let total = nominal.abs() + phi_max * l1;
        if total > target {
            let f = target / total;
            params.eta[i] = f * nominal - u_r_stack[i];
            for v in params.theta.row_mut(i).iter_mut() {
                *v *= f;
            }
        }
    }
}

/// Assemble, solve and decode one window.
pub fn optimize_window(
    layout: &DecisionLayout,
    data: &ObjectiveData,
    settings: &WindowSettings,
    req: &WindowRequest<'_>,
) -> Result<WindowOutcome> {
    let qp = build_window_qp(layout, data, settings, req)?;
    solve_window(&qp, data, settings, req)
}

pub fn solve_window(
    qp: &WindowQp,
    data: &ObjectiveData,
    settings: &WindowSettings,
    req: &WindowRequest<'_>,
) -> Result<WindowOutcome> {
    let backend = InteriorPoint {
        settings: settings.ipm,
    };
    let mut sol = backend.solve(&qp.problem)?;
    let mut relaxed_flag = false;
    if sol.status == QpStatus::Infeasible {
        let rows: Vec<usize> = sol.violated_rows.clone();
        log::debug!(
            "window QP infeasible; violated rows {:?}",
            rows.iter().map(|&k| qp.kinds[k]).collect::<Vec<_>>()
        );
        match settings.on_infeasible {
            InfeasiblePolicy::Abort => {
                return Err(Error::Infeasible {
                    rows,
                    violation: sol.primal_residual,
                })
            }
            InfeasiblePolicy::Relax => {
                sol = backend.solve(&relaxed(qp, &backend)?)?;
                relaxed_flag = true;
            }
        }
    }
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver(format!(
            "window QP stopped with {:?} after {} iterations (primal {:.2e}, dual {:.2e}, gap {:.2e})",
            sol.status, sol.iterations, sol.primal_residual, sol.dual_residual, sol.gap
        )));
    }

    let mut params = qp.layout.unpack(&sol.z)?;
    enforce_input_bound(&mut params, req.u_r_stack, settings.phi_max, settings.u_max);
    if let Some(bad) =
        input_constraint_rows(&params, req.u_r_stack, settings.phi_max, settings.u_max)
            .iter()
            .position(|r| !r.satisfied)
    {
        return Err(Error::Solver(format!(
            "returned policy violates input row {bad}"
        )));
    }
    let expected = req.expected.evaluate(&params.eta, &params.theta);
    let drift_violation = req
        .drift
        .iter()
        .map(|row| {
            let (a, b) = row.as_leq();
            (a.dot(&expected) - b).max(0.0)
        })
        .fold(0.0, f64::max);
    let w = WindowData {
        channel: req.channel,
        noise: req.noise,
        e_c: req.e_c,
        u_r_stack: req.u_r_stack,
        psi_last: req.psi_last,
        form: settings.form,
    };
    Ok(WindowOutcome {
        objective: objective_value(data, &w, &params),
        params,
        status: sol.status,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        drift_rows: req.drift.len(),
        drift_violation,
        relaxed: relaxed_flag,
        psd_clip: qp.psd_clip,
        min_eigenvalue: qp.min_eigenvalue,
    })
}
