//! Reference governor: turns a raw reference into a dynamically consistent
//! pair `(xʳ, uʳ)` using at most a fraction δ of the input authority.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::LinearSystem;
use crate::qp::{InteriorPoint, IpmSettings, QpBackend, QpProblem, QpStatus, SparseRow};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GovernorOutput {
    pub x_r: Vec<Vector>,
    pub u_r: Vec<Vector>,
    pub delta: f64,
    /// `max_t ‖xʳ_t − r_t‖²`
    pub gamma_g: f64,
}

impl GovernorOutput {
    pub fn len(&self) -> usize {
        self.x_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_r.is_empty()
    }

    /// `[uʳ_t; …; uʳ_{t+n−1}]`, holding zero past the end.
    pub fn u_stack(&self, t: usize, n: usize) -> Vector {
        let m = self.u_r.first().map_or(0, |u| u.len());
        let mut out = Vector::zeros(n * m);
        for k in 0..n {
            if let Some(u) = self.u_r.get(t + k) {
                out.rows_mut(k * m, m).copy_from(u);
            }
        }
        out
    }
}

fn validate_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config(format!("δ = {delta} must lie in (0, 1)")));
    }
    Ok(())
}

fn gamma(x_r: &[Vector], r: &[Vector]) -> f64 {
    x_r.iter()
        .zip(r)
        .map(|(x, r)| (x - r).norm_squared())
        .fold(0.0, f64::max)
}

/// Batch solution of
/// `min Σ_t ‖x_t − r_t‖² + ρ‖u_t‖²  s.t.  x_{t+1} = Ax_t + Bu_t, ‖u_t‖_∞ ≤ δ u_max, x_0 = r_0`
/// over `t = 0..len(r)−1`, where ρ is `input_weight` (1 for the displayed
/// problem).
pub fn solve_governor_ocp(
    sys: &LinearSystem,
    r: &[Vector],
    delta: f64,
    input_weight: f64,
) -> Result<GovernorOutput> {
    validate_delta(delta)?;
    if r.is_empty() {
        return Err(Error::config("reference sequence is empty"));
    }
    if !(input_weight > 0.0 && input_weight.is_finite()) {
        return Err(Error::config("governor input weight must be positive"));
    }
    let d = sys.state_dim();
    let m = sys.input_dim();
    if let Some(bad) = r.iter().position(|v| v.len() != d) {
        return Err(Error::config(format!(
            "reference sample {bad} has the wrong dimension"
        )));
    }
    let t_len = r.len();
    let nu = t_len * m;

    // x_t = Aᵗ r_0 + Σ_{j<t} A^{t−1−j} B u_j
    let mut free = vec![r[0].clone()];
    for t in 1..t_len {
        free.push(&sys.a * &free[t - 1]);
    }
    let mut gamma_mat = Mat::zeros(t_len * d, nu);
    let mut block = sys.b.clone();
    let mut blocks = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        blocks.push(block.clone());
        block = &sys.a * block;
    }
    for t in 1..t_len {
        for j in 0..t {
            gamma_mat
                .view_mut((t * d, j * m), (d, m))
                .copy_from(&blocks[t - 1 - j]);
        }
    }
    let mut offset = Vector::zeros(t_len * d);
    for t in 0..t_len {
        offset.rows_mut(t * d, d).copy_from(&(&free[t] - &r[t]));
    }
    let gt = gamma_mat.transpose();
    let hess = (&gt * &gamma_mat + Mat::identity(nu, nu) * input_weight) * 2.0;
    let lin = &gt * &offset * 2.0;
    let mut qp = QpProblem::new(hess, lin)?;
    let bound = delta * sys.u_max;
    for i in 0..nu {
        qp.push(SparseRow::new([(i, 1.0)]), bound);
        qp.push(SparseRow::new([(i, -1.0)]), bound);
    }
    let backend = InteriorPoint {
        settings: IpmSettings {
            tol_feas: 1e-11,
            tol_opt: 1e-11,
            max_iter: 100,
        },
    };
    let sol = backend.solve(&qp)?;
    if sol.status != QpStatus::Optimal {
        return Err(Error::Solver(format!(
            "governor QP ended with {:?}",
            sol.status
        )));
    }
    let u_r: Vec<Vector> = (0..t_len)
        .map(|t| sol.z.rows(t * m, m).map(|v| v.clamp(-bound, bound)))
        .collect();
    // roll the dynamics forward so they hold to round-off
    let mut x_r = vec![r[0].clone()];
    for t in 1..t_len {
        x_r.push(&sys.a * &x_r[t - 1] + &sys.b * &u_r[t - 1]);
    }
    let gamma_g = gamma(&x_r, r);
    Ok(GovernorOutput {
        x_r,
        u_r,
        delta,
        gamma_g,
    })
}

/// `uʳ_t = amplitude · sin(frequency · t)` on every input channel.
pub fn sinusoid_input(m: usize, amplitude: f64, frequency: f64, t: usize) -> Vector {
    Vector::from_element(m, amplitude * (frequency * t as f64).sin())
}

/// Closed-form governor for a reference generated by the plant itself:
/// `r_{t+1} = A r_t + B uʳ_t`, `r_0 = x_0`, so `xʳ = r`.
pub fn sinusoid_governor(
    sys: &LinearSystem,
    x0: &Vector,
    amplitude: f64,
    frequency: f64,
    delta: f64,
    len: usize,
) -> Result<GovernorOutput> {
    validate_delta(delta)?;
    if amplitude.abs() > delta * sys.u_max {
        return Err(Error::config(format!(
            "sinusoid amplitude {amplitude} exceeds δ u_max = {}",
            delta * sys.u_max
        )));
    }
    let m = sys.input_dim();
    let mut x_r = Vec::with_capacity(len);
    let mut u_r = Vec::with_capacity(len);
    let mut x = x0.clone();
    for t in 0..len {
        let u = sinusoid_input(m, amplitude, frequency, t);
        let next = &sys.a * &x + &sys.b * &u;
        x_r.push(std::mem::replace(&mut x, next));
        u_r.push(u);
    }
    Ok(GovernorOutput {
        x_r,
        u_r,
        delta,
        gamma_g: 0.0,
    })
}

/// `(r_t, uʳ_t)` of the sinusoid recursion at time `t`.
pub fn sinusoid_reference(
    sys: &LinearSystem,
    x0: &Vector,
    amplitude: f64,
    frequency: f64,
    t: usize,
) -> (Vector, Vector) {
    let m = sys.input_dim();
    let mut x = x0.clone();
    for k in 0..t {
        x = &sys.a * &x + &sys.b * sinusoid_input(m, amplitude, frequency, k);
    }
    (x, sinusoid_input(m, amplitude, frequency, t))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackReport {
    pub dynamics_residual: f64,
    pub dynamics_ok: bool,
    pub input_peak: f64,
    pub input_ok: bool,
    /// measured `max_t ‖xʳ_t − r_t‖²`
    pub gamma_measured: f64,
    pub gamma_ok: bool,
}

impl TrackReport {
    pub fn passed(&self) -> bool {
        self.dynamics_ok && self.input_ok && self.gamma_ok
    }
}

/// Check the three trackability conditions within `tol`.
pub fn check_trackable(
    out: &GovernorOutput,
    sys: &LinearSystem,
    r: &[Vector],
    tol: f64,
) -> TrackReport {
    let dynamics_residual = (1..out.x_r.len())
        .map(|t| (&out.x_r[t] - &sys.a * &out.x_r[t - 1] - &sys.b * &out.u_r[t - 1]).amax())
        .fold(0.0, f64::max);
    let input_peak = out.u_r.iter().map(|u| u.amax()).fold(0.0, f64::max);
    let aligned = out.x_r.len() == r.len() && out.u_r.len() == r.len();
    let gamma_measured = gamma(&out.x_r, r);
    TrackReport {
        dynamics_residual,
        dynamics_ok: aligned && dynamics_residual <= tol,
        input_peak,
        input_ok: input_peak <= out.delta * sys.u_max + tol,
        gamma_measured,
        gamma_ok: aligned && gamma_measured <= out.gamma_g + tol,
    }
}

/// Read a reference from CSV with header `t, r_1, …, r_d`.
pub fn read_reference_csv(path: &Path, d: usize) -> Result<Vec<Vector>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != d + 1 || &headers[0] != "t" {
        return Err(Error::Parse(format!(
            "{}: expected header t, r_1..r_{d}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad time index on row {k}", path.display())))?;
        if t != k {
            return Err(Error::Parse(format!(
                "{}: time index {t} on row {k}",
                path.display()
            )));
        }
        let vals = (1..=d)
            .map(|j| {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}: bad value on row {k}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Vector::from_vec(vals));
    }
    if out.is_empty() {
        return Err(Error::Parse(format!(
            "{}: no reference rows",
            path.display()
        )));
    }
    Ok(out)
}

/// Write `t, r_*, xr_*, ur_*`.
pub fn write_governor_csv(path: &Path, out: &GovernorOutput, r: &[Vector]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = out.x_r.first().map_or(0, |x| x.len());
    let m = out.u_r.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|j| format!("r_{j}")));
    header.extend((1..=d).map(|j| format!("xr_{j}")));
    header.extend((1..=m).map(|j| format!("ur_{j}")));
    w.write_record(&header)?;
    for (t, ((r_t, x_t), u_t)) in r.iter().zip(&out.x_r).zip(&out.u_r).enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(r_t.iter().map(|v| v.to_string()));
        row.extend(x_t.iter().map(|v| v.to_string()));
        row.extend(u_t.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::benchmark_system;
    use crate::linalg::vec_from;

    fn scalar(u_max: f64) -> LinearSystem {
        LinearSystem::new(
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 1.0),
            Mat::zeros(1, 1),
            u_max,
        )
        .unwrap()
    }

    #[test]
    fn zero_reference() {
        let sys = benchmark_system();
        let r = vec![Vector::zeros(4); 10];
        let out = solve_governor_ocp(&sys, &r, 0.5, 1.0).unwrap();
        assert!(out.u_r.iter().all(|u| u.amax() < 1e-9));
        assert!(out.gamma_g < 1e-16);
    }

    #[test]
    fn unreachable_step() {
        // δ u_max = 1, r jumps to 10
        let sys = scalar(2.0);
        let mut r = vec![vec_from(&[10.0]); 6];
        r[0] = vec_from(&[0.0]);
        let out = solve_governor_ocp(&sys, &r, 0.5, 1.0).unwrap();
        for t in 0..5 {
            assert!(
                (out.u_r[t][0] - 1.0).abs() < 1e-7,
                "u_{t} = {}",
                out.u_r[t][0]
            );
        }
        assert!(out.u_r[5][0].abs() < 1e-7);
        assert!((out.gamma_g - 81.0).abs() < 1e-6);

        // grid oracle over constant-then-free inputs
        let cost = |u: &[f64]| {
            let mut x = 0.0;
            let mut c = 0.0;
            for t in 0..6 {
                c += (x - r[t][0]).powi(2) + u[t] * u[t];
                x += u[t];
            }
            c
        };
        let best = cost(&out.u_r.iter().map(|u| u[0]).collect::<Vec<_>>());
        let grid: Vec<f64> = (0..=20).map(|k| -1.0 + 0.1 * k as f64).collect();
        for &a in &grid {
            for &b in &grid {
                let mut u = vec![1.0; 6];
                u[0] = a;
                u[4] = b;
                u[5] = 0.0;
                assert!(cost(&u) >= best - 1e-6);
            }
        }
    }

    #[test]
    fn sinusoid_first_step() {
        let sys = benchmark_system();
        let x0 = Vector::from_element(4, 1.0);
        let (r1, u0) = sinusoid_reference(&sys, &x0, 2.5, 0.083, 0);
        assert_eq!(u0[0], 0.0);
        assert_eq!(r1, x0);
        let out = sinusoid_governor(&sys, &x0, 2.5, 0.083, 0.5, 200).unwrap();
        assert_eq!(out.x_r[1], &sys.a * &x0);
        assert!(out.u_r.iter().all(|u| u.amax() <= 2.5));
        let r = out.x_r.clone();
        assert!(check_trackable(&out, &sys, &r, 1e-12).passed());
        let (r10, u10) = sinusoid_reference(&sys, &x0, 2.5, 0.083, 10);
        assert!((r10 - &out.x_r[10]).amax() < 1e-12);
        assert_eq!(u10, out.u_r[10]);
    }

    #[test]
    fn ocp_recovers_sinusoid_with_vanishing_input_weight() {
        let sys = benchmark_system();
        let x0 = Vector::from_element(4, 1.0);
        let rec = sinusoid_governor(&sys, &x0, 2.5, 0.083, 0.5, 40).unwrap();
        let ocp = solve_governor_ocp(&sys, &rec.x_r, 0.5, 1e-10).unwrap();
        assert!(ocp.gamma_g < 1e-6, "γ = {}", ocp.gamma_g);
        assert!((&ocp.x_r[10] - &rec.x_r[10]).amax() < 1e-6);
        // the unit-weight problem trades tracking for input energy
        let unit = solve_governor_ocp(&sys, &rec.x_r, 0.5, 1.0).unwrap();
        assert!(unit.gamma_g > 1e-3);
        assert!(check_trackable(&unit, &sys, &rec.x_r, 1e-8).passed());
    }

    #[test]
    fn trackability_violations() {
        let sys = benchmark_system();
        let x0 = Vector::from_element(4, 1.0);
        let out = sinusoid_governor(&sys, &x0, 2.5, 0.083, 0.5, 30).unwrap();
        let r = out.x_r.clone();
        let mut bad = out.clone();
        bad.u_r[3][0] = 2.6;
        assert!(!check_trackable(&bad, &sys, &r, 1e-6).input_ok);
        let mut bad = out.clone();
        bad.x_r[7][1] += 1e-3;
        let rep = check_trackable(&bad, &sys, &r, 1e-6);
        assert!(!rep.dynamics_ok);
        let mut bad = out.clone();
        bad.x_r[7][1] += 0.1;
        assert!(!check_trackable(&bad, &sys, &r, 1e-6).gamma_ok);
    }

    #[test]
    fn rejects_bad_delta() {
        let sys = scalar(1.0);
        assert!(solve_governor_ocp(&sys, &[vec_from(&[0.0])], 1.2, 1.0).is_err());
        assert!(solve_governor_ocp(&sys, &[], 0.5, 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "t,r_1,r_2\n0,1.0,2.0\n1,3.5,-1\n").unwrap();
        let r = read_reference_csv(&p, 2).unwrap();
        assert_eq!(r, vec![vec_from(&[1.0, 2.0]), vec_from(&[3.5, -1.0])]);
        assert!(matches!(read_reference_csv(&p, 3), Err(Error::Parse(_))));
        let sys = LinearSystem::new(
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Mat::zeros(2, 2),
            10.0,
        )
        .unwrap();
        let out = solve_governor_ocp(&sys, &r, 0.5, 1.0).unwrap();
        let q = dir.path().join("g.csv");
        write_governor_csv(&q, &out, &r).unwrap();
        let text = std::fs::read_to_string(&q).unwrap();
        assert!(text.starts_with("t,r_1,r_2,xr_1,xr_2,ur_1,ur_2\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
