//! Closed-loop sample paths: plant, lossy links, TP1 buffer, compensator,
//! governor and the per-window QP, plus ensemble statistics and sweeps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{actuator_output, tp1_payload, Buffer, HMode};
use crate::compensator::{estimator_error_step, CompensatorState};
use crate::config::{ExperimentConfig, InfeasiblePolicy, ReferenceSpec};
use crate::error::{Error, Result};
use crate::governor::{read_reference_csv, sinusoid_governor, solve_governor_ocp, GovernorOutput};
use crate::linalg::{Mat, Vector};
use crate::model::{GaussianNoise, HorizonStack, NoiseSampler};
use crate::moments::{cache_dir, model_hash, CacheKey, MomentSet, NoiseMomentSpec};
use crate::policy::PolicyParams;
use crate::qp::{
    build_window_qp, optimize_window, DecisionLayout, IpmSettings, ObjectiveData, QpStatus,
    WindowQp, WindowRequest, WindowSettings,
};
use crate::rng::{domain, stream};
use crate::stability::{
    decompose, drift_constraints, reachability, validate_assumptions, zeta_max, AssumptionReport,
    DriftParams, ExpectedDriftInput, SpectralSplit,
};

/// Structural facts derived from the plant before any simulation.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub assumptions: AssumptionReport,
    pub split: SpectralSplit,
    /// reachability index of the orthogonal part (0 when there is none)
    pub kappa: usize,
    pub r_kappa: Mat,
    pub zeta_max: Option<f64>,
    pub zeta: f64,
    pub c: f64,
}

impl Analysis {
    /// Checks the plant assumptions, splits the spectrum and enforces
    /// `N_r = κ` and `ζ ≤ ζ_max`.
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let assumptions = validate_assumptions(&cfg.system).into_result()?;
        let split = decompose(&cfg.system.a, &cfg.system.b)?;
        let (kappa, r_kappa) = reachability(&split.a_o, &split.b_o)?;
        if split.d_o > 0 && kappa != cfg.recalc {
            return Err(Error::config(format!(
                "recalculation interval N_r = {} must equal the reachability index κ = {kappa} of the orthogonal part",
                cfg.recalc
            )));
        }
        if kappa > cfg.horizon {
            return Err(Error::config(format!(
                "κ = {kappa} exceeds the horizon N = {}",
                cfg.horizon
            )));
        }
        let zmax = zeta_max(cfg.delta, cfg.system.u_max, &r_kappa, split.d_o);
        let (zeta, c) = match zmax {
            Some(z) => (cfg.zeta.resolve(z), cfg.c.resolve(z)),
            None => (0.0, 0.0),
        };
        if let Some(z) = zmax {
            if zeta > z * (1.0 + 1e-12) {
                return Err(Error::config(format!(
                    "drift level ζ = {zeta} exceeds ζ_max = {z}"
                )));
            }
            if !(zeta > 0.0 && c > 0.0) {
                return Err(Error::config(format!(
                    "drift parameters must be positive (ζ = {zeta}, c = {c})"
                )));
            }
        }
        Ok(Self {
            assumptions,
            split,
            kappa,
            r_kappa,
            zeta_max: zmax,
            zeta,
            c,
        })
    }

    /// κ used for the channel statistics; falls back to `N_r` without an
    /// orthogonal part.
    pub fn moment_kappa(&self, cfg: &ExperimentConfig) -> usize {
        if self.split.d_o == 0 {
            cfg.recalc
        } else {
            self.kappa
        }
    }
}

pub fn cache_key(cfg: &ExperimentConfig, analysis: &Analysis) -> CacheKey {
    CacheKey {
        p_c: cfg.channel.p_c,
        p_s: cfg.channel.p_s,
        horizon: cfg.horizon,
        recalc: cfg.recalc,
        kappa: analysis.moment_kappa(cfg),
        h_max: cfg.moments.h_max,
        channel_samples: cfg.moments.channel_samples,
        noise_samples: cfg.moments.noise_samples,
        seed: cfg.moments.seed,
        h_mode: cfg.h_mode,
        saturation: cfg.saturation,
        model_hash: model_hash(&cfg.system, &cfg.weights),
    }
}

fn noise_spec(cfg: &ExperimentConfig) -> Result<NoiseMomentSpec> {
    NoiseMomentSpec::new(
        &cfg.system,
        cfg.channel.p_s,
        cfg.saturation,
        cfg.horizon,
        cfg.moments.noise_samples,
        cfg.moments.seed,
    )
}

/// Where moment sets come from.
#[derive(Clone, Debug)]
pub enum MomentSource {
    /// Load from or write to this directory.
    Cache(PathBuf),
    /// Compute in memory only.
    Memory,
}

impl MomentSource {
    /// The directory named by the environment, or the default.
    pub fn default_cache() -> Self {
        MomentSource::Cache(cache_dir())
    }
}

/// Returns the moment set for `cfg`, reusing a matching cache file and
/// rebuilding a stale or missing one. The second value is the cache file, if any.
pub fn obtain_moments(
    cfg: &ExperimentConfig,
    analysis: &Analysis,
    source: &MomentSource,
) -> Result<(Arc<MomentSet>, Option<PathBuf>)> {
    let key = cache_key(cfg, analysis);
    let spec = noise_spec(cfg)?;
    let path = match source {
        MomentSource::Cache(dir) => Some(dir.join(key.file_name())),
        MomentSource::Memory => None,
    };
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        match MomentSet::load(p, Some(&key)) {
            Ok(mut set) => {
                log::info!("loaded moments from {}", p.display());
                set.attach_spec(spec);
                return Ok((Arc::new(set), path));
            }
            Err(Error::StaleCache(why)) | Err(Error::Parse(why)) => {
                log::warn!("rebuilding moment cache: {why}")
            }
            Err(Error::Json(e)) => log::warn!("rebuilding unreadable moment cache: {e}"),
            Err(e) => return Err(e),
        }
    }
    let stack = HorizonStack::build(&cfg.system, &cfg.weights, cfg.horizon, cfg.recalc)?;
    let set = MomentSet::compute(key, &stack, spec)?;
    if let Some(p) = &path {
        set.save(p)?;
        log::info!("wrote moments to {}", p.display());
    }
    Ok((Arc::new(set), path))
}

/// Raw reference and its governed version, both `len` long.
pub fn build_reference(
    cfg: &ExperimentConfig,
    len: usize,
) -> Result<(Vec<Vector>, GovernorOutput)> {
    let sys = &cfg.system;
    let (d, m) = (sys.state_dim(), sys.input_dim());
    match &cfg.reference {
        ReferenceSpec::Sinusoid {
            amplitude,
            frequency,
        } => {
            let gov = sinusoid_governor(sys, &cfg.x0, *amplitude, *frequency, cfg.delta, len)?;
            Ok((gov.x_r.clone(), gov))
        }
        ReferenceSpec::Zero => {
            let r = vec![Vector::zeros(d); len];
            let gov = GovernorOutput {
                x_r: r.clone(),
                u_r: vec![Vector::zeros(m); len],
                delta: cfg.delta,
                gamma_g: 0.0,
            };
            Ok((r, gov))
        }
        ReferenceSpec::Csv { path } => {
            let full = if path.is_absolute() {
                path.clone()
            } else {
                cfg.base_dir.join(path)
            };
            let mut r = read_reference_csv(&full, d)?;
            if r.is_empty() {
                return Err(Error::config("reference file has no rows"));
            }
            // hold the last sample to cover the prediction horizon
            let last = r[r.len() - 1].clone();
            r.resize(len.max(r.len()), last);
            r.truncate(len);
            let gov = solve_governor_ocp(sys, &r, cfg.delta, 1.0)?;
            Ok((r, gov))
        }
    }
}

/// Everything one path needs, shared read-only across workers.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub analysis: Analysis,
    pub stack: HorizonStack,
    pub data: ObjectiveData,
    pub layout: DecisionLayout,
    pub moments: Arc<MomentSet>,
    pub reference: Vec<Vector>,
    pub governor: GovernorOutput,
    pub settings: WindowSettings,
    sampler: GaussianNoise,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("steps", &self.config.steps)
            .field("paths", &self.config.paths)
            .field("moments", &self.moments)
            .finish_non_exhaustive()
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig, source: &MomentSource) -> Result<Self> {
        let analysis = Analysis::of(&config)?;
        let (moments, _) = obtain_moments(&config, &analysis, source)?;
        Self::with_moments(config, analysis, moments)
    }

    pub fn with_moments(
        config: ExperimentConfig,
        analysis: Analysis,
        moments: Arc<MomentSet>,
    ) -> Result<Self> {
        let expected = cache_key(&config, &analysis);
        if moments.key != expected {
            return Err(Error::StaleCache(
                "moment set was computed for a different configuration".into(),
            ));
        }
        let stack = HorizonStack::build(
            &config.system,
            &config.weights,
            config.horizon,
            config.recalc,
        )?;
        let data = ObjectiveData::new(&stack);
        let layout = DecisionLayout::new(
            config.horizon,
            config.system.input_dim(),
            config.system.state_dim(),
        );
        let (reference, governor) = build_reference(&config, config.steps + config.horizon)?;
        let settings = WindowSettings {
            phi_max: config.saturation.phi_max(),
            u_max: config.system.u_max,
            form: config.objective,
            on_infeasible: config.on_infeasible,
            ipm: IpmSettings::default(),
        };
        let sampler = GaussianNoise::new(&config.system.noise_cov)?;
        Ok(Self {
            config,
            analysis,
            stack,
            data,
            layout,
            moments,
            reference,
            governor,
            settings,
            sampler,
        })
    }
}

/// One simulated step.
#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    pub x_tilde: Vector,
    pub x_r: Vector,
    pub r: Vector,
    /// full control computed by the controller
    pub u: Vector,
    pub u_a: Vector,
    pub u_r: Vector,
    pub w: Vector,
    pub nu: bool,
    pub s: bool,
    /// consecutive downlink losses ending at `t`
    pub h: usize,
    pub e_o: Vector,
    pub e_d: Vector,
    pub e_c: Vector,
    pub e_g: Vector,
    /// set at optimization instants
    pub qp: Option<WindowRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowStatus {
    Optimal,
    /// drift rows were infeasible and were softened
    Relaxed,
    /// drift rows were infeasible and the path stopped
    Aborted,
}

impl WindowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowStatus::Optimal => "optimal",
            WindowStatus::Relaxed => "relaxed",
            WindowStatus::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct WindowRecord {
    pub status: WindowStatus,
    pub iterations: usize,
    pub objective: f64,
    pub drift_rows: usize,
    pub drift_violation: f64,
    pub psd_clip: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimTrace {
    pub path: usize,
    pub steps: Vec<StepRecord>,
    /// the path stopped early on an infeasible window
    pub aborted: bool,
    /// largest `‖eᴼ − (eᴰ + eᶜ + eᴳ)‖∞`
    pub identity_residual: f64,
    /// largest gap between the closed-loop `x − x̃` and the estimator-error recursion
    pub estimator_residual: f64,
    /// largest gap between the compensator disturbance and `s_t(A eᴰ_{t−1} + w_{t−1})`
    pub compensator_residual: f64,
    /// `max_t ‖uᵃ_t‖∞`
    pub input_peak: f64,
}

impl SimTrace {
    pub fn windows(&self) -> impl Iterator<Item = &WindowRecord> {
        self.steps.iter().filter_map(|s| s.qp.as_ref())
    }

    /// Windows whose drift rows could not be met as posed.
    pub fn infeasible_windows(&self) -> usize {
        self.windows()
            .filter(|w| w.status != WindowStatus::Optimal)
            .count()
    }
}

#[inline]
fn draw_bit(p: f64, rng: &mut impl Rng) -> bool {
    // one uniform per step for any p keeps sweeps on common random numbers
    rng.random::<f64>() < p
}

/// Simulates one closed-loop path.
pub fn run_path(exp: &Experiment, path: usize) -> Result<SimTrace> {
    let cfg = &exp.config;
    let sys = &cfg.system;
    let (d, m) = (sys.state_dim(), sys.input_dim());
    let (n, n_r) = (cfg.horizon, cfg.recalc);
    let sat = cfg.saturation;
    let mut noise_rng = stream(cfg.seed, domain::PATH_NOISE, path as u64);
    let mut up_rng = stream(cfg.seed, domain::PATH_UPLINK, path as u64);
    let mut down_rng = stream(cfg.seed, domain::PATH_DOWNLINK, path as u64);

    let mut drift = DriftParams::new(
        &exp.analysis.split,
        exp.analysis.kappa,
        exp.analysis.r_kappa.clone(),
        exp.analysis.zeta,
        exp.analysis.c,
    )?;
    let mut comp = CompensatorState::new(d, m);
    let mut buffer = Buffer::new(n_r, m);
    let mut x = cfg.x0.clone();
    let mut u_a_prev = Vector::zeros(m);
    let mut w_prev = Vector::zeros(d);
    let mut e_d_ref = Vector::zeros(d);
    let mut policy = PolicyParams::zeros(n, m, d);
    let mut window_start = 0usize;
    let mut u_r_stack = Vector::zeros(n * m);
    let mut psi_hist: Vec<Vector> = Vec::with_capacity(n_r);

    let mut trace = SimTrace {
        path,
        steps: Vec::with_capacity(cfg.steps),
        aborted: false,
        identity_residual: 0.0,
        estimator_residual: 0.0,
        compensator_residual: 0.0,
        input_peak: 0.0,
    };

    for t in 0..cfg.steps {
        // downlink and compensator
        let s = draw_bit(cfg.channel.p_s, &mut down_rng);
        comp.update(sys, s, s.then_some(&x), &u_a_prev)?;
        let h = comp.consecutive_dropouts;
        let e_d = &x - &comp.x_tilde;
        if t > 0 {
            e_d_ref = estimator_error_step(&e_d_ref, s, &w_prev, sys);
            let expected_w = if s {
                &sys.a * &trace.steps[t - 1].e_d + &w_prev
            } else {
                Vector::zeros(d)
            };
            let gap = (&comp.reconstruct_w_tilde(sys)? - &expected_w)
                .amax()
                .max((&comp.w_tilde_last - &expected_w).amax());
            trace.compensator_residual = trace.compensator_residual.max(gap);
            trace.estimator_residual = trace.estimator_residual.max((&e_d - &e_d_ref).amax());
        } else {
            e_d_ref = e_d.clone();
        }
        let psi = sat.apply_vec(&comp.w_tilde_last);

        let x_r = &exp.governor.x_r[t];
        let u_r = &exp.governor.u_r[t];
        let r = &exp.reference[t];
        let e_c = &comp.x_tilde - x_r;

        // optimization instant
        let mut window = None;
        if t % n_r == 0 {
            u_r_stack = exp.governor.u_stack(t, n);
            let channel = &exp.moments.channel;
            let noise = exp.moments.noise(h)?;
            let rows = drift_constraints(&exp.analysis.split, &mut drift, &e_c, t)?;
            let expected = ExpectedDriftInput::new(
                &channel.mu_g_diag(),
                &channel.mu_s_diag(),
                &u_r_stack,
                cfg.h_mode == HMode::EqualsG,
                psi.clone(),
                n_r * m,
            );
            let req = WindowRequest {
                channel,
                noise: &noise,
                e_c: &e_c,
                u_r_stack: &u_r_stack,
                psi_last: &psi,
                drift: &rows,
                expected: &expected,
            };
            match optimize_window(&exp.layout, &exp.data, &exp.settings, &req) {
                Ok(out) => {
                    debug_assert_eq!(out.status, QpStatus::Optimal);
                    window = Some(WindowRecord {
                        status: if out.relaxed {
                            WindowStatus::Relaxed
                        } else {
                            WindowStatus::Optimal
                        },
                        iterations: out.iterations,
                        objective: out.objective,
                        drift_rows: out.drift_rows,
                        drift_violation: out.drift_violation,
                        psd_clip: out.psd_clip,
                    });
                    policy = out.params;
                }
                Err(Error::Infeasible { rows, violation })
                    if cfg.on_infeasible == InfeasiblePolicy::Abort =>
                {
                    log::warn!("path {path}: infeasible window at t = {t} (rows {rows:?}, violation {violation:.2e}); path aborted");
                    if let Some(last) = trace.steps.last_mut() {
                        last.qp.get_or_insert(WindowRecord {
                            status: WindowStatus::Aborted,
                            iterations: 0,
                            objective: f64::NAN,
                            drift_rows: 0,
                            drift_violation: violation,
                            psd_clip: 0.0,
                        });
                    }
                    trace.aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            window_start = t;
            psi_hist.clear();
        }
        psi_hist.push(psi);
        let k = t - window_start;

        // controller, TP1 and actuator
        let u = policy.compute_control(u_r, &psi_hist, k)?;
        let strip = |v: Vector, ur: &Vector| match cfg.h_mode {
            HMode::EqualsG => v,
            HMode::EqualsI => v - ur,
        };
        let tail: Vec<Vector> = (k + 1..n_r)
            .map(|j| {
                let ur_j = u_r_stack.rows(j * m, m).into_owned();
                strip(policy.nominal(&ur_j, j), &ur_j)
            })
            .collect();
        let payload = tp1_payload(k, buffer.is_empty(), strip(u.clone(), u_r), &tail);
        let nu = draw_bit(cfg.channel.p_c, &mut up_rng);
        let block = buffer.tick(k, &payload, nu)?;
        let u_a = actuator_output(cfg.h_mode, block, u_r);
        let peak = u_a.amax();
        if peak > sys.u_max {
            return Err(Error::Solver(format!(
                "path {path}: applied input {peak} exceeds u_max at t = {t}"
            )));
        }
        trace.input_peak = trace.input_peak.max(peak);

        // errors and plant
        let e_o = &x - r;
        let e_g = x_r - r;
        let residual = (&e_o - (&e_d + &e_c + &e_g)).amax();
        trace.identity_residual = trace.identity_residual.max(residual);
        let w = exp.sampler.sample(&mut noise_rng);
        let x_next = sys.step(&x, &u_a, &w)?;
        trace.steps.push(StepRecord {
            t,
            x: std::mem::replace(&mut x, x_next),
            x_tilde: comp.x_tilde.clone(),
            x_r: x_r.clone(),
            r: r.clone(),
            u,
            u_a: u_a.clone(),
            u_r: u_r.clone(),
            w: w.clone(),
            nu,
            s,
            h,
            e_o,
            e_d,
            e_c,
            e_g,
            qp: window,
        });
        u_a_prev = u_a;
        w_prev = w;
    }
    Ok(trace)
}

/// The first window problem of `path`, exactly as the simulator poses it.
pub fn first_window(exp: &Experiment, path: usize) -> Result<WindowQp> {
    let cfg = &exp.config;
    let sys = &cfg.system;
    let (d, m) = (sys.state_dim(), sys.input_dim());
    let mut down_rng = stream(cfg.seed, domain::PATH_DOWNLINK, path as u64);
    let s = draw_bit(cfg.channel.p_s, &mut down_rng);
    let mut comp = CompensatorState::new(d, m);
    comp.update(sys, s, s.then_some(&cfg.x0), &Vector::zeros(m))?;
    let mut drift = DriftParams::new(
        &exp.analysis.split,
        exp.analysis.kappa,
        exp.analysis.r_kappa.clone(),
        exp.analysis.zeta,
        exp.analysis.c,
    )?;
    let psi = cfg.saturation.apply_vec(&comp.w_tilde_last);
    let e_c = &comp.x_tilde - &exp.governor.x_r[0];
    let u_r_stack = exp.governor.u_stack(0, cfg.horizon);
    let channel = &exp.moments.channel;
    let noise = exp.moments.noise(comp.consecutive_dropouts)?;
    let rows = drift_constraints(&exp.analysis.split, &mut drift, &e_c, 0)?;
    let expected = ExpectedDriftInput::new(
        &channel.mu_g_diag(),
        &channel.mu_s_diag(),
        &u_r_stack,
        cfg.h_mode == HMode::EqualsG,
        psi.clone(),
        cfg.recalc * m,
    );
    let req = WindowRequest {
        channel,
        noise: &noise,
        e_c: &e_c,
        u_r_stack: &u_r_stack,
        psi_last: &psi,
        drift: &rows,
        expected: &expected,
    };
    build_window_qp(&exp.layout, &exp.data, &exp.settings, &req)
}

/// Cross-path statistics at one time step.
#[derive(Clone, Debug, Serialize)]
pub struct MsbPoint {
    pub t: usize,
    /// paths still running at `t`
    pub paths: usize,
    pub eo2_mean: f64,
    pub eo2_sd: f64,
    pub ed2_mean: f64,
    pub ec2_mean: f64,
    pub eg2_mean: f64,
}

/// Empirical mean-square bound: per-step means of the squared error norms and
/// their supremum over time.
#[derive(Clone, Debug, Serialize)]
pub struct MsbReport {
    pub per_t: Vec<MsbPoint>,
    /// `sup_t` cross-path mean of `‖eᴼ_t‖²`
    pub sup: f64,
    pub argmax: usize,
    /// standard error of the mean at `argmax`
    pub stderr: f64,
    pub gamma_d: f64,
    pub gamma_c: f64,
    /// `max_t ‖xʳ_t − r_t‖²`
    pub gamma_g: f64,
}

impl MsbReport {
    /// `mean‖eᴼ‖² ≤ 3(mean‖eᴰ‖² + mean‖eᶜ‖² + γᴳ)` at every step.
    pub fn triangle_bound_holds(&self) -> bool {
        self.per_t.iter().all(|p| {
            p.eo2_mean <= 3.0 * (p.ed2_mean + p.ec2_mean + self.gamma_g) * (1.0 + 1e-12) + 1e-300
        })
    }

    /// Mean of `eo2_mean` over the steps `range`.
    pub fn time_average(&self, range: std::ops::Range<usize>) -> f64 {
        let pts = &self.per_t[range];
        pts.iter().map(|p| p.eo2_mean).sum::<f64>() / pts.len() as f64
    }
}

/// Per-step aggregates of an ensemble.
#[derive(Clone, Debug, Serialize)]
pub struct EnsemblePoint {
    pub t: usize,
    pub paths: usize,
    pub mean_x: Vector,
    pub r: Vector,
    pub mean_x_norm: f64,
    /// largest `‖uᵃ_t‖∞` over paths
    pub max_input: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnsembleReport {
    pub per_t: Vec<EnsemblePoint>,
    pub msb: MsbReport,
    pub paths: usize,
    pub aborted_paths: usize,
    pub windows: usize,
    pub infeasible_windows: usize,
    pub input_peak: f64,
    pub identity_residual: f64,
    pub estimator_residual: f64,
    pub compensator_residual: f64,
}

/// Deterministic reduction over traces in path order.
pub fn aggregate(traces: &[SimTrace], steps: usize, gamma_g: f64) -> EnsembleReport {
    let mut per_t = Vec::with_capacity(steps);
    let mut msb_t = Vec::with_capacity(steps);
    for t in 0..steps {
        let rows: Vec<&StepRecord> = traces.iter().filter_map(|tr| tr.steps.get(t)).collect();
        let k = rows.len();
        if k == 0 {
            break;
        }
        let kf = k as f64;
        let mut mean_x = Vector::zeros(rows[0].x.len());
        let (mut xn, mut peak) = (0.0, 0.0f64);
        let (mut eo, mut eo_sq, mut ed, mut ec, mut eg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in &rows {
            mean_x += &s.x;
            xn += s.x.norm();
            peak = peak.max(s.u_a.amax());
            let o = s.e_o.norm_squared();
            eo += o;
            eo_sq += o * o;
            ed += s.e_d.norm_squared();
            ec += s.e_c.norm_squared();
            eg += s.e_g.norm_squared();
        }
        let eo_mean = eo / kf;
        let var = if k > 1 {
            ((eo_sq - kf * eo_mean * eo_mean) / (kf - 1.0)).max(0.0)
        } else {
            0.0
        };
        per_t.push(EnsemblePoint {
            t,
            paths: k,
            mean_x: mean_x / kf,
            r: rows[0].r.clone(),
            mean_x_norm: xn / kf,
            max_input: peak,
        });
        msb_t.push(MsbPoint {
            t,
            paths: k,
            eo2_mean: eo_mean,
            eo2_sd: var.sqrt(),
            ed2_mean: ed / kf,
            ec2_mean: ec / kf,
            eg2_mean: eg / kf,
        });
    }
    let (argmax, sup) =
        msb_t
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, p)| {
                if p.eo2_mean > bv {
                    (i, p.eo2_mean)
                } else {
                    (bi, bv)
                }
            });
    let stderr = msb_t
        .get(argmax)
        .map_or(0.0, |p| p.eo2_sd / (p.paths as f64).sqrt());
    let sup_of = |f: fn(&MsbPoint) -> f64| msb_t.iter().map(f).fold(0.0, f64::max);
    let msb = MsbReport {
        gamma_d: sup_of(|p| p.ed2_mean),
        gamma_c: sup_of(|p| p.ec2_mean),
        gamma_g,
        per_t: msb_t,
        sup,
        argmax,
        stderr,
    };
    let fold = |f: fn(&SimTrace) -> f64| traces.iter().map(f).fold(0.0, f64::max);
    EnsembleReport {
        per_t,
        msb,
        paths: traces.len(),
        aborted_paths: traces.iter().filter(|t| t.aborted).count(),
        windows: traces.iter().map(|t| t.windows().count()).sum(),
        infeasible_windows: traces.iter().map(SimTrace::infeasible_windows).sum(),
        input_peak: fold(|t| t.input_peak),
        identity_residual: fold(|t| t.identity_residual),
        estimator_residual: fold(|t| t.estimator_residual),
        compensator_residual: fold(|t| t.compensator_residual),
    }
}

/// Runs `config.paths` paths in parallel; the result does not depend on
/// scheduling.
pub fn run_ensemble(exp: &Experiment) -> Result<(EnsembleReport, Vec<SimTrace>)> {
    let cfg = &exp.config;
    if cfg.paths == 0 {
        return Err(Error::config("at least one path is required"));
    }
    let traces = (0..cfg.paths)
        .into_par_iter()
        .map(|p| run_path(exp, p))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&traces, cfg.steps, exp.governor.gamma_g);
    Ok((report, traces))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepChannel {
    /// vary `p_c`
    Uplink,
    /// vary `p_s`
    Downlink,
}

impl SweepChannel {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepChannel::Uplink => "uplink",
            SweepChannel::Downlink => "downlink",
        }
    }
}

impl std::str::FromStr for SweepChannel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uplink" => Ok(SweepChannel::Uplink),
            "downlink" => Ok(SweepChannel::Downlink),
            _ => Err(Error::config(format!(
                "unknown channel `{s}` (expected uplink or downlink)"
            ))),
        }
    }
}

/// Default probability grid for sweeps.
pub const DEFAULT_SWEEP: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub channel: SweepChannel,
    pub prob: f64,
    pub msb: f64,
    pub stderr: f64,
    pub argmax: usize,
    pub paths: usize,
    pub infeasible_windows: usize,
    pub aborted_paths: usize,
}

/// Empirical MSB for each probability in `values`, varying one link.
pub fn sweep_msb(
    base: &ExperimentConfig,
    channel: SweepChannel,
    values: &[f64],
    paths: usize,
    source: &MomentSource,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one probability"));
    }
    if let Some(bad) = values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::config(format!(
            "sweep probability {bad} outside (0, 1]"
        )));
    }
    let mut out = Vec::with_capacity(values.len());
    for &p in values {
        let mut cfg = match channel {
            SweepChannel::Uplink => base.with_channel(p, base.channel.p_s)?,
            SweepChannel::Downlink => base.with_channel(base.channel.p_c, p)?,
        };
        cfg.paths = paths;
        let exp = Experiment::new(cfg, source)?;
        let (report, _) = run_ensemble(&exp)?;
        log::info!(
            "{} p = {p}: MSB {:.4} ± {:.4}",
            channel.as_str(),
            report.msb.sup,
            report.msb.stderr
        );
        out.push(SweepPoint {
            channel,
            prob: p,
            msb: report.msb.sup,
            stderr: report.msb.stderr,
            argmax: report.msb.argmax,
            paths,
            infeasible_windows: report.infeasible_windows,
            aborted_paths: report.aborted_paths,
        });
    }
    Ok(out)
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

fn push_vec(row: &mut Vec<String>, v: &Vector) {
    row.extend(v.iter().map(|x| x.to_string()));
}

/// Column names of `trace.csv`.
pub fn trace_header(d: usize, m: usize) -> Vec<String> {
    let mut h = vec!["path".to_string(), "t".to_string()];
    for (p, k) in [
        ("x", d),
        ("xt", d),
        ("xr", d),
        ("r", d),
        ("u", m),
        ("ua", m),
        ("ur", m),
        ("w", d),
    ] {
        h.extend(indexed(p, k));
    }
    h.extend(["nu", "s", "h"].map(String::from));
    for p in ["eo", "ed", "ec", "eg"] {
        h.extend(indexed(p, d));
    }
    h.extend(["qp_status", "qp_iterations", "drift_rows"].map(String::from));
    h
}

pub fn write_trace_csv(path: &Path, traces: &[SimTrace]) -> Result<()> {
    let (d, m) = match traces.iter().find_map(|t| t.steps.first()) {
        Some(s) => (s.x.len(), s.u.len()),
        None => (0, 0),
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trace_header(d, m))?;
    for tr in traces {
        for s in &tr.steps {
            let mut row = vec![tr.path.to_string(), s.t.to_string()];
            for v in [&s.x, &s.x_tilde, &s.x_r, &s.r, &s.u, &s.u_a, &s.u_r, &s.w] {
                push_vec(&mut row, v);
            }
            row.push(u8::from(s.nu).to_string());
            row.push(u8::from(s.s).to_string());
            row.push(s.h.to_string());
            for v in [&s.e_o, &s.e_d, &s.e_c, &s.e_g] {
                push_vec(&mut row, v);
            }
            match &s.qp {
                Some(q) => {
                    row.push(q.status.as_str().to_string());
                    row.push(q.iterations.to_string());
                    row.push(q.drift_rows.to_string());
                }
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Column names of `ensemble.csv`.
pub fn ensemble_header(d: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "paths".to_string()];
    h.extend(indexed("x_mean", d));
    h.extend(indexed("r", d));
    h.extend(
        [
            "x_norm_mean",
            "ua_max",
            "eo2_mean",
            "eo2_sd",
            "ed2_mean",
            "ec2_mean",
            "eg2_mean",
        ]
        .map(String::from),
    );
    h
}

pub fn write_ensemble_csv(path: &Path, report: &EnsembleReport) -> Result<()> {
    let d = report.per_t.first().map_or(0, |p| p.mean_x.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ensemble_header(d))?;
    for (p, q) in report.per_t.iter().zip(&report.msb.per_t) {
        let mut row = vec![p.t.to_string(), p.paths.to_string()];
        push_vec(&mut row, &p.mean_x);
        push_vec(&mut row, &p.r);
        for v in [
            p.mean_x_norm,
            p.max_input,
            q.eo2_mean,
            q.eo2_sd,
            q.ed2_mean,
            q.ec2_mean,
            q.eg2_mean,
        ] {
            row.push(v.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 8] = [
    "channel",
    "prob",
    "msb",
    "stderr",
    "t_sup",
    "paths",
    "infeasible_windows",
    "aborted_paths",
];

pub fn write_sweep_csv(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for p in points {
        w.write_record([
            p.channel.as_str().to_string(),
            p.prob.to_string(),
            p.msb.to_string(),
            p.stderr.to_string(),
            p.argmax.to_string(),
            p.paths.to_string(),
            p.infeasible_windows.to_string(),
            p.aborted_paths.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Provenance for a set of output files.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub master_seed: u64,
    pub moment_seed: u64,
    pub moment_cache_key: String,
    pub outputs: Vec<PathBuf>,
    pub aborted_paths: usize,
    pub infeasible_windows: usize,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, moment_key: &CacheKey) -> Self {
        let now = unix_now();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.digest(),
            started_unix: now,
            finished_unix: now,
            master_seed: cfg.seed,
            moment_seed: cfg.moments.seed,
            moment_cache_key: moment_key.file_name(),
            outputs: Vec::new(),
            aborted_paths: 0,
            infeasible_windows: 0,
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix = unix_now();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
