//! Offline expectation matrices entering the window objective.
//!
//! Channel moments depend only on the uplink bits of one recalculation window,
//! so they are averages over at most `2^κ` distinct realizations; the Monte
//! Carlo route counts pattern frequencies and the exact route weights the same
//! patterns by their probabilities. Noise moments are indexed by the number
//! `h` of consecutive downlink losses at the start of the window.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{bernoulli, realize_sg_diag, HMode};
use crate::config::hex_digest;
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Mat, Vector};
use crate::model::{CostWeights, GaussianNoise, HorizonStack, LinearSystem, NoiseSampler};
use crate::policy::SaturationFn;
use crate::rng::{domain, stream};

/// Samples per deterministic work unit.
const CHUNK: usize = 4096;
/// Exact enumeration is skipped for longer channel windows.
const MAX_ENUMERATED_WINDOW: usize = 16;

pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const CACHE_DIR_ENV: &str = "NETSMPC_CACHE_DIR";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelMoments {
    pub mu_g: Mat,
    pub mu_s: Mat,
    pub sigma_g: Mat,
    pub sigma_s: Mat,
    pub sigma_gs: Mat,
    pub sigma_hg: Mat,
    pub sigma_hs: Mat,
    pub sample_count: usize,
    pub h_mode: HMode,
    /// Monte Carlo estimate of `diag(μ_G)` and its standard error.
    pub mc_mu_g: Vector,
    pub mc_mu_g_stderr: Vector,
    pub mc_mu_s: Vector,
}

impl ChannelMoments {
    pub fn mu_g_diag(&self) -> Vector {
        self.mu_g.diagonal()
    }

    pub fn mu_s_diag(&self) -> Vector {
        self.mu_s.diagonal()
    }

    /// Largest `|MC − closed form|` of `diag(μ_G)` in standard errors
    /// (entries with zero standard error must match exactly).
    pub fn mu_g_deviation(&self) -> f64 {
        let exact = self.mu_g_diag();
        (0..exact.len())
            .map(|i| {
                let diff = (self.mc_mu_g[i] - exact[i]).abs();
                let se = self.mc_mu_g_stderr[i];
                if se > 0.0 {
                    diff / se
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

/// `E[𝒢_ℓ] = 1 − (1 − p_c)^{ℓ+1}` inside the recalculation window, one after.
pub fn closed_form_mu_g(p_c: f64, horizon: usize, recalc: usize, m: usize) -> Vector {
    Vector::from_fn(horizon * m, |i, _| {
        let l = i / m;
        if l < recalc {
            1.0 - (1.0 - p_c).powi(l as i32 + 1)
        } else {
            1.0
        }
    })
}

/// `E[𝒮_ℓ] = p_c` for the first κ blocks, one after.
pub fn closed_form_mu_s(p_c: f64, horizon: usize, kappa: usize, m: usize) -> Vector {
    Vector::from_fn(horizon * m, |i, _| if i / m < kappa { p_c } else { 1.0 })
}

struct PatternTerms {
    s: Vec<f64>,
    g: Vec<f64>,
}

fn pattern_terms(bits: u64, window: usize, stack: &HorizonStack, kappa: usize) -> PatternTerms {
    let nu: Vec<bool> = (0..window).map(|k| bits >> k & 1 == 1).collect();
    let (s, g) = realize_sg_diag(&nu, stack.horizon, stack.recalc, kappa, stack.m);
    PatternTerms { s, g }
}

/// Weighted averages of the quadratic channel forms over uplink patterns.
fn average_patterns(
    weights: &BTreeMap<u64, f64>,
    window: usize,
    stack: &HorizonStack,
    kappa: usize,
    mode: HMode,
) -> [Mat; 5] {
    let n = stack.horizon * stack.m;
    let alpha = &stack.alpha;
    let mut acc: [Mat; 5] = std::array::from_fn(|_| Mat::zeros(n, n));
    for (&bits, &w) in weights {
        if w == 0.0 {
            continue;
        }
        let PatternTerms { s, g } = pattern_terms(bits, window, stack, kappa);
        let h_minus_i: Vec<f64> = match mode {
            HMode::EqualsG => g.iter().map(|v| v - 1.0).collect(),
            HMode::EqualsI => vec![0.0; n],
        };
        for i in 0..n {
            for j in 0..n {
                let a = w * alpha[(i, j)];
                acc[0][(i, j)] += g[i] * a * g[j];
                acc[1][(i, j)] += s[i] * a * s[j];
                acc[2][(i, j)] += g[i] * a * s[j];
                acc[3][(i, j)] += h_minus_i[i] * a * g[j];
                acc[4][(i, j)] += h_minus_i[i] * a * s[j];
            }
        }
    }
    acc
}

fn channel_window(stack: &HorizonStack, kappa: usize) -> usize {
    kappa.max(stack.recalc)
}

/// Monte Carlo channel moments from `samples` independent uplink windows.
pub fn channel_moments(
    p_c: f64,
    stack: &HorizonStack,
    kappa: usize,
    mode: HMode,
    samples: usize,
    seed: u64,
) -> Result<ChannelMoments> {
    if !(p_c > 0.0 && p_c <= 1.0) {
        return Err(Error::config(format!("p_c = {p_c} must lie in (0, 1]")));
    }
    if samples == 0 {
        return Err(Error::config(
            "channel moment sample count must be positive",
        ));
    }
    let window = channel_window(stack, kappa);
    if window > 63 {
        return Err(Error::config("channel window longer than 63 steps"));
    }
    let chunks = samples.div_ceil(CHUNK);
    let partial: Vec<BTreeMap<u64, u64>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, domain::CHANNEL_MOMENTS, k as u64);
            let count = CHUNK.min(samples - k * CHUNK);
            let mut hist = BTreeMap::new();
            for _ in 0..count {
                let mut bits = 0u64;
                for b in 0..window {
                    if bernoulli(p_c, &mut rng) {
                        bits |= 1 << b;
                    }
                }
                *hist.entry(bits).or_insert(0u64) += 1;
            }
            hist
        })
        .collect();
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    for part in partial {
        for (k, v) in part {
            *hist.entry(k).or_insert(0) += v;
        }
    }

    let n = stack.horizon * stack.m;
    let total = samples as f64;
    let weights: BTreeMap<u64, f64> = hist.iter().map(|(&k, &v)| (k, v as f64 / total)).collect();
    let [sg, ss, sgs, shg, shs] = average_patterns(&weights, window, stack, kappa, mode);

    let mut mc_g = Vector::zeros(n);
    let mut mc_s = Vector::zeros(n);
    for (&bits, &w) in &weights {
        let t = pattern_terms(bits, window, stack, kappa);
        for i in 0..n {
            mc_g[i] += w * t.g[i];
            mc_s[i] += w * t.s[i];
        }
    }
    let stderr = mc_g.map(|p| (p * (1.0 - p) / total).max(0.0).sqrt());

    Ok(ChannelMoments {
        mu_g: Mat::from_diagonal(&closed_form_mu_g(p_c, stack.horizon, stack.recalc, stack.m)),
        mu_s: Mat::from_diagonal(&closed_form_mu_s(p_c, stack.horizon, kappa, stack.m)),
        sigma_g: symmetrize(&sg),
        sigma_s: symmetrize(&ss),
        sigma_gs: sgs,
        sigma_hg: shg,
        sigma_hs: shs,
        sample_count: samples,
        h_mode: mode,
        mc_mu_g: mc_g,
        mc_mu_g_stderr: stderr,
        mc_mu_s: mc_s,
    })
}

/// Exact channel moments by enumerating all uplink patterns of the window.
pub fn channel_moments_exact(
    p_c: f64,
    stack: &HorizonStack,
    kappa: usize,
    mode: HMode,
) -> Result<ChannelMoments> {
    let window = channel_window(stack, kappa);
    if window > MAX_ENUMERATED_WINDOW {
        return Err(Error::config(format!(
            "window of {window} steps is too long to enumerate"
        )));
    }
    let weights: BTreeMap<u64, f64> = (0..1u64 << window)
        .map(|bits| {
            let ones = bits.count_ones() as i32;
            (
                bits,
                p_c.powi(ones) * (1.0 - p_c).powi(window as i32 - ones),
            )
        })
        .collect();
    let [sg, ss, sgs, shg, shs] = average_patterns(&weights, window, stack, kappa, mode);
    let mu_g = closed_form_mu_g(p_c, stack.horizon, stack.recalc, stack.m);
    let n = mu_g.len();
    Ok(ChannelMoments {
        mu_g: Mat::from_diagonal(&mu_g),
        mu_s: Mat::from_diagonal(&closed_form_mu_s(p_c, stack.horizon, kappa, stack.m)),
        sigma_g: symmetrize(&sg),
        sigma_s: symmetrize(&ss),
        sigma_gs: sgs,
        sigma_hg: shg,
        sigma_hs: shs,
        sample_count: 0,
        h_mode: mode,
        mc_mu_g: mu_g,
        mc_mu_g_stderr: Vector::zeros(n),
        mc_mu_s: closed_form_mu_s(p_c, stack.horizon, kappa, stack.m),
    })
}

/// Saturated compensator-disturbance moments for one dropout count `h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseMoments {
    pub h: usize,
    /// `E[ψ′ψ′ᵀ]`, (N−1)d square
    pub sigma_psi: Mat,
    /// `E[ψ′ w_{t:N}ᵀ]`, (N−1)d × Nd
    pub sigma_psi_w: Mat,
    /// `E[ψ′ eᴰ_tᵀ]`, (N−1)d × d
    pub sigma_e_psi: Mat,
    pub sample_count: usize,
}

/// Everything needed to (re)generate noise moments for any `h`.
#[derive(Clone)]
pub struct NoiseMomentSpec {
    pub a: Mat,
    pub sampler: Arc<dyn NoiseSampler>,
    pub p_s: f64,
    pub saturation: SaturationFn,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
}

impl NoiseMomentSpec {
    pub fn new(
        sys: &LinearSystem,
        p_s: f64,
        saturation: SaturationFn,
        horizon: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            a: sys.a.clone(),
            sampler: Arc::new(GaussianNoise::new(&sys.noise_cov)?),
            p_s,
            saturation,
            horizon,
            samples,
            seed,
        })
    }
}

struct NoiseAccumulator {
    psi_psi: Vec<f64>,
    psi_w: Vec<f64>,
    psi_e: Vec<f64>,
}

impl NoiseAccumulator {
    fn new(p: usize, nw: usize, d: usize) -> Self {
        Self {
            psi_psi: vec![0.0; p * p],
            psi_w: vec![0.0; p * nw],
            psi_e: vec![0.0; p * d],
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.psi_psi, &other.psi_psi),
            (&mut self.psi_w, &other.psi_w),
            (&mut self.psi_e, &other.psi_e),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Monte Carlo noise moments for `h` consecutive downlink losses before the
/// window start.
pub fn noise_moments(spec: &NoiseMomentSpec, h: usize) -> Result<NoiseMoments> {
    let d = spec.a.nrows();
    if spec.sampler.dim() != d {
        return Err(Error::dims("noise sampler", d, spec.sampler.dim()));
    }
    if !(0.0..=1.0).contains(&spec.p_s) {
        return Err(Error::config(format!("p_s = {} outside [0, 1]", spec.p_s)));
    }
    if spec.samples == 0 {
        return Err(Error::config("noise moment sample count must be positive"));
    }
    let n = spec.horizon;
    let p = (n - 1) * d;
    let nw = n * d;
    let chunks = spec.samples.div_ceil(CHUNK);
    let parts: Vec<NoiseAccumulator> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(
                spec.seed,
                domain::NOISE_MOMENTS,
                ((h as u64) << 32) | k as u64,
            );
            let count = CHUNK.min(spec.samples - k * CHUNK);
            let mut acc = NoiseAccumulator::new(p, nw, d);
            let mut psi = vec![0.0; p];
            let mut w = vec![0.0; nw];
            for _ in 0..count {
                let mut e = Vector::zeros(d);
                for _ in 0..h {
                    e = &spec.a * e + spec.sampler.sample(&mut rng as &mut dyn RngCore);
                }
                let e0 = e.clone();
                for i in 0..n {
                    let wi = spec.sampler.sample(&mut rng as &mut dyn RngCore);
                    w[i * d..(i + 1) * d].copy_from_slice(wi.as_slice());
                    if i + 1 < n {
                        let s = bernoulli(spec.p_s, &mut rng);
                        let next = &spec.a * &e + &wi;
                        for k in 0..d {
                            psi[i * d + k] = if s {
                                spec.saturation.apply(next[k])
                            } else {
                                0.0
                            };
                        }
                        e = if s { Vector::zeros(d) } else { next };
                    }
                }
                for i in 0..p {
                    let pi = psi[i];
                    if pi == 0.0 {
                        continue;
                    }
                    let row = &mut acc.psi_psi[i * p..(i + 1) * p];
                    for j in i..p {
                        row[j] += pi * psi[j];
                    }
                    let row = &mut acc.psi_w[i * nw..(i + 1) * nw];
                    for (r, wj) in row.iter_mut().zip(&w) {
                        *r += pi * wj;
                    }
                    let row = &mut acc.psi_e[i * d..(i + 1) * d];
                    for (r, ej) in row.iter_mut().zip(e0.iter()) {
                        *r += pi * ej;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = NoiseAccumulator::new(p, nw, d);
    for part in &parts {
        total.merge(part);
    }
    let scale = 1.0 / spec.samples as f64;
    let mut sigma_psi = Mat::from_row_slice(p, p, &total.psi_psi) * scale;
    for i in 0..p {
        for j in 0..i {
            sigma_psi[(i, j)] = sigma_psi[(j, i)];
        }
    }
    Ok(NoiseMoments {
        h,
        sigma_psi,
        sigma_psi_w: Mat::from_row_slice(p, nw, &total.psi_w) * scale,
        sigma_e_psi: Mat::from_row_slice(p, d, &total.psi_e) * scale,
        sample_count: spec.samples,
    })
}

/// `Π_w = ψ(w̃_{t−1}) ψ(w̃_{t−1})ᵀ`
pub fn pi_w(psi_last: &Vector) -> Mat {
    psi_last * psi_last.transpose()
}

/// Identifies the inputs a moment set was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub p_c: f64,
    pub p_s: f64,
    pub horizon: usize,
    pub recalc: usize,
    pub kappa: usize,
    pub h_max: usize,
    pub channel_samples: usize,
    pub noise_samples: usize,
    pub seed: u64,
    pub h_mode: HMode,
    pub saturation: SaturationFn,
    /// SHA-256 over the plant and cost weights.
    pub model_hash: String,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        let text = serde_json::to_string(self).expect("key serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("moments-{}.json", &hex_digest(h)[..16])
    }
}

pub fn model_hash(sys: &LinearSystem, weights: &CostWeights) -> String {
    let mut h = Sha256::new();
    for m in [
        &sys.a,
        &sys.b,
        &sys.noise_cov,
        &weights.q,
        &weights.q_f,
        &weights.r,
    ] {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(sys.u_max.to_le_bytes());
    hex_digest(h)
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format_version: u32,
    key: CacheKey,
    channel: ChannelMoments,
    noise: Vec<NoiseMoments>,
}

/// Channel moments plus the noise-moment table `h = 0..=h_max`, extended on
/// demand for longer dropout runs.
pub struct MomentSet {
    pub key: CacheKey,
    pub channel: ChannelMoments,
    table: Vec<Arc<NoiseMoments>>,
    extra: Mutex<BTreeMap<usize, Arc<NoiseMoments>>>,
    spec: Option<NoiseMomentSpec>,
}

impl std::fmt::Debug for MomentSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentSet")
            .field("key", &self.key)
            .finish_non_exhaustive()
    }
}

impl MomentSet {
    pub fn compute(key: CacheKey, stack: &HorizonStack, spec: NoiseMomentSpec) -> Result<Self> {
        let channel = channel_moments(
            key.p_c,
            stack,
            key.kappa,
            key.h_mode,
            key.channel_samples,
            key.seed,
        )?;
        let table = (0..=key.h_max)
            .map(|h| noise_moments(&spec, h).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            key,
            channel,
            table,
            extra: Mutex::new(BTreeMap::new()),
            spec: Some(spec),
        })
    }

    pub fn from_parts(
        key: CacheKey,
        channel: ChannelMoments,
        noise: Vec<NoiseMoments>,
        spec: Option<NoiseMomentSpec>,
    ) -> Self {
        Self {
            key,
            channel,
            table: noise.into_iter().map(Arc::new).collect(),
            extra: Mutex::new(BTreeMap::new()),
            spec,
        }
    }

    pub fn table(&self) -> &[Arc<NoiseMoments>] {
        &self.table
    }

    /// Noise moments for `h` consecutive losses. Entries beyond the table are
    /// generated from the same seed, so they do not depend on request order.
    pub fn noise(&self, h: usize) -> Result<Arc<NoiseMoments>> {
        if let Some(entry) = self.table.get(h) {
            return Ok(entry.clone());
        }
        let mut extra = self.extra.lock().expect("moment table lock");
        if let Some(entry) = extra.get(&h) {
            return Ok(entry.clone());
        }
        let spec = self.spec.as_ref().ok_or_else(|| {
            Error::StaleCache(format!(
                "no noise moments for h = {h} and no generator attached"
            ))
        })?;
        log::info!("extending noise moments to h = {h}");
        let entry = Arc::new(noise_moments(spec, h)?);
        extra.insert(h, entry.clone());
        Ok(entry)
    }

    /// Attach a generator to a set loaded from disk.
    pub fn attach_spec(&mut self, spec: NoiseMomentSpec) {
        self.spec = Some(spec);
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CacheFile {
            format_version: CACHE_FORMAT_VERSION,
            key: self.key.clone(),
            channel: self.channel.clone(),
            noise: self.table.iter().map(|e| (**e).clone()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str, expected: Option<&CacheKey>) -> Result<Self> {
        let file: CacheFile = serde_json::from_str(text)?;
        if file.format_version != CACHE_FORMAT_VERSION {
            return Err(Error::StaleCache(format!(
                "cache format {} differs from {}",
                file.format_version, CACHE_FORMAT_VERSION
            )));
        }
        if let Some(k) = expected {
            if *k != file.key {
                return Err(Error::StaleCache(
                    "cache key does not match the configuration".into(),
                ));
            }
        }
        if file.noise.len() != file.key.h_max + 1
            || file.noise.iter().enumerate().any(|(h, e)| e.h != h)
        {
            return Err(Error::StaleCache("noise moment table is incomplete".into()));
        }
        Ok(Self::from_parts(file.key, file.channel, file.noise, None))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&CacheKey>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, expected)
    }
}

/// Cache directory: `$NETSMPC_CACHE_DIR`, else `.netsmpc-cache`.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".netsmpc-cache"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::benchmark_system;
    use crate::linalg::min_eigenvalue;
    use approx::assert_relative_eq;

    fn benchmark_stack() -> HorizonStack {
        HorizonStack::build(&benchmark_system(), &CostWeights::identity(4, 1), 5, 3).unwrap()
    }

    #[test]
    fn perfect_uplink_is_deterministic() {
        let stack = benchmark_stack();
        let c = channel_moments(1.0, &stack, 3, HMode::EqualsG, 10_000, 1).unwrap();
        assert_eq!(c.mu_g, Mat::identity(5, 5));
        assert_eq!(c.mu_s, Mat::identity(5, 5));
        assert_eq!(c.mc_mu_g, Vector::from_element(5, 1.0));
        assert_relative_eq!(c.sigma_g, stack.alpha, epsilon = 1e-12);
        assert_relative_eq!(c.sigma_s, stack.alpha, epsilon = 1e-12);
        assert_eq!(c.sigma_hg, Mat::zeros(5, 5));
        assert_eq!(c.sigma_hs, Mat::zeros(5, 5));
    }

    #[test]
    fn closed_form_means() {
        let g = closed_form_mu_g(0.9, 5, 3, 1);
        assert_relative_eq!(g[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(g[1], 0.99, epsilon = 1e-15);
        assert_relative_eq!(g[2], 0.999, epsilon = 1e-15);
        assert_eq!(g[3], 1.0);
        let s = closed_form_mu_s(0.9, 5, 3, 1);
        assert_eq!(s.as_slice(), &[0.9, 0.9, 0.9, 1.0, 1.0]);
    }

    #[test]
    fn mc_matches_closed_form_and_enumeration() {
        let stack = benchmark_stack();
        for p in [0.5, 0.7, 0.9] {
            let mc = channel_moments(p, &stack, 3, HMode::EqualsG, 100_000, 3).unwrap();
            assert!(
                mc.mu_g_deviation() < 3.0,
                "p = {p}: {}",
                mc.mu_g_deviation()
            );
            let ex = channel_moments_exact(p, &stack, 3, HMode::EqualsG).unwrap();
            let tol = 0.05 * stack.alpha.amax();
            assert!((&mc.sigma_g - &ex.sigma_g).amax() < tol);
            assert!((&mc.sigma_gs - &ex.sigma_gs).amax() < tol);
            assert!(min_eigenvalue(&mc.sigma_g) > -1e-8);
            assert!(min_eigenvalue(&mc.sigma_s) > -1e-8);
        }
    }

    #[test]
    fn stored_reference_kills_h_terms() {
        let stack = benchmark_stack();
        let c = channel_moments(0.6, &stack, 3, HMode::EqualsI, 20_000, 3).unwrap();
        assert_eq!(c.sigma_hg, Mat::zeros(5, 5));
        assert_eq!(c.sigma_hs, Mat::zeros(5, 5));
        let c = channel_moments(0.6, &stack, 3, HMode::EqualsG, 20_000, 3).unwrap();
        assert!(c.sigma_hg.amax() > 0.0);
    }

    fn scalar_spec(var: f64, p_s: f64, horizon: usize) -> NoiseMomentSpec {
        let sys = LinearSystem::new(
            Mat::from_element(1, 1, 0.8),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, var),
            1.0,
        )
        .unwrap();
        NoiseMomentSpec::new(&sys, p_s, SaturationFn::Sigmoid, horizon, 40_000, 5).unwrap()
    }

    #[test]
    fn perfect_downlink_noise_moments() {
        let m = noise_moments(&scalar_spec(0.5, 1.0, 4), 0).unwrap();
        assert_eq!(m.sigma_e_psi, Mat::zeros(3, 1));
        // independent ψ(w) across steps
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(m.sigma_psi[(i, j)].abs() < 0.01);
                }
            }
        }
        // Σ_ψw couples ψ(w_i) with w_i only
        assert!(m.sigma_psi_w[(0, 0)] > 0.1);
        assert!(m.sigma_psi_w[(0, 1)].abs() < 0.01);
    }

    #[test]
    fn sigma_psi_matches_quadrature() {
        let var: f64 = 0.5;
        let m = noise_moments(&scalar_spec(var, 1.0, 2), 0).unwrap();
        let sd = var.sqrt();
        let steps = 20_000;
        let (lo, hi) = (-12.0 * sd, 12.0 * sd);
        let hstep = (hi - lo) / steps as f64;
        let f = |x: f64| {
            let p = crate::policy::sigmoid(x);
            p * p * (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
        };
        let mut integral = f(lo) + f(hi);
        for k in 1..steps {
            integral += f(lo + k as f64 * hstep) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        integral *= hstep / 3.0;
        // the MC second moment of a bounded variable: se ≤ 1/√M
        assert!((m.sigma_psi[(0, 0)] - integral).abs() < 4.0 / (40_000f64).sqrt() * 0.5);
    }

    #[test]
    fn zero_noise_gives_zero_moments() {
        let m = noise_moments(&scalar_spec(0.0, 0.7, 3), 4).unwrap();
        assert_eq!(m.sigma_psi, Mat::zeros(2, 2));
        assert_eq!(m.sigma_psi_w, Mat::zeros(2, 3));
        assert_eq!(m.sigma_e_psi, Mat::zeros(2, 1));
    }

    #[test]
    fn dropouts_correlate_estimator_error() {
        let m = noise_moments(&scalar_spec(0.5, 0.9, 3), 3).unwrap();
        assert!(m.sigma_e_psi[(0, 0)] > 0.05);
        assert!(min_eigenvalue(&m.sigma_psi) > -1e-12);
        assert!(m.sigma_psi.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn noise_moments_are_deterministic() {
        let spec = scalar_spec(0.5, 0.8, 3);
        let a = noise_moments(&spec, 2).unwrap();
        let b = noise_moments(&spec, 2).unwrap();
        assert_eq!(a.sigma_psi, b.sigma_psi);
        assert_eq!(a.sigma_psi_w, b.sigma_psi_w);
    }

    #[test]
    fn pi_w_is_outer_product() {
        assert_eq!(pi_w(&Vector::zeros(3)), Mat::zeros(3, 3));
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let mut e11 = Mat::zeros(2, 2);
        e11[(0, 0)] = 1.0;
        assert_eq!(pi_w(&e1), e11);
        let v = Vector::from_vec(vec![0.3, -0.7, 0.2]);
        let p = pi_w(&v);
        assert_relative_eq!(p.trace(), v.norm_squared(), epsilon = 1e-15);
        assert_eq!(p, p.transpose());
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let sys = benchmark_system();
        let weights = CostWeights::identity(4, 1);
        let stack = HorizonStack::build(&sys, &weights, 5, 3).unwrap();
        let key = CacheKey {
            p_c: 0.9,
            p_s: 0.9,
            horizon: 5,
            recalc: 3,
            kappa: 3,
            h_max: 2,
            channel_samples: 5_000,
            noise_samples: 5_000,
            seed: 9,
            h_mode: HMode::EqualsG,
            saturation: SaturationFn::Sigmoid,
            model_hash: model_hash(&sys, &weights),
        };
        let spec = NoiseMomentSpec::new(&sys, 0.9, SaturationFn::Sigmoid, 5, 5_000, 9).unwrap();
        let set = MomentSet::compute(key.clone(), &stack, spec).unwrap();
        let text = set.to_json().unwrap();
        let back = MomentSet::from_json(&text, Some(&key)).unwrap();
        assert_eq!(back.channel.sigma_g, set.channel.sigma_g);
        assert_eq!(
            back.noise(1).unwrap().sigma_psi,
            set.noise(1).unwrap().sigma_psi
        );
        assert_eq!(back.to_json().unwrap(), text);

        let mut other = key.clone();
        other.p_s = 0.8;
        assert!(matches!(
            MomentSet::from_json(&text, Some(&other)),
            Err(Error::StaleCache(_))
        ));
        assert!(matches!(back.noise(5), Err(Error::StaleCache(_))));
        assert_eq!(set.noise(5).unwrap().h, 5);
    }
}
