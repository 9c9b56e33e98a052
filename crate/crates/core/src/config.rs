//! Experiment configuration: a TOML document with nested sections, matrices
//! written row-major as arrays of rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelConfig, HMode};
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vector};
use crate::model::{CostWeights, LinearSystem};
use crate::policy::SaturationFn;

/// The four-state benchmark plant used throughout the examples and tests.
pub fn benchmark_system() -> LinearSystem {
    LinearSystem::new(
        benchmark_a(),
        Mat::from_column_slice(4, 1, &[0.5, 0.5, 0.0, 0.5]),
        Mat::identity(4, 4) * 0.5,
        5.0,
    )
    .expect("benchmark plant is valid")
}

fn benchmark_a() -> Mat {
    Mat::from_row_slice(
        4,
        4,
        &[
            0.9, 0.0, 0.0, 0.0, //
            0.0, 0.0, -0.8, -0.6, //
            0.0, 0.8, -0.36, 0.48, //
            0.0, 0.6, 0.48, -0.64,
        ],
    )
}

/// Text of the bundled default configuration.
pub const BENCHMARK_TOML: &str = include_str!("../configs/benchmark.toml");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub noise_cov: Vec<Vec<f64>>,
    pub u_max: f64,
    pub x0: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub q: Vec<Vec<f64>>,
    pub q_f: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub n: usize,
    pub n_r: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub p_c: f64,
    pub p_s: f64,
    #[serde(default)]
    pub h_mode: HMode,
}

/// Raw reference supplied to the governor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `r_{t+1} = A r_t + B (amplitude · sin(frequency · t))`, `r_0 = x_0`;
    /// the governor output is the recursion itself.
    Sinusoid { amplitude: f64, frequency: f64 },
    /// `r ≡ 0`
    Zero,
    /// Reference read from CSV (`t, r_1..r_d`) and passed through the
    /// governor optimal control problem.
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorSection {
    pub delta: f64,
    pub reference: ReferenceSpec,
}

/// `zeta` / `c` may be a number or the string `"max"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DriftLevel {
    Value(f64),
    Named(DriftKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKeyword {
    Max,
}

impl Default for DriftLevel {
    fn default() -> Self {
        DriftLevel::Named(DriftKeyword::Max)
    }
}

impl DriftLevel {
    pub fn resolve(self, zeta_max: f64) -> f64 {
        match self {
            DriftLevel::Value(v) => v,
            DriftLevel::Named(DriftKeyword::Max) => zeta_max,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default)]
    pub zeta: DriftLevel,
    #[serde(default)]
    pub c: DriftLevel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsSection {
    pub channel_samples: usize,
    pub noise_samples: usize,
    pub h_max: usize,
    pub seed: u64,
}

impl Default for MomentsSection {
    fn default() -> Self {
        Self {
            channel_samples: 100_000,
            noise_samples: 100_000,
            h_max: 20,
            seed: 17,
        }
    }
}

/// Which linear term multiplies `Θ^{(:,t)}ψ(w̃_{t−1})` with the controller error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveForm {
    /// Includes `2 e_Cᵀ𝒜ᵀ𝒬ℬ μ_S Θ^{(:,t)} ψ(w̃_{t−1})`.
    #[default]
    Exact,
    /// Omits that term.
    Truncated,
}

/// Reaction to an infeasible window QP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasiblePolicy {
    /// Loosen the drift rows by their least total violation and re-solve; the window is flagged.
    #[default]
    Relax,
    /// Abort the path.
    Abort,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub objective: ObjectiveForm,
    #[serde(default)]
    pub on_infeasible: InfeasiblePolicy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub weights: WeightsSection,
    pub horizon: HorizonSection,
    pub channel: ChannelSection,
    pub governor: GovernorSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub saturation: SaturationFn,
    #[serde(default)]
    pub moments: MomentsSection,
    pub simulation: SimulationSection,
}

/// Validated experiment configuration.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: LinearSystem,
    pub weights: CostWeights,
    pub x0: Vector,
    pub horizon: usize,
    pub recalc: usize,
    pub channel: ChannelConfig,
    pub h_mode: HMode,
    pub delta: f64,
    pub reference: ReferenceSpec,
    pub zeta: DriftLevel,
    pub c: DriftLevel,
    pub saturation: SaturationFn,
    pub moments: MomentsSection,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub objective: ObjectiveForm,
    pub on_infeasible: InfeasiblePolicy,
    /// Base directory for relative paths inside the file.
    pub base_dir: PathBuf,
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 {
        return Err(Error::config(format!("matrix `{name}` is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("matrix `{name}` has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(format!(
            "matrix `{name}` has non-finite entries"
        )));
    }
    Ok(Mat::from_row_slice(nrows, ncols, &flat))
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(self, base_dir: &Path) -> Result<ExperimentConfig> {
        let a = matrix("system.a", &self.system.a)?;
        let b = matrix("system.b", &self.system.b)?;
        let w = matrix("system.noise_cov", &self.system.noise_cov)?;
        let system = LinearSystem::new(a, b, w, self.system.u_max)?;
        let weights = CostWeights::new(
            matrix("weights.q", &self.weights.q)?,
            matrix("weights.q_f", &self.weights.q_f)?,
            matrix("weights.r", &self.weights.r)?,
        )?;
        let d = system.state_dim();
        if weights.q.nrows() != d || weights.r.nrows() != system.input_dim() {
            return Err(Error::config(
                "cost weights do not match the system dimensions",
            ));
        }
        if self.system.x0.len() != d {
            return Err(Error::dims("system.x0", d, self.system.x0.len()));
        }
        let (n, n_r) = (self.horizon.n, self.horizon.n_r);
        if n == 0 || n_r == 0 || n_r > n {
            return Err(Error::config(format!(
                "need 1 ≤ n_r ≤ n, got n = {n}, n_r = {n_r}"
            )));
        }
        let channel = ChannelConfig::new(self.channel.p_c, self.channel.p_s)?;
        let delta = self.governor.delta;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!(
                "governor.delta = {delta} must lie in (0, 1)"
            )));
        }
        match self.saturation {
            SaturationFn::Clip { limit } if !(limit > 0.0 && limit.is_finite()) => {
                return Err(Error::config("saturation limit must be positive"));
            }
            _ => {}
        }
        let mo = self.moments;
        if mo.channel_samples == 0 || mo.noise_samples == 0 {
            return Err(Error::config("moment sample counts must be positive"));
        }
        let sim = self.simulation;
        if sim.steps == 0 || sim.paths == 0 {
            return Err(Error::config(
                "simulation.steps and simulation.paths must be positive",
            ));
        }
        for (name, level) in [("drift.zeta", self.drift.zeta), ("drift.c", self.drift.c)] {
            if let DriftLevel::Value(v) = level {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("{name} = {v} must be positive")));
                }
            }
        }
        Ok(ExperimentConfig {
            system,
            weights,
            x0: Vector::from_vec(self.system.x0),
            horizon: n,
            recalc: n_r,
            channel,
            h_mode: self.channel.h_mode,
            delta,
            reference: self.governor.reference,
            zeta: self.drift.zeta,
            c: self.drift.c,
            saturation: self.saturation,
            moments: mo,
            steps: sim.steps,
            paths: sim.paths,
            seed: sim.seed,
            objective: sim.objective,
            on_infeasible: sim.on_infeasible,
            base_dir: base_dir.to_path_buf(),
        })
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        ConfigFile::parse(text)?.validate(base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    /// The benchmark experiment.
    pub fn benchmark() -> Self {
        Self::from_toml(BENCHMARK_TOML, Path::new(".")).expect("bundled configuration is valid")
    }

    pub fn to_file(&self) -> ConfigFile {
        ConfigFile {
            system: SystemSection {
                a: rows_of(&self.system.a),
                b: rows_of(&self.system.b),
                noise_cov: rows_of(&self.system.noise_cov),
                u_max: self.system.u_max,
                x0: self.x0.iter().copied().collect(),
            },
            weights: WeightsSection {
                q: rows_of(&self.weights.q),
                q_f: rows_of(&self.weights.q_f),
                r: rows_of(&self.weights.r),
            },
            horizon: HorizonSection {
                n: self.horizon,
                n_r: self.recalc,
            },
            channel: ChannelSection {
                p_c: self.channel.p_c,
                p_s: self.channel.p_s,
                h_mode: self.h_mode,
            },
            governor: GovernorSection {
                delta: self.delta,
                reference: self.reference.clone(),
            },
            drift: DriftSection {
                zeta: self.zeta,
                c: self.c,
            },
            saturation: self.saturation,
            moments: self.moments,
            simulation: SimulationSection {
                steps: self.steps,
                paths: self.paths,
                seed: self.seed,
                objective: self.objective,
                on_infeasible: self.on_infeasible,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex_digest(h)
    }

    pub fn with_channel(&self, p_c: f64, p_s: f64) -> Result<Self> {
        let mut c = self.clone();
        c.channel = ChannelConfig::new(p_c, p_s)?;
        Ok(c)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_is_the_benchmark() {
        let c = ExperimentConfig::benchmark();
        assert_eq!(c.system.a, benchmark_a());
        assert_eq!(c.system.b, benchmark_system().b);
        assert_eq!(c.system.noise_cov, Mat::identity(4, 4) * 0.5);
        assert_eq!(c.system.u_max, 5.0);
        assert_eq!((c.horizon, c.recalc), (5, 3));
        assert_eq!((c.channel.p_c, c.channel.p_s), (0.9, 0.9));
        assert_eq!(c.delta, 0.5);
        assert_eq!((c.steps, c.paths), (120, 50));
        assert_eq!(c.x0, Vector::from_element(4, 1.0));
        assert_eq!(c.saturation, SaturationFn::Sigmoid);
        assert_eq!(
            c.reference,
            ReferenceSpec::Sinusoid {
                amplitude: 2.5,
                frequency: 0.083
            }
        );
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::benchmark();
        let again = ExperimentConfig::from_toml(&c.to_toml(), Path::new(".")).unwrap();
        assert_eq!(c.digest(), again.digest());
    }

    #[test]
    fn rejects_bad_delta() {
        let text = BENCHMARK_TOML.replace("delta = 0.5", "delta = 1.2");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_ragged() {
        let text = BENCHMARK_TOML.replace("u_max = 5.0", "u_max = 5.0\nbogus = 1");
        assert!(matches!(
            ExperimentConfig::from_toml(&text, Path::new(".")),
            Err(Error::Parse(_))
        ));
        assert!(matrix("m", &[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn drift_level_forms() {
        let f: DriftSection = toml::from_str("zeta = \"max\"\nc = 0.25").unwrap();
        assert_eq!(f.zeta.resolve(0.5), 0.5);
        assert_eq!(f.c.resolve(0.5), 0.25);
    }
}
