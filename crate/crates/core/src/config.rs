//! Run configuration for the command-line front end: one JSON document with
//! a `version` field, the source, the circuit and per-command settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::error::{Error, Result};
use crate::experiment::{DriftModel, LockOptions, PidConfig, DEFAULT_AUTO_PAIRS};
use crate::linalg::CMatrix;
use crate::metrics::Normalization;
use crate::probability::{ModelKind, ModelSpec, DEFAULT_BUDGET};
use crate::reconstruction::ReconstructionOptions;
use crate::state::{SourceConfig, TransferMatrix};

pub const CONFIG_VERSION: u32 = 1;

/// Where the transfer matrix comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferSpec {
    Inline {
        #[serde(with = "crate::io::matrix")]
        t: CMatrix,
    },
    /// JSON file holding `{"t": matrix}`; relative to the config file.
    File { path: PathBuf },
    Identity { modes: usize },
    UniformLoss { modes: usize, eta: f64 },
    /// `√η · U` with `U` Haar random; `η` defaults to the source's total
    /// efficiency.
    Haar {
        modes: usize,
        seed: u64,
        #[serde(default)]
        eta: Option<f64>,
    },
}

impl TransferSpec {
    pub fn resolve(&self, base: &Path, default_eta: f64) -> Result<TransferMatrix> {
        match self {
            TransferSpec::Inline { t } => TransferMatrix::new(t.clone()),
            TransferSpec::File { path } => crate::io::read_json(&base.join(path)),
            TransferSpec::Identity { modes } => Ok(TransferMatrix::identity(*modes)),
            TransferSpec::UniformLoss { modes, eta } => TransferMatrix::uniform_loss(*modes, *eta),
            TransferSpec::Haar { modes, seed, eta } => {
                let eta = eta.unwrap_or(default_eta);
                if !(0.0..=1.0).contains(&eta) {
                    return Err(Error::Config(format!("eta = {eta} outside [0, 1]")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(crate::random::lossy_haar_transfer(*modes, eta, &mut rng))
            }
        }
    }
}

/// `"full"`, `"korder:4"`, `"squeezer_only"` or `"classical"`.
pub fn parse_model(s: &str) -> Result<ModelSpec> {
    let (name, k) = match s.split_once(':') {
        Some((name, k)) => (
            name,
            Some(k.parse::<usize>().map_err(|_| Error::Config(format!("bad k in model `{s}`")))?),
        ),
        None => (s, None),
    };
    if k.is_some() && !matches!(name, "korder" | "k-order") {
        return Err(Error::Config(format!("model `{name}` takes no order")));
    }
    Ok(ModelSpec::new(ModelKind::parse(name, k)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbsTask {
    pub photons: usize,
    pub collision_free: bool,
    pub models: Vec<String>,
}

impl Default for ProbsTask {
    fn default() -> Self {
        Self {
            photons: 2,
            collision_free: true,
            models: vec!["full".into(), "classical".into()],
        }
    }
}

/// Three-setting phase scan for reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanTask {
    pub windows: usize,
    pub per_window: usize,
    /// Pulses per setting.
    pub pulses: f64,
    /// Port of the second coherent input; `None` skips that setting.
    pub second_input_port: Option<usize>,
    pub collisions: bool,
    pub threefolds: bool,
    /// Write expected counts instead of Poisson draws.
    pub noiseless: bool,
}

impl Default for ScanTask {
    fn default() -> Self {
        Self {
            windows: 5,
            per_window: 20,
            pulses: 1e7,
            second_input_port: None,
            collisions: false,
            threefolds: true,
            noiseless: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateTask {
    pub model: String,
    pub pulses: u64,
    pub n_max: usize,
    pub clicks: bool,
    /// Sample while the phase follows the `lock` section's loop.
    pub follow_lock: bool,
    pub scan: Option<ScanTask>,
}

impl Default for SimulateTask {
    fn default() -> Self {
        Self {
            model: "full".into(),
            pulses: 1_000_000,
            n_max: 4,
            clicks: true,
            follow_lock: false,
            scan: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructTask {
    /// Records CSV; defaults to `records.csv` in the output directory.
    pub records: Option<PathBuf>,
    pub options: ReconstructionOptions,
    /// Compare against the state the config describes.
    pub truth: bool,
}

impl Default for ReconstructTask {
    fn default() -> Self {
        Self {
            records: None,
            options: ReconstructionOptions::default(),
            truth: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareTask {
    pub model_a: String,
    pub model_b: String,
    /// Model the samples are drawn from.
    pub sample_model: String,
    pub samples: usize,
    pub min_photons: usize,
    pub max_photons: usize,
    pub normalization: Normalization,
}

impl Default for CompareTask {
    fn default() -> Self {
        Self {
            model_a: "korder:4".into(),
            model_b: "full".into(),
            sample_model: "full".into(),
            samples: 500,
            min_photons: 4,
            max_photons: 6,
            normalization: Normalization::FixedN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSign {
    pub j: usize,
    pub k: usize,
    pub sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockTask {
    pub drift: DriftModel,
    pub pid: PidConfig,
    pub options: LockOptions,
    /// Explicit error-signal pairs; otherwise the automatic choice.
    pub pairs: Option<Vec<PairSign>>,
    pub auto_pairs: usize,
    /// Grid-search `kp` and `ki` before the final run.
    pub tune: bool,
    pub tune_seeds: Vec<u64>,
}

impl Default for LockTask {
    fn default() -> Self {
        Self {
            drift: DriftModel::default(),
            pid: PidConfig::default(),
            options: LockOptions::default(),
            pairs: None,
            auto_pairs: DEFAULT_AUTO_PAIRS,
            tune: false,
            tune_seeds: vec![1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleTask {
    pub max_photons: usize,
    pub collisions: bool,
    pub cutoff: Option<usize>,
    pub tolerance: f64,
    /// Largest engine-oracle difference accepted.
    pub agreement: f64,
}

impl Default for OracleTask {
    fn default() -> Self {
        Self {
            max_photons: 3,
            collisions: true,
            cutoff: None,
            tolerance: crate::fock::DEFAULT_TOLERANCE,
            agreement: 1e-6,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub source: SourceConfig,
    pub transfer: TransferSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default)]
    pub probs: ProbsTask,
    #[serde(default)]
    pub simulate: SimulateTask,
    #[serde(default)]
    pub reconstruct: ReconstructTask,
    #[serde(default)]
    pub compare: CompareTask,
    #[serde(default)]
    pub lock: LockTask,
    #[serde(default)]
    pub oracle: OracleTask,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn escape(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

/// JSON pointer of a deserializer path.
pub fn json_pointer(path: &serde_path_to_error::Path) -> String {
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                let _ = write!(s, "/{index}");
            }
            Segment::Map { key } => {
                let _ = write!(s, "/{}", escape(key));
            }
            Segment::Enum { variant } => {
                let _ = write!(s, "/{}", escape(variant));
            }
            Segment::Unknown => {}
        }
    }
    s
}

fn schema(pointer: &str, e: impl std::fmt::Display) -> Error {
    Error::Schema {
        pointer: pointer.into(),
        message: e.to_string(),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str, base_dir: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            schema(&pointer, e.into_inner())
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Checks that do not need the transfer matrix.
    fn check(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(schema(
                "/version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        for (i, m) in self.probs.models.iter().enumerate() {
            parse_model(m).map_err(|e| schema(&format!("/probs/models/{i}"), e))?;
        }
        parse_model(&self.simulate.model).map_err(|e| schema("/simulate/model", e))?;
        for (field, m) in [
            ("model_a", &self.compare.model_a),
            ("model_b", &self.compare.model_b),
            ("sample_model", &self.compare.sample_model),
        ] {
            parse_model(m).map_err(|e| schema(&format!("/compare/{field}"), e))?;
        }
        self.lock.drift.validate().map_err(|e| schema("/lock/drift", e))?;
        self.lock.pid.validate().map_err(|e| schema("/lock/pid", e))?;
        Ok(())
    }

    /// The circuit, with the source checked against its input count.
    pub fn transfer(&self) -> Result<TransferMatrix> {
        let t = self
            .transfer
            .resolve(&self.base_dir, self.source.eta_tot())
            .map_err(|e| match e {
                Error::Unphysical(_) => e,
                other => schema("/transfer", other),
            })?;
        self.source.validate(t.inputs()).map_err(|e| schema("/source", e))?;
        Ok(t)
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Hash of the effective configuration and the resolved circuit. The
    /// output directory is left out so that reruns elsewhere match.
    pub fn hash(&self, transfer: &TransferMatrix) -> String {
        let mut cfg = self.clone();
        cfg.output = PathBuf::new();
        crate::io::content_hash(&(cfg, transfer))
    }
}
