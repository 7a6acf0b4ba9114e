use std::path::{Path, PathBuf};

use igcap::corpus::SyntheticSpec;
use igcap::model::ModelConfig;
use igcap::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const OUT_ENV: &str = "IGCAP_OUT";

/// Scoring objective of `eval`, written `mle`, `ig:α`, `zero_image:α` or `lm_plus_cap[:α]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalObjective {
    Mle,
    Ig(f64),
    ZeroImage(f64),
    LmPlusCap(f64),
}

impl EvalObjective {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        let (kind, alpha) = match s.split_once(':') {
            Some((k, a)) => {
                let a: f64 = a
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("objective {s:?}: alpha is not a number")))?;
                (k.trim(), Some(a))
            }
            None => (s.trim(), None),
        };
        if let Some(a) = alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(CliError::Config(format!("objective {s:?}: alpha must lie in [0, 1]")));
            }
        }
        let dflt = igcap::scoring::DEFAULT_ALPHA;
        Ok(match (kind, alpha) {
            ("mle", None) => EvalObjective::Mle,
            ("ig", a) => EvalObjective::Ig(a.unwrap_or(dflt)),
            ("zero_image", a) => EvalObjective::ZeroImage(a.unwrap_or(dflt)),
            ("lm_plus_cap", a) => EvalObjective::LmPlusCap(a.unwrap_or(igcap::scoring::LM_PLUS_CAP_ALPHA)),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown objective {s:?}; expected mle, ig:A, zero_image:A or lm_plus_cap[:A]"
                )))
            }
        })
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            EvalObjective::Mle => 0.0,
            EvalObjective::Ig(a) | EvalObjective::ZeroImage(a) | EvalObjective::LmPlusCap(a) => a,
        }
    }

    pub fn label(&self) -> String {
        match self {
            EvalObjective::Mle => "mle".into(),
            EvalObjective::Ig(a) => format!("ig:{a}"),
            EvalObjective::ZeroImage(a) => format!("zero_image:{a}"),
            EvalObjective::LmPlusCap(a) => format!("lm_plus_cap:{a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub objective: String,
    /// Length-normalized log-likelihoods instead of sums.
    pub normalize: bool,
    pub alpha_grid: Vec<f64>,
    pub recall_ks: Vec<usize>,
    /// Image→caption truth map (TSV); retrieval is reported when set.
    pub truth_map: Option<PathBuf>,
    /// Directory holding the language model for `lm_plus_cap`.
    pub lm_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            objective: "ig:0.8".into(),
            normalize: false,
            alpha_grid: igcap::evalharness::default_alpha_grid(),
            recall_ks: igcap::evalharness::DEFAULT_RECALL_KS.to_vec(),
            truth_map: None,
            lm_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the data, model and train seeds.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every CPU, 1 runs sequentially.
    pub workers: usize,
    /// Defaults to `<out_dir>/model`.
    pub model_dir: Option<PathBuf>,
    pub data: SyntheticSpec,
    /// `image_size` and `channels` follow `data`; `vocab_size` follows the generated vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            model_dir: None,
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies the global seed, the output-root variable and image geometry.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        if let Ok(dir) = std::env::var(OUT_ENV) {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.model.seed = s;
            self.train.seed = s;
        }
        self.model.image_size = self.data.image_size;
        self.model.channels = self.data.channels;
        self.data.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        EvalObjective::parse(&self.eval.objective)?;
        Ok(())
    }

    pub fn objective(&self) -> Result<EvalObjective, CliError> {
        EvalObjective::parse(&self.eval.objective)
    }

    /// Hex SHA-256 of the serialized config, minus paths and worker count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.model_dir = None;
        c.workers = 0;
        c.eval.truth_map = None;
        c.eval.lm_dir = None;
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.model_dir.clone().unwrap_or_else(|| self.out_dir.join("model"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out_dir.join("eval")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
