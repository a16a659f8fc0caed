//! Run configuration: one JSON file describes the model, the corpora,
//! the plan, the hyperparameters and the output directory. Every
//! command writes the fully resolved config it actually used into the
//! run directory, so runs are reproducible from their artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use layercake_core::corpus::{gen_corpus, Corpus, CorpusKind, Split};
use layercake_core::probe::CapturePosition;
use layercake_core::surgery::SourcePolicy;
use layercake_core::train::Hyper;
use layercake_core::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSpec {
    Generated {
        kind: CorpusKind,
        seed: u64,
        n_tokens: usize,
    },
    File {
        file: PathBuf,
    },
}

impl CorpusSpec {
    pub fn materialize(&self, id: &str, split: Split) -> layercake_core::Result<Corpus> {
        match self {
            CorpusSpec::Generated {
                kind,
                seed,
                n_tokens,
            } => {
                let mut c = gen_corpus(*kind, *seed, *n_tokens, split)?;
                c.id = id.to_string();
                Ok(c)
            }
            CorpusSpec::File { file } => Corpus::load_file(file, id, split),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub general_train: CorpusSpec,
    pub general_heldout: CorpusSpec,
    pub domain_train: CorpusSpec,
    pub domain_heldout: CorpusSpec,
    pub general_tasks: TaskSpec,
    pub domain_tasks: TaskSpec,
    /// domain:general token ratio for `train --corpus mix`.
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: (u64, u64),
}

fn default_mix_ratio() -> (u64, u64) {
    (5, 2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default)]
    pub capture_position: CapturePosition,
    /// Cap on probe eval sequences/tasks (keeps analyze runs fast).
    pub max_examples: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            capture_position: CapturePosition::LastToken,
            max_examples: Some(64),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SurgeryConfig {
    #[serde(default)]
    pub source_policy: SourcePolicy,
    /// Reinitialize the final block from the deleted blocks plus the
    /// survivor instead of the deleted blocks only.
    #[serde(default)]
    pub reinit_include_survivor: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Inputs {
    pub checkpoint: Option<PathBuf>,
    pub freeze_mask: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,
    pub tuned_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Expansion plan notation, e.g. "(2+1)x2|2|1~!1".
    pub plan: Option<String>,
    pub hyper: Hyper,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub surgery: SurgeryConfig,
    #[serde(default)]
    pub inputs: Inputs,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| format!("cannot parse config {}: {e}", path.display()))
    }

    /// Desk-scale defaults: an 8-block model, 2M general tokens, 400k
    /// domain tokens, and the standard training schedule.
    pub fn example() -> Self {
        RunConfig {
            model: ModelConfig {
                n_layers: 8,
                d_model: 64,
                n_heads: 4,
                d_ff: 256,
                vocab_size: 256,
                max_seq_len: 256,
                norm_eps: 1e-5,
                seed: 42,
            },
            data: DataConfig {
                general_train: CorpusSpec::Generated {
                    kind: CorpusKind::General,
                    seed: 11,
                    n_tokens: 2_000_000,
                },
                general_heldout: CorpusSpec::Generated {
                    kind: CorpusKind::General,
                    seed: 12,
                    n_tokens: 32_768,
                },
                domain_train: CorpusSpec::Generated {
                    kind: CorpusKind::Domain,
                    seed: 21,
                    n_tokens: 400_000,
                },
                domain_heldout: CorpusSpec::Generated {
                    kind: CorpusKind::Domain,
                    seed: 22,
                    n_tokens: 32_768,
                },
                general_tasks: TaskSpec {
                    seed: 31,
                    n_tasks: 128,
                },
                domain_tasks: TaskSpec {
                    seed: 32,
                    n_tasks: 128,
                },
                mix_ratio: (5, 2),
            },
            plan: Some("(2+1)x2|2|1~!1".to_string()),
            hyper: Hyper {
                batch: 16,
                seq_len: 128,
                ..Hyper::default()
            },
            probe: ProbeConfig::default(),
            surgery: SurgeryConfig::default(),
            inputs: Inputs::default(),
            seed: 42,
            out_dir: PathBuf::from("runs/demo"),
        }
    }
}
