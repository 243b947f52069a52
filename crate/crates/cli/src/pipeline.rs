//! Stage orchestration and the artifact manifest.

use std::path::{Path, PathBuf};

use mixup_core::ingest::WordPunctTokenizer;
use mixup_core::sha256_hex;
use serde::{Deserialize, Serialize};
use tracing::{error, info};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::{self, ScorePaths};

pub const BLOCKS: &str = "blocks.jsonl";
pub const GENERATED: &str = "generated.jsonl";
pub const RATED: &str = "rated.jsonl";
pub const STM: &str = "stm.json";
pub const CONSENSUS: &str = "consensus.json";
pub const INDEX: &str = "index.bin";
pub const SPLIT: &str = "split.json";
pub const PLAN: &str = "plan.json";
pub const PROMPTS: &str = "prompts.jsonl";
pub const DISTILLED: &str = "distilled.jsonl";
pub const SCORED: &str = "scored.jsonl";
pub const REWARDS: &str = "rewards.jsonl";
pub const MIXUP: &str = "mixup.jsonl";
pub const TRAIN: &str = "train.jsonl";
pub const SELECTION: &str = "selection.json";
pub const REPORT: &str = "report.json";
pub const PLOT: &str = "residuals.svg";
pub const MANIFEST: &str = "manifest.json";

/// Seed for one stage: the first eight bytes of SHA-256 over
/// `"<global seed>/<stage name>"`.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let hex = sha256_hex(format!("{global}/{stage}").as_bytes());
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seed: u64,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub inputs: Vec<ArtifactRecord>,
    pub outputs: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Hash of the configuration with paths removed.
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

fn config_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.paths = Default::default();
    sha256_hex(
        serde_json::to_string(&c)
            .expect("config serializes")
            .as_bytes(),
    )
}

/// Resolved locations of every artifact for one run.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub index: PathBuf,
    pub stm: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        let out_dir = cfg.paths.out_dir.clone();
        Layout {
            corpus: cfg.paths.corpus.clone(),
            index: cfg
                .paths
                .index
                .clone()
                .unwrap_or_else(|| out_dir.join(INDEX)),
            stm: cfg.paths.stm.clone().unwrap_or_else(|| out_dir.join(STM)),
            out_dir,
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Named inputs and output paths of a stage.
    fn io(&self, stage: &str) -> (Vec<(&'static str, Option<PathBuf>)>, Vec<PathBuf>) {
        let f = |n: &str| self.file(n);
        match stage {
            "segment" => (vec![("paths.corpus", self.corpus.clone())], vec![f(BLOCKS)]),
            "generate" => (vec![("blocks", Some(f(BLOCKS)))], vec![f(GENERATED)]),
            "rate" => (
                vec![("generated samples", Some(f(GENERATED)))],
                vec![f(RATED)],
            ),
            "estimate-stm" => (
                vec![("rated samples", Some(f(RATED)))],
                vec![self.stm.clone(), f(CONSENSUS)],
            ),
            "build-index" => (
                vec![("rated samples", Some(f(RATED)))],
                vec![self.index.clone(), f(SPLIT)],
            ),
            "cluster" => (vec![("rated samples", Some(f(RATED)))], vec![f(PLAN)]),
            "linearize" => (
                vec![
                    ("rated samples", Some(f(RATED))),
                    ("cluster plan", Some(f(PLAN))),
                ],
                vec![f(PROMPTS), f(DISTILLED)],
            ),
            "score" => (
                vec![
                    ("paths.index", Some(self.index.clone())),
                    ("paths.stm", Some(self.stm.clone())),
                    ("rated samples", Some(f(RATED))),
                    ("split", Some(f(SPLIT))),
                    ("distilled outputs", Some(f(DISTILLED))),
                ],
                vec![f(SCORED), f(REWARDS), f(MIXUP)],
            ),
            "select" => (
                vec![
                    ("mixup pool", Some(f(MIXUP))),
                    ("rated samples", Some(f(RATED))),
                ],
                vec![f(TRAIN), f(SELECTION)],
            ),
            "eval" => (
                vec![
                    ("scored samples", Some(f(SCORED))),
                    ("rated samples", Some(f(RATED))),
                ],
                vec![f(REPORT), f(PLOT)],
            ),
            other => unreachable!("unknown stage {other}"),
        }
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn record(&self, p: &Path, valid: bool) -> Option<ArtifactRecord> {
        let bytes = std::fs::read(p).ok()?;
        Some(ArtifactRecord {
            path: self.display(p),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            valid,
        })
    }
}

fn run_stage(
    cfg: &PipelineConfig,
    layout: &Layout,
    stage: &str,
    seed: u64,
) -> Result<(), CliError> {
    let f = |n: &str| layout.file(n);
    match stage {
        "segment" => {
            let corpus = layout.corpus.as_deref().expect("checked input");
            stages::segment(cfg, corpus, &f(BLOCKS), &WordPunctTokenizer).map(drop)
        }
        "generate" => {
            let client = stages::llm_client(cfg)?;
            stages::generate(cfg, &client, &f(BLOCKS), &f(GENERATED), seed).map(drop)
        }
        "rate" => {
            let client = stages::llm_client(cfg)?;
            stages::rate(cfg, &client, &f(GENERATED), &f(RATED)).map(drop)
        }
        "estimate-stm" => {
            stages::estimate_stm(cfg, &f(RATED), &layout.stm, Some(&f(CONSENSUS)), seed).map(drop)
        }
        "build-index" => {
            stages::build_index(cfg, &f(RATED), &layout.index, Some(&f(SPLIT)), seed).map(drop)
        }
        "cluster" => stages::cluster_samples(cfg, &f(RATED), &f(PLAN), true, seed).map(drop),
        "linearize" => {
            let client = stages::llm_client(cfg)?;
            stages::linearize(
                &f(RATED),
                &f(PLAN),
                &f(PROMPTS),
                Some((&client, &f(DISTILLED))),
            )
            .map(drop)
        }
        "score" => stages::score_pipeline(
            cfg,
            &ScorePaths {
                index: &layout.index,
                stm: &layout.stm,
                rated: &f(RATED),
                split: &f(SPLIT),
                distilled: &f(DISTILLED),
                scored_out: &f(SCORED),
                rewards_out: &f(REWARDS),
                mixup_out: &f(MIXUP),
            },
        )
        .map(drop),
        "select" => {
            let mixup = stages::read_pool(stage, &f(MIXUP))?;
            let original = stages::read_pool(stage, &f(RATED))?
                .into_iter()
                .filter(|s| s.is_rated_high())
                .collect();
            stages::select(cfg, mixup, original, &f(TRAIN), Some(&f(SELECTION))).map(drop)
        }
        "eval" => stages::eval(&f(SCORED), &f(RATED), &f(REPORT), Some(&f(PLOT))).map(drop),
        other => Err(CliError::Config(format!("unknown stage `{other}`"))),
    }
}

fn write_manifest(layout: &Layout, manifest: &Manifest) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    let path = layout.file(MANIFEST);
    std::fs::write(&path, text)
        .map_err(|e| CliError::stage("manifest", format!("{}: {e}", path.display())))
}

/// Runs the requested stages in dependency order and writes `manifest.json`
/// into the output directory, also when a stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    std::fs::create_dir_all(&layout.out_dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", layout.out_dir.display())))?;
    let mut manifest = Manifest {
        seed: cfg.seed,
        config_sha256: config_hash(cfg),
        stages: Vec::new(),
    };
    for stage in cfg.stage_list() {
        let seed = stage_seed(cfg.seed, stage);
        let (inputs, outputs) = layout.io(stage);
        let mut input_records = Vec::new();
        for (what, path) in inputs {
            let found = path.as_deref().and_then(|p| layout.record(p, true));
            match found {
                Some(r) => input_records.push(r),
                None => {
                    let err = CliError::Config(match path {
                        Some(p) => format!(
                            "stage `{stage}` needs {what} at {}, which does not exist",
                            p.display()
                        ),
                        None => format!("stage `{stage}` needs `{what}` to be set"),
                    });
                    error!(stage, error = %err, "missing input");
                    manifest.stages.push(StageRecord {
                        name: stage.to_string(),
                        seed,
                        status: StageStatus::Failed,
                        error: Some(err.to_string()),
                        inputs: input_records,
                        outputs: Vec::new(),
                    });
                    write_manifest(&layout, &manifest)?;
                    return Err(err);
                }
            }
        }
        for p in &outputs {
            if p.exists() {
                std::fs::remove_file(p)
                    .map_err(|e| CliError::stage(stage, format!("{}: {e}", p.display())))?;
            }
        }
        info!(stage, seed, "stage start");
        let started = std::time::Instant::now();
        let result = run_stage(cfg, &layout, stage, seed);
        let ok = result.is_ok();
        manifest.stages.push(StageRecord {
            name: stage.to_string(),
            seed,
            status: if ok {
                StageStatus::Ok
            } else {
                StageStatus::Failed
            },
            error: result.as_ref().err().map(ToString::to_string),
            inputs: input_records,
            outputs: outputs
                .iter()
                .filter_map(|p| layout.record(p, ok))
                .collect(),
        });
        if let Err(e) = result {
            error!(stage, error = %e, "stage failed");
            write_manifest(&layout, &manifest)?;
            return Err(e);
        }
        info!(
            stage,
            elapsed_ms = started.elapsed().as_millis() as u64,
            "stage done"
        );
    }
    write_manifest(&layout, &manifest)?;
    Ok(manifest)
}
