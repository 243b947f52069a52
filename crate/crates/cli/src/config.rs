//! Pipeline configuration: one TOML file, every section optional.

use std::path::{Path, PathBuf};

use mixup_core::cluster::ClusterConfig;
use mixup_core::gateway::noise::NoiseRates;
use mixup_core::gateway::LlmClientConfig;
use mixup_core::grpo::GrpoParams;
use mixup_core::index::{GraphParams, IndexConfig, IndexMode};
use mixup_core::ingest::SegmentConfig;
use mixup_core::reward::{RewardWeights, DEFAULT_TAU};
use mixup_core::scoring::{QualityRewardParams, Weighting, DEFAULT_K};
use mixup_core::select::SelectionConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Stage names in dependency order.
pub const STAGES: [&str; 10] = [
    "segment",
    "generate",
    "rate",
    "estimate-stm",
    "build-index",
    "cluster",
    "linearize",
    "score",
    "select",
    "eval",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    #[default]
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Articles as JSON lines `{id, text}`.
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Overrides for externally built artifacts.
    pub index: Option<PathBuf>,
    pub stm: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: None,
            out_dir: PathBuf::from("out"),
            index: None,
            stm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub min_chars: usize,
    pub token_limit: usize,
    pub overlap: usize,
    pub min_block: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            min_chars: 200,
            token_limit: 160,
            overlap: 0,
            min_block: 32,
        }
    }
}

impl IngestConfig {
    pub fn segment(&self) -> SegmentConfig {
        SegmentConfig {
            token_limit: self.token_limit,
            overlap: self.overlap,
            min_block: self.min_block,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Low-quality variants requested per high-quality sample.
    pub low_variants: usize,
    /// Share of low variants rewritten with surface noise.
    pub noisy_fraction: f64,
    /// Share of low variants paired with a different source sample.
    pub cross_topic_fraction: f64,
    pub noise: NoiseRates,
    pub embed_dim: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            low_variants: 3,
            noisy_fraction: 0.3,
            cross_topic_fraction: 0.1,
            noise: NoiseRates::default(),
            embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StmConfig {
    pub order: usize,
    pub smoothing_alpha: f64,
    pub max_iterations: usize,
}

impl Default for StmConfig {
    fn default() -> Self {
        StmConfig {
            order: 3,
            smoothing_alpha: 0.05,
            max_iterations: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// Unset picks exact search for small reference sets.
    pub mode: Option<IndexMode>,
    pub graph: GraphParams,
    pub recall_probes: usize,
    /// Share of rated samples held out from the reference set for evaluation.
    pub eval_fraction: f64,
}

impl Default for IndexSection {
    fn default() -> Self {
        let d = IndexConfig::default();
        IndexSection {
            mode: d.mode,
            graph: d.graph,
            recall_probes: d.recall_probes,
            eval_fraction: 0.2,
        }
    }
}

impl IndexSection {
    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            mode: self.mode,
            graph: self.graph,
            recall_probes: self.recall_probes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub k: usize,
    pub weighting: Weighting,
    pub quality: QualityRewardParams,
    pub weights: RewardWeights,
    pub tau: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            k: DEFAULT_K,
            weighting: Weighting::None,
            quality: QualityRewardParams::default(),
            weights: RewardWeights::default(),
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Number of clusters; 0 derives it from `target_size`.
    pub k: usize,
    pub target_size: f64,
    pub c_min: usize,
    pub c_max: usize,
    pub std: Option<f64>,
    pub batch_size: usize,
    pub iters: usize,
    pub refine_steps: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let d = ClusterConfig::default();
        ClusterSection {
            k: 0,
            target_size: 5.0,
            c_min: d.c_min,
            c_max: d.c_max,
            std: d.std,
            batch_size: d.batch_size,
            iters: d.iters,
            refine_steps: d.refine_steps,
        }
    }
}

impl ClusterSection {
    pub fn cluster_config(&self, n: usize, seed: u64) -> ClusterConfig {
        let k = if self.k > 0 {
            self.k
        } else {
            ((n as f64 / self.target_size).round() as usize).max(1)
        };
        ClusterConfig {
            k,
            c_min: self.c_min,
            c_max: self.c_max,
            mean: (self.k == 0).then_some(n as f64 / k as f64),
            std: self.std,
            batch_size: self.batch_size,
            iters: self.iters,
            refine_steps: self.refine_steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: GatewayMode,
    /// Stages to run; empty means all, in dependency order.
    pub stages: Vec<String>,
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub llm: LlmClientConfig,
    pub generate: GenerateConfig,
    pub stm: StmConfig,
    pub index: IndexSection,
    pub scoring: ScoringConfig,
    pub cluster: ClusterSection,
    pub select: SelectionConfig,
    pub grpo: GrpoParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            mode: GatewayMode::Mock,
            stages: Vec::new(),
            paths: PathsConfig::default(),
            ingest: IngestConfig::default(),
            llm: LlmClientConfig::default(),
            generate: GenerateConfig::default(),
            stm: StmConfig::default(),
            index: IndexSection::default(),
            scoring: ScoringConfig::default(),
            cluster: ClusterSection::default(),
            select: SelectionConfig::default(),
            grpo: GrpoParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.out_dir);
        for p in [
            &mut self.paths.corpus,
            &mut self.paths.index,
            &mut self.paths.stm,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for s in &self.stages {
            if !STAGES.contains(&s.as_str()) {
                return bad(format!("unknown stage `{s}`"));
            }
        }
        self.ingest
            .segment()
            .validate()
            .map_err(|e| CliError::Config(format!("ingest: {e}")))?;
        self.llm
            .validate()
            .map_err(|e| CliError::Config(format!("llm: {e}")))?;
        match self.mode {
            GatewayMode::Mock if !self.llm.is_mock() => {
                return bad("mode = \"mock\" needs llm.endpoint = \"mock\"".into())
            }
            GatewayMode::Live if self.llm.is_mock() => {
                return bad("mode = \"live\" needs an http(s) llm.endpoint".into())
            }
            _ => {}
        }
        if self.generate.embed_dim == 0 {
            return bad("generate.embed_dim must be positive".into());
        }
        for (name, f) in [
            ("noisy_fraction", self.generate.noisy_fraction),
            ("cross_topic_fraction", self.generate.cross_topic_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("generate.{name} must lie in [0, 1]"));
            }
        }
        if self.stm.order != 2 && self.stm.order != 3 {
            return bad(format!("stm.order must be 2 or 3, got {}", self.stm.order));
        }
        if !(0.0..=0.5).contains(&self.stm.smoothing_alpha) {
            return bad("stm.smoothing_alpha must lie in [0, 0.5]".into());
        }
        if !(self.index.eval_fraction > 0.0 && self.index.eval_fraction < 1.0) {
            return bad("index.eval_fraction must lie in (0, 1)".into());
        }
        if self.scoring.k < 2 {
            return bad("scoring.k must be at least 2".into());
        }
        self.scoring
            .quality
            .validate()
            .map_err(|e| CliError::Config(format!("scoring.quality: {e}")))?;
        self.scoring
            .weights
            .validate()
            .map_err(|e| CliError::Config(format!("scoring.weights: {e}")))?;
        mixup_core::reward::AlignmentParams::new(self.scoring.tau)
            .map_err(|e| CliError::Config(format!("scoring.tau: {e}")))?;
        if self.cluster.k == 0 && !(self.cluster.target_size > 1.0) {
            return bad("cluster.target_size must exceed 1".into());
        }
        self.select
            .validate()
            .map_err(|e| CliError::Config(format!("select: {e}")))?;
        self.grpo
            .validate()
            .map_err(|e| CliError::Config(format!("grpo: {e}")))?;
        Ok(())
    }

    /// Requested stages in dependency order.
    pub fn stage_list(&self) -> Vec<&'static str> {
        STAGES
            .iter()
            .copied()
            .filter(|s| self.stages.is_empty() || self.stages.iter().any(|x| x == s))
            .collect()
    }
}
