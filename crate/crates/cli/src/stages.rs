//! One function per pipeline stage. Each reads its inputs from explicit paths
//! and writes its outputs to explicit paths, so subcommands and the pipeline
//! driver share the same code.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use mixup_core::cluster::{cluster, ClusterConfig, ClusterError};
use mixup_core::embed::{EmbeddingProvider, HashingEmbedder};
use mixup_core::gateway::noise::perturb;
use mixup_core::gateway::{
    parse_generated_pairs, parse_rating, render_prompt, vars, LlmClient, TemplateName,
};
use mixup_core::grpo::{group_normalize, grpo_objective, GroupRollout, GrpoParams, GrpoReport};
use mixup_core::index::{build_index_with, ReferenceIndex};
use mixup_core::ingest::{
    dedupe_and_filter, segment_articles, Article, ArticleBlock, TokenCounter,
};
use mixup_core::jsonl;
use mixup_core::metrics::{
    evaluate, histogram_svg, histogram_text, label_distribution, round_to_label, stratified_split,
};
use mixup_core::reward::{
    format_reward, linearize_cluster, parse_think_answer, AlignmentParams, LinearizeTemplate,
    ScoreRequest, ScoreResponse, Scorer,
};
use mixup_core::scoring::QualityScorer;
use mixup_core::select::{mix_select, score_samples, SelectError, Selection};
use mixup_core::stm::{
    consensus_stats_labels, smooth_stm, solve_stm_with, ScoreTransitionModel, SolverConfig,
};
use mixup_core::{InstructionSample, QualityLabel, TaskType, VariantKind, NUM_LABELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::config::PipelineConfig;
use crate::error::CliError;

/// Text a sample is embedded from.
pub fn sample_text(s: &InstructionSample) -> String {
    format!("{}\n{}", s.instruction, s.output)
}

pub fn llm_client(cfg: &PipelineConfig) -> Result<LlmClient, CliError> {
    LlmClient::from_config(cfg.llm.clone()).map_err(|e| CliError::Config(format!("llm: {e}")))
}

fn read_samples(stage: &str, path: &Path) -> Result<Vec<InstructionSample>, CliError> {
    jsonl::read_samples(path).map_err(|e| CliError::stage(stage, e))
}

fn write_jsonl<T: Serialize>(stage: &str, path: &Path, items: &[T]) -> Result<(), CliError> {
    jsonl::write(path, items).map_err(|e| CliError::stage(stage, e))
}

fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::stage(stage, e))?;
    text.push('\n');
    write_text(stage, path, &text)
}

fn write_text(stage: &str, path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &str, path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

fn embeddings(stage: &str, samples: &[InstructionSample]) -> Result<Vec<Vec<f64>>, CliError> {
    samples
        .iter()
        .map(|s| {
            s.embedding
                .clone()
                .ok_or_else(|| CliError::stage(stage, format!("sample {} has no embedding", s.id)))
        })
        .collect()
}

pub fn segment(
    cfg: &PipelineConfig,
    corpus: &Path,
    out: &Path,
    tok: &dyn TokenCounter,
) -> Result<usize, CliError> {
    const S: &str = "segment";
    let articles: Vec<Article> = jsonl::read(corpus).map_err(|e| CliError::stage(S, e))?;
    let texts: Vec<String> = articles.iter().map(|a| a.text.clone()).collect();
    let kept_texts = dedupe_and_filter(&texts, cfg.ingest.min_chars);
    let mut next = kept_texts.iter().peekable();
    let kept: Vec<Article> = articles
        .into_iter()
        .filter(|a| {
            let keep = next.peek().is_some_and(|t| **t == a.text);
            if keep {
                next.next();
            }
            keep
        })
        .collect();
    let segment_cfg = cfg.ingest.segment();
    segment_cfg
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let blocks = segment_articles(&kept, &segment_cfg, tok).map_err(|e| CliError::stage(S, e))?;
    write_jsonl(S, out, &blocks)?;
    info!(
        stage = S,
        articles = texts.len(),
        kept = kept.len(),
        blocks = blocks.len(),
        "segmented"
    );
    Ok(blocks.len())
}

/// High-quality samples per block, then low-quality variants per sample.
pub fn generate(
    cfg: &PipelineConfig,
    client: &LlmClient,
    blocks_path: &Path,
    out: &Path,
    seed: u64,
) -> Result<usize, CliError> {
    const S: &str = "generate";
    let blocks: Vec<ArticleBlock> = jsonl::read(blocks_path).map_err(|e| CliError::stage(S, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks: Vec<TaskType> = blocks
        .iter()
        .map(|_| TaskType::ALL[rng.random_range(0..TaskType::ALL.len())])
        .collect();
    let prompts = blocks
        .iter()
        .zip(&tasks)
        .map(|(b, t)| {
            render_prompt(
                TemplateName::GenHigh,
                &vars([("task_type", t.as_str()), ("passage", b.text.as_str())]),
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::stage(S, e))?;
    let replies = client.complete_many(&prompts);

    let mut highs: Vec<InstructionSample> = Vec::new();
    for (bi, (b, reply)) in blocks.iter().zip(replies).enumerate() {
        let pairs = match reply.and_then(|t| parse_generated_pairs(&t)) {
            Ok(p) => p,
            Err(e) => {
                warn!(stage = S, block = bi, error = %e, "block produced no samples");
                continue;
            }
        };
        for (j, (instruction, output)) in pairs.into_iter().enumerate() {
            let mut s =
                InstructionSample::new(format!("h{bi:05}_{j}"), instruction, output, tasks[bi]);
            s.variant = VariantKind::Normal;
            s.source = Some(format!("{}#{}", b.article_id, b.index));
            highs.push(s);
        }
    }

    let n = cfg.generate.low_variants;
    let prompts = highs
        .iter()
        .map(|h| {
            render_prompt(
                TemplateName::GenLow,
                &vars([
                    ("n", n.to_string()),
                    ("task_type", h.task_type.as_str().to_string()),
                    (
                        "orig",
                        format!("Instruction: {}\nOutput: {}", h.instruction, h.output),
                    ),
                ]),
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::stage(S, e))?;
    let replies = client.complete_many(&prompts);

    let mut lows: Vec<Vec<InstructionSample>> = Vec::with_capacity(highs.len());
    for (h, reply) in highs.iter().zip(replies) {
        let pairs = match reply.and_then(|t| parse_generated_pairs(&t)) {
            Ok(p) => p,
            Err(e) => {
                warn!(stage = S, sample = %h.id, error = %e, "no low-quality variants");
                Vec::new()
            }
        };
        lows.push(
            pairs
                .into_iter()
                .take(n)
                .enumerate()
                .map(|(j, (instruction, output))| {
                    let mut s = InstructionSample::new(
                        format!("{}_l{j}", h.id),
                        instruction,
                        output,
                        h.task_type,
                    );
                    s.variant = VariantKind::Normal;
                    s.source = h.source.clone();
                    s.extra.insert("target".into(), Value::String(h.id.clone()));
                    s
                })
                .collect(),
        );
    }

    let g = &cfg.generate;
    for (hi, group) in lows.iter_mut().enumerate() {
        for s in group.iter_mut() {
            let u: f64 = rng.random();
            if u < g.noisy_fraction {
                s.variant = VariantKind::Noisy;
                s.instruction = perturb(&s.instruction, &g.noise, rng.random());
                s.output = perturb(&s.output, &g.noise, rng.random());
            } else if u < g.noisy_fraction + g.cross_topic_fraction && highs.len() > 1 {
                let mut other = rng.random_range(0..highs.len() - 1);
                if other >= hi {
                    other += 1;
                }
                let borrowed = mixup_core::ingest::split_sentences(&highs[other].output);
                s.variant = VariantKind::CrossTopic;
                s.output = borrowed.into_iter().next().unwrap_or_default();
            }
        }
    }

    let mut all = Vec::with_capacity(highs.len() * (n + 1));
    for (h, group) in highs.into_iter().zip(lows) {
        all.push(h);
        all.extend(group);
    }
    write_jsonl(S, out, &all)?;
    info!(
        stage = S,
        blocks = blocks.len(),
        samples = all.len(),
        "generated"
    );
    Ok(all.len())
}

/// Judge ratings plus embeddings. Unparseable ratings get label 0.
pub fn rate(
    cfg: &PipelineConfig,
    client: &LlmClient,
    input: &Path,
    out: &Path,
) -> Result<usize, CliError> {
    const S: &str = "rate";
    let mut samples = read_samples(S, input)?;
    let prompts = samples
        .iter()
        .map(|s| {
            render_prompt(
                TemplateName::Rating,
                &vars([
                    ("instruction", s.instruction.as_str()),
                    ("input", ""),
                    ("response", s.output.as_str()),
                ]),
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::stage(S, e))?;
    let replies = client.complete_many(&prompts);
    let mut failed = 0usize;
    for (s, reply) in samples.iter_mut().zip(replies) {
        match reply.and_then(|t| parse_rating(&t)) {
            Ok(r) => s.set_judge_rating(&r),
            Err(e) => {
                failed += 1;
                s.rating_raw = None;
                s.rating = Some(QualityLabel::new(0).expect("0 is a label"));
                s.extra
                    .insert("judge_error".into(), Value::String(e.to_string()));
            }
        }
    }
    let embedder = HashingEmbedder::new(cfg.generate.embed_dim);
    samples
        .par_iter_mut()
        .for_each(|s| s.embedding = Some(embedder.embed(&sample_text(s))));
    write_jsonl(S, out, &samples)?;
    info!(stage = S, samples = samples.len(), failed, "rated");
    Ok(samples.len())
}

pub fn estimate_stm(
    cfg: &PipelineConfig,
    rated: &Path,
    stm_out: &Path,
    stats_out: Option<&Path>,
    seed: u64,
) -> Result<ScoreTransitionModel, CliError> {
    const S: &str = "estimate-stm";
    let samples = read_samples(S, rated)?;
    let mut index_cfg = cfg.index.index_config();
    index_cfg.graph.seed = seed;
    let index = build_index_with(&samples, &index_cfg).map_err(|e| CliError::stage(S, e))?;
    let knn = index
        .self_knn(cfg.stm.order - 1)
        .map_err(|e| CliError::stage(S, e))?;
    let stats = consensus_stats_labels(index.labels(), &knn, cfg.stm.order)
        .map_err(|e| CliError::stage(S, e))?;
    let solver = SolverConfig {
        max_iterations: cfg.stm.max_iterations,
        seed,
        ..SolverConfig::default()
    };
    let raw = solve_stm_with(&stats, &solver).map_err(|e| CliError::stage(S, e))?;
    let model = smooth_stm(&raw, cfg.stm.smoothing_alpha).map_err(|e| CliError::stage(S, e))?;
    model.save(stm_out).map_err(|e| CliError::stage(S, e))?;
    if let Some(p) = stats_out {
        write_json(S, p, &stats)?;
    }
    info!(
        stage = S,
        samples = samples.len(),
        residual = model.residual,
        "estimated transition matrix"
    );
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub reference: Vec<String>,
    pub eval: Vec<String>,
}

/// Builds the reference index. With `split_out`, a stratified share of the
/// samples is held out and only the rest is indexed.
pub fn build_index(
    cfg: &PipelineConfig,
    rated: &Path,
    index_out: &Path,
    split_out: Option<&Path>,
    seed: u64,
) -> Result<usize, CliError> {
    const S: &str = "build-index";
    let samples = read_samples(S, rated)?;
    let reference: Vec<InstructionSample> = match split_out {
        None => samples,
        Some(p) => {
            let labels = samples
                .iter()
                .map(|s| {
                    s.rating
                        .map(|l| l.index())
                        .ok_or_else(|| CliError::stage(S, format!("sample {} has no rating", s.id)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (r, e) = stratified_split(&labels, cfg.index.eval_fraction, seed)
                .map_err(|e| CliError::stage(S, e))?;
            let split = SplitFile {
                reference: r.iter().map(|&i| samples[i].id.clone()).collect(),
                eval: e.iter().map(|&i| samples[i].id.clone()).collect(),
            };
            write_json(S, p, &split)?;
            r.into_iter().map(|i| samples[i].clone()).collect()
        }
    };
    let mut index_cfg = cfg.index.index_config();
    index_cfg.graph.seed = seed;
    let index = build_index_with(&reference, &index_cfg).map_err(|e| CliError::stage(S, e))?;
    index.save(index_out).map_err(|e| CliError::stage(S, e))?;
    info!(stage = S, rows = index.len(), dim = index.dim(), mode = ?index.mode(), "index built");
    Ok(index.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub seed: u64,
    pub params: ClusterConfig,
    pub sample_ids: Vec<String>,
    pub assignment: Vec<usize>,
    pub capacities: Vec<usize>,
    pub objective: f64,
}

impl PlanFile {
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.capacities.len()];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

/// Capacity-constrained clustering; `low_only` keeps samples rated below the
/// high-quality threshold.
pub fn cluster_samples(
    cfg: &PipelineConfig,
    input: &Path,
    plan_out: &Path,
    low_only: bool,
    seed: u64,
) -> Result<PlanFile, CliError> {
    const S: &str = "cluster";
    let samples: Vec<InstructionSample> = read_samples(S, input)?
        .into_iter()
        .filter(|s| !low_only || !s.is_rated_high())
        .collect();
    let emb = embeddings(S, &samples)?;
    let params = cfg.cluster.cluster_config(emb.len(), seed);
    let plan = cluster(&emb, &params).map_err(|e| match e {
        ClusterError::Infeasible { .. }
        | ClusterError::TooManyClusters { .. }
        | ClusterError::CapacitySum { .. } => CliError::infeasible(S, e),
        other => CliError::stage(S, other),
    })?;
    let file = PlanFile {
        seed,
        params,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        assignment: plan.assignment,
        capacities: plan.capacities,
        objective: plan.objective,
    };
    write_json(S, plan_out, &file)?;
    info!(
        stage = S,
        points = emb.len(),
        clusters = params.k,
        objective = file.objective,
        "clustered"
    );
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub cluster: usize,
    pub variant_ids: Vec<String>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledRecord {
    pub id: String,
    pub cluster: usize,
    pub variant_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn by_id(samples: &[InstructionSample]) -> HashMap<&str, &InstructionSample> {
    samples.iter().map(|s| (s.id.as_str(), s)).collect()
}

/// Renders one distillation prompt per cluster and, given a client, collects
/// the distilled outputs.
pub fn linearize(
    input: &Path,
    plan_path: &Path,
    prompts_out: &Path,
    distill: Option<(&LlmClient, &Path)>,
) -> Result<usize, CliError> {
    const S: &str = "linearize";
    let samples = read_samples(S, input)?;
    let plan: PlanFile = read_json(S, plan_path)?;
    let lookup = by_id(&samples);
    let template = LinearizeTemplate::default();
    let mut records = Vec::with_capacity(plan.capacities.len());
    for (c, members) in plan.members().into_iter().enumerate() {
        let variants = members
            .iter()
            .map(|&row| {
                let id = &plan.sample_ids[row];
                lookup
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| {
                        CliError::stage(S, format!("plan references unknown sample {id}"))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let prompt = linearize_cluster(&variants, &template).map_err(|e| CliError::stage(S, e))?;
        records.push(PromptRecord {
            id: format!("c{c:05}"),
            cluster: c,
            variant_ids: variants.into_iter().map(|v| v.id).collect(),
            prompt,
        });
    }
    write_jsonl(S, prompts_out, &records)?;
    if let Some((client, out)) = distill {
        let prompts: Vec<String> = records.iter().map(|r| r.prompt.clone()).collect();
        let replies = client.complete_many(&prompts);
        let distilled: Vec<DistilledRecord> = records
            .into_iter()
            .zip(replies)
            .map(|(r, reply)| {
                let (generated_text, error) = match reply {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                DistilledRecord {
                    id: r.id,
                    cluster: r.cluster,
                    variant_ids: r.variant_ids,
                    generated_text,
                    error,
                }
            })
            .collect();
        let failed = distilled.iter().filter(|d| d.error.is_some()).count();
        write_jsonl(S, out, &distilled)?;
        info!(stage = S, clusters = distilled.len(), failed, "distilled");
        return Ok(distilled.len());
    }
    info!(stage = S, clusters = records.len(), "linearized");
    Ok(records.len())
}

pub fn quality_scorer(
    cfg: &PipelineConfig,
    stage: &str,
    index_path: &Path,
    stm_path: &Path,
) -> Result<QualityScorer, CliError> {
    let index = ReferenceIndex::load(index_path).map_err(|e| CliError::stage(stage, e))?;
    let stm = ScoreTransitionModel::load(stm_path).map_err(|e| CliError::stage(stage, e))?;
    QualityScorer::new(
        index,
        stm,
        cfg.scoring.k,
        cfg.scoring.weighting,
        cfg.scoring.quality,
    )
    .map_err(|e| CliError::stage(stage, e))
}

/// Appends `posterior`, `s_hat` and `r_q` to each sample.
pub fn calibrate(
    stage: &str,
    scorer: &QualityScorer,
    samples: &mut [InstructionSample],
) -> Result<(), CliError> {
    samples.par_iter_mut().try_for_each(|s| {
        let e = s
            .embedding
            .as_ref()
            .ok_or_else(|| CliError::stage(stage, format!("sample {} has no embedding", s.id)))?;
        let c = scorer
            .score(e)
            .map_err(|err| CliError::stage(stage, format!("sample {}: {err}", s.id)))?;
        s.extra.insert("posterior".into(), json!(c.posterior));
        s.extra.insert("s_hat".into(), json!(c.s_hat));
        s.extra.insert("r_q".into(), json!(c.r_q));
        Ok(())
    })
}

/// Standalone scoring of a sample file.
pub fn score_file(
    cfg: &PipelineConfig,
    index_path: &Path,
    stm_path: &Path,
    input: &Path,
    out: &Path,
) -> Result<usize, CliError> {
    const S: &str = "score";
    let scorer = quality_scorer(cfg, S, index_path, stm_path)?;
    let mut samples = read_samples(S, input)?;
    calibrate(S, &scorer, &mut samples)?;
    write_jsonl(S, out, &samples)?;
    info!(stage = S, samples = samples.len(), "scored");
    Ok(samples.len())
}

pub struct ScorePaths<'a> {
    pub index: &'a Path,
    pub stm: &'a Path,
    pub rated: &'a Path,
    pub split: &'a Path,
    pub distilled: &'a Path,
    pub scored_out: &'a Path,
    pub rewards_out: &'a Path,
    pub mixup_out: &'a Path,
}

fn majority_task(variants: &[&InstructionSample]) -> TaskType {
    let mut counts: BTreeMap<TaskType, usize> = BTreeMap::new();
    variants
        .iter()
        .for_each(|v| *counts.entry(v.task_type).or_default() += 1);
    let best = counts.values().copied().max().unwrap_or(0);
    counts
        .into_iter()
        .find(|(_, n)| *n == best)
        .map_or(TaskType::Qa, |(t, _)| t)
}

/// Calibrates the held-out samples, rewards each distilled output against its
/// cluster centroid and turns well-formed outputs into mixup samples.
pub fn score_pipeline(cfg: &PipelineConfig, p: &ScorePaths<'_>) -> Result<usize, CliError> {
    const S: &str = "score";
    let quality = quality_scorer(cfg, S, p.index, p.stm)?;
    let rated = read_samples(S, p.rated)?;
    let split: SplitFile = read_json(S, p.split)?;
    let lookup = by_id(&rated);
    let mut held_out = split
        .eval
        .iter()
        .map(|id| {
            lookup
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| CliError::stage(S, format!("split references unknown sample {id}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    calibrate(S, &quality, &mut held_out)?;
    write_jsonl(S, p.scored_out, &held_out)?;

    let dim = quality.index.dim();
    let alignment =
        AlignmentParams::new(cfg.scoring.tau).map_err(|e| CliError::Config(e.to_string()))?;
    let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(dim));
    let scorer = Scorer::new(
        quality,
        cfg.scoring.weights,
        alignment,
        Some(embedder.clone()),
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let distilled: Vec<DistilledRecord> =
        jsonl::read(p.distilled).map_err(|e| CliError::stage(S, e))?;
    let usable: Vec<&DistilledRecord> = distilled
        .iter()
        .filter(|d| d.generated_text.is_some())
        .collect();
    let mut requests = Vec::with_capacity(usable.len());
    let mut members: Vec<Vec<&InstructionSample>> = Vec::with_capacity(usable.len());
    for d in &usable {
        let vs = d
            .variant_ids
            .iter()
            .map(|id| {
                lookup.get(id.as_str()).copied().ok_or_else(|| {
                    CliError::stage(
                        S,
                        format!("cluster {} references unknown sample {id}", d.id),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        requests.push(ScoreRequest {
            id: Value::String(d.id.clone()),
            generated_text: d.generated_text.clone().unwrap_or_default(),
            reference_text: None,
            e_gen: None,
            e_ref: None,
            variant_embeddings: Some(embeddings(
                S,
                &vs.iter().map(|v| (*v).clone()).collect::<Vec<_>>(),
            )?),
        });
        members.push(vs);
    }
    let responses = scorer.score_batch(&requests);
    write_jsonl(S, p.rewards_out, &responses)?;

    let mut mixup = Vec::new();
    for ((req, resp), vs) in requests.iter().zip(&responses).zip(&members) {
        let ScoreResponse::Scored {
            r_q,
            r_a,
            r_f,
            total,
            s_hat,
            ..
        } = resp
        else {
            continue;
        };
        if format_reward(&req.generated_text) < 1.0 {
            continue;
        }
        let Some((_, answer)) = parse_think_answer(&req.generated_text) else {
            continue;
        };
        let Some((instruction, output)) = parse_generated_pairs(answer)
            .ok()
            .and_then(|v| v.into_iter().next())
        else {
            continue;
        };
        let id = req.id.as_str().unwrap_or_default();
        let mut s =
            InstructionSample::new(format!("mix_{id}"), instruction, output, majority_task(vs));
        s.variant = VariantKind::Normal;
        s.source = Some(format!("cluster:{id}"));
        s.embedding = Some(embedder.embed(&sample_text(&s)));
        s.extra.insert(
            "variant_ids".into(),
            json!(vs.iter().map(|v| v.id.as_str()).collect::<Vec<_>>()),
        );
        s.extra.insert(
            "reward".into(),
            json!({"r_q": r_q, "r_a": r_a, "r_f": r_f, "total": total, "s_hat": s_hat}),
        );
        mixup.push(s);
    }
    write_jsonl(S, p.mixup_out, &mixup)?;
    let failed = responses.iter().filter(|r| r.is_error()).count();
    info!(
        stage = S,
        held_out = held_out.len(),
        distilled = responses.len(),
        failed,
        mixup = mixup.len(),
        "scored"
    );
    Ok(mixup.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub budget: usize,
    pub mix_ratio: f64,
    pub mixup_quota: usize,
    pub mixup_ids: Vec<String>,
    pub original_ids: Vec<String>,
}

fn longtail(
    stage: &str,
    pool: Vec<InstructionSample>,
    k: usize,
) -> Result<Vec<mixup_core::select::Scored>, CliError> {
    let scores = if pool.len() < 2 {
        vec![0.0; pool.len()]
    } else {
        score_samples(&pool, k.min(pool.len() - 1)).map_err(|e| CliError::stage(stage, e))?
    };
    Ok(mixup_core::select::Scored::zip(pool, scores))
}

/// Ranks both pools by long-tail score and fills the ratio quotas.
pub fn select(
    cfg: &PipelineConfig,
    mixup_pool: Vec<InstructionSample>,
    original_pool: Vec<InstructionSample>,
    train_out: &Path,
    selection_out: Option<&Path>,
) -> Result<Selection, CliError> {
    const S: &str = "select";
    let k = cfg.select.k_longtail;
    let m = longtail(S, mixup_pool, k)?;
    let o = longtail(S, original_pool, k)?;
    let selection = mix_select(&m, &o, &cfg.select).map_err(|e| match e {
        SelectError::QuotaExceedsPool { .. } => CliError::infeasible(S, e),
        SelectError::BadConfig(_) | SelectError::KZero => CliError::Config(e.to_string()),
        other => CliError::stage(S, other),
    })?;
    write_jsonl(S, train_out, &selection.clone().into_vec())?;
    if let Some(p) = selection_out {
        let file = SelectionFile {
            budget: cfg.select.budget,
            mix_ratio: cfg.select.mix_ratio,
            mixup_quota: cfg.select.mixup_quota(),
            mixup_ids: selection.mixup.iter().map(|s| s.id.clone()).collect(),
            original_ids: selection.original.iter().map(|s| s.id.clone()).collect(),
        };
        write_json(S, p, &file)?;
    }
    info!(
        stage = S,
        mixup = selection.mixup.len(),
        original = selection.original.len(),
        "selected"
    );
    Ok(selection)
}

pub fn read_pool(stage: &str, path: &Path) -> Result<Vec<InstructionSample>, CliError> {
    read_samples(stage, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub js: f64,
    pub mae: f64,
    pub residual_hist: BTreeMap<i64, usize>,
    pub raw_distribution: Vec<f64>,
    pub calibrated_distribution: Vec<f64>,
    pub histogram: String,
}

/// Compares calibrated scores in `pred` with the judge labels in `raw`.
pub fn eval(
    pred: &Path,
    raw: &Path,
    report_out: &Path,
    plot_out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    const S: &str = "eval";
    let pred = read_samples(S, pred)?;
    let raw = read_samples(S, raw)?;
    let lookup = by_id(&raw);
    let mut s_hat = Vec::with_capacity(pred.len());
    let mut labels = Vec::with_capacity(pred.len());
    for p in &pred {
        let s = p
            .extra
            .get("s_hat")
            .and_then(Value::as_f64)
            .ok_or_else(|| CliError::stage(S, format!("sample {} has no s_hat", p.id)))?;
        let l = lookup
            .get(p.id.as_str())
            .and_then(|r| r.rating)
            .ok_or_else(|| CliError::stage(S, format!("sample {} has no raw rating", p.id)))?;
        s_hat.push(s);
        labels.push(l.index());
    }
    let m = evaluate(&s_hat, &labels, NUM_LABELS).map_err(|e| CliError::stage(S, e))?;
    let rounded: Vec<usize> = s_hat
        .iter()
        .map(|s| round_to_label(*s, NUM_LABELS))
        .collect();
    let report = EvalReport {
        n: m.n,
        js: m.js,
        mae: m.mae,
        histogram: histogram_text(&m.residual_hist),
        residual_hist: m.residual_hist,
        raw_distribution: label_distribution(&labels, NUM_LABELS),
        calibrated_distribution: label_distribution(&rounded, NUM_LABELS),
    };
    write_json(S, report_out, &report)?;
    if let Some(p) = plot_out {
        write_text(
            S,
            p,
            &histogram_svg(&report.residual_hist, "Calibrated minus judge label"),
        )?;
    }
    info!(
        stage = S,
        n = report.n,
        js = report.js,
        mae = report.mae,
        "evaluated"
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub prompt_id: String,
    pub advantages: Vec<f64>,
}

pub fn advantages(input: &Path, out: &Path, eps_std: f64) -> Result<usize, CliError> {
    const S: &str = "advantages";
    let groups: Vec<GroupRollout> = jsonl::read(input).map_err(|e| CliError::stage(S, e))?;
    let records = groups
        .iter()
        .map(|g| {
            group_normalize(&g.rewards, eps_std)
                .map(|advantages| AdvantageRecord {
                    prompt_id: g.prompt_id.clone(),
                    advantages,
                })
                .map_err(|e| CliError::stage(S, format!("group {}: {e}", g.prompt_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(S, out, &records)?;
    Ok(records.len())
}

pub fn objective(input: &Path, params: &GrpoParams) -> Result<GrpoReport, CliError> {
    const S: &str = "objective";
    let groups: Vec<GroupRollout> = jsonl::read(input).map_err(|e| CliError::stage(S, e))?;
    params
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    grpo_objective(&groups, params).map_err(|e| CliError::stage(S, e))
}
