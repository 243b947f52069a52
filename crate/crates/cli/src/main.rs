use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixup_cli::config::{GatewayMode, PipelineConfig};
use mixup_cli::pipeline::{run_pipeline, stage_seed};
use mixup_cli::{serve, stages, CliError};
use mixup_core::index::IndexMode;
use mixup_core::ingest::{SidecarCounts, TokenCounter, WordPunctTokenizer};
use mixup_core::reward::RewardWeights;
use mixup_core::scoring::Weighting;

#[derive(Parser, Debug)]
#[command(
    name = "mixup",
    version,
    about = "Quality calibration, reward scoring and mixup data assembly"
)]
struct Cli {
    /// Pipeline config (TOML); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log filter when MIXUP_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct LlmArgs {
    /// `mock` or an http(s) chat-completion URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Mock,
    Live,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IndexModeArg {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightingArg {
    None,
    InverseDistance,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Deduplicate articles and cut them into token-bounded blocks.
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        token_limit: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long)]
        min_block: Option<usize>,
        #[arg(long)]
        min_chars: Option<usize>,
        /// JSON object of exact token counts keyed by text.
        #[arg(long)]
        token_counts: Option<PathBuf>,
    },
    /// Generate high-quality samples per block and low-quality variants.
    Generate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Rate samples with the judge and attach embeddings.
    Rate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Estimate the score transition matrix from neighbor agreement.
    EstimateStm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        stats_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the reference index from rated, embedded samples.
    BuildIndex {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hold out a stratified share and write the id split here.
        #[arg(long)]
        split_out: Option<PathBuf>,
        #[arg(long)]
        eval_fraction: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<IndexModeArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Append calibrated posterior, s_hat and r_q to each sample.
    Score {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        stm: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
    },
    /// Capacity-constrained clustering of embedded samples.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        cmin: Option<usize>,
        #[arg(long)]
        cmax: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Only cluster samples rated below the high-quality threshold.
        #[arg(long)]
        low_only: bool,
    },
    /// Render one distillation prompt per cluster.
    Linearize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also send the prompts and store the distilled outputs here.
        #[arg(long)]
        distill_out: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Score NDJSON requests from stdin, or over HTTP with --http.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        stm: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        /// Quality, alignment and format weights.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        k: Option<usize>,
        /// Listen address for `POST /score` and `GET /healthz`.
        #[arg(long)]
        http: Option<String>,
    },
    /// Group-normalized advantages for each rollout group.
    Advantages {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clipped surrogate objective with KL penalty; report on stdout.
    Objective {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        beta_kl: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Ratio-mixed selection from the mixup and original pools.
    Select {
        #[arg(long)]
        mixup: PathBuf,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        k_longtail: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        selection_out: Option<PathBuf>,
    },
    /// Agreement between calibrated scores and judge labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run the pipeline stages and write a manifest.
    Run {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of stages.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        stm: Option<PathBuf>,
        #[command(flatten)]
        llm: LlmArgs,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_llm(cfg: &mut PipelineConfig, llm: &LlmArgs) {
    if let Some(e) = &llm.endpoint {
        cfg.llm.endpoint = e.clone();
        cfg.mode = if cfg.llm.is_mock() {
            GatewayMode::Mock
        } else {
            GatewayMode::Live
        };
    }
    if let Some(m) = &llm.model {
        cfg.llm.model = m.clone();
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Command {
    /// Files the command reads; `run` checks its own inputs per stage.
    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        match self {
            Command::Segment {
                input,
                token_counts,
                ..
            } => {
                let mut v = vec![("--in", input.as_path())];
                v.extend(token_counts.as_deref().map(|p| ("--token-counts", p)));
                v
            }
            Command::Generate { input, .. }
            | Command::Rate { input, .. }
            | Command::EstimateStm { input, .. }
            | Command::BuildIndex { input, .. }
            | Command::Cluster { input, .. }
            | Command::Advantages { input, .. }
            | Command::Objective { input, .. } => vec![("--in", input)],
            Command::Score {
                index, stm, input, ..
            } => {
                vec![("--index", index), ("--stm", stm), ("--in", input)]
            }
            Command::Linearize { input, plan, .. } => vec![("--in", input), ("--plan", plan)],
            Command::Serve { index, stm, .. } => vec![("--index", index), ("--stm", stm)],
            Command::Select {
                mixup, original, ..
            } => vec![("--mixup", mixup), ("--original", original)],
            Command::Eval { pred, raw, .. } => vec![("--pred", pred), ("--raw", raw)],
            Command::Run { .. } => Vec::new(),
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some((flag, path)) = cli.command.inputs().into_iter().find(|(_, p)| !p.is_file()) {
        return Err(CliError::Config(format!(
            "{flag} {} does not exist",
            path.display()
        )));
    }
    match cli.command {
        Command::Segment {
            input,
            out,
            token_limit,
            overlap,
            min_block,
            min_chars,
            token_counts,
        } => {
            set(&mut cfg.ingest.token_limit, token_limit);
            set(&mut cfg.ingest.overlap, overlap);
            set(&mut cfg.ingest.min_block, min_block);
            set(&mut cfg.ingest.min_chars, min_chars);
            cfg.validate()?;
            let tok: Box<dyn TokenCounter> = match token_counts {
                Some(p) => {
                    Box::new(SidecarCounts::load(&p).map_err(|e| CliError::Config(e.to_string()))?)
                }
                None => Box::new(WordPunctTokenizer),
            };
            stages::segment(&cfg, &input, &out, tok.as_ref()).map(drop)
        }
        Command::Generate {
            input,
            out,
            seed,
            llm,
        } => {
            set(&mut cfg.seed, seed);
            apply_llm(&mut cfg, &llm);
            cfg.validate()?;
            let client = stages::llm_client(&cfg)?;
            stages::generate(
                &cfg,
                &client,
                &input,
                &out,
                stage_seed(cfg.seed, "generate"),
            )
            .map(drop)
        }
        Command::Rate {
            input,
            out,
            embed_dim,
            llm,
        } => {
            set(&mut cfg.generate.embed_dim, embed_dim);
            apply_llm(&mut cfg, &llm);
            cfg.validate()?;
            let client = stages::llm_client(&cfg)?;
            stages::rate(&cfg, &client, &input, &out).map(drop)
        }
        Command::EstimateStm {
            input,
            out,
            order,
            alpha,
            stats_out,
            seed,
        } => {
            set(&mut cfg.stm.order, order);
            set(&mut cfg.stm.smoothing_alpha, alpha);
            set(&mut cfg.seed, seed);
            cfg.validate()?;
            let s = stage_seed(cfg.seed, "estimate-stm");
            stages::estimate_stm(&cfg, &input, &out, stats_out.as_deref(), s).map(drop)
        }
        Command::BuildIndex {
            input,
            out,
            split_out,
            eval_fraction,
            mode,
            seed,
        } => {
            set(&mut cfg.index.eval_fraction, eval_fraction);
            set(&mut cfg.seed, seed);
            if let Some(m) = mode {
                cfg.index.mode = Some(match m {
                    IndexModeArg::Exact => IndexMode::Exact,
                    IndexModeArg::Approximate => IndexMode::Approximate,
                });
            }
            cfg.validate()?;
            let s = stage_seed(cfg.seed, "build-index");
            stages::build_index(&cfg, &input, &out, split_out.as_deref(), s).map(drop)
        }
        Command::Score {
            index,
            stm,
            input,
            k,
            out,
            weighting,
        } => {
            set(&mut cfg.scoring.k, k);
            if let Some(w) = weighting {
                cfg.scoring.weighting = match w {
                    WeightingArg::None => Weighting::None,
                    WeightingArg::InverseDistance => Weighting::InverseDistance,
                };
            }
            cfg.validate()?;
            stages::score_file(&cfg, &index, &stm, &input, &out).map(drop)
        }
        Command::Cluster {
            input,
            k,
            cmin,
            cmax,
            seed,
            out,
            low_only,
        } => {
            set(&mut cfg.cluster.k, k);
            set(&mut cfg.cluster.c_min, cmin);
            set(&mut cfg.cluster.c_max, cmax);
            set(&mut cfg.seed, seed);
            cfg.validate()?;
            let s = stage_seed(cfg.seed, "cluster");
            stages::cluster_samples(&cfg, &input, &out, low_only, s).map(drop)
        }
        Command::Linearize {
            input,
            plan,
            out,
            distill_out,
            llm,
        } => {
            apply_llm(&mut cfg, &llm);
            cfg.validate()?;
            match distill_out {
                Some(d) => {
                    let client = stages::llm_client(&cfg)?;
                    stages::linearize(&input, &plan, &out, Some((&client, &d))).map(drop)
                }
                None => stages::linearize(&input, &plan, &out, None).map(drop),
            }
        }
        Command::Serve {
            index,
            stm,
            tau,
            weights,
            k,
            http,
        } => {
            set(&mut cfg.scoring.tau, tau);
            set(&mut cfg.scoring.k, k);
            if let Some(w) = weights {
                cfg.scoring.weights = RewardWeights::new(w[0], w[1], w[2])
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            cfg.validate()?;
            let (scorer, health) = serve::load_scorer(&cfg, &index, &stm)?;
            match http {
                Some(addr) => {
                    let rt = tokio::runtime::Builder::new_multi_thread()
                        .enable_all()
                        .build()
                        .map_err(|e| CliError::stage("serve", e))?;
                    rt.block_on(serve::serve_http(scorer, health, &addr))
                }
                None => {
                    let stdin = std::io::BufReader::new(std::io::stdin());
                    let stdout = std::io::stdout().lock();
                    let n = serve::serve_ndjson(&scorer, stdin, stdout)
                        .map_err(|e| CliError::stage("serve", e))?;
                    tracing::info!(requests = n, "input closed");
                    Ok(())
                }
            }
        }
        Command::Advantages { input, eps, out } => {
            set(&mut cfg.grpo.eps_std, eps);
            cfg.validate()?;
            stages::advantages(&input, &out, cfg.grpo.eps_std).map(drop)
        }
        Command::Objective {
            input,
            clip,
            beta_kl,
            eps,
        } => {
            set(&mut cfg.grpo.eps_clip, clip);
            set(&mut cfg.grpo.beta_kl, beta_kl);
            set(&mut cfg.grpo.eps_std, eps);
            cfg.validate()?;
            let report = stages::objective(&input, &cfg.grpo)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::Select {
            mixup,
            original,
            budget,
            ratio,
            k_longtail,
            out,
            selection_out,
        } => {
            set(&mut cfg.select.budget, budget);
            set(&mut cfg.select.mix_ratio, ratio);
            set(&mut cfg.select.k_longtail, k_longtail);
            cfg.validate()?;
            let m = stages::read_pool("select", &mixup)?;
            let o = stages::read_pool("select", &original)?;
            stages::select(&cfg, m, o, &out, selection_out.as_deref()).map(drop)
        }
        Command::Eval {
            pred,
            raw,
            report,
            plot,
        } => stages::eval(&pred, &raw, &report, plot.as_deref()).map(drop),
        Command::Run {
            out_dir,
            corpus,
            seed,
            stages,
            mode,
            budget,
            ratio,
            index,
            stm,
            llm,
        } => {
            set(&mut cfg.paths.out_dir, out_dir);
            if corpus.is_some() {
                cfg.paths.corpus = corpus;
            }
            if index.is_some() {
                cfg.paths.index = index;
            }
            if stm.is_some() {
                cfg.paths.stm = stm;
            }
            set(&mut cfg.seed, seed);
            set(&mut cfg.stages, stages);
            set(&mut cfg.select.budget, budget);
            set(&mut cfg.select.mix_ratio, ratio);
            apply_llm(&mut cfg, &llm);
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Mock => GatewayMode::Mock,
                    ModeArg::Live => GatewayMode::Live,
                };
            }
            run_pipeline(&cfg).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    mixup_cli::init_logging(&cli.log_level);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(exit_code = e.exit_code(), error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
