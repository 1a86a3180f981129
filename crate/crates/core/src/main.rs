use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jetdistill::anomaly::ScoreMetric;
use jetdistill::config::RunConfig;
use jetdistill::distill::StepMetrics;
use jetdistill::pipeline::{self, PipelineError, ProbeMethod};

#[derive(Parser)]
#[command(
    name = "jetdistill",
    version,
    about = "Self-distillation pre-training and evaluation on jet constituents"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train student/teacher on the training split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Independent runs with seeds seed, seed+1, ... under rep_<i>/.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Frozen-embedding probe on the test split.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "knn")]
        method: Method,
        /// Overrides `probe.k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune with layer-wise LR decay, or train from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Random init with uniform LR over the same grid.
        #[arg(long, conflicts_with = "checkpoint")]
        scratch: bool,
        /// Overrides `finetune.label_fraction`.
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split metrics of a fine-tuned checkpoint.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Anomaly scores against the background classes.
    Score {
        #[arg(long)]
        config: PathBuf,
        /// Repeat for several candidates; needs `--select best`.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Comma-separated subset of knn, cosine, mahalanobis, gmm.
        #[arg(long, value_delimiter = ',')]
        metric: Vec<String>,
        #[arg(long, value_enum)]
        select: Option<Select>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Inspect {
        #[command(subcommand)]
        what: Inspect,
    },
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long, value_delimiter = ',', default_value = "q,w,t")]
        classes: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        jets_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Original jet and its two augmented views, one CSV per jet.
    Augment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        jet: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-head [CLS] attention over particles, one CSV per test jet.
    Attention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        jet: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D PCA scatter of test embeddings.
    Project2d {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Knn,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Select {
    Best,
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(sub))
}

fn load(path: &Path) -> Result<RunConfig, PipelineError> {
    Ok(RunConfig::load(path)?)
}

fn log_step(m: &StepMetrics) {
    eprintln!(
        "step {:>6} epoch {:>3} lr {:.2e} loss {:.4} (part {:.4} cls {:.4} koleo {:.4}) H_t {:.3}",
        m.step, m.epoch, m.lr, m.total, m.l_part, m.l_cls, m.l_koleo, m.teacher_cls_entropy
    );
}

fn parse_metrics(names: &[String]) -> Result<Vec<ScoreMetric>, PipelineError> {
    if names.is_empty() {
        return Ok(ScoreMetric::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            ScoreMetric::ALL
                .iter()
                .copied()
                .find(|m| m.name() == n.trim())
                .ok_or_else(|| PipelineError::Input(format!("unknown metric {n:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::Pretrain {
            config,
            out,
            repeat,
            quiet,
        } => {
            let cfg = load(&config)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            if repeat > 1 {
                let mut cb = |i: usize, m: &StepMetrics| {
                    if !quiet {
                        eprint!("[rep {i}] ");
                        log_step(m);
                    }
                };
                for s in pipeline::cmd_pretrain_repeat(&cfg, &dir, repeat, Some(&mut cb))? {
                    println!("{}", s.run_dir.display());
                }
            } else {
                let mut cb = |m: &StepMetrics| {
                    if !quiet {
                        log_step(m)
                    }
                };
                let s = pipeline::cmd_pretrain(&cfg, &dir, Some(&mut cb))?;
                println!("{}", s.run_dir.display());
            }
        }
        Cmd::Probe {
            config,
            checkpoint,
            method,
            k,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(k) = k {
                cfg.probe.k = k;
            }
            let method = match method {
                Method::Knn => ProbeMethod::Knn,
                Method::Linear => ProbeMethod::Linear,
            };
            let r = pipeline::cmd_probe(&cfg, &checkpoint, method, &out_dir(&cfg, out, "probe"))?;
            println!("accuracy {:.4}", r.metrics.accuracy);
        }
        Cmd::Finetune {
            config,
            checkpoint,
            scratch: _,
            label_fraction,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(f) = label_fraction {
                cfg.finetune.label_fraction = f;
                cfg.validate()?;
            }
            let r = pipeline::cmd_finetune(
                &cfg,
                checkpoint.as_deref(),
                &out_dir(&cfg, out, "finetune"),
            )?;
            for g in &r.lr_groups {
                println!("depth {} lr {:.3e} {}", g.depth, g.lr, g.names.join(" "));
            }
            println!(
                "best decay {} lr {:.1e} val {:.4} | test accuracy {:.4}",
                r.best.llrd_decay, r.best.base_lr, r.best.val_accuracy, r.test.accuracy
            );
        }
        Cmd::Evaluate {
            config,
            checkpoint,
            out,
        } => {
            let cfg = load(&config)?;
            let m = pipeline::cmd_evaluate(&cfg, &checkpoint, &out_dir(&cfg, out, "evaluate"))?;
            println!("accuracy {:.4}", m.accuracy);
        }
        Cmd::Score {
            config,
            checkpoint,
            metric,
            select,
            out,
        } => {
            let cfg = load(&config)?;
            if checkpoint.len() > 1 && select.is_none() {
                return Err(PipelineError::Input(
                    "several checkpoints need --select best".into(),
                ));
            }
            let metrics = parse_metrics(&metric)?;
            let r = pipeline::cmd_score(&cfg, &checkpoint, &metrics, &out_dir(&cfg, out, "score"))?;
            for m in &r.metrics {
                println!("{:<12} combined AUC {:.4}", m.metric, m.combined);
            }
        }
        Cmd::Inspect { what } => match what {
            Inspect::Augment { config, jet, out } => {
                for f in pipeline::cmd_inspect_augment(&load(&config)?, &jet, &out)? {
                    println!("{}", f.display());
                }
            }
            Inspect::Attention {
                config,
                checkpoint,
                jet,
                out,
            } => {
                for f in pipeline::cmd_inspect_attention(&load(&config)?, &checkpoint, &jet, &out)?
                {
                    println!("{}", f.display());
                }
            }
            Inspect::Project2d {
                config,
                checkpoint,
                out,
            } => {
                let v = pipeline::cmd_inspect_project2d(&load(&config)?, &checkpoint, &out)?;
                println!("explained variance {:.4} {:.4}", v[0], v[1]);
            }
        },
        Cmd::Generate {
            classes,
            jets_per_class,
            seed,
            out,
        } => {
            let m = pipeline::cmd_generate(&classes, jets_per_class, seed, &out)?;
            println!("{} jets, classes {:?}", m.num_jets, m.class_names);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
