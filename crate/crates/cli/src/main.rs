use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use sideload_core::analysis::{self, GatingRecord};
use sideload_core::detect::{self, write_detections};
use sideload_core::harness::{self, RunConfig};
use sideload_core::synthdata::{self, CorpusOptions, FrameRef, Gap, Role};
use sideload_core::tensor::Checkpoint;

#[derive(Parser)]
#[command(name = "sideload", version, about = "Contrastive side-extractor fusion experiments on synthetic aerial video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus operations.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Contrastive pretraining of the side extractor.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Proxy upstream pretraining of the backbone.
    Upstream {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune and evaluate every configured seed.
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a saved fine-tuned model on a split (train/val/test) or a video id.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: String,
        /// Optional detections CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the mode x fusion x granularity comparison matrix.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Leave-one-video-out cross-validation.
    Crossval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Gate analysis over saved checkpoints.
    Analyze {
        #[arg(value_enum)]
        what: Analysis,
        /// Checkpoints with gate parameters; the model id is the file stem.
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Render the annotated and unannotated videos to a directory.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "standard")]
        gap: GapArg,
        #[arg(long)]
        annotated_frames: Option<usize>,
        #[arg(long)]
        pool_frames: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GapArg {
    Standard,
    Wide,
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Gates,
    Deviation,
    Xstd,
    Pearson,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn print_report(r: &harness::RunReport) {
    for s in &r.seeds {
        println!(
            "{} {} seed {}: best epoch {}, val mAP50 {:.2}, test mAP50 {:.2} (P {:.2} R {:.2} F {:.2})",
            r.run_id,
            r.plan,
            s.seed,
            s.best_epoch,
            100.0 * s.val.map50,
            100.0 * s.test.map50,
            100.0 * s.test.precision,
            100.0 * s.test.recall,
            100.0 * s.test.f_measure
        );
    }
    for f in &r.failures {
        println!("{} {} seed {}: FAILED ({})", r.run_id, f.plan, f.seed, f.reason);
    }
    let t = r.test_map();
    if t.n > 0 {
        println!(
            "{}: test mAP50 {:.2} +- {:.2} over {} seed(s)",
            r.run_id,
            100.0 * t.mean,
            100.0 * t.std,
            t.n
        );
    }
}

fn load_gates(inputs: &[PathBuf]) -> Result<Vec<Vec<GatingRecord>>> {
    inputs
        .iter()
        .map(|p| {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(analysis::export_gates(&id, &ck)?)
        })
        .collect()
}

fn analyze(what: Analysis, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let models = load_gates(inputs)?;
    match what {
        Analysis::Gates => {
            let all: Vec<GatingRecord> = models.into_iter().flatten().collect();
            analysis::write_gates(&out.join("gates.csv"), &all)?;
        }
        Analysis::Deviation => {
            let all: Vec<GatingRecord> = models.into_iter().flatten().collect();
            for r in &all {
                let d = analysis::deviation(r)?;
                println!("{} layer {}: d {:.6} (min {:.6}, max {:.6}, sum {:.6})", r.model_id, r.layer_index, d.d, d.min, d.max, d.sum);
            }
            analysis::write_deviation(&out.join("deviation.csv"), &all)?;
        }
        Analysis::Xstd => {
            if models.len() < 2 {
                bail!("xstd needs at least two models");
            }
            let layers = analysis::by_layer(&models)?
                .iter()
                .map(|recs| analysis::cross_model_std(recs))
                .collect::<sideload_core::Result<Vec<_>>>()?;
            for l in &layers {
                println!("layer {}: mean std {:.6}", l.layer_index, l.mean);
            }
            analysis::write_xstd(&out.join("xstd.csv"), &layers)?;
        }
        Analysis::Pearson => {
            if models.len() != 2 {
                bail!("pearson compares exactly two models");
            }
            let mut rows = Vec::new();
            for recs in analysis::by_layer(&models)? {
                let c = analysis::pearson(recs[0], recs[1])?;
                match c.r {
                    Some(r) => println!("layer {}: r = {r:.6}", recs[0].layer_index),
                    None => println!("layer {}: undefined (constant gates)", recs[0].layer_index),
                }
                rows.push((recs[0].layer_index, c));
            }
            analysis::write_pearson(&out.join("pearson.csv"), &rows)?;
            let scatter = rows.iter().flat_map(|(layer, c)| {
                c.scatter
                    .iter()
                    .map(move |(a, b)| vec![layer.to_string(), sideload_core::io::fmt_f(*a), sideload_core::io::fmt_f(*b)])
            });
            sideload_core::io::write_csv(&out.join("pearson_scatter.csv"), &["layer", "a", "b"], scatter)?;
        }
    }
    println!("wrote analysis to {}", out.display());
    Ok(())
}

fn eval(model: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let (det, card) = harness::load_model(model)?;
    let corpus = match &card.corpus_path {
        Some(dir) => synthdata::read_corpus(dir)?,
        None => synthdata::corpus_with(card.corpus_seed, &card.corpus)?,
    };
    let refs: Vec<FrameRef> = match split {
        "train" | "val" | "test" => {
            let role = match split {
                "train" => Role::Train,
                "val" => Role::Val,
                _ => Role::Test,
            };
            let plans = synthdata::make_split(&corpus, card.protocol)?;
            let plan = plans
                .iter()
                .find(|p| p.name == card.plan)
                .with_context(|| format!("split plan {} not found", card.plan))?;
            plan.part(role).to_vec()
        }
        video => {
            let v = corpus
                .annotated
                .iter()
                .position(|x| x.video_id == video)
                .with_context(|| format!("unknown split or video `{video}` (use train, val, test or an annotated video id)"))?;
            (0..corpus.annotated[v].frames.len()).map(|frame| FrameRef { video: v, frame }).collect()
        }
    };
    let (m, dets) = harness::evaluate_frames(&det, &corpus, &refs, None, &card.eval)?;
    println!(
        "{split}: {} frames, precision {:.2}, recall {:.2}, F {:.2}, mAP50 {:.2}{}",
        refs.len(),
        100.0 * m.precision,
        100.0 * m.recall,
        100.0 * m.f_measure,
        100.0 * m.map50,
        if m.undefined { " (no ground truth)" } else { "" }
    );
    if let Some(path) = out {
        let frames: Vec<(String, Vec<detect::DetBox>)> = refs.iter().map(|r| corpus.frame_id(*r)).zip(dets).collect();
        write_detections(path, &frames)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Dataset {
            action:
                DatasetCmd::Gen {
                    seed,
                    out,
                    gap,
                    annotated_frames,
                    pool_frames,
                },
        } => {
            let defaults = CorpusOptions::default();
            let opts = CorpusOptions {
                gap: match gap {
                    GapArg::Standard => Gap::Standard,
                    GapArg::Wide => Gap::Wide,
                },
                annotated_frames: annotated_frames.unwrap_or(defaults.annotated_frames),
                pool_frames: pool_frames.unwrap_or(defaults.pool_frames),
                ..defaults
            };
            let corpus = synthdata::corpus_with(seed, &opts)?;
            synthdata::write_corpus(&out, &corpus)?;
            println!(
                "wrote {} annotated and {} unannotated videos to {}",
                corpus.annotated.len(),
                corpus.unannotated.len(),
                out.display()
            );
        }
        Command::Upstream { config } => {
            let cfg = load_config(&config)?;
            let path = harness::upstream_output_path(&cfg)?;
            harness::upstream_stage(&cfg)?;
            println!("upstream checkpoint: {}", path.display());
        }
        Command::Pretrain { config } => {
            let cfg = load_config(&config)?;
            let corpus = harness::load_corpus(&cfg)?;
            let upstream = harness::upstream_stage(&cfg)?;
            let path = harness::side_output_path(&cfg, &corpus)?;
            harness::train_side(&cfg, &corpus, &upstream, &path)?;
            println!("side checkpoint: {}", path.display());
        }
        Command::Finetune { config } => {
            let cfg = load_config(&config)?;
            let report = harness::run(&cfg)?;
            print_report(&report);
            info!("outputs in {}", cfg.output_dir().display());
        }
        Command::Eval { model, split, out } => eval(&model, &split, out.as_deref())?,
        Command::Matrix { config } => {
            let cfg = load_config(&config)?;
            let report = harness::run_matrix(&cfg)?;
            for (id, r) in &report.cells {
                match r {
                    Ok(r) => print_report(r),
                    Err(e) => println!("{id}: FAILED ({e})"),
                }
            }
            println!("comparison: {}", harness::matrix_dir(&cfg).join("comparison.csv").display());
        }
        Command::Crossval { config } => {
            let cfg = load_config(&config)?;
            for r in harness::cross_validate(&cfg)? {
                print_report(&r);
            }
            println!("cross-validation: {}", cfg.output_dir().join("crossval_summary.csv").display());
        }
        Command::Analyze { what, inputs, out } => analyze(what, &inputs, &out)?,
    }
    Ok(())
}
