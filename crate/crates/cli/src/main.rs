use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fsed::autodiff::{gradcheck, Checkpoint};
use fsed::bench::{bench_config, run_bench, BenchSpec};
use fsed::dsp::{extract_features, write_features};
use fsed::eval::{decode_events, evaluate_rows, event_rows, DecodeParams};
use fsed::fewshot::{adapt_task, detect, prepare_task, AdaptOptions, AdaptedTask, PreparedTask, StemCache};
use fsed::ingest::{
    make_support_task, read_annotation_rows, read_annotations, read_wav, synth_task_set, write_events_csv, RunConfig,
    SynthSpec,
};
use fsed::model::Model;
use fsed::train::{load_base_corpus, pretrain, write_metrics_csv, Corpus};
use fsed::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Pipelines run in single precision; checkpoints store full precision.
type F = f32;

const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "fsed",
    version,
    about = "Multitask frame-level few-shot sound event detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-task work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic base and novel corpus.
    SynthData,
    /// Dump PCEN features of wav files.
    Features {
        #[arg(long = "wav", required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Pretrain on a directory of annotated base clips.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Adapt a pretrained model to one task file.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        /// Base clips mixed into fine-tuning.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect events in the query region of a task with an adapted model.
    Detect {
        #[arg(long)]
        task_ckpt: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
    },
    /// Score predicted events against reference annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", required = true)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// End-to-end synthetic benchmark with ablation rows.
    Bench {
        /// Also write the generated corpus under `<out>/data`.
        #[arg(long)]
        write_data: bool,
    },
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    wav: PathBuf,
    /// Annotations of the task file; the first five POS events are the shots.
    #[arg(long)]
    csv: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FSED_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    let base = match cli.command {
        Command::Bench { .. } => bench_config(),
        _ => RunConfig::default(),
    };
    let mut cfg = match &c.config {
        Some(p) => base.with_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => base,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::SynthData => {
            let files = synth_task_set(&SynthSpec::default(), cfg.seed, out_dir(c)?)?;
            println!("wrote {} files", files.len());
        }
        Command::Features { wavs } => {
            let out = out_dir(c)?;
            for wav in &wavs {
                let f = extract_features(&read_wav::<F>(wav)?, &cfg)?;
                let dst = out.join(file_stem(wav)?).with_extension("feat");
                write_features(&dst, &f)?;
                println!("{}: {} frames x {} bands", dst.display(), f.n_frames(), f.n_bands());
            }
        }
        Command::Pretrain { data } => {
            let out = out_dir(c)?;
            let corpus = load_base_corpus::<F>(&data, &cfg)?;
            info!("{} clips, {} windows", corpus.clips.len(), corpus.window_count());
            let results = pretrain(&corpus, &cfg)?;
            write_metrics_csv(&out.join("metrics.csv"), &results)?;
            for r in &results {
                r.model
                    .to_checkpoint(serde_json::json!({}))
                    .save(&out.join(format!("fold_{}.ckpt", r.fold)))?;
            }
            let best = results
                .iter()
                .max_by(|a, b| {
                    let f = |r: &fsed::train::FoldResult<F>| r.metrics[r.best_epoch].holdout_f.unwrap_or(0.0);
                    f(a).total_cmp(&f(b)).then(b.fold.cmp(&a.fold))
                })
                .expect("at least one fold");
            best.model
                .to_checkpoint(serde_json::json!({}))
                .save(&out.join("model.ckpt"))?;
            std::fs::write(out.join("config.txt"), cfg.to_kv()).map_err(|e| Error::io(out, e))?;
            println!("fold {} kept as {}", best.fold, out.join("model.ckpt").display());
        }
        Command::Finetune { ckpt, task, data } => {
            let out = out_dir(c)?;
            let (model, _) = Model::<F>::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
            let corpus = data.map(|d| load_base_corpus::<F>(&d, &cfg)).transpose()?;
            if let Some(corpus) = &corpus {
                check_classes(&model, corpus)?;
            }
            let prepared = load_task(&task, &cfg)?;
            let adapted = adapt_task(
                &model,
                &prepared,
                corpus.as_ref(),
                &cfg,
                AdaptOptions::default(),
                cfg.seed,
            )?;
            let dst = out.join(format!("{}.task.ckpt", prepared.name));
            adapted.task.to_checkpoint()?.save(&dst)?;
            println!("{}", dst.display());
        }
        Command::Detect { task_ckpt, task } => {
            let out = out_dir(c)?;
            let adapted = AdaptedTask::<F>::from_checkpoint(&Checkpoint::load(&task_ckpt)?)?;
            let prepared = load_task(&task, &cfg)?;
            let probs = detect(
                &adapted.model,
                &prepared,
                adapted.sfbc_center.as_deref(),
                &mut StemCache::new(),
                &cfg,
            )?;
            let dp = DecodeParams::from_config(&cfg);
            let events = decode_events(&probs.probs, probs.frame_period_s, probs.start_s(), &dp);
            let file = task.wav.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let dst = out.join("events.csv");
            write_events_csv(&dst, &event_rows(&file, &events)?)?;
            println!("{} events -> {}", events.len(), dst.display());
        }
        Command::Evaluate { pred, reference, iou } => {
            let pred_rows = read_annotation_rows(&pred, false)?;
            let mut ref_rows = Vec::new();
            for r in &reference {
                ref_rows.extend(read_annotation_rows(r, false)?);
            }
            let report = evaluate_rows(&pred_rows, &ref_rows, iou.unwrap_or(cfg.iou))?;
            print!("{}", report.to_table());
            if let Some(out) = &c.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let dst = out.join("score.json");
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&dst, json).map_err(|e| Error::io(&dst, e))?;
            }
        }
        Command::Gradcheck { seeds } => {
            let reports = gradcheck::run_suite(seeds)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_error < GRAD_TOL;
                ok &= pass;
                println!(
                    "{:<24} {:.3e} {}",
                    r.name,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Bench { write_data } => {
            let spec = BenchSpec {
                config: cfg.clone(),
                ..BenchSpec::default()
            };
            let data_dir = match (&c.out, write_data) {
                (Some(o), true) => Some(o.join("data")),
                (None, true) => return Err(Error::Config("--write-data needs --out".into())),
                _ => None,
            };
            let outcome = run_bench::<F>(&spec, cfg.seed, c.jobs, data_dir.as_deref())?;
            let json = outcome.report.to_json();
            println!("{json}");
            for (stage, s) in &outcome.wall_s {
                info!("{stage}: {s:.1} s");
            }
            if let Some(out) = &c.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                let dst = out.join("report.json");
                std::fs::write(&dst, &json).map_err(|e| Error::io(&dst, e))?;
                let wall: serde_json::Map<_, _> = outcome
                    .wall_s
                    .iter()
                    .map(|(k, v)| (k.clone(), serde_json::json!(v)))
                    .collect();
                let dst = out.join("wall_clock.json");
                let text = serde_json::to_string_pretty(&wall).expect("timings serialize");
                std::fs::write(&dst, text).map_err(|e| Error::io(&dst, e))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn out_dir(c: &Common) -> Result<&Path> {
    let out = c
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out)
}

fn file_stem(p: &Path) -> Result<String> {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Validation(format!("no file name in {}", p.display())))
}

fn load_task(t: &TaskArgs, cfg: &RunConfig) -> Result<PreparedTask<F>> {
    let task = make_support_task(read_wav::<F>(&t.wav)?, &read_annotations(&t.csv)?)?;
    prepare_task(&file_stem(&t.wav)?, &task, cfg)
}

fn check_classes(model: &Model<F>, corpus: &Corpus<F>) -> Result<()> {
    if model.classes.as_slice() != corpus.classes.names() {
        return Err(Error::Validation(format!(
            "base classes {:?} do not match the checkpoint's {:?}",
            corpus.classes.names(),
            model.classes
        )));
    }
    Ok(())
}
