use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use matrn_core::ablation::{full_grid, run_ablation, trend_grid};
use matrn_core::checkpoint;
use matrn_core::config::Config;
use matrn_core::data::image::read_pnm;
use matrn_core::data::lexicon::sample_words;
use matrn_core::data::{batch_images, build_dataset, load_dataset, render_word, save_dataset, split, Dataset, Image};
use matrn_core::metrics::{write_jsonl, MetricsRecord};
use matrn_core::params::{breakdown, count_parameters};
use matrn_core::training::{evaluate, synthetic_split, Trainer};
use matrn_core::{Error, Matrn, Mode};
use matrn_tensor::{suite, DType, Float, Tape};

/// Multi-modal text recognition on synthetic word images.
#[derive(Parser)]
#[command(name = "matrn", version)]
struct Cli {
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        words: Option<usize>,
        #[arg(long)]
        per_word: Option<usize>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        /// Continue from this checkpoint (its config wins over --config).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Metrics file (JSON lines); stdout when absent.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Train a grid of variants over several seeds and report mean ± std accuracy.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "trend")]
        grid: Grid,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Write the seed decoder's attention map for one image as CSV.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PGM/PPM image.
        #[arg(long, conflicts_with = "word")]
        image: Option<PathBuf>,
        /// Render this word instead of reading an image.
        #[arg(long)]
        word: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic parameter counts per module.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Trend,
    Full,
}

/// Failure classes with distinct exit codes.
fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.downcast_ref::<GradcheckFailed>().is_some() {
        return ("gradcheck", 7);
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_)) => ("usage", 2),
        Some(Error::Config(_) | Error::ConfigLine { .. }) => ("config", 3),
        Some(Error::Checkpoint(_)) => ("checkpoint", 4),
        Some(Error::Io { .. }) => ("io", 5),
        Some(Error::Ingest { .. } | Error::Image { .. } | Error::Charset(_) | Error::Input(_)) => ("input", 6),
        _ if e.downcast_ref::<io::Error>().is_some() => ("io", 5),
        _ => ("internal", 1),
    }
}

#[derive(Debug)]
struct GradcheckFailed(String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed for {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn error_line(kind: &str, code: u8, msg: &str) -> String {
    serde_json::json!({ "error": kind, "code": code, "message": msg }).to_string()
}

fn main() -> ExitCode {
    let level = match std::env::var("MATRN_LOG").as_deref() {
        Ok("error") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).target(env_logger::Target::Stderr).init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", 2, first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", error_line(kind, code, &msg));
            ExitCode::from(code)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::from_file(p)?,
        None => Config::desk(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_for(cfg: &Config, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => {
            let data = load_dataset(d, cfg.model.render_size())?;
            let s = split(data, cfg.data.val_fraction, cfg.train.seed);
            Ok((s.train, s.val))
        }
        None => {
            let s = synthetic_split(cfg, cfg.train.seed)?;
            Ok((s.train, s.val))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, words, per_word } => {
            let mut cfg = load_config(config.as_deref(), cli.seed)?;
            if let Some(w) = words {
                cfg.data.words = w;
            }
            if let Some(p) = per_word {
                cfg.data.per_word = p;
            }
            cfg.data.validate()?;
            let seed = cfg.train.seed;
            let data = build_dataset(&sample_words(cfg.data.words, seed), cfg.data.per_word, seed, cfg.model.render_size())?;
            save_dataset(&out, &data)?;
            log::info!("wrote {} images to {}", data.len(), out.display());
            Ok(())
        }
        Command::Train { config, data, out, resume, epochs, metrics } => {
            let mut sink: Box<dyn Write> = match &metrics {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::Io { path: p.clone(), source: e })?)),
                None => Box::new(io::stdout().lock()),
            };
            let (cfg, start, model) = match &resume {
                Some(p) => {
                    let ck = checkpoint::load(p)?;
                    let mut cfg = ck.config.clone();
                    if let Some(s) = cli.seed {
                        cfg.train.seed = s;
                    }
                    (cfg, ck.epoch, Some(ck))
                }
                None => (load_config(config.as_deref(), cli.seed)?, 0, None),
            };
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = start + e;
            }
            match cfg.train.precision {
                DType::F32 => train::<f32>(&cfg, data.as_deref(), &out, start, model, &mut sink),
                DType::F64 => train::<f64>(&cfg, data.as_deref(), &out, start, model, &mut sink),
            }
        }
        Command::Eval { checkpoint: path, data } => {
            let ck = checkpoint::load(&path)?;
            let mut cfg = ck.config.clone();
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            // A given directory is evaluated whole; otherwise the synthetic held-out split.
            let eval = match &data {
                Some(d) => load_dataset(d, cfg.model.render_size())?,
                None => synthetic_split(&cfg, cfg.train.seed)?.val,
            };
            let r = match cfg.train.precision {
                DType::F32 => eval_record(&ck.into_model::<f32>()?, &eval, ck.epoch)?,
                DType::F64 => eval_record(&ck.into_model::<f64>()?, &eval, ck.epoch)?,
            };
            write_jsonl(&mut io::stdout().lock(), &r)?;
            Ok(())
        }
        Command::Gradcheck { precision, seeds } => {
            let (reports, limit) = match precision {
                Precision::F64 => (suite::run_suite::<f64>(seeds, 1e-3)?, 1e-6),
                Precision::F32 => (suite::run_suite::<f32>(seeds, 2e-2)?, 1e-3),
            };
            let mut failed = Vec::new();
            let mut out = io::stdout().lock();
            for r in &reports {
                let ok = r.max_rel_err < limit;
                writeln!(out, "{:<20} seeds={:<3} max_rel_err={:.3e} {}", r.name, r.seeds, r.max_rel_err, if ok { "ok" } else { "FAIL" })?;
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(GradcheckFailed(failed.join(",")).into())
            }
        }
        Command::Ablate { config, grid, seeds, threads, out } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let cells = match grid {
                Grid::Trend => trend_grid(),
                Grid::Full => full_grid(),
            };
            let data = synthetic_split(&cfg, cfg.train.seed)?;
            let report = run_ablation(&cfg, &cells, &seeds, &data, threads)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            for (name, body) in [("report.txt", report.to_text()), ("report.csv", report.to_csv())] {
                let p = out.join(name);
                fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })?;
            }
            print!("{}", report.to_text());
            Ok(())
        }
        Command::DumpAttn { checkpoint: path, image, word, out } => {
            let ck = checkpoint::load(&path)?;
            let size = ck.config.model.render_size();
            let image = match (image, word) {
                (Some(p), _) => read_pnm(&p)?.with_channels(size.channels).resize(size.height, size.width),
                (None, Some(w)) => render_word(&w, ck.config.train.seed, size)?.image,
                (None, None) => bail!(Error::Usage("dump-attn needs --image or --word".into())),
            };
            let model = ck.into_model::<f64>()?;
            let csv = attention_csv(&model, &image)?;
            match out {
                Some(p) => fs::write(&p, csv).map_err(|e| Error::Io { path: p, source: e })?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Params { config } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let b = breakdown(&cfg.model);
            let mut out = io::stdout().lock();
            for (name, n) in [
                ("backbone", b.backbone),
                ("vision_blocks", b.vision_blocks),
                ("seed_decoder", b.seed_decoder),
                ("language_model", b.language_model),
                ("enhancer", b.enhancer),
                ("char_generator", b.char_generator),
                ("fusion", b.fusion),
                ("mask_tokens", b.mask_tokens),
            ] {
                writeln!(out, "{name:<16} {n}")?;
            }
            writeln!(out, "{:<16} {}", "total", count_parameters(&cfg.model))?;
            Ok(())
        }
    }
}

fn eval_record<F: Float>(model: &Matrn<F>, data: &Dataset, epoch: usize) -> Result<MetricsRecord> {
    let start = std::time::Instant::now();
    let r = evaluate(model, data, 64)?;
    Ok(MetricsRecord {
        epoch,
        split: "eval".into(),
        word_accuracy: r.accuracy,
        losses: r.losses,
        total_loss: r.total_loss,
        wall_clock_s: start.elapsed().as_secs_f64(),
        parameters: model.num_parameters(),
        attention: r.attention,
    })
}

fn train<F: Float>(
    cfg: &Config,
    data: Option<&Path>,
    out: &Path,
    start: usize,
    resume: Option<checkpoint::Checkpoint>,
    mut sink: &mut dyn Write,
) -> Result<()> {
    let (train, val) = dataset_for(cfg, data)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck.into_model::<F>()?, &cfg.train, start),
        None => Trainer::<F>::new(&cfg.model, &cfg.train)?,
    };
    log::info!(
        "training {} parameters on {} images ({} held out), epochs {}..{}",
        trainer.model.num_parameters(),
        train.len(),
        val.len(),
        start,
        cfg.train.epochs
    );
    let mut emit = |r: &MetricsRecord| -> Result<()> {
        log::info!("epoch {} {} accuracy {:.4} loss {:.4}", r.epoch, r.split, r.word_accuracy, r.total_loss);
        write_jsonl(&mut sink, r).context("writing metrics")?;
        Ok(())
    };
    while trainer.epoch < cfg.train.epochs {
        emit(&trainer.run_epoch(&train)?)?;
        checkpoint::save(out, &trainer.model, cfg, trainer.epoch)?;
        if val.is_empty() {
            continue;
        }
        let r = trainer.eval_record(&val, "val")?;
        emit(&r)?;
        if cfg.train.target_accuracy.is_some_and(|t| r.word_accuracy >= t) {
            log::info!("target accuracy reached");
            break;
        }
    }
    if start >= cfg.train.epochs {
        checkpoint::save(out, &trainer.model, cfg, trainer.epoch)?;
    }
    sink.flush().context("flushing metrics")?;
    Ok(())
}

/// `pos,row,col,score` rows of the seed attention for one image.
fn attention_csv(model: &Matrn<f64>, image: &Image) -> Result<String> {
    let x = batch_images::<f64>(&[image])?;
    let tape = Tape::new();
    let out = model.forward(&tape, &x, &[1], Mode::Eval, None)?;
    let a = out.attn.value();
    let (t, n) = (a.shape()[1], a.shape()[2]);
    let w = model.config.feat_w();
    let mut csv = String::from("pos,row,col,score\n");
    for p in 0..t {
        for j in 0..n {
            csv.push_str(&format!("{p},{},{},{:.6}\n", j / w, j % w, a.data()[p * n + j]));
        }
    }
    Ok(csv)
}
