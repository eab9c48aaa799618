mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hazloc::data::{
    load_dataset, read_image, split, synth_generate, write_jsonl, AnnotatedSample, Vocabulary,
    PROMPT,
};
use hazloc::localization::{predict_hazard, PredictMode};
use hazloc::model::Model;
use hazloc::optim::{convergence_probe, OptimError};
use hazloc::training::{encode_dataset, evaluate, load_checkpoint, train, TrainError};

use config::RunConfig;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser)]
#[command(
    name = "hazloc",
    version,
    about = "Hazard localization and captioning on toy driving frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic JSONL dataset to --out.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        count: Option<usize>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Train and write a checkpoint plus a CSV log into the --out directory.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// JSONL dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// lora or pretrain.
        #[arg(long)]
        mode: Option<String>,
        /// Checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        accum: Option<usize>,
        /// Use the reference fine-tuning hyperparameters.
        #[arg(long)]
        paper_faithful: bool,
    },
    /// Score a checkpoint on a dataset; writes report.txt and report.json into --out.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_samples: Option<usize>,
    },
    /// Predict the hazard point and caption for one image.
    Predict {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG or `.json` nested-array image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Run the optimizer convergence probe; --out receives `T value` records.
    Probe {
        #[command(flatten)]
        shared: Shared,
        /// quadratic or logistic.
        #[arg(long)]
        objective: Option<String>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Diverged(m) => m,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn data(e: impl ToString) -> Failure {
    Failure::Data(e.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| data(format!("{}: {e}", path.display())))
}

/// Defaults, then the config file, then `--seed` and `--set`, then `extra`.
fn resolve(shared: &Shared, extra: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &shared.config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        cfg.apply_kv(&text)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    for kv in &shared.set {
        cfg.apply_assignment(kv).map_err(usage)?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v).map_err(usage)?;
        }
    }
    Ok(cfg)
}

fn sidecar(checkpoint: &Path, ext: &str) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Model, vocabulary and the config it was trained with.
fn load_model(checkpoint: &Path) -> Result<(Model, Vocabulary, RunConfig), Failure> {
    let ckpt =
        load_checkpoint(checkpoint).map_err(|e| data(format!("{}: {e}", checkpoint.display())))?;
    let cfg_path = sidecar(checkpoint, "model");
    let text =
        fs::read_to_string(&cfg_path).map_err(|e| data(format!("{}: {e}", cfg_path.display())))?;
    let saved =
        RunConfig::from_kv(&text).map_err(|e| data(format!("{}: {e}", cfg_path.display())))?;
    let vocab = Vocabulary::load(&sidecar(checkpoint, "vocab")).map_err(data)?;
    let model_cfg = saved.model_config(vocab.len()).map_err(data)?;
    let model = Model::from_named(model_cfg, ckpt.params).map_err(data)?;
    Ok((model, vocab, saved))
}

fn load_samples(cfg: &RunConfig, path: Option<&PathBuf>) -> Result<Vec<AnnotatedSample>, Failure> {
    let path = match path {
        Some(p) => p.clone(),
        None if !cfg.dataset.is_empty() => PathBuf::from(&cfg.dataset),
        None => return Err(usage("no dataset: pass --data or set `dataset`")),
    };
    let report = load_dataset(&path, &cfg.load_options(&path)).map_err(data)?;
    for r in &report.rejections {
        eprintln!("warning: {}: {r}", path.display());
    }
    if report.samples.is_empty() {
        return Err(data(format!("{}: no usable records", path.display())));
    }
    Ok(report.samples)
}

fn cmd_synth(shared: &Shared, count: Option<usize>, force: bool) -> Outcome {
    let cfg = resolve(shared, &[("synth_count", count.map(|c| c.to_string()))])?;
    let out = shared
        .out
        .as_ref()
        .ok_or_else(|| usage("synth needs --out"))?;
    let synth = cfg.synth_config().map_err(usage)?;
    if out.exists() && !force {
        return Err(usage(format!(
            "{} exists; pass --force to overwrite",
            out.display()
        )));
    }
    let samples = synth_generate(cfg.synth_count, &synth, cfg.seed, cfg.exec()).map_err(usage)?;
    write_jsonl(out, &samples).map_err(data)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    shared: &Shared,
    data_path: Option<&PathBuf>,
    mode: Option<String>,
    init: Option<&PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    accum: Option<usize>,
    paper_faithful: bool,
) -> Outcome {
    let mut extra = vec![
        ("mode", mode),
        ("init_checkpoint", init.map(|p| p.display().to_string())),
        ("epochs", epochs.map(|v| v.to_string())),
        ("base_lr", lr.map(|v| v.to_string())),
        ("grad_accum_steps", accum.map(|v| v.to_string())),
    ];
    if paper_faithful {
        extra.extend([
            ("base_lr", Some("1e-4".into())),
            ("warmup_start_lr", Some("3e-5".into())),
            ("epochs", Some("3".into())),
            ("grad_accum_steps", Some("8".into())),
            ("clip_max_norm", Some("1.0".into())),
            ("batch_size", Some("1".into())),
            ("mode", Some("lora".into())),
        ]);
    }
    let mut cfg = resolve(shared, &extra)?;
    let mut tcfg = cfg.train_config().map_err(usage)?;
    if data_path.is_none() && cfg.dataset.is_empty() {
        return Err(usage("train needs a dataset: pass --data or set `dataset`"));
    }
    let init = (!cfg.init_checkpoint.is_empty()).then(|| PathBuf::from(&cfg.init_checkpoint));
    println!(
        "config: lr={:e} epochs={} accum={} clip={:?} mode={}",
        cfg.base_lr, cfg.epochs, cfg.grad_accum_steps, cfg.clip_max_norm, cfg.mode
    );

    let (mut model, vocab, samples) = match &init {
        Some(p) => {
            let (model, vocab, saved) = load_model(p)?;
            cfg.adopt_model(&saved);
            let samples = load_samples(&cfg, data_path)?;
            (model, vocab, samples)
        }
        None => {
            let samples = load_samples(&cfg, data_path)?;
            let mut corpus: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
            corpus.push(PROMPT);
            let vocab = Vocabulary::build(&corpus);
            let model = Model::new(cfg.model_config(vocab.len()).map_err(usage)?, cfg.seed)
                .map_err(data)?;
            (model, vocab, samples)
        }
    };
    let (train_set, val_set) = if cfg.validate && cfg.val_fraction > 0.0 && samples.len() >= 2 {
        split(&samples, cfg.val_fraction, cfg.seed).map_err(data)?
    } else {
        (samples, Vec::new())
    };
    let train_enc = encode_dataset(&train_set, &vocab, &model)?;
    let val_enc = encode_dataset(&val_set, &vocab, &model)?;

    let out = shared.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out).map_err(|e| data(format!("{}: {e}", out.display())))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    tcfg.checkpoint_path = Some(ckpt.clone());
    tcfg.log_path = Some(out.join(LOG_FILE));
    println!(
        "training on {} samples, validating on {}",
        train_enc.len(),
        val_enc.len()
    );
    let outcome = train(&mut model, &train_enc, &val_enc, &tcfg)?;
    write_file(&sidecar(&ckpt, "model"), cfg.to_kv())?;
    vocab.save(&sidecar(&ckpt, "vocab")).map_err(data)?;

    if let (Some(first), Some(last)) = (outcome.logs.first(), outcome.logs.last()) {
        println!(
            "steps {} loss {:.4} -> {:.4} (smoothed)",
            outcome.steps, first.loss_smooth, last.loss_smooth
        );
    }
    if let Some(r) = outcome.epoch_reports.last() {
        print!("{}", r.display_table());
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn cmd_eval(
    shared: &Shared,
    checkpoint: &Path,
    data_path: Option<&PathBuf>,
    max_samples: Option<usize>,
) -> Outcome {
    let mut cfg = resolve(
        shared,
        &[("max_samples", max_samples.map(|m| m.to_string()))],
    )?;
    let (model, vocab, saved) = load_model(checkpoint)?;
    cfg.adopt_model(&saved);
    let samples = load_samples(&cfg, data_path)?;
    let encoded = encode_dataset(&samples, &vocab, &model)?;
    let limit = (cfg.max_samples > 0).then_some(cfg.max_samples);
    let report = evaluate(&model, &encoded, limit, cfg.exec())?;
    print!("{}", report.display_table());
    if let Some(out) = &shared.out {
        fs::create_dir_all(out).map_err(|e| data(format!("{}: {e}", out.display())))?;
        write_file(&out.join("report.txt"), report.to_kv_text())?;
        write_file(&out.join("report.json"), report.to_json())?;
    }
    Ok(())
}

fn cmd_predict(
    shared: &Shared,
    checkpoint: &Path,
    image: &Path,
    top_p: Option<f64>,
    temperature: Option<f64>,
) -> Outcome {
    let mut cfg = resolve(
        shared,
        &[
            ("top_p", top_p.map(|v| v.to_string())),
            ("temperature", temperature.map(|v| v.to_string())),
        ],
    )?;
    let sampling = cfg.sampling().map_err(usage)?;
    let (model, vocab, saved) = load_model(checkpoint)?;
    cfg.adopt_model(&saved);
    let img = read_image(image).map_err(data)?;
    let expected = model.config().image_shape();
    if img.shape() != expected {
        return Err(data(format!(
            "image shape {:?} does not match model {:?}",
            img.shape(),
            expected
        )));
    }
    let point = predict_hazard(&model, &img, PredictMode::Infer).map_err(data)?;
    let prompt = vocab.tokenize(PROMPT);
    let ids = model
        .caption(
            &img,
            &prompt,
            model.config().max_caption_len,
            &sampling,
            cfg.seed,
        )
        .map_err(data)?;
    let text = format!(
        "hazard=({}, {})\n{}\n",
        point.x,
        point.y,
        vocab.detokenize(&ids)
    );
    print!("{text}");
    if let Some(out) = &shared.out {
        write_file(out, text)?;
    }
    Ok(())
}

fn cmd_probe(shared: &Shared, objective: Option<String>) -> Outcome {
    let cfg = resolve(shared, &[("probe_objective", objective)])?;
    let probe = cfg.probe_config().map_err(usage)?;
    let report = convergence_probe(&probe, cfg.exec()).map_err(|e| match e {
        OptimError::Diverged(_) => Failure::Diverged(e.to_string()),
        _ => usage(e),
    })?;
    print!("{}", report.to_table());
    if let Some(out) = &shared.out {
        write_file(out, report.to_records())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth {
            shared,
            count,
            force,
        } => cmd_synth(&shared, count, force),
        Command::Train {
            shared,
            data,
            mode,
            init,
            epochs,
            lr,
            accum,
            paper_faithful,
        } => cmd_train(
            &shared,
            data.as_ref(),
            mode,
            init.as_ref(),
            epochs,
            lr,
            accum,
            paper_faithful,
        ),
        Command::Eval {
            shared,
            checkpoint,
            data,
            max_samples,
        } => cmd_eval(&shared, &checkpoint, data.as_ref(), max_samples),
        Command::Predict {
            shared,
            checkpoint,
            image,
            top_p,
            temperature,
        } => cmd_predict(&shared, &checkpoint, &image, top_p, temperature),
        Command::Probe { shared, objective } => cmd_probe(&shared, objective),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
