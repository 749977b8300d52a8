use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xmm_core::ablate::{ablation_csv, run_axis, Axis};
use xmm_core::config::RunConfig;
use xmm_core::data::Dataset;
use xmm_core::gradsuite::{run_suite, TOLERANCE};
use xmm_core::model::DualPath;
use xmm_core::retrieval::{cmc_csv, evaluate_rank_k, Summary};
use xmm_core::synth::{generate_dataset, SynthConfig};
use xmm_core::train::{embed_split, embedding_table, metrics_csv, Checkpoint, Trainer};

/// Image-text retrieval with dual-path residual networks.
#[derive(Parser)]
#[command(name = "xmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired image-caption dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Embed a dataset's test split with a checkpoint and report rank-k accuracy.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every setting of one axis over several seeds.
    Ablate(AblateArgs),
    /// List every config key with its default.
    Keys,
}

#[derive(Args)]
struct SynthArgs {
    /// Total number of identities.
    #[arg(long, default_value_t = 48)]
    ids: usize,
    /// Identities held out for testing.
    #[arg(long, default_value_t = 16)]
    test_ids: usize,
    #[arg(long, default_value_t = 4)]
    images_per_id: usize,
    #[arg(long, default_value_t = 2)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Minimum number of attributes in which two test identities differ.
    #[arg(long, default_value_t = 2)]
    test_separation: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory [default: data.dir from the config, "data"]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Top-level seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Training strategy 1..4 [default: 4]
    #[arg(long)]
    strategy: Option<u32>,
    /// Pooling mode gap|gmp|both [default: gmp]
    #[arg(long)]
    pool: Option<String>,
    /// Gated block on|off [default: on]
    #[arg(long)]
    gb: Option<String>,
    /// Enabled losses cmpm|cmpc|both [default: both]
    #[arg(long)]
    loss: Option<String>,
    /// Padded caption length [default: 120]
    #[arg(long)]
    len: Option<usize>,
    /// Any config key, repeatable: --set train.batch=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    /// Defaults, then the file, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(d) = &self.data {
            cfg.set("data.dir", &d.to_string_lossy())?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(s) = self.strategy {
            cfg.set("train.strategy", &s.to_string())?;
        }
        if let Some(p) = &self.pool {
            cfg.set("model.pool", p)?;
        }
        if let Some(g) = &self.gb {
            cfg.set("model.gb", g)?;
        }
        if let Some(l) = &self.loss {
            let (m, c) = match l.as_str() {
                "cmpm" => ("on", "off"),
                "cmpc" => ("off", "on"),
                "both" => ("on", "on"),
                other => bail!("--loss must be cmpm, cmpc or both, got `{other}`"),
            };
            cfg.set("loss.cmpm", m)?;
            cfg.set("loss.cmpc", c)?;
        }
        if let Some(l) = self.len {
            cfg.set("text.len", &l.to_string())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Directory for checkpoint.xmck and metrics.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from this checkpoint (its config must match).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in total (for staged runs).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Also write a checkpoint after every epoch as epoch-NNN.xmck.
    #[arg(long)]
    keep_epochs: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory [default: the one recorded in the checkpoint]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for descriptor files, cmc.csv and summary.json.
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// pooling|loss|length|strategy|embedding
    #[arg(long)]
    axis: String,
    /// Seeds per setting.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[command(flatten)]
    overrides: Overrides,
    /// Output CSV path.
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = PathBuf::from(cfg.data_dir());
    Dataset::load(&dir, cfg.image_size()?).with_context(|| format!("loading dataset {}", dir.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.test_ids >= args.ids {
        bail!("--test-ids must be smaller than --ids");
    }
    let cfg = SynthConfig {
        train_ids: args.ids - args.test_ids,
        test_ids: args.test_ids,
        images_per_id: args.images_per_id,
        captions_per_image: args.captions_per_image,
        height: args.height,
        width: args.width,
        test_separation: args.test_separation,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(&cfg, &args.out)?;
    let images = ds.identities.len() * cfg.images_per_id;
    println!(
        "wrote {} identities, {images} images, {} captions to {}",
        ds.identities.len(),
        ds.records.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let data = load_dataset(&cfg)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(&ck, cfg, &data)?
        }
        None => Trainer::new(cfg, &data)?,
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stop = args.stop_after.unwrap_or(usize::MAX).min(trainer.total_epochs());
    while trainer.epochs_done() < stop {
        let row = trainer.run_epoch()?;
        eprintln!(
            "epoch {:>3} stage {} lr {:<8} loss {:.4} val r1 {:.4} r5 {:.4} r10 {:.4}",
            row.epoch, row.stage, row.lr, row.train_loss, row.val_rank1, row.val_rank5, row.val_rank10
        );
        if args.keep_epochs {
            trainer.checkpoint().save(&args.out.join(format!("epoch-{:03}.xmck", row.epoch)))?;
        }
    }
    trainer.checkpoint().save(&args.out.join("checkpoint.xmck"))?;
    write(&args.out.join("metrics.csv"), metrics_csv(trainer.metrics()))?;
    let eval = trainer.evaluate(&data.test)?;
    println!(
        "test rank-1 {:.4} rank-5 {:.4} rank-10 {:.4}",
        eval.rank(1),
        eval.rank(5),
        eval.rank(10)
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut cfg = RunConfig::parse(&ck.config)?;
    if let Some(d) = &args.data {
        cfg.set("data.dir", &d.to_string_lossy())?;
    }
    let data = load_dataset(&cfg)?;
    let classes = ck
        .tensors
        .iter()
        .find(|(n, _)| n == "classifier")
        .map(|(_, t)| t.shape()[1])
        .context("checkpoint has no classifier")?;
    let (model, mut store) = DualPath::new(cfg.model_config(classes)?, cfg.seed()?)?;
    for (name, t) in &ck.tensors {
        store.set(name, t.clone())?;
    }
    let table = embedding_table(&cfg, data.vocab.len())?;
    let d = embed_split(&model, &store, &data.test, &data, &table, cfg.seq_len()?)?;
    let e = evaluate_rank_k(&d.queries, &d.gallery)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    d.gallery.save(&args.out.join("gallery.xmdv"))?;
    d.queries.save(&args.out.join("queries.xmdv"))?;
    write(&args.out.join("cmc.csv"), cmc_csv(&e.cmc))?;
    let summary = Summary::new(&e, d.queries.len(), d.gallery.len());
    write(&args.out.join("summary.json"), summary.to_json())?;
    println!("rank-1 {:.4}", e.rank(1));
    println!("rank-5 {:.4}", e.rank(5));
    println!("rank-10 {:.4}", e.rank(10));
    if summary.excluded > 0 {
        println!("excluded queries {}", summary.excluded);
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut worst: f64 = 0.0;
    for (name, report) in run_suite(args.seed)? {
        println!("{name:<16} max_rel_error {:.3e} ({} coords)", report.max_rel_error, report.coords_checked);
        worst = worst.max(report.max_rel_error);
    }
    if worst > TOLERANCE {
        bail!("gradient check failed: worst relative error {worst:.3e} > {TOLERANCE:e}");
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let axis: Axis = args.axis.parse()?;
    let cfg = args.overrides.resolve()?;
    let data = load_dataset(&cfg)?;
    let first_seed = cfg.seed()?;
    let rows = run_axis(axis, &cfg, &data, first_seed, args.seeds, |setting, r| {
        eprintln!(
            "{axis} {setting} seed {} rank-1 {:.4} rank-5 {:.4} rank-10 {:.4}",
            r.seed, r.rank1, r.rank5, r.rank10
        );
    })?;
    let csv = ablation_csv(&rows);
    write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn keys() {
    for (k, d, h) in RunConfig::documented_keys() {
        println!("{k}={d}\t# {h}");
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("XMM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("XMM_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("XMM_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Keys => {
            keys();
            Ok(())
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
