use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqsleep::config::RunConfig;
use seqsleep::dataio::{load_cohort, save_cohort, DomainShift, SpectralProfile, SyntheticCohortConfig};
use seqsleep::evaluation::{evaluate_cohort, format_hypnogram, loso_cv, split_sizes, FoldStart, SlidingOutput};
use seqsleep::network::{load_checkpoint, save_checkpoint, HyperParams};
use seqsleep::rng::substream;
use seqsleep::spectrogram::{prepare_all, PreparedRecording};
use seqsleep::training::{finetune_from, format_log, pretrain, AdamState, StepLog};
use seqsleep::transfer::{mask_for, Regime};
use seqsleep::{dataio::generate_synthetic_cohort, Error};

/// Sleep staging with a sequence-to-sequence network and transfer across
/// recording channels.
#[derive(Parser)]
#[command(name = "seqsleep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort (.rec files plus manifest) to --out.
    Synth(SynthArgs),
    /// Train a fresh network on a cohort and write a checkpoint to --out.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint to a target cohort under a transfer regime.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a cohort with fused sliding-window inference.
    Eval(EvalArgs),
    /// Leave-one-subject-out cross-validation on a target cohort.
    Loso(LosoArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random stream [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel worker threads (LOSO folds) [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path (file or directory, per command).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    /// Filterbank size M [default: 32].
    #[arg(long)]
    n_filters: Option<usize>,
    /// Epoch-level GRU units per direction [default: 64, published setting].
    #[arg(long)]
    ernn_hidden: Option<usize>,
    /// Attention projection width [default: 64, published setting].
    #[arg(long)]
    attention_size: Option<usize>,
    /// Sequence-level GRU units per direction [default: 64, published setting].
    #[arg(long)]
    seqrnn_hidden: Option<usize>,
    /// Epochs per input sequence L [default: 20, published setting].
    #[arg(long)]
    seq_len: Option<usize>,
    /// Dropout rate [default: 0.25, published setting].
    #[arg(long)]
    dropout: Option<f64>,
    /// L2 weight lambda [default: 0.001, published setting].
    #[arg(long)]
    l2: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    /// Training epochs [default: 10, published setting].
    #[arg(long)]
    epochs: Option<usize>,
    /// Sequences per minibatch [default: 32, published setting].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0001, published setting].
    #[arg(long)]
    lr: Option<f64>,
    /// Adam beta1 [default: 0.9].
    #[arg(long)]
    beta1: Option<f64>,
    /// Adam beta2 [default: 0.999].
    #[arg(long)]
    beta2: Option<f64>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Global gradient-norm clip [default: 5].
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Early-stopping patience in training steps [default: 50, published setting].
    #[arg(long)]
    patience: Option<usize>,
    /// Validation cadence in steps [default: 10].
    #[arg(long)]
    eval_every: Option<usize>,
    /// Cap on optimizer steps, 0 for none [default: 0].
    #[arg(long)]
    max_steps: Option<usize>,
    /// Start finetuning with fresh Adam moments [default: true].
    #[arg(long)]
    reset_optimizer: Option<bool>,
    /// Weight the loss by inverse class frequency [default: false].
    #[arg(long)]
    class_balanced: Option<bool>,
    /// Tab-separated per-step training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of subjects [default: 20].
    #[arg(long)]
    subjects: Option<usize>,
    /// Epochs per subject [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Stage spectral profile: eeg_like or separable [default: eeg_like].
    #[arg(long)]
    profile: Option<String>,
    /// Channel mismatch: none, slight, heavy, or e.g. warp=1.3,mixing=cyclic:0.2,floor=0.05 [default: none].
    #[arg(long)]
    mismatch: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Source cohort directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Pretrained checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Target cohort directory used for finetuning.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation cohort; split from --data (15:4 proportion) when absent.
    #[arg(long)]
    val: Option<PathBuf>,
    /// direct, softmax, softmax-arnn, softmax-seqrnn or all [default: all].
    #[arg(long)]
    regime: Option<String>,
    /// Dropout rate while finetuning [default: 0.25, published setting].
    #[arg(long)]
    dropout: Option<f64>,
    /// L2 weight lambda while finetuning [default: 0.001, published setting].
    #[arg(long)]
    l2: Option<f64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to score.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Cohort directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct LosoArgs {
    #[command(flatten)]
    common: Common,
    /// Target cohort directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pretrained checkpoint (not used with --scratch).
    #[arg(long)]
    init: Option<PathBuf>,
    /// direct, softmax, softmax-arnn, softmax-seqrnn or all [default: all].
    #[arg(long)]
    regime: Option<String>,
    /// Train every fold from a fresh initialization instead [default: false].
    #[arg(long)]
    scratch: bool,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

type Pairs = Vec<(String, String)>;

fn push<T: ToString>(pairs: &mut Pairs, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        pairs.push((key.into(), v.to_string()));
    }
}

fn push_path(pairs: &mut Pairs, key: &str, v: &Option<PathBuf>) {
    push(pairs, key, &v.as_ref().map(|p| p.display().to_string()));
}

impl Common {
    fn pairs(&self, p: &mut Pairs) {
        push(p, "seed", &self.seed);
        push(p, "jobs", &self.jobs);
        push_path(p, "out", &self.out);
    }
}

impl ModelFlags {
    fn pairs(&self, p: &mut Pairs) {
        push(p, "n_filters", &self.n_filters);
        push(p, "ernn_hidden", &self.ernn_hidden);
        push(p, "attention_size", &self.attention_size);
        push(p, "seqrnn_hidden", &self.seqrnn_hidden);
        push(p, "seq_len", &self.seq_len);
        push(p, "dropout", &self.dropout);
        push(p, "l2", &self.l2);
    }
}

impl TrainFlags {
    fn pairs(&self, p: &mut Pairs) {
        push(p, "epochs", &self.epochs);
        push(p, "batch_size", &self.batch_size);
        push(p, "lr", &self.lr);
        push(p, "beta1", &self.beta1);
        push(p, "beta2", &self.beta2);
        push(p, "adam_eps", &self.adam_eps);
        push(p, "clip_norm", &self.clip_norm);
        push(p, "patience", &self.patience);
        push(p, "eval_every", &self.eval_every);
        push(p, "max_steps", &self.max_steps);
        push(p, "reset_optimizer", &self.reset_optimizer);
        push(p, "class_balanced", &self.class_balanced);
        push_path(p, "log", &self.log);
    }
}

fn resolve(common: &Common, fill: impl FnOnce(&mut Pairs)) -> Result<RunConfig, Error> {
    let mut pairs = Vec::new();
    common.pairs(&mut pairs);
    fill(&mut pairs);
    Ok(RunConfig::resolve(common.config.as_deref(), &pairs)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn load_prepared(dir: &Path) -> Result<Vec<PreparedRecording>, Error> {
    let recs = load_cohort(dir)?;
    Ok(prepare_all(&recs)?)
}

fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

fn write_log(cfg: &RunConfig, log: &[StepLog]) -> Result<(), Error> {
    if let Some(path) = &cfg.log {
        write(path, format_log(log))?;
    }
    Ok(())
}

fn write_hypnograms(dir: &Path, outputs: &[SlidingOutput]) -> Result<(), Error> {
    for o in outputs {
        write(&dir.join("hypnograms").join(format!("{}.txt", o.subject_id)), format_hypnogram(&o.predicted))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Error> {
    let cfg = resolve(&a.common, |p| {
        push(p, "subjects", &a.subjects);
        push(p, "epochs_per_subject", &a.epochs);
        push(p, "profile", &a.profile);
        push(p, "mismatch", &a.mismatch);
    })?;
    let out = cfg.require(&cfg.out, "out")?;
    let mut syn = SyntheticCohortConfig::new(cfg.synth.subjects, cfg.synth.epochs_per_subject, cfg.train.seed);
    syn.profile = SpectralProfile::by_name(&cfg.synth.profile)?;
    syn.mismatch = DomainShift::parse(&cfg.synth.mismatch, syn.profile.bands.len())?;
    let recs = generate_synthetic_cohort(&syn)?;
    save_cohort(out, &recs)?;
    eprintln!("wrote {} subjects x {} epochs to {}", recs.len(), syn.epochs_per_subject, out.display());
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<(), Error> {
    let cfg = resolve(&a.common, |p| {
        push_path(p, "data", &a.data);
        a.model.pairs(p);
        a.train.pairs(p);
    })?;
    let cohort = load_prepared(cfg.require(&cfg.data, "data")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let result = pretrain(&cohort, &cfg.hp, &cfg.train)?;
    save_checkpoint(out, &cfg.hp, &result.params)?;
    write(&optimizer_path(out), result.optimizer.encode())?;
    write_log(&cfg, &result.log)?;
    let last = result.log.last().map_or(f64::NAN, |r| r.loss);
    eprintln!("pretrained {} steps, final loss {last:.4}; wrote {}", result.steps, out.display());
    Ok(())
}

/// Seeded finetune/validation split of one cohort.
fn split_cohort(cohort: Vec<PreparedRecording>, seed: u64) -> (Vec<PreparedRecording>, Vec<PreparedRecording>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut substream(seed, "split", u64::MAX));
    let (n_train, _) = split_sizes(cohort.len());
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut slots: Vec<Option<PreparedRecording>> = cohort.into_iter().map(Some).collect();
    for (k, &i) in order.iter().enumerate() {
        let rec = slots[i].take().expect("each index once");
        if k < n_train { train.push(rec) } else { val.push(rec) }
    }
    (train, val)
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<(), Error> {
    let cfg = resolve(&a.common, |p| {
        push_path(p, "init", &a.init);
        push_path(p, "data", &a.data);
        push_path(p, "val", &a.val);
        push(p, "regime", &a.regime);
        push(p, "dropout", &a.dropout);
        push(p, "l2", &a.l2);
        a.train.pairs(p);
    })?;
    let init = cfg.require(&cfg.init, "init")?;
    let out = cfg.require(&cfg.out, "out")?;
    if cfg.regime == Regime::DirectTransfer {
        load_checkpoint(init)?;
        fs::copy(init, out).map_err(io_err(out))?;
        eprintln!("direct transfer: copied {} to {}", init.display(), out.display());
        return Ok(());
    }
    let (ckpt_hp, params) = load_checkpoint(init)?;
    let hp = HyperParams {
        dropout: cfg.hp.dropout,
        l2: cfg.hp.l2,
        ..ckpt_hp
    };
    let data = load_prepared(cfg.require(&cfg.data, "data")?)?;
    let (train, val) = match &cfg.val {
        Some(v) => (data, load_prepared(v)?),
        None => {
            if data.len() < 2 {
                return Err(seqsleep::config::ConfigError::Missing("val (or at least 2 subjects in data)").into());
            }
            split_cohort(data, cfg.train.seed)
        }
    };
    let optimizer = if cfg.train.reset_optimizer {
        None
    } else {
        let path = optimizer_path(init);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Some(AdamState::decode(&bytes, &params)?)
    };
    let result = finetune_from(&params, optimizer.as_ref(), &hp, mask_for(cfg.regime).trainable(), &train, &val, &cfg.train)?;
    save_checkpoint(out, &hp, &result.params)?;
    write(&optimizer_path(out), result.optimizer.encode())?;
    write_log(&cfg, &result.log)?;
    eprintln!(
        "finetuned ({}) {} steps, best validation accuracy {:.4}; wrote {}",
        cfg.regime,
        result.steps,
        result.best_val_acc.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), Error> {
    let cfg = resolve(&a.common, |p| {
        push_path(p, "model", &a.model);
        push_path(p, "data", &a.data);
    })?;
    let (hp, params) = load_checkpoint(cfg.require(&cfg.model, "model")?)?;
    let cohort = load_prepared(cfg.require(&cfg.data, "data")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let (report, outputs) = evaluate_cohort(&params, &hp, &cohort)?;
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("report.json"), report.to_json())?;
    write_hypnograms(out, &outputs)?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_loso(a: &LosoArgs) -> Result<(), Error> {
    let cfg = resolve(&a.common, |p| {
        push_path(p, "data", &a.data);
        push_path(p, "init", &a.init);
        push(p, "regime", &a.regime);
        if a.scratch {
            p.push(("scratch".into(), "true".into()));
        }
        a.model.pairs(p);
        a.train.pairs(p);
    })?;
    let cohort = load_prepared(cfg.require(&cfg.data, "data")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let loaded;
    let (hp, start) = if cfg.scratch {
        (cfg.hp.clone(), FoldStart::Scratch)
    } else {
        loaded = load_checkpoint(cfg.require(&cfg.init, "init")?)?;
        let hp = HyperParams {
            dropout: cfg.hp.dropout,
            l2: cfg.hp.l2,
            ..loaded.0.clone()
        };
        (hp, FoldStart::Transfer(&loaded.1, cfg.regime))
    };
    let report = loso_cv(&cohort, start, &hp, &cfg.train, cfg.jobs)?;
    for (i, f) in report.folds.iter().enumerate() {
        write(&out.join(format!("fold_{:02}_{}.txt", i + 1, f.subject_id)), f.report.to_text())?;
        write(
            &out.join("hypnograms").join(format!("{}.txt", f.subject_id)),
            format_hypnogram(&f.hypnogram),
        )?;
        eprintln!("fold {:>2} {:>6}: accuracy {:.4} ({} steps)", i + 1, f.subject_id, f.report.accuracy, f.steps);
    }
    write(&out.join("pooled.txt"), report.pooled.to_text())?;
    write(&out.join("loso.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write(&out.join("run.cfg"), cfg.to_text())?;
    print!("{}", report.pooled.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Loso(a) => cmd_loso(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                "config" => 2,
                "io" => 3,
                "data" | "spectrogram" => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
