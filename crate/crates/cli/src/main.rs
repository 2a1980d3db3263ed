//! `novo`: generate data, train, withdraw keys, seal, evaluate and run
//! ablations from the command line.
//!
//! Exit status: 0 success, 2 usage or config error, 3 data or file error,
//! 4 numeric failure, 1 anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use novo_core::checkpoint::Checkpoint;
use novo_core::config::TrainConfig;
use novo_core::data::{split, synth_generate, Dataset, SplitTag, SynthSpec};
use novo_core::eval::{
    epochs_to_forget, evaluate, mia_masking, mia_score, vicinity_confusion, vicinity_csv, EvalReport,
    MaskingBaseline, MiaFeature, FORGOTTEN,
};
use novo_core::model::FeatureToken;
use novo_core::trainer::{metrics_csv, Trainer, METRICS_HEADER};
use novo_core::unlearn::{parse_classes, seal, state_features, KeyState};
use novo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "novo", version, about = "Train keyed vision transformers and forget classes by withdrawing keys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic class-pattern dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train(Train),
    /// Report accuracy (and optionally membership inference) on the test split.
    Evaluate(Evaluate),
    /// Withdraw class keys and report before/after metrics.
    Unlearn(Unlearn),
    /// Export a checkpoint with withdrawn keys destroyed.
    Seal(SealCmd),
    /// Write final-layer token features as CSV.
    ExportFeatures(ExportFeatures),
    /// Train one model per ablation cell and report epochs to forget.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "16x16")]
    size: String,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    /// Falls back to NOVO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct ConfigFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// beta,gamma,tau weights of the retain, uniform and inverse terms.
    #[arg(long, value_name = "B,G,T")]
    loss_weights: Option<String>,
    /// Drop classes per batch but never expand (drop_only).
    #[arg(long, conflicts_with = "no_drop_expand")]
    no_expand: bool,
    /// Neither drop nor expand: the forget set is only the absent classes.
    #[arg(long)]
    no_drop_expand: bool,
    /// Train the backbone without class keys.
    #[arg(long)]
    plain: bool,
}

impl ConfigFlags {
    fn touched(&self) -> bool {
        self.config.is_some()
            || !self.set.is_empty()
            || self.lr.is_some()
            || self.batch_size.is_some()
            || self.seed.is_some()
            || self.loss_weights.is_some()
            || self.no_expand
            || self.no_drop_expand
            || self.plain
    }

    /// Defaults, then NOVO_SEED, then the config file, then flags.
    fn build(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        if let Some(seed) = env_seed()? {
            c.seed = seed;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
            c.apply_text(&text).map_err(|e| match e {
                Error::ConfigLine { line, msg } => Error::Config(format!("{}: line {line}: {msg}", path.display())),
                other => other,
            })?;
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Usage(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            c.set(k.trim(), v)?;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.loss_weights {
            c.set("loss_weights", v)?;
        }
        if self.no_expand {
            c.set("drop_expand", "drop_only")?;
        }
        if self.no_drop_expand {
            c.set("drop_expand", "none")?;
        }
        if self.plain {
            c.model.keyed = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Dataset file; without it the synthetic set described by the config is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue the run stored in this checkpoint; only --epochs may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Also write the checkpoint every N epochs.
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Classes to withdraw (or to mask, for a plain model), e.g. "3,7".
    #[arg(long, default_value = "")]
    forget: String,
    /// Also run the membership-inference attack (needs the training split).
    #[arg(long)]
    mia: bool,
    #[arg(long, default_value = "loss")]
    mia_feature: String,
    /// Write `<prefix>.metrics.csv`, `.confusion.csv`, `.per_class.csv`, `.vicinity.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Unlearn {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "")]
    forget: String,
    /// Write a sealed checkpoint here.
    #[arg(long)]
    seal: Option<PathBuf>,
    /// Write `<prefix>.before.csv` and `<prefix>.after.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SealCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    forget: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportFeatures {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// CLS, LT or UT.
    #[arg(long, default_value = "UT")]
    token: String,
    #[arg(long, default_value = "")]
    forget: String,
    /// all, train or test.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Classes withdrawn when measuring forgetting each epoch.
    #[arg(long, default_value = "0")]
    forget: String,
    /// Comma-separated subset of: full, tau1, tau0, gamma0, drop_only, none.
    #[arg(long, default_value = "tau1,tau0,gamma0,drop_only,none")]
    cells: String,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("NOVO_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Usage(format!("NOVO_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn banner(command: &str, extra: &[(&str, String)], config: &TrainConfig) -> String {
    let mut s = format!("[effective config: {command}]\n");
    for (k, v) in extra {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s.push_str(&config.to_text());
    s.push_str("[end config]\n");
    s
}

struct Splits {
    train: Option<Dataset>,
    test: Option<Dataset>,
    similarity: Option<Vec<f64>>,
}

/// Train/test data for `config`: from a file when given, otherwise generated.
/// A file tagged `full` is split with the config's test fraction and data seed.
fn load_splits(data: Option<&Path>, config: &TrainConfig) -> Result<Splits> {
    let (full, similarity) = match data {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read dataset {}: {e}", path.display())))?;
            let ds = Dataset::from_bytes(&bytes)?;
            match ds.split {
                SplitTag::Train => {
                    return Ok(Splits {
                        train: Some(ds),
                        test: None,
                        similarity: None,
                    })
                }
                SplitTag::Test => {
                    return Ok(Splits {
                        train: None,
                        test: Some(ds),
                        similarity: None,
                    })
                }
                SplitTag::Full => (ds, None),
            }
        }
        None => {
            let s = synth_generate(&config.data)?;
            (s.dataset, Some(s.similarity))
        }
    };
    let (train, test) = split(&full, config.test_fraction, config.data.seed)?;
    Ok(Splits {
        train: Some(train),
        test: Some(test),
        similarity,
    })
}

/// Take image shape and class count from the dataset file.
fn adopt_data_shape(config: &mut TrainConfig, ds: &Dataset) -> Result<()> {
    config.set("height", &ds.height.to_string())?;
    config.set("width", &ds.width.to_string())?;
    config.set("channels", &ds.channels.to_string())?;
    config.set("classes", &ds.classes.to_string())?;
    config.validate()
}

fn need(ds: Option<Dataset>, which: &str) -> Result<Dataset> {
    ds.ok_or_else(|| Error::Data(format!("the dataset has no {which} samples")))
}

fn gen_data(a: GenData) -> Result<()> {
    let (h, w) = a
        .size
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
        .ok_or_else(|| Error::Usage(format!("--size expects HxW, got {:?}", a.size)))?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        height: h,
        width: w,
        channels: a.channels,
        noise: a.noise,
        seed,
    };
    let s = synth_generate(&spec)?;
    write_file(&a.out, s.dataset.to_bytes())?;
    println!(
        "wrote {} samples ({} classes, {h}x{w}x{}, seed {seed}) to {}, fingerprint {:016x}",
        s.dataset.len(),
        a.classes,
        a.channels,
        a.out.display(),
        s.dataset.fingerprint()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.flags.touched() {
                return Err(Error::Usage("--resume takes its config from the checkpoint; only --epochs may be given".into()));
            }
            let mut t = Trainer::from_checkpoint(load_ckpt(path)?)?;
            if let Some(e) = a.flags.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            let mut c = a.flags.build()?;
            if let Some(path) = &a.data {
                let probe = Dataset::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                adopt_data_shape(&mut c, &probe)?;
            }
            Trainer::new(c)?
        }
    };
    let splits = load_splits(a.data.as_deref(), &trainer.config)?;
    let train_set = need(splits.train, "training")?;
    let extra = [
        ("command", "train".to_string()),
        ("data", a.data.as_ref().map_or("synthetic".into(), |p| p.display().to_string())),
        ("resume", a.resume.as_ref().map_or("no".into(), |p| p.display().to_string())),
    ];
    let cfg_text = banner("train", &extra, &trainer.config);
    print!("{cfg_text}");
    println!(
        "model: {} parameters, {} in class keys; {} training samples",
        trainer.model.num_params(),
        trainer.model.key_param_count(),
        train_set.len()
    );
    println!("{METRICS_HEADER}");

    let start_epoch = trainer.epoch;
    let stop = a.stop_after.map(|n| start_epoch + n);
    let out = a.out.clone();
    let result = trainer.fit(&train_set, |t, m| {
        println!("{}", metrics_csv(std::slice::from_ref(m)).lines().nth(1).unwrap_or(""));
        if let Some(n) = a.save_every {
            if n > 0 && t.epoch % n == 0 {
                t.checkpoint().save(&out)?;
            }
        }
        Ok(stop.is_none_or(|s| t.epoch < s))
    });
    if let Err(e) = result {
        if matches!(e, Error::Numeric(_)) {
            let snap = with_suffix(&a.out, ".nan-snapshot");
            trainer.checkpoint().save(&snap)?;
            eprintln!("last finite state saved to {}", snap.display());
        }
        return Err(e);
    }
    trainer.checkpoint().save(&a.out).map_err(|e| Error::Data(format!("cannot write {}: {e}", a.out.display())))?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    write_file(&metrics_path, metrics_csv(&trainer.history))?;
    write_file(&with_suffix(&a.out, ".config"), &cfg_text)?;
    println!(
        "checkpoint {} (epoch {}), metrics {}",
        a.out.display(),
        trainer.epoch,
        metrics_path.display()
    );
    Ok(())
}

fn write_report(prefix: &Path, r: &EvalReport, vicinity: &str, cfg_text: &str) -> Result<()> {
    write_file(&with_suffix(prefix, ".metrics.csv"), r.metrics_csv())?;
    write_file(&with_suffix(prefix, ".confusion.csv"), r.confusion_csv())?;
    write_file(&with_suffix(prefix, ".per_class.csv"), r.per_class_csv())?;
    write_file(&with_suffix(prefix, ".vicinity.csv"), vicinity)?;
    write_file(&with_suffix(prefix, ".config"), cfg_text)
}

fn print_vicinity(r: &EvalReport, similarity: Option<&[f64]>) -> String {
    let rows = vicinity_confusion(r, similarity);
    for v in &rows {
        let modal = v.modal.map_or("-".into(), |m| m.to_string());
        let mut line = format!("  class {} -> {modal} ({:.0}%)", v.class, 100.0 * v.share);
        if let Some(n) = v.nearest_active {
            let _ = write!(line, ", nearest active {n}");
        }
        if v.no_near_neighbor {
            line.push_str(", no near neighbor");
        }
        println!("{line}");
    }
    vicinity_csv(&rows)
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let forget = parse_classes(&a.forget)?;
    let feature: MiaFeature = a.mia_feature.parse()?;
    let splits = load_splits(a.data.as_deref(), &ck.config)?;
    let test = need(splits.test, "test")?;
    let extra = [
        ("command", "evaluate".to_string()),
        ("ckpt", a.ckpt.display().to_string()),
        ("data", a.data.as_ref().map_or("synthetic".into(), |p| p.display().to_string())),
        ("forget", a.forget.clone()),
        ("sealed", format!("{:?}", ck.sealed)),
        ("mia", if a.mia { format!("{feature:?}") } else { "off".into() }),
    ];
    let cfg_text = banner("evaluate", &extra, &ck.config);
    print!("{cfg_text}");

    let mut report = if ck.model.keyed() {
        let state = KeyState::for_checkpoint(&ck).withdraw(&forget)?;
        let mut r = evaluate(&ck.model, &state, &test)?;
        if a.mia {
            let train_set = need(splits.train, "training")?;
            r.mia = Some(mia_score(&ck.model, &state, &train_set, &test, feature, ck.config.seed)?.score);
        }
        r
    } else {
        let baseline = MaskingBaseline::new(&ck.model, &forget)?;
        if !forget.is_empty() {
            println!("plain model: forget classes are masked at the output");
        }
        let mut r = baseline.evaluate(&test)?;
        if a.mia {
            let train_set = need(splits.train, "training")?;
            r.mia = Some(mia_masking(&baseline, &train_set, &test, feature, ck.config.seed)?.score);
        }
        r
    };
    report.withdrawn.sort_unstable();
    print!("{}", report.summary());
    let vicinity = print_vicinity(&report, splits.similarity.as_deref());
    if let Some(prefix) = &a.out {
        write_report(prefix, &report, &vicinity, &cfg_text)?;
    }
    Ok(())
}

fn unlearn_cmd(a: Unlearn) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let forget = parse_classes(&a.forget)?;
    if !ck.model.keyed() {
        return Err(Error::Usage(
            "a plain model has no class keys; use `evaluate --forget` for the masking baseline".into(),
        ));
    }
    if a.seal.as_deref() == Some(a.ckpt.as_path()) {
        return Err(Error::Usage("--seal must name a new file, not the input checkpoint".into()));
    }
    let splits = load_splits(a.data.as_deref(), &ck.config)?;
    let test = need(splits.test, "test")?;
    let extra = [
        ("command", "unlearn".to_string()),
        ("ckpt", a.ckpt.display().to_string()),
        ("data", a.data.as_ref().map_or("synthetic".into(), |p| p.display().to_string())),
        ("forget", a.forget.clone()),
    ];
    let cfg_text = banner("unlearn", &extra, &ck.config);
    print!("{cfg_text}");

    let before_state = KeyState::for_checkpoint(&ck);
    let before = evaluate(&ck.model, &before_state, &test)?;
    let checksum = ck.model.checksum();
    let clock = Instant::now();
    let after_state = before_state.withdraw(&forget)?;
    let took = clock.elapsed();
    if ck.model.checksum() != checksum {
        return Err(Error::Contract("parameters changed during withdrawal".into()));
    }
    let after = evaluate(&ck.model, &after_state, &test)?;
    println!("before:\n{}", before.summary());
    println!("after:\n{}", after.summary());
    let vicinity = print_vicinity(&after, splits.similarity.as_deref());
    println!(
        "withdrawal took {:.1} us with 0 gradient steps; parameter checksum {checksum:016x} unchanged",
        took.as_secs_f64() * 1e6
    );
    if after_state.is_degenerate() {
        println!("warning: every key is withdrawn; predictions are meaningless");
    }
    if let Some(prefix) = &a.out {
        write_file(&with_suffix(prefix, ".before.csv"), before.metrics_csv())?;
        write_report(&with_suffix(prefix, ".after"), &after, &vicinity, &cfg_text)?;
    }
    if let Some(out) = &a.seal {
        let sealed = seal(&ck, &after_state)?;
        sealed.save(out).map_err(|e| Error::Data(format!("cannot write {}: {e}", out.display())))?;
        println!("sealed checkpoint {} withdraws {:?}", out.display(), sealed.sealed);
    }
    Ok(())
}

fn seal_cmd(a: SealCmd) -> Result<()> {
    if a.out == a.ckpt {
        return Err(Error::Usage("--out must name a new file, not the input checkpoint".into()));
    }
    let ck = load_ckpt(&a.ckpt)?;
    let state = KeyState::for_checkpoint(&ck).withdraw(&parse_classes(&a.forget)?)?;
    let sealed = seal(&ck, &state)?;
    sealed.save(&a.out).map_err(|e| Error::Data(format!("cannot write {}: {e}", a.out.display())))?;
    println!("sealed checkpoint {} withdraws {:?}", a.out.display(), sealed.sealed);
    Ok(())
}

fn export_cmd(a: ExportFeatures) -> Result<()> {
    let ck = load_ckpt(&a.ckpt)?;
    let token: FeatureToken = a.token.parse()?;
    let state = KeyState::for_checkpoint(&ck).withdraw(&parse_classes(&a.forget)?)?;
    let ds = match (a.split.as_str(), &a.data) {
        ("all", Some(path)) => Dataset::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?,
        ("all", None) => synth_generate(&ck.config.data)?.dataset,
        ("train", _) => need(load_splits(a.data.as_deref(), &ck.config)?.train, "training")?,
        ("test", _) => need(load_splits(a.data.as_deref(), &ck.config)?.test, "test")?,
        (other, _) => return Err(Error::Usage(format!("--split must be all|train|test, got {other:?}"))),
    };
    let f = state_features(&ck.model, &state, &ds.images, ds.len(), token)?;
    let mut s = String::with_capacity(f.numel() * 12);
    for i in 0..f.rows() {
        let cells: Vec<String> = f.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    write_file(&a.out, s)?;
    println!("wrote {}x{} {token:?} features to {}", f.rows(), f.cols(), a.out.display());
    Ok(())
}

fn cell_config(base: &TrainConfig, cell: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match cell {
        "full" => {}
        "tau1" => c.weights.inverse = 1.0,
        "tau0" => c.weights.inverse = 0.0,
        "gamma0" => {
            c.weights.uniform = 0.0;
            c.weights.inverse = 0.0;
        }
        "drop_only" | "none" => c.set("drop_expand", cell)?,
        other => return Err(Error::Usage(format!("unknown ablation cell {other:?}"))),
    }
    Ok(c)
}

fn ablate_cmd(a: Ablate) -> Result<()> {
    let mut base = a.flags.build()?;
    if let Some(path) = &a.data {
        let probe = Dataset::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        adopt_data_shape(&mut base, &probe)?;
    }
    if !base.model.keyed {
        return Err(Error::Usage("ablation cells need a keyed model".into()));
    }
    let forget = parse_classes(&a.forget)?;
    let cells: Vec<&str> = a.cells.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let configs = cells.iter().map(|c| cell_config(&base, c)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let splits = load_splits(a.data.as_deref(), &base)?;
    let train_set = need(splits.train, "training")?;
    let test = need(splits.test, "test")?;
    let all = KeyState::all_active(base.model.classes);
    let withdrawn = all.withdraw(&forget)?;

    let mut summary = String::from("cell,epochs,epochs_to_forget,acc_all,acc_retain,acc_forget\n");
    for (cell, config) in cells.iter().zip(configs) {
        let cfg_text = banner(&format!("ablate {cell}"), &[("forget", a.forget.clone())], &config);
        print!("{cfg_text}");
        write_file(&a.out_dir.join(format!("{cell}.config")), &cfg_text)?;
        let mut t = Trainer::new(config)?;
        let mut rows = format!("{METRICS_HEADER},acc_all,acc_retain,acc_forget\n");
        let mut curve = Vec::new();
        let mut last = (0.0, 0.0, 0.0);
        t.fit(&train_set, |t, m| {
            let base_r = evaluate(&t.model, &all, &test)?;
            let r = evaluate(&t.model, &withdrawn, &test)?;
            let af = r.acc_forget.unwrap_or(f64::NAN);
            let ar = r.acc_retain.unwrap_or(f64::NAN);
            curve.push(af);
            last = (base_r.accuracy, ar, af);
            let line = metrics_csv(std::slice::from_ref(m));
            let _ = writeln!(rows, "{},{:.3},{:.3},{:.3}", line.lines().nth(1).unwrap_or(""), base_r.accuracy, ar, af);
            println!("{cell} epoch {}: acc_all {:.2} acc_retain {ar:.2} acc_forget {af:.2}", m.epoch, base_r.accuracy);
            Ok(true)
        })?;
        write_file(&a.out_dir.join(format!("{cell}.csv")), &rows)?;
        let to_forget = epochs_to_forget(&curve, FORGOTTEN).map_or(String::new(), |e| e.to_string());
        let _ = writeln!(
            summary,
            "{cell},{},{to_forget},{:.3},{:.3},{:.3}",
            t.epoch, last.0, last.1, last.2
        );
    }
    write_file(&a.out_dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::ConfigLine { .. } | Error::Index { .. } => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape { .. } | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Unlearn(a) => unlearn_cmd(a),
        Command::Seal(a) => seal_cmd(a),
        Command::ExportFeatures(a) => export_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
