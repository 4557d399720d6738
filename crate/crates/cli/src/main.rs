use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use microdepth::cost::{enumerate_configs, plan_memory, write_config_csv, MemoryReport};
use microdepth::dataset::{
    generate, make_domain_pair, read_dataset, write_dataset, Dataset, DatasetManifest, Sample, SensorRecord,
    SupervisionKind,
};
use microdepth::labels::{CameraIntrinsics, SensorSim};
use microdepth::metrics::{evaluate_model, per_sample_delta1, EvalMode, ModelPredictor, ShiftDetector, SHIFT_THRESHOLD};
use microdepth::model::tape_plan;
use microdepth::training::{train_with_progress, TrainConfig, DEFAULT_FB};
use microdepth::{ArchConfig, DType, Error, Model, SparseUpdateConfig};

mod manifest;

use manifest::{sidecar, RunRecorder};

#[derive(Parser)]
#[command(name = "microdepth", version, about = "Tiny monocular-depth training, evaluation and memory planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to a UMDE file plus a manifest sidecar.
    GenData(GenDataArgs),
    /// Train from scratch (all blocks, lr 1e-4 by default).
    Pretrain(TrainArgs),
    /// Fine-tune a checkpoint (lr 1e-3 by default).
    Finetune(TrainArgs),
    /// Depth metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Analytic training memory for one sparse-update configuration.
    Memplan(MemplanArgs),
    /// Memory and compute for all 16 sparse-update configurations.
    Pareto(ParetoArgs),
    /// Feed per-sample delta1 of a stream through the shift detector.
    DetectShift(DetectShiftArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    domain: Domain,
    #[arg(long)]
    count: usize,
    /// Base seed; sample i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the per-world palette jitter shared by both domains.
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Store images only.
    #[arg(long)]
    no_labels: bool,
    /// Keep label depths outside the sensor range.
    #[arg(long)]
    no_clip: bool,
    #[arg(long, default_value_t = DEFAULT_FB)]
    fb: f32,
}

#[derive(Clone, Copy, ValueEnum)]
enum Supervision {
    /// Dense depth re-rendered from the dataset manifest.
    Dense,
    /// The stored 8x8 labels.
    Pseudo,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture TOML; the reference 107k network when omitted.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// TrainConfig TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting checkpoint (required for finetune).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// `none`, `full`, or a comma list of enc, dec0, dec1, dec2.
    #[arg(long)]
    sparse: Option<SparseUpdateConfig>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_dtype)]
    dtype: Option<DType>,
    /// Defaults to dense for pretrain and pseudo for finetune.
    #[arg(long, value_enum)]
    supervision: Option<Supervision>,
    #[arg(long)]
    no_augment: bool,
    /// Output checkpoint; history goes to `<out>.history.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `gt` (needs the manifest sidecar) or `pseudo`.
    #[arg(long, default_value = "gt")]
    mode: EvalMode,
    /// Metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MemplanArgs {
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    sparse: SparseUpdateConfig,
    #[arg(long, default_value = "bf16", value_parser = parse_dtype)]
    dtype: DType,
    /// Square input side; the architecture's own when omitted.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParetoArgs {
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long, default_value = "bf16", value_parser = parse_dtype)]
    dtype: DType,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectShiftArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    stream_data: PathBuf,
    #[arg(long, default_value_t = SHIFT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    min_window: usize,
    #[arg(long, default_value = "gt")]
    mode: EvalMode,
    /// Per-sample CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s.to_ascii_lowercase().as_str() {
        "f32" | "fp32" => Ok(DType::F32),
        "bf16" => Ok(DType::Bf16),
        other => Err(format!("unknown dtype `{other}` (expected f32 or bf16)")),
    }
}

fn mode_name(m: EvalMode) -> &'static str {
    match m {
        EvalMode::UpscalePredToGt => "upscale-pred-to-gt",
        EvalMode::PseudoAt48 => "pseudo-at-48",
    }
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 1,
            Error::InvalidArgument(_) | Error::Format { .. } | Error::Io(_) => 2,
            Error::Contract(_) | Error::UndefinedMetric(_) | Error::Degenerate(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => train_cmd("pretrain", a),
        Command::Finetune(a) => train_cmd("finetune", a),
        Command::Eval(a) => eval_cmd(a),
        Command::Memplan(a) => memplan(a),
        Command::Pareto(a) => pareto(a),
        Command::DetectShift(a) => detect_shift_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("UMDE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("UMDE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

/// Prefixes I/O errors with the offending path.
fn at<T>(path: &Path, r: microdepth::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))).into(),
        other => other.into(),
    })
}

fn load_arch(path: Option<&Path>) -> Result<ArchConfig, Failure> {
    Ok(match path {
        Some(p) => at(p, ArchConfig::load(p))?,
        None => ArchConfig::reference_107k(),
    })
}

/// Reads a UMDE file. With `dense`, re-renders it from the manifest sidecar
/// and checks the images match what is stored.
fn load_samples(path: &Path, dense: bool) -> Result<Dataset, Failure> {
    let stored = at(path, read_dataset(path))?;
    if !dense {
        return Ok(stored);
    }
    let mpath = DatasetManifest::sidecar_path(path);
    if !mpath.exists() {
        return Err(Error::Config(format!("dense depth needs the manifest {}", mpath.display())).into());
    }
    let m = at(&mpath, DatasetManifest::read(&mpath))?;
    if m.count != stored.samples.len() {
        return Err(Error::Format {
            offset: 0,
            message: format!("manifest lists {} samples, file holds {}", m.count, stored.samples.len()),
        }
        .into());
    }
    let samples: Vec<Sample> = m.regenerate()?;
    for (i, (a, b)) in samples.iter().zip(&stored.samples).enumerate() {
        if a.image != b.image {
            return Err(Error::Format {
                offset: 0,
                message: format!("sample {i} does not match its manifest"),
            }
            .into());
        }
    }
    Ok(Dataset {
        intrinsics: stored.intrinsics,
        samples,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))).into())
}

fn manifest_for(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => sidecar(p),
        None => PathBuf::from(format!("{command}.run.json")),
    }
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let (pa, pb) = make_domain_pair(a.world_seed);
    let params = match a.domain {
        Domain::A => pa,
        Domain::B => pb,
    };
    let sensor = (!a.no_labels).then(|| SensorSim {
        clip: !a.no_clip,
        ..SensorSim::default()
    });
    let intrinsics = CameraIntrinsics::from_fb(a.fb)?;
    let samples = generate(&params, sensor.as_ref(), a.count, a.seed)?;
    let mut rec = RunRecorder::start(
        "gen-data",
        json!({ "params": params, "sensor": sensor.as_ref().map(SensorRecord::from), "count": a.count, "fb": a.fb }),
    );
    rec.manifest.seeds = vec![a.seed, a.world_seed];
    at(&a.out, write_dataset(&a.out, &Dataset { intrinsics, samples }))?;
    let dm = DatasetManifest {
        format_version: microdepth::dataset::FORMAT_VERSION,
        params,
        sensor: sensor.as_ref().map(SensorRecord::from),
        base_seed: a.seed,
        count: a.count,
        fb: a.fb,
    };
    let mpath = DatasetManifest::sidecar_path(&a.out);
    dm.write(&mpath)?;
    rec.output(&a.out);
    rec.output(&mpath);
    rec.finish(&sidecar(&a.out))?;
    println!("wrote {} samples to {}", a.count, a.out.display());
    Ok(())
}

fn train_cmd(command: &str, a: TrainArgs) -> Outcome {
    let finetune = command == "finetune";
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<TrainConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None if finetune => TrainConfig::finetune(SparseUpdateConfig::full()),
        None => TrainConfig::pretrain(),
    };
    if let Some(s) = a.sparse {
        cfg.sparse = s;
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if a.patience.is_some() {
        cfg.patience = a.patience;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_augment {
        cfg.augment.enabled = false;
    }
    let supervision = a.supervision.unwrap_or(if finetune { Supervision::Pseudo } else { Supervision::Dense });
    let dense = matches!(supervision, Supervision::Dense);
    let train_set = load_samples(&a.data, dense)?;
    let val_set = load_samples(&a.val, dense)?;
    if train_set.intrinsics != val_set.intrinsics {
        return Err(usage("training and validation sets use different intrinsics"));
    }
    cfg.intrinsics = train_set.intrinsics;
    cfg.validate()?;

    let mut model = match (&a.init, finetune) {
        (Some(p), _) => {
            if a.arch.is_some() {
                return Err(usage("--arch and --init are exclusive; the checkpoint carries its architecture"));
            }
            at(p, Model::load(p))?
        }
        (None, true) => return Err(usage("finetune needs --init CKPT")),
        (None, false) => Model::build(&load_arch(a.arch.as_deref())?, cfg.seed)?,
    };
    if let Some(d) = a.dtype {
        model.set_dtype(d);
    }
    let stop_layer = tape_plan(model.graph(), &cfg.sparse).stop_layer;

    let kind = if dense { SupervisionKind::Dense } else { SupervisionKind::Pseudo };
    let tr = microdepth::dataset::to_train_samples(&train_set.samples, kind)?;
    let va = microdepth::dataset::to_train_samples(&val_set.samples, kind)?;

    let mut rec = RunRecorder::start(
        command,
        json!({
            "train": cfg,
            "arch": model.arch().to_toml_string(),
            "dtype": model.dtype(),
            "supervision": if dense { "dense" } else { "pseudo" },
            "init": a.init,
        }),
    );
    rec.manifest.seeds = vec![cfg.seed];
    rec.manifest.stop_layer = stop_layer;
    rec.input(&a.data);
    rec.input(&a.val);
    if let Some(p) = &a.init {
        rec.input(p);
    }

    let (trained, history) = train_with_progress(&model, &tr, &va, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  {:.1}s",
            e.epoch, e.train_loss, e.val_loss, e.wall_time_s
        )
    })?;
    at(&a.out, trained.save(&a.out))?;
    let hpath = {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".history.csv");
        PathBuf::from(p)
    };
    let mut w = create(&hpath)?;
    history.write_csv(&mut w)?;
    w.flush()?;
    rec.output(&a.out);
    rec.output(&hpath);
    rec.finish(&sidecar(&a.out))?;
    println!(
        "selected epoch {} of {}; checkpoint {}",
        history.selected_epoch,
        history.epochs.len(),
        a.out.display()
    );
    Ok(())
}

/// Writes to `out` or stdout.
fn emit(out: Option<&Path>, body: impl FnOnce(&mut dyn Write) -> Result<(), Failure>) -> Outcome {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let model = at(&a.ckpt, Model::load(&a.ckpt))?;
    let ds = load_samples(&a.data, a.mode == EvalMode::UpscalePredToGt)?;
    let report = evaluate_model(&model, &ds.samples, Some(&ds.intrinsics), a.mode)?;
    let mut rec = RunRecorder::start("eval", json!({ "mode": mode_name(a.mode) }));
    rec.input(&a.ckpt);
    rec.input(&a.data);
    emit(a.out.as_deref(), |w| Ok(report.write_csv(w)?))?;
    if let Some(p) = &a.out {
        rec.output(p);
        eprintln!("{}", report.summary());
    }
    rec.finish(&manifest_for(a.out.as_deref(), "eval"))?;
    Ok(())
}

const MEMPLAN_HEADER: [&str; 7] = ["component", "enc_B", "dec0_B", "dec1_B", "dec2_B", "total_B", "notes"];

fn write_memplan(r: &MemoryReport, w: &mut dyn Write) -> Result<(), Failure> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Failure::from(Error::Io(std::io::Error::other(e)));
    out.write_record(MEMPLAN_HEADER).map_err(io)?;
    let wb_note = format!("peak at layer {}", r.working_buffer_layer);
    let rows: [(&str, [u64; 4], u64, String); 5] = [
        ("working_buffer", r.working_buffer_per_block, r.working_buffer_bytes, wb_note),
        ("weights", r.weights_per_block, r.storage_weights_bytes, String::new()),
        ("activations", r.activations_per_block, r.storage_activations_bytes, String::new()),
        ("gradients", r.gradients_per_block, r.storage_gradients_bytes, String::new()),
        ("optimizer", r.optimizer_per_block, r.optimizer_state_bytes, "adam moments".into()),
    ];
    for (name, per, total, note) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(per.iter().map(u64::to_string));
        rec.push(total.to_string());
        rec.push(note);
        out.write_record(&rec).map_err(io)?;
    }
    out.write_record(["total", "", "", "", "", &r.total_bytes.to_string(), &r.config.to_string()])
        .map_err(io)?;
    out.flush()?;
    Ok(())
}

fn memplan(a: MemplanArgs) -> Outcome {
    let mut arch = load_arch(a.arch.as_deref())?;
    if let Some(n) = a.size {
        if n == 0 {
            return Err(usage("--size must be positive"));
        }
        arch = arch.with_input_size(n, n);
    }
    let report = plan_memory(&arch, &a.sparse, a.dtype.size_bytes() as u64)?;
    let rec = RunRecorder::start(
        "memplan",
        json!({ "arch": arch.to_toml_string(), "sparse": a.sparse, "dtype": a.dtype }),
    );
    let mut rec = rec;
    if let Some(p) = &a.arch {
        rec.input(p);
    }
    emit(a.out.as_deref(), |w| write_memplan(&report, w))?;
    if let Some(p) = &a.out {
        rec.output(p);
    }
    eprintln!("{}", report.summary());
    rec.finish(&manifest_for(a.out.as_deref(), "memplan"))?;
    Ok(())
}

fn pareto(a: ParetoArgs) -> Outcome {
    let arch = load_arch(a.arch.as_deref())?;
    let rows = enumerate_configs(&arch, a.dtype.size_bytes() as u64)?;
    let mut rec = RunRecorder::start("pareto", json!({ "arch": arch.to_toml_string(), "dtype": a.dtype }));
    if let Some(p) = &a.arch {
        rec.input(p);
    }
    emit(a.out.as_deref(), |w| Ok(write_config_csv(&rows, w)?))?;
    if let Some(p) = &a.out {
        rec.output(p);
    }
    rec.finish(&manifest_for(a.out.as_deref(), "pareto"))?;
    Ok(())
}

fn detect_shift_cmd(a: DetectShiftArgs) -> Outcome {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    if a.window == 0 {
        return Err(usage("--window must be positive"));
    }
    let model = at(&a.ckpt, Model::load(&a.ckpt))?;
    let ds = load_samples(&a.stream_data, a.mode == EvalMode::UpscalePredToGt)?;
    let predictor = ModelPredictor::new(&model, Some(&ds.intrinsics))?;
    let deltas = per_sample_delta1(&predictor, &ds.samples, a.mode)?;
    let mut det = ShiftDetector::new(a.window, a.min_window, a.threshold);
    let mut rows = Vec::with_capacity(deltas.len());
    for (i, d) in deltas.iter().enumerate() {
        // Samples without jointly valid pixels carry no evidence.
        let status = match d {
            Some(v) => det.push(*v),
            None => det.status(),
        };
        rows.push((i, *d, det.mean(), status));
    }
    let status = det.status();
    let mut rec = RunRecorder::start(
        "detect-shift",
        json!({ "threshold": a.threshold, "window": a.window, "min_window": a.min_window, "mode": mode_name(a.mode) }),
    );
    rec.input(&a.ckpt);
    rec.input(&a.stream_data);
    emit(a.out.as_deref(), |w| {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Failure::from(Error::Io(std::io::Error::other(e)));
        out.write_record(["index", "delta1", "window_mean", "status"]).map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (i, d, m, s) in &rows {
            out.write_record([i.to_string(), opt(*d), opt(*m), s.to_string()]).map_err(io)?;
        }
        out.flush()?;
        Ok(())
    })?;
    if let Some(p) = &a.out {
        rec.output(p);
    }
    rec.finish(&manifest_for(a.out.as_deref(), "detect-shift"))?;
    match det.mean() {
        Some(m) => println!("{status} (window mean delta1 {m:.4}, threshold {})", a.threshold),
        None => println!("{status}"),
    }
    Ok(())
}
