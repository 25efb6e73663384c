use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rfp_core::csi::{import_jsonl, CsiReader, CsiWriter, Record};
use rfp_core::detector::{format_record, run_detection_records, DetectorConfig};
use rfp_core::nn::{load_model, save_model, InputGeometry, ModelSpec, Network};
use rfp_core::pipeline::{build_dataset, evaluate, train, Confusion, Dataset, RunManifest, Split};
use rfp_core::preprocess::PipelineVariant;
use rfp_core::synth::{gen_dataset, DatasetSpec, Scene, SimConfig};
use rfp_core::{Label, StreamHeader};

/// Device-free presence detection from WiFi channel state information.
///
/// Set RFP_THREADS to cap the worker threads used for pre-processing and
/// the network.
#[derive(Parser)]
#[command(name = "rfp", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic CSI: a multi-day labelled dataset, or one stream.
    Simulate(SimulateArgs),
    /// Convert a JSON-lines capture into the binary stream format.
    Import(ImportArgs),
    /// Train a classifier and write the model file plus reports.
    Train(TrainArgs),
    /// Evaluate a model on labelled streams, per day.
    Eval(EvalArgs),
    /// Run the per-second presence detector over a stream.
    Detect(DetectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Empty,
    Motion,
}

impl From<LabelArg> for Label {
    fn from(l: LabelArg) -> Label {
        match l {
            LabelArg::Empty => Label::Empty,
            LabelArg::Motion => Label::Motion,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (dataset mode) or file (--stream). Directories must exist.
    #[arg(long)]
    out: PathBuf,
    /// Simulator config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulator setting override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Days (scenes) to generate.
    #[arg(long, default_value_t = 6)]
    scenes: usize,
    /// Windows per label per day.
    #[arg(long, default_value_t = 400)]
    windows: usize,
    /// Frames per window.
    #[arg(long, default_value_t = 128)]
    window_len: usize,
    #[arg(long)]
    interval_ms: Option<f64>,
    /// Write a single stream instead of a dataset.
    #[arg(long)]
    stream: bool,
    /// Stream length in frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Motion intervals in seconds, e.g. `100-160,200-230` (stream mode).
    #[arg(long)]
    schedule: Option<String>,
    /// Whole-stream label when no schedule is given (stream mode).
    #[arg(long, value_enum)]
    label: Option<LabelArg>,
    /// Day id of the stream (stream mode).
    #[arg(long, default_value = "live")]
    day: String,
}

#[derive(Args)]
struct ImportArgs {
    /// JSON-lines input, `-` for stdin.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run manifest; flags below override it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest setting override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training stream file, repeatable.
    #[arg(long = "train")]
    train_files: Vec<PathBuf>,
    /// Held-out stream file, repeatable.
    #[arg(long = "test")]
    test_files: Vec<PathBuf>,
    #[arg(long)]
    variant: Option<PipelineVariant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Model file to write.
    #[arg(long)]
    model: PathBuf,
    /// Human-readable report; defaults to `<model>.report.txt`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Line-oriented records; defaults to `<model>.records.txt`.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled stream file, repeatable.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Write per-day records here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump every pre-processed window as flat f32 tensors.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Stream file to read.
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    stream: Option<PathBuf>,
    /// Read the stream from standard input.
    #[arg(long)]
    stdin: bool,
    /// Timeline output; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pre-processing the stream is expected to use; must match the model.
    #[arg(long)]
    variant: Option<PipelineVariant>,
    /// Frames between consecutive windows.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Also write the window-level label stream here.
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Import(a) => import(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Detect(a) => detect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("RFP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| anyhow!("RFP_THREADS must be a positive integer, got {v:?}"))?;
    ensure!(n > 0, "RFP_THREADS must be a positive integer, got {v:?}");
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn split_kv(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!("expected KEY=VALUE, got {s:?}"))
}

fn parse_schedule(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once('-').ok_or_else(|| anyhow!("bad interval {p:?}, expected START-END"))?;
            let (a, b): (f64, f64) = (a.trim().parse()?, b.trim().parse()?);
            ensure!(a < b, "empty interval {p:?}");
            Ok((a, b))
        })
        .collect()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SimConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = split_kv(kv)?;
        cfg.set(k, v).map_err(|e| anyhow!(e))?;
    }
    if let Some(v) = a.interval_ms {
        cfg.interval_ms = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    cfg.validate()?;

    if a.stream {
        let parent = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ensure!(parent.is_dir(), "output directory {} does not exist", parent.display());
        let scene = Scene::random(&cfg, a.day.clone(), cfg.seed)?;
        let stream = match (&a.schedule, a.label) {
            (Some(s), _) => scene.scheduled_stream(cfg.frames, &parse_schedule(s)?, 1)?,
            (None, Some(l)) => scene.stream(l.into(), cfg.frames, 1)?,
            (None, None) => scene.scheduled_stream(cfg.frames, &[], 1)?,
        };
        let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let mut w = CsiWriter::new(BufWriter::new(file));
        w.begin_stream(&stream.header().clone(), Some(u32::try_from(cfg.frames)?))?;
        for f in stream {
            w.write_frame(&f)?;
        }
        w.finish()?.flush()?;
        let mut replay = format!("rfp simulate --stream --day {}", a.day);
        if let Some(s) = &a.schedule {
            let _ = write!(replay, " --schedule {s}");
        }
        if let Some(l) = a.label {
            let _ = write!(replay, " --label {}", l.to_possible_value().expect("no skipped values").get_name());
        }
        write_sidecar(&sidecar_path(&a.out), &replay, &cfg)?;
        eprintln!("wrote {} frames to {}", cfg.frames, a.out.display());
    } else {
        ensure!(a.out.is_dir(), "output directory {} does not exist", a.out.display());
        let spec = DatasetSpec {
            scenes: a.scenes,
            windows_per_label: a.windows,
            window_len: a.window_len,
            sim: cfg.clone(),
        };
        let files = gen_dataset(&spec, cfg.seed, &a.out)?;
        let replay = format!(
            "rfp simulate --scenes {} --windows {} --window-len {}",
            a.scenes, a.windows, a.window_len
        );
        write_sidecar(&a.out.join("simulate.manifest"), &replay, &cfg)?;
        for f in &files {
            println!("{}", f.display());
        }
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Simulator config plus the command that replays it.
fn write_sidecar(path: &Path, replay: &str, cfg: &SimConfig) -> Result<()> {
    let text = format!("# {replay} --config {}\n{}", path.display(), cfg.to_text());
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn import(a: ImportArgs) -> Result<()> {
    let input: Box<dyn BufRead> = if a.input.as_os_str() == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(
            File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?,
        ))
    };
    let out = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (h, n) = import_jsonl(input, BufWriter::new(out)).with_context(|| format!("importing {}", a.input.display()))?;
    eprintln!(
        "imported {n} frames ({}x{}x{}, day {:?}) into {}",
        h.n_sc,
        h.n_r,
        h.n_t,
        h.day_id,
        a.out.display()
    );
    Ok(())
}

/// Header of the first segment of a stream file.
fn first_header(path: &Path) -> Result<StreamHeader> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    match CsiReader::new(BufReader::new(f)).next() {
        Some(Ok(Record::Header(h))) => Ok(h),
        Some(Err(e)) => Err(anyhow!(e)).with_context(|| format!("reading {}", path.display())),
        _ => bail!("{} holds no stream", path.display()),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut m = match &a.manifest {
        Some(p) => RunManifest::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("in {}", p.display()))?,
        None => RunManifest::default(),
    };
    for kv in &a.set {
        let (k, v) = split_kv(kv)?;
        m.set(k, v).map_err(|e| anyhow!(e))?;
    }
    m.train_files.extend(a.train_files);
    m.test_files.extend(a.test_files);
    if let Some(v) = a.variant {
        m.build.variant = v;
    }
    if let Some(v) = a.seed {
        m.train.seed = v;
    }
    if let Some(v) = a.epochs {
        m.train.epochs = v;
    }
    if let Some(v) = a.lr {
        m.train.adam.lr = v;
    }
    if let Some(v) = a.batch {
        m.train.batch = v;
    }
    ensure!(!m.train_files.is_empty(), "no training files (use --train or a manifest)");

    let train_ds = build_dataset(&m.train_files, &m.build)?;
    let test_ds = if m.test_files.is_empty() {
        Dataset::empty(m.build.variant)
    } else {
        build_dataset(&m.test_files, &m.build)?
    };
    let (train_days, test_days) = (train_ds.days.clone(), test_ds.days.clone());
    let ds = train_ds.concat(test_ds)?;
    let split = Split::by_days(&ds, &train_days, &test_days, m.val_fraction, m.train.seed)?;

    let h = first_header(&m.train_files[0])?;
    let geometry = InputGeometry {
        len: m.build.window.len,
        n_f: m.build.window.n_f,
        n_r: h.n_r,
        n_t: h.n_t,
        crop: m.build.crop,
    };
    let (net, report) = train(&ds, &split, ModelSpec::reference(m.build.variant, geometry), &m.train)?;
    save_model(&a.model, &net, &m.to_text()).with_context(|| format!("writing {}", a.model.display()))?;

    let report_path = a.report.unwrap_or_else(|| suffixed(&a.model, ".report.txt"));
    let records_path = a.records.unwrap_or_else(|| suffixed(&a.model, ".records.txt"));
    let mut table = report.table();
    if !ds.rejected.is_empty() {
        let _ = writeln!(table, "rejected windows: {:?}", ds.rejected);
    }
    fs::write(&report_path, &table).with_context(|| format!("writing {}", report_path.display()))?;
    fs::write(&records_path, report.records()).with_context(|| format!("writing {}", records_path.display()))?;
    print!("{table}");
    Ok(())
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// The manifest a model was trained with, or defaults for its variant.
fn model_manifest(net: &Network, metadata: &str) -> RunManifest {
    let mut m = RunManifest::parse(metadata).unwrap_or_default();
    m.build.variant = net.variant();
    m
}

fn load(path: &Path) -> Result<(Network, String)> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (net, metadata) = load(&a.model)?;
    let m = model_manifest(&net, &metadata);
    let ds = build_dataset(&a.data, &m.build)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let ev = evaluate(&net, &ds, &idx)?;

    let mut table = format!(
        "{:<12} {:>6} {:>6} {:>6} {:>6}  {:>8} {:>8} {:>8}\n",
        "day", "tp", "fp", "tn", "fn", "accuracy", "fpr", "fnr"
    );
    let mut records = String::new();
    let rows = ev
        .per_day
        .iter()
        .map(|d| ("day", d.day.as_str(), d.confusion))
        .chain([("overall", "all", ev.overall)]);
    for (kind, day, c) in rows {
        table.push_str(&confusion_row(day, &c));
        let _ = writeln!(
            records,
            "{kind} day={day} tp={} fp={} tn={} fn={} acc={:.6} fpr={:.6} fnr={:.6}",
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            c.accuracy(),
            c.fpr(),
            c.fnr()
        );
    }
    print!("{table}");
    if let Some(p) = &a.out {
        fs::write(p, &records).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.dump {
        let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
        for i in 0..ds.len() {
            ds.input(i).write_dump(&mut w)?;
        }
        w.flush()?;
        eprintln!("dumped {} windows to {}", ds.len(), p.display());
    }
    Ok(())
}

fn confusion_row(day: &str, c: &Confusion) -> String {
    format!(
        "{:<12} {:>6} {:>6} {:>6} {:>6}  {:>8.4} {:>8.4} {:>8.4}\n",
        day,
        c.tp,
        c.fp,
        c.tn,
        c.fn_,
        c.accuracy(),
        c.fpr(),
        c.fnr()
    )
}

fn detect(a: DetectArgs) -> Result<()> {
    let (net, metadata) = load(&a.model)?;
    let m = model_manifest(&net, &metadata);
    let cfg = DetectorConfig {
        window: m.build.window,
        crop: m.build.crop,
        stride: a.stride,
        variant: a.variant,
        ..DetectorConfig::default()
    };
    let (input, source): (Box<dyn Read>, String) = match &a.stream {
        Some(p) => (
            Box::new(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?)),
            p.display().to_string(),
        ),
        None => (Box::new(io::stdin().lock()), "stdin".into()),
    };
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(
        out,
        "# rfp detect --model {} --stride {} (variant {}, seed {})",
        a.model.display(),
        a.stride,
        net.variant(),
        m.train.seed
    )?;
    let mut io_err = None;
    let timeline = run_detection_records(&net, CsiReader::new(input), &cfg, |r| {
        if io_err.is_none() {
            if let Err(e) = out.write_all(format_record(r).as_bytes()).and_then(|_| out.flush()) {
                io_err = Some(e);
            }
        }
    })
    .with_context(|| format!("detecting on {source}"))?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    out.flush()?;
    if let Some(p) = &a.labels {
        let mut text = String::new();
        for e in &timeline.labels {
            let _ = writeln!(text, "{},{}", e.timestamp_us, e.label.as_u8());
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "{} seconds, {} positive, {} windows classified, rejected {:?}",
        timeline.records.len(),
        timeline.positive_seconds().len(),
        timeline.labels.len(),
        timeline.rejected
    );
    Ok(())
}
