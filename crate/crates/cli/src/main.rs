use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trikd::data::{self, netpbm, Dataset, GenSpec, Sample};
use trikd::decoder;
use trikd::gradsuite;
use trikd::train::{self, checkpoint, RunOptions, TrainConfig};
use trikd::{Error, Tensor};

#[derive(Parser)]
#[command(name = "trikd", version, about = "Triple-view semi-supervised segmentation on synthetic scenes")]
#[command(after_help = TrainConfig::help())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset on disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 320)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Labeled fraction, e.g. 1/8. Overrides `label_ratio` from --config.
        #[arg(long)]
        ratio: Option<String>,
        /// Training config whose `label_ratio` sets the split.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the three views and write metrics, checkpoints and the final evaluation.
    #[command(after_help = TrainConfig::help())]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// semi or supervised; overrides the config.
        #[arg(long)]
        mode: Option<String>,
        /// Config override `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Resume from a checkpoint; its config is used unless --config is given.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// One run per value, `key=v1,v2,...`, each in `<out>/<key>=<v>`.
        #[arg(long, value_name = "KEY=V1,V2,...")]
        sweep: Option<String>,
        /// Stop once the step counter reaches this value, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Print every metrics row.
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint's hybrid view on held-out samples of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Segment one image with the hybrid view.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 input image.
        #[arg(long)]
        image: PathBuf,
        /// P5 output of per-pixel class indices.
        #[arg(long)]
        out: PathBuf,
        /// Color-coded P6 visualization.
        #[arg(long)]
        viz: Option<PathBuf>,
        /// Directory for filter masks and channel scores as CSV.
        #[arg(long)]
        gates: Option<PathBuf>,
    },
    /// Finite-difference check of the registered backward passes.
    Gradcheck {
        /// Op name or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

/// Fixed visualization colors; class 0 is black.
pub const PALETTE: [[u8; 3]; 6] = [[0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48]];

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> trikd::Result<ExitCode> {
    match cmd {
        Cmd::GenData { out, count, classes, size, seed, ratio, config, force } => {
            gen_data(&out, count, classes, size, seed, ratio, config, force)?
        }
        Cmd::Train { config, data, out, mode, set, resume, sweep, stop_after, verbose } => {
            let mut cfg = match (&config, &resume) {
                (Some(p), _) => TrainConfig::parse_text(&read_text(p)?)?,
                (None, Some(ck)) => TrainConfig::parse_text(&checkpoint::load(ck)?.0)?,
                (None, None) => TrainConfig::default(),
            };
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config { key: kv.clone(), detail: "expected key=value".into() })?;
                cfg.set(k.trim(), v)?;
            }
            cfg.validate()?;
            let ds = Dataset::load(&data)?;
            match sweep {
                Some(s) => {
                    if resume.is_some() {
                        return Err(Error::Invalid("--sweep cannot be combined with --resume".into()));
                    }
                    sweep_runs(&cfg, &ds, &out, &s, verbose)?
                }
                None => {
                    let state = match resume {
                        Some(p) => Some(checkpoint::load(&p)?.1),
                        None => None,
                    };
                    let eval = train_once(&cfg, &ds, state, &out, stop_after, verbose)?;
                    println!("miou {}", eval.miou);
                }
            }
        }
        Cmd::Eval { checkpoint: ck, data } => {
            let (text, state) = checkpoint::load(&ck)?;
            let (cfg, model) = train::model_from_checkpoint(&text, &state)?;
            let ds = Dataset::load(&data)?;
            if ds.spec.classes != model.classes || ds.spec.size != model.image_size {
                return Err(Error::Invalid(format!(
                    "dataset has {} classes at {}px, checkpoint expects {} at {}px",
                    ds.spec.classes, ds.spec.size, model.classes, model.image_size
                )));
            }
            let r = train::evaluate(&state.store, &model, &ds.held_out(cfg.eval_count))?;
            print!("{}", train::eval_text(&r));
        }
        Cmd::Infer { checkpoint: ck, image, out, viz, gates } => infer(&ck, &image, &out, viz.as_deref(), gates.as_deref())?,
        Cmd::Gradcheck { op, seeds } => return gradcheck(&op, seeds),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_text(p: &Path) -> trikd::Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io { context: format!("reading {}", p.display()), source: e })
}

fn write_bytes(p: &Path, bytes: &[u8]) -> trikd::Result<()> {
    fs::write(p, bytes).map_err(|e| Error::Io { context: format!("writing {}", p.display()), source: e })
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    count: usize,
    classes: usize,
    size: usize,
    seed: u64,
    ratio: Option<String>,
    config: Option<PathBuf>,
    force: bool,
) -> trikd::Result<()> {
    if size % 32 != 0 {
        return Err(Error::Config { key: "size".into(), detail: format!("{size} is not divisible by 32") });
    }
    let ratio = match (ratio, config) {
        (Some(r), _) => data::parse_ratio(&r)?,
        (None, Some(p)) => TrainConfig::parse_text(&read_text(&p)?)?.label_ratio.unwrap_or(0.125),
        (None, None) => 0.125,
    };
    let non_empty = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
        }
        fs::remove_dir_all(out).map_err(|e| Error::Io { context: format!("clearing {}", out.display()), source: e })?;
    }
    let spec = GenSpec { size, classes, ..GenSpec::default() };
    let ds = Dataset::generate(&spec, count, ratio, seed)?;
    ds.save(out)?;
    println!("{} samples, {} labeled, {} unlabeled", count, ds.split.labeled.len(), ds.split.unlabeled.len());
    let hist = ds.class_histogram();
    let total: usize = hist.iter().sum();
    for (c, n) in hist.iter().enumerate() {
        println!("{:<10} {:>9} px {:>6.2}%", data::synth::class_name(c), n, 100.0 * *n as f64 / total.max(1) as f64);
    }
    Ok(())
}

fn train_once(
    cfg: &TrainConfig,
    ds: &Dataset,
    state: Option<checkpoint::TrainState>,
    out: &Path,
    stop_after: Option<u64>,
    verbose: bool,
) -> trikd::Result<train::EvalReport> {
    fs::create_dir_all(out).map_err(|e| Error::Io { context: format!("creating {}", out.display()), source: e })?;
    let opts = RunOptions { out: Some(out), stop_after };
    let mut log = |row: &str| {
        if verbose || !row.ends_with(',') {
            println!("{row}");
        }
    };
    let (_, summary) = train::run(cfg, ds, state, opts, &mut log)?;
    Ok(summary.eval)
}

fn sweep_runs(base: &TrainConfig, ds: &Dataset, out: &Path, spec: &str, verbose: bool) -> trikd::Result<()> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config { key: spec.into(), detail: "sweep expects key=v1,v2,...".into() })?;
    let key = key.trim();
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config { key: key.into(), detail: "sweep has no values".into() });
    }
    let mut cfgs = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = base.clone();
        c.set(key, v)?;
        c.validate()?;
        cfgs.push(c);
    }
    let mut table = format!("{key},miou\n");
    for (v, c) in values.iter().zip(&cfgs) {
        println!("{key}={v}");
        let r = train_once(c, ds, None, &out.join(format!("{key}={v}")), None, verbose)?;
        let _ = writeln!(table, "{v},{}", r.miou);
    }
    write_bytes(&out.join("sweep.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn infer(ck: &Path, image: &Path, out: &Path, viz: Option<&Path>, gates: Option<&Path>) -> trikd::Result<()> {
    let (text, state) = checkpoint::load(ck)?;
    let (_, model) = train::model_from_checkpoint(&text, &state)?;
    let img = netpbm::read_file(image)?;
    if img.channels != 3 {
        return Err(Error::Data(format!("{} is not a color (P6) image", image.display())));
    }
    if img.width != model.image_size || img.height != model.image_size {
        return Err(Error::Invalid(format!(
            "image is {}x{}, checkpoint expects {}x{}",
            img.width, img.height, model.image_size, model.image_size
        )));
    }
    let hw = img.width * img.height;
    let pixels = Tensor::from_fn(&[3, img.height, img.width], |i| {
        let (c, p) = (i / hw, i % hw);
        img.data[3 * p + c] as f64 / 255.0
    });
    let sample = Sample { id: 0, image: pixels, label: vec![0; hw] };
    let pred = train::predict(&state.store, &model, &[&sample])?;

    let gray: Vec<u8> = pred.labels.iter().map(|&l| l as u8).collect();
    let mut buf = Vec::new();
    netpbm::write_pgm(&mut buf, img.width, img.height, &gray)?;
    write_bytes(out, &buf)?;
    if let Some(v) = viz {
        let rgb: Vec<u8> = pred.labels.iter().flat_map(|&l| PALETTE[l % PALETTE.len()]).collect();
        let mut buf = Vec::new();
        netpbm::write_ppm(&mut buf, img.width, img.height, &rgb)?;
        write_bytes(v, &buf)?;
    }
    if let Some(dir) = gates {
        fs::create_dir_all(dir).map_err(|e| Error::Io { context: format!("creating {}", dir.display()), source: e })?;
        for s in 0..3 {
            let e = model.stage_extent(s);
            let mask = decoder::stage_mask(&model, s, e, e)?;
            write_bytes(&dir.join(format!("gate{}_mask.csv", s + 1)), decoder::mask_csv(&mask).as_bytes())?;
            write_bytes(&dir.join(format!("gate{}_scores.csv", s + 1)), decoder::scores_csv(&pred.scores[s]).as_bytes())?;
        }
    }
    Ok(())
}

fn gradcheck(op: &str, seeds: u64) -> trikd::Result<ExitCode> {
    let names: Vec<&str> = if op == "all" { gradsuite::all_names() } else { vec![op] };
    let mut failed = 0;
    for name in &names {
        let err = gradsuite::check(name, 0..seeds)?;
        let ok = err <= gradsuite::TOLERANCE;
        if !ok {
            failed += 1;
        }
        println!("{} {name} max_rel_err={err:.3e}", if ok { "PASS" } else { "FAIL" });
    }
    println!("{} of {} ops passed", names.len() - failed, names.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
