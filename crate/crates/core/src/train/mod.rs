//! Optimization loop, evaluation and hybrid-only inference.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::ModelConfig;
use crate::data::augment::{augment, AugmentSpec};
use crate::data::synth::sample_rng;
use crate::data::{Dataset, Sample};
use crate::decoder::ProbMap;
use crate::losses::{self, LossParts, LossReport, Mode};
use crate::model::{self, model_specs};
use crate::nn::{Bound, ParamStore};
use crate::{Error, Graph, Result, Tensor};

pub use checkpoint::TrainState;
pub use config::TrainConfig;
pub use metrics::{Confusion, EvalReport};

/// Stream offsets keeping batch order and augmentation draws independent.
const LABELED_STREAM: u64 = 1 << 40;
const UNLABELED_STREAM: u64 = 2 << 40;
const AUGMENT_STREAM: u64 = 3 << 40;

/// Model configuration implied by a training config and a class count.
pub fn model_config(cfg: &TrainConfig, classes: usize) -> Result<ModelConfig> {
    let mut m = ModelConfig::preset(cfg.preset, classes);
    m.filter_d0 = cfg.filter_d0;
    m.validate()?;
    Ok(m)
}

/// Stacks `[3, H, W]` images into `[B, 3, H, W]`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Invalid(format!("batch mixes image shapes {:?} and {:?}", shape, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    Ok(Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?)
}

/// One optimization step on a labeled and (semi mode) an unlabeled batch.
///
/// Both batches go through one forward pass. Segmentation loss uses the
/// labeled part, CPS the unlabeled part and distillation all samples.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    cfg: &TrainConfig,
    lr: f64,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
) -> Result<LossReport> {
    if labeled.is_empty() {
        return Err(Error::Invalid("train_step: empty labeled batch".into()));
    }
    match cfg.mode {
        Mode::Semi if unlabeled.is_empty() => {
            return Err(Error::Invalid("train_step: semi mode needs unlabeled samples".into()))
        }
        Mode::Supervised if !unlabeled.is_empty() => {
            return Err(Error::Invalid("train_step: supervised mode takes no unlabeled samples".into()))
        }
        _ => {}
    }
    let labels: Vec<usize> = labeled.iter().flat_map(|s| s.label.iter().copied()).collect();
    losses::check_labels(&labels, model.classes)?;
    let (nl, nu) = (labeled.len(), unlabeled.len());
    let all: Vec<&Sample> = labeled.iter().chain(unlabeled).copied().collect();

    let mut g = Graph::new();
    let x = g.input(stack_images(&all)?);
    let mut b = Bound::new(&state.store, true);
    let out = model::forward_all(&mut g, &mut b, model, x)?;

    let mut seg = Vec::with_capacity(3);
    for p in &out.probs {
        let lp = g.narrow(p.log_probs, 0, 0, nl)?;
        seg.push(losses::seg_ce(&mut g, ProbMap { log_probs: lp }, &labels)?);
    }
    let cps = if cfg.mode == Mode::Semi {
        let mut u = [out.probs[0]; 3];
        for (i, p) in out.probs.iter().enumerate() {
            u[i] = ProbMap { log_probs: g.narrow(p.log_probs, 0, nl, nu)? };
        }
        Some(losses::cps_losses(&mut g, u)?)
    } else {
        None
    };
    let (f1_cnn, att_vit) = if cfg.freeze_teachers {
        (g.detach(out.f1_cnn), g.detach(out.att_vit))
    } else {
        (out.f1_cnn, out.att_vit)
    };
    let spa = losses::spatial_loss(&mut g, f1_cnn, out.f1_proj)?;
    let att = losses::attention_loss(&mut g, att_vit, out.att_hyb)?;
    let parts = LossParts { seg: [seg[0], seg[1], seg[2]], cps, spa, att };
    let total = losses::total_loss(&mut g, &parts, &cfg.weights, cfg.mode)?;

    let item = |g: &Graph, v| g.value(v).item();
    let report = LossReport {
        seg: [item(&g, seg[0]), item(&g, seg[1]), item(&g, seg[2])],
        cps: cps.map_or([0.0; 3], |c| [item(&g, c[0]), item(&g, c[1]), item(&g, c[2])]),
        spa: item(&g, spa),
        att: item(&g, att),
        total: item(&g, total),
    };
    for (name, v) in [("total loss", report.total), ("spatial loss", report.spa), ("attention loss", report.att)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} is {v} at step {}", state.step + 1)));
        }
    }

    g.backward(total)?;
    let stats = b.take_stats();
    let vars = b.vars().clone();
    drop(b);
    for (name, v) in &vars {
        let grad = match g.grad(*v) {
            Some(gr) => gr,
            None => continue,
        };
        if let Some(i) = grad.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] at step {}", state.step + 1)));
        }
        let param = state.store.get_mut(name).expect("bound parameter exists");
        let vel = state.momentum.entry(name.clone()).or_insert_with(|| Tensor::zeros(param.shape()));
        optim::sgd_step(param, grad, vel, lr, cfg.momentum, cfg.weight_decay)?;
        if !param.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after step {}", state.step + 1)));
        }
    }
    state.store.update_running(&stats);
    state.step += 1;
    Ok(report)
}

/// Per-pixel classes and gate scores of the hybrid view.
pub struct Prediction {
    /// `[B·H·W]` class indices.
    pub labels: Vec<usize>,
    /// Channel scores `[B, C_s]` of the three decoder gates.
    pub scores: [Tensor; 3],
}

/// Runs only the hybrid encoder and its decoder with running statistics.
pub fn predict(store: &ParamStore, model: &ModelConfig, samples: &[&Sample]) -> Result<Prediction> {
    let x = stack_images(samples)?;
    let s = x.shape();
    if s[2] != model.image_size || s[3] != model.image_size {
        return Err(Error::Invalid(format!(
            "image is {}x{}, model expects {}x{}",
            s[3], s[2], model.image_size, model.image_size
        )));
    }
    let mut g = Graph::new();
    let xv = g.input(x);
    let mut b = Bound::new(store, false);
    let out = model::forward_hybrid(&mut g, &mut b, model, xv)?;
    let labels = g.value(out.probs.log_probs).argmax(1)?.1;
    let scores = out.scores.map(|v| g.value(v).clone());
    Ok(Prediction { labels, scores })
}

/// Rebuilds the model configuration a checkpoint was trained with; the
/// class count comes from the hybrid head.
pub fn model_from_checkpoint(cfg_text: &str, state: &TrainState) -> Result<(TrainConfig, ModelConfig)> {
    let cfg = TrainConfig::parse_text(cfg_text)?;
    let head = format!("{}.head.weight", model::decoder_name(crate::encoders::HYB));
    let classes = state
        .store
        .get(&head)
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {head}")))?
        .shape()[0];
    let model = model_config(&cfg, classes)?;
    checkpoint::validate(state, &model_specs(&model))?;
    Ok((cfg, model))
}

/// Hybrid-only mIoU over `samples`.
pub fn evaluate(store: &ParamStore, model: &ModelConfig, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("evaluate: empty evaluation set".into()));
    }
    let mut conf = Confusion::new(model.classes);
    for chunk in samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let pred = predict(store, model, &refs)?;
        let truth: Vec<usize> = chunk.iter().flat_map(|s| s.label.iter().copied()).collect();
        conf.add(&pred.labels, &truth)?;
    }
    conf.report()
}

/// Step counts derived from the labeled set size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total: usize,
}

pub fn schedule(cfg: &TrainConfig, n_labeled: usize) -> Schedule {
    let steps_per_epoch = n_labeled.div_ceil(cfg.batch).max(1);
    let total = if cfg.max_steps > 0 { cfg.max_steps } else { cfg.epochs * steps_per_epoch };
    Schedule { steps_per_epoch, total }
}

/// Labeled indices for `step`: a fresh permutation every epoch.
pub fn labeled_batch(indices: &[usize], batch: usize, seed: u64, step: usize, sched: Schedule) -> Vec<usize> {
    let (epoch, pos) = (step / sched.steps_per_epoch, step % sched.steps_per_epoch);
    let mut perm = indices.to_vec();
    perm.shuffle(&mut sample_rng(seed, LABELED_STREAM + epoch as u64));
    let start = (pos * batch).min(perm.len());
    perm[start..(start + batch).min(perm.len())].to_vec()
}

/// Unlabeled indices for `step`, cycling through fresh permutations.
pub fn unlabeled_batch(indices: &[usize], batch: usize, seed: u64, step: usize) -> Vec<usize> {
    if indices.is_empty() {
        return Vec::new();
    }
    let n = indices.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|j| {
            let k = step * batch + j;
            let cycle = k / n;
            if cached.as_ref().map(|c| c.0) != Some(cycle) {
                let mut perm = indices.to_vec();
                perm.shuffle(&mut sample_rng(seed, UNLABELED_STREAM + cycle as u64));
                cached = Some((cycle, perm));
            }
            cached.as_ref().expect("filled").1[k % n]
        })
        .collect()
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct RunSummary {
    pub eval: EvalReport,
    /// Rows written by this invocation (header included on fresh runs).
    pub csv: String,
    pub reports: Vec<LossReport>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.txt";

pub fn eval_text(r: &EvalReport) -> String {
    let mut s = format!("miou = {}\n", r.miou);
    for (c, (iou, px)) in r.iou.iter().zip(&r.pixels).enumerate() {
        let v = iou.map_or("n/a".to_string(), |v| v.to_string());
        s.push_str(&format!("class {c} ({}) iou = {v} pixels = {px}\n", crate::data::synth::class_name(c)));
    }
    s
}

/// Where a run writes and when it stops.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Directory for the metrics CSV, checkpoints and the final evaluation.
    pub out: Option<&'a Path>,
    /// Stop (with a checkpoint) once the step counter reaches this value.
    pub stop_after: Option<u64>,
}

/// Trains on `data`, resuming from `resume` when given.
pub fn run(
    cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<TrainState>,
    opts: RunOptions,
    log: &mut dyn FnMut(&str),
) -> Result<(TrainState, RunSummary)> {
    let out = opts.out;
    cfg.validate()?;
    let model = model_config(cfg, data.spec.classes)?;
    if data.spec.size != model.image_size {
        return Err(Error::Data(format!(
            "dataset images are {0}x{0}, preset {1} expects {2}x{2}",
            data.spec.size, cfg.preset, model.image_size
        )));
    }
    let (nl, n) = (data.split.labeled.len(), data.samples.len());
    if let Some(r) = cfg.label_ratio {
        if (r * n as f64).round() as usize != nl {
            return Err(Error::Config {
                key: "label_ratio".into(),
                detail: format!("{r} implies {} labeled of {n}, manifest has {nl}", (r * n as f64).round()),
            });
        }
    }
    if nl == 0 {
        return Err(Error::Data("dataset has no labeled samples".into()));
    }
    if cfg.mode == Mode::Semi && data.split.unlabeled.is_empty() {
        return Err(Error::Config { key: "mode".into(), detail: "semi mode needs unlabeled samples".into() });
    }
    let specs = model_specs(&model);
    let mut state = match resume {
        Some(s) => {
            checkpoint::validate(&s, &specs)?;
            s
        }
        None => TrainState::fresh(ParamStore::init(&specs, cfg.seed)),
    };
    let sched = schedule(cfg, nl);
    let eval_set = data.held_out(cfg.eval_count);
    let aug = AugmentSpec::new(model.image_size);
    let cfg_text = cfg.to_text();

    let mut csv = String::new();
    let mut csv_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join(METRICS_FILE);
            let fresh = state.step == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            if fresh {
                writeln!(f, "{}", metrics::CSV_HEADER).map_err(|e| Error::io("writing metrics", e))?;
            }
            Some(f)
        }
        None => None,
    };
    if state.step == 0 {
        csv.push_str(metrics::CSV_HEADER);
        csv.push('\n');
    }
    if state.step as usize > sched.total {
        return Err(Error::Invalid(format!("checkpoint step {} beyond schedule of {} steps", state.step, sched.total)));
    }

    let prepare = |idx: &[usize], step: usize, slot0: usize| -> Vec<Sample> {
        idx.iter()
            .enumerate()
            .map(|(j, &i)| {
                let s = &data.samples[i];
                if cfg.augment {
                    augment(s, &aug, cfg.seed, AUGMENT_STREAM + (step as u64) * 4096 + (slot0 + j) as u64)
                } else {
                    s.clone()
                }
            })
            .collect()
    };

    let mut reports = Vec::new();
    let mut last_eval = None;
    let end = opts.stop_after.map_or(sched.total, |s| (s as usize).min(sched.total));
    while (state.step as usize) < end {
        let step = state.step as usize;
        let lr = optim::poly_lr(step, sched.total, cfg.lr0, cfg.power)?;
        let li = labeled_batch(&data.split.labeled, cfg.batch, cfg.seed, step, sched);
        let ui = match cfg.mode {
            Mode::Semi => unlabeled_batch(&data.split.unlabeled, cfg.unlabeled_batch, cfg.seed, step),
            Mode::Supervised => Vec::new(),
        };
        let lab = prepare(&li, step, 0);
        let unl = prepare(&ui, step, li.len());
        let lr_refs: Vec<&Sample> = lab.iter().collect();
        let ur_refs: Vec<&Sample> = unl.iter().collect();
        let report = train_step(&mut state, &model, cfg, lr, &lr_refs, &ur_refs)?;
        reports.push(report);

        let done = state.step as usize;
        let final_step = done == sched.total;
        let miou = if final_step || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let r = evaluate(&state.store, &model, &eval_set)?;
            let m = r.miou;
            last_eval = Some(r);
            Some(m)
        } else {
            None
        };
        let row = metrics::csv_row(state.step, lr, &report, miou);
        if let Some(f) = csv_file.as_mut() {
            writeln!(f, "{row}").map_err(|e| Error::io("writing metrics", e))?;
        }
        log(&row);
        csv.push_str(&row);
        csv.push('\n');
        if let Some(dir) = out {
            if done == end || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                checkpoint::save(&dir.join(CHECKPOINT_FILE), &cfg_text, &state)?;
            }
        }
    }
    let eval = match last_eval {
        Some(r) => r,
        None => evaluate(&state.store, &model, &eval_set)?,
    };
    if let Some(dir) = out {
        let p = dir.join(EVAL_FILE);
        fs::write(&p, eval_text(&eval)).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    }
    Ok((state, RunSummary { eval, csv, reports }))
}
