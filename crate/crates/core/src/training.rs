//! Dual-stage supervision and the optimisation loop.
//!
//! The objective averages the two symmetric contrastive losses over global
//! features with the two focused-view cross-entropies over fusion logits.
//! One extra calibration term, kept out of [`LossReport`], fits each fusion
//! network's delta scale so that `s' + scale · logits` ranks the true
//! candidate first; it sees only detached inputs and moves nothing else.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::config::{Batching, RunConfig, TrainConfig};
use crate::data::{generate_synthetic_pairs, PairedDataset, SyntheticSpec};
use crate::encoders::{encode_text_on, encode_video_on, EncodedVars, TextSequence, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::Direction;
use crate::model::{Model, LOG_TAU};
use crate::numeric::{check_gradients, DenseArray, GradCheckReport, Group, ParameterSet, RngStream, Tape, Var};
use crate::retrieval::top_k_indices;

/// The four supervision terms and their combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub t2v: f64,
    pub v2t: f64,
    pub focus_t: f64,
    pub focus_v: f64,
    pub combined: f64,
}

impl LossReport {
    pub const CSV_COLUMNS: &'static str = "l_t2v,l_v2t,l_focus_t,l_focus_v,combined";

    pub fn new(t2v: f64, v2t: f64, focus_t: f64, focus_v: f64) -> Self {
        Self {
            t2v,
            v2t,
            focus_t,
            focus_v,
            combined: combined_loss(t2v, v2t, focus_t, focus_v),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.t2v, self.v2t, self.focus_t, self.focus_v, self.combined]
            .iter()
            .all(|x| x.is_finite())
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.t2v, self.v2t, self.focus_t, self.focus_v, self.combined
        )
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let bits = |r: &Self| [r.t2v, r.v2t, r.focus_t, r.focus_v, r.combined].map(f64::to_bits);
        bits(self) == bits(other)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport::new(avg(|r| r.t2v), avg(|r| r.v2t), avg(|r| r.focus_t), avg(|r| r.focus_v)))
    }
}

/// `(ℓ_{t→v} + ℓ_{v→t}) / 2 + (ℓ_{focus,v} + ℓ_{focus,t}) / 2`.
pub fn combined_loss(t2v: f64, v2t: f64, focus_t: f64, focus_v: f64) -> f64 {
    (t2v + v2t) / 2.0 + (focus_v + focus_t) / 2.0
}

/// InfoNCE over `S = T·Vᵀ · inv_tau`: rows for t2v, columns for v2t.
pub fn contrastive_on(tape: &mut Tape, text: Var, video: Var, inv_tau: Var, direction: Direction) -> Result<Var> {
    let (b, c) = tape.shape(text);
    if tape.shape(video) != (b, c) {
        return Err(Error::dim(format!(
            "text globals {:?} vs video globals {:?}",
            (b, c),
            tape.shape(video)
        )));
    }
    if b < 2 {
        return Err(Error::input(format!("contrastive loss needs B >= 2, got {b}")));
    }
    let s = tape.matmul_t(text, video)?;
    let s = tape.scale_by(s, inv_tau)?;
    let s = match direction {
        Direction::TextToVideo => s,
        Direction::VideoToText => tape.transpose(s),
    };
    let targets: Vec<usize> = (0..b).collect();
    tape.cross_entropy_rows(s, &targets)
}

/// Symmetric contrastive loss for one direction over `B × C` unit rows.
pub fn contrastive_loss(
    text_globals: &DenseArray,
    video_globals: &DenseArray,
    tau: f64,
    direction: Direction,
) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("temperature must be a positive finite number, got {tau}")));
    }
    let mut tape = Tape::new();
    let t = tape.constant(text_globals.clone());
    let v = tape.constant(video_globals.clone());
    let inv = tape.constant(DenseArray::scalar(1.0 / tau));
    let l = contrastive_on(&mut tape, t, v, inv, direction)?;
    Ok(tape.value(l).item())
}

/// `−log softmax(logits)[true_position]`.
pub fn focused_ce_loss(logits: &[f64], true_position: usize) -> Result<f64> {
    if true_position >= logits.len() {
        return Err(Error::Usage(format!(
            "true position {true_position} outside 0..{}",
            logits.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(DenseArray::vector(logits.to_vec()));
    let l = tape.cross_entropy_rows(x, &[true_position])?;
    Ok(tape.value(l).item())
}

/// Top-`k` in-batch candidates by stage-1 score with the true item forced in
/// (replacing the last candidate when absent). Returns the candidate indices
/// and the true item's position among them.
pub fn training_candidates(scores: &[f64], truth: usize, k: usize) -> Result<(Vec<usize>, usize)> {
    if truth >= scores.len() {
        return Err(Error::Usage(format!("truth {truth} outside batch of {}", scores.len())));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!("k_train {k} outside 1..={}", scores.len())));
    }
    let mut cands = top_k_indices(scores, k);
    let pos = match cands.iter().position(|&c| c == truth) {
        Some(p) => p,
        None => {
            cands[k - 1] = truth;
            k - 1
        }
    };
    Ok((cands, pos))
}

/// Aligned text/video pairs for one step.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub texts: Vec<&'a TextSequence>,
    pub videos: Vec<&'a VideoClip>,
}

impl<'a> Batch<'a> {
    pub fn from_dataset(ds: &'a PairedDataset, idx: &[usize]) -> Self {
        Self {
            texts: idx.iter().map(|&i| &ds.texts[i]).collect(),
            videos: idx.iter().map(|&i| &ds.videos[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Tape handles of one batch objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub t2v: Var,
    pub v2t: Var,
    pub focus_t: Option<Var>,
    pub focus_v: Option<Var>,
    /// Combined loss of the four terms.
    pub combined: Var,
    /// Delta-scale calibration terms, summed.
    pub calibration: Option<Var>,
    /// `combined + calibration`: what the optimiser descends.
    pub total: Var,
}

impl ObjectiveVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossReport::new(v(Some(self.t2v)), v(Some(self.v2t)), v(self.focus_t), v(self.focus_v))
    }
}

struct FocusTerms {
    ce: Var,
    calibration: Var,
}

/// One direction of focused supervision: every query re-ranks `k_train`
/// in-batch candidates of the other modality.
#[allow(clippy::too_many_arguments)]
fn focus_direction(
    tape: &mut Tape,
    model: &Model,
    params: &ParameterSet,
    direction: Direction,
    queries: &[EncodedVars],
    gallery: &[EncodedVars],
    stage1: &DenseArray,
    inv_tau: f64,
    rng: RngStream,
) -> Result<FocusTerms> {
    let cfg = &model.config;
    let net = model.fusion(direction);
    let k_train = cfg.k_train().min(queries.len());
    let mut logit_rows = Vec::with_capacity(queries.len());
    let mut cal_rows = Vec::with_capacity(queries.len());
    let mut targets = Vec::with_capacity(queries.len());
    let scale = tape.param(params, &format!("{}.delta_scale", net.prefix))?;
    for (q, enc) in queries.iter().enumerate() {
        let focus = enc.focus.ok_or_else(|| Error::Usage("focused loss without indicators".into()))?;
        let (cands, pos) = training_candidates(stage1.row(q), q, k_train)?;
        let locals: Vec<Var> = cands.iter().map(|&c| gallery[c].locals).collect();
        let noise = cfg.model.use_gumbel.then(|| rng.fork(q as u64));
        let fused = net.fuse_on(tape, params, focus, &locals, noise)?;
        let (logits, _) = net.project_on(tape, params, fused, cands.len())?;
        let fixed = tape.detach(logits);
        let mut z = tape.scale_by(fixed, scale)?;
        if net.add_stage1_scores {
            let s1 = DenseArray::vector(cands.iter().map(|&c| stage1.row(q)[c]).collect());
            z = tape.add_const(z, &s1)?;
        }
        cal_rows.push(tape.scale(z, inv_tau));
        logit_rows.push(logits);
        targets.push(pos);
    }
    let logits = tape.concat_rows(&logit_rows)?;
    let ce = tape.cross_entropy_rows(logits, &targets)?;
    let cal = tape.concat_rows(&cal_rows)?;
    let calibration = tape.cross_entropy_rows(cal, &targets)?;
    Ok(FocusTerms { ce, calibration })
}

/// Build the full batch objective on `tape`.
///
/// Gumbel noise in the fusion attention is drawn from `rng`.
pub fn batch_objective(
    tape: &mut Tape,
    model: &Model,
    params: &ParameterSet,
    batch: &Batch,
    rng: RngStream,
) -> Result<ObjectiveVars> {
    let cfg = &model.config;
    let b = batch.len();
    if b < 2 || batch.videos.len() != b {
        return Err(Error::input(format!(
            "a batch needs B >= 2 aligned pairs, got {} texts and {} videos",
            b,
            batch.videos.len()
        )));
    }
    let texts = batch
        .texts
        .iter()
        .map(|t| encode_text_on(tape, &cfg.model, params, &t.tokens, t.len()))
        .collect::<Result<Vec<_>>>()?;
    let videos = batch
        .videos
        .iter()
        .map(|v| encode_video_on(tape, &cfg.model, params, v))
        .collect::<Result<Vec<_>>>()?;
    let tg: Vec<Var> = texts.iter().map(|e| e.global).collect();
    let vg: Vec<Var> = videos.iter().map(|e| e.global).collect();
    let t_mat = tape.concat_rows(&tg)?;
    let v_mat = tape.concat_rows(&vg)?;
    let log_tau = tape.param(params, LOG_TAU)?;
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let t2v = contrastive_on(tape, t_mat, v_mat, inv_tau, Direction::TextToVideo)?;
    let v2t = contrastive_on(tape, t_mat, v_mat, inv_tau, Direction::VideoToText)?;

    let broad = tape.add(t2v, v2t)?;
    let mut combined = tape.scale(broad, 0.5);
    let (mut focus_t, mut focus_v, mut calibration) = (None, None, None);
    if cfg.model.use_indicators {
        let sims = tape.value(t_mat).matmul_t(tape.value(v_mat))?;
        let inv = tape.value(inv_tau).item();
        let ft = focus_direction(
            tape,
            model,
            params,
            Direction::TextToVideo,
            &texts,
            &videos,
            &sims,
            inv,
            rng.fork_str("t2v"),
        )?;
        let fv = focus_direction(
            tape,
            model,
            params,
            Direction::VideoToText,
            &videos,
            &texts,
            &sims.transpose(),
            inv,
            rng.fork_str("v2t"),
        )?;
        let focus = tape.add(fv.ce, ft.ce)?;
        let focus = tape.scale(focus, 0.5);
        combined = tape.add(combined, focus)?;
        focus_t = Some(ft.ce);
        focus_v = Some(fv.ce);
        calibration = Some(tape.add(ft.calibration, fv.calibration)?);
    }
    let total = match calibration {
        Some(c) => tape.add(combined, c)?,
        None => combined,
    };
    Ok(ObjectiveVars {
        t2v,
        v2t,
        focus_t,
        focus_v,
        combined,
        calibration,
        total,
    })
}

/// Decoupled-weight-decay Adam with one learning rate per parameter group.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
    steps: u64,
    frozen: BTreeSet<String>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Exclude `name` from every future update.
    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Weight decay applies to matrices only; biases, scalars and the
    /// temperature are left undecayed.
    fn decays(name: &str, value: &DenseArray) -> bool {
        name != LOG_TAU && !name.ends_with(".bias") && value.shape().iter().filter(|&&d| d > 1).count() >= 2
    }

    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, DenseArray>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if self.frozen.contains(name) || (name == LOG_TAU && !cfg.learn_temperature) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.value.len() {
                return Err(Error::dim(format!("gradient for `{name}` has {} entries", g.len())));
            }
            let lr = match p.group {
                Group::Fusion => cfg.lr_fusion,
                Group::Base => cfg.lr_base,
            };
            let decay = if Self::decays(name, &p.value) {
                1.0 - lr * cfg.weight_decay
            } else {
                1.0
            };
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Encode, score, backpropagate and apply one optimiser update.
///
/// `batch_index` labels the diagnostic when the loss or a gradient is not
/// finite; parameters are left untouched in that case.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &Batch,
    rng: RngStream,
    batch_index: usize,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let obj = batch_objective(&mut tape, model, &model.params, batch, rng)?;
    let report = obj.report(&tape);
    if !report.is_finite() || !tape.value(obj.total).is_finite() {
        return Err(Error::NonFinite(format!("batch {batch_index}: {report:?}")));
    }
    let grads = tape.backward(obj.total)?.for_params(&model.params);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("batch {batch_index}: gradient of `{name}` is not finite")));
    }
    opt.step(&mut model.params, &grads, &model.config.train)?;
    Ok(report)
}

/// Batches of one epoch, each a list of dataset indices. Batches smaller than
/// two pairs are dropped.
pub fn epoch_batches(ds: &PairedDataset, cfg: &RunConfig, stream: RngStream) -> Vec<Vec<usize>> {
    let order: Vec<usize> = match cfg.train.batching {
        Batching::Random => stream.permutation(ds.len()),
        Batching::Cohort => {
            let cohorts = ds.cohorts();
            stream
                .fork(0)
                .permutation(cohorts.len())
                .into_iter()
                .flat_map(|c| {
                    let members = &cohorts[c];
                    stream
                        .fork(1 + c as u64)
                        .permutation(members.len())
                        .into_iter()
                        .map(|i| members[i])
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };
    order
        .chunks(cfg.train.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    /// Mean report per epoch.
    pub epochs: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Run `cfg.train.epochs` epochs of [`train_step`] from `model`, writing
/// `epoch-{e}.ckpt` into `checkpoint_dir` after every epoch when given.
pub fn train_loop(dataset: &PairedDataset, mut model: Model, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    if dataset.len() < 2 {
        return Err(Error::input("training needs at least two pairs"));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let root = RngStream::new(model.config.seed).fork_str("train");
    let mut opt = AdamW::new();
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 1..=model.config.train.epochs {
        let batches = epoch_batches(dataset, &model.config, root.fork_str("shuffle").fork(epoch as u64));
        let mut reports = Vec::with_capacity(batches.len());
        for idx in &batches {
            let batch = Batch::from_dataset(dataset, idx);
            let r = train_step(&mut model, &mut opt, &batch, root.fork_str("step").fork(step as u64), step)?;
            debug!("epoch {epoch} step {step}: {r:?}");
            log.push(LogRow {
                epoch,
                step,
                losses: r,
            });
            reports.push(r);
            step += 1;
        }
        let mean = LossReport::mean(&reports).ok_or_else(|| Error::input("epoch produced no batches"))?;
        let scale = |d| -> Result<f64> { Ok(model.params.get(&format!("{}.delta_scale", model.fusion(d).prefix))?.item()) };
        info!(
            "epoch {epoch}: combined {:.4} (t2v {:.4}, v2t {:.4}, focus_t {:.4}, focus_v {:.4}), tau {:.4}, delta scales {:.4}/{:.4}",
            mean.combined,
            mean.t2v,
            mean.v2t,
            mean.focus_t,
            mean.focus_v,
            model.temperature()?,
            scale(Direction::TextToVideo)?,
            scale(Direction::VideoToText)?
        );
        epochs.push(mean);
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch-{epoch}.ckpt"));
            model.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        epochs,
        checkpoints,
    })
}

/// `epoch,step,l_t2v,l_v2t,l_focus_t,l_focus_v,combined`.
pub fn write_loss_log<W: Write>(rows: &[LogRow], mut w: W) -> Result<()> {
    writeln!(w, "epoch,step,{}", LossReport::CSV_COLUMNS)?;
    for r in rows {
        writeln!(w, "{},{},{}", r.epoch, r.step, r.losses.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_log(rows: &[LogRow], path: &Path) -> Result<()> {
    write_loss_log(rows, BufWriter::new(File::create(path)?))
}

/// Toy reduction of `base` for finite-difference checks: width 8, one
/// encoder layer, `B = 2`, `k = 3`, small clips. Every ablation toggle and
/// the indicator and fusion-block counts carry over.
pub fn gradcheck_config(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    let m = &mut cfg.model;
    m.width = 8;
    m.layers = 1;
    m.vocab_size = 64;
    m.max_text_len = 8;
    m.patches = 4;
    m.frames = 2;
    m.patch_dim = 4;
    m.mlp_hidden = 8;
    m.k = 3;
    let t = &mut cfg.train;
    t.batch_size = 2;
    t.k_train = None;
    let d = &mut cfg.data;
    d.cohort_size = 2;
    d.pairs = 2;
    d.test_pairs = 0;
    cfg
}

/// Compare tape gradients of the combined loss with central differences
/// over every parameter of a toy model.
///
/// Zero-initialised tensors (output projections, the delta head, delta
/// scales) are replaced by random values first so that every path carries
/// gradient.
pub fn objective_gradcheck(base: &RunConfig, eps: f64) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(base);
    cfg.validate()?;
    let mut model = Model::init(&cfg)?;
    let stream = RngStream::new(cfg.seed).fork_str("gradcheck");
    for (i, (_, p)) in model.params.iter_mut().enumerate() {
        if p.value.data().iter().all(|&x| x == 0.0) {
            let noise = stream.fork(i as u64).normals(p.value.len());
            for (w, z) in p.value.data_mut().iter_mut().zip(noise) {
                *w = 0.1 * z;
            }
        }
    }
    let ds = generate_synthetic_pairs(&SyntheticSpec::from_config(&cfg))?;
    let batch = Batch::from_dataset(&ds, &[0, 1]);
    let rng = stream.fork_str("noise");
    check_gradients(&model.params, eps, |tape, params| {
        Ok(batch_objective(tape, &model, params, &batch, rng)?.combined)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn toy_objective_gradients_match_finite_differences() {
        let report = objective_gradcheck(&RunConfig::default(), 1e-4).unwrap();
        assert!(report.passes(1e-4), "worst: {:?}", report.worst());
    }

    #[test]
    fn orthonormal_pairs_give_small_loss() {
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            let l = contrastive_loss(&e, &e, 0.01, d).unwrap();
            let oracle = -(100f64.exp() / (100f64.exp() + 1.0)).ln();
            assert!(l <= 1e-3);
            assert!((l - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_similarities_give_log_b() {
        let t = rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            assert!((contrastive_loss(&t, &t, 0.01, d).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        for tau in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                contrastive_loss(&e, &e, tau, Direction::TextToVideo),
                Err(Error::Config(_))
            ));
        }
        let one = rows(&[&[1.0, 0.0]]);
        assert!(matches!(contrastive_loss(&one, &one, 0.1, Direction::TextToVideo), Err(Error::Input(_))));
    }

    #[test]
    fn focused_ce_cases() {
        assert!((focused_ce_loss(&[0.3; 10], 4).unwrap() - 10f64.ln()).abs() < 1e-15);
        let mut l = vec![0.0; 5];
        l[2] = 20.0;
        assert!(focused_ce_loss(&l, 2).unwrap() <= 1e-8);
        assert!(matches!(focused_ce_loss(&l, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn combined_arithmetic() {
        assert_eq!(combined_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(combined_loss(1.0, 1.0, 2.0, 2.0), 3.0);
    }

    #[test]
    fn candidates_inject_missing_positive() {
        let (c, p) = training_candidates(&[0.9, 0.1, 0.8, 0.5], 1, 2).unwrap();
        assert_eq!((c, p), (vec![0, 1], 1));
        let (c, p) = training_candidates(&[0.9, 0.1, 0.8, 0.5], 2, 3).unwrap();
        assert_eq!((c, p), (vec![0, 2, 3], 1));
        let (c, p) = training_candidates(&[0.2, 0.7], 0, 2).unwrap();
        assert_eq!((c, p), (vec![1, 0], 1));
    }

    fn tiny() -> (RunConfig, PairedDataset) {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("width", "8"),
            ("layers", "1"),
            ("patches", "4"),
            ("frames", "2"),
            ("patch_dim", "4"),
            ("mlp_hidden", "8"),
            ("batch_size", "4"),
            ("cohort_size", "2"),
            ("pairs", "8"),
            ("k", "3"),
            ("epochs", "1"),
            ("lr_base", "1e-3"),
            ("lr_fusion", "1e-3"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let ds = generate_synthetic_pairs(&SyntheticSpec::from_config(&cfg)).unwrap();
        (cfg, ds)
    }

    #[test]
    fn train_step_is_deterministic() {
        let (cfg, ds) = tiny();
        let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
        let run = || {
            let mut m = Model::init(&cfg).unwrap();
            let mut opt = AdamW::new();
            let r = train_step(&mut m, &mut opt, &batch, RngStream::new(4), 0).unwrap();
            (r, m.params.checksum())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(ca, cb);
        assert_eq!(a.combined, combined_loss(a.t2v, a.v2t, a.focus_t, a.focus_v));
    }

    #[test]
    fn step_with_frozen_scale_updates_and_feeds_ce_to_mlp() {
        let (cfg, ds) = tiny();
        let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
        let mut m = Model::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let obj = batch_objective(&mut tape, &m, &m.params, &batch, RngStream::new(1)).unwrap();
        let g = tape.backward(obj.focus_t.unwrap()).unwrap().for_params(&m.params);
        assert!(g["fusion_t2v.delta.fc2.weight"].data().iter().any(|&x| x != 0.0));

        let before = m.params.checksum();
        let mut opt = AdamW::new();
        opt.freeze("fusion_t2v.delta_scale");
        opt.freeze("fusion_v2t.delta_scale");
        train_step(&mut m, &mut opt, &batch, RngStream::new(1), 0).unwrap();
        assert_ne!(m.params.checksum(), before);
        assert_eq!(m.params.get("fusion_t2v.delta_scale").unwrap().item(), 0.0);
    }

    #[test]
    fn one_epoch_over_one_batch_is_one_step() {
        let (mut cfg, ds) = tiny();
        cfg.set("batch_size", "8").unwrap();
        let out = train_loop(&ds, Model::init(&cfg).unwrap(), None).unwrap();
        assert_eq!(out.log.len(), 1);

        let mut m = Model::init(&cfg).unwrap();
        let root = RngStream::new(cfg.seed).fork_str("train");
        let idx = &epoch_batches(&ds, &cfg, root.fork_str("shuffle").fork(1))[0];
        let r = train_step(
            &mut m,
            &mut AdamW::new(),
            &Batch::from_dataset(&ds, idx),
            root.fork_str("step").fork(0),
            0,
        )
        .unwrap();
        assert!(r.bit_eq(&out.log[0].losses));
        assert_eq!(m.params.checksum(), out.model.params.checksum());
    }

    #[test]
    fn cohort_batches_keep_cohorts_together() {
        let (mut cfg, ds) = tiny();
        cfg.set("batch_size", "4").unwrap();
        let batches = epoch_batches(&ds, &cfg, RngStream::new(2));
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(ds.groups[b[0]], ds.groups[b[1]]);
            assert_eq!(ds.groups[b[2]], ds.groups[b[3]]);
        }
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_loss_is_reported_with_batch_index() {
        let (cfg, ds) = tiny();
        let mut m = Model::init(&cfg).unwrap();
        m.params.get_mut(LOG_TAU).unwrap().data_mut()[0] = -1e6;
        let batch = Batch::from_dataset(&ds, &[0, 1, 2, 3]);
        match train_step(&mut m, &mut AdamW::new(), &batch, RngStream::new(0), 7) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("batch 7")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
