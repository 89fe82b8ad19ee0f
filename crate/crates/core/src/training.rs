//! Metric learning with in-batch hardest-negative mining.
//!
//! A batch holds `B` anchor/positive pairs. The candidate pool for mining is
//! all `2B` embeddings; pool index `i < B` is anchor `i` and `B + i` is its
//! positive.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cosine, lr_at, sgd_step, GradStore, OptimizerState, Tape, Tensor, Var};
use crate::cps::PhaseSegments;
use crate::encoder::layers::Binder;
use crate::encoder::{HpafParams, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Number of training beats used to center branch outputs before training.
pub const CALIBRATION_BEATS: usize = 128;

/// Tolerance for the zero-mean check run after every optimizer step.
pub const GABOR_SUM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub eta_min: f64,
    pub margin: f64,
    pub seed: u64,
    /// Exclude only the anchor and its own positive when mining, even if
    /// another pool entry shares the anchor's subject.
    pub strict_paper_mining: bool,
    /// Rescale each batch gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
    /// Epochs over which the step size ramps linearly, per batch, up to
    /// the scheduled value. The recorded epoch lr is the scheduled one.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            momentum: 0.9,
            base_lr: 1e-4,
            eta_min: 0.0,
            margin: 0.3,
            seed: 0,
            strict_paper_mining: false,
            clip_norm: None,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "train.batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "train.clip_norm must be positive, got {c}"
                )));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "train.margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.base_lr >= 0.0) || !(self.eta_min >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Beat indices grouped by subject, in sorted subject order.
pub fn group_by_subject(beats: &[PhaseSegments]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, b) in beats.iter().enumerate() {
        out.entry(b.subject_id.clone()).or_default().push(i);
    }
    out
}

/// Anchor and positive beat indices into the training set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub subjects: Vec<String>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Subject of each pool entry: anchors first, then positives.
    pub fn pool_subjects(&self) -> Vec<&str> {
        self.subjects
            .iter()
            .chain(&self.subjects)
            .map(String::as_str)
            .collect()
    }
}

/// Draw `batch_size` subjects and two distinct beats from each.
///
/// Subjects are drawn without replacement while there are enough of them;
/// otherwise every eligible subject appears once and the rest of the batch
/// is filled with replacement.
pub fn sample_pair_batch(
    groups: &BTreeMap<String, Vec<usize>>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let eligible: Vec<(&String, &Vec<usize>)> =
        groups.iter().filter(|(_, v)| v.len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(Error::Data(format!(
            "pair sampling needs two subjects with at least two beats, found {}",
            eligible.len()
        )));
    }
    if batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(rng);
    order.truncate(batch_size);
    while order.len() < batch_size {
        order.push(rng.gen_range(0..eligible.len()));
    }
    let mut batch = PairBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        subjects: Vec::with_capacity(batch_size),
    };
    for s in order {
        let (id, beats) = eligible[s];
        let picks = rand::seq::index::sample(rng, beats.len(), 2);
        batch.anchors.push(beats[picks.index(0)]);
        batch.positives.push(beats[picks.index(1)]);
        batch.subjects.push(id.clone());
    }
    Ok(batch)
}

/// Pool index of the hardest negative for every anchor.
///
/// Ties go to the lowest pool index.
pub fn mine_negatives(
    pool: &[&[f64]],
    subjects: &[&str],
    strict_paper_mining: bool,
) -> Result<Vec<usize>> {
    if !pool.len().is_multiple_of(2) || pool.len() != subjects.len() {
        return Err(Error::Contract(
            "mining pool must hold anchors then positives".into(),
        ));
    }
    let b = pool.len() / 2;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..pool.len() {
            if j == i || j == b + i {
                continue;
            }
            if !strict_paper_mining && subjects[j] == subjects[i] {
                continue;
            }
            let s = cosine(pool[i], pool[j]);
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.ok_or_else(|| {
            Error::Contract(format!("anchor {i} has no valid negative in the pool"))
        })?;
        out.push(j);
    }
    Ok(out)
}

/// Hinge loss `mean_i [m + s(u_i, u_N) - s(u_i, u_P)]_+` recorded on `tape`.
pub fn contrastive_loss(
    tape: &mut Tape,
    pool: &[Var],
    subjects: &[&str],
    margin: f64,
    strict_paper_mining: bool,
) -> Result<Var> {
    let values: Vec<&[f64]> = pool.iter().map(|&v| tape.value(v).data()).collect();
    let negatives = mine_negatives(&values, subjects, strict_paper_mining)?;
    let b = pool.len() / 2;
    let mut terms = Vec::with_capacity(b);
    for (i, &n) in negatives.iter().enumerate() {
        let sn = tape.cosine_sim(pool[i], pool[n])?;
        let sp = tape.cosine_sim(pool[i], pool[b + i])?;
        let diff = tape.sub(sn, sp)?;
        let shifted = tape.add_scalar(diff, margin);
        let hinge = tape.relu(shifted);
        terms.push(tape.reshape(hinge, &[1])?);
    }
    let stacked = tape.concat(&terms, 0)?;
    tape.mean(stacked, 0, false)
}

/// Value of [`contrastive_loss`] without building a tape.
pub fn contrastive_loss_value(
    pool: &[&[f64]],
    subjects: &[&str],
    margin: f64,
    strict_paper_mining: bool,
) -> Result<f64> {
    let negatives = mine_negatives(pool, subjects, strict_paper_mining)?;
    let b = pool.len() / 2;
    let total: f64 = negatives
        .iter()
        .enumerate()
        .map(|(i, &n)| (margin + cosine(pool[i], pool[n]) - cosine(pool[i], pool[b + i])).max(0.0))
        .sum();
    Ok(total / b as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Loss and gradients of one batch, accumulated into `grads`.
pub fn batch_gradients(
    model: &HpafParams,
    beats: &[PhaseSegments],
    batch: &PairBatch,
    cfg: &TrainConfig,
    grads: &mut GradStore,
) -> Result<f64> {
    let indices: Vec<usize> = batch
        .anchors
        .iter()
        .chain(&batch.positives)
        .copied()
        .collect();
    let mut tapes = Vec::with_capacity(indices.len());
    for &i in &indices {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let trace = model.trace(&mut tape, &mut binder, &beats[i])?;
        tapes.push((tape, trace.embedding));
    }

    let mut loss_tape = Tape::new();
    let leaves: Vec<Var> = tapes
        .iter()
        .map(|(t, u)| loss_tape.variable(t.value(*u).clone()))
        .collect();
    let subjects = batch.pool_subjects();
    let loss = contrastive_loss(
        &mut loss_tape,
        &leaves,
        &subjects,
        cfg.margin,
        cfg.strict_paper_mining,
    )?;
    loss_tape.backward(loss)?;
    let loss_value = loss_tape.value(loss).item()?;

    for ((tape, u), leaf) in tapes.iter_mut().zip(&leaves) {
        let Some(g) = loss_tape.grad(*leaf) else {
            continue;
        };
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let g = tape.constant(Tensor::new(tape.shape(*u).to_vec(), g.to_vec())?);
        let prod = tape.mul(*u, g)?;
        let root = tape.sum(prod);
        tape.backward(root)?;
        grads.accumulate(tape);
    }
    Ok(loss_value)
}

/// Number of batches in one pass over `n_beats`.
pub fn batches_per_epoch(n_beats: usize, batch_size: usize) -> usize {
    n_beats.div_ceil(batch_size).max(1)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HpafParams,
    pub history: Vec<EpochStats>,
}

/// Train a freshly initialized model. `on_epoch` runs after every epoch and
/// may persist a checkpoint.
pub fn train(
    beats: &[PhaseSegments],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HpafParams, &EpochStats) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = HpafParams::init(model_cfg, cfg.seed)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, history });
    }
    let mut calib: Vec<usize> = (0..beats.len()).collect();
    calib.shuffle(&mut rng_for(cfg.seed, "train/calibration"));
    calib.truncate(CALIBRATION_BEATS);
    calib.sort_unstable();
    let sample: Vec<PhaseSegments> = calib.iter().map(|&i| beats[i].clone()).collect();
    model.calibrate(&sample)?;

    let groups = group_by_subject(beats);
    let mut rng = rng_for(cfg.seed, "train/batches");
    let mut opt = OptimizerState::new(
        &model.store,
        cfg.momentum,
        cfg.base_lr,
        cfg.eta_min,
        cfg.epochs,
    );
    let n_batches = batches_per_epoch(beats.len(), cfg.batch_size);
    let warmup_steps = cfg.warmup_epochs * n_batches;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch as f64, &opt)?;
        let mut total = 0.0;
        for k in 0..n_batches {
            let batch = sample_pair_batch(&groups, cfg.batch_size, &mut rng)?;
            let mut grads = GradStore::zeros_like(&model.store);
            total += batch_gradients(&model, beats, &batch, cfg, &mut grads)?;
            if let Some(limit) = cfg.clip_norm {
                let norm = grads.norm();
                if norm > limit {
                    grads.scale(limit / norm);
                }
            }
            let step = epoch * n_batches + k;
            let lr = if step < warmup_steps {
                lr * (step + 1) as f64 / warmup_steps as f64
            } else {
                lr
            };
            sgd_step(&mut model.store, &grads, &mut opt, lr);
            let drift = model.max_gabor_kernel_sum()?;
            if !(drift < GABOR_SUM_TOL) {
                return Err(Error::Contract(format!(
                    "Gabor kernel sum {drift:e} after optimizer step"
                )));
            }
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / n_batches as f64,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} lr {:.3e}",
            stats.mean_loss,
            stats.lr
        );
        on_epoch(&model, &stats)?;
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}
