//! Optimization loop, validation-driven early stopping, whole-document
//! inference and k-fold cross-validation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    backward, forward, loss, AdapterConfig, AdapterModel, AdapterParams, Checkpoint, Gradients, Mode, SeedLineage,
};
use crate::corpus::{assign_folds, DatasetManifest, LineLabels};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, LineScores, TileScores};
use crate::par::{self, Exec};
use crate::states::{read_states, state_path, StateMatrix};
use crate::windowing::{materialize, segment, tile_for_inference, WindowConfig, WindowSample, WindowSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub seed: u64,
    /// Probability at or above which a line counts as predicted faulty
    /// during validation.
    pub threshold: f64,
    pub window: WindowConfig,
}

impl TrainConfig {
    /// Full-size schedule: 1e-4 peak, 1000 warm-up steps, cosine to
    /// 1e-7 at step 20k, batches of 32, up to 300 epochs.
    pub fn full() -> Self {
        Self {
            max_lr: 1e-4,
            min_lr: 1e-7,
            warmup_steps: 1000,
            decay_steps: 20_000,
            batch_size: 32,
            max_epochs: 300,
            patience_epochs: 50,
            seed: 0,
            threshold: 0.5,
            window: WindowConfig::default(),
        }
    }

    /// Short schedule for laptop-sized synthetic corpora.
    pub fn desk() -> Self {
        Self {
            max_lr: 3e-3,
            min_lr: 1e-5,
            warmup_steps: 20,
            decay_steps: 1500,
            batch_size: 8,
            max_epochs: 120,
            patience_epochs: 30,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return fail(format!("need 0 <= min_lr <= max_lr, got {} and {}", self.min_lr, self.max_lr));
        }
        if self.warmup_steps >= self.decay_steps {
            return fail(format!("warm-up ({}) must end before decay ({})", self.warmup_steps, self.decay_steps));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return fail("batch size, epochs and patience must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail(format!("threshold {} outside [0, 1]", self.threshold));
        }
        self.window.validate()
    }
}

/// Linear ramp from 0 to `max_lr` over the warm-up, half-cosine down to
/// `min_lr` at `decay_steps`, flat afterwards.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.max_lr * step as f64 / cfg.warmup_steps as f64
    } else if step < cfg.decay_steps {
        let progress = (step - cfg.warmup_steps) as f64 / (cfg.decay_steps - cfg.warmup_steps) as f64;
        let drop = 0.5 * (1.0 - (std::f64::consts::PI * progress).cos());
        cfg.max_lr - (cfg.max_lr - cfg.min_lr) * drop
    } else {
        cfg.min_lr
    }
}

/// SplitMix64 finalizer over `base` and a purpose tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SEED_INIT: u64 = 1;
const SEED_WINDOWS: u64 = 2;
const SEED_SHUFFLE: u64 = 3;
const SEED_DROPOUT: u64 = 4;

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub states: StateMatrix,
    pub labels: LineLabels,
}

impl Example {
    pub fn new(states: StateMatrix, labels: LineLabels) -> Result<Self> {
        if states.doc_id != labels.doc_id {
            return Err(Error::Reference(format!(
                "states for {:?} paired with labels for {:?}",
                states.doc_id, labels.doc_id
            )));
        }
        labels.validate(states.line_count())?;
        Ok(Self { states, labels })
    }

    pub fn doc_id(&self) -> &str {
        &self.states.doc_id
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let ds = Self { examples };
        ds.dim()?;
        Ok(ds)
    }

    /// Pair each manifest record with its state file in `states_dir`.
    pub fn load(manifest: &DatasetManifest, states_dir: impl AsRef<Path>, exec: Exec) -> Result<Self> {
        let dir = states_dir.as_ref();
        let examples = par::try_map(exec, &manifest.records, |rec| {
            let path = state_path(dir, &rec.id);
            if !path.is_file() {
                return Err(Error::Reference(format!(
                    "no state file for record {:?} (expected {})",
                    rec.id,
                    path.display()
                )));
            }
            let mut states = read_states(&path)?;
            states.doc_id = rec.id.clone();
            Example::new(states, rec.labels())
        })?;
        Self::new(examples)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Common state dimension; `None` for an empty set.
    pub fn dim(&self) -> Result<Option<usize>> {
        let mut dims = self.examples.iter().map(|e| e.states.dim());
        let Some(first) = dims.next() else { return Ok(None) };
        if dims.any(|d| d != first) {
            return Err(Error::Shape("state files disagree on the state dimension".into()));
        }
        Ok(Some(first))
    }

    pub fn subset(&self, keep: impl Fn(usize, &Example) -> bool) -> Self {
        Self {
            examples: self.examples.iter().enumerate().filter(|(i, e)| keep(*i, e)).map(|(_, e)| e.clone()).collect(),
        }
    }

    /// Training segments for every labeled document, drawn from `rng`.
    pub fn windows(&self, capacity: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, WindowSpec)>> {
        let mut out = Vec::new();
        for (i, ex) in self.examples.iter().enumerate().filter(|(_, e)| !e.labels.is_empty()) {
            let specs = segment(ex.doc_id(), ex.states.line_count(), &ex.labels.faulty_lines, capacity, rng)?;
            out.extend(specs.into_iter().map(|s| (i, s)));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Score every line of one document by tiling it and taking the per-line
/// maximum over tiles.
pub fn predict_document(
    model: &AdapterModel,
    states: &StateMatrix,
    window: &WindowConfig,
    exec: Exec,
) -> Result<LineScores> {
    let m = states.line_count();
    let tiles = tile_for_inference(&states.doc_id, m, window.capacity, window.inference_overlap)?;
    let no_labels = LineLabels::new(states.doc_id.clone(), []);
    let batch =
        tiles.iter().map(|t| materialize(t, states, &no_labels, window.capacity)).collect::<Result<Vec<_>>>()?;
    let trace = forward(model, &batch, Mode::Eval, exec)?;
    let fragments: Vec<TileScores> = tiles
        .iter()
        .zip(&trace.probs)
        .map(|(t, p)| TileScores { start: t.start, scores: p[..t.length].to_vec() })
        .collect();
    eval::aggregate_tiles(&states.doc_id, m, &fragments)
}

/// [`predict_document`] over a whole set, documents in parallel.
pub fn predict_dataset(
    model: &AdapterModel,
    data: &Dataset,
    window: &WindowConfig,
    exec: Exec,
) -> Result<Vec<LineScores>> {
    par::try_map(exec, &data.examples, |e| predict_document(model, &e.states, window, Exec::Sequential))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

impl PrecisionRecall {
    pub fn mean(&self) -> f64 {
        (self.precision + self.recall) / 2.0
    }
}

/// Pooled line-level precision and recall at `threshold`. Either is 0 when
/// its denominator is.
pub fn precision_recall(scores: &[LineScores], data: &Dataset, threshold: f64) -> PrecisionRecall {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (s, e) in scores.iter().zip(&data.examples) {
        for (i, &p) in s.scores.iter().enumerate() {
            match (p >= threshold, e.labels.faulty_lines.contains(&(i + 1))) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    PrecisionRecall { precision: ratio(tp, tp + fp), recall: ratio(tp, tp + fneg) }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    m: AdapterParams,
    v: AdapterParams,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &AdapterConfig) -> Self {
        Self { m: AdapterParams::zeros(cfg), v: AdapterParams::zeros(cfg), t: 0 }
    }

    /// One bias-corrected update; parameters are snapped back to `f32`.
    pub fn step(&mut self, model: &mut AdapterModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let params = model.params_mut().tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.2) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *p = f64::from((*p - update) as f32);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean: f64,
    /// Rate used by the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the highest mean of precision and recall.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,precision,recall,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.loss, e.precision, e.recall, e.lr);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

fn materialize_batch(data: &Dataset, windows: &[(usize, WindowSpec)], capacity: usize) -> Result<Vec<WindowSample>> {
    windows
        .iter()
        .map(|(i, spec)| {
            let e = &data.examples[*i];
            materialize(spec, &e.states, &e.labels, capacity)
        })
        .collect()
}

/// Train `model` on the labeled documents of `train_set`, validating on
/// `val_set` after every epoch, and return the best epoch's parameters.
///
/// Training windows are drawn once per run unless the window config asks
/// for a fresh draw every epoch. Minibatch order is reshuffled each epoch.
/// Training stops after `patience_epochs` epochs without a strict
/// improvement of mean validation precision/recall.
pub fn train(
    mut model: AdapterModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    lineage: SeedLineage,
    exec: Exec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    for ds in [train_set, val_set] {
        if let Some(d) = ds.dim()? {
            if d != model.config().input_dim {
                return Err(Error::Shape(format!(
                    "state dimension {d} does not match the model's {}",
                    model.config().input_dim
                )));
            }
        }
    }
    if train_set.examples.iter().all(|e| e.labels.is_empty()) {
        return Err(Error::Config("training set has no labeled documents".into()));
    }

    let capacity = cfg.window.capacity;
    let mut window_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_WINDOWS));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_SHUFFLE));
    let dropout_base = derive_seed(cfg.seed, SEED_DROPOUT);
    let mut windows = train_set.windows(capacity, &mut window_rng)?;

    let mut adam = Adam::new(model.config());
    let mut step: u64 = 0;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        if epoch > 1 && cfg.window.resample_each_epoch {
            windows = train_set.windows(capacity, &mut window_rng)?;
        }
        windows.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut positions) = (0.0, 0usize);
        let mut lr = lr_at(step, cfg);
        for chunk in windows.chunks(cfg.batch_size) {
            let batch = materialize_batch(train_set, chunk, capacity)?;
            lr = lr_at(step, cfg);
            let mode = Mode::Train { dropout_seed: derive_seed(dropout_base, step) };
            let trace = forward(&model, &batch, mode, exec)?;
            let batch_loss = loss(&trace, &batch)?;
            if !batch_loss.is_finite() {
                let ids: Vec<String> = chunk.iter().map(|(_, s)| format!("{}@{}", s.doc_id, s.start)).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step} (lr {lr:e}) on windows [{}]",
                    ids.join(", ")
                )));
            }
            let valid: usize = batch.iter().map(WindowSample::len).sum();
            loss_sum += batch_loss * valid as f64;
            positions += valid;

            let grads = backward(&model, &trace, &batch, exec)?;
            adam.step(&mut model, &grads, lr);
            step += 1;
        }

        let scores = predict_dataset(&model, val_set, &cfg.window, exec)?;
        let pr = precision_recall(&scores, val_set, cfg.threshold);
        let record = EpochRecord {
            epoch,
            loss: loss_sum / positions as f64,
            precision: pr.precision,
            recall: pr.recall,
            mean: pr.mean(),
            lr,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} precision {:.4} recall {:.4}",
            record.loss,
            record.precision,
            record.recall
        );
        if best.as_ref().is_none_or(|(b, _)| record.mean > *b) {
            let ckpt = Checkpoint { model: model.clone(), step, epoch: epoch as u64, seeds: lineage.clone() };
            best = Some((record.mean, ckpt));
            stale = 0;
        } else {
            stale += 1;
        }
        epochs.push(record);
        if stale >= cfg.patience_epochs {
            break;
        }
    }

    let (_, checkpoint) = best.expect("at least one epoch ran");
    let best_epoch = checkpoint.epoch as usize;
    Ok(TrainOutcome { checkpoint, history: TrainHistory { epochs, best_epoch } })
}

/// Fresh model from the run seed, then [`train`].
pub fn train_from_scratch(
    adapter: &AdapterConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    fold: Option<u64>,
    exec: Exec,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_INIT));
    let model = AdapterModel::init(adapter.clone(), &mut rng)?;
    let lineage = SeedLineage { base_seed: fold.map_or(cfg.seed, |f| cfg.seed ^ f), fold, run_seed: cfg.seed };
    train(model, train_set, val_set, cfg, lineage, exec)
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub doc_ids: Vec<String>,
    pub scores: Vec<LineScores>,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct CrossvalResult {
    pub folds: Vec<FoldResult>,
    /// Metrics over every held-out document pooled together.
    pub aggregate: EvalReport,
}

/// Fold tags from the manifest, or a fresh seeded assignment into `k`.
pub fn fold_assignment(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<usize>> {
    let tagged = match manifest.fold_count() {
        Some(n) if n == k => manifest.clone(),
        _ => assign_folds(manifest, k, seed)?,
    };
    Ok(tagged.records.iter().map(|r| r.fold.expect("assigned")).collect())
}

/// Train one model per fold on the other folds, validate and evaluate on
/// the held-out fold. Fold `f` trains with seed `cfg.seed ^ f`. Folds run
/// in parallel under [`Exec::Parallel`].
pub fn crossval(
    data: &Dataset,
    folds: &[usize],
    adapter: &AdapterConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<CrossvalResult> {
    if folds.len() != data.len() {
        return Err(Error::Shape(format!("{} fold tags for {} documents", folds.len(), data.len())));
    }
    let ids: BTreeSet<usize> = folds.iter().copied().collect();
    let k = ids.len();
    if k < 2 || ids.iter().next_back() != Some(&(k - 1)) {
        return Err(Error::Config(format!("fold tags must be 0..k with k >= 2, found {ids:?}")));
    }
    let results = par::try_map_range(exec, k, |f| -> Result<FoldResult> {
        let held_out = data.subset(|i, _| folds[i] == f);
        let training = data.subset(|i, _| folds[i] != f);
        let fold_cfg = TrainConfig { seed: cfg.seed ^ f as u64, ..cfg.clone() };
        let outcome = train_from_scratch(adapter, &training, &held_out, &fold_cfg, Some(f as u64), exec)?;
        let scores = predict_dataset(&outcome.checkpoint.model, &held_out, &cfg.window, exec)?;
        let pairs = pair_scores(&scores, &held_out);
        let report = eval::evaluate(&pairs, &eval::DEFAULT_TOP_N)?;
        log::info!(
            "fold {f}: best epoch {} top-5 {}/{}",
            outcome.history.best_epoch,
            report.top_n(5),
            report.total_bugs
        );
        Ok(FoldResult {
            fold: f,
            doc_ids: held_out.examples.iter().map(|e| e.doc_id().to_owned()).collect(),
            scores,
            report,
            history: outcome.history,
            checkpoint: outcome.checkpoint,
        })
    })?;
    let pooled: Vec<(LineScores, LineLabels)> = results
        .iter()
        .flat_map(|r| {
            let held_out = data.subset(|i, _| folds[i] == r.fold);
            pair_scores(&r.scores, &held_out)
        })
        .collect();
    let aggregate = eval::evaluate(&pooled, &eval::DEFAULT_TOP_N)?;
    Ok(CrossvalResult { folds: results, aggregate })
}

fn pair_scores(scores: &[LineScores], data: &Dataset) -> Vec<(LineScores, LineLabels)> {
    scores.iter().cloned().zip(data.examples.iter().map(|e| e.labels.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::full();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(1000, &cfg), 1e-4);
        assert_eq!(lr_at(20_000, &cfg), 1e-7);
        assert_eq!(lr_at(50_000, &cfg), 1e-7);
        assert!((lr_at(500, &cfg) - 5e-5).abs() < 1e-18);
        let mut prev = lr_at(1000, &cfg);
        for s in 1001..=20_000 {
            let lr = lr_at(s, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::full().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig { warmup_steps: 20_000, ..TrainConfig::full() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { min_lr: 1e-3, ..TrainConfig::full() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::full() };
        assert!(bad.validate().is_err());
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| {
                let m = rng.random_range(6..=14);
                let faulty = rng.random_range(1..=m);
                let rows = Array2::from_shape_fn((m, 8), |(r, c)| {
                    let base: f32 = rng.random_range(-0.3..0.3);
                    if r + 1 == faulty && c == 0 {
                        base + 1.0
                    } else {
                        base
                    }
                });
                let id = format!("doc{i}");
                Example::new(StateMatrix::new(id.clone(), rows, "t", 0).unwrap(), LineLabels::new(id, [faulty]))
                    .unwrap()
            })
            .collect();
        Dataset::new(examples).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            max_lr: 1e-2,
            min_lr: 1e-4,
            warmup_steps: 5,
            decay_steps: 200,
            batch_size: 4,
            max_epochs: 60,
            patience_epochs: 60,
            seed: 3,
            threshold: 0.5,
            window: WindowConfig::with_capacity(8),
        }
    }

    #[test]
    fn frozen_lr_stops_after_two_epochs() {
        let data = toy_dataset(4, 1);
        let cfg = TrainConfig { max_lr: 0.0, min_lr: 0.0, patience_epochs: 1, ..quick_cfg() };
        let out =
            train_from_scratch(&AdapterConfig::small(8, 4, 1, 1), &data, &data, &cfg, None, Exec::Sequential).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
        assert_eq!(out.history.best_epoch, 1);
    }

    #[test]
    fn linear_signal_is_learned_and_deterministic() {
        let data = toy_dataset(10, 2);
        let adapter = AdapterConfig::linear_probe(8, 4);
        let cfg = TrainConfig { max_epochs: 500, patience_epochs: 100, decay_steps: 1000, ..quick_cfg() };
        let a = train_from_scratch(&adapter, &data, &data, &cfg, None, Exec::Sequential).unwrap();
        assert!(a.history.best().mean >= 0.95, "{:?}", a.history.best());
        let b = train_from_scratch(&adapter, &data, &data, &cfg, None, Exec::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        // the returned checkpoint is the argmax epoch, not the last one
        assert_eq!(a.checkpoint.epoch as usize, a.history.best_epoch);
    }

    #[test]
    fn crossval_partitions_documents() {
        let data = toy_dataset(4, 4);
        let cfg = TrainConfig { max_epochs: 2, ..quick_cfg() };
        let r = crossval(&data, &[0, 1, 0, 1], &AdapterConfig::linear_probe(8, 4), &cfg, Exec::default()).unwrap();
        assert_eq!(r.folds.len(), 2);
        assert!(r.folds.iter().all(|f| f.doc_ids.len() == 2));
        let all: BTreeSet<&String> = r.folds.iter().flat_map(|f| &f.doc_ids).collect();
        assert_eq!(all.len(), 4);
        for n in eval::DEFAULT_TOP_N {
            assert_eq!(r.aggregate.top_n(n), r.folds.iter().map(|f| f.report.top_n(n)).sum::<usize>());
        }
    }

    #[test]
    fn precision_recall_conventions() {
        let data = toy_dataset(1, 5);
        let m = data.examples[0].states.line_count();
        let none = vec![LineScores::new("doc0", vec![0.0; m]).unwrap()];
        let pr = precision_recall(&none, &data, 0.5);
        assert_eq!((pr.precision, pr.recall), (0.0, 0.0));
        let all = vec![LineScores::new("doc0", vec![1.0; m]).unwrap()];
        let pr = precision_recall(&all, &data, 0.5);
        assert_eq!(pr.recall, 1.0);
        assert_eq!(pr.precision, 1.0 / m as f64);
    }
}
