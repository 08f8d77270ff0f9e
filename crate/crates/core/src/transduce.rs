//! Training orchestration.
//!
//! The main phase minimizes `L_r(source) + lambda * L_b(target)` with momentum
//! SGD under a polynomial learning-rate decay. Modes with self-training then
//! run extra epochs on `L_r(source) + CE(target, pseudo labels)`, regenerating
//! the pseudo labels from the current network at the start of every epoch.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{write_atomic, Dataset, Role};
use crate::embeddings::{EmbeddingTable, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{infer_probs, init_net, predict, probabilities, NetConfig, PredictMode};
use crate::numerics::{poly_lr, ParamSet, SgdMomentum, Tape, Tensor};
use crate::objectives::{bias_rectification, seg_cross_entropy, total_objective, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Source-only training (`lambda = 0`), no self-training.
    Inductive,
    /// Bias-rectification loss, no self-training.
    Ours,
    /// Bias-rectification loss, then self-training with a global threshold.
    OursSt,
    /// Source-only training, then self-training with a global threshold.
    St,
    /// Source-only training, then class-balanced self-training.
    Cbst,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Inductive,
        Mode::Ours,
        Mode::OursSt,
        Mode::St,
        Mode::Cbst,
    ];

    pub fn uses_bias_loss(self) -> bool {
        matches!(self, Mode::Ours | Mode::OursSt)
    }

    pub fn self_trains(self) -> bool {
        matches!(self, Mode::OursSt | Mode::St | Mode::Cbst)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Inductive => "inductive",
            Mode::Ours => "ours",
            Mode::OursSt => "ours+st",
            Mode::St => "st",
            Mode::Cbst => "cbst",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode `{s}` (expected inductive|ours|ours+st|st|cbst)"
                ))
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub main_epochs: usize,
    pub self_train_epochs: usize,
    pub confidence_threshold: f64,
    pub poly_power: f64,
    pub mode: Mode,
    pub cbst_proportion: f64,
    pub run_seed: u64,
    pub hidden_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.6,
            base_lr: 0.02,
            momentum: 0.9,
            batch_size: 10,
            main_epochs: 20,
            self_train_epochs: 3,
            confidence_threshold: 0.6,
            poly_power: 0.9,
            mode: Mode::Ours,
            cbst_proportion: 0.5,
            run_seed: 0,
            hidden_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("learning rate must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail(format!(
                "confidence threshold must lie in [0, 1], got {}",
                self.confidence_threshold
            ));
        }
        if !(self.cbst_proportion > 0.0 && self.cbst_proportion <= 1.0) {
            return fail(format!(
                "cbst proportion must lie in (0, 1], got {}",
                self.cbst_proportion
            ));
        }
        if self.poly_power.is_nan() || self.poly_power <= 0.0 {
            return fail("poly power must be positive".into());
        }
        if self.hidden_channels == 0 {
            return fail("hidden channels must be positive".into());
        }
        Ok(())
    }

    /// The weight actually placed on `L_b`: zero for modes without it.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.uses_bias_loss() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn net_config(&self, output_dim: usize) -> NetConfig {
        NetConfig {
            hidden_channels: self.hidden_channels,
            output_dim,
            init_seed: self.run_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_r: f64,
    pub loss_b: f64,
    pub loss_total: f64,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,lr,loss_r,loss_b,loss_total\n");
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.loss_r, r.loss_b, r.loss_total
        )
        .unwrap();
    }
    out
}

pub fn write_history(history: &[HistoryRow], path: &Path) -> Result<()> {
    write_atomic(path, history_csv(history).as_bytes())
}

/// A stacked batch of labeled source images.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub images: Tensor,
    pub masks: Vec<u16>,
}

impl SourceBatch {
    pub fn gather(dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| dataset.image(i)).collect();
        let mut masks = Vec::new();
        for &i in indices {
            masks.extend_from_slice(dataset.training_mask(i)?);
        }
        Ok(SourceBatch {
            images: Tensor::stack(&images)?,
            masks,
        })
    }
}

/// A stacked batch of target images, with pseudo labels during self-training.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub images: Tensor,
    pub pseudo: Option<Vec<u16>>,
}

impl TargetBatch {
    pub fn gather(
        dataset: &Dataset,
        indices: &[usize],
        pseudo: Option<&PseudoLabelSet>,
    ) -> Result<Self> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| dataset.image(i)).collect();
        let pseudo = pseudo.map(|set| {
            indices
                .iter()
                .flat_map(|&i| set.labels[i].iter().copied())
                .collect()
        });
        Ok(TargetBatch {
            images: Tensor::stack(&images)?,
            pseudo,
        })
    }
}

/// Per target image, a class index or [`IGNORE`] for every pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub labels: Vec<Vec<u16>>,
}

impl PseudoLabelSet {
    pub fn labeled_pixels(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .filter(|&&l| l != IGNORE)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Main,
    SelfTrain,
}

/// Everything that evolves during a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamSet,
    pub optimizer: SgdMomentum,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<HistoryRow>,
    /// Length of the decay schedule (main-phase steps).
    pub total_steps: usize,
    shuffle_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    target_order: Vec<usize>,
    target_cursor: usize,
}

impl TrainState {
    pub fn new(params: ParamSet, config: &TrainConfig, n_source: usize) -> Result<Self> {
        let optimizer = SgdMomentum::new(&params, config.momentum)?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.run_seed);
        shuffle_rng.set_stream(1);
        let mut target_rng = ChaCha8Rng::seed_from_u64(config.run_seed);
        target_rng.set_stream(2);
        Ok(TrainState {
            params,
            optimizer,
            step: 0,
            epoch: 0,
            history: Vec::new(),
            total_steps: config.main_epochs * n_source.div_ceil(config.batch_size),
            shuffle_rng,
            target_rng,
            target_order: Vec::new(),
            target_cursor: 0,
        })
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self, config: &TrainConfig, phase: Phase) -> Result<f64> {
        if self.total_steps == 0 {
            return Ok(config.base_lr);
        }
        let at = match phase {
            Phase::Main => self.step.min(self.total_steps),
            // Self-training keeps the rate of the last main-phase step.
            Phase::SelfTrain => self.total_steps - 1,
        };
        poly_lr(at, self.total_steps, config.base_lr, config.poly_power)
    }

    fn source_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        order
    }

    /// Next `count` target indices, reshuffling whenever the set is exhausted.
    fn next_targets(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.target_cursor >= self.target_order.len() {
                self.target_order = (0..n).collect();
                self.target_order.shuffle(&mut self.target_rng);
                self.target_cursor = 0;
            }
            out.push(self.target_order[self.target_cursor]);
            self.target_cursor += 1;
        }
        out
    }
}

/// Static inputs shared by every step of a run.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub table: &'a EmbeddingTable,
    pub split: &'a SplitSpec,
    pub config: &'a TrainConfig,
}

/// One optimizer step.
///
/// Main phase: `L_r` on the source batch plus `lambda * L_b` on the target
/// batch (skipped when the effective lambda is 0). Self-training phase:
/// `L_r` plus the cross-entropy of the target batch against its pseudo labels.
pub fn train_step(
    state: &mut TrainState,
    source: &SourceBatch,
    target: Option<&TargetBatch>,
    ctx: StepContext<'_>,
    phase: Phase,
) -> Result<()> {
    let lr = state.current_lr(ctx.config, phase)?;
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let xs = tape.input(source.images.clone());
    let ps = probabilities(&mut tape, &vars, xs, ctx.table)?;
    let l_r = seg_cross_entropy(&mut tape, ps, &source.masks, Some(IGNORE))?;
    let mut total = l_r.var;
    let mut loss_b = 0.0;

    match (phase, target) {
        (Phase::Main, Some(t)) if ctx.config.effective_lambda() > 0.0 => {
            let xt = tape.input(t.images.clone());
            let pt = probabilities(&mut tape, &vars, xt, ctx.table)?;
            let l_b = bias_rectification(&mut tape, pt, &ctx.split.unseen_vec())?;
            loss_b = l_b.value.value;
            total = total_objective(&mut tape, &l_r, &l_b, ctx.config.effective_lambda())?;
        }
        (Phase::SelfTrain, Some(t)) => {
            let pseudo = t
                .pseudo
                .as_ref()
                .ok_or_else(|| Error::invalid("self-training batch lacks pseudo labels"))?;
            if pseudo.iter().any(|&l| l != IGNORE) {
                let xt = tape.input(t.images.clone());
                let pt = probabilities(&mut tape, &vars, xt, ctx.table)?;
                let l_t = seg_cross_entropy(&mut tape, pt, pseudo, Some(IGNORE))?;
                total = tape.add(total, l_t.var)?;
            }
        }
        _ => {}
    }

    let loss_total = tape.value(total).data()[0];
    if !loss_total.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }
    let grads = tape.backward(total)?;
    drop(tape);
    state.optimizer.step(&mut state.params, &grads, lr)?;
    state.history.push(HistoryRow {
        step: state.step,
        epoch: state.epoch,
        lr,
        loss_r: l_r.value.value,
        loss_b,
        loss_total,
    });
    state.step += 1;
    Ok(())
}

fn check_domains(source: &Dataset, target: &Dataset) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid(
            "source and target datasets must be non-empty",
        ));
    }
    if source.role() != Role::Source || target.role() != Role::Target {
        return Err(Error::invalid(
            "expected a source dataset and a target dataset",
        ));
    }
    Ok(())
}

/// Runs one epoch over shuffled source batches, pairing each with the next target batch.
fn run_epoch(
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    ctx: StepContext<'_>,
    phase: Phase,
    pseudo: Option<&PseudoLabelSet>,
) -> Result<()> {
    let order = state.source_order(source.len());
    let needs_target = match phase {
        Phase::Main => ctx.config.effective_lambda() > 0.0,
        Phase::SelfTrain => true,
    };
    for chunk in order.chunks(ctx.config.batch_size) {
        let sb = SourceBatch::gather(source, chunk)?;
        let idx = state.next_targets(target.len(), chunk.len());
        let tb = if needs_target {
            Some(TargetBatch::gather(target, &idx, pseudo)?)
        } else {
            None
        };
        train_step(state, &sb, tb.as_ref(), ctx, phase)?;
    }
    state.epoch += 1;
    Ok(())
}

/// Main phase: `main_epochs` epochs of the joint objective from a fresh network.
pub fn train(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    table: &EmbeddingTable,
    split: &SplitSpec,
) -> Result<TrainState> {
    config.validate()?;
    check_domains(source, target)?;
    let params = init_net(&config.net_config(table.dim()))?;
    let mut state = TrainState::new(params, config, source.len())?;
    let ctx = StepContext {
        table,
        split,
        config,
    };
    for _ in 0..config.main_epochs {
        run_epoch(&mut state, source, target, ctx, Phase::Main, None)?;
    }
    Ok(state)
}

/// Pseudo label for every pixel: argmax class if its probability reaches
/// `thresholds[class]`, otherwise [`IGNORE`].
pub fn pseudo_label_with_thresholds(probs: &Tensor, thresholds: &[f64]) -> Vec<u16> {
    let n = probs.last_dim();
    probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            let (c, p) = argmax(row);
            if p >= thresholds[c] {
                c as u16
            } else {
                IGNORE
            }
        })
        .collect()
}

/// Global-threshold pseudo labels.
pub fn pseudo_label(probs: &Tensor, tau: f64) -> Vec<u16> {
    pseudo_label_with_thresholds(probs, &vec![tau; probs.last_dim()])
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    (best, row[best])
}

/// Class-balanced thresholds: for each class, the confidence of the
/// `floor(n * p)`-th most confident pixel among the `n` pixels predicted as
/// that class, so roughly the top fraction `p` is kept. Classes that are never
/// predicted, or whose selection would be empty, get 1.0.
pub fn cbst_thresholds(probmaps: &[Tensor], proportion: f64) -> Result<Vec<f64>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::invalid(format!(
            "proportion must lie in (0, 1], got {proportion}"
        )));
    }
    let Some(first) = probmaps.first() else {
        return Ok(Vec::new());
    };
    let n = first.last_dim();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); n];
    for p in probmaps {
        if p.last_dim() != n {
            return Err(Error::shape("probability maps disagree on class count"));
        }
        for row in p.data().chunks_exact(n) {
            let (c, conf) = argmax(row);
            per_class[c].push(conf);
        }
    }
    Ok(per_class
        .into_iter()
        .map(|mut confs| {
            confs.sort_by(|a, b| b.total_cmp(a));
            let keep = (confs.len() as f64 * proportion).floor() as usize;
            if keep == 0 {
                1.0
            } else {
                confs[keep - 1]
            }
        })
        .collect())
}

/// Pseudo labels for every target image under the current parameters.
pub fn generate_pseudo_labels(
    params: &ParamSet,
    target: &Dataset,
    table: &EmbeddingTable,
    config: &TrainConfig,
) -> Result<PseudoLabelSet> {
    let probs = (0..target.len())
        .map(|i| infer_probs(params, target.image(i), table))
        .collect::<Result<Vec<_>>>()?;
    let thresholds = match config.mode {
        Mode::Cbst => cbst_thresholds(&probs, config.cbst_proportion)?,
        _ => vec![config.confidence_threshold; table.num_classes()],
    };
    Ok(PseudoLabelSet {
        labels: probs
            .iter()
            .map(|p| pseudo_label_with_thresholds(p, &thresholds))
            .collect(),
    })
}

/// Progressive self-training: each epoch first relabels the target set with
/// the current network, then takes one pass of source+pseudo-label steps.
pub fn self_train(
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    table: &EmbeddingTable,
    split: &SplitSpec,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    check_domains(source, target)?;
    let ctx = StepContext {
        table,
        split,
        config,
    };
    for _ in 0..config.self_train_epochs {
        let pseudo = generate_pseudo_labels(&state.params, target, table, config)?;
        run_epoch(state, source, target, ctx, Phase::SelfTrain, Some(&pseudo))?;
    }
    Ok(())
}

/// Main phase followed by self-training when the mode calls for it.
pub fn run(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    table: &EmbeddingTable,
    split: &SplitSpec,
) -> Result<TrainState> {
    let mut state = train(config, source, target, table, split)?;
    if config.mode.self_trains() {
        self_train(&mut state, source, target, table, split, config)?;
    }
    Ok(state)
}

/// Scores the network on every image of `dataset` against its evaluation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    /// Fraction of non-background ground-truth pixels predicted as an unseen class.
    pub fn unseen_prediction_rate(&self, split: &SplitSpec) -> f64 {
        let cm = &self.confusion;
        let n = cm.num_classes();
        let mut hit = 0u64;
        let mut total = 0u64;
        for g in 1..n {
            for p in 0..n {
                let v = cm.get(g, p);
                total += v;
                if split.is_unseen(p) {
                    hit += v;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

pub fn evaluate(
    params: &ParamSet,
    dataset: &Dataset,
    table: &EmbeddingTable,
    split: &SplitSpec,
    mode: PredictMode,
) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(table.num_classes());
    for i in 0..dataset.len() {
        let probs = infer_probs(params, dataset.image(i), table)?;
        let pred = predict(&probs, mode, split);
        confusion.accumulate(&pred, dataset.evaluation_mask(i))?;
    }
    let report = MetricsReport::from_confusion(&confusion, dataset.class_names(), split);
    Ok(Evaluation { report, confusion })
}
