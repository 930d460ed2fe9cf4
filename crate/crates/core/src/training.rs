//! Hierarchically supervised training: the weighted multi-level loss, the
//! epoch loop and the four-way architecture comparison.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelMapSet};
use crate::metrics::MetricsReport;
use crate::net::{ArchMode, EncoderConfig, NetConfig, ParserNet};
use crate::synth::Dataset;
use crate::tensor::{Element, Sgd, Tape, Var};

/// Batch size used for every evaluation pass.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// One weight per predicted level; empty means all 1.
    pub loss_weights: Vec<f64>,
    pub seed: u64,
    pub mode: ArchMode,
    /// Epoch interval of the snapshot callback; 0 disables it.
    pub snapshot_every: usize,
    /// Fractions of the step budget after which the rate is multiplied by
    /// `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    /// Epoch interval of validation; 0 validates after the last epoch only.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            loss_weights: Vec::new(),
            seed: 0,
            mode: ArchMode::StackFcSkip,
            snapshot_every: 0,
            lr_milestones: vec![0.6, 0.85],
            lr_decay: 0.5,
            validate_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("loss weights {:?} must be finite and non-negative", self.loss_weights));
        }
        if !self.loss_weights.is_empty() && self.loss_weights.iter().all(|&w| w == 0.0) {
            return bad("at least one loss weight must be positive".into());
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad(format!("lr milestones {:?} outside [0, 1]", self.lr_milestones));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr decay {} outside (0, 1]", self.lr_decay));
        }
        Ok(())
    }

    /// Weights for `net`'s levels. A standalone network takes either a
    /// single weight or the weight of its level from a full list.
    pub fn weights_for<T: Element>(&self, net: &ParserNet<T>) -> Result<Vec<f64>> {
        let levels = net.levels();
        let total = net.hierarchy().num_levels();
        match self.loss_weights.len() {
            0 => Ok(vec![1.0; levels.len()]),
            n if n == levels.len() => Ok(self.loss_weights.clone()),
            n if n == total && levels.len() == 1 => Ok(vec![self.loss_weights[levels[0]]]),
            n => Err(Error::invalid(
                "train config",
                format!("{n} loss weights for a network with {} levels", levels.len()),
            )),
        }
    }

    /// Learning rate at `step` of a `total_steps` budget.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| step >= (m * total_steps as f64).floor() as usize)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Labels of one level for a batch, at label resolution.
#[derive(Debug, Clone, Copy)]
pub struct LevelTargets<'a> {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major N·H·W class indices.
    pub labels: &'a [u16],
}

#[derive(Debug, Clone)]
pub struct HierarchicalLoss {
    pub total: Var,
    pub levels: Vec<Var>,
}

/// `Σ λ_i · CE(up(P_i), y_i)`, each score map bilinearly upsampled to its
/// labels' resolution first. Levels with a zero weight are evaluated but left
/// out of the total.
pub fn hierarchical_loss<T: Element>(
    tape: &mut Tape<T>,
    scores: &[Var],
    targets: &[LevelTargets<'_>],
    weights: &[f64],
) -> Result<HierarchicalLoss> {
    if scores.len() != targets.len() || scores.len() != weights.len() {
        return Err(Error::invalid(
            "hierarchical_loss",
            format!(
                "{} score maps, {} label sets, {} weights",
                scores.len(),
                targets.len(),
                weights.len()
            ),
        ));
    }
    if scores.is_empty() {
        return Err(Error::invalid("hierarchical_loss", "no levels"));
    }
    let mut levels = Vec::with_capacity(scores.len());
    let mut total: Option<Var> = None;
    for (i, ((&s, t), &w)) in scores.iter().zip(targets).zip(weights).enumerate() {
        let shape = tape.shape(s).to_vec();
        if shape.len() != 4 || shape[1] != t.classes {
            return Err(Error::invalid(
                "hierarchical_loss",
                format!("level {i}: scores {shape:?} for {} classes", t.classes),
            ));
        }
        let up = if (shape[2], shape[3]) == (t.height, t.width) {
            s
        } else {
            tape.upsample_bilinear(s, t.height, t.width)?
        };
        let loss = tape.softmax_cross_entropy(up, t.labels, None)?;
        levels.push(loss);
        if w != 0.0 {
            let term = if w == 1.0 {
                loss
            } else {
                tape.scale(loss, T::from_f64_lossy(w))
            };
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::invalid("hierarchical_loss", "all weights are zero"))?;
    Ok(HierarchicalLoss { total, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub level_losses: Vec<f64>,
    pub total: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub weights: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Largest `|total − Σ λ_i L_i|` over all records.
    pub fn max_decomposition_error(&self) -> f64 {
        self.steps
            .iter()
            .map(|r| {
                let sum: f64 = r
                    .level_losses
                    .iter()
                    .zip(&self.weights)
                    .map(|(l, w)| l * w)
                    .sum();
                (r.total - sum).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Predicts every sample of `ds` in batches of `batch` and scores the
/// predictions against its labels.
pub fn evaluate<T: Element>(net: &ParserNet<T>, ds: &Dataset, batch: usize) -> Result<MetricsReport> {
    let preds = predict_dataset(net, ds, batch)?;
    let gts: Vec<LabelMapSet> = ds.samples.iter().map(|s| s.labels.clone()).collect();
    MetricsReport::evaluate(&preds, &gts, net.hierarchy(), net.levels())
}

pub fn predict_dataset<T: Element>(
    net: &ParserNet<T>,
    ds: &Dataset,
    batch: usize,
) -> Result<Vec<LabelMapSet>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(net.predict(&ds.image_batch::<T>(chunk)?)?);
    }
    Ok(out)
}

fn check_dataset<T: Element>(net: &ParserNet<T>, ds: &Dataset, what: &'static str) -> Result<()> {
    if ds.hierarchy_hash != net.hierarchy().hash() {
        return Err(Error::HashMismatch {
            left: ds.hierarchy_hash,
            right: net.hierarchy().hash(),
        });
    }
    if ds.samples.iter().any(|s| s.labels.len() != net.hierarchy().num_levels()) {
        return Err(Error::invalid(what, "samples must carry every hierarchy level"));
    }
    Ok(())
}

pub fn train<T: Element>(
    net: &mut ParserNet<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(net, train_set, val_set, cfg, |_, _| Ok(()))
}

/// Trains `net` in place. `snapshot(epoch, net)` runs after every
/// `cfg.snapshot_every`-th epoch (1-based).
pub fn train_with<T: Element>(
    net: &mut ParserNet<T>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut snapshot: impl FnMut(usize, &ParserNet<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.mode != net.mode() {
        return Err(Error::ModeMismatch {
            expected: cfg.mode.to_string(),
            found: net.mode().to_string(),
        });
    }
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    check_dataset(net, train_set, "train")?;
    if let Some(v) = val_set {
        check_dataset(net, v, "train")?;
    }
    let weights = cfg.weights_for(net)?;
    let levels = net.levels().to_vec();
    let classes: Vec<usize> = levels.iter().map(|&l| net.hierarchy().num_classes(l)).collect();
    let (lh, lw) = (train_set.height, train_set.width);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum)?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut log = TrainLog {
        weights: weights.clone(),
        steps: Vec::with_capacity(total_steps),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut tape = Tape::new();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            tape.clear();
            let bound = net.bind(&mut tape);
            let image = tape.constant(train_set.image_batch::<T>(batch)?);
            let scores = net.forward(&mut tape, &bound, image)?;
            let labels: Vec<Vec<u16>> = levels.iter().map(|&l| train_set.label_batch(batch, l)).collect();
            let targets: Vec<LevelTargets> = labels
                .iter()
                .zip(&classes)
                .map(|(l, &c)| LevelTargets {
                    classes: c,
                    height: lh,
                    width: lw,
                    labels: l,
                })
                .collect();
            let loss = hierarchical_loss(&mut tape, &scores, &targets, &weights)?;
            let total = tape.scalar(loss.total).as_f64();
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(loss.total)?;
            net.collect_grads(&tape, &bound);
            let lr = cfg.lr_at(step, total_steps);
            let mut params: Vec<_> = net.params_mut().iter_mut().map(|p| &mut p.tensor).collect();
            sgd.step(&mut params, lr)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                level_losses: loss.levels.iter().map(|&v| tape.scalar(v).as_f64()).collect(),
                total,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            epoch_total += total;
            step += 1;
        }
        let due = if cfg.validate_every == 0 {
            epoch == cfg.epochs
        } else {
            epoch % cfg.validate_every == 0 || epoch == cfg.epochs
        };
        let validation = match val_set {
            Some(v) if due => Some(evaluate(net, v, EVAL_BATCH)?),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_total: epoch_total / steps_per_epoch as f64,
            validation,
        });
        if cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0 {
            snapshot(epoch, net)?;
        }
    }
    Ok(log)
}

/// Network shape shared by every variant of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_channels: usize,
    pub head_conv_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head_channels: 16,
            head_conv_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn net_config(&self, h: &LabelHierarchy) -> NetConfig {
        NetConfig::for_hierarchy(h, self.encoder.clone(), self.head_channels, self.head_conv_layers)
    }
}

/// Builds the untrained network(s) of `mode`: one per level for standalone.
pub fn build_nets<T: Element>(
    mode: ArchMode,
    model: &ModelConfig,
    h: &LabelHierarchy,
    seed: u64,
) -> Result<Vec<ParserNet<T>>> {
    let cfg = model.net_config(h);
    match mode {
        ArchMode::Standalone => (0..h.num_levels())
            .map(|level| ParserNet::standalone(cfg.clone(), h.clone(), level, seed))
            .collect(),
        _ => Ok(vec![ParserNet::new(mode, cfg, h.clone(), seed)?]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: ArchMode,
    /// Validation mIoU per level, coarse → fine.
    pub miou: Vec<f64>,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub levels: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: ArchMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == mode)
    }

    /// `strategy,<level>_miou,...` with one row per strategy.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy");
        for l in &self.levels {
            s.push_str(&format!(",{l}_miou"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(r.strategy.name());
            for m in &r.miou {
                s.push_str(&format!(",{m:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Trained networks and logs of one strategy.
pub struct VariantRun<T> {
    pub mode: ArchMode,
    pub nets: Vec<ParserNet<T>>,
    pub logs: Vec<TrainLog>,
    pub row: AblationRow,
}

/// Trains and evaluates one strategy. Standalone trains one network per
/// level with the same budget and seed, and their predictions are scored as
/// one multi-level prediction.
pub fn run_variant<T: Element>(
    mode: ArchMode,
    train_set: &Dataset,
    val_set: &Dataset,
    model: &ModelConfig,
    h: &LabelHierarchy,
    base: &TrainConfig,
) -> Result<VariantRun<T>> {
    let mut nets = build_nets::<T>(mode, model, h, base.seed)?;
    let cfg = TrainConfig {
        mode,
        validate_every: 0,
        ..base.clone()
    };
    let mut logs = Vec::with_capacity(nets.len());
    for net in &mut nets {
        logs.push(train(net, train_set, None, &cfg)?);
    }
    let mut preds: Vec<LabelMapSet> = (0..val_set.len()).map(|_| LabelMapSet { maps: vec![] }).collect();
    let mut levels = Vec::new();
    for net in &nets {
        for (set, p) in preds.iter_mut().zip(predict_dataset(net, val_set, EVAL_BATCH)?) {
            set.maps.extend(p.maps);
        }
        levels.extend_from_slice(net.levels());
    }
    let gts: Vec<LabelMapSet> = val_set.samples.iter().map(|s| s.labels.clone()).collect();
    let report = MetricsReport::evaluate(&preds, &gts, h, &levels)?;
    let row = AblationRow {
        strategy: mode,
        miou: report.levels.iter().map(|l| l.miou).collect(),
        consistency: report.consistency,
    };
    Ok(VariantRun { mode, nets, logs, row })
}

/// The four strategies under one budget and seed.
pub fn run_ablation<T: Element>(
    train_set: &Dataset,
    val_set: &Dataset,
    model: &ModelConfig,
    h: &LabelHierarchy,
    base: &TrainConfig,
) -> Result<AblationTable> {
    let rows = ArchMode::ALL
        .iter()
        .map(|&m| run_variant::<T>(m, train_set, val_set, model, h, base).map(|r| r.row))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        levels: h.levels().iter().map(|l| l.name.clone()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_halves_at_milestones() {
        let cfg = TrainConfig::default();
        let cfg = TrainConfig { lr: 0.04, ..cfg };
        assert_eq!(cfg.lr_at(0, 100), 0.04);
        assert_eq!(cfg.lr_at(59, 100), 0.04);
        assert_eq!(cfg.lr_at(60, 100), 0.02);
        assert_eq!(cfg.lr_at(85, 100), 0.01);
    }

    #[test]
    fn uniform_logits_give_log_class_counts() {
        let mut tape = Tape::<f64>::new();
        let counts = [3usize, 6, 11];
        let labels: Vec<Vec<u16>> = counts.iter().map(|&c| vec![(c - 1) as u16; 4]).collect();
        let scores: Vec<Var> = counts
            .iter()
            .map(|&c| tape.constant(crate::tensor::Tensor::zeros(vec![1, c, 2, 2])))
            .collect();
        let targets: Vec<LevelTargets> = labels
            .iter()
            .zip(counts)
            .map(|(l, c)| LevelTargets {
                classes: c,
                height: 2,
                width: 2,
                labels: l,
            })
            .collect();
        let loss = hierarchical_loss(&mut tape, &scores, &targets, &[1.0; 3]).unwrap();
        let want = 3f64.ln() + 6f64.ln() + 11f64.ln();
        assert!((tape.scalar(loss.total) - want).abs() < 1e-12);
        assert!((want - 5.2883).abs() < 1e-4);

        let fine_only = hierarchical_loss(&mut tape, &scores, &targets, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(tape.scalar(fine_only.total), tape.scalar(fine_only.levels[2]));

        assert!(hierarchical_loss(&mut tape, &scores, &targets[..2], &[1.0; 3]).is_err());
        let wrong = LevelTargets {
            classes: 5,
            ..targets[1]
        };
        assert!(hierarchical_loss(&mut tape, &scores[..1], &[wrong], &[1.0]).is_err());
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { loss_weights: vec![1.0, -1.0, 1.0], ..ok.clone() },
            TrainConfig { loss_weights: vec![0.0, 0.0], ..ok.clone() },
            TrainConfig { lr: f64::NAN, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
