//! Confusion matrices, mean IoU, pixel precision/recall/F1 summaries and a
//! cross-level consistency score.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelMap, LabelMapSet, BACKGROUND};

/// Square count matrix; rows are groundtruth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::invalid(
                "confusion",
                format!("{} counts for {classes} classes", counts.len()),
            ));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Tallies one prediction against its groundtruth.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                left: vec![pred.height, pred.width],
                right: vec![gt.height, gt.width],
            });
        }
        gt.check_range(self.classes)?;
        pred.check_range(self.classes)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(
                "confusion",
                format!("cannot add {} to {} classes", other.classes, self.classes),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both groundtruth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.row_sum(c) + self.col_sum(c) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClasses {
    /// Leave classes absent from both maps out of the mean.
    #[default]
    Exclude,
    /// Count them as IoU 0.
    CountZero,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    miou_with(cm, AbsentClasses::Exclude)
}

pub fn miou_with(cm: &ConfusionMatrix, absent: AbsentClasses) -> Result<f64> {
    let ious = cm.class_iou();
    if ious.iter().all(Option::is_none) {
        return Err(Error::invalid("miou", "every class is absent"));
    }
    let vals: Vec<f64> = match absent {
        AbsentClasses::Exclude => ious.into_iter().flatten().collect(),
        AbsentClasses::CountZero => ious.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
    };
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtrMetrics {
    pub accuracy: f64,
    /// `None` when the groundtruth has no foreground pixels.
    pub fg_accuracy: Option<f64>,
    pub avg_precision: Option<f64>,
    pub avg_recall: Option<f64>,
    pub avg_f1: Option<f64>,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Pixel accuracy, foreground accuracy and foreground-averaged
/// precision / recall / F1. Foreground classes absent from both groundtruth
/// and prediction do not enter the averages.
pub fn atr_metrics(cm: &ConfusionMatrix, background: usize) -> Result<AtrMetrics> {
    if cm.classes() < 2 {
        return Err(Error::invalid("atr_metrics", "need at least two classes"));
    }
    if background >= cm.classes() {
        return Err(Error::invalid("atr_metrics", "background index out of range"));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("atr_metrics", "empty confusion matrix"));
    }
    let accuracy = cm.trace() as f64 / total as f64;

    let fg: Vec<usize> = (0..cm.classes()).filter(|&c| c != background).collect();
    let fg_gt: u64 = fg.iter().map(|&c| cm.row_sum(c)).sum();
    let fg_hit: u64 = fg.iter().map(|&c| cm.get(c, c)).sum();
    let fg_accuracy = (fg_gt > 0).then(|| fg_hit as f64 / fg_gt as f64);

    let (mut p_sum, mut r_sum, mut f_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for &c in &fg {
        let (tp, gt, pred) = (cm.get(c, c), cm.row_sum(c), cm.col_sum(c));
        if gt == 0 && pred == 0 {
            continue;
        }
        let p = if pred > 0 { tp as f64 / pred as f64 } else { 0.0 };
        let r = if gt > 0 { tp as f64 / gt as f64 } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f1(p, r);
        n += 1;
    }
    let avg = |s: f64| (n > 0).then(|| s / n as f64);
    Ok(AtrMetrics {
        accuracy,
        fg_accuracy,
        avg_precision: avg(p_sum),
        avg_recall: avg(r_sum),
        avg_f1: avg(f_sum),
    })
}

/// Fraction of pixels whose finer prediction, merged one level up, agrees
/// with the coarser prediction; averaged over adjacent level pairs.
pub fn consistency(preds: &LabelMapSet, h: &LabelHierarchy) -> f64 {
    let pairs = preds.len().min(h.num_levels()).saturating_sub(1);
    if pairs == 0 {
        return 1.0;
    }
    let mut acc = 0.0;
    for k in 0..pairs {
        let step = h.levels()[k].merge_from_finer.as_ref().expect("validated");
        let (coarse, fine) = (&preds.maps[k], &preds.maps[k + 1]);
        let agree = coarse
            .data
            .iter()
            .zip(&fine.data)
            .filter(|(&c, &f)| step.get(f as usize) == Some(&c))
            .count();
        acc += agree as f64 / coarse.data.len().max(1) as f64;
    }
    acc / pairs as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelMetrics {
    pub level: String,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    #[serde(flatten)]
    pub atr: AtrMetrics,
    pub confusion: ConfusionMatrix,
}

impl LevelMetrics {
    pub fn from_confusion(level: &str, cm: ConfusionMatrix) -> Result<Self> {
        Ok(LevelMetrics {
            level: level.to_string(),
            miou: miou(&cm)?,
            class_iou: cm.class_iou(),
            atr: atr_metrics(&cm, BACKGROUND as usize)?,
            confusion: cm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub levels: Vec<LevelMetrics>,
    pub consistency: f64,
}

impl MetricsReport {
    /// Evaluates paired predictions and groundtruth over a whole split.
    /// `levels` gives the hierarchy level of each prediction map.
    pub fn evaluate(
        preds: &[LabelMapSet],
        gts: &[LabelMapSet],
        h: &LabelHierarchy,
        levels: &[usize],
    ) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::invalid(
                "evaluate",
                format!("{} predictions for {} samples", preds.len(), gts.len()),
            ));
        }
        let mut cms: Vec<ConfusionMatrix> = levels
            .iter()
            .map(|&l| ConfusionMatrix::new(h.num_classes(l)))
            .collect();
        for (p, g) in preds.iter().zip(gts) {
            for (slot, &l) in levels.iter().enumerate() {
                cms[slot].accumulate(&p.maps[slot], &g.maps[l])?;
            }
        }
        let mut consistency_sum = 0.0;
        let full = levels.len() == h.num_levels();
        if full {
            for p in preds {
                consistency_sum += consistency(p, h);
            }
        }
        let levels = levels
            .iter()
            .zip(cms)
            .map(|(&l, cm)| LevelMetrics::from_confusion(&h.levels()[l].name, cm))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            levels,
            consistency: if full && !preds.is_empty() {
                consistency_sum / preds.len() as f64
            } else {
                f64::NAN
            },
        })
    }
}
