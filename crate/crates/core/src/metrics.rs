//! Classification and segmentation metrics and the evaluation report.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Network, NUM_CLASSES};
use crate::synthdata::Dataset;
use crate::tensor::Tape;

pub type Confusion = [[usize; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Macro one-vs-rest.
    pub sensitivity: f64,
    /// Macro one-vs-rest.
    pub specificity: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Confusion,
}

/// Index of the largest probability, first on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn mean_of(values: impl Iterator<Item = Option<f64>>, what: &str) -> f64 {
    let present: Vec<f64> = values.flatten().collect();
    if present.len() < NUM_CLASSES {
        log::warn!("{what}: {} of {NUM_CLASSES} classes undefined, averaged over the rest", NUM_CLASSES - present.len());
    }
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn classification_metrics(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<ClassificationMetrics> {
    if probs.is_empty() {
        return Err(Error::Usage("no predictions to score".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("classification_metrics", probs.len(), labels.len()));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (p, &y) in probs.iter().zip(labels) {
        if y >= NUM_CLASSES {
            return Err(Error::Usage(format!("label {y} out of range")));
        }
        confusion[y][argmax(p)] += 1;
    }
    let n = probs.len();
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let per_class = |c: usize| {
        let tp = confusion[c][c];
        let positives: usize = confusion[c].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let fp = predicted - tp;
        let negatives = n - positives;
        let sens = (positives > 0).then(|| tp as f64 / positives as f64);
        let spec = (negatives > 0).then(|| (negatives - fp) as f64 / negatives as f64);
        (sens, spec)
    };
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n as f64,
        sensitivity: mean_of((0..NUM_CLASSES).map(|c| per_class(c).0), "sensitivity"),
        specificity: mean_of((0..NUM_CLASSES).map(|c| per_class(c).1), "specificity"),
        confusion,
    })
}

/// Mann-Whitney AUC with ties counted one half; `None` unless both classes
/// are present.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "auc inputs");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over the classes whose split is defined.
pub fn macro_auc(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Option<f64> {
    let per: Vec<f64> = (0..NUM_CLASSES)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let a = auc(&scores, &pos);
            if a.is_none() {
                log::warn!("auc undefined for class {c}: only one class present");
            }
            a
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

/// `2|A and B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice inputs");
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let total = pred.iter().filter(|&&a| a).count() + gt.iter().filter(|&&b| b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// `|A and B| / |A or B|`, 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "iou inputs");
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let union = pred.iter().zip(gt).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean of foreground and background IoU.
pub fn miou(pred: &[bool], gt: &[bool]) -> f64 {
    let inv = |m: &[bool]| m.iter().map(|v| !v).collect::<Vec<_>>();
    (iou(pred, gt) + iou(&inv(pred), &inv(gt))) / 2.0
}

pub fn threshold(values: &[f64], at: f64) -> Vec<bool> {
    values.iter().map(|&v| v >= at).collect()
}

/// Short stable hash of a resolved configuration text.
pub fn fingerprint(config_text: &str) -> String {
    format!("{:016x}", crate::seeds::for_id(0, config_text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Absent when no one-vs-rest split has both classes.
    pub auc: Option<f64>,
    /// Mean per-slice dice over the segmentation test set.
    pub dice: f64,
    /// Mean per-slice two-class IoU over the segmentation test set.
    pub miou: f64,
    pub confusion: Confusion,
    pub classification_samples: usize,
    pub segmentation_samples: usize,
    pub threshold: f64,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn confusion_csv(&self) -> String {
        let names = ["np", "cap", "covid"];
        let mut out = String::from("true\\pred,np,cap,covid\n");
        for (name, row) in names.iter().zip(&self.confusion) {
            out.push_str(&format!("{name},{},{},{}\n", row[0], row[1], row[2]));
        }
        out
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.confusion_csv().as_bytes())
    }
}

/// Class probabilities and decoder map for one image, single precision.
pub fn predict(net: &Network, image: &[f64], size: usize, multiscale: bool) -> Result<([f64; NUM_CLASSES], Vec<f64>)> {
    let mut tape = Tape::<f32>::new();
    let bound = net.bind(&mut tape, false);
    let x = Network::image_leaf(&mut tape, image, (size, size), false)?;
    let mut bundle = net.encoder_forward(&mut tape, &bound, x)?;
    let probs = net.classify(&mut tape, &mut bundle, multiscale)?;
    let seg = net.decode(&mut tape, &bound, &bundle)?;
    let p = tape.value_f64(probs);
    Ok(([p[0], p[1], p[2]], tape.value_f64(seg)))
}

/// Score `net` on the dataset's test partitions.
pub fn evaluate(net: &Network, data: &Dataset, seg_threshold: f64, multiscale: bool, config_fingerprint: &str) -> Result<EvalReport> {
    let test = data.partition(&data.manifest.test_classification)?;
    let outputs: Vec<([f64; NUM_CLASSES], Vec<f64>)> =
        test.par_iter().map(|s| predict(net, &s.image, data.size, multiscale)).collect::<Result<_>>()?;
    let probs: Vec<[f64; NUM_CLASSES]> = outputs.iter().map(|o| o.0).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.class.index()).collect();
    let cls = classification_metrics(&probs, &labels)?;

    let seg_ids: std::collections::HashSet<&str> = data.manifest.test_segmentation.iter().map(String::as_str).collect();
    let (mut dice_sum, mut miou_sum, mut seg_n) = (0.0, 0.0, 0usize);
    for (s, (_, seg)) in test.iter().zip(&outputs) {
        if !seg_ids.contains(s.id.as_str()) {
            continue;
        }
        let gt = threshold(s.mask.as_deref().ok_or_else(|| Error::Config(format!("test sample {} has no mask", s.id)))?, 0.5);
        let pred = threshold(seg, seg_threshold);
        dice_sum += dice(&pred, &gt);
        miou_sum += miou(&pred, &gt);
        seg_n += 1;
    }
    let denom = seg_n.max(1) as f64;
    Ok(EvalReport {
        accuracy: cls.accuracy,
        sensitivity: cls.sensitivity,
        specificity: cls.specificity,
        auc: macro_auc(&probs, &labels),
        dice: dice_sum / denom,
        miou: miou_sum / denom,
        confusion: cls.confusion,
        classification_samples: test.len(),
        segmentation_samples: seg_n,
        threshold: seg_threshold,
        config_fingerprint: config_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_counts() {
        let perfect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = classification_metrics(&perfect, &[0, 1, 2]).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
        let all_zero = [[0.9, 0.05, 0.05]; 6];
        let m = classification_metrics(&all_zero, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!(classification_metrics(&[], &[]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]), Some(0.75));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
    }

    #[test]
    fn overlap_cases() {
        let a = [true, true, true, true, false, false];
        let b = [true, true, false, false, true, true];
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &b), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]), 0.0);
        let half = [true, true, false, false];
        let other = [false, false, true, true];
        assert_eq!(miou(&half, &other), 0.0);
        assert_eq!(miou(&half, &half), 1.0);
    }

    #[test]
    fn miou_on_a_four_by_four_instance() {
        // pred covers rows 0-1 (8 px), truth covers columns 0-1 (8 px): 4 shared
        let pred: Vec<bool> = (0..16).map(|i| i / 4 < 2).collect();
        let gt: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let fg = 4.0 / 12.0;
        let bg = 4.0 / 12.0;
        assert!((miou(&pred, &gt) - (fg + bg) / 2.0).abs() < 1e-15);
        let mut sub: Vec<bool> = vec![false; 16];
        sub[..6].iter_mut().for_each(|v| *v = true);
        let truth: Vec<bool> = (0..16).map(|i| i < 2).collect();
        // fg IoU 2/6, bg IoU 10/14
        assert!((miou(&sub, &truth) - (2.0 / 6.0 + 10.0 / 14.0) / 2.0).abs() < 1e-15);
    }
}
