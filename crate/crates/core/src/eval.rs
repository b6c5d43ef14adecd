//! Semantic mIoU and instance AP at IoU 0.5.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::InstanceSegmentation;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanScores {
    /// Per requested category; `None` when the category is absent from both sides.
    pub per_category: Vec<(u32, Option<f64>)>,
    pub mean: f64,
}

fn mean_of_present(per_category: &[(u32, Option<f64>)]) -> f64 {
    let present: Vec<f64> = per_category.iter().filter_map(|(_, v)| *v).collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Per-category IoU of point labels, skipping points without a ground-truth label.
pub fn miou(pred: &[Option<u32>], gt: &[Option<u32>], categories: &[u32]) -> Result<MeanScores> {
    if pred.len() != gt.len() {
        return Err(Error::contract("prediction and ground truth lengths differ"));
    }
    let per_category: Vec<(u32, Option<f64>)> = categories
        .iter()
        .map(|&c| {
            let mut inter = 0u64;
            let mut union = 0u64;
            for (p, g) in pred.iter().zip(gt) {
                let Some(g) = *g else { continue };
                let in_p = *p == Some(c);
                let in_g = g == c;
                inter += (in_p && in_g) as u64;
                union += (in_p || in_g) as u64;
            }
            (c, (union > 0).then(|| inter as f64 / union as f64))
        })
        .collect();
    let mean = mean_of_present(&per_category);
    Ok(MeanScores { per_category, mean })
}

/// Area under the precision-recall curve with all-points interpolation.
/// `tp` lists detections in ranked order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Per-category AP at IoU 0.5 with greedy matching in confidence order.
pub fn map50(pred: &InstanceSegmentation, gt: &InstanceSegmentation, categories: &[u32]) -> Result<MeanScores> {
    if pred.num_points() != gt.num_points() {
        return Err(Error::contract("prediction and ground truth lengths differ"));
    }
    let gt_sizes: Vec<usize> = gt.instances().iter().map(|g| g.members.len()).collect();
    let per_category: Vec<(u32, Option<f64>)> = categories
        .iter()
        .map(|&c| {
            let gts: Vec<usize> = (0..gt.len()).filter(|&g| gt.instances()[g].category == c).collect();
            if gts.is_empty() {
                return (c, None);
            }
            let mut preds: Vec<usize> = (0..pred.len()).filter(|&p| pred.instances()[p].category == c).collect();
            preds.sort_by(|&a, &b| {
                pred.instances()[b]
                    .confidence
                    .total_cmp(&pred.instances()[a].confidence)
                    .then(a.cmp(&b))
            });
            let mut matched = vec![false; gt.len()];
            let tp: Vec<bool> = preds
                .iter()
                .map(|&p| {
                    let inst = &pred.instances()[p];
                    let mut inter = vec![0usize; gt.len()];
                    for &m in &inst.members {
                        if let Some(g) = gt.point_instance()[m as usize] {
                            inter[g as usize] += 1;
                        }
                    }
                    let mut best: Option<(usize, f64)> = None;
                    for &g in &gts {
                        if matched[g] {
                            continue;
                        }
                        let iou = inter[g] as f64 / (inst.members.len() + gt_sizes[g] - inter[g]) as f64;
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((g, iou));
                        }
                    }
                    match best {
                        Some((g, iou)) if iou >= IOU_THRESHOLD => {
                            matched[g] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect();
            (c, Some(average_precision(&tp, gts.len())))
        })
        .collect();
    let mean = mean_of_present(&per_category);
    Ok(MeanScores { per_category, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: u32,
    pub iou: Option<f64>,
    pub ap50: Option<f64>,
    pub predicted_instances: usize,
    pub gt_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub miou: f64,
    pub map50: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>8}  {:>8}  {:>8}  {:>6}  {:>6}",
            "category", "iou", "ap50", "pred", "gt"
        );
        for c in &self.categories {
            let _ = writeln!(
                out,
                "{:>8}  {:>8}  {:>8}  {:>6}  {:>6}",
                c.category,
                fmt(c.iou),
                fmt(c.ap50),
                c.predicted_instances,
                c.gt_instances
            );
        }
        let _ = writeln!(
            out,
            "{:>8}  {:>8}  {:>8}",
            "mean",
            fmt(Some(self.miou)),
            fmt(Some(self.map50))
        );
        out
    }
}

/// Score a prediction against ground truth. Semantic labels default to each
/// point's instance category when `pred_labels` is not given.
pub fn evaluate(
    pred: &InstanceSegmentation,
    pred_labels: Option<&[Option<u32>]>,
    gt: &InstanceSegmentation,
) -> Result<EvalReport> {
    let derived;
    let labels = match pred_labels {
        Some(l) => l,
        None => {
            derived = pred.semantic_labels();
            &derived
        }
    };
    let gt_labels = gt.semantic_labels();
    let categories: Vec<u32> = gt
        .categories()
        .into_iter()
        .chain(pred.categories())
        .chain(labels.iter().flatten().copied())
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect();
    let sem = miou(labels, &gt_labels, &categories)?;
    let ins = map50(pred, gt, &categories)?;
    let count = |s: &InstanceSegmentation, c: u32| s.instances().iter().filter(|i| i.category == c).count();
    let report = categories
        .iter()
        .zip(sem.per_category.iter().zip(&ins.per_category))
        .map(|(&c, ((_, iou), (_, ap)))| CategoryReport {
            category: c,
            iou: *iou,
            ap50: *ap,
            predicted_instances: count(pred, c),
            gt_instances: count(gt, c),
        })
        .collect();
    Ok(EvalReport {
        categories: report,
        miou: sem.mean,
        map50: ins.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_quarter_overlap() {
        // 100 points: predicted c on 0..50, ground truth c on 25..75
        let pred: Vec<Option<u32>> = (0..100).map(|i| Some(if i < 50 { 0 } else { 1 })).collect();
        let gt: Vec<Option<u32>> = (0..100)
            .map(|i| Some(if (25..75).contains(&i) { 0 } else { 1 }))
            .collect();
        let s = miou(&pred, &gt, &[0]).unwrap();
        assert!((s.per_category[0].1.unwrap() - 25.0 / 75.0).abs() < 1e-12);
    }

    #[test]
    fn miou_identity_disjoint_and_absent() {
        let l = vec![Some(0), Some(1), Some(1)];
        assert_eq!(miou(&l, &l, &[0, 1]).unwrap().mean, 1.0);
        let s = miou(&[Some(0), None], &[Some(1), Some(1)], &[0, 1, 7]).unwrap();
        assert_eq!(s.per_category[0].1, Some(0.0));
        assert_eq!(s.per_category[2].1, None);
        assert_eq!(s.mean, 0.0);
        // points without ground truth are ignored
        let s = miou(&[Some(0), Some(0)], &[Some(0), None], &[0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!(miou(&[None], &[], &[0]).is_err());
    }

    fn seg(labels: &[Option<u32>], cats: &[u32], confs: &[f64]) -> InstanceSegmentation {
        InstanceSegmentation::from_labels(labels, cats, confs).unwrap()
    }

    fn first_k(k: usize, n: usize, conf: f64) -> InstanceSegmentation {
        let labels: Vec<Option<u32>> = (0..n).map(|i| (i < k).then_some(0)).collect();
        seg(&labels, &[0], &[conf])
    }

    #[test]
    fn ap_fixtures() {
        let gt = first_k(5, 10, 1.0);
        // IoU 3/5
        assert_eq!(map50(&first_k(3, 10, 0.9), &gt, &[0]).unwrap().mean, 1.0);
        // IoU 2/5
        assert_eq!(map50(&first_k(2, 10, 0.9), &gt, &[0]).unwrap().mean, 0.0);
        let gt2 = seg(&[Some(0), Some(0), Some(1), Some(1)], &[0, 0], &[1.0; 2]);
        let one = seg(&[Some(0), Some(0), None, None], &[0], &[0.3]);
        assert!((map50(&one, &gt2, &[0]).unwrap().mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn self_match_and_empty_prediction() {
        let gt = seg(&[Some(0), Some(1), Some(2), None], &[0, 1, 0], &[0.1, 0.9, 0.4]);
        assert_eq!(map50(&gt, &gt, &[0, 1]).unwrap().mean, 1.0);
        assert_eq!(map50(&InstanceSegmentation::empty(4), &gt, &[0, 1]).unwrap().mean, 0.0);
    }

    #[test]
    fn top_false_positive_lowers_ap() {
        let gt = seg(&[Some(0), Some(0), None, None], &[0], &[1.0]);
        let good = seg(&[Some(0), Some(0), None, None], &[0], &[0.5]);
        let with_fp = seg(&[Some(0), Some(0), Some(1), Some(1)], &[0, 0], &[0.5, 0.9]);
        let a = map50(&good, &gt, &[0]).unwrap().mean;
        let b = map50(&with_fp, &gt, &[0]).unwrap().mean;
        assert!(b <= a);
        assert_eq!(b, 0.5);
    }

    #[test]
    fn all_points_interpolation() {
        // TP, FP, TP against 2 gt: precision envelope (1, 2/3, 2/3)
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn report_table_and_json() {
        let gt = seg(&[Some(0), Some(1)], &[0, 1], &[1.0; 2]);
        let r = evaluate(&gt, None, &gt).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.map50, 1.0);
        assert!(r.to_table().contains("mean"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
