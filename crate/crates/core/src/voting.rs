//! Per-superpoint semantic scores from multi-view masks.
//!
//! `s[i][j]` is the fraction of visible (point, view) pairs of superpoint `i`
//! whose projection lands inside some category-`j` mask of that view.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{ViewRender, EMPTY_PIXEL};
use crate::masks::MaskSet;
use crate::par;
use crate::superpoints::SuperpointPartition;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticScores {
    num_categories: usize,
    /// Row-major superpoints x categories.
    scores: Vec<f64>,
    labels: Vec<Option<u32>>,
}

impl SemanticScores {
    pub fn num_superpoints(&self) -> usize {
        self.labels.len()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn score(&self, superpoint: usize, category: usize) -> f64 {
        self.scores[superpoint * self.num_categories + category]
    }

    pub fn row(&self, superpoint: usize) -> &[f64] {
        let c = self.num_categories;
        &self.scores[superpoint * c..(superpoint + 1) * c]
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn label(&self, superpoint: usize) -> Option<u32> {
        self.labels[superpoint]
    }

    /// Superpoint labels broadcast to their member points.
    pub fn point_labels(&self, partition: &SuperpointPartition) -> Vec<Option<u32>> {
        partition
            .assignment()
            .iter()
            .map(|&s| self.labels[s as usize])
            .collect()
    }

    /// Rows `superpoint_id,category_id,score` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("superpoint_id,category_id,score\n");
        for i in 0..self.num_superpoints() {
            for j in 0..self.num_categories {
                out.push_str(&format!("{i},{j},{}\n", self.score(i, j)));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Newline-delimited labels; `-1` marks unassigned.
pub fn labels_to_text(labels: &[Option<u32>]) -> String {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        match l {
            Some(c) => out.push_str(&c.to_string()),
            None => out.push_str("-1"),
        }
        out.push('\n');
    }
    out
}

pub fn labels_from_text(text: &str) -> Result<Vec<Option<u32>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.trim().parse::<i64>() {
            Ok(-1) => Ok(None),
            Ok(c) if c >= 0 && c <= u32::MAX as i64 => Ok(Some(c as u32)),
            _ => Err(Error::format("label file", format!("bad label '{l}'"))),
        })
        .collect()
}

/// Map view id to its render, checking every masked view is covered.
pub(crate) fn render_index<'a>(renders: &'a [ViewRender], masks: &MaskSet) -> Result<BTreeMap<u32, &'a ViewRender>> {
    let index: BTreeMap<u32, &ViewRender> = renders.iter().map(|r| (r.view_id, r)).collect();
    for m in masks.masks() {
        let r = index
            .get(&m.view_id)
            .ok_or_else(|| Error::contract(format!("no render for masked view {}", m.view_id)))?;
        if m.bitmap.height() != r.height || m.bitmap.width() != r.width {
            return Err(Error::contract(format!(
                "mask size differs from view {} image size",
                m.view_id
            )));
        }
    }
    Ok(index)
}

/// Score every superpoint against every category and assign labels.
///
/// A superpoint is labelled with its highest-scoring category (ties to the
/// lower id) when that score is positive and at least `assign_threshold`.
pub fn vote(
    partition: &SuperpointPartition,
    renders: &[ViewRender],
    masks: &MaskSet,
    num_categories: usize,
    assign_threshold: f64,
) -> Result<SemanticScores> {
    render_index(renders, masks)?;
    if masks.num_categories() > num_categories {
        return Err(Error::contract("mask category id exceeds num_categories"));
    }
    let s = partition.len();
    let c = num_categories;
    let by_view = masks.by_view();

    // per-view integer counts, reduced in view order
    let partials = par::map(renders, |render| {
        let mut denom = vec![0u64; s];
        let mut numer = vec![0u64; s * c];
        let mask_ids = by_view.get(&render.view_id).map(Vec::as_slice).unwrap_or(&[]);
        let mut covered: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        for &i in mask_ids {
            let m = &masks.masks()[i];
            let cover = covered
                .entry(m.category)
                .or_insert_with(|| vec![false; render.pixel_count()]);
            for (q, &b) in m.bitmap.bits().iter().enumerate() {
                cover[q] |= b;
            }
        }
        for (p, &vis) in render.visible.iter().enumerate() {
            if !vis {
                continue;
            }
            let sp = partition.superpoint_of(p) as usize;
            denom[sp] += 1;
            let q = render.point_pixel[p];
            if q == EMPTY_PIXEL {
                continue;
            }
            for (&cat, cover) in &covered {
                if cover[q as usize] {
                    numer[sp * c + cat as usize] += 1;
                }
            }
        }
        (denom, numer)
    });
    let mut denom = vec![0u64; s];
    let mut numer = vec![0u64; s * c];
    for (d, n) in partials {
        denom.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        numer.iter_mut().zip(&n).for_each(|(a, b)| *a += b);
    }

    let mut scores = vec![0.0; s * c];
    let mut labels = vec![None; s];
    for i in 0..s {
        if denom[i] == 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..c {
            let v = numer[i * c + j] as f64 / denom[i] as f64;
            scores[i * c + j] = v;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v > 0.0 && v >= assign_threshold {
                labels[i] = Some(j as u32);
            }
        }
    }
    Ok(SemanticScores {
        num_categories: c,
        scores,
        labels,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::ViewRender;
    use crate::masks::{Bitmap, InstanceMask2D};
    use crate::superpoints::SuperpointPartition;

    /// A hand-built render where point `p` sits alone at pixel `p` of a 1-row image.
    pub(crate) fn strip_render(view_id: u32, visible: Vec<bool>, width: usize) -> ViewRender {
        let n = visible.len();
        let mut pixel_to_point = vec![EMPTY_PIXEL; width];
        let mut depth = vec![f64::INFINITY; width];
        for p in 0..n {
            if visible[p] {
                pixel_to_point[p] = p as u32;
                depth[p] = 1.0;
            }
        }
        ViewRender {
            view_id,
            height: 1,
            width,
            pixel_to_point,
            depth,
            visible,
            point_pixel: (0..n as u32).collect(),
        }
    }

    pub(crate) fn strip_mask(view_id: u32, category: u32, width: usize, on: &[usize]) -> InstanceMask2D {
        let mut bits = vec![false; width];
        for &q in on {
            bits[q] = true;
        }
        InstanceMask2D {
            view_id,
            category,
            bitmap: Bitmap::from_bits(1, width, bits).unwrap(),
        }
    }

    fn one_superpoint(n: usize) -> SuperpointPartition {
        SuperpointPartition::from_assignment(vec![0; n], &vec![vec![]; n]).unwrap()
    }

    #[test]
    fn three_of_four_visible_points_covered() {
        // five points, point 4 hidden; mask covers points 0, 1, 2 and hidden 4's pixel
        let render = strip_render(0, vec![true, true, true, true, false], 8);
        let masks = MaskSet::new(vec![strip_mask(0, 1, 8, &[0, 1, 2, 4])]).unwrap();
        let s = vote(&one_superpoint(5), &[render], &masks, 2, 0.0).unwrap();
        assert_eq!(s.score(0, 1), 0.75);
        assert_eq!(s.score(0, 0), 0.0);
        assert_eq!(s.label(0), Some(1));
    }

    #[test]
    fn no_masks_means_unassigned() {
        let render = strip_render(0, vec![true; 3], 4);
        let s = vote(&one_superpoint(3), &[render], &MaskSet::default(), 3, 0.0).unwrap();
        assert!(s.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(s.labels(), &[None]);
    }

    #[test]
    fn full_coverage_scores_one() {
        let renders = vec![
            strip_render(0, vec![true; 3], 4),
            strip_render(1, vec![true, false, true], 4),
        ];
        let masks = MaskSet::new(vec![
            strip_mask(0, 0, 4, &[0, 1]),
            strip_mask(0, 0, 4, &[2]),
            strip_mask(1, 0, 4, &[0, 2, 3]),
        ])
        .unwrap();
        let s = vote(&one_superpoint(3), &renders, &masks, 1, 0.0).unwrap();
        assert_eq!(s.score(0, 0), 1.0);
    }

    #[test]
    fn invisible_superpoint_unassigned_and_extra_view_dilutes() {
        let part = SuperpointPartition::from_assignment(vec![0, 0, 1], &vec![vec![]; 3]).unwrap();
        let v0 = strip_render(0, vec![true, true, false], 4);
        let masks = MaskSet::new(vec![strip_mask(0, 0, 4, &[0])]).unwrap();
        let s1 = vote(&part, std::slice::from_ref(&v0), &masks, 1, 0.0).unwrap();
        assert_eq!(s1.score(0, 0), 0.5);
        assert_eq!(s1.label(1), None);
        let v1 = strip_render(1, vec![true, true, true], 4);
        let s2 = vote(&part, &[v0, v1], &masks, 1, 0.0).unwrap();
        assert_eq!(s2.score(0, 0), 0.25);
        assert!(s2.score(0, 0) <= s1.score(0, 0));
    }

    #[test]
    fn ties_go_to_lower_category_and_threshold_applies() {
        let render = strip_render(0, vec![true, true], 2);
        let masks = MaskSet::new(vec![strip_mask(0, 2, 2, &[0]), strip_mask(0, 1, 2, &[1])]).unwrap();
        let s = vote(&one_superpoint(2), std::slice::from_ref(&render), &masks, 3, 0.0).unwrap();
        assert_eq!(s.label(0), Some(1));
        let s = vote(&one_superpoint(2), &[render], &masks, 3, 0.6).unwrap();
        assert_eq!(s.label(0), None);
    }

    #[test]
    fn missing_render_is_contract_violation() {
        let masks = MaskSet::new(vec![strip_mask(5, 0, 2, &[0])]).unwrap();
        let err = vote(&one_superpoint(2), &[strip_render(0, vec![true; 2], 2)], &masks, 1, 0.0);
        assert!(err.unwrap_err().is_contract_violation());
    }

    #[test]
    fn label_text_round_trip() {
        let labels = vec![Some(3), None, Some(0)];
        assert_eq!(labels_to_text(&labels), "3\n-1\n0\n");
        assert_eq!(labels_from_text("3\n-1\n0\n").unwrap(), labels);
        assert!(labels_from_text("x\n").is_err());
    }
}
