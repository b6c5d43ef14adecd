//! Heuristic grouping of superpoints into initial 3D instances.
//!
//! Two adjacent superpoints with the same semantic label are merged when their
//! overlap profiles against the shared category's masks, taken over views in
//! which both are visible, differ by less than a relative L1 threshold.
//! Connected merges become instances.

use crate::error::{Error, Result};
use crate::geometry::{ViewRender, EMPTY_PIXEL};
use crate::masks::{InstanceMask2D, MaskSet};
use crate::par;
use crate::segmentation::InstanceSegmentation;
use crate::spatial::UnionFind;
use crate::superpoints::SuperpointPartition;
use crate::voting::{render_index, SemanticScores};

pub const DEFAULT_FEATURE_THRESHOLD: f64 = 0.3;

/// Fraction of the visible points of `superpoint` whose projection falls in
/// `mask`; `None` when no point of the superpoint is visible in the view.
pub fn overlap(superpoint: &[u32], mask: &InstanceMask2D, render: &ViewRender) -> Option<f64> {
    let mut visible = 0u64;
    let mut inside = 0u64;
    for &p in superpoint {
        let p = p as usize;
        if render.visible[p] {
            visible += 1;
            let q = render.point_pixel[p];
            if q != EMPTY_PIXEL && mask.contains(q as usize) {
                inside += 1;
            }
        }
    }
    (visible > 0).then(|| inside as f64 / visible as f64)
}

/// Visible-point and inside-mask counts for every (view, superpoint) and
/// (mask, superpoint) pair.
pub struct OverlapTable {
    /// Row per render (in render order), column per superpoint.
    visible: Vec<Vec<u32>>,
    /// Row per mask (in mask-set order), column per superpoint.
    inside: Vec<Vec<u32>>,
    /// Render row of each mask.
    mask_view: Vec<usize>,
}

impl OverlapTable {
    pub fn new(partition: &SuperpointPartition, renders: &[ViewRender], masks: &MaskSet) -> Result<Self> {
        render_index(renders, masks)?;
        let s = partition.len();
        let by_view = masks.by_view();
        let per_view = par::map(renders, |render| {
            let ids = by_view.get(&render.view_id).map(Vec::as_slice).unwrap_or(&[]);
            let mut visible = vec![0u32; s];
            let mut inside = vec![vec![0u32; s]; ids.len()];
            for (p, &vis) in render.visible.iter().enumerate() {
                if !vis {
                    continue;
                }
                let sp = partition.superpoint_of(p) as usize;
                visible[sp] += 1;
                let q = render.point_pixel[p];
                if q == EMPTY_PIXEL {
                    continue;
                }
                for (k, &i) in ids.iter().enumerate() {
                    if masks.masks()[i].contains(q as usize) {
                        inside[k][sp] += 1;
                    }
                }
            }
            (visible, inside)
        });
        let view_row: std::collections::BTreeMap<u32, usize> =
            renders.iter().enumerate().map(|(i, r)| (r.view_id, i)).collect();
        let mut inside = vec![Vec::new(); masks.len()];
        let mut visible = Vec::with_capacity(renders.len());
        for (render, (vis, ins)) in renders.iter().zip(per_view) {
            let ids = by_view.get(&render.view_id).map(Vec::as_slice).unwrap_or(&[]);
            for (&i, row) in ids.iter().zip(ins) {
                inside[i] = row;
            }
            visible.push(vis);
        }
        let mask_view = masks.masks().iter().map(|m| view_row[&m.view_id]).collect();
        Ok(OverlapTable {
            visible,
            inside,
            mask_view,
        })
    }

    pub fn overlap(&self, superpoint: usize, mask: usize) -> Option<f64> {
        let vis = self.visible[self.mask_view[mask]][superpoint];
        (vis > 0).then(|| self.inside[mask][superpoint] as f64 / vis as f64)
    }

    /// Overlap feature vectors of `u` and `v` over masks of `category` in
    /// views where both are visible.
    pub fn features(&self, masks: &MaskSet, u: usize, v: usize, category: u32) -> (Vec<f64>, Vec<f64>) {
        let mut fu = Vec::new();
        let mut fv = Vec::new();
        for (i, m) in masks.masks().iter().enumerate() {
            let row = &self.visible[self.mask_view[i]];
            if m.category == category && row[u] > 0 && row[v] > 0 {
                fu.push(self.overlap(u, i).unwrap_or(0.0));
                fv.push(self.overlap(v, i).unwrap_or(0.0));
            }
        }
        (fu, fv)
    }
}

/// The pairwise merge test on two feature vectors.
pub fn features_agree(fu: &[f64], fv: &[f64], threshold: f64) -> bool {
    if fu.is_empty() {
        return false;
    }
    let nu: f64 = fu.iter().map(|x| x.abs()).sum();
    let nv: f64 = fv.iter().map(|x| x.abs()).sum();
    let denom = nu.max(nv);
    if denom == 0.0 {
        return false;
    }
    let dist: f64 = fu.iter().zip(fv).map(|(a, b)| (a - b).abs()).sum();
    dist / denom < threshold
}

/// Group labelled superpoints into instances.
///
/// Instances are numbered by their lowest superpoint id. Confidence is the
/// size-weighted mean voting score of the members for the instance category.
pub fn group(
    partition: &SuperpointPartition,
    semantics: &SemanticScores,
    renders: &[ViewRender],
    masks: &MaskSet,
    feature_threshold: f64,
) -> Result<InstanceSegmentation> {
    if !(feature_threshold > 0.0 && feature_threshold <= 2.0) {
        return Err(Error::contract("feature_threshold must lie in (0, 2]"));
    }
    if semantics.num_superpoints() != partition.len() {
        return Err(Error::contract("semantic scores do not match the partition"));
    }
    let table = OverlapTable::new(partition, renders, masks)?;
    let candidates: Vec<(u32, u32, u32)> = partition
        .adjacent_pairs()
        .into_iter()
        .filter_map(|(u, v)| {
            let lu = semantics.label(u as usize)?;
            (semantics.label(v as usize) == Some(lu)).then_some((u, v, lu))
        })
        .collect();
    let merges = par::map(&candidates, |&(u, v, j)| {
        let (fu, fv) = table.features(masks, u as usize, v as usize, j);
        features_agree(&fu, &fv, feature_threshold)
    });

    let mut uf = UnionFind::new(partition.len());
    for (&(u, v, _), merge) in candidates.iter().zip(merges) {
        if merge {
            uf.union(u, v);
        }
    }
    instances_from_components(partition, semantics, &mut uf)
}

pub(crate) fn instances_from_components(
    partition: &SuperpointPartition,
    semantics: &SemanticScores,
    uf: &mut UnionFind,
) -> Result<InstanceSegmentation> {
    let s = partition.len();
    let mut root_instance = vec![None; s];
    let mut categories = Vec::new();
    let mut weighted = Vec::new();
    let mut sizes = Vec::new();
    let mut sp_instance = vec![None; s];
    for (sp, slot) in sp_instance.iter_mut().enumerate() {
        let Some(cat) = semantics.label(sp) else {
            continue;
        };
        let root = uf.find(sp as u32) as usize;
        let id = *root_instance[root].get_or_insert_with(|| {
            categories.push(cat);
            weighted.push(0.0);
            sizes.push(0usize);
            categories.len() - 1
        });
        let size = partition.members(sp).len();
        weighted[id] += size as f64 * semantics.score(sp, cat as usize);
        sizes[id] += size;
        *slot = Some(id as u32);
    }
    let confidences: Vec<f64> = weighted
        .iter()
        .zip(&sizes)
        .map(|(w, &n)| (w / n as f64).clamp(0.0, 1.0))
        .collect();
    let labels: Vec<Option<u32>> = partition
        .assignment()
        .iter()
        .map(|&sp| sp_instance[sp as usize])
        .collect();
    InstanceSegmentation::from_labels(&labels, &categories, &confidences)
}
