//! Splitting instances into spatially connected pieces.

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};
use crate::par;
use crate::segmentation::InstanceSegmentation;
use crate::spatial::{KdTree, UnionFind};

pub const DEFAULT_RADIUS: f64 = 0.05;
pub const DEFAULT_MIN_CLUSTER: usize = 10;

/// Connected components of the graph linking points closer than or at `radius`.
///
/// Returns component lists of indices into `points`, each ascending, ordered
/// by their lowest index.
pub fn radius_components(points: &[Vec3], radius: f64) -> Vec<Vec<u32>> {
    let tree = KdTree::new(points);
    let mut uf = UnionFind::new(points.len());
    for (i, p) in points.iter().enumerate() {
        for j in tree.within(p, radius) {
            if (j as usize) > i {
                uf.union(i as u32, j);
            }
        }
    }
    let (labels, count) = uf.labels();
    let mut comps = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        comps[l as usize].push(i as u32);
    }
    comps
}

/// Replace every instance by its radius-graph components of at least
/// `min_cluster` points. Components keep the parent's category and
/// confidence; smaller components become unlabelled.
pub fn split_disconnected(
    seg: &InstanceSegmentation,
    cloud: &PointCloud,
    radius: f64,
    min_cluster: usize,
) -> Result<InstanceSegmentation> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::contract("radius must be > 0"));
    }
    if seg.num_points() != cloud.len() {
        return Err(Error::contract("segmentation does not match the cloud"));
    }
    let pieces = par::map(seg.instances(), |inst| {
        let pts: Vec<Vec3> = inst.members.iter().map(|&p| cloud.positions()[p as usize]).collect();
        radius_components(&pts, radius)
            .into_iter()
            .filter(|c| c.len() >= min_cluster.max(1))
            .map(|c| c.into_iter().map(|k| inst.members[k as usize]).collect::<Vec<u32>>())
            .collect::<Vec<_>>()
    });
    let mut labels = vec![None; seg.num_points()];
    let mut categories = Vec::new();
    let mut confidences = Vec::new();
    for (inst, comps) in seg.instances().iter().zip(pieces) {
        for comp in comps {
            let id = categories.len() as u32;
            for p in comp {
                labels[p as usize] = Some(id);
            }
            categories.push(inst.category);
            confidences.push(inst.confidence);
        }
    }
    InstanceSegmentation::from_labels(&labels, &categories, &confidences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(start: f64, n: usize, step: f64) -> Vec<Vec3> {
        (0..n).map(|i| [start + i as f64 * step, 0.0, 0.0]).collect()
    }

    #[test]
    fn dumbbell_splits_in_two() {
        let mut pts = line(0.0, 12, 0.01);
        pts.extend(line(1.0, 12, 0.01));
        let cloud = PointCloud::from_positions(pts).unwrap();
        let seg = InstanceSegmentation::from_labels(&[Some(0); 24], &[3], &[0.7]).unwrap();
        let out = split_disconnected(&seg, &cloud, 0.05, 10).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.categories(), vec![3, 3]);
        assert_eq!(out.confidences(), vec![0.7, 0.7]);
        assert_eq!(out.instances()[0].members, (0..12).collect::<Vec<u32>>());
    }

    #[test]
    fn connected_instance_unchanged() {
        let cloud = PointCloud::from_positions(line(0.0, 20, 0.01)).unwrap();
        let seg = InstanceSegmentation::from_labels(&[Some(0); 20], &[1], &[0.5]).unwrap();
        assert_eq!(split_disconnected(&seg, &cloud, 0.05, 10).unwrap(), seg);
    }

    #[test]
    fn small_satellite_dropped() {
        let mut pts = line(0.0, 10, 0.01);
        pts.extend(line(2.0, 3, 0.01));
        let cloud = PointCloud::from_positions(pts).unwrap();
        let seg = InstanceSegmentation::from_labels(&[Some(0); 13], &[0], &[1.0]).unwrap();
        let out = split_disconnected(&seg, &cloud, 0.05, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.instances()[0].members.len(), 10);
        assert!(out.point_instance()[10..].iter().all(Option::is_none));
    }

    #[test]
    fn bad_radius_rejected() {
        let cloud = PointCloud::from_positions(line(0.0, 2, 0.01)).unwrap();
        let seg = InstanceSegmentation::empty(2);
        assert!(split_disconnected(&seg, &cloud, 0.0, 1).is_err());
    }
}
