//! Oversegmentation of a cloud into superpoints of similar normals and colors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, PointCloud};
use crate::par;
use crate::spatial::{KdTree, UnionFind};

pub const DEFAULT_KNN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpointParams {
    /// Maximum angle between neighbouring normals, degrees. `inf` disables.
    pub normal_angle_max: f64,
    /// Maximum Euclidean RGB distance between neighbours. `inf` disables.
    pub color_dist_max: f64,
    pub spatial_knn: usize,
    pub min_size: usize,
}

impl Default for SuperpointParams {
    fn default() -> Self {
        SuperpointParams {
            normal_angle_max: 30.0,
            color_dist_max: 0.2,
            spatial_knn: DEFAULT_KNN,
            min_size: 10,
        }
    }
}

/// A disjoint cover of the cloud by superpoints, plus their KNN adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointPartition {
    assignment: Vec<u32>,
    superpoints: Vec<Vec<u32>>,
    adjacency: Vec<Vec<u32>>,
}

impl SuperpointPartition {
    /// Build from a per-point id vector and the point KNN graph used for adjacency.
    /// Ids must form the contiguous range `0..S`.
    pub fn from_assignment(assignment: Vec<u32>, knn: &[Vec<u32>]) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::contract("partition must cover at least one point"));
        }
        if knn.len() != assignment.len() {
            return Err(Error::contract("KNN graph size differs from partition size"));
        }
        let count = *assignment.iter().max().unwrap() as usize + 1;
        let mut superpoints = vec![Vec::new(); count];
        for (p, &s) in assignment.iter().enumerate() {
            superpoints[s as usize].push(p as u32);
        }
        if superpoints.iter().any(Vec::is_empty) {
            return Err(Error::format("partition", "superpoint ids must be contiguous from 0"));
        }
        let mut adjacency: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); count];
        for (p, nbrs) in knn.iter().enumerate() {
            let a = assignment[p];
            for &q in nbrs {
                let b = assignment[q as usize];
                if a != b {
                    adjacency[a as usize].insert(b);
                    adjacency[b as usize].insert(a);
                }
            }
        }
        Ok(SuperpointPartition {
            assignment,
            superpoints,
            adjacency: adjacency.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.superpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoints.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn superpoint_of(&self, point: usize) -> u32 {
        self.assignment[point]
    }

    pub fn superpoints(&self) -> &[Vec<u32>] {
        &self.superpoints
    }

    pub fn members(&self, sp: usize) -> &[u32] {
        &self.superpoints[sp]
    }

    pub fn neighbors(&self, sp: usize) -> &[u32] {
        &self.adjacency[sp]
    }

    /// Adjacent pairs `(u, v)` with `u < v`, in lexicographic order.
    pub fn adjacent_pairs(&self) -> Vec<(u32, u32)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, nb)| nb.iter().filter(move |&&v| v > u as u32).map(move |&v| (u as u32, v)))
            .collect()
    }
}

/// For every point, its `k` nearest other points (fewer if the cloud is small).
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Vec<Vec<u32>> {
    let pts = cloud.positions();
    let tree = KdTree::new(pts);
    let k = k.min(pts.len().saturating_sub(1));
    par::map_range(pts.len(), |i| tree.knn(&pts[i], k, Some(i as u32)))
}

fn edge_passes(cloud: &PointCloud, p: usize, q: usize, cos_min: Option<f64>, color_max: Option<f64>) -> bool {
    if let Some(cos_min) = cos_min {
        let n = cloud.normals().unwrap();
        if dot(&n[p], &n[q]) < cos_min {
            return false;
        }
    }
    if let Some(color_max) = color_max {
        let c = cloud.colors().unwrap();
        if norm(&sub(&c[p], &c[q])) > color_max {
            return false;
        }
    }
    true
}

/// Region growing over the point KNN graph.
///
/// An edge merges its endpoints when both the normal-angle and color-distance
/// tests pass. Components below `min_size` are absorbed into the neighbouring
/// component sharing the most KNN edges, smallest first; a small component
/// without neighbours is kept.
pub fn oversegment(cloud: &PointCloud, params: &SuperpointParams) -> Result<SuperpointPartition> {
    if params.spatial_knn == 0 {
        return Err(Error::contract("spatial_knn must be >= 1"));
    }
    let cos_min = params
        .normal_angle_max
        .is_finite()
        .then(|| params.normal_angle_max.to_radians().cos() - 1e-12);
    let color_max = params.color_dist_max.is_finite().then_some(params.color_dist_max);
    if cos_min.is_some() && cloud.normals().is_none() {
        return Err(Error::MissingNormals);
    }
    if color_max.is_some() && cloud.colors().is_none() {
        return Err(Error::MissingColors);
    }

    let knn = knn_graph(cloud, params.spatial_knn);
    let n = cloud.len();
    let mut uf = UnionFind::new(n);
    for (p, nbrs) in knn.iter().enumerate() {
        for &q in nbrs {
            if edge_passes(cloud, p, q as usize, cos_min, color_max) {
                uf.union(p as u32, q);
            }
        }
    }
    let (labels, count) = uf.labels();
    let labels = absorb_small(labels, count, &knn, params.min_size);
    SuperpointPartition::from_assignment(labels, &knn)
}

fn absorb_small(labels: Vec<u32>, count: usize, knn: &[Vec<u32>], min_size: usize) -> Vec<u32> {
    let mut size = vec![0usize; count];
    for &l in &labels {
        size[l as usize] += 1;
    }
    if size.iter().all(|&s| s >= min_size) {
        return labels;
    }
    let mut links: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); count];
    for (p, nbrs) in knn.iter().enumerate() {
        for &q in nbrs {
            let (a, b) = (labels[p], labels[q as usize]);
            if a != b {
                *links[a as usize].entry(b).or_default() += 1;
                *links[b as usize].entry(a).or_default() += 1;
            }
        }
    }
    // absorbed[c] = component that swallowed c
    let mut absorbed: Vec<u32> = (0..count as u32).collect();
    let mut queue: BTreeSet<(usize, u32)> = (0..count as u32)
        .filter(|&c| size[c as usize] < min_size)
        .map(|c| (size[c as usize], c))
        .collect();
    while let Some((s, c)) = queue.pop_first() {
        let Some((&target, _)) = links[c as usize].iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            continue;
        };
        let src_links = std::mem::take(&mut links[c as usize]);
        for (&other, &w) in &src_links {
            links[other as usize].remove(&c);
            if other != target {
                *links[other as usize].entry(target).or_default() += w;
                *links[target as usize].entry(other).or_default() += w;
            }
        }
        let t = target as usize;
        let was_queued = queue.remove(&(size[t], target));
        size[t] += s;
        size[c as usize] = 0;
        if was_queued && size[t] < min_size {
            queue.insert((size[t], target));
        }
        absorbed[c as usize] = target;
    }
    let resolve = |mut c: u32| {
        while absorbed[c as usize] != c {
            c = absorbed[c as usize];
        }
        c
    };
    let mut remap = vec![u32::MAX; count];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            let c = resolve(l) as usize;
            if remap[c] == u32::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect()
}

/// Every point its own superpoint; adjacency from the default point KNN graph.
pub fn identity_partition(cloud: &PointCloud) -> SuperpointPartition {
    identity_partition_with_knn(cloud, DEFAULT_KNN)
}

pub fn identity_partition_with_knn(cloud: &PointCloud, k: usize) -> SuperpointPartition {
    let knn = knn_graph(cloud, k);
    SuperpointPartition::from_assignment((0..cloud.len() as u32).collect(), &knn)
        .expect("identity assignment is contiguous")
}

/// Newline-delimited superpoint id per point.
pub fn write_partition(path: &Path, partition: &SuperpointPartition) -> Result<()> {
    let mut text = String::with_capacity(partition.num_points() * 4);
    for id in partition.assignment() {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_partition(path: &Path, cloud: &PointCloud, k: usize) -> Result<SuperpointPartition> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Vec<u32> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::format("partition", format!("bad id '{l}'")))
        })
        .collect::<Result<_>>()?;
    if ids.len() != cloud.len() {
        return Err(Error::format(
            "partition",
            format!("{} ids for {} points", ids.len(), cloud.len()),
        ));
    }
    SuperpointPartition::from_assignment(ids, &knn_graph(cloud, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn grid_plane(nx: usize, ny: usize, z: f64, spacing: f64) -> Vec<[f64; 3]> {
        (0..ny)
            .flat_map(|j| (0..nx).map(move |i| [i as f64 * spacing, j as f64 * spacing, z]))
            .collect()
    }

    fn check_partition_laws(part: &SuperpointPartition) {
        let mut seen = vec![false; part.num_points()];
        for (i, sp) in part.superpoints().iter().enumerate() {
            assert!(!sp.is_empty());
            for &p in sp {
                assert!(!seen[p as usize]);
                seen[p as usize] = true;
                assert_eq!(part.superpoint_of(p as usize), i as u32);
            }
            for &j in part.neighbors(i) {
                assert_ne!(j as usize, i);
                assert!(part.neighbors(j as usize).contains(&(i as u32)));
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn parallel_planes_split() {
        let mut pts = grid_plane(10, 10, 0.0, 0.05);
        pts.extend(grid_plane(10, 10, 1.0, 0.05));
        let n = pts.len();
        let cloud = PointCloud::new(pts, Some(vec![[0.5; 3]; n]), Some(vec![[0.0, 0.0, 1.0]; n])).unwrap();
        let part = oversegment(
            &cloud,
            &SuperpointParams {
                spatial_knn: 8,
                ..Default::default()
            },
        )
        .unwrap();
        check_partition_laws(&part);
        assert_eq!(part.len(), 2);
        assert!(part.neighbors(0).is_empty());
    }

    /// Brute-force connected components of the thresholded KNN graph.
    fn bfs_components(cloud: &PointCloud, knn: &[Vec<u32>], color_max: f64) -> Vec<u32> {
        let n = cloud.len();
        let mut adj = vec![Vec::new(); n];
        let c = cloud.colors().unwrap();
        for (p, nb) in knn.iter().enumerate() {
            for &q in nb {
                if norm(&sub(&c[p], &c[q as usize])) <= color_max {
                    adj[p].push(q as usize);
                    adj[q as usize].push(p);
                }
            }
        }
        let mut label = vec![u32::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if label[s] != u32::MAX {
                continue;
            }
            let mut queue = VecDeque::from([s]);
            label[s] = next;
            while let Some(p) = queue.pop_front() {
                for &q in &adj[p] {
                    if label[q] == u32::MAX {
                        label[q] = next;
                        queue.push_back(q);
                    }
                }
            }
            next += 1;
        }
        label
    }

    #[test]
    fn color_seam_splits_plane() {
        let pts = grid_plane(20, 10, 0.0, 0.05);
        let colors: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| if p[0] < 0.5 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] })
            .collect();
        let n = pts.len();
        let cloud = PointCloud::new(pts, Some(colors), Some(vec![[0.0, 0.0, 1.0]; n])).unwrap();
        let params = SuperpointParams {
            spatial_knn: 8,
            min_size: 1,
            ..Default::default()
        };
        let part = oversegment(&cloud, &params).unwrap();
        check_partition_laws(&part);
        let oracle = bfs_components(&cloud, &knn_graph(&cloud, 8), 0.2);
        assert_eq!(part.assignment(), oracle.as_slice());
        assert_eq!(part.len(), 2);
        for (p, pos) in cloud.positions().iter().enumerate() {
            assert_eq!(part.superpoint_of(p), u32::from(pos[0] >= 0.5));
        }
        assert_eq!(part.neighbors(0), &[1]);
    }

    #[test]
    fn unbounded_thresholds_give_one_superpoint() {
        let cloud = PointCloud::from_positions(grid_plane(12, 12, 0.0, 0.1)).unwrap();
        let params = SuperpointParams {
            normal_angle_max: f64::INFINITY,
            color_dist_max: f64::INFINITY,
            ..Default::default()
        };
        let part = oversegment(&cloud, &params).unwrap();
        assert_eq!(part.len(), 1);
    }

    #[test]
    fn missing_channels_are_errors() {
        let cloud = PointCloud::from_positions(grid_plane(4, 4, 0.0, 0.1)).unwrap();
        assert!(matches!(
            oversegment(&cloud, &SuperpointParams::default()),
            Err(Error::MissingNormals)
        ));
        let p = SuperpointParams {
            normal_angle_max: f64::INFINITY,
            ..Default::default()
        };
        assert!(matches!(oversegment(&cloud, &p), Err(Error::MissingColors)));
    }

    #[test]
    fn small_components_are_absorbed() {
        // a 3-point differently-colored patch inside a plane
        let pts = grid_plane(10, 10, 0.0, 0.05);
        let mut colors = vec![[0.2, 0.2, 0.2]; pts.len()];
        for i in [44, 45, 46] {
            colors[i] = [0.9, 0.9, 0.9];
        }
        let n = pts.len();
        let cloud = PointCloud::new(pts, Some(colors), Some(vec![[0.0, 0.0, 1.0]; n])).unwrap();
        let params = SuperpointParams {
            spatial_knn: 8,
            min_size: 1,
            ..Default::default()
        };
        assert_eq!(oversegment(&cloud, &params).unwrap().len(), 2);
        let params = SuperpointParams {
            spatial_knn: 8,
            min_size: 5,
            ..Default::default()
        };
        let part = oversegment(&cloud, &params).unwrap();
        check_partition_laws(&part);
        assert_eq!(part.len(), 1);
    }

    #[test]
    fn identity_partition_is_singletons() {
        let cloud = PointCloud::from_positions(grid_plane(5, 1, 0.0, 0.1)).unwrap();
        let part = identity_partition(&cloud);
        assert_eq!(part.len(), 5);
        assert!(part.superpoints().iter().all(|s| s.len() == 1));
        assert_eq!(part.assignment(), &[0, 1, 2, 3, 4]);
        check_partition_laws(&part);
    }

    #[test]
    fn partition_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::from_positions(grid_plane(4, 1, 0.0, 0.1)).unwrap();
        let part = SuperpointPartition::from_assignment(vec![1, 0, 1, 0], &knn_graph(&cloud, 2)).unwrap();
        let path = dir.path().join("sp.txt");
        write_partition(&path, &part).unwrap();
        assert_eq!(read_partition(&path, &cloud, 2).unwrap(), part);
        fs::write(&path, "0\n2\n2\n0\n").unwrap();
        assert!(read_partition(&path, &cloud, 2).is_err());
    }
}
