//! Nearest-neighbour search and disjoint sets over point indices.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

/// Static kd-tree over a borrowed set of 3D points.
///
/// The tree is implicit: each subrange `lo..hi` of `order` is a node whose
/// splitting point sits at the midpoint. Distance ties are resolved by lower
/// point index so neighbour lists are deterministic.
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<u32>,
    axis: Vec<u8>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len() as u32).collect(),
            axis: vec![0; points.len()],
        };
        tree.build(0, points.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.order[lo..hi] {
            let p = &self.points[i as usize];
            for d in 0..3 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0);
        let mid = (lo + hi) / 2;
        let points = self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        self.axis[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// The `k` nearest points to `query`, nearest first, skipping `exclude`.
    pub fn knn(&self, query: &[f64; 3], k: usize, exclude: Option<u32>) -> Vec<u32> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, self.points.len(), query, k, exclude, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        found.into_iter().map(|c| c.index).collect()
    }

    fn offer(heap: &mut BinaryHeap<Candidate>, k: usize, cand: Candidate) {
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    fn knn_rec(
        &self,
        lo: usize,
        hi: usize,
        query: &[f64; 3],
        k: usize,
        exclude: Option<u32>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        if hi <= lo {
            return;
        }
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                if Some(i) != exclude {
                    let d = dist2(query, &self.points[i as usize]);
                    Self::offer(heap, k, Candidate { dist2: d, index: i });
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let pivot = self.order[mid];
        let axis = self.axis[mid] as usize;
        let split = self.points[pivot as usize][axis];
        if Some(pivot) != exclude {
            let d = dist2(query, &self.points[pivot as usize]);
            Self::offer(heap, k, Candidate { dist2: d, index: pivot });
        }
        let diff = query[axis] - split;
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, query, k, exclude, heap);
        let need_far = heap.len() < k || heap.peek().is_some_and(|w| diff * diff <= w.dist2);
        if need_far {
            self.knn_rec(far.0, far.1, query, k, exclude, heap);
        }
    }

    /// All point indices within `radius` of `query` (inclusive), ascending.
    pub fn within(&self, query: &[f64; 3], radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        self.within_rec(0, self.points.len(), query, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn within_rec(&self, lo: usize, hi: usize, query: &[f64; 3], r2: f64, out: &mut Vec<u32>) {
        if hi <= lo {
            return;
        }
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                if dist2(query, &self.points[i as usize]) <= r2 {
                    out.push(i);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let pivot = self.order[mid];
        let axis = self.axis[mid] as usize;
        let split = self.points[pivot as usize][axis];
        if dist2(query, &self.points[pivot as usize]) <= r2 {
            out.push(pivot);
        }
        let diff = query[axis] - split;
        if diff <= 0.0 || diff * diff <= r2 {
            self.within_rec(lo, mid, query, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_rec(mid + 1, hi, query, r2, out);
        }
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    /// Merge the sets holding `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize]
            || (self.size[ra as usize] == self.size[rb as usize] && rb < ra)
        {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        true
    }

    /// Dense component labels, numbered by first appearance in index order.
    pub fn labels(&mut self) -> (Vec<u32>, usize) {
        let n = self.len();
        let mut remap = vec![u32::MAX; n];
        let mut labels = Vec::with_capacity(n);
        let mut next = 0u32;
        for i in 0..n as u32 {
            let r = self.find(i) as usize;
            if remap[r] == u32::MAX {
                remap[r] = next;
                next += 1;
            }
            labels.push(remap[r]);
        }
        (labels, next as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_points(500, 3);
        let tree = KdTree::new(&pts);
        for q in 0..50u32 {
            let got = tree.knn(&pts[q as usize], 7, Some(q));
            let mut all: Vec<(f64, u32)> = (0..pts.len() as u32)
                .filter(|&i| i != q)
                .map(|i| (dist2(&pts[q as usize], &pts[i as usize]), i))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u32> = all[..7].iter().map(|x| x.1).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn knn_breaks_ties_by_index() {
        let pts = vec![[0.0, 0.0, 0.0]; 20];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.knn(&[0.0; 3], 3, Some(0)), vec![1, 2, 3]);
    }

    #[test]
    fn within_matches_brute_force() {
        let pts = random_points(400, 9);
        let tree = KdTree::new(&pts);
        for q in 0..30 {
            let got = tree.within(&pts[q], 0.15);
            let want: Vec<u32> = (0..pts.len() as u32)
                .filter(|&i| dist2(&pts[q], &pts[i as usize]) <= 0.15 * 0.15)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn union_find_labels_are_dense() {
        let mut uf = UnionFind::new(6);
        uf.union(4, 1);
        uf.union(5, 3);
        assert!(!uf.union(1, 4));
        let (labels, count) = uf.labels();
        assert_eq!(count, 4);
        assert_eq!(labels, vec![0, 1, 2, 3, 1, 3]);
    }
}
