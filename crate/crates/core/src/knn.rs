//! Exact k-nearest-neighbor search over a stratum's donors.
//!
//! Euclidean distance in the standardized matching space. Ties are broken
//! by ascending donor id so results do not depend on input order. The
//! kd-tree must return exactly what [`brute_force_knn`] returns; the brute
//! force scan is the testing oracle and stays independent of the tree.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// One ranked neighbor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub donor_id: i64,
    pub distance: f64,
}

/// Exactly `k` neighbors, distances non-decreasing, donor ids unique.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub ranked: Vec<Neighbor>,
}

impl NeighborList {
    pub fn k(&self) -> usize {
        self.ranked.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist_sq: f64,
    donor_id: i64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // lexicographic (distance, donor_id); the heap's max is the worst
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.donor_id.cmp(&other.donor_id))
    }
}

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: u32, end: u32 },
    Split { left: u32, right: u32 },
}

const LEAF_SIZE: usize = 16;

/// Immutable spatial index over one stratum's scaled donor vectors.
/// Safe to query concurrently from many workers.
#[derive(Debug, Clone)]
pub struct DonorIndex {
    dim: usize,
    /// row-major donor coordinates, permuted so each leaf's rows are
    /// contiguous in memory
    points: Vec<f64>,
    /// donor ids in the same permuted order as `points`
    donor_ids: Vec<i64>,
    nodes: Vec<KdNode>,
    /// per-node bounding box, `2 * dim` values: lows then highs
    boxes: Vec<f64>,
    root: u32,
}

impl DonorIndex {
    pub fn n_donors(&self) -> usize {
        self.donor_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Build the index. `points` is row-major with `dim` coordinates per donor;
/// `min_pool` is the smallest k the index must support.
pub fn build_index(
    points: Vec<f64>,
    dim: usize,
    donor_ids: Vec<i64>,
    min_pool: usize,
) -> Result<DonorIndex> {
    let n = donor_ids.len();
    assert_eq!(points.len(), n * dim, "points length must be n * dim");
    if n < min_pool.max(1) {
        return Err(Error::TooFewDonors {
            have: n,
            need: min_pool.max(1),
        });
    }
    for &v in &points {
        assert!(v.is_finite(), "donor coordinates must be finite");
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut nodes = Vec::new();
    let mut boxes = Vec::new();
    let root = build_node(&points, dim, &mut order, 0, n, &mut nodes, &mut boxes);
    // lay points out in leaf order so leaf scans walk contiguous memory
    let mut ordered_points = Vec::with_capacity(points.len());
    let mut ordered_ids = Vec::with_capacity(n);
    for &idx in &order {
        let row = idx as usize * dim;
        ordered_points.extend_from_slice(&points[row..row + dim]);
        ordered_ids.push(donor_ids[idx as usize]);
    }
    Ok(DonorIndex {
        dim,
        points: ordered_points,
        donor_ids: ordered_ids,
        nodes,
        boxes,
        root,
    })
}

fn build_node(
    points: &[f64],
    dim: usize,
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<KdNode>,
    boxes: &mut Vec<f64>,
) -> u32 {
    let len = end - start;
    // the range's bounding box drives both the split choice and
    // query-time pruning
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for &idx in &order[start..end] {
        let row = &points[idx as usize * dim..(idx as usize + 1) * dim];
        for d in 0..dim {
            lo[d] = lo[d].min(row[d]);
            hi[d] = hi[d].max(row[d]);
        }
    }
    // split on the widest dimension at the median
    let mut best_dim = 0;
    let mut best_spread = -1.0;
    for d in 0..dim {
        if hi[d] - lo[d] > best_spread {
            best_spread = hi[d] - lo[d];
            best_dim = d;
        }
    }
    // a zero spread means every point coincides in every dimension
    if len <= LEAF_SIZE || best_spread <= 0.0 {
        nodes.push(KdNode::Leaf {
            start: start as u32,
            end: end as u32,
        });
        boxes.extend_from_slice(&lo);
        boxes.extend_from_slice(&hi);
        return (nodes.len() - 1) as u32;
    }
    let mid = start + len / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        points[a as usize * dim + best_dim].total_cmp(&points[b as usize * dim + best_dim])
    });
    let left = build_node(points, dim, order, start, mid, nodes, boxes);
    let right = build_node(points, dim, order, mid, end, nodes, boxes);
    nodes.push(KdNode::Split { left, right });
    boxes.extend_from_slice(&lo);
    boxes.extend_from_slice(&hi);
    (nodes.len() - 1) as u32
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

struct Search<'a> {
    index: &'a DonorIndex,
    query: &'a [f64],
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Search<'_> {
    #[inline]
    fn worst(&self) -> Option<Candidate> {
        if self.heap.len() == self.k {
            self.heap.peek().copied()
        } else {
            None
        }
    }

    fn scan_leaf(&mut self, start: u32, end: u32) {
        let dim = self.index.dim;
        let rows = &self.index.points[start as usize * dim..end as usize * dim];
        let mut cutoff = self.worst().map_or(f64::INFINITY, |w| w.dist_sq);
        for (j, row) in rows.chunks_exact(dim).enumerate() {
            let d2 = dist_sq(self.query, row);
            // a tied distance can still beat the worst on donor id
            if d2 > cutoff {
                continue;
            }
            let cand = Candidate {
                dist_sq: d2,
                donor_id: self.index.donor_ids[start as usize + j],
            };
            if self.heap.len() == self.k {
                let worst = *self.heap.peek().expect("heap is full");
                if cand.cmp(&worst) == Ordering::Less {
                    self.heap.pop();
                    self.heap.push(cand);
                }
            } else {
                self.heap.push(cand);
            }
            cutoff = self.worst().map_or(f64::INFINITY, |w| w.dist_sq);
        }
    }

    /// Squared distance from the query to a node's bounding box.
    #[inline]
    fn box_dist_sq(&self, node: u32) -> f64 {
        let dim = self.index.dim;
        let b = &self.index.boxes[node as usize * 2 * dim..(node as usize + 1) * 2 * dim];
        let mut acc = 0.0;
        for d in 0..dim {
            let q = self.query[d];
            let e = (b[d] - q).max(q - b[dim + d]).max(0.0);
            acc += e * e;
        }
        acc
    }

    fn visit(&mut self, node: u32) {
        match self.index.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                self.scan_leaf(start, end);
            }
            KdNode::Split { left, right } => {
                let dl = self.box_dist_sq(left);
                let dr = self.box_dist_sq(right);
                let (near, near_d, far, far_d) = if dl <= dr {
                    (left, dl, right, dr)
                } else {
                    (right, dr, left, dl)
                };
                // a box at exactly the worst distance can still hide a
                // smaller donor id, so prune only on strictly greater
                if !self.pruned(near_d) {
                    self.visit(near);
                }
                if !self.pruned(far_d) {
                    self.visit(far);
                }
            }
        }
    }

    #[inline]
    fn pruned(&self, box_d: f64) -> bool {
        matches!(self.worst(), Some(w) if box_d > w.dist_sq)
    }
}

/// Exact k nearest donors to `recipient`, ties broken by ascending donor id.
pub fn query_knn(index: &DonorIndex, recipient: &[f64], k: usize) -> Result<NeighborList> {
    if recipient.len() != index.dim {
        return Err(Error::DimensionMismatch {
            query: recipient.len(),
            index: index.dim,
        });
    }
    if k > index.n_donors() {
        return Err(Error::TooFewDonors {
            have: index.n_donors(),
            need: k,
        });
    }
    let mut search = Search {
        index,
        query: recipient,
        k,
        heap: BinaryHeap::with_capacity(k + 1),
    };
    search.visit(index.root);
    let mut ranked: Vec<Candidate> = search.heap.into_vec();
    ranked.sort_unstable();
    Ok(NeighborList {
        ranked: ranked
            .into_iter()
            .map(|c| Neighbor {
                donor_id: c.donor_id,
                distance: c.dist_sq.sqrt(),
            })
            .collect(),
    })
}

/// Full scan + sort oracle; same contract as [`query_knn`].
pub fn brute_force_knn(
    points: &[f64],
    dim: usize,
    donor_ids: &[i64],
    recipient: &[f64],
    k: usize,
) -> Result<NeighborList> {
    if recipient.len() != dim {
        return Err(Error::DimensionMismatch {
            query: recipient.len(),
            index: dim,
        });
    }
    if k > donor_ids.len() {
        return Err(Error::TooFewDonors {
            have: donor_ids.len(),
            need: k,
        });
    }
    let mut all: Vec<(f64, i64)> = donor_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (dist_sq(recipient, &points[i * dim..(i + 1) * dim]), id))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(NeighborList {
        ranked: all
            .into_iter()
            .take(k)
            .map(|(d, id)| Neighbor {
                donor_id: id,
                distance: d.sqrt(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_instance(n: usize, dim: usize, seed: u64) -> (Vec<f64>, Vec<i64>) {
        let mut rng = crate::rng::stream(seed, "knn-test", &[]);
        let points: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ids: Vec<i64> = (0..n as i64).map(|i| i * 7 + 3).collect();
        (points, ids)
    }

    #[test]
    fn all_donors_when_k_equals_n() {
        let (points, ids) = random_instance(10, 3, 1);
        let index = build_index(points, 3, ids, 10).unwrap();
        let got = query_knn(&index, &[0.0, 0.0, 0.0], 10).unwrap();
        assert_eq!(got.k(), 10);
        let mut seen: Vec<i64> = got.ranked.iter().map(|n| n.donor_id).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn too_few_donors() {
        let (points, ids) = random_instance(9, 3, 2);
        match build_index(points, 3, ids, 10) {
            Err(Error::TooFewDonors { have: 9, need: 10 }) => {}
            other => panic!("expected TooFewDonors, got {other:?}"),
        }
    }

    #[test]
    fn coincident_donor_is_rank_one_at_zero() {
        let (mut points, mut ids) = random_instance(20, 4, 3);
        points.extend_from_slice(&[0.5, 0.5, 0.5, 0.5]);
        ids.push(42);
        let index = build_index(points, 4, ids, 5).unwrap();
        let got = query_knn(&index, &[0.5, 0.5, 0.5, 0.5], 5).unwrap();
        assert_eq!(got.ranked[0].donor_id, 42);
        assert_eq!(got.ranked[0].distance, 0.0);
    }

    #[test]
    fn equidistant_ties_break_by_donor_id() {
        // donors at +1 and -1 with ids 9 and 5, both at distance 1 from 0
        let points = vec![1.0, -1.0];
        let ids = vec![9, 5];
        let index = build_index(points.clone(), 1, ids.clone(), 2).unwrap();
        let got = query_knn(&index, &[0.0], 2).unwrap();
        assert_eq!(got.ranked[0].donor_id, 5);
        assert_eq!(got.ranked[1].donor_id, 9);
        let oracle = brute_force_knn(&points, 1, &ids, &[0.0], 2).unwrap();
        assert_eq!(got, oracle);
    }

    #[test]
    fn line_ordering() {
        let points = vec![1.0, 2.0, 3.0];
        let ids = vec![10, 20, 30];
        let got = brute_force_knn(&points, 1, &ids, &[0.0], 3).unwrap();
        let order: Vec<i64> = got.ranked.iter().map(|n| n.donor_id).collect();
        assert_eq!(order, vec![10, 20, 30]);
    }

    #[test]
    fn single_donor() {
        let got = brute_force_knn(&[2.0, 2.0], 2, &[1], &[0.0, 0.0], 1).unwrap();
        assert_eq!(got.ranked[0].donor_id, 1);
    }

    #[test]
    fn dimension_mismatch() {
        let (points, ids) = random_instance(10, 3, 4);
        let index = build_index(points, 3, ids, 2).unwrap();
        match query_knn(&index, &[0.0, 0.0], 2) {
            Err(Error::DimensionMismatch { query: 2, index: 3 }) => {}
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        for seed in 0..8 {
            let n = 200 + seed as usize * 50;
            let dim = 1 + (seed as usize % 8);
            let (points, ids) = random_instance(n, dim, 100 + seed);
            let index = build_index(points.clone(), dim, ids.clone(), 10).unwrap();
            let mut rng = crate::rng::stream(seed, "knn-probe", &[]);
            for _ in 0..50 {
                let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.5..3.5)).collect();
                let got = query_knn(&index, &q, 10).unwrap();
                let want = brute_force_knn(&points, dim, &ids, &q, 10).unwrap();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let (points, ids) = random_instance(100, 4, 5);
        let index = build_index(points.clone(), 4, ids.clone(), 10).unwrap();
        // reverse the donor order
        let n = ids.len();
        let mut rev_points = Vec::with_capacity(points.len());
        let mut rev_ids = Vec::with_capacity(n);
        for i in (0..n).rev() {
            rev_points.extend_from_slice(&points[i * 4..(i + 1) * 4]);
            rev_ids.push(ids[i]);
        }
        let rev_index = build_index(rev_points.clone(), 4, rev_ids.clone(), 10).unwrap();
        let mut rng = crate::rng::stream(6, "knn-perm", &[]);
        for _ in 0..30 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = query_knn(&index, &q, 10).unwrap();
            let b = query_knn(&rev_index, &q, 10).unwrap();
            assert_eq!(a, b);
            let c = brute_force_knn(&rev_points, 4, &rev_ids, &q, 10).unwrap();
            assert_eq!(a, c);
        }
    }

    #[test]
    fn distances_non_decreasing() {
        let (points, ids) = random_instance(300, 6, 7);
        let index = build_index(points, 6, ids, 20).unwrap();
        let mut rng = crate::rng::stream(8, "knn-mono", &[]);
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let got = query_knn(&index, &q, 20).unwrap();
            assert!(got
                .ranked
                .windows(2)
                .all(|w| w[0].distance <= w[1].distance));
        }
    }

    #[test]
    fn duplicate_coordinates_handled() {
        // many coincident points force the zero-spread leaf path
        let mut points = vec![1.0, 1.0].repeat(40);
        points.extend_from_slice(&[0.0, 0.0]);
        let ids: Vec<i64> = (0..41).collect();
        let index = build_index(points.clone(), 2, ids.clone(), 5).unwrap();
        let got = query_knn(&index, &[1.0, 1.0], 5).unwrap();
        let want = brute_force_knn(&points, 2, &ids, &[1.0, 1.0], 5).unwrap();
        assert_eq!(got, want);
        // ties at distance 0 resolve to the smallest ids
        assert_eq!(
            got.ranked.iter().map(|n| n.donor_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3, 4]
        );
    }
}
