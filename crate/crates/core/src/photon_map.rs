//! Immutable kd-tree over photon positions with exact k-nearest and
//! fixed-radius queries.
//!
//! Neighbours are ordered by `(distance, photon index)`, so results are
//! exact and deterministic even with coincident photons.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{invalid, Result};
use crate::math::Vec3;
use crate::tracer::{Photon, PhotonDump};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
enum KdNode {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, right: u32 },
}

#[derive(Debug, Clone)]
pub struct PhotonMap {
    dump: PhotonDump,
    // positions and original indices, permuted into tree order
    points: Vec<[f64; 3]>,
    ids: Vec<u32>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Index into the photon dump.
    pub index: usize,
    pub distance: f64,
}

/// Result of a k-nearest query, sorted by ascending distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub neighbors: Vec<Neighbor>,
    /// Distance to the farthest returned photon (the bandwidth).
    pub r: f64,
}

impl Neighborhood {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.d2.total_cmp(&o.d2).then(self.index.cmp(&o.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl PhotonMap {
    /// Builds the tree in O(n log n) with median splits along the widest axis.
    pub fn build(dump: PhotonDump) -> Result<PhotonMap> {
        if dump.photons.is_empty() {
            return invalid("cannot build a photon map from an empty dump");
        }
        if dump.photons.len() > u32::MAX as usize {
            return invalid("too many photons for one map");
        }
        let mut ids: Vec<u32> = (0..dump.photons.len() as u32).collect();
        let pos: Vec<[f64; 3]> = dump.photons.iter().map(|p| p.position.to_array()).collect();
        let mut nodes = Vec::with_capacity(2 * dump.photons.len() / LEAF_SIZE + 1);
        build_rec(&pos, &mut ids, 0, &mut nodes);
        let points = ids.iter().map(|&i| pos[i as usize]).collect();
        Ok(PhotonMap { dump, points, ids, nodes })
    }

    pub fn dump(&self) -> &PhotonDump {
        &self.dump
    }

    pub fn photons(&self) -> &[Photon] {
        &self.dump.photons
    }

    pub fn photon(&self, index: usize) -> &Photon {
        &self.dump.photons[index]
    }

    /// Total emitted paths `N` behind this map.
    pub fn emitted(&self) -> u64 {
        self.dump.emitted
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact `k` nearest photons (closed ball: the k-th photon is included).
    /// Returns every photon, with `r` the largest distance, when fewer
    /// than `k` exist.
    pub fn knn(&self, query: Vec3, k: usize) -> Neighborhood {
        let k = k.max(1).min(self.len());
        let q = query.to_array();
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut stack: Vec<(u32, f64)> = Vec::with_capacity(64);
        stack.push((0, 0.0));
        while let Some((node, bound)) = stack.pop() {
            if heap.len() == k {
                let worst: &Candidate = heap.peek().unwrap();
                if bound > worst.d2 {
                    continue;
                }
            }
            match self.nodes[node as usize] {
                KdNode::Leaf { start, end } => {
                    for slot in start as usize..end as usize {
                        let p = &self.points[slot];
                        let d2 = dist2(p, &q);
                        let cand = Candidate { d2, index: self.ids[slot] };
                        if heap.len() < k {
                            heap.push(cand);
                        } else if cand < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
                KdNode::Split { axis, value, right } => {
                    let diff = q[axis as usize] - value;
                    let (near, far) = if diff < 0.0 { (node + 1, right) } else { (right, node + 1) };
                    // far side first so the near side is explored next
                    stack.push((far, bound.max(diff * diff)));
                    stack.push((near, bound));
                }
            }
        }
        let found = heap.into_sorted_vec();
        let neighbors: Vec<Neighbor> = found
            .iter()
            .map(|c| Neighbor { index: c.index as usize, distance: c.d2.sqrt() })
            .collect();
        let r = neighbors.last().map_or(0.0, |n| n.distance);
        Neighborhood { neighbors, r }
    }

    /// Calls `visit(index, squared distance)` for every photon with
    /// `|x - query|^2 <= radius2`, in tree order.
    pub fn for_each_within(&self, query: Vec3, radius2: f64, mut visit: impl FnMut(usize, f64)) {
        let q = query.to_array();
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stack.push(0);
        while let Some(node) = stack.pop() {
            match self.nodes[node as usize] {
                KdNode::Leaf { start, end } => {
                    for slot in start as usize..end as usize {
                        let d2 = dist2(&self.points[slot], &q);
                        if d2 <= radius2 {
                            visit(self.ids[slot] as usize, d2);
                        }
                    }
                }
                KdNode::Split { axis, value, right } => {
                    let diff = q[axis as usize] - value;
                    if diff <= 0.0 || diff * diff <= radius2 {
                        stack.push(node + 1);
                    }
                    if diff >= 0.0 || diff * diff <= radius2 {
                        stack.push(right);
                    }
                }
            }
        }
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn build_rec(pos: &[[f64; 3]], ids: &mut [u32], offset: usize, nodes: &mut Vec<KdNode>) -> u32 {
    let me = nodes.len() as u32;
    if ids.len() <= LEAF_SIZE {
        nodes.push(KdNode::Leaf { start: offset as u32, end: (offset + ids.len()) as u32 });
        return me;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in ids.iter() {
        let p = pos[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    let mid = ids.len() / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| pos[a as usize][axis].total_cmp(&pos[b as usize][axis]));
    let value = pos[ids[mid] as usize][axis];
    nodes.push(KdNode::Split { axis: axis as u8, value, right: 0 });
    let (left_ids, right_ids) = ids.split_at_mut(mid);
    build_rec(pos, left_ids, offset, nodes);
    let right = build_rec(pos, right_ids, offset + mid, nodes);
    if let KdNode::Split { right: r, .. } = &mut nodes[me as usize] {
        *r = right;
    }
    me
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RngStream;
    use crate::tracer::PhotonFlags;
    use rand::Rng;

    pub(crate) fn random_dump(n: usize, seed: u64) -> PhotonDump {
        let mut rng = RngStream::new(seed, 0);
        let photons = (0..n)
            .map(|_| Photon {
                position: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                direction: Vec3::new(0.0, -1.0, 0.0),
                flux: Vec3::splat(1.0),
                flags: PhotonFlags::new(false, true, false, 0),
            })
            .collect();
        PhotonDump { photons, emitted: n as u64, scene_id: 0, seed }
    }

    fn brute(dump: &PhotonDump, q: Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(f64, usize)> = dump
            .photons
            .iter()
            .enumerate()
            .map(|(i, p)| (p.position.distance_squared(q), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    #[test]
    fn empty_dump_is_rejected() {
        let dump = PhotonDump { photons: vec![], emitted: 1, scene_id: 0, seed: 0 };
        assert!(PhotonMap::build(dump).is_err());
    }

    #[test]
    fn single_photon() {
        let map = PhotonMap::build(random_dump(1, 1)).unwrap();
        assert_eq!(map.len(), 1);
        let nb = map.knn(Vec3::splat(5.0), 10);
        assert_eq!(nb.k(), 1);
        assert_eq!(nb.r, nb.neighbors[0].distance);
    }

    #[test]
    fn every_photon_is_its_own_nearest() {
        let dump = random_dump(100_000, 2);
        let map = PhotonMap::build(dump.clone()).unwrap();
        for (i, p) in dump.photons.iter().enumerate() {
            let nb = map.knn(p.position, 1);
            assert_eq!(nb.neighbors[0].index, i);
            assert_eq!(nb.neighbors[0].distance, 0.0);
        }
    }

    #[test]
    fn matches_brute_force() {
        let dump = random_dump(10_000, 3);
        let map = PhotonMap::build(dump.clone()).unwrap();
        let mut rng = RngStream::new(4, 0);
        for _ in 0..100 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            for k in [5, 50, 500] {
                let nb = map.knn(q, k);
                let expected = brute(&dump, q, k);
                let got: Vec<(usize, f64)> = nb.neighbors.iter().map(|n| (n.index, n.distance)).collect();
                assert_eq!(got, expected);
                assert_eq!(nb.r, expected.last().unwrap().1);
            }
        }
    }

    #[test]
    fn ties_break_by_index() {
        let mut dump = random_dump(64, 5);
        for p in dump.photons.iter_mut().skip(10).take(20) {
            p.position = Vec3::splat(0.5);
        }
        let map = PhotonMap::build(dump).unwrap();
        let nb = map.knn(Vec3::splat(0.5), 5);
        let idx: Vec<usize> = nb.neighbors.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![10, 11, 12, 13, 14]);
        assert_eq!(nb.r, 0.0);
    }

    #[test]
    fn k_larger_than_map() {
        let map = PhotonMap::build(random_dump(30, 6)).unwrap();
        let nb = map.knn(Vec3::ZERO, 100);
        assert_eq!(nb.k(), 30);
        assert!(nb.neighbors.iter().all(|n| n.distance <= nb.r));
    }

    #[test]
    fn independent_of_build_order() {
        let dump = random_dump(5000, 7);
        let mut shuffled = dump.clone();
        let mut perm: Vec<usize> = (0..dump.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut RngStream::new(8, 0));
        shuffled.photons = perm.iter().map(|&i| dump.photons[i]).collect();
        let a = PhotonMap::build(dump).unwrap();
        let b = PhotonMap::build(shuffled).unwrap();
        let mut rng = RngStream::new(9, 0);
        for _ in 0..200 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let na = a.knn(q, 40);
            let nb = b.knn(q, 40);
            let ia: Vec<usize> = na.neighbors.iter().map(|n| n.index).collect();
            let ib: Vec<usize> = nb.neighbors.iter().map(|n| perm[n.index]).collect();
            assert_eq!(ia, ib);
            assert_eq!(na.r, nb.r);
        }
    }

    #[test]
    fn radius_query_matches_scan() {
        let dump = random_dump(20_000, 10);
        let map = PhotonMap::build(dump.clone()).unwrap();
        let mut rng = RngStream::new(11, 0);
        for _ in 0..50 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let r2 = rng.gen::<f64>() * 0.01;
            let mut got = Vec::new();
            map.for_each_within(q, r2, |i, _| got.push(i));
            got.sort();
            let expected: Vec<usize> = (0..dump.len()).filter(|&i| dump.photons[i].position.distance_squared(q) <= r2).collect();
            assert_eq!(got, expected);
        }
    }
}
