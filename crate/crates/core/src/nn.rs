//! Exact nearest-neighbour search over a point cloud.
//!
//! A bucketed kd-tree. Results equal an exhaustive scan bit for bit: distances
//! are compared as squared norms computed the same way, and ties go to the
//! smallest original index.

use crate::error::{Error, Result};
use crate::flow::PointCloud;
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub point: Vec3,
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable kd-tree over a snapshot of a cloud.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn squared_distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn better(d2: f64, idx: usize, best_d2: f64, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points().to_vec())
    }

    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut index = NeighborIndex {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        (hi - lo).imax()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn nearest(&self, q: &Vec3) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, q, &mut best);
        Neighbor {
            point: self.points[best.1],
            index: best.1,
            distance: best.0.sqrt(),
        }
    }

    /// Index of the nearest reference point for each query.
    pub fn nearest_indices(&self, queries: &[Vec3]) -> Vec<usize> {
        queries.iter().map(|q| self.nearest(q).index).collect()
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = squared_distance(q, &self.points[i]);
                    if better(d2, i, best.0, best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // Equal distances must still be visited for the index tie-break.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Exhaustive reference scan with the same tie-break rule.
pub fn brute_force_nearest(points: &[Vec3], q: &Vec3) -> Neighbor {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        let d2 = squared_distance(q, p);
        if better(d2, i, best.0, best.1) {
            best = (d2, i);
        }
    }
    Neighbor {
        point: points[best.1],
        index: best.1,
        distance: best.0.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points).unwrap()
    }

    #[test]
    fn single_point_index() {
        let idx = NeighborIndex::build(&cloud(vec![Vec3::new(1.0, 2.0, 3.0)])).unwrap();
        let n = idx.nearest(&Vec3::new(-4.0, 0.0, 9.0));
        assert_eq!(n.index, 0);
        assert_eq!(n.point, Vec3::new(1.0, 2.0, 3.0));
        assert!(NeighborIndex::from_points(vec![]).is_err());
    }

    #[test]
    fn simple_queries() {
        let idx = NeighborIndex::build(&cloud(vec![
            Vec3::zeros(),
            Vec3::new(10.0, 0.0, 0.0),
        ]))
        .unwrap();
        let n = idx.nearest(&Vec3::new(4.0, 0.0, 0.0));
        assert_eq!((n.index, n.distance), (0, 4.0));
        let n = idx.nearest(&Vec3::new(10.0, 0.0, 0.0));
        assert_eq!((n.index, n.distance), (1, 0.0));
    }

    #[test]
    fn large_cloud_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 10.0)
            .collect();
        let idx = NeighborIndex::from_points(pts.clone()).unwrap();
        for _ in 0..1000 {
            let q = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 12.0 - Vec3::repeat(1.0);
            assert_eq!(idx.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Integer grid with every point repeated three times.
        let mut pts = Vec::new();
        for _ in 0..3 {
            for x in 0..6 {
                for y in 0..6 {
                    for z in 0..6 {
                        pts.push(Vec3::new(x as f64, y as f64, z as f64));
                    }
                }
            }
        }
        let idx = NeighborIndex::from_points(pts.clone()).unwrap();
        for _ in 0..500 {
            // Half-integer queries are equidistant from several grid points.
            let q = Vec3::new(
                rng.gen_range(0..12) as f64 * 0.5,
                rng.gen_range(0..12) as f64 * 0.5,
                rng.gen_range(0..12) as f64 * 0.5,
            );
            let got = idx.nearest(&q);
            assert_eq!(got, brute_force_nearest(&pts, &q));
            assert!(got.index < 216);
        }
    }

    proptest! {
        #[test]
        fn exact_and_deterministic(
            pts in prop::collection::vec((-5i32..5, -5i32..5, -5i32..5), 1..200),
            q in (-60i32..60, -60i32..60, -60i32..60),
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(a, b, c)| Vec3::new(a as f64, b as f64, c as f64)).collect();
            let q = Vec3::new(q.0 as f64 / 10.0, q.1 as f64 / 10.0, q.2 as f64 / 10.0);
            let idx = NeighborIndex::from_points(pts.clone()).unwrap();
            let a = idx.nearest(&q);
            prop_assert_eq!(a, brute_force_nearest(&pts, &q));
            prop_assert_eq!(a, idx.nearest(&q));
        }
    }
}
