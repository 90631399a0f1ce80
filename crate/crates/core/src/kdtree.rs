//! Exact 3D nearest-neighbor search over a static point set.
//!
//! Median-split kd-tree with deterministic construction and queries: ties in
//! distance resolve to the smallest point index, so results never depend on
//! build order or floating-point reduction order. Leaf points are stored
//! contiguously and scanned linearly.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 64;

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

pub struct KdTree {
    /// Points permuted into leaf order.
    points: Vec<Vector3<f64>>,
    /// Original index of each stored point.
    original: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points: Vec::with_capacity(points.len()),
            original: Vec::with_capacity(points.len()),
            nodes: Vec::new(),
            root: 0,
        };
        if !points.is_empty() {
            tree.root = build_range(points, &mut order, 0, points.len(), &mut tree.nodes);
            // Lay points out in leaf order for contiguous scans.
            for &i in &order {
                tree.points.push(points[i]);
                tree.original.push(i);
            }
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index (into the original point slice) and squared distance of the
    /// exact nearest neighbor.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best_dist = f64::INFINITY;
        let mut best_idx = usize::MAX;
        self.search(self.root, query, &mut best_idx, &mut best_dist);
        Some((best_idx, best_dist))
    }

    fn search(&self, node: usize, query: &Vector3<f64>, best_idx: &mut usize, best_dist: &mut f64) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in *start..*end {
                    let p = &self.points[slot];
                    let dx = p.x - query.x;
                    let dy = p.y - query.y;
                    let dz = p.z - query.z;
                    let d2 = dx * dx + dy * dy + dz * dz;
                    let original = self.original[slot];
                    if d2 < *best_dist || (d2 == *best_dist && original < *best_idx) {
                        *best_dist = d2;
                        *best_idx = original;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, best_idx, best_dist);
                if diff * diff <= *best_dist {
                    self.search(far, query, best_idx, best_dist);
                }
            }
        }
    }
}

fn build_range(
    points: &[Vector3<f64>],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return nodes.len() - 1;
    }
    // Split on the axis with the widest extent.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in &order[start..end] {
        let p = points[i];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    order[start..end].sort_unstable_by(|&a, &b| {
        points[a][axis]
            .partial_cmp(&points[b][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let value = points[order[mid]][axis];
    let left = build_range(points, order, start, mid, nodes);
    let right = build_range(points, order, mid, end, nodes);
    nodes.push(Node::Split {
        axis,
        value,
        left,
        right,
    });
    nodes.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let points: Vec<Vector3<f64>> = (0..500)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let tree = KdTree::build(&points);
        for _ in 0..200 {
            let q = Vector3::new(
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            );
            let (ti, td) = tree.nearest(&q).unwrap();
            let (bi, bd) = brute_nearest(&points, &q);
            assert_eq!(td, bd);
            assert_eq!(ti, bi);
        }
    }

    #[test]
    fn surface_points_match_brute_force() {
        // Points on a smooth surface, the common query pattern here.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vector3<f64>> = (0..2000)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let phi: f64 = rng.random_range(0.0..1.2);
                Vector3::new(
                    phi.sin() * theta.cos(),
                    phi.sin() * theta.sin(),
                    phi.cos(),
                )
            })
            .collect();
        let tree = KdTree::build(&points);
        for q in points.iter().step_by(37) {
            let jitter = q + Vector3::new(1e-3, -2e-3, 5e-4);
            let (ti, td) = tree.nearest(&jitter).unwrap();
            let (bi, bd) = brute_nearest(&points, &jitter);
            assert_eq!(td, bd);
            assert_eq!(ti, bi);
        }
    }

    #[test]
    fn duplicate_points_resolve_to_smallest_index() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let points = vec![p, p, p];
        let tree = KdTree::build(&points);
        assert_eq!(tree.nearest(&p).unwrap().0, 0);
    }

    #[test]
    fn empty_tree_returns_none() {
        assert!(KdTree::build(&[]).nearest(&Vector3::zeros()).is_none());
    }
}
