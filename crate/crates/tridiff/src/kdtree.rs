//! Static 3-d tree for nearest-neighbor queries on point sets.

use crate::geom::{dist2, Vec3};

struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Balanced kd-tree built once over a fixed point set.
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: -1,
        };
        let n = order.len();
        tree.root = tree.build_range(&mut order, 0, n, 0);
        tree
    }

    fn build_range(&mut self, order: &mut [u32], lo: usize, hi: usize, depth: usize) -> i32 {
        if lo >= hi {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = (lo + hi) / 2;
        let slice = &mut order[lo..hi];
        let pts = &self.points;
        // Ties broken by index so the layout is deterministic.
        slice.select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a as usize][axis as usize]
                .partial_cmp(&pts[b as usize][axis as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = order[mid];
        let node_index = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis,
            left: -1,
            right: -1,
        });
        let left = self.build_range(order, lo, mid, depth + 1);
        let right = self.build_range(order, mid + 1, hi, depth + 1);
        self.nodes[node_index as usize].left = left;
        self.nodes[node_index as usize].right = right;
        node_index
    }

    /// Squared distance from `q` to the nearest stored point.
    pub fn nearest_dist2(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best
    }

    fn search(&self, node: i32, q: Vec3, best: &mut f64) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d = dist2(q, p);
        if d < *best {
            *best = d;
        }
        let axis = n.axis as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, q, best);
        if delta * delta < *best {
            self.search(far, q, best);
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
