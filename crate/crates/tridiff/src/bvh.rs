//! Bounding-volume hierarchy over triangles for point-to-surface distance.

use crate::geom::{point_triangle_dist2, Vec3};
use crate::mesh::Mesh;

#[derive(Clone, Copy)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    fn grow_point(&mut self, p: Vec3) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }

    fn dist2(&self, p: Vec3) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let v = if p[a] < self.lo[a] {
                self.lo[a] - p[a]
            } else if p[a] > self.hi[a] {
                p[a] - self.hi[a]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

struct BvhNode {
    bounds: Aabb,
    // Leaf: [start, end) into `order`. Inner: left child is node+1, right is
    // `right`.
    start: u32,
    end: u32,
    right: i32,
}

/// Static BVH; built by median split on triangle centroids.
pub struct TriBvh {
    triangles: Vec<[Vec3; 3]>,
    order: Vec<u32>,
    nodes: Vec<BvhNode>,
}

const LEAF_SIZE: usize = 8;

impl TriBvh {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let triangles: Vec<[Vec3; 3]> = (0..mesh.faces.len()).map(|f| mesh.face_points(f)).collect();
        Self::from_triangles(triangles)
    }

    pub fn from_triangles(triangles: Vec<[Vec3; 3]>) -> Self {
        assert!(!triangles.is_empty(), "BVH needs at least one triangle");
        let mut order: Vec<u32> = (0..triangles.len() as u32).collect();
        let centroids: Vec<Vec3> = triangles
            .iter()
            .map(|t| {
                [
                    (t[0][0] + t[1][0] + t[2][0]) / 3.0,
                    (t[0][1] + t[1][1] + t[2][1]) / 3.0,
                    (t[0][2] + t[1][2] + t[2][2]) / 3.0,
                ]
            })
            .collect();
        let mut bvh = TriBvh {
            triangles,
            order: Vec::new(),
            nodes: Vec::new(),
        };
        let n = order.len();
        bvh.build_range(&mut order, &centroids, 0, n);
        bvh.order = order;
        bvh
    }

    fn bounds_of(&self, order: &[u32], lo: usize, hi: usize) -> Aabb {
        let mut b = Aabb::empty();
        for &t in &order[lo..hi] {
            for &p in &self.triangles[t as usize] {
                b.grow_point(p);
            }
        }
        b
    }

    fn build_range(&mut self, order: &mut [u32], centroids: &[Vec3], lo: usize, hi: usize) -> usize {
        let bounds = self.bounds_of(order, lo, hi);
        let index = self.nodes.len();
        self.nodes.push(BvhNode {
            bounds,
            start: lo as u32,
            end: hi as u32,
            right: -1,
        });
        if hi - lo <= LEAF_SIZE {
            return index;
        }
        // Split on the widest centroid axis at the median.
        let mut cb = Aabb::empty();
        for &t in &order[lo..hi] {
            cb.grow_point(centroids[t as usize]);
        }
        let mut axis = 0;
        let mut widest = -1.0;
        for a in 0..3 {
            let w = cb.hi[a] - cb.lo[a];
            if w > widest {
                widest = w;
                axis = a;
            }
        }
        if widest <= 0.0 {
            return index; // all centroids identical: keep as a leaf
        }
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        self.build_range(order, centroids, lo, mid);
        let right = self.build_range(order, centroids, mid, hi);
        self.nodes[index].right = right as i32;
        self.nodes[index].start = u32::MAX; // marks an inner node
        index
    }

    /// Squared distance from a point to the closest triangle.
    pub fn dist2(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.visit(0, p, &mut best);
        best
    }

    fn visit(&self, node: usize, p: Vec3, best: &mut f64) {
        let n = &self.nodes[node];
        if n.bounds.dist2(p) >= *best {
            return;
        }
        if n.start != u32::MAX {
            for &t in &self.order[n.start as usize..n.end as usize] {
                let tri = &self.triangles[t as usize];
                let d = point_triangle_dist2(p, tri[0], tri[1], tri[2]);
                if d < *best {
                    *best = d;
                }
            }
            return;
        }
        let left = node + 1;
        let right = n.right as usize;
        let dl = self.nodes[left].bounds.dist2(p);
        let dr = self.nodes[right].bounds.dist2(p);
        if dl <= dr {
            self.visit(left, p, best);
            if dr < *best {
                self.visit(right, p, best);
            }
        } else {
            self.visit(right, p, best);
            if dl < *best {
                self.visit(left, p, best);
            }
        }
    }
}
