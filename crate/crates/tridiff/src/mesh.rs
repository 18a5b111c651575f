//! Triangle mesh and point-cloud types, normalization, and surface sampling.

use crate::geom::{self, Vec3};
use crate::rng::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("mesh has no faces")]
    EmptyMesh,
    #[error("invalid face {face}: {reason}")]
    InvalidFace { face: usize, reason: String },
    #[error("coordinate out of range: {0}")]
    Domain(String),
    #[error("face count {count} exceeds capacity {capacity}")]
    Capacity { count: usize, capacity: usize },
}

/// Indexed triangle mesh with real-valued vertex coordinates.
///
/// Face indices are 0-based internally; the OBJ wire format is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mesh = Mesh { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Checks the structural invariants: indices in range, three distinct
    /// indices per face, at least 3 vertices when any face exists.
    pub fn validate(&self) -> Result<(), MeshError> {
        if !self.faces.is_empty() && self.vertices.len() < 3 {
            return Err(MeshError::Degenerate(format!(
                "{} vertices cannot support faces",
                self.vertices.len()
            )));
        }
        for (i, f) in self.faces.iter().enumerate() {
            for &v in f {
                if v >= self.vertices.len() {
                    return Err(MeshError::InvalidFace {
                        face: i,
                        reason: format!("index {v} out of range ({} vertices)", self.vertices.len()),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::InvalidFace {
                    face: i,
                    reason: "repeated vertex index".into(),
                });
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box, `None` for a vertexless mesh.
    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        let mut lo = first;
        let mut hi = first;
        for v in it {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn face_points(&self, f: usize) -> [Vec3; 3] {
        let [i, j, k] = self.faces[f];
        [self.vertices[i], self.vertices[j], self.vertices[k]]
    }

    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[i, j, k]| geom::triangle_area(self.vertices[i], self.vertices[j], self.vertices[k]))
            .sum()
    }
}

/// Unstructured set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::Degenerate("empty point cloud".into()));
        }
        if points.iter().any(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(MeshError::Domain("non-finite point coordinate".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Rescales and recenters so the bounding box is origin-centered with a
/// space diagonal of exactly 1. Uniform scale + translation only; all output
/// coordinates land in [-0.5, 0.5].
pub fn normalize_mesh(mesh: &Mesh) -> Result<Mesh, MeshError> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| MeshError::Degenerate("mesh has no vertices".into()))?;
    let extent = geom::sub(hi, lo);
    let diagonal = geom::norm(extent);
    if diagonal <= 0.0 {
        return Err(MeshError::Degenerate("bounding-box diagonal is zero".into()));
    }
    let center = geom::scale(geom::add(lo, hi), 0.5);
    let inv = 1.0 / diagonal;
    let vertices = mesh
        .vertices
        .iter()
        .map(|&v| geom::scale(geom::sub(v, center), inv))
        .collect();
    Ok(Mesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// Uniform surface sampling: faces chosen with probability proportional to
/// area, point positions by barycentric sampling. Deterministic given `seed`.
pub fn sample_surface_points(mesh: &Mesh, count: usize, seed: u64) -> Result<PointCloud, MeshError> {
    if mesh.faces.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    if count == 0 {
        return Err(MeshError::Degenerate("requested zero points".into()));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.face_points(f);
        total += geom::triangle_area(a, b, c);
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(MeshError::Degenerate("all faces have zero area".into()));
    }

    let mut rng = Rng::new(seed);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.next_f64() * total;
        let f = cumulative.partition_point(|&acc| acc <= target).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.face_points(f);
        let mut u = rng.next_f64();
        let mut v = rng.next_f64();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = geom::add(a, geom::add(geom::scale(geom::sub(b, a), u), geom::scale(geom::sub(c, a), v)));
        points.push(p);
    }
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes;

    fn unit_cube() -> Mesh {
        shapes::cube(0.0, 1.0)
    }

    #[test]
    fn validate_rejects_out_of_range_and_repeats() {
        let m = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 3]],
        };
        assert!(m.validate().is_err());
        let m = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 1]],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn normalize_unit_cube() {
        let normalized = normalize_mesh(&unit_cube()).unwrap();
        let (lo, hi) = normalized.bounding_box().unwrap();
        let half = 1.0 / (2.0 * 3.0_f64.sqrt());
        for a in 0..3 {
            assert!((lo[a] + half).abs() < 1e-12);
            assert!((hi[a] - half).abs() < 1e-12);
        }
        let diag = geom::norm(geom::sub(hi, lo));
        assert!((diag - 1.0).abs() < 1e-12);
        for v in &normalized.vertices {
            for &x in v {
                assert!((-0.5..=0.5).contains(&x));
            }
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize_mesh(&unit_cube()).unwrap();
        let twice = normalize_mesh(&once).unwrap();
        for (a, b) in once.vertices.iter().zip(&twice.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-12 * a[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalize_rejects_single_point() {
        let m = Mesh {
            vertices: vec![[1.0, 2.0, 3.0]],
            faces: vec![],
        };
        assert!(matches!(normalize_mesh(&m), Err(MeshError::Degenerate(_))));
    }

    #[test]
    fn sampled_points_stay_inside_single_triangle() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cloud = sample_surface_points(&m, 2000, 7).unwrap();
        for p in &cloud.points {
            assert!(p[2].abs() < 1e-12);
            // Barycentric coordinates of the right triangle.
            let u = p[0] / 2.0;
            let v = p[1] / 2.0;
            assert!(u >= 0.0 && v >= 0.0 && u + v <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn face_choice_follows_area_ratio() {
        // Two triangles with a 3:1 area ratio in the same plane.
        let m = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [3.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [10.0, 0.0, 0.0],
                [11.0, 0.0, 0.0],
                [10.0, 2.0, 0.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let n = 100_000;
        let cloud = sample_surface_points(&m, n, 99).unwrap();
        let big = cloud.points.iter().filter(|p| p[0] < 5.0).count();
        let expected = 0.75 * n as f64;
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!(
            (big as f64 - expected).abs() < 3.0 * sigma,
            "hit count {big} vs expected {expected}"
        );
    }

    #[test]
    fn sample_mean_matches_area_weighted_centroid() {
        let m = unit_cube();
        let n = 1_000_000;
        let cloud = sample_surface_points(&m, n, 1234).unwrap();
        let mut mean = [0.0; 3];
        for p in &cloud.points {
            for a in 0..3 {
                mean[a] += p[a];
            }
        }
        for a in 0..3 {
            mean[a] /= n as f64;
        }
        // Cube surface centroid is the cube center (0.5, 0.5, 0.5). Each
        // coordinate of a surface point has variance <= 1/4; 3 sigma of the
        // sample mean is generous.
        let sigma = 0.5 / (n as f64).sqrt();
        for a in 0..3 {
            assert!((mean[a] - 0.5).abs() < 3.0 * sigma + 1e-9, "axis {a}: {}", mean[a]);
        }
    }

    #[test]
    fn zero_area_faces_rejected() {
        let m = Mesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(sample_surface_points(&m, 16, 0).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = unit_cube();
        let a = sample_surface_points(&m, 512, 5).unwrap();
        let b = sample_surface_points(&m, 512, 5).unwrap();
        assert_eq!(a, b);
    }
}
