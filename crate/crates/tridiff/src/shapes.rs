//! Procedural primitive meshes, used by the toy training recipes and tests.

use crate::geom::Vec3;
use crate::mesh::Mesh;

/// Axis-aligned cube spanning `[lo, hi]^3`, 12 triangles with outward winding.
pub fn cube(lo: f64, hi: f64) -> Mesh {
    let v = |x: usize| -> Vec3 {
        [
            if x & 1 != 0 { hi } else { lo },
            if x & 2 != 0 { hi } else { lo },
            if x & 4 != 0 { hi } else { lo },
        ]
    };
    let vertices: Vec<Vec3> = (0..8).map(v).collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3], // z = lo
        [4, 5, 6],
        [5, 7, 6], // z = hi
        [0, 1, 4],
        [1, 5, 4], // y = lo
        [2, 6, 3],
        [3, 6, 7], // y = hi
        [0, 4, 2],
        [2, 4, 6], // x = lo
        [1, 3, 5],
        [3, 7, 5], // x = hi
    ];
    Mesh::new(vertices, faces).unwrap()
}

/// Regular tetrahedron inscribed in `[-1, 1]^3`.
pub fn tetrahedron() -> Mesh {
    let vertices = vec![
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    Mesh::new(vertices, faces).unwrap()
}

/// Octahedron with unit-distance apexes.
pub fn octahedron() -> Mesh {
    let vertices = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let faces = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    Mesh::new(vertices, faces).unwrap()
}

/// Square pyramid: unit square base at z=0, apex above the center.
pub fn square_pyramid() -> Mesh {
    let vertices = vec![
        [-0.5, -0.5, 0.0],
        [0.5, -0.5, 0.0],
        [0.5, 0.5, 0.0],
        [-0.5, 0.5, 0.0],
        [0.0, 0.0, 0.8],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2], // base
        [0, 1, 4],
        [1, 2, 4],
        [2, 3, 4],
        [3, 0, 4],
    ];
    Mesh::new(vertices, faces).unwrap()
}

/// Unit square in the xy-plane, fan-triangulated around its center vertex
/// (4 coplanar triangles, one removable interior vertex).
pub fn square_fan() -> Mesh {
    let vertices = vec![
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.5, 0.5, 0.0],
    ];
    let faces = vec![[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]];
    Mesh::new(vertices, faces).unwrap()
}

/// Cube whose six faces are each split into 8 coplanar triangles (48 total):
/// per face, a fan around the center touching the 4 corners and 4 edge
/// midpoints.
pub fn cube_subdivided() -> Mesh {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let vertex_id = |vertices: &mut Vec<Vec3>, p: Vec3| -> usize {
        if let Some(i) = vertices.iter().position(|q| *q == p) {
            i
        } else {
            vertices.push(p);
            vertices.len() - 1
        }
    };
    // (axis, sign): the face plane; (u, v): in-plane axes ordered so the
    // winding faces outward.
    let axes: [(usize, f64, usize, usize); 6] = [
        (0, 1.0, 1, 2),
        (0, -1.0, 2, 1),
        (1, 1.0, 2, 0),
        (1, -1.0, 0, 2),
        (2, 1.0, 0, 1),
        (2, -1.0, 1, 0),
    ];
    for (axis, sign, ua, va) in axes {
        let at = |u: f64, v: f64| -> Vec3 {
            let mut p = [0.0; 3];
            p[axis] = sign;
            p[ua] = u;
            p[va] = v;
            p
        };
        // 8 boundary points of the square, counter-clockwise.
        let ring = [
            at(-1.0, -1.0),
            at(0.0, -1.0),
            at(1.0, -1.0),
            at(1.0, 0.0),
            at(1.0, 1.0),
            at(0.0, 1.0),
            at(-1.0, 1.0),
            at(-1.0, 0.0),
        ];
        let center = at(0.0, 0.0);
        let c = vertex_id(&mut vertices, center);
        for i in 0..8 {
            let a = vertex_id(&mut vertices, ring[i]);
            let b = vertex_id(&mut vertices, ring[(i + 1) % 8]);
            faces.push([c, a, b]);
        }
    }
    Mesh::new(vertices, faces).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom;

    #[test]
    fn primitives_validate() {
        for m in [cube(0.0, 1.0), tetrahedron(), octahedron(), square_pyramid(), square_fan()] {
            m.validate().unwrap();
        }
    }

    #[test]
    fn subdivided_cube_has_48_coplanar_triangles() {
        let m = cube_subdivided();
        assert_eq!(m.faces.len(), 48);
        m.validate().unwrap();
        // All triangles have nonzero area.
        for f in 0..m.faces.len() {
            let [a, b, c] = m.face_points(f);
            assert!(geom::triangle_area(a, b, c) > 1e-9);
        }
        // Same total surface as the plain cube with side 2.
        assert!((m.surface_area() - 24.0).abs() < 1e-9);
    }
}
