//! Planar decimation: coplanar-region growing followed by ear-clip
//! re-triangulation of each region's boundary polygon.
//!
//! Adjacent faces whose normals deviate from the region seed's normal by
//! less than the angle threshold are grown into clusters. Each cluster's
//! boundary loop is simplified (collinear boundary vertices removed) and
//! re-triangulated. Clusters that fail any structural check — open or
//! multiple boundary loops, inconsistent winding, self-intersecting
//! boundary — are kept as-is. Output vertices are always a subset of the
//! input vertices.

use crate::geom::{self, Vec3};
use crate::mesh::Mesh;
use std::collections::HashMap;

pub fn planar_decimate(mesh: &Mesh, angle_degrees: f64) -> Mesh {
    let n_faces = mesh.faces.len();
    if n_faces == 0 {
        return mesh.clone();
    }
    let cos_threshold = angle_degrees.to_radians().cos();

    let normals: Vec<Option<Vec3>> = (0..n_faces)
        .map(|f| {
            let [a, b, c] = mesh.face_points(f);
            geom::triangle_normal(a, b, c)
        })
        .collect();

    // Edge -> incident faces. Edges shared by anything other than exactly
    // two faces act as region boundaries.
    let mut edge_faces: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let a = face[k];
            let b = face[(k + 1) % 3];
            let key = (a.min(b), a.max(b));
            edge_faces.entry(key).or_default().push(f);
        }
    }

    // Deterministic region growing from the lowest-index unvisited face.
    let mut region_of = vec![usize::MAX; n_faces];
    let mut regions: Vec<Vec<usize>> = Vec::new();
    for seed in 0..n_faces {
        if region_of[seed] != usize::MAX {
            continue;
        }
        let region_id = regions.len();
        let mut members = vec![seed];
        region_of[seed] = region_id;
        if let Some(seed_normal) = normals[seed] {
            let mut queue = vec![seed];
            while let Some(f) = queue.pop() {
                let face = mesh.faces[f];
                for k in 0..3 {
                    let a = face[k];
                    let b = face[(k + 1) % 3];
                    let key = (a.min(b), a.max(b));
                    let incident = &edge_faces[&key];
                    if incident.len() != 2 {
                        continue;
                    }
                    let other = if incident[0] == f { incident[1] } else { incident[0] };
                    if region_of[other] != usize::MAX {
                        continue;
                    }
                    if let Some(n) = normals[other] {
                        if geom::dot(seed_normal, n) > cos_threshold {
                            region_of[other] = region_id;
                            members.push(other);
                            queue.push(other);
                        }
                    }
                }
            }
        }
        members.sort_unstable();
        regions.push(members);
    }

    let mut out_faces: Vec<[usize; 3]> = Vec::new();
    for members in &regions {
        if members.len() == 1 {
            out_faces.push(mesh.faces[members[0]]);
            continue;
        }
        let normal = normals[members[0]].expect("multi-face regions grow from a valid normal");
        match retriangulate_region(mesh, members, normal) {
            Some(tris) => out_faces.extend(tris),
            None => out_faces.extend(members.iter().map(|&f| mesh.faces[f])),
        }
    }

    compact(mesh, out_faces)
}

/// Extracts the region's oriented boundary loop, removes collinear boundary
/// vertices, and ear-clips the result. `None` means the region is not a
/// clean disk and should be left alone.
fn retriangulate_region(mesh: &Mesh, members: &[usize], normal: Vec3) -> Option<Vec<[usize; 3]>> {
    use std::collections::HashSet;

    // Directed edges that are not matched by a twin inside the region form
    // the oriented boundary; edges shared with faces outside the region (or
    // non-manifold ones) land there automatically. Assumes consistent
    // winding; bail otherwise.
    let mut directed: HashSet<(usize, usize)> = HashSet::new();
    for &f in members {
        let face = mesh.faces[f];
        for k in 0..3 {
            if !directed.insert((face[k], face[(k + 1) % 3])) {
                return None; // duplicate directed edge: inconsistent winding
            }
        }
    }
    let mut successor: HashMap<usize, usize> = HashMap::new();
    let mut boundary_count = 0usize;
    for &(a, b) in &directed {
        if directed.contains(&(b, a)) {
            continue; // interior edge
        }
        if successor.insert(a, b).is_some() {
            return None; // branching boundary
        }
        boundary_count += 1;
    }
    if boundary_count < 3 {
        return None;
    }

    // Walk one loop; any leftover boundary edge means multiple loops.
    let start = *successor.keys().min()?;
    let mut loop_vertices = vec![start];
    let mut cur = successor[&start];
    while cur != start {
        loop_vertices.push(cur);
        cur = *successor.get(&cur)?;
        if loop_vertices.len() > boundary_count {
            return None;
        }
    }
    if loop_vertices.len() != boundary_count {
        return None; // disconnected boundary (holes)
    }

    // Drop collinear vertices (straight-line continuations).
    let scale2 = {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &v in &loop_vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(mesh.vertices[v][a]);
                hi[a] = hi[a].max(mesh.vertices[v][a]);
            }
        }
        geom::norm2(geom::sub(hi, lo))
    };
    let eps2 = scale2 * 1e-20;
    let mut simplified = loop_vertices;
    loop {
        let n = simplified.len();
        if n < 3 {
            return None;
        }
        let mut removed = false;
        let mut next_pass = Vec::with_capacity(n);
        for i in 0..n {
            let prev = mesh.vertices[simplified[(i + n - 1) % n]];
            let cur = mesh.vertices[simplified[i]];
            let next = mesh.vertices[simplified[(i + 1) % n]];
            let d1 = geom::sub(cur, prev);
            let d2 = geom::sub(next, cur);
            let collinear = geom::norm2(geom::cross(d1, d2)) <= eps2 * geom::norm2(d1).max(1e-300);
            if collinear && geom::dot(d1, d2) > 0.0 {
                removed = true; // straight-line midpoint
            } else {
                next_pass.push(simplified[i]);
            }
        }
        simplified = next_pass;
        if !removed {
            break;
        }
    }
    if simplified.len() < 3 {
        return None;
    }

    ear_clip(mesh, &simplified, normal)
}

/// Ear-clips an oriented 3D polygon projected onto the region plane.
fn ear_clip(mesh: &Mesh, loop_vertices: &[usize], normal: Vec3) -> Option<Vec<[usize; 3]>> {
    // In-plane orthonormal basis with (u, v, normal) right-handed.
    let pick = if normal[0].abs() <= normal[1].abs() && normal[0].abs() <= normal[2].abs() {
        [1.0, 0.0, 0.0]
    } else if normal[1].abs() <= normal[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let u = geom::normalize(geom::cross(pick, normal))?;
    let v = geom::cross(normal, u);

    let origin = mesh.vertices[loop_vertices[0]];
    let project = |idx: usize| -> [f64; 2] {
        let d = geom::sub(mesh.vertices[idx], origin);
        [geom::dot(d, u), geom::dot(d, v)]
    };
    let mut pts: Vec<[f64; 2]> = loop_vertices.iter().map(|&i| project(i)).collect();
    let mut ids: Vec<usize> = loop_vertices.to_vec();

    // The oriented boundary should be counter-clockwise in this basis.
    let signed_area = {
        let mut s = 0.0;
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            s += a[0] * b[1] - b[0] * a[1];
        }
        0.5 * s
    };
    if signed_area <= 0.0 {
        return None;
    }
    let eps = signed_area.abs() * 1e-12;

    let cross2 = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };

    let mut tris = Vec::with_capacity(ids.len().saturating_sub(2));
    while ids.len() > 3 {
        let n = ids.len();
        let mut clipped = false;
        for i in 0..n {
            let prev = pts[(i + n - 1) % n];
            let cur = pts[i];
            let next = pts[(i + 1) % n];
            if cross2(prev, cur, next) <= eps {
                continue; // reflex or degenerate corner
            }
            // No other vertex may lie inside (or on) the candidate ear.
            let mut blocked = false;
            for j in 0..n {
                if j == (i + n - 1) % n || j == i || j == (i + 1) % n {
                    continue;
                }
                let p = pts[j];
                if cross2(prev, cur, p) >= -eps
                    && cross2(cur, next, p) >= -eps
                    && cross2(next, prev, p) >= -eps
                {
                    blocked = true;
                    break;
                }
            }
            if blocked {
                continue;
            }
            tris.push([ids[(i + n - 1) % n], ids[i], ids[(i + 1) % n]]);
            ids.remove(i);
            pts.remove(i);
            clipped = true;
            break;
        }
        if !clipped {
            return None; // self-intersecting or otherwise unclippable
        }
    }
    tris.push([ids[0], ids[1], ids[2]]);
    Some(tris)
}

/// Keeps only the vertices referenced by `faces`, preserving their original
/// relative order.
fn compact(mesh: &Mesh, faces: Vec<[usize; 3]>) -> Mesh {
    let mut used = vec![false; mesh.vertices.len()];
    for f in &faces {
        for &v in f {
            used[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = vertices.len();
            vertices.push(mesh.vertices[i]);
        }
    }
    let faces = faces
        .into_iter()
        .map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]])
        .collect();
    Mesh { vertices, faces }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hausdorff::hausdorff_distance;
    use crate::shapes;

    #[test]
    fn square_fan_collapses_to_two_triangles() {
        let mesh = shapes::square_fan();
        let out = planar_decimate(&mesh, 1.0);
        assert_eq!(out.faces.len(), 2, "expected the ear-clip result of a quad");
        // Center vertex removed.
        assert_eq!(out.vertices.len(), 4);
        assert!(!out.vertices.iter().any(|v| *v == [0.5, 0.5, 0.0]));
        // Geometry unchanged.
        let h = hausdorff_distance(&mesh, &out, 4000, 5).unwrap();
        assert!(h < 1e-9, "hausdorff {h}");
        // Winding preserved: normals all +z.
        for f in 0..out.faces.len() {
            let [a, b, c] = out.face_points(f);
            let n = crate::geom::triangle_normal(a, b, c).unwrap();
            assert!(n[2] > 0.99);
        }
    }

    #[test]
    fn plain_cube_keeps_twelve_faces() {
        let mesh = shapes::cube(0.0, 2.0);
        let out = planar_decimate(&mesh, 1.0);
        // Cross-face dihedrals are 90 degrees, so regions never span two
        // cube faces; each square face re-triangulates to 2 triangles.
        assert_eq!(out.faces.len(), 12);
        assert_eq!(out.vertices.len(), 8);
        let h = hausdorff_distance(&mesh, &out, 4000, 5).unwrap();
        assert!(h < 1e-9);
    }

    #[test]
    fn subdivided_cube_decimates_to_twelve() {
        let mesh = shapes::cube_subdivided();
        for angle in [1.0, 15.0, 45.0] {
            let out = planar_decimate(&mesh, angle);
            assert_eq!(out.faces.len(), 12, "angle {angle}");
            // Output vertices are a subset of the input vertices.
            for v in &out.vertices {
                assert!(mesh.vertices.contains(v));
            }
            let h = hausdorff_distance(&mesh, &out, 6000, 9).unwrap();
            assert!(h < 1e-6, "angle {angle}: hausdorff {h}");
        }
    }

    #[test]
    fn never_increases_face_count() {
        for mesh in [
            shapes::cube(0.0, 1.0),
            shapes::cube_subdivided(),
            shapes::octahedron(),
            shapes::square_pyramid(),
            shapes::tetrahedron(),
        ] {
            for angle in [1.0, 10.0, 30.0, 60.0] {
                let out = planar_decimate(&mesh, angle);
                assert!(out.faces.len() <= mesh.faces.len());
                out.validate().unwrap();
                assert!(!out.faces.is_empty());
            }
        }
    }

    #[test]
    fn curved_surfaces_survive_small_angles() {
        // Octahedron dihedrals are ~109.5 degrees between normals, far above
        // any small threshold.
        let mesh = shapes::octahedron();
        let out = planar_decimate(&mesh, 5.0);
        assert_eq!(out.faces.len(), 8);
    }
}
