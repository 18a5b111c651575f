//! Quantized triangle soups: the discrete state the diffusion process runs on.
//!
//! A soup is a fixed-capacity array of faces, each face three vertices, each
//! vertex three coordinate categories in `{0, .., 2^bits - 1}`. A boolean
//! mask separates real faces from padding; padded slots hold category 0 and
//! never contribute to losses, attention, or metrics.

use crate::mesh::{Mesh, MeshError};
use std::collections::HashMap;

pub type QuantFace = [[u16; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTriangleSoup {
    faces: Vec<QuantFace>,
    mask: Vec<bool>,
    bits: u8,
    pub class_label: u32,
}

impl QuantizedTriangleSoup {
    /// Builds a soup from the real faces, padding with zeros up to `capacity`.
    pub fn new(
        real_faces: Vec<QuantFace>,
        bits: u8,
        class_label: u32,
        capacity: usize,
    ) -> Result<Self, MeshError> {
        if bits == 0 || bits > 16 {
            return Err(MeshError::Domain(format!("unsupported bit depth {bits}")));
        }
        if real_faces.len() > capacity {
            return Err(MeshError::Capacity {
                count: real_faces.len(),
                capacity,
            });
        }
        let limit = 1u32 << bits;
        for f in &real_faces {
            for v in f {
                for &c in v {
                    if (c as u32) >= limit {
                        return Err(MeshError::Domain(format!(
                            "category {c} out of range for {bits} bits"
                        )));
                    }
                }
            }
        }
        let m = real_faces.len();
        let mut faces = real_faces;
        faces.resize(capacity, [[0; 3]; 3]);
        let mut mask = vec![true; m];
        mask.resize(capacity, false);
        Ok(QuantizedTriangleSoup {
            faces,
            mask,
            bits,
            class_label,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Number of coordinate categories, `2^bits`.
    pub fn categories(&self) -> usize {
        1usize << self.bits
    }

    pub fn capacity(&self) -> usize {
        self.faces.len()
    }

    pub fn faces(&self) -> &[QuantFace] {
        &self.faces
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn real_face_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The unpadded faces, in stored order.
    pub fn real_faces(&self) -> impl Iterator<Item = &QuantFace> + '_ {
        self.faces
            .iter()
            .zip(&self.mask)
            .filter_map(|(f, &m)| if m { Some(f) } else { None })
    }

    /// Unmasked coordinate count (9 per real face).
    pub fn coordinate_count(&self) -> usize {
        self.real_face_count() * 9
    }

    /// Overwrites one face slot. Intended for the forward/reverse samplers,
    /// which mutate coordinates in place.
    pub fn set_face(&mut self, index: usize, face: QuantFace) {
        self.faces[index] = face;
    }

    /// Direct (face, mask) constructor for callers that manage padding
    /// themselves; validates category range and mask/zero consistency hooks
    /// are relaxed here.
    pub fn from_parts(
        faces: Vec<QuantFace>,
        mask: Vec<bool>,
        bits: u8,
        class_label: u32,
    ) -> Result<Self, MeshError> {
        if faces.len() != mask.len() {
            return Err(MeshError::Domain(format!(
                "faces ({}) and mask ({}) lengths differ",
                faces.len(),
                mask.len()
            )));
        }
        if bits == 0 || bits > 16 {
            return Err(MeshError::Domain(format!("unsupported bit depth {bits}")));
        }
        let limit = 1u32 << bits;
        for (f, &m) in faces.iter().zip(&mask) {
            if !m {
                continue;
            }
            for v in f {
                for &c in v {
                    if (c as u32) >= limit {
                        return Err(MeshError::Domain(format!(
                            "category {c} out of range for {bits} bits"
                        )));
                    }
                }
            }
        }
        Ok(QuantizedTriangleSoup {
            faces,
            mask,
            bits,
            class_label,
        })
    }
}

/// Per coordinate u in [-0.5, 0.5]: category = clamp(floor((u+0.5)·2^bits), 0, 2^bits-1).
#[inline]
pub fn quantize_coord(u: f64, bits: u8) -> u16 {
    let cells = (1u32 << bits) as f64;
    let c = ((u + 0.5) * cells).floor();
    c.clamp(0.0, cells - 1.0) as u16
}

/// Bin center of a category: (c + 0.5)/2^bits - 0.5.
#[inline]
pub fn dequantize_coord(c: u16, bits: u8) -> f64 {
    let cells = (1u32 << bits) as f64;
    (c as f64 + 0.5) / cells - 0.5
}

/// Rotation of a face that puts the lexicographically smallest (z, y, x)
/// vertex first, preserving winding.
fn canonical_rotation(face: &QuantFace) -> QuantFace {
    let key = |v: &[u16; 3]| (v[2], v[1], v[0]);
    let mut best = 0;
    for r in 1..3 {
        let a = [key(&face[r]), key(&face[(r + 1) % 3]), key(&face[(r + 2) % 3])];
        let b = [key(&face[best]), key(&face[(best + 1) % 3]), key(&face[(best + 2) % 3])];
        if a < b {
            best = r;
        }
    }
    [face[best], face[(best + 1) % 3], face[(best + 2) % 3]]
}

const COORD_EPSILON: f64 = 1e-6;

/// Quantizes a normalized mesh into a triangle soup with the given capacity.
///
/// Faces whose quantized vertices collapse (two identical triplets) are
/// dropped, and exact duplicate faces (compared after canonical rotation)
/// are deduplicated, keeping the first occurrence.
pub fn quantize(mesh: &Mesh, bits: u8, max_faces: usize) -> Result<QuantizedTriangleSoup, MeshError> {
    if bits == 0 || bits > 16 {
        return Err(MeshError::Domain(format!("unsupported bit depth {bits}")));
    }
    for v in &mesh.vertices {
        for &u in v {
            if !(-0.5 - COORD_EPSILON..=0.5 + COORD_EPSILON).contains(&u) {
                return Err(MeshError::Domain(format!(
                    "coordinate {u} outside [-0.5, 0.5]; normalize the mesh first"
                )));
            }
        }
    }

    let mut seen: HashMap<QuantFace, ()> = HashMap::new();
    let mut retained: Vec<QuantFace> = Vec::new();
    for f in 0..mesh.faces.len() {
        let pts = mesh.face_points(f);
        let q: QuantFace = [
            [quantize_coord(pts[0][0], bits), quantize_coord(pts[0][1], bits), quantize_coord(pts[0][2], bits)],
            [quantize_coord(pts[1][0], bits), quantize_coord(pts[1][1], bits), quantize_coord(pts[1][2], bits)],
            [quantize_coord(pts[2][0], bits), quantize_coord(pts[2][1], bits), quantize_coord(pts[2][2], bits)],
        ];
        if q[0] == q[1] || q[1] == q[2] || q[0] == q[2] {
            continue; // collapsed to fewer than 3 distinct grid points
        }
        let canon = canonical_rotation(&q);
        if seen.insert(canon, ()).is_none() {
            retained.push(q);
        }
    }
    if retained.len() > max_faces {
        return Err(MeshError::Capacity {
            count: retained.len(),
            capacity: max_faces,
        });
    }
    QuantizedTriangleSoup::new(retained, bits, 0, max_faces)
}

/// Reconstructs a mesh from a soup: categories dequantize to bin centers,
/// identical quantized vertex triplets merge into a single vertex, and faces
/// that degenerate after merging are dropped.
pub fn soup_to_mesh(soup: &QuantizedTriangleSoup) -> Result<Mesh, MeshError> {
    let mut vertex_of: HashMap<[u16; 3], usize> = HashMap::new();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for face in soup.real_faces() {
        let mut idx = [0usize; 3];
        for (k, v) in face.iter().enumerate() {
            let key = *v;
            let next = vertices.len();
            let entry = *vertex_of.entry(key).or_insert(next);
            if entry == next {
                vertices.push([
                    dequantize_coord(v[0], soup.bits()),
                    dequantize_coord(v[1], soup.bits()),
                    dequantize_coord(v[2], soup.bits()),
                ]);
            }
            idx[k] = entry;
        }
        if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
            faces.push(idx);
        }
    }
    if faces.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    Ok(Mesh { vertices, faces })
}

/// Deterministic canonical form: within each face the lexicographically
/// smallest (z, y, x) vertex comes first (cyclic rotation, winding kept),
/// faces sort by their 9-tuple, and real faces pack to the front.
pub fn canonical_order(soup: &QuantizedTriangleSoup) -> QuantizedTriangleSoup {
    let mut real: Vec<QuantFace> = soup.real_faces().map(canonical_rotation).collect();
    real.sort_by_key(|f| {
        [
            f[0][0], f[0][1], f[0][2], f[1][0], f[1][1], f[1][2], f[2][0], f[2][1], f[2][2],
        ]
    });
    QuantizedTriangleSoup::new(real, soup.bits(), soup.class_label, soup.capacity())
        .expect("canonical reorder preserves validity")
}
