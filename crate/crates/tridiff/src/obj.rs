//! Wavefront OBJ ingestion and output.
//!
//! Only `v` and `f` records matter here. Faces may carry `i/t/n` index
//! groups (texture/normal slots are discarded), may use negative indices
//! relative to the current vertex count, and polygons with more than three
//! vertices are fan-triangulated from their first vertex. Everything else in
//! the file is ignored.

use crate::mesh::Mesh;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("input is not UTF-8")]
    NotUtf8,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: vertex index {index} out of range ({count} vertices defined)")]
    IndexOutOfRange { line: usize, index: i64, count: usize },
    #[error("no faces found")]
    EmptyMesh,
}

pub fn parse_obj(bytes: &[u8]) -> Result<Mesh, ObjError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ObjError::NotUtf8)?;
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for coord in &mut coords {
                    let tok = tokens.next().ok_or(ObjError::Parse {
                        line,
                        message: "vertex record needs 3 coordinates".into(),
                    })?;
                    let value: f64 = tok.parse().map_err(|_| ObjError::Parse {
                        line,
                        message: format!("malformed numeric literal `{tok}`"),
                    })?;
                    if !value.is_finite() {
                        return Err(ObjError::Parse {
                            line,
                            message: format!("non-finite coordinate `{tok}`"),
                        });
                    }
                    *coord = value;
                }
                // Optional w / color components are ignored.
                vertices.push(coords);
            }
            Some("f") => {
                let mut poly: Vec<usize> = Vec::new();
                for group in tokens {
                    let first = group.split('/').next().unwrap_or("");
                    let raw_index: i64 = first.parse().map_err(|_| ObjError::Parse {
                        line,
                        message: format!("malformed face index `{group}`"),
                    })?;
                    let resolved = if raw_index > 0 {
                        (raw_index - 1) as usize
                    } else if raw_index < 0 {
                        let from_end = (-raw_index) as usize;
                        if from_end > vertices.len() {
                            return Err(ObjError::IndexOutOfRange {
                                line,
                                index: raw_index,
                                count: vertices.len(),
                            });
                        }
                        vertices.len() - from_end
                    } else {
                        return Err(ObjError::IndexOutOfRange {
                            line,
                            index: 0,
                            count: vertices.len(),
                        });
                    };
                    if resolved >= vertices.len() {
                        return Err(ObjError::IndexOutOfRange {
                            line,
                            index: raw_index,
                            count: vertices.len(),
                        });
                    }
                    poly.push(resolved);
                }
                if poly.len() < 3 {
                    return Err(ObjError::Parse {
                        line,
                        message: format!("face has {} vertices, need at least 3", poly.len()),
                    });
                }
                for i in 1..poly.len() - 1 {
                    let tri = [poly[0], poly[i], poly[i + 1]];
                    // Degenerate triangles (repeated indices) are dropped.
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                        faces.push(tri);
                    }
                }
            }
            _ => {} // vn, vt, o, g, s, usemtl, mtllib, ...
        }
    }

    if faces.is_empty() {
        return Err(ObjError::EmptyMesh);
    }
    Ok(Mesh { vertices, faces })
}

/// Emits `v` records with the shortest round-trippable decimal
/// representation, then 1-based `f` records, in stored order, LF-terminated.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}
