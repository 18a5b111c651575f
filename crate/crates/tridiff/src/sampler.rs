//! Reverse-diffusion generation: from uniform categorical noise to meshes.

use crate::checkpoint::DenoiserCheckpoint;
use crate::denoiser::forward;
use crate::diffusion::{reverse_step_between, softmax};
use crate::mesh::Mesh;
use crate::obj::write_obj;
use crate::parallel;
use crate::rng::{derive, Rng};
use crate::soup::{soup_to_mesh, QuantizedTriangleSoup};
use serde::Serialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] crate::denoiser::ModelError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub class_label: u32,
    pub count: usize,
    /// Reverse steps; when below the trained T, the schedule is subsampled
    /// onto an evenly spaced decreasing timestep sequence ending at 1.
    pub steps: Option<usize>,
    pub seed: u64,
    /// Overrides the per-class empirical face-count draw.
    pub face_count: Option<usize>,
    pub threads: usize,
}

/// Strictly decreasing timesteps from T to 1, `k` of them.
fn subsample_timesteps(t_max: usize, k: usize) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= t_max);
    if k == 1 {
        return vec![1];
    }
    let mut ts: Vec<usize> = (0..k)
        .map(|i| {
            let x = t_max as f64 - (t_max - 1) as f64 * i as f64 / (k - 1) as f64;
            x.round() as usize
        })
        .collect();
    // Monotone repair in case rounding collided.
    for i in 1..ts.len() {
        if ts[i] >= ts[i - 1] {
            ts[i] = ts[i - 1] - 1;
        }
    }
    debug_assert_eq!(*ts.last().unwrap(), 1);
    ts
}

fn draw_face_count(ckpt: &DenoiserCheckpoint, class: u32, rng: &mut Rng) -> Result<usize, SampleError> {
    let hist = ckpt
        .face_histograms
        .get(class as usize)
        .filter(|h| !h.is_empty())
        .ok_or_else(|| {
            SampleError::BadRequest(format!(
                "no face-count histogram for class {class}; pass an explicit face count"
            ))
        })?;
    let total: u64 = hist.iter().map(|&(_, freq)| freq as u64).sum();
    let mut target = (rng.next_f64() * total as f64) as u64;
    for &(faces, freq) in hist {
        if target < freq as u64 {
            return Ok(faces as usize);
        }
        target -= freq as u64;
    }
    Ok(hist.last().unwrap().0 as usize)
}

/// Draws one quantized triangle soup: the face count comes from the
/// per-class training histogram (or the override), every unmasked
/// coordinate initializes uniformly over C, and the reverse chain walks the
/// (possibly subsampled) timestep sequence. The final step takes the argmax
/// of the predicted clean-category distribution. Deterministic given the
/// request seed.
pub fn sample_soup(ckpt: &DenoiserCheckpoint, request: &SampleRequest) -> Result<QuantizedTriangleSoup, SampleError> {
    let cfg = &ckpt.params.config;
    if (request.class_label as usize) >= cfg.class_count {
        return Err(SampleError::BadRequest(format!(
            "class {} out of range ({} classes)",
            request.class_label, cfg.class_count
        )));
    }
    let schedule = ckpt.schedule.build()?;
    let t_max = schedule.timesteps();
    let steps = request.steps.unwrap_or(t_max);
    if steps == 0 || steps > t_max {
        return Err(SampleError::BadRequest(format!(
            "steps {steps} outside [1, {t_max}]"
        )));
    }

    let mut face_rng = Rng::new(derive(request.seed, 0xface));
    let m = match request.face_count {
        Some(m) => m,
        None => draw_face_count(ckpt, request.class_label, &mut face_rng)?,
    };
    if m == 0 || m > cfg.max_faces {
        return Err(SampleError::BadRequest(format!(
            "face count {m} outside [1, {}]",
            cfg.max_faces
        )));
    }

    let bits = cfg.categories.trailing_zeros() as u8; // categories = 2^bits
    let c = cfg.categories;

    // Pure categorical noise in the unmasked slots.
    let mut faces = vec![[[0u16; 3]; 3]; m];
    for (f, face) in faces.iter_mut().enumerate() {
        for v in 0..3 {
            for a in 0..3 {
                let coord = ((f * 3 + v) * 3 + a) as u64;
                let mut rng = Rng::new(derive(derive(request.seed, 0x1417), coord));
                face[v][a] = rng.next_below(c) as u16;
            }
        }
    }
    let mut soup = QuantizedTriangleSoup::new(faces, bits, request.class_label, cfg.max_faces)
        .map_err(|e| SampleError::BadRequest(e.to_string()))?;

    let ts = subsample_timesteps(t_max, steps);
    for (step_index, &t) in ts.iter().enumerate() {
        let logits = forward(&ckpt.params, &soup, t, request.class_label, &schedule)?;
        let data = logits.data();
        let s_next = if step_index + 1 < ts.len() { ts[step_index + 1] } else { 0 };
        let last = step_index + 1 == ts.len();
        for f in 0..m {
            let mut face = soup.faces()[f];
            for v in 0..3 {
                for a in 0..3 {
                    let base = ((f * 3 + v) * 3 + a) * c;
                    let row = &data[base..base + c];
                    let next_cat = if last {
                        // Argmax of the predicted clean distribution.
                        argmax(&softmax(row))
                    } else {
                        let dist = reverse_step_between(face[v][a], row, t, s_next, &schedule)?;
                        let coord = ((f * 3 + v) * 3 + a) as u64;
                        let mut rng = Rng::new(derive(
                            derive(derive(request.seed, 0x5e9), step_index as u64),
                            coord,
                        ));
                        dist.sample(&mut rng)
                    };
                    face[v][a] = next_cat;
                }
            }
            soup.set_face(f, face);
        }
    }
    Ok(soup)
}

fn argmax(probs: &[f64]) -> u16 {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as u16
}

#[derive(Clone, Debug, Serialize)]
pub struct ManifestRow {
    pub index: usize,
    pub seed: u64,
    pub class: u32,
    pub faces: usize,
    pub path: Option<String>,
    pub status: String,
}

pub struct BatchOutput {
    pub manifest: Vec<ManifestRow>,
    pub meshes: Vec<Option<Mesh>>,
}

/// Generates `count` samples, converts each soup to a mesh, and writes OBJ
/// files plus a JSON-lines manifest into `out_dir`. Samples that collapse to
/// zero faces after vertex merging are recorded as failures, not dropped.
/// Item i derives its own stream from (seed, i); items may run in parallel.
pub fn generate_batch(
    ckpt: &DenoiserCheckpoint,
    request: &SampleRequest,
    out_dir: &Path,
) -> Result<BatchOutput, SampleError> {
    if request.count == 0 {
        return Err(SampleError::BadRequest("count must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| SampleError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let results: Vec<Result<(QuantizedTriangleSoup, Result<Mesh, crate::mesh::MeshError>), SampleError>> =
        parallel::map_indexed(request.count, request.threads, |i| {
            let item = SampleRequest {
                seed: derive(request.seed, i as u64),
                ..request.clone()
            };
            let soup = sample_soup(ckpt, &item)?;
            let mesh = soup_to_mesh(&soup);
            Ok((soup, mesh))
        });

    let mut manifest = Vec::with_capacity(request.count);
    let mut meshes = Vec::with_capacity(request.count);
    for (i, item) in results.into_iter().enumerate() {
        let (soup, mesh) = item?;
        let item_seed = derive(request.seed, i as u64);
        match mesh {
            Ok(mesh) => {
                let file = format!("gen_c{}_{:04}.obj", request.class_label, i);
                let path = out_dir.join(&file);
                std::fs::write(&path, write_obj(&mesh)).map_err(|source| SampleError::Io {
                    path: path.clone(),
                    source,
                })?;
                manifest.push(ManifestRow {
                    index: i,
                    seed: item_seed,
                    class: request.class_label,
                    faces: soup.real_face_count(),
                    path: Some(file),
                    status: "ok".into(),
                });
                meshes.push(Some(mesh));
            }
            Err(e) => {
                manifest.push(ManifestRow {
                    index: i,
                    seed: item_seed,
                    class: request.class_label,
                    faces: soup.real_face_count(),
                    path: None,
                    status: format!("degenerate: {e}"),
                });
                meshes.push(None);
            }
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut text = String::new();
    for row in &manifest {
        text.push_str(&serde_json::to_string(row).expect("manifest row serializes"));
        text.push('\n');
    }
    std::fs::write(&manifest_path, text).map_err(|source| SampleError::Io {
        path: manifest_path,
        source,
    })?;

    Ok(BatchOutput { manifest, meshes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserParams};
    use crate::optim::AdamState;
    use crate::schedule::ScheduleConfig;

    fn toy_checkpoint() -> DenoiserCheckpoint {
        let config = DenoiserConfig {
            embed_dim: 4,
            face_dim: 16,
            depth: 2,
            heads: 2,
            max_faces: 6,
            categories: 8,
            class_count: 2,
            skip_connections: true,
        };
        let params = DenoiserParams::init(&config, 5).unwrap();
        DenoiserCheckpoint {
            optimizer_state: Some(AdamState::new(&params.tensors)),
            params,
            schedule: ScheduleConfig {
                timesteps: 12,
                s: 0.008,
                beta_clip: 0.999,
            },
            step: 0,
            class_names: vec!["a".into(), "b".into()],
            face_histograms: vec![vec![(4, 2), (5, 1)], vec![(2, 1)]],
        }
    }

    fn toy_request() -> SampleRequest {
        SampleRequest {
            class_label: 0,
            count: 1,
            steps: None,
            seed: 42,
            face_count: None,
            threads: 1,
        }
    }

    #[test]
    fn subsampled_timesteps_are_strictly_decreasing_to_one() {
        for (t_max, k) in [(1000, 1000), (1000, 300), (1000, 2), (50, 50), (50, 7), (10, 1), (3, 2)] {
            let ts = subsample_timesteps(t_max, k);
            assert_eq!(ts.len(), k);
            assert_eq!(ts[0], if k == 1 { 1 } else { t_max });
            assert_eq!(*ts.last().unwrap(), 1);
            for w in ts.windows(2) {
                assert!(w[1] < w[0], "{ts:?}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let ckpt = toy_checkpoint();
        let req = toy_request();
        let a = sample_soup(&ckpt, &req).unwrap();
        let b = sample_soup(&ckpt, &req).unwrap();
        assert_eq!(a, b);
        assert!(a.real_face_count() >= 1);
        for face in a.real_faces() {
            for v in face {
                for &c in v {
                    assert!((c as usize) < 8);
                }
            }
        }
        // Histogram-drawn face count lands in the observed support.
        assert!([4usize, 5].contains(&a.real_face_count()));

        let different = sample_soup(
            &ckpt,
            &SampleRequest {
                seed: 43,
                ..toy_request()
            },
        )
        .unwrap();
        assert_ne!(a, different);
    }

    #[test]
    fn face_count_override_and_class_check() {
        let ckpt = toy_checkpoint();
        let soup = sample_soup(
            &ckpt,
            &SampleRequest {
                face_count: Some(3),
                ..toy_request()
            },
        )
        .unwrap();
        assert_eq!(soup.real_face_count(), 3);

        assert!(sample_soup(
            &ckpt,
            &SampleRequest {
                class_label: 7,
                ..toy_request()
            }
        )
        .is_err());
    }

    #[test]
    fn step_subsampling_works_end_to_end() {
        let ckpt = toy_checkpoint();
        for steps in [1usize, 3, 12] {
            let soup = sample_soup(
                &ckpt,
                &SampleRequest {
                    steps: Some(steps),
                    ..toy_request()
                },
            )
            .unwrap();
            assert!(soup.real_face_count() >= 1);
        }
        assert!(sample_soup(
            &ckpt,
            &SampleRequest {
                steps: Some(13),
                ..toy_request()
            }
        )
        .is_err());
    }

    #[test]
    fn degenerate_samples_become_failure_rows() {
        // Bias the output head so every coordinate collapses to category 0:
        // all three vertices of every face coincide, the mesh merge drops
        // everything, and the batch must record a failure instead of a file.
        let mut ckpt = toy_checkpoint();
        let c = ckpt.params.config.categories;
        {
            let bias = ckpt.params.tensors.get_mut("head.out.bias").data_mut();
            for slot in 0..9 {
                bias[slot * c] = 1e4;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let req = SampleRequest {
            count: 2,
            steps: Some(1), // single argmax step
            ..toy_request()
        };
        let out = generate_batch(&ckpt, &req, dir.path()).unwrap();
        assert_eq!(out.manifest.len(), 2);
        for row in &out.manifest {
            assert!(row.path.is_none());
            assert!(row.status.contains("degenerate"), "status: {}", row.status);
        }
        // The manifest still lands on disk.
        assert!(dir.path().join("manifest.jsonl").is_file());
    }

    #[test]
    fn batch_writes_objs_and_manifest_reproducibly() {
        let ckpt = toy_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let req = SampleRequest {
            count: 4,
            threads: 2,
            ..toy_request()
        };
        let out = generate_batch(&ckpt, &req, dir.path()).unwrap();
        assert_eq!(out.manifest.len(), 4);
        let manifest1 = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
        let files1: Vec<Vec<u8>> = out
            .manifest
            .iter()
            .filter_map(|r| r.path.as_ref())
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();

        // Rerun into a fresh directory: byte-identical artifacts.
        let dir2 = tempfile::tempdir().unwrap();
        let req_seq = SampleRequest { threads: 1, ..req };
        let out2 = generate_batch(&ckpt, &req_seq, dir2.path()).unwrap();
        assert_eq!(out2.manifest.len(), 4);
        let manifest2 = std::fs::read(dir2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest1, manifest2);
        let files2: Vec<Vec<u8>> = out2
            .manifest
            .iter()
            .filter_map(|r| r.path.as_ref())
            .map(|f| std::fs::read(dir2.path().join(f)).unwrap())
            .collect();
        assert_eq!(files1, files2);
    }
}
