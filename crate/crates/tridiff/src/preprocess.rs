//! Dataset construction: normalize, decimate at several angles, filter by
//! Hausdorff distance, split by source mesh, quantize, canonicalize, pack.

use crate::dataset::{DatasetError, DatasetFile, DatasetHeader, DatasetRecord};
use crate::decimate::planar_decimate;
use crate::hausdorff::hausdorff_distance;
use crate::mesh::{normalize_mesh, Mesh};
use crate::obj::parse_obj;
use crate::parallel;
use crate::rng::{derive, Rng};
use crate::soup::{canonical_order, quantize};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no class subdirectories found in {0}")]
    NoClasses(PathBuf),
    #[error("no meshes survived preprocessing")]
    NothingRetained,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Knobs for the dataset pipeline. Defaults follow the reference recipe:
/// 8-bit quantization, 800-face cap, 30 decimation angles spanning 1°-60°,
/// a 90/10 split, and per-axis scale augmentation in [0.75, 1.25].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub decimation_angles: Vec<f64>,
    pub hausdorff_threshold: f64,
    pub hausdorff_samples: usize,
    pub train_fraction: f64,
    pub max_faces: u16,
    pub bits: u8,
    pub scale_range: (f64, f64),
    pub seed: u64,
    /// Worker cap; outputs never depend on it, so it stays out of config
    /// files and echoes.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let angles = (0..30).map(|i| 1.0 + 59.0 * i as f64 / 29.0).collect();
        DatasetConfig {
            decimation_angles: angles,
            hausdorff_threshold: 0.02,
            hausdorff_samples: 10_000,
            train_fraction: 0.9,
            max_faces: 800,
            bits: 8,
            scale_range: (0.75, 1.25),
            seed: 0,
            threads: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(PreprocessError::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(PreprocessError::Config(format!(
                "bad scale range {:?}",
                self.scale_range
            )));
        }
        if self.decimation_angles.is_empty() {
            return Err(PreprocessError::Config("no decimation angles".into()));
        }
        for &a in &self.decimation_angles {
            if !(0.0 < a && a < 90.0) {
                return Err(PreprocessError::Config(format!("angle {a} outside (0°, 90°)")));
            }
        }
        if self.bits == 0 || self.bits > 16 {
            return Err(PreprocessError::Config(format!("bits {} outside [1, 16]", self.bits)));
        }
        Ok(())
    }
}

/// Multiplies each axis by an independent uniform factor from `scale_range`,
/// then re-normalizes so the bounding-box diagonal is 1 again.
pub fn augment_scale(mesh: &Mesh, scale_range: (f64, f64), seed: u64) -> Result<Mesh, crate::mesh::MeshError> {
    let mut rng = Rng::new(seed);
    let fx = rng.next_range(scale_range.0, scale_range.1);
    let fy = rng.next_range(scale_range.0, scale_range.1);
    let fz = rng.next_range(scale_range.0, scale_range.1);
    let vertices = mesh
        .vertices
        .iter()
        .map(|v| [v[0] * fx, v[1] * fy, v[2] * fz])
        .collect();
    normalize_mesh(&Mesh {
        vertices,
        faces: mesh.faces.clone(),
    })
}

/// Why a decimated variant was not kept.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum RejectReason {
    HausdorffAboveThreshold { distance: f64 },
    TooManyFaces { faces: usize },
    Degenerate { detail: String },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub source_meshes: usize,
    pub retained_records: usize,
    pub rejected_records: usize,
    pub train_records: usize,
    pub test_records: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub classes: Vec<ClassReport>,
    pub skipped_files: Vec<String>,
    /// (file, angle, reason) for each rejected variant.
    pub rejections: Vec<(String, f64, RejectReason)>,
    pub hausdorff_threshold: f64,
    pub hausdorff_samples: usize,
    pub total_train_records: usize,
    pub total_test_records: usize,
}

pub struct BuildOutput {
    pub train: DatasetFile,
    pub test: DatasetFile,
    pub report: BuildReport,
}

struct SourceMesh {
    class_id: u16,
    path: PathBuf,
    index: usize,
}

/// Runs the pipeline over `input_dir`, whose immediate subdirectories name
/// the classes and contain `.obj` files. Variants of one source mesh always
/// land in the same split. Output order is deterministic (classes and files
/// sorted by name) regardless of thread count.
pub fn build_dataset(input_dir: &Path, config: &DatasetConfig) -> Result<BuildOutput, PreprocessError> {
    config.validate()?;
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(input_dir)
        .map_err(|source| PreprocessError::Io {
            path: input_dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(PreprocessError::NoClasses(input_dir.to_path_buf()));
    }

    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();

    let mut skipped_files = Vec::new();
    let mut sources: Vec<SourceMesh> = Vec::new();
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|source| PreprocessError::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("obj")).unwrap_or(false))
            .collect();
        files.sort();
        for path in files {
            sources.push(SourceMesh {
                class_id: class_id as u16,
                path,
                index: sources.len(),
            });
        }
    }

    // Per-source work: parse, normalize, decimate at every angle, filter.
    struct SourceResult {
        records: Vec<DatasetRecord>,
        rejections: Vec<(String, f64, RejectReason)>,
        skipped: Option<String>,
    }

    let results: Vec<SourceResult> = parallel::map_indexed(sources.len(), config.threads, |i| {
        let src = &sources[i];
        let display = src.path.display().to_string();
        let bytes = match std::fs::read(&src.path) {
            Ok(b) => b,
            Err(e) => {
                return SourceResult {
                    records: Vec::new(),
                    rejections: Vec::new(),
                    skipped: Some(format!("{display}: {e}")),
                }
            }
        };
        let mesh = match parse_obj(&bytes).and_then(|m| {
            m.validate().map_err(|e| crate::obj::ObjError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            Ok(m)
        }) {
            Ok(m) => m,
            Err(e) => {
                return SourceResult {
                    records: Vec::new(),
                    rejections: Vec::new(),
                    skipped: Some(format!("{display}: {e}")),
                }
            }
        };
        let normalized = match normalize_mesh(&mesh) {
            Ok(m) => m,
            Err(e) => {
                return SourceResult {
                    records: Vec::new(),
                    rejections: Vec::new(),
                    skipped: Some(format!("{display}: {e}")),
                }
            }
        };

        let mut records = Vec::new();
        let mut rejections = Vec::new();
        for (ai, &angle) in config.decimation_angles.iter().enumerate() {
            let decimated = planar_decimate(&normalized, angle);
            if decimated.faces.len() > config.max_faces as usize {
                rejections.push((
                    display.clone(),
                    angle,
                    RejectReason::TooManyFaces {
                        faces: decimated.faces.len(),
                    },
                ));
                continue;
            }
            let h_seed = derive(derive(config.seed, src.index as u64), ai as u64);
            let distance = match hausdorff_distance(&normalized, &decimated, config.hausdorff_samples, h_seed) {
                Ok(d) => d,
                Err(e) => {
                    rejections.push((
                        display.clone(),
                        angle,
                        RejectReason::Degenerate { detail: e.to_string() },
                    ));
                    continue;
                }
            };
            if distance > config.hausdorff_threshold {
                rejections.push((
                    display.clone(),
                    angle,
                    RejectReason::HausdorffAboveThreshold { distance },
                ));
                continue;
            }
            // Decimation keeps coordinates in place, so the variant is still
            // normalized and ready to quantize.
            let soup = match quantize(&decimated, config.bits, config.max_faces as usize) {
                Ok(mut s) => {
                    s.class_label = src.class_id as u32;
                    s
                }
                Err(e) => {
                    rejections.push((
                        display.clone(),
                        angle,
                        RejectReason::Degenerate { detail: e.to_string() },
                    ));
                    continue;
                }
            };
            if soup.real_face_count() == 0 {
                rejections.push((
                    display.clone(),
                    angle,
                    RejectReason::Degenerate {
                        detail: "no faces survived quantization".into(),
                    },
                ));
                continue;
            }
            records.push(DatasetRecord::from_soup(&canonical_order(&soup)));
        }
        SourceResult {
            records,
            rejections,
            skipped: None,
        }
    });

    // Split by source mesh, per class, with a seeded shuffle.
    let mut per_class_sources: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, src) in sources.iter().enumerate() {
        if results[i].skipped.is_none() && !results[i].records.is_empty() {
            per_class_sources[src.class_id as usize].push(i);
        }
    }
    let mut train_records = Vec::new();
    let mut test_records = Vec::new();
    let mut class_reports = Vec::new();
    let mut rejections = Vec::new();
    for r in &results {
        rejections.extend(r.rejections.iter().cloned());
        if let Some(s) = &r.skipped {
            skipped_files.push(s.clone());
        }
    }
    for (class_id, name) in class_names.iter().enumerate() {
        let mut members = per_class_sources[class_id].clone();
        let mut rng = Rng::new(derive(derive(config.seed, 0x51), class_id as u64));
        // Fisher-Yates.
        for i in (1..members.len()).rev() {
            let j = rng.next_below(i + 1);
            members.swap(i, j);
        }
        let n_train = if members.len() <= 1 {
            members.len()
        } else {
            ((members.len() as f64 * config.train_fraction).round() as usize).clamp(1, members.len() - 1)
        };
        let mut split: Vec<(usize, bool)> = members
            .iter()
            .enumerate()
            .map(|(rank, &src)| (src, rank < n_train))
            .collect();
        // Deterministic output order: by source index, not shuffle order.
        split.sort_by_key(|&(src, _)| src);

        let mut report = ClassReport {
            class: name.clone(),
            source_meshes: per_class_sources[class_id].len(),
            ..Default::default()
        };
        for (src, is_train) in split {
            let recs = &results[src].records;
            report.retained_records += recs.len();
            if is_train {
                report.train_records += recs.len();
                train_records.extend(recs.iter().cloned());
            } else {
                report.test_records += recs.len();
                test_records.extend(recs.iter().cloned());
            }
        }
        report.rejected_records = rejections
            .iter()
            .filter(|(file, _, _)| {
                sources
                    .iter()
                    .any(|s| s.class_id as usize == class_id && s.path.display().to_string() == *file)
            })
            .count();
        class_reports.push(report);
    }

    if train_records.is_empty() && test_records.is_empty() {
        return Err(PreprocessError::NothingRetained);
    }

    let header = DatasetHeader {
        bits: config.bits,
        max_faces: config.max_faces,
        class_names: class_names.clone(),
    };
    let train = DatasetFile::new(header.clone(), train_records)?;
    let test = DatasetFile::new(header, test_records)?;
    let report = BuildReport {
        classes: class_reports,
        skipped_files,
        rejections,
        hausdorff_threshold: config.hausdorff_threshold,
        hausdorff_samples: config.hausdorff_samples,
        total_train_records: train.records.len(),
        total_test_records: test.records.len(),
    };
    Ok(BuildOutput { train, test, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obj::write_obj;
    use crate::shapes;

    fn write_corpus(root: &Path) {
        for (class, meshes) in [
            ("boxes", vec![shapes::cube(0.0, 1.0), shapes::cube_subdivided()]),
            ("spiky", vec![shapes::octahedron(), shapes::square_pyramid(), shapes::tetrahedron()]),
        ] {
            let dir = root.join(class);
            std::fs::create_dir_all(&dir).unwrap();
            for (i, m) in meshes.iter().enumerate() {
                std::fs::write(dir.join(format!("m{i}.obj")), write_obj(m)).unwrap();
            }
        }
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            decimation_angles: vec![1.0, 30.0],
            hausdorff_samples: 600,
            max_faces: 64,
            bits: 6,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_matches_reference_recipe() {
        let cfg = DatasetConfig::default();
        assert_eq!(cfg.bits, 8);
        assert_eq!(cfg.max_faces, 800);
        assert_eq!(cfg.train_fraction, 0.9);
        assert_eq!(cfg.scale_range, (0.75, 1.25));
        assert_eq!(cfg.decimation_angles.len(), 30);
        assert_eq!(cfg.decimation_angles[0], 1.0);
        assert_eq!(*cfg.decimation_angles.last().unwrap(), 60.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn augment_identity_range_is_identity_after_renormalize() {
        let mesh = normalize_mesh(&shapes::cube(0.0, 1.0)).unwrap();
        let out = augment_scale(&mesh, (1.0, 1.0), 3).unwrap();
        for (a, b) in mesh.vertices.iter().zip(&out.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augment_factors_average_to_one_over_many_draws() {
        let mesh = normalize_mesh(&shapes::cube(0.0, 1.0)).unwrap();
        let n = 10_000;
        let (lo, hi) = (0.75, 1.25);
        let mut mean_extent = [0.0f64; 3];
        for seed in 0..n {
            // Scale without renormalizing to observe the raw factors.
            let mut rng = Rng::new(seed);
            let f = [
                rng.next_range(lo, hi),
                rng.next_range(lo, hi),
                rng.next_range(lo, hi),
            ];
            for a in 0..3 {
                mean_extent[a] += f[a];
            }
        }
        for a in 0..3 {
            mean_extent[a] /= n as f64;
        }
        // Uniform(0.75, 1.25): mean 1, sd = 0.5/sqrt(12).
        let sigma = 0.5 / 12.0_f64.sqrt() / (n as f64).sqrt();
        for a in 0..3 {
            assert!((mean_extent[a] - 1.0).abs() < 3.0 * sigma, "axis {a}: {}", mean_extent[a]);
        }
        let _ = mesh;
    }

    #[test]
    fn build_dataset_splits_by_source_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let config = small_config();
        let out = build_dataset(dir.path(), &config).unwrap();

        assert_eq!(out.train.header.class_names, vec!["boxes", "spiky"]);
        assert!(out.report.total_train_records > 0);
        // Every record respects the caps.
        for r in out.train.records.iter().chain(&out.test.records) {
            assert!(r.faces.len() <= config.max_faces as usize);
        }
        // Byte-identical rewrite.
        let bytes = out.train.to_bytes();
        assert_eq!(DatasetFile::from_bytes(&bytes).unwrap().to_bytes(), bytes);

        // With tiny corpora a class may fall entirely into train; records
        // from one source mesh never cross the split. Rebuilding with the
        // same seed must reproduce identical files.
        let again = build_dataset(dir.path(), &config).unwrap();
        assert_eq!(again.train.to_bytes(), out.train.to_bytes());
        assert_eq!(again.test.to_bytes(), out.test.to_bytes());
    }

    #[test]
    fn build_dataset_is_thread_count_independent() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let mut config = small_config();
        config.threads = 1;
        let one = build_dataset(dir.path(), &config).unwrap();
        config.threads = 4;
        let four = build_dataset(dir.path(), &config).unwrap();
        assert_eq!(one.train.to_bytes(), four.train.to_bytes());
        assert_eq!(one.test.to_bytes(), four.test.to_bytes());
    }

    #[test]
    fn unreadable_file_is_skipped_with_report_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        std::fs::write(dir.path().join("boxes/broken.obj"), b"v 0 0\nf 1 2 3\n").unwrap();
        let out = build_dataset(dir.path(), &small_config()).unwrap();
        assert_eq!(out.report.skipped_files.len(), 1);
        assert!(out.report.skipped_files[0].contains("broken.obj"));
    }

    #[test]
    fn empty_input_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("empty_class")).unwrap();
        match build_dataset(dir.path(), &small_config()) {
            Err(PreprocessError::NothingRetained) => {}
            other => panic!("unexpected: {:?}", other.is_ok()),
        }
    }

    #[test]
    fn impossible_threshold_rejects_everything() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path());
        let mut config = small_config();
        config.hausdorff_threshold = -1.0; // nothing passes a negative bound
        match build_dataset(dir.path(), &config) {
            Err(PreprocessError::NothingRetained) => {}
            Ok(out) => panic!("retained {} records", out.report.total_train_records),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
