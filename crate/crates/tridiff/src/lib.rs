//! Generation of 3D triangle meshes with a discrete denoising diffusion
//! model over quantized triangle soups.
//!
//! The pipeline: OBJ meshes are normalized, planar-decimated at several
//! angles, quality-filtered by Hausdorff distance, quantized into fixed-grid
//! triangle soups, and packed into a binary dataset. A per-face transformer
//! is trained to predict clean coordinate categories from noised soups; new
//! meshes are generated by iterating the learned reverse process from pure
//! categorical noise, and evaluated with the usual point-cloud generative
//! metrics (MMD, COV, 1-NNA, JSD) under the Chamfer distance.

pub mod bvh;
pub mod checkpoint;
pub mod dataset;
pub mod decimate;
pub mod denoiser;
pub mod diffusion;
pub mod geom;
pub mod hausdorff;
pub mod kdtree;
pub mod mesh;
pub mod metrics;
pub mod obj;
pub mod optim;
pub mod parallel;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod shapes;
pub mod soup;
pub mod tensor;
pub mod train;

pub use checkpoint::DenoiserCheckpoint;
pub use dataset::{DatasetFile, DatasetHeader, DatasetRecord};
pub use denoiser::{DenoiserConfig, DenoiserParams};
pub use mesh::{normalize_mesh, sample_surface_points, Mesh, MeshError, PointCloud};
pub use obj::{parse_obj, write_obj, ObjError};
pub use optim::OptimizerConfig;
pub use preprocess::{build_dataset, DatasetConfig};
pub use sampler::{generate_batch, sample_soup, SampleRequest};
pub use schedule::{cosine_schedule, NoiseSchedule, ScheduleConfig};
pub use soup::{canonical_order, quantize, soup_to_mesh, QuantizedTriangleSoup};
pub use train::{train, TrainConfig};
