//! Procedural parametric face model: coefficients, blendshape basis, mesh
//! synthesis, proxy rasterization and synthetic scene composition.

pub mod basis;
pub mod coefficients;
pub mod dataset;
pub mod mesh;
pub mod raster;
pub mod scene;

pub use basis::{FaceBasis, Region, N_LANDMARKS};
pub use coefficients::{
    mix_coefficients, sample_coefficients, Camera, CoefficientDims, CoefficientGroup,
    CoefficientSet, Lighting, Pose, SamplingPrior,
};
pub use dataset::{generate_dataset, BackgroundMode, Dataset, DatasetSpec, Sample};
pub use mesh::{synthesize_mesh, Mesh};
pub use raster::{render_proxy, ProxyRender, BACKGROUND, N_LABELS};
pub use scene::{compose_scene, landmark_heatmaps, SpatialBundle};
