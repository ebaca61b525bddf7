//! Turn colored point clouds into renderable 2D Gaussian splat sets.
//!
//! The crate covers the whole path from a raw cloud to trained prediction
//! networks: geometric initialization of one surfel per point, a splitting
//! decoder network that refines each surfel into `K` children, a
//! differentiable CPU rasterizer, image losses, the entire/patch two-module
//! training scheme, file formats and a synthetic data generator.

pub mod bench;
pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod imageio;
pub mod network;
pub mod ply;
pub mod rasterizer;
pub mod real;
pub mod synthdata;
pub mod vec3;

pub use camera::{project_center, Camera};
pub use error::{Error, Result};
pub use gaussians::{Gaussian2DSet, Space};
pub use geometry::{NeighborIndex, NormalizationTransform, PointCloud};
pub use image::ImageBuffer;
pub use network::{Architecture, ModuleParams};
pub use rasterizer::{render, render_backward, GaussianGradients, RenderOptions};
pub use real::Real;
