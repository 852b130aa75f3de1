//! Zero-shot 3D visual grounding.
//!
//! A query is grounded in three phases: semantic alignment of precomputed 3D
//! proposals against LLM-parsed categories and 2D detections, instance
//! rectification from VLM point prompts when nothing matches, and a
//! multiple-choice tournament over RGB|BEV composites rendered from
//! distilled viewpoints.
//!
//! Geometry and scene types are generic over [`scalar::Real`] (`f32` or
//! `f64`); the aliases below name the common instantiations. The pipeline
//! itself runs in `f64`.

pub mod alignment;
pub mod clients;
pub mod config;
pub mod distillation;
pub mod eval;
pub mod geometry;
pub mod mask;
pub mod pipeline;
pub mod prompts;
pub mod raster;
pub mod rectification;
pub mod scalar;
pub mod scene;
pub mod synthetic;

pub use config::Config;
pub use pipeline::{run_grounding, GroundingResult, ResultRecord, Status};

pub type Vec3d = geometry::Vec3<f64>;
pub type Vec3f = geometry::Vec3<f32>;
pub type Box2d = geometry::Box2D<f64>;
pub type Box2f = geometry::Box2D<f32>;
pub type Box3d = geometry::Box3D<f64>;
pub type Box3f = geometry::Box3D<f32>;
pub type Posed = geometry::Pose<f64>;
pub type Posef = geometry::Pose<f32>;
pub type Scened = scene::Scene<f64>;
pub type Scenef = scene::Scene<f32>;
pub type Proposald = scene::Proposal3D<f64>;
pub type Proposalf = scene::Proposal3D<f32>;
