//! Differentiable inverse rendering: a path tracer with next-event
//! estimation, replay-based gradients of a masked photometric objective, and
//! an alternating Adam optimizer over albedo, geometry and lighting.

pub mod accel;
pub mod brdf;
pub mod error;
pub mod grad;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod scalar;
pub mod scene;
pub mod spectrum;
pub mod synthetic;

pub use accel::{Bvh, Hit, Ray};
pub use brdf::{Distribution, MaterialSample};
pub use error::{Error, Result};
pub use math::{Mat3, Rigid, Vec3};
pub use render::{render, render_with_records, Film};
pub use scene::{Camera, LightKind, LightSource, Mesh, RenderConfig, Scene, ViewObservation};
pub use spectrum::Spectrum;
