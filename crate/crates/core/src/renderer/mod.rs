//! Differentiable quadrature volume rendering with coarse/fine hierarchical
//! sampling.

mod camera;
mod composite;
mod render;
mod sampling;

pub use camera::{generate_ray, orbit_camera, Camera, Ray};
pub use composite::{composite, composite_batch, intervals, Composited, CompositedBatch};
pub use render::{
    render_image, render_ray, render_ray_batch_on_tape, render_rays, BatchRender, DepthSampler,
    RayColors, RenderConfig, RenderedFrame,
};
pub use sampling::{importance_sample, ray_rng, sample_pdf, stratified_sample, DrawMode, WEIGHT_FLOOR};
