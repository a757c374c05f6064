//! Gradients of the masked photometric objective.
//!
//! The backward pass re-samples every masked-in pixel with the forward
//! pass's random streams and replays the recorded paths against the live
//! scene. Along a path with throughputs `β_k`, emitted terms `E_k` and
//! bounce factors `B_k`, the estimate is `Σ β_k E_k`; with the suffix sums
//! `R_k = E_k + B_k R_{k+1}` the derivative with respect to a parameter
//! local to vertex `k` is `β_k (∂E_k + ∂B_k R_{k+1})`.
//!
//! Sampling never depends on an optimized parameter (cosine bounces,
//! uniform light choice), so these replay derivatives are derivatives of the
//! estimator itself. Geometry derivatives cover shading only; visibility
//! and the sampled path topology are held fixed.

mod geometry;
mod laplacian;

use std::borrow::Cow;
use std::f64::consts::FRAC_1_PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::accel::Bvh;
use crate::brdf::specular_factor;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::render::{
    bounce_factor, light_geometry, material_at, nee_factor, pixel_value, render, sample_pixel,
    Film, LightGeometry, PathRecord,
};
use crate::scene::{Camera, RenderConfig, Scene, ViewObservation};
use crate::spectrum::Spectrum;

pub use laplacian::laplacian_regularizer;

/// Pixels per backward work unit. Each unit owns a private gradient buffer;
/// units are reduced in index order.
const TILE_PIXELS: usize = 1024;

/// How the residual `Î − I` that weights each path derivative is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    /// Residual and derivative share their paths: the exact gradient of the
    /// sampled objective for a fixed seed.
    #[default]
    Shared,
    /// The residual comes from an independent render of the same pixel, which
    /// removes the `Cov(Î, ∂Î)` bias from the gradient of the expected
    /// objective. The reported objective uses the residual render.
    Decorrelated,
}

/// Seed of the independent residual render.
fn residual_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Diffuse,
    Geometry,
    Lights,
    Specular,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Diffuse,
        ParamGroup::Geometry,
        ParamGroup::Lights,
        ParamGroup::Specular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Diffuse => "diffuse",
            ParamGroup::Geometry => "geometry",
            ParamGroup::Lights => "lights",
            ParamGroup::Specular => "specular",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid("parameter group", format!("unknown group `{s}`")))
    }
}

/// Which gradient groups a backward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask {
    pub diffuse: bool,
    pub specular: bool,
    pub lights: bool,
    pub geometry: bool,
}

impl GroupMask {
    pub const ALL: GroupMask = GroupMask {
        diffuse: true,
        specular: true,
        lights: true,
        geometry: true,
    };

    pub fn only(group: ParamGroup) -> GroupMask {
        GroupMask {
            diffuse: group == ParamGroup::Diffuse,
            specular: group == ParamGroup::Specular,
            lights: group == ParamGroup::Lights,
            geometry: group == ParamGroup::Geometry,
        }
    }
}

/// Per-parameter gradient buffers laid out like the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub diffuse: Vec<Spectrum>,
    pub specular: Vec<Spectrum>,
    pub lights: Vec<Spectrum>,
    pub vertices: Vec<Vec3>,
}

impl GradientSet {
    pub fn zeros(scene: &Scene) -> GradientSet {
        let n = scene.mesh.vertex_count();
        GradientSet {
            diffuse: vec![Spectrum::ZERO; n],
            specular: vec![Spectrum::ZERO; n],
            lights: vec![Spectrum::ZERO; scene.lights.len()],
            vertices: vec![Vec3::ZERO; n],
        }
    }

    pub fn add_assign(&mut self, o: &GradientSet) {
        for (a, b) in self.diffuse.iter_mut().zip(&o.diffuse) {
            *a += *b;
        }
        for (a, b) in self.specular.iter_mut().zip(&o.specular) {
            *a += *b;
        }
        for (a, b) in self.lights.iter_mut().zip(&o.lights) {
            *a += *b;
        }
        for (a, b) in self.vertices.iter_mut().zip(&o.vertices) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.diffuse.iter().chain(&self.specular).chain(&self.lights).all(|s| s.is_finite())
            && self.vertices.iter().all(|v| v.is_finite())
    }

    /// True when every entry is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.group_flat(ParamGroup::Diffuse)
            .into_iter()
            .chain(self.group_flat(ParamGroup::Specular))
            .chain(self.group_flat(ParamGroup::Lights))
            .chain(self.group_flat(ParamGroup::Geometry))
            .all(|x| x == 0.0)
    }

    /// One group flattened in scene order (three scalars per entry).
    pub fn group_flat(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Diffuse => self.diffuse.iter().flat_map(|s| s.to_array()).collect(),
            ParamGroup::Specular => self.specular.iter().flat_map(|s| s.to_array()).collect(),
            ParamGroup::Lights => self.lights.iter().flat_map(|s| s.to_array()).collect(),
            ParamGroup::Geometry => self.vertices.iter().flat_map(|v| v.to_array()).collect(),
        }
    }

    /// Gradient entry addressed by `p`.
    pub fn get(&self, p: ParamRef) -> f64 {
        match p {
            ParamRef::Diffuse { vertex, channel } => self.diffuse[vertex][channel],
            ParamRef::Specular { vertex, channel } => self.specular[vertex][channel],
            ParamRef::Light { index, channel } => self.lights[index][channel],
            ParamRef::Vertex { vertex, axis } => self.vertices[vertex][axis],
        }
    }
}

/// A single scalar scene parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Diffuse { vertex: usize, channel: usize },
    Specular { vertex: usize, channel: usize },
    Light { index: usize, channel: usize },
    Vertex { vertex: usize, axis: usize },
}

impl ParamRef {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamRef::Diffuse { .. } => ParamGroup::Diffuse,
            ParamRef::Specular { .. } => ParamGroup::Specular,
            ParamRef::Light { .. } => ParamGroup::Lights,
            ParamRef::Vertex { .. } => ParamGroup::Geometry,
        }
    }

    /// Every scalar of `group`, in the order of [`GradientSet::group_flat`].
    pub fn all_in_group(scene: &Scene, group: ParamGroup) -> Vec<ParamRef> {
        let per = |n: usize, f: fn(usize, usize) -> ParamRef| -> Vec<ParamRef> {
            (0..n).flat_map(|i| (0..3).map(move |c| f(i, c))).collect()
        };
        let nv = scene.mesh.vertex_count();
        match group {
            ParamGroup::Diffuse => per(nv, |vertex, channel| ParamRef::Diffuse { vertex, channel }),
            ParamGroup::Specular => per(nv, |vertex, channel| ParamRef::Specular { vertex, channel }),
            ParamGroup::Lights => per(scene.lights.len(), |index, channel| ParamRef::Light { index, channel }),
            ParamGroup::Geometry => per(nv, |vertex, axis| ParamRef::Vertex { vertex, axis }),
        }
    }

    pub fn get(self, scene: &Scene) -> f64 {
        match self {
            ParamRef::Diffuse { vertex, channel } => scene.mesh.diffuse[vertex][channel],
            ParamRef::Specular { vertex, channel } => scene.mesh.specular[vertex][channel],
            ParamRef::Light { index, channel } => scene.lights[index].intensity[channel],
            ParamRef::Vertex { vertex, axis } => scene.mesh.vertices[vertex][axis],
        }
    }

    /// Sets the parameter. Vertex moves refresh the mesh normals.
    pub fn set(self, scene: &mut Scene, value: f64) {
        match self {
            ParamRef::Diffuse { vertex, channel } => scene.mesh.diffuse[vertex][channel] = value,
            ParamRef::Specular { vertex, channel } => scene.mesh.specular[vertex][channel] = value,
            ParamRef::Light { index, channel } => scene.lights[index].intensity[channel] = value,
            ParamRef::Vertex { vertex, axis } => {
                let mut a = scene.mesh.vertices[vertex].to_array();
                a[axis] = value;
                scene.mesh.vertices[vertex] = Vec3::from_array(a);
                scene.mesh.refresh_normals();
            }
        }
    }
}

fn check_views(observations: &[ViewObservation], views: &[usize]) -> Result<()> {
    for &k in views {
        if k >= observations.len() {
            return Err(Error::CameraIndex {
                index: k,
                count: observations.len(),
            });
        }
    }
    Ok(())
}

/// Masked squared error summed over `views` and divided by the number of
/// masked-in pixels. `films[k]` is compared with `observations[k]`.
pub fn objective(films: &[Film], observations: &[ViewObservation], views: &[usize]) -> Result<f64> {
    check_views(observations, views)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &k in views {
        let film = films.get(k).ok_or(Error::ShapeMismatch {
            expected: observations.len(),
            got: films.len(),
        })?;
        let obs = &observations[k];
        let img = &film.image;
        if img.width != obs.image.width || img.height != obs.image.height {
            return Err(Error::SizeMismatch {
                path: Default::default(),
                field: format!("film[{k}]"),
                got_w: img.width,
                got_h: img.height,
                want_w: obs.image.width,
                want_h: obs.image.height,
            });
        }
        for ((p, q), &m) in img.pixels.iter().zip(&obs.image.pixels).zip(&obs.mask.data) {
            if m {
                let d = *p - *q;
                sum += d.dot(d);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn prepared_view<'a>(obs: &'a ViewObservation, config: &RenderConfig) -> Result<Cow<'a, ViewObservation>> {
    if config.downsample > 1 {
        Ok(Cow::Owned(obs.downsampled(config.downsample as usize)?))
    } else {
        Ok(Cow::Borrowed(obs))
    }
}

/// Renders `views` and evaluates the objective against the observations
/// (downsampled by `config.downsample`).
pub fn evaluate_objective(
    scene: &Scene,
    bvh: &Bvh,
    observations: &[ViewObservation],
    views: &[usize],
    config: &RenderConfig,
) -> Result<f64> {
    check_views(observations, views)?;
    let mut films = Vec::with_capacity(views.len());
    let mut obs = Vec::with_capacity(views.len());
    for &k in views {
        let view = prepared_view(&observations[k], config)?;
        let cfg = RenderConfig {
            downsample: 1,
            ..*config
        };
        films.push(render(scene, bvh, &view.camera, &cfg)?);
        obs.push(view.into_owned());
    }
    let idx: Vec<usize> = (0..views.len()).collect();
    objective(&films, &obs, &idx)
}

struct Accum {
    grad: GradientSet,
    d_normals: Vec<Vec3>,
    objective: f64,
}

impl Accum {
    fn new(scene: &Scene, geometry: bool) -> Accum {
        Accum {
            grad: GradientSet::zeros(scene),
            d_normals: if geometry {
                vec![Vec3::ZERO; scene.mesh.vertex_count()]
            } else {
                Vec::new()
            },
            objective: 0.0,
        }
    }

    fn merge(&mut self, o: &Accum) {
        self.grad.add_assign(&o.grad);
        for (a, b) in self.d_normals.iter_mut().zip(&o.d_normals) {
            *a += *b;
        }
        self.objective += o.objective;
    }
}

/// Objective value and gradients of every group over `views`.
pub fn backward(
    scene: &Scene,
    bvh: &Bvh,
    observations: &[ViewObservation],
    views: &[usize],
    config: &RenderConfig,
) -> Result<(f64, GradientSet)> {
    backward_groups(scene, bvh, observations, views, config, GroupMask::ALL, Estimator::Shared)
}

/// Like [`backward`], computing only the groups in `groups`; the other
/// buffers stay zero.
pub fn backward_groups(
    scene: &Scene,
    bvh: &Bvh,
    observations: &[ViewObservation],
    views: &[usize],
    config: &RenderConfig,
    groups: GroupMask,
    estimator: Estimator,
) -> Result<(f64, GradientSet)> {
    config.validate()?;
    check_views(observations, views)?;
    let prepared = views
        .iter()
        .map(|&k| prepared_view(&observations[k], config))
        .collect::<Result<Vec<_>>>()?;
    let masked: usize = prepared.iter().map(|v| v.mask.count()).sum();
    let mut total = Accum::new(scene, groups.geometry);
    if masked == 0 {
        return Ok((0.0, total.grad));
    }
    let inv_n = 1.0 / masked as f64;
    let cfg = RenderConfig {
        downsample: 1,
        ..*config
    };
    for view in &prepared {
        let n = view.camera.width * view.camera.height;
        let tiles: Vec<Accum> = (0..n.div_ceil(TILE_PIXELS))
            .into_par_iter()
            .map(|t| {
                let range = t * TILE_PIXELS..((t + 1) * TILE_PIXELS).min(n);
                let mut acc = Accum::new(scene, groups.geometry);
                backward_tile(scene, bvh, view, &cfg, range, inv_n, groups, estimator, &mut acc);
                acc
            })
            .collect();
        for t in &tiles {
            total.merge(t);
        }
    }
    if groups.geometry {
        let from_normals = geometry::normals_backprop(&scene.mesh, &total.d_normals);
        for (g, d) in total.grad.vertices.iter_mut().zip(from_normals) {
            *g += d;
        }
    }
    Ok((total.objective, total.grad))
}

#[allow(clippy::too_many_arguments)]
fn backward_tile(
    scene: &Scene,
    bvh: &Bvh,
    view: &ViewObservation,
    config: &RenderConfig,
    pixels: std::ops::Range<usize>,
    inv_n: f64,
    groups: GroupMask,
    estimator: Estimator,
    acc: &mut Accum,
) {
    let cam: &Camera = &view.camera;
    let per_sample = cam.exposure / config.spp as f64;
    let residual_cfg = RenderConfig {
        seed: residual_seed(config.seed),
        ..*config
    };
    for p in pixels {
        if !view.mask.data[p] {
            continue;
        }
        let paths = sample_pixel(scene, bvh, cam, config, p);
        let estimate = match estimator {
            Estimator::Shared => pixel_value(scene, &paths, cam.exposure),
            Estimator::Decorrelated => {
                pixel_value(scene, &sample_pixel(scene, bvh, cam, &residual_cfg, p), cam.exposure)
            }
        };
        let diff = estimate - view.image.pixels[p];
        acc.objective += diff.dot(diff) * inv_n;
        let w = diff * (2.0 * inv_n * per_sample);
        for path in &paths {
            replay_path(scene, path, w, groups, acc);
        }
    }
}

/// Accumulates `w · ∂L/∂θ` for one recorded path.
fn replay_path(scene: &Scene, path: &PathRecord, w: Spectrum, groups: GroupMask, acc: &mut Accum) {
    let count = scene.lights.len() as f64;
    let n = path.vertices.len();
    let mut mats = Vec::with_capacity(n);
    let mut emitted = Vec::with_capacity(n);
    let mut bounces = Vec::with_capacity(n);
    for v in &path.vertices {
        let mat = material_at(&scene.mesh, v.hit.face, v.hit.barycentrics);
        let e = match v.light {
            Some(ls) => nee_factor(scene, &mat, v, ls) * scene.lights[ls.index as usize].intensity * count,
            None => Spectrum::ZERO,
        };
        let b = v.bounce.map_or(Spectrum::ZERO, |b| bounce_factor(&mat, v, &b));
        mats.push(mat);
        emitted.push(e);
        bounces.push(b);
    }
    // tails[k] = R_{k+1}
    let mut tails = vec![Spectrum::ZERO; n];
    let mut r = Spectrum::ZERO;
    for k in (0..n).rev() {
        tails[k] = r;
        r = emitted[k] + bounces[k] * r;
    }
    let mut beta = Spectrum::ONE;
    for (k, v) in path.vertices.iter().enumerate() {
        let wb = w * beta;
        let tail = tails[k];
        let mat = &mats[k];
        let nrm = v.hit.shading_normal;
        let cos_o = nrm.dot(v.wo);
        if groups.lights {
            if let Some(ls) = v.light {
                let f = nee_factor(scene, mat, v, ls);
                acc.grad.lights[ls.index as usize] += wb * f * count;
            }
        }
        if groups.diffuse || groups.specular {
            // ∂E/∂ρ and ∂B/∂ρ per unit albedo, channelwise.
            let (mut ed, mut es) = (Spectrum::ZERO, Spectrum::ZERO);
            if let Some(ls) = v.light.filter(|ls| ls.visible) {
                let light = &scene.lights[ls.index as usize];
                match light_geometry(&light.kind, v.hit.point) {
                    LightGeometry::Directed { wi, falloff } => {
                        let cos_i = nrm.dot(wi);
                        if cos_i > 0.0 && cos_o > 0.0 {
                            let s = cos_i * falloff;
                            let spec = specular_factor(mat.distribution, mat.alpha, mat.f0, cos_i, cos_o, wi.dot(v.wo));
                            ed = light.intensity * (count * s * FRAC_1_PI);
                            es = light.intensity * (count * s * spec);
                        }
                    }
                    LightGeometry::Ambient => ed = light.intensity * count,
                }
            }
            if let Some(b) = v.bounce {
                let cos_i = nrm.dot(b.wi);
                if cos_i > 0.0 && cos_o > 0.0 && b.pdf > 0.0 {
                    let s = cos_i / b.pdf;
                    let spec = specular_factor(mat.distribution, mat.alpha, mat.f0, cos_i, cos_o, b.wi.dot(v.wo));
                    ed += tail * (s * FRAC_1_PI);
                    es += tail * (s * spec);
                }
            }
            let face = scene.mesh.faces[v.hit.face as usize];
            for (j, &bj) in v.hit.barycentrics.iter().enumerate() {
                let vi = face[j] as usize;
                if groups.diffuse {
                    acc.grad.diffuse[vi] += wb * ed * bj;
                }
                if groups.specular {
                    acc.grad.specular[vi] += wb * es * bj;
                }
            }
        }
        if groups.geometry {
            geometry::accumulate_vertex(scene, v, wb, tail, count, &mut acc.grad.vertices, &mut acc.d_normals);
        }
        beta *= bounces[k];
    }
}

/// Central differences `(O(θ+h) − O(θ−h)) / 2h` for each listed parameter,
/// with the configured seed on both sides.
pub fn finite_difference_gradient(
    scene: &Scene,
    params: &[ParamRef],
    step: f64,
    observations: &[ViewObservation],
    views: &[usize],
    config: &RenderConfig,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite difference step", "must be positive"));
    }
    let eval = |s: &Scene| -> Result<f64> {
        let bvh = Bvh::build(&s.mesh)?;
        evaluate_objective(s, &bvh, observations, views, config)
    };
    params
        .iter()
        .map(|&p| {
            let x = p.get(scene);
            let mut plus = scene.clone();
            p.set(&mut plus, x + step);
            let mut minus = scene.clone();
            p.set(&mut minus, x - step);
            Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, or `‖a‖` when `b` is zero.
pub fn relative_l2_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests;
