//! Forward path tracer with next-event estimation.
//!
//! Tracing is split in two: [`sample_path`] makes every random decision
//! (sub-pixel position, light choice, bounce directions, visibility) and
//! stores it in a [`PathRecord`]; [`path_radiance`] then evaluates the
//! estimator from the record and the live scene parameters. The forward pass
//! and gradient replay share `path_radiance`, so replayed films are
//! bit-identical to rendered ones.
//!
//! Per path vertex the estimator adds `β · (M+1) · contribution(light)` for
//! one light chosen uniformly among the `M+1` sources, then continues with a
//! cosine-weighted bounce (`β *= fr·cos/pdf`) until `max_bounces` vertices
//! have been shaded.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::accel::{Bvh, Hit, Ray};
use crate::brdf::{eval_cos, sample_cosine_hemisphere, MaterialSample};
use crate::error::{Error, Result};
use crate::math::{Frame, Vec3};
use crate::scene::{Camera, Image, LightKind, Mask, Mesh, RenderConfig, Scene};
use crate::spectrum::Spectrum;

/// Rendered HDR image plus the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Film {
    pub image: Image,
    pub spp: u32,
    pub seed: u64,
}

impl Film {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSample {
    pub index: u32,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounce {
    /// Sampled direction toward the next vertex.
    pub wi: Vec3,
    pub pdf: f64,
}

/// One shaded surface interaction along a path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathVertex {
    /// Origin of the ray that found this hit.
    pub ray_origin: Vec3,
    pub hit: Hit,
    /// Unit direction back toward the ray origin.
    pub wo: Vec3,
    pub light: Option<LightSample>,
    /// Continuation direction; `None` on the last shaded vertex.
    pub bounce: Option<Bounce>,
    pub throughput_before: Spectrum,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathRecord {
    pub vertices: Vec<PathVertex>,
}

/// Path records of a rendered pixel range, `spp` consecutive records per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSet {
    pub width: usize,
    pub height: usize,
    pub spp: u32,
    pub first_pixel: usize,
    pub paths: Vec<PathRecord>,
}

impl RecordSet {
    pub fn pixel_paths(&self, pixel: usize) -> Result<&[PathRecord]> {
        let spp = self.spp as usize;
        let start = pixel
            .checked_sub(self.first_pixel)
            .map(|p| p * spp)
            .filter(|&s| s + spp <= self.paths.len())
            .ok_or(Error::MissingRecords { pixel })?;
        Ok(&self.paths[start..start + spp])
    }
}

/// Interpolated reflectance at barycentric coordinates of a face.
pub fn material_at(mesh: &Mesh, face: u32, b: [f64; 3]) -> MaterialSample {
    let [i0, i1, i2] = mesh.faces[face as usize].map(|i| i as usize);
    MaterialSample {
        rho_d: mesh.diffuse[i0] * b[0] + mesh.diffuse[i1] * b[1] + mesh.diffuse[i2] * b[2],
        rho_s: mesh.specular[i0] * b[0] + mesh.specular[i1] * b[1] + mesh.specular[i2] * b[2],
        alpha: mesh.roughness,
        f0: mesh.f0,
        distribution: mesh.distribution,
    }
}

/// Geometry of a light as seen from a shading point.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LightGeometry {
    /// Direction toward the light, and the inverse-square falloff factor.
    Directed { wi: Vec3, falloff: f64 },
    Ambient,
}

pub(crate) fn light_geometry(kind: &LightKind, x: Vec3) -> LightGeometry {
    match *kind {
        LightKind::Point { position } => {
            let d = position - x;
            let r2 = d.length_squared();
            LightGeometry::Directed {
                wi: d / r2.sqrt(),
                falloff: 1.0 / r2,
            }
        }
        LightKind::Directional { direction } => LightGeometry::Directed {
            wi: -direction,
            falloff: 1.0,
        },
        LightKind::Ambient => LightGeometry::Ambient,
    }
}

/// Unweighted next-event term `fr·cos·falloff` (or `ρd` for ambient) per
/// unit light intensity, before the `(M+1)` selection weight.
pub(crate) fn nee_factor(scene: &Scene, mat: &MaterialSample, v: &PathVertex, ls: LightSample) -> Spectrum {
    if !ls.visible {
        return Spectrum::ZERO;
    }
    let light = &scene.lights[ls.index as usize];
    let n = v.hit.shading_normal;
    match light_geometry(&light.kind, v.hit.point) {
        LightGeometry::Directed { wi, falloff } => {
            let cos_i = n.dot(wi);
            if cos_i <= 0.0 {
                return Spectrum::ZERO;
            }
            let f = eval_cos(mat, cos_i, n.dot(v.wo), wi.dot(v.wo));
            f * (cos_i * falloff)
        }
        LightGeometry::Ambient => mat.rho_d,
    }
}

/// Throughput multiplier `fr·cos/pdf` of a recorded bounce.
pub(crate) fn bounce_factor(mat: &MaterialSample, v: &PathVertex, b: &Bounce) -> Spectrum {
    let n = v.hit.shading_normal;
    let cos_i = n.dot(b.wi);
    if cos_i <= 0.0 || b.pdf <= 0.0 {
        return Spectrum::ZERO;
    }
    eval_cos(mat, cos_i, n.dot(v.wo), b.wi.dot(v.wo)) * (cos_i / b.pdf)
}

/// Radiance estimate of a recorded path under the scene's current
/// parameters.
pub fn path_radiance(scene: &Scene, record: &PathRecord) -> Spectrum {
    let count = scene.lights.len() as f64;
    let mut total = Spectrum::ZERO;
    let mut beta = Spectrum::ONE;
    for v in &record.vertices {
        let mat = material_at(&scene.mesh, v.hit.face, v.hit.barycentrics);
        if let Some(ls) = v.light {
            let light = &scene.lights[ls.index as usize];
            total += beta * (nee_factor(scene, &mat, v, ls) * light.intensity) * count;
        }
        match &v.bounce {
            Some(b) => beta *= bounce_factor(&mat, v, b),
            None => break,
        }
    }
    total
}

fn light_visible(scene: &Scene, bvh: &Bvh, x: Vec3, index: usize) -> bool {
    match scene.lights[index].kind {
        LightKind::Point { position } => !bvh.occluded(&scene.mesh, x, position),
        LightKind::Directional { direction } => {
            !bvh.occluded_direction(&scene.mesh, x, -direction)
        }
        LightKind::Ambient => true,
    }
}

/// Makes every random decision of one path and records it. `first_light`
/// overrides the light choice at the first vertex.
pub fn sample_path<R: Rng>(
    scene: &Scene,
    bvh: &Bvh,
    ray: Ray,
    max_bounces: u32,
    rng: &mut R,
    first_light: Option<usize>,
) -> PathRecord {
    let mut record = PathRecord::default();
    let count = scene.lights.len();
    let mut ray = ray;
    for k in 0..max_bounces {
        let Some(hit) = bvh.intersect(&scene.mesh, &ray) else {
            break;
        };
        let light = if count == 0 {
            None
        } else {
            let index = match (k, first_light) {
                (0, Some(i)) => i,
                _ => ((rng.random::<f64>() * count as f64) as usize).min(count - 1),
            };
            Some(LightSample {
                index: index as u32,
                visible: light_visible(scene, bvh, hit.point, index),
            })
        };
        let bounce = if k + 1 < max_bounces {
            let frame = Frame::from_normal(hit.shading_normal);
            let (wi, pdf) = sample_cosine_hemisphere(&frame, rng.random(), rng.random());
            Some(Bounce { wi, pdf })
        } else {
            None
        };
        record.vertices.push(PathVertex {
            ray_origin: ray.origin,
            hit,
            wo: -ray.direction,
            light,
            bounce,
            throughput_before: Spectrum::ZERO,
        });
        match bounce {
            Some(b) if b.pdf > 0.0 => {
                ray = Ray {
                    origin: hit.point,
                    direction: b.wi,
                    t_min: bvh.shadow_epsilon,
                    t_max: f64::INFINITY,
                };
            }
            _ => break,
        }
    }
    fill_throughput(scene, &mut record);
    record
}

fn fill_throughput(scene: &Scene, record: &mut PathRecord) {
    let mut beta = Spectrum::ONE;
    for v in &mut record.vertices {
        v.throughput_before = beta;
        if let Some(b) = v.bounce {
            let mat = material_at(&scene.mesh, v.hit.face, v.hit.barycentrics);
            beta *= bounce_factor(&mat, v, &b);
        }
    }
}

/// Single-path radiance estimate along `ray`, optionally recording the path.
pub fn trace_radiance<R: Rng>(
    scene: &Scene,
    bvh: &Bvh,
    ray: Ray,
    max_bounces: u32,
    rng: &mut R,
    record: Option<&mut PathRecord>,
) -> Spectrum {
    let path = sample_path(scene, bvh, ray, max_bounces, rng, None);
    let l = path_radiance(scene, &path);
    if let Some(sink) = record {
        *sink = path;
    }
    l
}

/// Random stream of one (pixel, sample) pair; `sample == spp` addresses the
/// pixel-level stream.
pub fn sample_rng(seed: u64, pixel: usize, spp: u32, sample: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pixel as u64 * (spp as u64 + 1) + sample as u64);
    rng
}

/// Records all `spp` paths of one pixel.
pub fn sample_pixel(
    scene: &Scene,
    bvh: &Bvh,
    camera: &Camera,
    config: &RenderConfig,
    pixel: usize,
) -> Vec<PathRecord> {
    let spp = config.spp;
    let (px, py) = (pixel % camera.width, pixel / camera.width);
    let count = scene.lights.len();
    // Light choice at the first vertex is stratified over the pixel's
    // samples behind a random per-pixel offset; each sample's marginal
    // choice stays uniform.
    let offset = if count > 0 {
        let mut prng = sample_rng(config.seed, pixel, spp, spp);
        ((prng.random::<f64>() * count as f64) as usize).min(count - 1)
    } else {
        0
    };
    let strata = (spp as f64).sqrt().floor() as u32;
    let origin = camera.position();
    (0..spp)
        .map(|s| {
            let mut rng = sample_rng(config.seed, pixel, spp, s);
            let (ju, jv): (f64, f64) = (rng.random(), rng.random());
            let (sx, sy) = if s < strata * strata {
                (
                    ((s % strata) as f64 + ju) / strata as f64,
                    ((s / strata) as f64 + jv) / strata as f64,
                )
            } else {
                (ju, jv)
            };
            let dir = camera.ray_direction(px as f64 + sx, py as f64 + sy);
            let first = (count > 0).then(|| (offset + s as usize) % count);
            sample_path(
                scene,
                bvh,
                Ray::new(origin, dir),
                config.max_bounces,
                &mut rng,
                first,
            )
        })
        .collect()
}

/// Pixel value `Δt · mean(L)` of a pixel's recorded paths.
pub fn pixel_value(scene: &Scene, paths: &[PathRecord], exposure: f64) -> Spectrum {
    let mut sum = Spectrum::ZERO;
    for p in paths {
        sum += path_radiance(scene, p);
    }
    sum * (exposure / paths.len() as f64)
}

static WARNED_DARK: AtomicBool = AtomicBool::new(false);

fn prepare(scene: &Scene, camera: &Camera, config: &RenderConfig) -> Result<Camera> {
    config.validate()?;
    if camera.width == 0 || camera.height == 0 {
        return Err(Error::ZeroResolution);
    }
    let cam = camera.downsampled(config.downsample as usize)?;
    if !scene.has_light() && !WARNED_DARK.swap(true, Ordering::Relaxed) {
        log::warn!("scene has no light with positive intensity; the render will be black");
    }
    Ok(cam)
}

/// Renders one view. Deterministic for a fixed (scene, camera, config),
/// independent of the worker count.
pub fn render(scene: &Scene, bvh: &Bvh, camera: &Camera, config: &RenderConfig) -> Result<Film> {
    let cam = prepare(scene, camera, config)?;
    let pixels: Vec<Spectrum> = (0..cam.width * cam.height)
        .into_par_iter()
        .map(|p| {
            let paths = sample_pixel(scene, bvh, &cam, config, p);
            pixel_value(scene, &paths, cam.exposure)
        })
        .collect();
    Ok(Film {
        image: Image {
            width: cam.width,
            height: cam.height,
            pixels,
        },
        spp: config.spp,
        seed: config.seed,
    })
}

/// Renders a contiguous range of pixels of the (downsampled) camera and
/// keeps every path record.
pub fn render_records_range(
    scene: &Scene,
    bvh: &Bvh,
    cam: &Camera,
    config: &RenderConfig,
    pixels: std::ops::Range<usize>,
) -> (Vec<Spectrum>, RecordSet) {
    let first = pixels.start;
    let per_pixel: Vec<(Spectrum, Vec<PathRecord>)> = pixels
        .into_par_iter()
        .map(|p| {
            let paths = sample_pixel(scene, bvh, cam, config, p);
            (pixel_value(scene, &paths, cam.exposure), paths)
        })
        .collect();
    let mut values = Vec::with_capacity(per_pixel.len());
    let mut paths = Vec::with_capacity(per_pixel.len() * config.spp as usize);
    for (v, p) in per_pixel {
        values.push(v);
        paths.extend(p);
    }
    (
        values,
        RecordSet {
            width: cam.width,
            height: cam.height,
            spp: config.spp,
            first_pixel: first,
            paths,
        },
    )
}

/// Like [`render`], also returning one path record per primary sample.
pub fn render_with_records(
    scene: &Scene,
    bvh: &Bvh,
    camera: &Camera,
    config: &RenderConfig,
) -> Result<(Film, RecordSet)> {
    let cam = prepare(scene, camera, config)?;
    let (pixels, records) = render_records_range(scene, bvh, &cam, config, 0..cam.width * cam.height);
    Ok((
        Film {
            image: Image {
                width: cam.width,
                height: cam.height,
                pixels,
            },
            spp: config.spp,
            seed: config.seed,
        },
        records,
    ))
}

/// Re-evaluates a film from its records under the scene's current
/// parameters.
pub fn replay_film(scene: &Scene, camera: &Camera, records: &RecordSet) -> Result<Film> {
    let n = records.width * records.height;
    let pixels = (0..n)
        .map(|p| Ok(pixel_value(scene, records.pixel_paths(p)?, camera.exposure)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Film {
        image: Image {
            width: records.width,
            height: records.height,
            pixels,
        },
        spp: records.spp,
        seed: 0,
    })
}

/// Foreground mask of pixels whose center ray hits the mesh.
pub fn coverage_mask(scene: &Scene, bvh: &Bvh, camera: &Camera) -> Mask {
    let origin = camera.position();
    let data = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % camera.width, p / camera.width);
            let dir = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
            bvh.intersect(&scene.mesh, &Ray::new(origin, dir)).is_some()
        })
        .collect();
    Mask {
        width: camera.width,
        height: camera.height,
        data,
    }
}
