//! Scene data model: mesh with per-vertex reflectance, cameras, light
//! sources, observations and render configuration, plus their on-disk
//! formats.

pub mod colmap;
pub mod file;
pub mod image;
pub mod ply;

pub use file::{load_scene, save_scene, LoadedScene};
pub use image::{Image, Mask};

use std::path::PathBuf;

use crate::brdf::Distribution;
use crate::error::{Error, Result};
use crate::math::{Rigid, Vec3};
use crate::spectrum::Spectrum;

/// Triangle mesh carrying the optimizable geometry and reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub diffuse: Vec<Spectrum>,
    pub specular: Vec<Spectrum>,
    /// Shared microfacet roughness α in (0, 1].
    pub roughness: f64,
    pub distribution: Distribution,
    /// Fresnel reflectance at normal incidence.
    pub f0: f64,
    /// Area-weighted vertex normals. Call [`Mesh::refresh_normals`] after
    /// moving vertices.
    pub normals: Vec<Vec3>,
}

pub const DEFAULT_ROUGHNESS: f64 = 0.1;
pub const DEFAULT_F0: f64 = 0.04;

impl Mesh {
    /// Builds and validates a mesh with default material settings.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        diffuse: Vec<Spectrum>,
        specular: Vec<Spectrum>,
    ) -> Result<Mesh> {
        let mut mesh = Mesh {
            normals: Vec::new(),
            vertices,
            faces,
            diffuse,
            specular,
            roughness: DEFAULT_ROUGHNESS,
            distribution: Distribution::Ggx,
            f0: DEFAULT_F0,
        };
        mesh.validate()?;
        mesh.refresh_normals();
        Ok(mesh)
    }

    /// Uniform-albedo convenience constructor.
    pub fn with_uniform_albedo(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        diffuse: Spectrum,
        specular: Spectrum,
    ) -> Result<Mesh> {
        let n = vertices.len();
        Mesh::new(vertices, faces, vec![diffuse; n], vec![specular; n])
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.diffuse.len() != n || self.specular.len() != n {
            return Err(Error::invalid(
                "mesh",
                format!(
                    "{} vertices but {} diffuse / {} specular albedos",
                    n,
                    self.diffuse.len(),
                    self.specular.len()
                ),
            ));
        }
        if let Some(i) = self.vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("mesh", format!("vertex {i} is not finite")));
        }
        if !(self.roughness > 0.0 && self.roughness <= 1.0) {
            return Err(Error::invalid(
                "mesh",
                format!("roughness {} outside (0, 1]", self.roughness),
            ));
        }
        if !(0.0..=1.0).contains(&self.f0) {
            return Err(Error::invalid("mesh", format!("f0 {} outside [0, 1]", self.f0)));
        }
        let scale = self.bounding_sphere().1.max(f64::MIN_POSITIVE);
        for (fi, f) in self.faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i as usize >= n) {
                return Err(Error::invalid(
                    "mesh",
                    format!("face {fi} references vertex {bad} of {n}"),
                ));
            }
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let area2 = (b - a).cross(c - a).length();
            if area2 <= 1e-14 * scale * scale {
                return Err(Error::invalid("mesh", format!("face {fi} is degenerate")));
            }
        }
        for (i, (d, s)) in self.diffuse.iter().zip(&self.specular).enumerate() {
            let ok = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
            if !(d.to_array().into_iter().all(ok) && s.to_array().into_iter().all(ok)) {
                return Err(Error::invalid(
                    "mesh",
                    format!("albedo of vertex {i} outside [0, 1]"),
                ));
            }
            if (*d + *s).max_component() > 1.0 + 1e-12 {
                return Err(Error::invalid(
                    "mesh",
                    format!("diffuse + specular albedo of vertex {i} exceeds 1"),
                ));
            }
        }
        Ok(())
    }

    pub fn refresh_normals(&mut self) {
        self.normals = compute_vertex_normals(self).normals;
    }

    /// Clamp albedos into [0, 1] and rescale each (ρd, ρs) pair whose sum
    /// exceeds one in any channel.
    pub fn project_albedos(&mut self) {
        for (d, s) in self.diffuse.iter_mut().zip(self.specular.iter_mut()) {
            *d = d.map(|v| v.clamp(0.0, 1.0));
            *s = s.map(|v| v.clamp(0.0, 1.0));
            for c in 0..3 {
                let sum = d[c] + s[c];
                if sum > 1.0 {
                    d[c] /= sum;
                    s[c] /= sum;
                }
            }
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.vertices.iter().fold(
            (Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    /// Center and radius of the sphere around the bounding-box center that
    /// contains every vertex.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        if self.vertices.is_empty() {
            return (Vec3::ZERO, 0.0);
        }
        let (lo, hi) = self.bounds();
        let center = (lo + hi) * 0.5;
        let radius = self
            .vertices
            .iter()
            .map(|&v| (v - center).length())
            .fold(0.0, f64::max);
        (center, radius)
    }

    /// One-ring neighbor lists, sorted and deduplicated.
    pub fn vertex_neighbors(&self) -> Vec<Vec<u32>> {
        let mut nbrs = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k];
                nbrs[a as usize].push(f[(k + 1) % 3]);
                nbrs[a as usize].push(f[(k + 2) % 3]);
            }
        }
        for n in &mut nbrs {
            n.sort_unstable();
            n.dedup();
        }
        nbrs
    }
}

/// Result of [`compute_vertex_normals`].
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub normals: Vec<Vec3>,
    /// Vertices with no incident face; their normal is zero.
    pub isolated: Vec<usize>,
}

/// Area-weighted vertex normals. Isolated vertices get a zero normal and are
/// reported with a warning.
pub fn compute_vertex_normals(mesh: &Mesh) -> VertexNormals {
    let mut acc = vec![Vec3::ZERO; mesh.vertices.len()];
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        // Cross product length is twice the area, which is the weight.
        let n = (b - a).cross(c - a);
        for &i in f {
            acc[i as usize] += n;
        }
    }
    let mut isolated = Vec::new();
    let normals = acc
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            if n.length_squared() == 0.0 {
                isolated.push(i);
            }
            n.normalize()
        })
        .collect();
    if !isolated.is_empty() {
        log::warn!(
            "{} vertices have no incident face and are excluded from shading",
            isolated.len()
        );
    }
    VertexNormals { normals, isolated }
}

/// Pinhole camera with a world-to-camera rigid transform. Image axes are
/// +x right, +y down, and the camera looks along +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Rigid,
    /// Exposure time Δt scaling the recorded radiance.
    pub exposure: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroResolution);
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera", "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::invalid(
                "camera",
                "principal point must lie inside the image",
            ));
        }
        if !self.world_to_camera.is_rigid(1e-6) {
            return Err(Error::invalid(
                "camera",
                "worldToCamera rotation is not orthonormal with determinant +1",
            ));
        }
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return Err(Error::invalid("camera", "exposure must be positive"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    /// Unit world-space direction through continuous pixel coordinates.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vec3 {
        let d = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalize();
        (self.world_to_camera.rotation.transpose() * d).normalize()
    }

    /// Intrinsics rescaled for rendering at 1/`factor` resolution.
    pub fn downsampled(&self, factor: usize) -> Result<Camera> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::invalid(
                "render config",
                format!(
                    "downsample {factor} does not divide {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let f = factor as f64;
        Ok(Camera {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LightKind {
    /// Isotropic point source with inverse-square falloff.
    Point { position: Vec3 },
    /// Parallel light traveling along `direction`.
    Directional { direction: Vec3 },
    /// Constant illumination from every direction, shaded in closed form.
    Ambient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSource {
    pub kind: LightKind,
    pub intensity: Spectrum,
}

impl LightSource {
    pub fn point(position: Vec3, intensity: Spectrum) -> Self {
        LightSource {
            kind: LightKind::Point { position },
            intensity,
        }
    }

    pub fn directional(direction: Vec3, intensity: Spectrum) -> Self {
        LightSource {
            kind: LightKind::Directional {
                direction: direction.normalize(),
            },
            intensity,
        }
    }

    pub fn ambient(intensity: Spectrum) -> Self {
        LightSource {
            kind: LightKind::Ambient,
            intensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.intensity.is_valid() {
            return Err(Error::invalid(
                "light",
                "intensity must be finite and nonnegative",
            ));
        }
        match self.kind {
            LightKind::Point { position } if !position.is_finite() => {
                Err(Error::invalid("light", "position is not finite"))
            }
            LightKind::Directional { direction } if (direction.length() - 1.0).abs() > 1e-6 => {
                Err(Error::invalid("light", "direction is not unit length"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub mesh: Mesh,
    pub lights: Vec<LightSource>,
}

/// Number of point sources in the default environment approximation.
pub const DEFAULT_LIGHT_COUNT: usize = 32;
/// Initial radiance of every default source.
pub const DEFAULT_LIGHT_INTENSITY: f64 = 0.5;

impl Scene {
    pub fn new(mesh: Mesh, lights: Vec<LightSource>) -> Result<Scene> {
        let scene = Scene { mesh, lights };
        scene.validate()?;
        Ok(scene)
    }

    /// Scene lit by the default environment: one ambient source plus `count`
    /// point sources on a Fibonacci lattice at three times the mesh
    /// bounding-sphere radius, all at [`DEFAULT_LIGHT_INTENSITY`].
    pub fn with_default_lights(mesh: Mesh, count: usize) -> Scene {
        let lights = default_lights(&mesh, count);
        Scene { mesh, lights }
    }

    pub fn validate(&self) -> Result<()> {
        self.mesh.validate()?;
        for l in &self.lights {
            l.validate()?;
        }
        Ok(())
    }

    pub fn has_light(&self) -> bool {
        self.lights.iter().any(|l| l.intensity.sum() > 0.0)
    }
}

pub fn default_lights(mesh: &Mesh, count: usize) -> Vec<LightSource> {
    let (center, radius) = mesh.bounding_sphere();
    let r = 3.0 * radius.max(f64::MIN_POSITIVE);
    let intensity = Spectrum::splat(DEFAULT_LIGHT_INTENSITY);
    let mut lights = vec![LightSource::ambient(intensity)];
    lights.extend(
        fibonacci_sphere(count)
            .into_iter()
            .map(|d| LightSource::point(center + d * r, intensity)),
    );
    lights
}

/// `n` near-uniform unit directions on the sphere.
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Where an observation's pixels came from on disk, if anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSource {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// One captured view: camera, HDR image and foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
    pub source: Option<ObservationSource>,
}

impl ViewObservation {
    pub fn new(camera: Camera, image: Image, mask: Mask) -> Result<Self> {
        let obs = ViewObservation {
            camera,
            image,
            mask,
            source: None,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.camera.width, self.camera.height);
        if self.image.width != w || self.image.height != h {
            return Err(Error::SizeMismatch {
                path: PathBuf::new(),
                field: "image".into(),
                got_w: self.image.width,
                got_h: self.image.height,
                want_w: w,
                want_h: h,
            });
        }
        if self.mask.width != w || self.mask.height != h {
            return Err(Error::SizeMismatch {
                path: PathBuf::new(),
                field: "mask".into(),
                got_w: self.mask.width,
                got_h: self.mask.height,
                want_w: w,
                want_h: h,
            });
        }
        if !self.image.is_valid() {
            return Err(Error::invalid(
                "observation",
                "image values must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    /// The observation at 1/`factor` resolution: box-filtered image and
    /// majority-vote mask.
    pub fn downsampled(&self, factor: usize) -> Result<ViewObservation> {
        Ok(ViewObservation {
            camera: self.camera.downsampled(factor)?,
            image: self.image.downsample(factor),
            mask: self.mask.downsample(factor),
            source: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderConfig {
    pub spp: u32,
    pub max_bounces: u32,
    pub seed: u64,
    pub downsample: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            spp: 16,
            max_bounces: 3,
            seed: 0,
            downsample: 1,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spp == 0 {
            return Err(Error::invalid("render config", "spp must be at least 1"));
        }
        if self.downsample == 0 {
            return Err(Error::invalid(
                "render config",
                "downsample must be a positive integer",
            ));
        }
        Ok(())
    }
}
