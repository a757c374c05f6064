//! Ground-truth scenes with known parameters, rendered into posed views with
//! exact coverage masks, plus perturbed starting points for recovery runs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accel::Bvh;
use crate::error::{Error, Result};
use crate::math::{Rigid, Vec3};
use crate::render::{coverage_mask, render};
use crate::scene::{Camera, LightSource, Mesh, RenderConfig, Scene, ViewObservation};
use crate::spectrum::Spectrum;

/// Triangle soup under construction: positions and faces.
#[derive(Debug, Clone, Default)]
pub struct Shape {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl Shape {
    pub fn append(&mut self, o: &Shape) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&o.vertices);
        self.faces.extend(o.faces.iter().map(|f| f.map(|i| i + base)));
    }
}

/// Subdivided icosahedron projected onto a sphere, outward winding.
pub fn icosphere(subdivisions: u32, center: Vec3, radius: f64) -> Shape {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                verts.len() as u32 - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Shape {
        vertices: verts.into_iter().map(|v| center + v * radius).collect(),
        faces,
    }
}

/// Square grid in the plane `z = height`, facing +z, `n × n` cells.
pub fn plane_grid(n: usize, half_size: f64, height: f64) -> Shape {
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            let u = -half_size + 2.0 * half_size * i as f64 / n as f64;
            let v = -half_size + 2.0 * half_size * j as f64 / n as f64;
            vertices.push(Vec3::new(u, v, height));
        }
    }
    let row = n as u32 + 1;
    let mut faces = Vec::with_capacity(2 * n * n);
    for j in 0..n as u32 {
        for i in 0..n as u32 {
            let a = j * row + i;
            faces.push([a, a + 1, a + row + 1]);
            faces.push([a, a + row + 1, a + row]);
        }
    }
    Shape { vertices, faces }
}

/// Axis-aligned box with separate vertices per side so each side shades
/// flat; every side is split into `n × n` cells.
pub fn box_shape(center: Vec3, half: Vec3, n: usize) -> Shape {
    let mut out = Shape::default();
    // (normal axis, sign) for the six sides.
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut side = Shape::default();
            for j in 0..=n {
                for i in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = sign;
                    p[ua] = -1.0 + 2.0 * i as f64 / n as f64;
                    p[va] = -1.0 + 2.0 * j as f64 / n as f64;
                    side.vertices.push(center + Vec3::new(p[0] * half.x, p[1] * half.y, p[2] * half.z));
                }
            }
            let row = n as u32 + 1;
            for j in 0..n as u32 {
                for i in 0..n as u32 {
                    let a = j * row + i;
                    let (b, c, d) = (a + 1, a + row + 1, a + row);
                    // u × v points along +axis; flip for the negative side.
                    if sign > 0.0 {
                        side.faces.push([a, b, c]);
                        side.faces.push([a, c, d]);
                    } else {
                        side.faces.push([a, c, b]);
                        side.faces.push([a, d, c]);
                    }
                }
            }
            out.append(&side);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    SpherePlane,
    TwoBoxes,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::SpherePlane => "sphere-plane",
            Preset::TwoBoxes => "two-boxes",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere-plane" => Ok(Preset::SpherePlane),
            "two-boxes" => Ok(Preset::TwoBoxes),
            _ => Err(Error::invalid("preset", format!("unknown preset `{s}`"))),
        }
    }
}

/// Smooth ground-truth diffuse albedo field with components in [0.2, 0.4].
fn albedo_field(p: Vec3) -> Spectrum {
    Spectrum::new(
        0.3 + 0.1 * (1.7 * p.x + 0.3).sin(),
        0.3 + 0.1 * (1.3 * p.y - 0.5).cos(),
        0.3 + 0.1 * (1.1 * (p.x + p.z)).sin(),
    )
}

fn ground_truth_mesh(preset: Preset) -> Result<Mesh> {
    let (shape, specular) = match preset {
        Preset::SpherePlane => {
            let mut s = plane_grid(8, 2.5, 0.0);
            let plane_verts = s.vertices.len();
            s.append(&icosphere(3, Vec3::new(0.0, 0.0, 1.0), 1.0));
            let spec = (0..s.vertices.len())
                .map(|i| if i < plane_verts { 0.02 } else { 0.15 })
                .collect::<Vec<_>>();
            (s, spec)
        }
        Preset::TwoBoxes => {
            let mut s = plane_grid(8, 2.5, 0.0);
            let plane_verts = s.vertices.len();
            s.append(&box_shape(Vec3::new(-0.8, -0.4, 0.5), Vec3::new(0.5, 0.5, 0.5), 4));
            s.append(&box_shape(Vec3::new(0.9, 0.5, 0.7), Vec3::new(0.4, 0.6, 0.7), 4));
            let spec = (0..s.vertices.len())
                .map(|i| if i < plane_verts { 0.02 } else { 0.1 })
                .collect::<Vec<_>>();
            (s, spec)
        }
    };
    let diffuse = shape.vertices.iter().map(|&p| albedo_field(p)).collect();
    let specular = specular.into_iter().map(Spectrum::splat).collect();
    Mesh::new(shape.vertices, shape.faces, diffuse, specular)
}

/// Ambient fill plus three point lights around and above the scene.
pub fn ground_truth_lights() -> Vec<LightSource> {
    vec![
        LightSource::ambient(Spectrum::new(0.12, 0.12, 0.14)),
        LightSource::point(Vec3::new(3.0, -2.0, 4.0), Spectrum::new(26.0, 24.0, 22.0)),
        LightSource::point(Vec3::new(-3.5, -1.0, 3.0), Spectrum::new(10.0, 12.0, 16.0)),
        LightSource::point(Vec3::new(0.5, 3.5, 3.5), Spectrum::new(14.0, 12.0, 10.0)),
    ]
}

/// Cameras on a ring around `target`, alternating between two elevations.
pub fn orbit_cameras(count: usize, width: usize, height: usize, target: Vec3, distance: f64) -> Vec<Camera> {
    let focal = 1.1 * width as f64;
    (0..count)
        .map(|k| {
            let azimuth = std::f64::consts::TAU * k as f64 / count as f64 + 0.3;
            let elevation: f64 = if k % 2 == 0 { 0.55 } else { 0.8 };
            let eye = target
                + Vec3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                ) * distance;
            Camera {
                fx: focal,
                fy: focal,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
                width,
                height,
                world_to_camera: Rigid::look_at(eye, target, Vec3::Z),
                exposure: 1.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOptions {
    pub preset: Preset,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Settings of the ground-truth renders.
    pub render: RenderConfig,
    /// Seed of the starting-point perturbation.
    pub perturb_seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            preset: Preset::SpherePlane,
            views: 13,
            width: 64,
            height: 64,
            render: RenderConfig {
                spp: 64,
                max_bounces: 3,
                seed: 1,
                downsample: 1,
            },
            perturb_seed: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub truth: Scene,
    pub start: Scene,
    pub observations: Vec<ViewObservation>,
}

/// Starting point for recovery: uniform albedo noise of ±0.3, lights at
/// half intensity, vertices jittered by 1% of the bounding radius.
pub fn perturb(truth: &Scene, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = truth.clone();
    let (_, radius) = s.mesh.bounding_sphere();
    for a in s.mesh.diffuse.iter_mut().chain(s.mesh.specular.iter_mut()) {
        for c in 0..3 {
            a[c] += rng.random_range(-0.3..0.3);
        }
    }
    s.mesh.project_albedos();
    for l in &mut s.lights {
        l.intensity = l.intensity * 0.5;
    }
    for v in &mut s.mesh.vertices {
        let j = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        *v += j * (0.01 * radius / 3f64.sqrt());
    }
    s.mesh.refresh_normals();
    s
}

pub fn make_synthetic(opts: &SyntheticOptions) -> Result<SyntheticScene> {
    if opts.views < 2 {
        return Err(Error::invalid("synthetic views", "at least two views are required"));
    }
    let mesh = ground_truth_mesh(opts.preset)?;
    let truth = Scene::new(mesh, ground_truth_lights())?;
    let bvh = Bvh::build(&truth.mesh)?;
    let cameras = orbit_cameras(opts.views, opts.width, opts.height, Vec3::new(0.0, 0.0, 0.6), 6.0);
    let observations = cameras
        .into_iter()
        .map(|cam| {
            let film = render(&truth, &bvh, &cam, &opts.render)?;
            let mask = coverage_mask(&truth, &bvh, &cam);
            ViewObservation::new(cam, film.image, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let start = perturb(&truth, opts.perturb_seed);
    Ok(SyntheticScene {
        truth,
        start,
        observations,
    })
}
