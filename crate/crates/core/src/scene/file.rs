//! Scene description files.
//!
//! A scene is a TOML document with four sections:
//!
//! ```toml
//! [mesh]
//! path = "mesh.ply"
//! roughness = 0.1
//! distribution = "ggx"   # or "beckmann"
//! f0 = 0.04
//!
//! [[lights]]
//! kind = "point"         # "point" | "directional" | "ambient"
//! position = [0.0, 3.0, 0.0]
//! intensity = [0.5, 0.5, 0.5]
//!
//! [[views]]
//! image = "views/000.pfm"
//! mask = "views/000_mask.png"
//! fx = 60.0
//! fy = 60.0
//! cx = 32.0
//! cy = 32.0
//! width = 64
//! height = 64
//! exposure = 1.0
//! world_to_camera = [1.0, 0.0, 0.0, 0.0,  0.0, 1.0, 0.0, 0.0,  0.0, 0.0, 1.0, 4.0]
//!
//! [render]
//! spp = 16
//! max_bounces = 3
//! seed = 0
//! downsample = 1
//! ```
//!
//! Relative paths resolve against the scene file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_image, read_mask, write_mask, write_pfm};
use super::ply::{read_ply, write_ply, PlyEncoding};
use super::{
    Camera, LightKind, LightSource, Mesh, ObservationSource, RenderConfig, Scene,
    ViewObservation, DEFAULT_F0, DEFAULT_ROUGHNESS,
};
use crate::brdf::Distribution;
use crate::error::{Error, Result};
use crate::math::{Rigid, Vec3};
use crate::spectrum::Spectrum;

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    mesh: MeshSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lights: Vec<LightEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    views: Vec<ViewEntry>,
    #[serde(default)]
    render: RenderSection,
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshSection {
    path: String,
    #[serde(default = "default_roughness")]
    roughness: f64,
    #[serde(default)]
    distribution: Distribution,
    #[serde(default = "default_f0")]
    f0: f64,
}

fn default_roughness() -> f64 {
    DEFAULT_ROUGHNESS
}

fn default_f0() -> f64 {
    DEFAULT_F0
}

fn default_exposure() -> f64 {
    1.0
}

/// One light in a scene or light-spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LightEntry {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<[f64; 3]>,
    pub intensity: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewEntry {
    image: String,
    mask: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_exposure")]
    exposure: f64,
    world_to_camera: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RenderSection {
    spp: u32,
    max_bounces: u32,
    /// Stored as the two's-complement `i64` of the `u64` seed.
    seed: i64,
    downsample: u32,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderConfig::default().into()
    }
}

impl From<RenderConfig> for RenderSection {
    fn from(c: RenderConfig) -> Self {
        RenderSection {
            spp: c.spp,
            max_bounces: c.max_bounces,
            seed: c.seed as i64,
            downsample: c.downsample,
        }
    }
}

impl From<&RenderSection> for RenderConfig {
    fn from(r: &RenderSection) -> Self {
        RenderConfig {
            spp: r.spp,
            max_bounces: r.max_bounces,
            seed: r.seed as u64,
            downsample: r.downsample,
        }
    }
}

impl LightEntry {
    pub fn from_light(l: &LightSource) -> Self {
        let (kind, position, direction) = match l.kind {
            LightKind::Point { position } => ("point", Some(position.to_array()), None),
            LightKind::Directional { direction } => {
                ("directional", None, Some(direction.to_array()))
            }
            LightKind::Ambient => ("ambient", None, None),
        };
        LightEntry {
            kind: kind.into(),
            position,
            direction,
            intensity: l.intensity.to_array(),
        }
    }

    /// Converts to a validated light; `path`/`field` locate errors.
    pub fn to_light(&self, path: &Path, field: &str) -> Result<LightSource> {
        let intensity = Spectrum::from_array(self.intensity);
        let light = match self.kind.as_str() {
            "point" => {
                let p = self.position.ok_or_else(|| {
                    Error::format(path, format!("{field}.position"), "point light needs a position")
                })?;
                LightSource::point(Vec3::from_array(p), intensity)
            }
            "directional" => {
                let d = self.direction.ok_or_else(|| {
                    Error::format(
                        path,
                        format!("{field}.direction"),
                        "directional light needs a direction",
                    )
                })?;
                let d = Vec3::from_array(d);
                if d.length() == 0.0 || !d.is_finite() {
                    return Err(Error::format(path, format!("{field}.direction"), "zero direction"));
                }
                LightSource::directional(d, intensity)
            }
            "ambient" => LightSource::ambient(intensity),
            other => {
                return Err(Error::format(
                    path,
                    format!("{field}.kind"),
                    format!("unknown light kind `{other}`"),
                ))
            }
        };
        light
            .validate()
            .map_err(|e| Error::format(path, field, e.to_string()))?;
        Ok(light)
    }
}

/// Everything a scene file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScene {
    pub scene: Scene,
    pub observations: Vec<ViewObservation>,
    pub config: RenderConfig,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile =
        toml::from_str(&text).map_err(|e| Error::format(path, "toml", e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mesh_path = resolve(base, &file.mesh.path);
    if !mesh_path.exists() {
        return Err(Error::format(
            path,
            "mesh.path",
            format!("mesh file {} not found", mesh_path.display()),
        ));
    }
    let ply = read_ply(&mesh_path)?;
    let n = ply.vertices.len();
    let diffuse = ply.diffuse.unwrap_or_else(|| vec![Spectrum::splat(0.5); n]);
    let specular = ply.specular.unwrap_or_else(|| vec![Spectrum::ZERO; n]);
    let mut mesh = Mesh {
        vertices: ply.vertices,
        faces: ply.faces,
        diffuse,
        specular,
        roughness: file.mesh.roughness,
        distribution: file.mesh.distribution,
        f0: file.mesh.f0,
        normals: Vec::new(),
    };
    mesh.validate()
        .map_err(|e| Error::format(&mesh_path, "mesh", e.to_string()))?;
    mesh.refresh_normals();

    let lights = file
        .lights
        .iter()
        .enumerate()
        .map(|(i, l)| l.to_light(path, &format!("lights[{i}]")))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::with_capacity(file.views.len());
    for (i, v) in file.views.iter().enumerate() {
        let field = format!("views[{i}]");
        let m: [f64; 12] = v.world_to_camera.as_slice().try_into().map_err(|_| {
            Error::format(
                path,
                format!("{field}.world_to_camera"),
                format!("expected 12 floats, got {}", v.world_to_camera.len()),
            )
        })?;
        let camera = Camera {
            fx: v.fx,
            fy: v.fy,
            cx: v.cx,
            cy: v.cy,
            width: v.width,
            height: v.height,
            world_to_camera: Rigid::from_row_major(&m),
            exposure: v.exposure,
        };
        camera
            .validate()
            .map_err(|e| Error::format(path, &field, e.to_string()))?;
        let image_path = resolve(base, &v.image);
        let mask_path = resolve(base, &v.mask);
        let image = read_image(&image_path)?;
        let mask = read_mask(&mask_path)?;
        for (what, w, h, p) in [
            ("image", image.width, image.height, &image_path),
            ("mask", mask.width, mask.height, &mask_path),
        ] {
            if w != camera.width || h != camera.height {
                return Err(Error::SizeMismatch {
                    path: p.clone(),
                    field: format!("{field}.{what}"),
                    got_w: w,
                    got_h: h,
                    want_w: camera.width,
                    want_h: camera.height,
                });
            }
        }
        if !image.is_valid() {
            return Err(Error::format(
                &image_path,
                format!("{field}.image"),
                "pixel values must be finite and nonnegative",
            ));
        }
        observations.push(ViewObservation {
            camera,
            image,
            mask,
            source: Some(ObservationSource {
                image: image_path,
                mask: mask_path,
            }),
        });
    }

    let config = RenderConfig::from(&file.render);
    config
        .validate()
        .map_err(|e| Error::format(path, "render", e.to_string()))?;

    Ok(LoadedScene {
        scene: Scene { mesh, lights },
        observations,
        config,
    })
}

/// Writes `path` plus a sibling binary PLY. Observations that were not
/// loaded from disk get their image (PFM) and mask (PNG) written into a
/// sibling `<stem>_views/` directory; loaded ones are referenced in place.
pub fn save_scene(
    scene: &Scene,
    observations: &[ViewObservation],
    config: &RenderConfig,
    path: &Path,
) -> Result<()> {
    scene.validate()?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    if !base.as_os_str().is_empty() {
        fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    let ply_name = format!("{stem}.ply");
    let m = &scene.mesh;
    write_ply(
        &base.join(&ply_name),
        &m.vertices,
        &m.faces,
        &m.diffuse,
        &m.specular,
        PlyEncoding::BinaryLittleEndian,
    )?;

    let views_dir_name = format!("{stem}_views");
    let mut views = Vec::with_capacity(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        let (image, mask) = match &obs.source {
            Some(src) if src.image.exists() && src.mask.exists() => {
                (reference(&base, &src.image), reference(&base, &src.mask))
            }
            _ => {
                let dir = base.join(&views_dir_name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let img_name = format!("view_{i:03}.pfm");
                let mask_name = format!("view_{i:03}_mask.png");
                write_pfm(&dir.join(&img_name), &obs.image)?;
                write_mask(&dir.join(&mask_name), &obs.mask)?;
                (
                    format!("{views_dir_name}/{img_name}"),
                    format!("{views_dir_name}/{mask_name}"),
                )
            }
        };
        let c = &obs.camera;
        views.push(ViewEntry {
            image,
            mask,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            exposure: c.exposure,
            world_to_camera: c.world_to_camera.to_row_major().to_vec(),
        });
    }

    let file = SceneFile {
        mesh: MeshSection {
            path: ply_name,
            roughness: m.roughness,
            distribution: m.distribution,
            f0: m.f0,
        },
        lights: scene.lights.iter().map(LightEntry::from_light).collect(),
        views,
        render: (*config).into(),
    };
    let text = toml::to_string(&file)
        .map_err(|e| Error::format(path, "toml", e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn reference(base: &Path, target: &Path) -> String {
    let abs_base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
    let abs_target = fs::canonicalize(target).unwrap_or_else(|_| target.to_path_buf());
    match abs_target.strip_prefix(&abs_base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => abs_target.to_string_lossy().into_owned(),
    }
}
