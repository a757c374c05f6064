//! Import of COLMAP text-format reconstructions (`cameras.txt`,
//! `images.txt`). COLMAP stores world-to-camera poses as a unit quaternion
//! (qw, qx, qy, qz) and a translation, which map directly onto
//! [`Camera::world_to_camera`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::image::{read_image, read_mask};
use super::{Camera, ObservationSource, ViewObservation};
use crate::error::{Error, Result};
use crate::math::{Mat3, Rigid, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// One registered image from `images.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredImage {
    pub name: String,
    pub camera_id: u32,
    pub world_to_camera: Rigid,
}

pub fn parse_cameras(path: &Path, text: &str) -> Result<HashMap<u32, Intrinsics>> {
    let mut cams = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = format!("line {}", ln + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(Error::format(path, field, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS"));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(path, &field, format!("bad number `{s}`")))
        };
        let id: u32 = tok[0]
            .parse()
            .map_err(|_| Error::format(path, &field, "bad camera id"))?;
        let width = num(tok[2])? as usize;
        let height = num(tok[3])? as usize;
        let params = tok[4..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let (fx, fy, cx, cy) = match (tok[1], params.as_slice()) {
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE" | "PINHOLE", _) => {
                return Err(Error::format(path, field, "wrong parameter count for model"))
            }
            (model, _) => return Err(Error::UnsupportedCameraModel(model.to_string())),
        };
        cams.insert(
            id,
            Intrinsics {
                width,
                height,
                fx,
                fy,
                cx,
                cy,
            },
        );
    }
    Ok(cams)
}

pub fn parse_images(path: &Path, text: &str) -> Result<Vec<RegisteredImage>> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim_start().starts_with('#'));
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = format!("line {}", ln + 1);
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(Error::format(
                path,
                field,
                "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let q = tok[1..8]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::format(path, &field, format!("bad number `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let camera_id: u32 = tok[8]
            .parse()
            .map_err(|_| Error::format(path, &field, "bad camera id"))?;
        out.push(RegisteredImage {
            name: tok[9..].join(" "),
            camera_id,
            world_to_camera: Rigid::new(
                Mat3::from_quaternion(q[0], q[1], q[2], q[3]),
                Vec3::new(q[4], q[5], q[6]),
            ),
        });
        // Each image header is followed by its 2D point list.
        lines.next();
    }
    Ok(out)
}

/// One observation per registered image. Masks are looked up in `mask_dir`
/// under the image name, the name with `.png` appended, or the name's stem
/// with `.png`.
pub fn import_colmap_text(
    cameras_file: &Path,
    images_file: &Path,
    image_dir: &Path,
    mask_dir: &Path,
) -> Result<Vec<ViewObservation>> {
    let cams_text = fs::read_to_string(cameras_file).map_err(|e| Error::io(cameras_file, e))?;
    let imgs_text = fs::read_to_string(images_file).map_err(|e| Error::io(images_file, e))?;
    let cams = parse_cameras(cameras_file, &cams_text)?;
    let images = parse_images(images_file, &imgs_text)?;
    let mut views = Vec::with_capacity(images.len());
    for img in images {
        let intr = cams.get(&img.camera_id).ok_or_else(|| Error::UnregisteredCamera {
            image: img.name.clone(),
            camera_id: img.camera_id,
        })?;
        let camera = Camera {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            world_to_camera: img.world_to_camera,
            exposure: 1.0,
        };
        let image_path = image_dir.join(&img.name);
        let mask_path = find_mask(mask_dir, &img.name).ok_or_else(|| {
            Error::format(mask_dir, &img.name, "no mask found for image")
        })?;
        let image = read_image(&image_path)?;
        let mask = read_mask(&mask_path)?;
        let mut obs = ViewObservation::new(camera, image, mask).map_err(|e| match e {
            Error::SizeMismatch {
                field,
                got_w,
                got_h,
                want_w,
                want_h,
                ..
            } => Error::SizeMismatch {
                path: if field == "mask" { mask_path.clone() } else { image_path.clone() },
                field,
                got_w,
                got_h,
                want_w,
                want_h,
            },
            other => other,
        })?;
        obs.source = Some(ObservationSource {
            image: image_path,
            mask: mask_path,
        });
        views.push(obs);
    }
    Ok(views)
}

fn find_mask(dir: &Path, name: &str) -> Option<PathBuf> {
    let stem = Path::new(name).file_stem()?.to_string_lossy().into_owned();
    [
        dir.join(name),
        dir.join(format!("{name}.png")),
        dir.join(format!("{stem}.png")),
    ]
    .into_iter()
    .find(|p| p.is_file())
}
