//! PLY mesh I/O with per-vertex reflectance properties `dr dg db` (diffuse)
//! and `sr sg sb` (specular). Reads ASCII and binary little/big-endian; writes
//! ASCII or binary little-endian with `double` attributes so saved values
//! reload bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::spectrum::{srgb_to_linear, Spectrum};

/// Raw mesh attributes as stored in a PLY file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub diffuse: Option<Vec<Spectrum>>,
    pub specular: Option<Vec<Spectrum>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<ScalarType> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, ScalarType),
    List(String, ScalarType, ScalarType),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Reader<'a> {
    path: &'a Path,
    format: Format,
    body: &'a [u8],
    pos: usize,
    tokens: std::vec::IntoIter<&'a str>,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::format(self.path, field, msg)
    }

    fn read(&mut self, ty: ScalarType, field: &str) -> Result<f64> {
        if self.format == Format::Ascii {
            let tok = self
                .tokens
                .next()
                .ok_or_else(|| self.err(field, "unexpected end of data"))?;
            return tok
                .parse::<f64>()
                .map_err(|_| self.err(field, format!("bad number `{tok}`")));
        }
        let n = ty.size();
        let bytes = self
            .body
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(field, "unexpected end of data"))?;
        self.pos += n;
        let mut b = [0u8; 8];
        b[..n].copy_from_slice(bytes);
        if self.format == Format::Big {
            b[..n].reverse();
        }
        Ok(match ty {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b),
        })
    }
}

pub fn read_ply(path: &Path) -> Result<PlyMesh> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(path, &bytes)
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PlyMesh> {
    let header_end = find_header_end(bytes)
        .ok_or_else(|| Error::format(path, "header", "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end.0])
        .map_err(|_| Error::format(path, "header", "not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::format(path, "header", "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => {
                format = Some(match it.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::Little,
                    Some("binary_big_endian") => Format::Big,
                    other => {
                        return Err(Error::format(
                            path,
                            "format",
                            format!("unknown format {other:?}"),
                        ))
                    }
                })
            }
            Some("element") => {
                let name = it.next().unwrap_or("").to_string();
                let count = it
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(path, "element", format!("bad count in `{line}`")))?;
                elements.push(Element {
                    name,
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format(path, "property", "property before element"))?;
                let bad = || Error::format(path, "property", format!("bad property `{line}`"));
                let first = it.next().ok_or_else(bad)?;
                if first == "list" {
                    let ct = it.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    let it_ty = it.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    let name = it.next().ok_or_else(bad)?.to_string();
                    el.props.push(Property::List(name, ct, it_ty));
                } else {
                    let ty = ScalarType::parse(first).ok_or_else(bad)?;
                    let name = it.next().ok_or_else(bad)?.to_string();
                    el.props.push(Property::Scalar(name, ty));
                }
            }
            _ => {}
        }
    }
    let format = format.ok_or_else(|| Error::format(path, "format", "missing format line"))?;
    let body = &bytes[header_end.1..];
    let ascii_body = if format == Format::Ascii {
        std::str::from_utf8(body)
            .map_err(|_| Error::format(path, "body", "ASCII body is not UTF-8"))?
    } else {
        ""
    };
    let mut reader = Reader {
        path,
        format,
        body,
        pos: 0,
        tokens: ascii_body.split_whitespace().collect::<Vec<_>>().into_iter(),
    };

    let mut mesh = PlyMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        diffuse: None,
        specular: None,
    };
    for el in &elements {
        match el.name.as_str() {
            "vertex" => read_vertices(&mut reader, el, &mut mesh)?,
            "face" => read_faces(&mut reader, el, &mut mesh)?,
            _ => skip_element(&mut reader, el)?,
        }
    }
    Ok(mesh)
}

fn find_header_end(bytes: &[u8]) -> Option<(usize, usize)> {
    let pat = b"end_header";
    let i = bytes.windows(pat.len()).position(|w| w == pat)?;
    let mut j = i + pat.len();
    if bytes.get(j) == Some(&b'\r') {
        j += 1;
    }
    if bytes.get(j) == Some(&b'\n') {
        j += 1;
    }
    Some((i, j))
}

fn read_vertices(r: &mut Reader, el: &Element, mesh: &mut PlyMesh) -> Result<()> {
    let names: Vec<&str> = el
        .props
        .iter()
        .map(|p| match p {
            Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
        })
        .collect();
    let idx = |n: &str| names.iter().position(|&m| m == n);
    let (xi, yi, zi) = match (idx("x"), idx("y"), idx("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(r.err("vertex", "missing x/y/z properties")),
    };
    let diffuse_idx = [idx("dr"), idx("dg"), idx("db")];
    let specular_idx = [idx("sr"), idx("sg"), idx("sb")];
    let color_idx = [idx("red"), idx("green"), idx("blue")];
    let has = |a: &[Option<usize>; 3]| a.iter().all(Option::is_some);
    let color_ty = el.props.iter().find_map(|p| match p {
        Property::Scalar(n, t) if n == "red" => Some(*t),
        _ => None,
    });

    let mut diffuse = Vec::with_capacity(el.count);
    let mut specular = Vec::with_capacity(el.count);
    let mut values = vec![0.0; el.props.len()];
    for vi in 0..el.count {
        for (k, p) in el.props.iter().enumerate() {
            match p {
                Property::Scalar(name, ty) => {
                    values[k] = r.read(*ty, &format!("vertex[{vi}].{name}"))?;
                }
                Property::List(name, ct, ity) => {
                    let n = r.read(*ct, &format!("vertex[{vi}].{name}"))? as usize;
                    for _ in 0..n {
                        r.read(*ity, &format!("vertex[{vi}].{name}"))?;
                    }
                }
            }
        }
        mesh.vertices.push(Vec3::new(values[xi], values[yi], values[zi]));
        let pick = |a: &[Option<usize>; 3]| {
            Spectrum::new(values[a[0].unwrap()], values[a[1].unwrap()], values[a[2].unwrap()])
        };
        if has(&diffuse_idx) {
            diffuse.push(pick(&diffuse_idx));
        } else if has(&color_idx) {
            // 8-bit sRGB vertex colors from MVS tools seed the diffuse albedo.
            let scale = match color_ty {
                Some(ScalarType::F32) | Some(ScalarType::F64) => 1.0,
                Some(ScalarType::U16) => 65535.0,
                _ => 255.0,
            };
            diffuse.push(pick(&color_idx).map(|v| srgb_to_linear(v / scale)));
        }
        if has(&specular_idx) {
            specular.push(pick(&specular_idx));
        }
    }
    if !diffuse.is_empty() {
        mesh.diffuse = Some(diffuse);
    }
    if !specular.is_empty() {
        mesh.specular = Some(specular);
    }
    Ok(())
}

fn read_faces(r: &mut Reader, el: &Element, mesh: &mut PlyMesh) -> Result<()> {
    for fi in 0..el.count {
        for p in &el.props {
            match p {
                Property::List(name, ct, ity)
                    if name == "vertex_indices" || name == "vertex_index" =>
                {
                    let field = format!("face[{fi}].{name}");
                    let n = r.read(*ct, &field)? as usize;
                    let mut idx = Vec::with_capacity(n);
                    for _ in 0..n {
                        let v = r.read(*ity, &field)?;
                        if v < 0.0 {
                            return Err(r.err(&field, "negative vertex index"));
                        }
                        idx.push(v as u32);
                    }
                    if n < 3 {
                        return Err(r.err(&field, format!("face with {n} vertices")));
                    }
                    // Fan-triangulate polygons.
                    for k in 1..n - 1 {
                        mesh.faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                Property::List(name, ct, ity) => {
                    let field = format!("face[{fi}].{name}");
                    let n = r.read(*ct, &field)? as usize;
                    for _ in 0..n {
                        r.read(*ity, &field)?;
                    }
                }
                Property::Scalar(name, ty) => {
                    r.read(*ty, &format!("face[{fi}].{name}"))?;
                }
            }
        }
    }
    Ok(())
}

fn skip_element(r: &mut Reader, el: &Element) -> Result<()> {
    for i in 0..el.count {
        for p in &el.props {
            let field = format!("{}[{i}]", el.name);
            match p {
                Property::Scalar(_, ty) => {
                    r.read(*ty, &field)?;
                }
                Property::List(_, ct, ity) => {
                    let n = r.read(*ct, &field)? as usize;
                    for _ in 0..n {
                        r.read(*ity, &field)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn write_ply(
    path: &Path,
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    diffuse: &[Spectrum],
    specular: &[Spectrum],
    encoding: PlyEncoding,
) -> Result<()> {
    let bytes = encode_ply(vertices, faces, diffuse, specular, encoding);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_ply(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    diffuse: &[Spectrum],
    specular: &[Spectrum],
    encoding: PlyEncoding,
) -> Vec<u8> {
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = String::new();
    out.push_str(&format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", vertices.len()));
    for p in ["x", "y", "z", "dr", "dg", "db", "sr", "sg", "sb"] {
        out.push_str(&format!("property double {p}\n"));
    }
    out.push_str(&format!(
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        faces.len()
    ));
    let rows = vertices.iter().zip(diffuse).zip(specular).map(|((v, d), s)| {
        [v.x, v.y, v.z, d.r, d.g, d.b, s.r, s.g, s.b]
    });
    match encoding {
        PlyEncoding::Ascii => {
            for row in rows {
                let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            for f in faces {
                out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
            }
            out.into_bytes()
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut bytes = out.into_bytes();
            for row in rows {
                for x in row {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
            for f in faces {
                bytes.push(3);
                for &i in f {
                    bytes.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
            bytes
        }
    }
}
