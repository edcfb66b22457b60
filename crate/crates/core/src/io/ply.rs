//! Binary little-endian PLY with the usual splat checkpoint field names.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::UnitQuaternion;
use crate::scene::{Gaussian, GaussianScene};

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Opacities are clamped this far from 0 and 1 before taking the logit.
const OPACITY_EPS: f64 = 1e-7;

const FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

struct Header {
    count: usize,
    /// (name, type, byte offset within a vertex record)
    props: Vec<(String, Scalar, usize)>,
    stride: usize,
    data_start: usize,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::PlyHeader(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| header_err("missing `end_header`"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| header_err("header is not ASCII"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(header_err("missing `ply` magic"));
    }
    let mut format_ok = false;
    let mut count = None;
    let mut in_vertex = false;
    let mut seen_other = false;
    let mut props = Vec::new();
    let mut stride = 0;
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, ver] => {
                if *fmt != "binary_little_endian" || *ver != "1.0" {
                    return Err(header_err(format!("unsupported format `{fmt} {ver}`")));
                }
                format_ok = true;
            }
            ["element", name, n] => {
                if *name == "vertex" {
                    if count.is_some() {
                        return Err(header_err("duplicate vertex element"));
                    }
                    if seen_other {
                        return Err(header_err("vertex must be the first element"));
                    }
                    count = Some(
                        n.parse::<usize>()
                            .map_err(|_| header_err(format!("bad vertex count `{n}`")))?,
                    );
                    in_vertex = true;
                } else {
                    seen_other = true;
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(header_err("list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty)
                    .ok_or_else(|| header_err(format!("unknown property type `{ty}`")))?;
                if props.iter().any(|(n, _, _)| n == name) {
                    return Err(header_err(format!("duplicate property `{name}`")));
                }
                props.push((name.to_string(), s, stride));
                stride += s.size();
            }
            ["property", ..] => {}
            _ => return Err(header_err(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(header_err("missing `format` line"));
    }
    let count = count.ok_or_else(|| header_err("missing vertex element"))?;
    Ok(Header {
        count,
        props,
        stride,
        data_start: end + END.len(),
    })
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reads gaussians; `f_rest_*` and other extra properties are skipped.
/// Returns the scene and the names of ignored properties.
pub fn read_ply_gaussians_with_extras(bytes: &[u8]) -> Result<(GaussianScene, Vec<String>)> {
    let h = parse_header(bytes)?;
    let mut offsets = [0usize; FIELDS.len()];
    for (k, field) in FIELDS.iter().enumerate() {
        let (_, ty, off) = h
            .props
            .iter()
            .find(|(n, _, _)| n == field)
            .ok_or_else(|| Error::MissingProperty(field.to_string()))?;
        if *ty != Scalar::F32 {
            return Err(header_err(format!("property `{field}` must be float")));
        }
        offsets[k] = *off;
    }
    let extras: Vec<String> = h
        .props
        .iter()
        .map(|(n, _, _)| n.clone())
        .filter(|n| !FIELDS.contains(&n.as_str()))
        .collect();
    let need = h
        .count
        .checked_mul(h.stride)
        .ok_or_else(|| header_err("vertex count overflows"))?;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(header_err(format!(
            "vertex data truncated: {} bytes for {} vertices of {} bytes",
            data.len(),
            h.count,
            h.stride
        )));
    }
    let mut gaussians = Vec::with_capacity(h.count);
    for i in 0..h.count {
        let rec = i * h.stride;
        let v: [f64; FIELDS.len()] = std::array::from_fn(|k| f32_at(data, rec + offsets[k]) as f64);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(format!("vertex {i} has a non-finite field")));
        }
        let color = [v[3], v[4], v[5]].map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0));
        let g = Gaussian {
            position: Vector3::new(v[0], v[1], v[2]),
            scale: Vector3::new(v[7].exp(), v[8].exp(), v[9].exp()),
            rotation: UnitQuaternion::new(v[10], v[11], v[12], v[13]),
            opacity: sigmoid(v[6]),
            color,
        };
        if g.rotation.norm() < 1e-12 {
            return Err(Error::domain(format!("vertex {i} has a zero rotation")));
        }
        gaussians.push(g);
    }
    Ok((GaussianScene::new(gaussians), extras))
}

pub fn read_ply_gaussians(bytes: &[u8]) -> Result<GaussianScene> {
    let (scene, extras) = read_ply_gaussians_with_extras(bytes)?;
    if extras.iter().any(|n| n.starts_with("f_rest_")) {
        log::warn!("ignoring higher-order spherical harmonic coefficients (f_rest_*)");
    }
    Ok(scene)
}

pub fn write_ply_gaussians(scene: &GaussianScene) -> Result<Vec<u8>> {
    let mut head = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(head, "element vertex {}", scene.len());
    for f in FIELDS {
        let _ = writeln!(head, "property float {f}");
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    out.reserve(scene.len() * FIELDS.len() * 4);
    for (i, g) in scene.gaussians.iter().enumerate() {
        if g.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::domain(format!(
                "gaussian {i} has a non-positive scale"
            )));
        }
        let o = g.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let q = g.rotation;
        let vals = [
            g.position.x,
            g.position.y,
            g.position.z,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            (o / (1.0 - o)).ln(),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.x,
            q.y,
            q.z,
        ];
        for v in vals {
            if !v.is_finite() {
                return Err(Error::domain(format!(
                    "gaussian {i} has a non-finite field"
                )));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}
