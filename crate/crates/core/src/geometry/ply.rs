//! Minimal PLY reader/writer for vertex-only point clouds.
//!
//! Reads ASCII and binary little-endian files with scalar vertex properties
//! `x y z`, optional `red green blue` and optional `nx ny nz`. Other vertex
//! properties are skipped; elements after `vertex` are ignored.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

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
    fn parse(name: &str) -> Option<Self> {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    format: PlyFormat,
    vertex_count: usize,
    props: Vec<(String, Scalar)>,
    body_offset: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("PLY", msg)
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let end = data[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header"))?;
        let line = std::str::from_utf8(&data[offset..offset + end])
            .map_err(|_| bad("header is not UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        offset += end + 1;
        if line == "end_header" {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(bad("missing 'ply' magic"));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    for line in &lines[1..] {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(bad(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                if vertex_count.is_some() && in_vertex {
                    in_vertex = false;
                }
                if *name == "vertex" {
                    let c = count.parse().map_err(|_| bad("bad vertex count"))?;
                    vertex_count = Some(c);
                    in_vertex = true;
                } else if vertex_count.is_none() {
                    return Err(bad("elements before 'vertex' are not supported"));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties on vertices are not supported")),
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            _ => return Err(bad(format!("unexpected header line '{line}'"))),
        }
    }
    Ok(Header {
        format: format.ok_or_else(|| bad("missing format line"))?,
        vertex_count: vertex_count.ok_or_else(|| bad("missing vertex element"))?,
        props,
        body_offset: offset,
    })
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&data)
}

pub(crate) fn parse_ply(data: &[u8]) -> Result<PointCloud> {
    let header = parse_header(data)?;
    let n = header.vertex_count;
    let find = |name: &str| header.props.iter().position(|(p, _)| p == name);
    let xyz = ["x", "y", "z"].map(find);
    if xyz.iter().any(Option::is_none) {
        return Err(bad("vertex needs x, y and z"));
    }
    let rgb = ["red", "green", "blue"].map(find);
    let nrm = ["nx", "ny", "nz"].map(find);
    let has_rgb = rgb.iter().all(Option::is_some);
    let has_nrm = nrm.iter().all(Option::is_some);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let body = &data[header.body_offset..];
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| bad("ASCII body is not UTF-8"))?;
            let mut tokens = text.split_whitespace();
            for _ in 0..n {
                let mut row = Vec::with_capacity(header.props.len());
                for _ in &header.props {
                    let t = tokens.next().ok_or_else(|| bad("truncated ASCII body"))?;
                    row.push(t.parse().map_err(|_| bad(format!("bad number '{t}'")))?);
                }
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.props.iter().map(|(_, s)| s.size()).sum();
            if body.len() < stride * n {
                return Err(bad("truncated binary body"));
            }
            for i in 0..n {
                let mut at = i * stride;
                let mut row = Vec::with_capacity(header.props.len());
                for (_, s) in &header.props {
                    row.push(s.read_le(&body[at..at + s.size()]));
                    at += s.size();
                }
                rows.push(row);
            }
        }
    }

    let pick = |row: &[f64], idx: &[Option<usize>; 3]| -> Vec3 {
        [row[idx[0].unwrap()], row[idx[1].unwrap()], row[idx[2].unwrap()]]
    };
    let positions = rows.iter().map(|r| pick(r, &xyz)).collect();
    let colors = has_rgb.then(|| {
        let eight_bit = header.props[rgb[0].unwrap()].1 == Scalar::U8;
        rows.iter()
            .map(|r| {
                let c = pick(r, &rgb);
                if eight_bit {
                    c.map(|x| x / 255.0)
                } else {
                    c
                }
            })
            .collect()
    });
    let normals = has_nrm.then(|| rows.iter().map(|r| pick(r, &nrm)).collect());
    PointCloud::new(positions, colors, normals)
}

fn color_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Serialize a cloud. Coordinates and normals are written as `double`, colors as `uchar`.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.colors().is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.normals().is_some() {
        out.extend_from_slice(b"property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.extend_from_slice(b"end_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors().map(|c| c[i].map(color_byte));
        let nm = cloud.normals().map(|n| n[i]);
        match format {
            PlyFormat::Ascii => {
                let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
                if let Some(c) = c {
                    let _ = write!(out, " {} {} {}", c[0], c[1], c[2]);
                }
                if let Some(nm) = nm {
                    let _ = write!(out, " {} {} {}", nm[0], nm[1], nm[2]);
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                p.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                if let Some(c) = c {
                    out.extend_from_slice(&c);
                }
                if let Some(nm) = nm {
                    nm.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    fs::write(path, encode_ply(cloud, format)).map_err(|e| Error::io(path, e))
}
