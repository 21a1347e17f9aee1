//! PLY point clouds (ascii and binary little-endian) with `x,y,z` and optional
//! `red,green,blue` vertex properties.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Property {
    name: String,
    ty: Scalar,
}

struct Header {
    encoding: PlyEncoding,
    vertex_count: usize,
    properties: Vec<Property>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if !bytes.starts_with(b"ply\n") && !bytes.starts_with(b"ply\r\n") {
        return Err(Error::format(path, "missing 'ply' magic"));
    }
    let end_marker = b"end_header";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let mut body_offset = end + end_marker.len();
    if bytes.get(body_offset) == Some(&b'\r') {
        body_offset += 1;
    }
    if bytes.get(body_offset) == Some(&b'\n') {
        body_offset += 1;
    }
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "non-utf8 header"))?;

    let mut encoding = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    for line in text.lines().skip(1) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(Error::format(path, format!("unsupported PLY format {other}"))),
                });
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::format(path, format!("bad element count '{count}'")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    if properties.is_empty() && seen_vertex {
                        return Err(Error::format(path, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    seen_vertex = true;
                } else if !seen_vertex {
                    // elements before the vertex block would need to be skipped in the body
                    return Err(Error::format(path, format!("element '{name}' precedes vertex element")));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::format(path, "list properties on vertices are not supported"));
            }
            ["property", ty, name] if in_vertex => {
                let ty = Scalar::parse(ty).ok_or_else(|| Error::format(path, format!("unknown property type {ty}")))?;
                properties.push(Property {
                    name: name.to_string(),
                    ty,
                });
            }
            ["property", ..] => {}
            _ => return Err(Error::format(path, format!("unrecognized header line '{line}'"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| Error::format(path, "missing format line"))?,
        vertex_count: vertex_count.unwrap_or(0),
        properties,
        body_offset,
    })
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes, path)
}

fn parse_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let header = parse_header(bytes, path)?;
    let find = |n: &str| header.properties.iter().position(|p| p.name == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        if header.vertex_count == 0 {
            return Ok(PointCloud::default());
        }
        return Err(Error::format(path, "vertex element lacks x/y/z properties"));
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_scale = |p: usize| match header.properties[p].ty {
        Scalar::F32 | Scalar::F64 => 1.0,
        Scalar::U16 => 1.0 / 65535.0,
        _ => 1.0 / 255.0,
    };

    let n = header.vertex_count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = rgb.map(|_| Vec::with_capacity(n));
    let mut row = vec![0.0f64; header.properties.len()];
    let body = &bytes[header.body_offset..];

    match header.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::format(path, "non-utf8 ascii body"))?;
            let mut tokens = text.split_whitespace();
            for v in 0..n {
                for slot in row.iter_mut() {
                    let t = tokens
                        .next()
                        .ok_or_else(|| Error::format(path, format!("truncated at vertex {v}")))?;
                    *slot = t
                        .parse()
                        .map_err(|_| Error::format(path, format!("bad number '{t}' at vertex {v}")))?;
                }
                push_row(&row, [ix, iy, iz], rgb, &color_scale, &mut positions, colors.as_mut());
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|p| p.ty.size()).sum();
            if body.len() < stride * n {
                return Err(Error::format(
                    path,
                    format!("truncated: {} vertices need {} bytes, found {}", n, stride * n, body.len()),
                ));
            }
            for rec in body.chunks_exact(stride).take(n) {
                let mut off = 0;
                for (slot, p) in row.iter_mut().zip(&header.properties) {
                    *slot = p.ty.read_le(&rec[off..]);
                    off += p.ty.size();
                }
                push_row(&row, [ix, iy, iz], rgb, &color_scale, &mut positions, colors.as_mut());
            }
        }
    }
    let cloud = PointCloud { positions, colors };
    cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(cloud)
}

fn push_row(
    row: &[f64],
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    color_scale: &dyn Fn(usize) -> f64,
    positions: &mut Vec<[f32; 3]>,
    colors: Option<&mut Vec<[f32; 3]>>,
) {
    positions.push(xyz.map(|i| row[i] as f32));
    if let (Some(rgb), Some(colors)) = (rgb, colors) {
        colors.push(rgb.map(|i| (row[i] * color_scale(i)) as f32));
    }
}

pub fn save_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(64 + cloud.len() * 15);
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    write!(out, "ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len()).unwrap();
    out.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend_from_slice(b"end_header\n");
    let to_u8 = |c: f32| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.positions.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        match encoding {
            PlyEncoding::Ascii => {
                // `{}` on f32 prints the shortest string that round-trips exactly
                write!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
                if let Some(c) = color {
                    write!(out, " {} {} {}", c[0], c[1], c[2]).unwrap();
                }
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = color {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three() -> PointCloud {
        PointCloud::new(vec![[0.0, 1.5, -2.25], [1e-7, 3.0e5, 0.1], [-4.0, 0.333_333_34, 7.0]])
    }

    #[test]
    fn round_trip_both_encodings() {
        let dir = tempfile::tempdir().unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let p = dir.path().join("c.ply");
            save_point_cloud(&three(), &p, enc).unwrap();
            assert_eq!(load_point_cloud(&p).unwrap(), three());
        }
    }

    #[test]
    fn empty_vertex_element() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ply");
        save_point_cloud(&PointCloud::default(), &p, PlyEncoding::BinaryLittleEndian).unwrap();
        assert!(load_point_cloud(&p).unwrap().is_empty());
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n").unwrap();
        assert!(load_point_cloud(&p).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ply");
        fs::write(&p, b"OFF\n3 0 0\n").unwrap();
        match load_point_cloud(&p) {
            Err(Error::Format { path, .. }) => assert_eq!(path, p),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_binary_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_point_cloud(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn colors_and_trailing_faces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255 0 51\n1 2 3 0 255 0\n3 0 1 1\n",
        )
        .unwrap();
        let c = load_point_cloud(&p).unwrap();
        assert_eq!(c.positions, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }
}
