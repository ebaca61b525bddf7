//! PLY point clouds: ASCII and binary little-endian reading, binary writing.
//!
//! Required vertex properties are `x y z` and `red green blue`; `nx ny nz`
//! are picked up when present. Other elements and properties are skipped.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
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
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    /// Divisor that maps a stored color to `[0, 1]`.
    fn color_range(self) -> f64 {
        match self {
            Scalar::U8 => 255.0,
            Scalar::U16 => 65535.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Number of header lines, for ASCII body line numbers.
    lines: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(end) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            return Err(parse_err(line_no + 1, "header is not terminated by end_header".into()));
        };
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(line_no, "header line is not valid text".into()))?
            .trim_end_matches('\r')
            .trim();
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap_or("");
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, format!("expected `ply`, found `{line}`")));
            }
            continue;
        }
        match key {
            "" | "comment" | "obj_info" => {}
            "format" => {
                let kind = tok.next().unwrap_or("");
                encoding = Some(match kind {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => {
                        return Err(parse_err(line_no, "binary_big_endian is not supported".into()))
                    }
                    other => return Err(parse_err(line_no, format!("unknown format `{other}`"))),
                });
            }
            "element" => {
                let name = tok.next().ok_or_else(|| parse_err(line_no, "element without a name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, "element count is not a non-negative integer".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_no, "property before any element".into()))?;
                let words: Vec<&str> = tok.collect();
                let bad = |w: &str| parse_err(line_no, format!("unknown property type `{w}`"));
                let prop = match words.as_slice() {
                    ["list", c, i, _] => Property::List {
                        count: Scalar::parse(c).ok_or_else(|| bad(c))?,
                        item: Scalar::parse(i).ok_or_else(|| bad(i))?,
                    },
                    [t, name] => Property::Scalar {
                        name: name.to_string(),
                        ty: Scalar::parse(t).ok_or_else(|| bad(t))?,
                    },
                    _ => return Err(parse_err(line_no, format!("malformed property line `{line}`"))),
                };
                el.props.push(prop);
            }
            "end_header" => break,
            other => return Err(parse_err(line_no, format!("unexpected header keyword `{other}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| parse_err(line_no, "header has no format line".into()))?;
    Ok(Header {
        encoding,
        elements,
        body: pos,
        lines: line_no,
    })
}

/// Column indices of the vertex fields we use.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: [usize; 3],
    rgb_range: [f64; 3],
    normal: Option<[usize; 3]>,
}

fn vertex_layout(path: &Path, el: &Element) -> Result<VertexLayout> {
    let find = |name: &str| -> Option<(usize, Scalar)> {
        el.props.iter().enumerate().find_map(|(i, p)| match p {
            Property::Scalar { name: n, ty } if n == name => Some((i, *ty)),
            _ => None,
        })
    };
    let need = |name: &str| {
        find(name).ok_or_else(|| Error::MissingProperty {
            path: path.to_path_buf(),
            property: name.to_string(),
        })
    };
    let x = need("x")?;
    let y = need("y")?;
    let z = need("z")?;
    let r = need("red")?;
    let g = need("green")?;
    let b = need("blue")?;
    let normal = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a.0, b.0, c.0]),
        _ => None,
    };
    Ok(VertexLayout {
        xyz: [x.0, y.0, z.0],
        rgb: [r.0, g.0, b.0],
        rgb_range: [r.1.color_range(), g.1.color_range(), b.1.color_range()],
        normal,
    })
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(path, &bytes)
}

/// Parse PLY bytes; `path` is used for error context only.
pub fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(path, bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let layout = vertex_layout(path, &header.elements[vi])?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    match header.encoding {
        PlyEncoding::Ascii => {
            let text = std::str::from_utf8(&bytes[header.body..])
                .map_err(|_| Error::format(path, "ASCII body is not valid text"))?;
            let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let (i, line) = lines.next().ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        line: header.lines + text.lines().count() + 1,
                        msg: format!("file ends before all `{}` rows were read", el.name),
                    })?;
                    let line_no = header.lines + i + 1;
                    let perr = |msg: String| Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg,
                    };
                    let mut vals = line.split_whitespace();
                    let mut row = Vec::with_capacity(el.props.len());
                    let mut next = || -> Result<f64> {
                        let v = vals.next().ok_or_else(|| perr("too few values".into()))?;
                        v.parse::<f64>().map_err(|_| perr(format!("`{v}` is not a number")))
                    };
                    for p in &el.props {
                        match p {
                            Property::Scalar { .. } => row.push(next()?),
                            Property::List { .. } => {
                                let n = next()?;
                                if n < 0.0 || n.fract() != 0.0 {
                                    return Err(perr("list length is not a non-negative integer".into()));
                                }
                                for _ in 0..n as usize {
                                    next()?;
                                }
                                row.push(n);
                            }
                        }
                    }
                    if ei == vi {
                        rows.push(row);
                    }
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut pos = header.body;
            let eof = || Error::UnexpectedEof {
                path: path.to_path_buf(),
                what: "PLY body",
            };
            for (ei, el) in header.elements.iter().enumerate() {
                for _ in 0..el.count {
                    let mut row = Vec::with_capacity(el.props.len());
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, .. } => {
                                let end = pos + ty.size();
                                let b = bytes.get(pos..end).ok_or_else(eof)?;
                                row.push(ty.read_le(b));
                                pos = end;
                            }
                            Property::List { count, item, .. } => {
                                let end = pos + count.size();
                                let n = count.read_le(bytes.get(pos..end).ok_or_else(eof)?);
                                if n < 0.0 {
                                    return Err(Error::format(path, "negative list length"));
                                }
                                pos = end + n as usize * item.size();
                                if pos > bytes.len() {
                                    return Err(eof());
                                }
                                row.push(n);
                            }
                        }
                    }
                    if ei == vi {
                        rows.push(row);
                    }
                }
            }
        }
    }
    build_cloud(path, &layout, &rows)
}

fn build_cloud(path: &Path, l: &VertexLayout, rows: &[Vec<f64>]) -> Result<PointCloud> {
    let mut positions = Vec::with_capacity(rows.len());
    let mut colors = Vec::with_capacity(rows.len());
    let mut normals = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        positions.push(l.xyz.map(|c| r[c]));
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            rgb[k] = r[l.rgb[k]] / l.rgb_range[k];
            if !(0.0..=1.0).contains(&rgb[k]) {
                return Err(Error::format(path, format!("vertex {i}: color component outside [0, 1]")));
            }
        }
        colors.push(rgb);
        if let Some(nc) = l.normal {
            let n = nc.map(|c| r[c]);
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if !(len > 0.0) || !len.is_finite() {
                return Err(Error::format(path, format!("vertex {i}: zero or non-finite normal")));
            }
            normals.push(n.map(|v| v / len));
        }
    }
    let cloud = PointCloud::new(positions, colors).map_err(|e| Error::format(path, e.to_string()))?;
    if l.normal.is_some() {
        cloud.with_normals(normals).map_err(|e| Error::format(path, e.to_string()))
    } else {
        Ok(cloud)
    }
}

/// Round-half-up 8-bit quantization of a `[0, 1]` value.
pub fn quantize_u8(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary little-endian with double-precision positions (and normals), so
/// positions survive a round trip exactly.
pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_ply_with(cloud, path, PlyEncoding::BinaryLittleEndian)
}

pub fn write_ply_with(cloud: &PointCloud, path: impl AsRef<Path>, encoding: PlyEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_ply(cloud, encoding);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let normals = cloud.normals();
    let mut out = Vec::new();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let _ = writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if normals.is_some() {
        out.extend_from_slice(b"property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for i in 0..cloud.len() {
        let p = cloud.positions()[i];
        let c = cloud.colors()[i].map(quantize_u8);
        match encoding {
            PlyEncoding::Ascii => {
                let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
                if let Some(n) = normals {
                    let _ = write!(out, " {} {} {}", n[i][0], n[i][1], n[i][2]);
                }
                let _ = writeln!(out, " {} {} {}", c[0], c[1], c[2]);
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(n) = normals {
                    for v in n[i] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                out.extend_from_slice(&c);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PointCloud> {
        parse_ply(Path::new("test.ply"), s.as_bytes())
    }

    #[test]
    fn one_point_ascii() {
        let c = parse(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n",
        )
        .unwrap();
        assert_eq!(c.positions(), &[[0.0, 0.0, 0.0]]);
        assert_eq!(c.colors(), &[[1.0, 0.0, 0.0]]);
        assert!(c.normals().is_none());
    }

    #[test]
    fn missing_color_names_property() {
        let e = parse(
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
             end_header\n0 0 0\n",
        )
        .unwrap_err();
        assert!(matches!(e, Error::MissingProperty { ref property, .. } if property == "red"), "{e}");
    }

    #[test]
    fn malformed_header_reports_line() {
        let e = parse("ply\nformat ascii 1.0\nelement vertex one\nend_header\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse("ply\nformat ascii 1.0\nproperty float x\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
    }

    #[test]
    fn bad_body_value_reports_line() {
        let e = parse(
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 1 2 3\n0 zero 0 1 2 3\n",
        )
        .unwrap_err();
        assert!(matches!(e, Error::Parse { line: 12, .. }), "{e}");
    }

    #[test]
    fn skips_faces_and_extra_properties() {
        let c = parse(
            "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\n\
             property float z\nproperty float confidence\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n\
             1 2 3 0.5 0 0 0\n4 5 6 0.5 255 255 255\n3 0 1 1\n",
        )
        .unwrap();
        assert_eq!(c.positions()[1], [4.0, 5.0, 6.0]);
        assert_eq!(c.colors()[1], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(128.0 / 255.0), 128);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(-1.0), 0);
        assert_eq!(quantize_u8(2.0), 255);
    }

    #[test]
    fn truncated_binary_is_eof() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0]; 3], vec![[0.2, 0.4, 0.6]; 3]).unwrap();
        let bytes = encode_ply(&cloud, PlyEncoding::BinaryLittleEndian);
        let e = parse_ply(Path::new("t.ply"), &bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(e, Error::UnexpectedEof { .. }), "{e}");
    }
}
