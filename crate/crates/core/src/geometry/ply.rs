//! PLY reader/writer for the subset used by scan exports: a `vertex` element
//! with `x,y,z` (and optionally `nx,ny,nz`) in float32/float64, ASCII or
//! binary-little-endian. Other elements and extra scalar properties are
//! skipped with a warning; big-endian files are rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, NORMAL_UNIT_TOL};

/// On-disk encoding for [`save_ply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count_ty: ScalarType, item_ty: ScalarType },
}

#[derive(Debug, Clone)]
struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    ascii: bool,
    elements: Vec<ElementDecl>,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    // The header is ASCII text terminated by an "end_header" line; data
    // (possibly binary) follows immediately after its newline.
    let mut lines: Vec<(String, usize)> = Vec::new();
    let mut pos = 0;
    let mut found_end = false;
    while pos < bytes.len() {
        let line_end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| pos + p)
            .ok_or_else(|| Error::PlyMalformedHeader("missing end_header".into()))?;
        let raw = &bytes[pos..line_end];
        let text = std::str::from_utf8(raw)
            .map_err(|_| Error::PlyMalformedHeader("non-UTF8 header line".into()))?
            .trim_end_matches('\r')
            .to_string();
        pos = line_end + 1;
        let is_end = text.trim() == "end_header";
        lines.push((text, pos));
        if is_end {
            found_end = true;
            break;
        }
    }
    if !found_end {
        return Err(Error::PlyMalformedHeader("missing end_header".into()));
    }
    let data_offset = lines.last().unwrap().1;

    if lines.first().map(|(l, _)| l.trim()) != Some("ply") {
        return Err(Error::PlyMalformedHeader("missing 'ply' magic line".into()));
    }

    let mut ascii = None;
    let mut elements: Vec<ElementDecl> = Vec::new();
    for (line, _) in &lines[1..lines.len() - 1] {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let fmt = tokens
                    .next()
                    .ok_or_else(|| Error::PlyMalformedHeader("format line missing type".into()))?;
                match fmt {
                    "ascii" => ascii = Some(true),
                    "binary_little_endian" => ascii = Some(false),
                    "binary_big_endian" => {
                        return Err(Error::PlyUnsupported("binary_big_endian".into()))
                    }
                    other => {
                        return Err(Error::PlyMalformedHeader(format!(
                            "unknown format '{other}'"
                        )))
                    }
                }
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::PlyMalformedHeader("element missing name".into()))?;
                let count: usize = tokens
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::PlyMalformedHeader("element missing count".into()))?;
                elements.push(ElementDecl {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or_else(|| {
                    Error::PlyMalformedHeader("property before any element".into())
                })?;
                let first = tokens
                    .next()
                    .ok_or_else(|| Error::PlyMalformedHeader("property missing type".into()))?;
                if first == "list" {
                    let count_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::PlyMalformedHeader("bad list count type".into()))?;
                    let item_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| Error::PlyMalformedHeader("bad list item type".into()))?;
                    element.properties.push(Property::List { count_ty, item_ty });
                } else {
                    let ty = ScalarType::parse(first).ok_or_else(|| {
                        Error::PlyMalformedHeader(format!("unknown property type '{first}'"))
                    })?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| Error::PlyMalformedHeader("property missing name".into()))?;
                    element.properties.push(Property::Scalar {
                        name: name.to_string(),
                        ty,
                    });
                }
            }
            Some(other) => {
                return Err(Error::PlyMalformedHeader(format!(
                    "unexpected header keyword '{other}'"
                )))
            }
        }
    }

    let ascii =
        ascii.ok_or_else(|| Error::PlyMalformedHeader("missing format declaration".into()))?;
    Ok(Header {
        ascii,
        elements,
        data_offset,
    })
}

struct VertexLayout {
    xyz: [usize; 3],
    nxyz: Option<[usize; 3]>,
}

fn vertex_layout(decl: &ElementDecl) -> Result<VertexLayout> {
    let mut find = |want: &str| -> Option<usize> {
        decl.properties.iter().position(|p| match p {
            Property::Scalar { name, .. } => name == want,
            Property::List { .. } => false,
        })
    };
    let x = find("x");
    let y = find("y");
    let z = find("z");
    let (x, y, z) = match (x, y, z) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(Error::PlyMalformedHeader(
                "vertex element missing x, y, or z".into(),
            ))
        }
    };
    for &idx in &[x, y, z] {
        if let Property::Scalar { ty, .. } = &decl.properties[idx] {
            if !ty.is_float() {
                return Err(Error::PlyMalformedHeader(
                    "x, y, z must be float or double".into(),
                ));
            }
        }
    }
    let nxyz = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some([a, b, c]),
        _ => None,
    };
    Ok(VertexLayout {
        xyz: [x, y, z],
        nxyz,
    })
}

/// Loads a point cloud from a PLY file.
///
/// Normals are read from `nx,ny,nz` when all three are present; non-unit
/// normals are renormalized (near-zero ones become the invalid sentinel).
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let bytes = fs::read(path.as_ref())?;
    let header = parse_header(&bytes)?;
    let data = &bytes[header.data_offset..];

    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::PlyMalformedHeader("no vertex element declared".into()))?;
    for e in &header.elements {
        if e.name != "vertex" {
            log::warn!("skipping PLY element '{}' ({} entries)", e.name, e.count);
        }
    }
    let decl = &header.elements[vertex_pos];
    let layout = vertex_layout(decl)?;
    if layout.nxyz.is_none() {
        let named: Vec<&str> = decl
            .properties
            .iter()
            .filter_map(|p| match p {
                Property::Scalar { name, .. } => Some(name.as_str()),
                Property::List { .. } => None,
            })
            .collect();
        for n in ["nx", "ny", "nz"] {
            if named.contains(&n) {
                log::warn!("vertex declares only part of nx/ny/nz; ignoring normals");
                break;
            }
        }
    }

    let (points, normals) = if header.ascii {
        read_vertices_ascii(data, &header.elements, vertex_pos, &layout)?
    } else {
        read_vertices_binary(data, &header.elements, vertex_pos, &layout)?
    };

    match normals {
        Some(normals) => {
            let normals = normals
                .into_iter()
                .map(|n| {
                    let norm = n.norm();
                    if norm < 1e-12 {
                        Vector3::zeros()
                    } else if (norm - 1.0).abs() > NORMAL_UNIT_TOL {
                        n / norm
                    } else {
                        n
                    }
                })
                .collect();
            PointCloud::with_normals(points, normals)
        }
        None => Ok(PointCloud::new(points)),
    }
}

type Vertices = (Vec<Point3>, Option<Vec<Vector3<f64>>>);

fn read_vertices_ascii(
    data: &[u8],
    elements: &[ElementDecl],
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<Vertices> {
    let text = std::str::from_utf8(data)
        .map_err(|_| Error::PlyMalformedHeader("ASCII body is not valid UTF-8".into()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());

    let mut points = Vec::new();
    let mut normals = layout.nxyz.map(|_| Vec::new());

    for (ei, decl) in elements.iter().enumerate() {
        if ei != vertex_pos {
            // One line per instance; contents irrelevant.
            for _ in 0..decl.count {
                lines.next().ok_or_else(|| {
                    Error::PlyMalformedHeader(format!("missing data for element '{}'", decl.name))
                })?;
            }
            continue;
        }
        points.reserve(decl.count);
        for i in 0..decl.count {
            let line = lines.next().ok_or_else(|| {
                Error::PlyMalformedHeader(format!("vertex data ended early at {i}"))
            })?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let mut values = vec![0.0f64; decl.properties.len()];
            let mut cursor = 0;
            for (pi, prop) in decl.properties.iter().enumerate() {
                match prop {
                    Property::Scalar { .. } => {
                        let tok = tokens.get(cursor).ok_or_else(|| {
                            Error::PlyMalformedHeader(format!("short vertex line at {i}"))
                        })?;
                        values[pi] = tok.parse::<f64>().map_err(|_| {
                            Error::PlyMalformedHeader(format!("bad number '{tok}' at vertex {i}"))
                        })?;
                        cursor += 1;
                    }
                    Property::List { .. } => {
                        let tok = tokens.get(cursor).ok_or_else(|| {
                            Error::PlyMalformedHeader(format!("short vertex line at {i}"))
                        })?;
                        let count: usize = tok.parse().map_err(|_| {
                            Error::PlyMalformedHeader(format!("bad list count at vertex {i}"))
                        })?;
                        cursor += 1 + count;
                    }
                }
            }
            push_vertex(&values, layout, i, &mut points, &mut normals)?;
        }
    }
    Ok((points, normals))
}

fn read_vertices_binary(
    data: &[u8],
    elements: &[ElementDecl],
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<Vertices> {
    let mut offset = 0usize;
    let mut points = Vec::new();
    let mut normals = layout.nxyz.map(|_| Vec::new());

    let need = |offset: usize, n: usize, len: usize| -> Result<()> {
        if offset + n > len {
            Err(Error::PlyMalformedHeader(format!(
                "binary data ended early (needed {} bytes at offset {offset})",
                n
            )))
        } else {
            Ok(())
        }
    };

    for (ei, decl) in elements.iter().enumerate() {
        if ei == vertex_pos {
            points.reserve(decl.count);
            for i in 0..decl.count {
                let mut values = vec![0.0f64; decl.properties.len()];
                for (pi, prop) in decl.properties.iter().enumerate() {
                    match prop {
                        Property::Scalar { ty, .. } => {
                            need(offset, ty.size(), data.len())?;
                            values[pi] = ty.read_le(&data[offset..]);
                            offset += ty.size();
                        }
                        Property::List { count_ty, item_ty } => {
                            need(offset, count_ty.size(), data.len())?;
                            let count = count_ty.read_le(&data[offset..]) as usize;
                            offset += count_ty.size();
                            need(offset, count * item_ty.size(), data.len())?;
                            offset += count * item_ty.size();
                        }
                    }
                }
                push_vertex(&values, layout, i, &mut points, &mut normals)?;
            }
        } else {
            for _ in 0..decl.count {
                for prop in &decl.properties {
                    match prop {
                        Property::Scalar { ty, .. } => {
                            need(offset, ty.size(), data.len())?;
                            offset += ty.size();
                        }
                        Property::List { count_ty, item_ty } => {
                            need(offset, count_ty.size(), data.len())?;
                            let count = count_ty.read_le(&data[offset..]) as usize;
                            offset += count_ty.size();
                            need(offset, count * item_ty.size(), data.len())?;
                            offset += count * item_ty.size();
                        }
                    }
                }
            }
        }
    }
    Ok((points, normals))
}

fn push_vertex(
    values: &[f64],
    layout: &VertexLayout,
    index: usize,
    points: &mut Vec<Point3>,
    normals: &mut Option<Vec<Vector3<f64>>>,
) -> Result<()> {
    let p = Point3::new(
        values[layout.xyz[0]],
        values[layout.xyz[1]],
        values[layout.xyz[2]],
    );
    if !p.is_finite() {
        return Err(Error::NonFiniteCoordinate { index });
    }
    points.push(p);
    if let (Some(ns), Some(idx)) = (normals.as_mut(), layout.nxyz) {
        let n = Vector3::new(values[idx[0]], values[idx[1]], values[idx[2]]);
        if !(n.x.is_finite() && n.y.is_finite() && n.z.is_finite()) {
            return Err(Error::NonFiniteCoordinate { index });
        }
        ns.push(n);
    }
    Ok(())
}

/// Writes a point cloud as PLY; `nx,ny,nz` are emitted iff the cloud has
/// normals. Coordinates are stored as float64 so a round-trip is bit-exact.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    let fmt_line = match format {
        PlyFormat::Ascii => "format ascii 1.0",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0",
    };
    write!(
        out,
        "ply\n{fmt_line}\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        cloud.len()
    )?;
    if cloud.has_normals() {
        write!(
            out,
            "property double nx\nproperty double ny\nproperty double nz\n"
        )?;
    }
    write!(out, "end_header\n")?;

    match format {
        PlyFormat::Ascii => {
            for (i, p) in cloud.points().iter().enumerate() {
                write!(out, "{} {} {}", p.x, p.y, p.z)?;
                if let Some(ns) = cloud.normals() {
                    let n = ns[i];
                    write!(out, " {} {} {}", n.x, n.y, n.z)?;
                }
                out.push(b'\n');
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (i, p) in cloud.points().iter().enumerate() {
                out.extend_from_slice(&p.x.to_le_bytes());
                out.extend_from_slice(&p.y.to_le_bytes());
                out.extend_from_slice(&p.z.to_le_bytes());
                if let Some(ns) = cloud.normals() {
                    let n = ns[i];
                    out.extend_from_slice(&n.x.to_le_bytes());
                    out.extend_from_slice(&n.y.to_le_bytes());
                    out.extend_from_slice(&n.z.to_le_bytes());
                }
            }
        }
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}
