//! Point formats: XYZ text and ASCII PLY.
//!
//! XYZ holds one `x y z` line per point; blank lines and `#` comments are
//! skipped. PLY files are `format ascii 1.0` with a `vertex` element whose
//! `x`, `y`, `z` properties are positions. Other vertex properties are kept
//! by name, and other elements are skipped.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ShapeId, Vec3};

use super::{parse_error, read_text, write_atomic};

/// Name of the per-vertex distinctiveness property.
pub const DISTINCTIVENESS: &str = "distinctiveness";

/// Blue at 0, green at 0.5, red at 1, linear in between. Channels are
/// rounded to the nearest of 0..=255; inputs are clamped to [0, 1].
pub fn colormap(d: f64) -> [u8; 3] {
    let t = if d.is_nan() { 0.0 } else { d.clamp(0.0, 1.0) };
    let (r, g, b) = if t < 0.5 {
        (0.0, 2.0 * t, 1.0 - 2.0 * t)
    } else {
        (2.0 * t - 1.0, 2.0 - 2.0 * t, 0.0)
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

fn parse_xyz_line(line: &str) -> Option<Vec3> {
    let mut it = line.split_whitespace().map(f64::from_str);
    let p = [it.next()?.ok()?, it.next()?.ok()?, it.next()?.ok()?];
    it.next().is_none().then_some(p)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = parse_xyz_line(line).ok_or_else(|| parse_error(path, i + 1, format!("expected three numbers, found `{line}`")))?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(parse_error(path, i + 1, "non-finite coordinate"));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    parse_xyz(&read_text(path)?, path)
}

/// Coordinates are written in shortest round-trip form, so reading back is exact.
pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<()> {
    write_atomic(path, |w| {
        for p in points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::Char,
            "uchar" | "uint8" => PlyType::UChar,
            "short" | "int16" => PlyType::Short,
            "ushort" | "uint16" => PlyType::UShort,
            "int" | "int32" => PlyType::Int,
            "uint" | "uint32" => PlyType::UInt,
            "float" | "float32" => PlyType::Float,
            "double" | "float64" => PlyType::Double,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            PlyType::Char => "char",
            PlyType::UChar => "uchar",
            PlyType::Short => "short",
            PlyType::UShort => "ushort",
            PlyType::Int => "int",
            PlyType::UInt => "uint",
            PlyType::Float => "float",
            PlyType::Double => "double",
        }
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            PlyType::Char => Some((i8::MIN as f64, i8::MAX as f64)),
            PlyType::UChar => Some((0.0, u8::MAX as f64)),
            PlyType::Short => Some((i16::MIN as f64, i16::MAX as f64)),
            PlyType::UShort => Some((0.0, u16::MAX as f64)),
            PlyType::Int => Some((i32::MIN as f64, i32::MAX as f64)),
            PlyType::UInt => Some((0.0, u32::MAX as f64)),
            PlyType::Float | PlyType::Double => None,
        }
    }

    fn format(self, v: f64, out: &mut String) -> std::result::Result<(), String> {
        match self {
            PlyType::Float => write!(out, "{}", v as f32).map_err(|e| e.to_string()),
            PlyType::Double => write!(out, "{v}").map_err(|e| e.to_string()),
            _ => {
                let (lo, hi) = self.range().unwrap();
                if v.fract() != 0.0 || v < lo || v > hi {
                    return Err(format!("{v} is not a valid {}", self.name()));
                }
                write!(out, "{}", v as i64).map_err(|e| e.to_string())
            }
        }
    }

    fn read(self, token: &str) -> Option<f64> {
        match self.range() {
            None => token.parse::<f64>().ok().filter(|v| v.is_finite()),
            Some((lo, hi)) => token.parse::<i64>().ok().map(|v| v as f64).filter(|v| (lo..=hi).contains(v)),
        }
    }
}

/// A per-vertex scalar property.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: PlyType,
    pub values: Vec<f64>,
}

/// Vertex positions plus named per-vertex scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyData {
    pub points: Vec<Vec3>,
    /// Storage type of `x`, `y` and `z`.
    pub position_type: PlyType,
    pub properties: Vec<PlyProperty>,
}

impl PlyData {
    pub fn new(points: Vec<Vec3>, position_type: PlyType) -> Self {
        PlyData {
            points,
            position_type,
            properties: Vec::new(),
        }
    }

    pub fn with(mut self, name: &str, ty: PlyType, values: Vec<f64>) -> Self {
        self.properties.push(PlyProperty {
            name: name.to_string(),
            ty,
            values,
        });
        self
    }

    pub fn property(&self, name: &str) -> Option<&[f64]> {
        self.properties.iter().find(|p| p.name == name).map(|p| p.values.as_slice())
    }

    /// The `red`, `green`, `blue` properties, when all three are present.
    pub fn colors(&self) -> Option<Vec<[u8; 3]>> {
        let (r, g, b) = (self.property("red")?, self.property("green")?, self.property("blue")?);
        Some((0..r.len()).map(|i| [r[i] as u8, g[i] as u8, b[i] as u8]).collect())
    }
}

pub fn write_ply(path: &Path, data: &PlyData) -> Result<()> {
    let n = data.points.len();
    for p in &data.properties {
        if p.values.len() != n {
            return Err(Error::invalid(format!("property `{}` has {} values for {n} vertices", p.name, p.values.len())));
        }
        if p.name.contains(char::is_whitespace) || ["x", "y", "z"].contains(&p.name.as_str()) {
            return Err(Error::invalid(format!("invalid property name `{}`", p.name)));
        }
    }
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(text, "element vertex {n}");
    for axis in ["x", "y", "z"] {
        let _ = writeln!(text, "property {} {axis}", data.position_type.name());
    }
    for p in &data.properties {
        let _ = writeln!(text, "property {} {}", p.ty.name(), p.name);
    }
    text.push_str("end_header\n");
    let fail = |e: String| Error::invalid(e);
    for (i, pt) in data.points.iter().enumerate() {
        for (k, &c) in pt.iter().enumerate() {
            if k > 0 {
                text.push(' ');
            }
            data.position_type.format(c, &mut text).map_err(fail)?;
        }
        for p in &data.properties {
            text.push(' ');
            p.ty.format(p.values[i], &mut text).map_err(fail)?;
        }
        text.push('\n');
    }
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Positions as `float`, plus distinctiveness and its colormap when given.
pub fn write_field_ply(path: &Path, points: &[Vec3], d: Option<&[f64]>) -> Result<()> {
    let mut data = PlyData::new(points.to_vec(), PlyType::Float);
    if let Some(d) = d {
        let rgb: Vec<[u8; 3]> = d.iter().map(|&v| colormap(v)).collect();
        data = data.with(DISTINCTIVENESS, PlyType::Float, d.to_vec());
        for (k, name) in ["red", "green", "blue"].into_iter().enumerate() {
            data = data.with(name, PlyType::UChar, rgb.iter().map(|c| c[k] as f64).collect());
        }
    }
    write_ply(path, &data)
}

enum PropDecl {
    Scalar(String, PlyType),
    List(String),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<PropDecl>,
    line: usize,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PlyData> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let err = |line: usize, msg: String| parse_error(path, line, msg);
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing `ply` magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_end = 0;
    for (no, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(err(no, format!("unsupported format `{other}`"))),
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(no, format!("bad count `{count}` for element `{name}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    line: no,
                });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements.last_mut().ok_or_else(|| err(no, "property before any element".into()))?;
                if PlyType::parse(count_ty).is_none() || PlyType::parse(item_ty).is_none() {
                    return Err(err(no, format!("unknown list type in `{line}`")));
                }
                el.props.push(PropDecl::List(name.to_string()));
            }
            ["property", ty, name] => {
                let ty = PlyType::parse(ty).ok_or_else(|| err(no, format!("unknown property type `{ty}`")))?;
                let el = elements.last_mut().ok_or_else(|| err(no, "property before any element".into()))?;
                el.props.push(PropDecl::Scalar(name.to_string(), ty));
            }
            ["end_header"] => {
                header_end = no;
                break;
            }
            _ => return Err(err(no, format!("malformed header line `{line}`"))),
        }
    }
    if header_end == 0 {
        return Err(err(text.lines().count().max(1), "missing end_header".into()));
    }
    if !format_seen {
        return Err(err(header_end, "missing `format ascii 1.0`".into()));
    }
    let vertex = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err(header_end, "no `vertex` element".into()))?;
    let mut axes = [usize::MAX; 3];
    let mut position_type = PlyType::Float;
    for (k, axis) in ["x", "y", "z"].into_iter().enumerate() {
        let found = elements[vertex].props.iter().position(|p| matches!(p, PropDecl::Scalar(n, _) if n == axis));
        let idx = found.ok_or_else(|| err(elements[vertex].line, format!("vertex element lacks property `{axis}`")))?;
        if let PropDecl::Scalar(_, t) = elements[vertex].props[idx] {
            position_type = t;
        }
        axes[k] = idx;
    }

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut data = PlyData::new(Vec::with_capacity(elements[vertex].count), position_type);
    for (props_idx, decl) in elements[vertex].props.iter().enumerate() {
        if let PropDecl::Scalar(name, ty) = decl {
            if !axes.contains(&props_idx) {
                data = data.with(name, *ty, Vec::new());
            }
        }
    }
    let mut last_line = header_end;
    for (e_idx, el) in elements.iter().enumerate() {
        for found in 0..el.count {
            let Some((no, line)) = body.next() else {
                return Err(err(
                    last_line,
                    format!("element `{}` declares {} entries, found {found}", el.name, el.count),
                ));
            };
            last_line = no;
            if e_idx != vertex {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let mut at = 0;
            let mut point = [0.0; 3];
            let mut extra = 0;
            for (p_idx, decl) in el.props.iter().enumerate() {
                match decl {
                    PropDecl::List(name) => {
                        let n: usize = tokens
                            .get(at)
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| err(no, format!("bad list length for `{name}`")))?;
                        at += 1 + n;
                    }
                    PropDecl::Scalar(name, ty) => {
                        let token = tokens.get(at).ok_or_else(|| err(no, format!("missing value for `{name}`")))?;
                        let v = ty.read(token).ok_or_else(|| err(no, format!("bad {} value `{token}` for `{name}`", ty.name())))?;
                        at += 1;
                        if let Some(k) = axes.iter().position(|&a| a == p_idx) {
                            point[k] = v;
                        } else {
                            data.properties[extra].values.push(v);
                            extra += 1;
                        }
                    }
                }
            }
            if at != tokens.len() {
                return Err(err(no, format!("expected {at} values, found {}", tokens.len())));
            }
            data.points.push(point);
        }
    }
    if let Some((no, _)) = body.next() {
        let last = elements.last().map_or("vertex", |e| e.name.as_str());
        return Err(err(no, format!("data beyond the declared entries of element `{last}`")));
    }
    Ok(data)
}

pub fn read_ply(path: &Path) -> Result<PlyData> {
    parse_ply(&read_text(path)?, path)
}

/// Reads `.xyz`, `.ply` or `.obj` (vertices only) by extension.
pub fn read_point_cloud(path: &Path, id: impl Into<ShapeId>) -> Result<PointCloud> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let points = match ext.as_deref() {
        Some("xyz") | Some("txt") => read_xyz(path)?,
        Some("ply") => read_ply(path)?.points,
        Some("obj") => super::read_obj(path)?.vertices,
        _ => return Err(Error::invalid(format!("{}: unknown point format (expected .xyz, .ply or .obj)", path.display()))),
    };
    PointCloud::new(points, id)
}
