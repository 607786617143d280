//! ASCII OBJ meshes: `v` vertices and triangular `f` faces. Face corners
//! may carry `/vt/vn` suffixes and negative (relative) indices. Other
//! statements are ignored.

use std::path::Path;

use crate::error::Result;
use crate::geometry::Mesh;

use super::{parse_error, read_text, write_atomic};

pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let mut mesh = Mesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let mut tokens = raw.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| parse_error(path, no, "bad vertex coordinate"))?;
                if coords.len() != 3 {
                    return Err(parse_error(path, no, "vertex needs three coordinates"));
                }
                mesh.vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let corners: Vec<&str> = tokens.collect();
                if corners.len() != 3 {
                    return Err(parse_error(path, no, format!("only triangles are supported ({} corners)", corners.len())));
                }
                let mut face = [0usize; 3];
                for (k, c) in corners.iter().enumerate() {
                    let head = c.split('/').next().unwrap_or("");
                    let idx: i64 = head.parse().map_err(|_| parse_error(path, no, format!("bad face index `{c}`")))?;
                    let n = mesh.vertices.len() as i64;
                    let resolved = if idx > 0 { idx - 1 } else { n + idx };
                    if idx == 0 || resolved < 0 || resolved >= n {
                        return Err(parse_error(path, no, format!("face index {idx} out of range ({n} vertices so far)")));
                    }
                    face[k] = resolved as usize;
                }
                mesh.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    parse_obj(&read_text(path)?, path)
}

/// Vertices in shortest round-trip form; faces 1-based.
pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    mesh.validate()?;
    write_atomic(path, |w| {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &mesh.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    })
}
