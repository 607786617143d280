//! Dataset directories.
//!
//! ```text
//! DIR/dataset.cfg       n_points=…, shapes=…
//! DIR/shapes.csv        shape_id,family,mesh,cloud (paths relative to DIR)
//! DIR/shapes/NNNN.obj   mesh
//! DIR/shapes/NNNN.ply   master cloud, double positions, uchar `substructure` mask
//! ```
//!
//! All coordinates are written losslessly, so a saved dataset loads back equal.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ShapeId};
use crate::synth::{Dataset, DatasetRecord};

use super::{parse_error, read_csv, read_key_values, read_ply, write_csv, write_key_values, write_obj, write_ply, PlyData, PlyType};

const MASK: &str = "substructure";
const HEADER: [&str; 4] = ["shape_id", "family", "mesh", "cloud"];

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let shapes = dir.join("shapes");
    fs::create_dir_all(&shapes).map_err(|e| Error::io(&shapes, e))?;
    let mut rows = Vec::with_capacity(dataset.len());
    for (i, r) in dataset.records.iter().enumerate() {
        let mesh = format!("shapes/{i:04}.obj");
        let cloud = format!("shapes/{i:04}.ply");
        write_obj(&dir.join(&mesh), &r.mesh)?;
        let mask = r.substructure_mask.iter().map(|&m| m as u8 as f64).collect();
        write_ply(
            &dir.join(&cloud),
            &PlyData::new(r.master_cloud.points.clone(), PlyType::Double).with(MASK, PlyType::UChar, mask),
        )?;
        rows.push(vec![r.shape_id.0.clone(), r.family_name.clone(), mesh, cloud]);
    }
    write_csv(&dir.join("shapes.csv"), &HEADER, &rows)?;
    write_key_values(
        &dir.join("dataset.cfg"),
        &[
            ("n_points".into(), dataset.n_points.to_string()),
            ("shapes".into(), dataset.len().to_string()),
        ],
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cfg_path = dir.join("dataset.cfg");
    let (mut n_points, mut shapes) = (None, None);
    for (k, v, line) in read_key_values(&cfg_path)? {
        let parsed: usize = v.parse().map_err(|_| parse_error(&cfg_path, line, format!("`{k}` must be a count")))?;
        match k.as_str() {
            "n_points" => n_points = Some(parsed),
            "shapes" => shapes = Some(parsed),
            _ => return Err(parse_error(&cfg_path, line, format!("unknown key `{k}`"))),
        }
    }
    let missing = |k: &str| parse_error(&cfg_path, 0, format!("missing `{k}`"));
    let n_points = n_points.ok_or_else(|| missing("n_points"))?;
    let shapes = shapes.ok_or_else(|| missing("shapes"))?;

    let index = dir.join("shapes.csv");
    let (header, rows) = read_csv(&index)?;
    if header != HEADER {
        return Err(parse_error(&index, 1, format!("expected header {}", HEADER.join(","))));
    }
    if rows.len() != shapes {
        return Err(parse_error(&index, rows.len() + 1, format!("{} rows, dataset.cfg declares {shapes}", rows.len())));
    }
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let [id, family, mesh, cloud] = row.as_slice() else {
            return Err(parse_error(&index, i + 2, "expected four fields"));
        };
        let ply = read_ply(&dir.join(cloud))?;
        let mask = ply
            .property(MASK)
            .ok_or_else(|| parse_error(&dir.join(cloud), 0, format!("missing `{MASK}` property")))?
            .iter()
            .map(|&m| m != 0.0)
            .collect();
        records.push(DatasetRecord {
            shape_id: ShapeId(id.clone()),
            family_name: family.clone(),
            mesh: super::read_obj(&dir.join(mesh))?,
            master_cloud: PointCloud::new(ply.points, id.as_str())?,
            substructure_mask: mask,
        });
    }
    let dataset = Dataset { records, n_points };
    dataset.validate()?;
    Ok(dataset)
}
