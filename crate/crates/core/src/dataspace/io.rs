//! Line-delimited instance files.
//!
//! The first line is a header
//! `{"schema":"vsd-instances","version":1,"n_regions":9,"feature_dim":32}`
//! optionally naming a companion `features_file` (relative to the instance
//! file). Every further line is one record:
//!
//! ```text
//! {"id":"s0-0","scene":0,"features":[[...],...] | {"offset":BYTES},
//!  "o1":{"tag":"red car","bbox":[x0,y0,x1,y1]},"o2":{...},
//!  "relation":"to_the_left_of","description":"the red car is ...","split":"train"}
//! ```
//!
//! Companion files hold little-endian `f64` matrices, row-major.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::describe::MAX_DESCRIPTION_TOKENS;
use super::features::RegionFeatures;
use super::geometry::BBox;
use super::instance::{ObjectAnnotation, Split, VsdInstance};
use super::relation::SpatialRelation;
use crate::error::{Result, VsdError};
use crate::numerics::Tensor;

pub const SCHEMA_NAME: &str = "vsd-instances";
pub const SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// Features go to `<file stem>.features.bin` next to the instance file.
    Companion,
}

pub fn companion_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("instances");
    path.with_file_name(format!("{stem}.features.bin"))
}

pub fn save_instances(path: &Path, instances: &[VsdInstance], storage: FeatureStorage) -> Result<()> {
    let (n_regions, dim) = match instances.first() {
        Some(i) => (i.features.n_regions(), i.features.dim()),
        None => (0, 0),
    };
    if let Some(bad) = instances
        .iter()
        .find(|i| i.features.n_regions() != n_regions || i.features.dim() != dim)
    {
        return Err(VsdError::InvalidInput(format!(
            "instance {} has features {:?}, expected [{n_regions}, {dim}]",
            bad.id,
            bad.features.features.shape()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| VsdError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| VsdError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = json!({
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "n_regions": n_regions,
        "feature_dim": dim,
    });
    let mut bin = None;
    if storage == FeatureStorage::Companion {
        let cp = companion_path(path);
        let name = cp.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        header["features_file"] = Value::String(name);
        let f = fs::File::create(&cp).map_err(|e| VsdError::io(&cp, e))?;
        bin = Some((cp, BufWriter::new(f), 0u64));
    }
    let w = |out: &mut BufWriter<fs::File>, v: &Value| -> Result<()> {
        serde_json::to_writer(&mut *out, v)?;
        out.write_all(b"\n").map_err(|e| VsdError::io(path, e))
    };
    w(&mut out, &header)?;
    for inst in instances {
        let features = match &mut bin {
            Some((cp, bw, offset)) => {
                let here = *offset;
                for v in inst.features.features.data() {
                    bw.write_all(&v.to_le_bytes()).map_err(|e| VsdError::io(&*cp, e))?;
                }
                *offset += 8 * inst.features.features.len() as u64;
                json!({ "offset": here })
            }
            None => {
                let rows: Vec<&[f64]> = (0..n_regions).map(|r| inst.features.region(r)).collect();
                json!(rows)
            }
        };
        let record = json!({
            "id": inst.id,
            "scene": inst.scene,
            "features": features,
            "o1": { "tag": inst.o1.tag, "bbox": inst.o1.bbox.to_array() },
            "o2": { "tag": inst.o2.tag, "bbox": inst.o2.bbox.to_array() },
            "relation": inst.relation.name(),
            "description": inst.description.join(" "),
            "split": inst.split.map(|s| s.name()),
        });
        w(&mut out, &record)?;
    }
    out.flush().map_err(|e| VsdError::io(path, e))?;
    if let Some((cp, mut bw, _)) = bin {
        bw.flush().map_err(|e| VsdError::io(&cp, e))?;
    }
    Ok(())
}

struct Ctx<'a> {
    path: &'a str,
    line: usize,
}

impl Ctx<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> VsdError {
        VsdError::Schema {
            path: self.path.to_string(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, field: &str, full: &str) -> Result<&'v Value> {
        obj.get(field).ok_or_else(|| self.err(full, "missing"))
    }

    fn string(&self, obj: &Map<String, Value>, field: &str, full: &str) -> Result<String> {
        self.get(obj, field, full)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(full, "expected a string"))
    }

    fn uint(&self, obj: &Map<String, Value>, field: &str, full: &str) -> Result<u64> {
        self.get(obj, field, full)?
            .as_u64()
            .ok_or_else(|| self.err(full, "expected a non-negative integer"))
    }

    fn object(&self, obj: &Map<String, Value>, field: &str, full: &str) -> Result<ObjectAnnotation> {
        let o = self
            .get(obj, field, full)?
            .as_object()
            .ok_or_else(|| self.err(full, "expected an object"))?;
        let tag = self.string(o, "tag", &format!("{full}.tag"))?;
        if tag.split_whitespace().next().is_none() {
            return Err(self.err(&format!("{full}.tag"), "empty tag"));
        }
        let bf = format!("{full}.bbox");
        let coords: Vec<f64> = self
            .get(o, "bbox", &bf)?
            .as_array()
            .ok_or_else(|| self.err(&bf, "expected an array of 4 numbers"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| self.err(&bf, "expected numbers")))
            .collect::<Result<_>>()?;
        let arr: [f64; 4] = coords
            .try_into()
            .map_err(|_| self.err(&bf, "expected exactly 4 coordinates"))?;
        let bbox = BBox::try_from(arr).map_err(|e| self.err(&bf, e.to_string()))?;
        Ok(ObjectAnnotation { tag, bbox })
    }
}

fn read_companion(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| VsdError::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(VsdError::Schema {
            path: path.display().to_string(),
            line: 0,
            field: "features_file".into(),
            message: format!("length {} is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Reads and validates an instance file. Errors name the 1-based line and
/// the offending field.
pub fn load_external(path: &Path) -> Result<Vec<VsdInstance>> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| VsdError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Ctx { path: &display, line: 1 }.err("schema", "empty file, header line required"))?
        .map_err(|e| VsdError::io(path, e))?;
    let hc = Ctx { path: &display, line: 1 };
    let header: Value =
        serde_json::from_str(&header_line).map_err(|e| hc.err("header", e.to_string()))?;
    let header = header.as_object().ok_or_else(|| hc.err("header", "expected an object"))?;
    if hc.string(header, "schema", "schema")? != SCHEMA_NAME {
        return Err(hc.err("schema", format!("expected `{SCHEMA_NAME}`")));
    }
    let version = hc.uint(header, "version", "version")?;
    if version != SCHEMA_VERSION {
        return Err(hc.err("version", format!("unsupported version {version}")));
    }
    let n_regions = hc.uint(header, "n_regions", "n_regions")? as usize;
    let dim = hc.uint(header, "feature_dim", "feature_dim")? as usize;
    let companion = match header.get("features_file") {
        None | Some(Value::Null) => None,
        Some(Value::String(name)) => {
            let cp = path.with_file_name(name);
            Some(read_companion(&cp)?)
        }
        Some(_) => return Err(hc.err("features_file", "expected a string")),
    };

    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| VsdError::io(path, e))?;
        let ctx = Ctx { path: &display, line: k + 2 };
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| ctx.err("record", e.to_string()))?;
        let rec = v.as_object().ok_or_else(|| ctx.err("record", "expected an object"))?;
        let id = ctx.string(rec, "id", "id")?;
        let scene = match rec.get("scene") {
            None | Some(Value::Null) => out.len() as u64,
            Some(s) => s.as_u64().ok_or_else(|| ctx.err("scene", "expected a non-negative integer"))?,
        };
        let fv = ctx.get(rec, "features", "features")?;
        let data: Vec<f64> = match fv {
            Value::Array(rows) => {
                if rows.len() != n_regions {
                    return Err(ctx.err("features", format!("expected {n_regions} rows, got {}", rows.len())));
                }
                let mut data = Vec::with_capacity(n_regions * dim);
                for (r, row) in rows.iter().enumerate() {
                    let row = row
                        .as_array()
                        .filter(|a| a.len() == dim)
                        .ok_or_else(|| ctx.err(&format!("features[{r}]"), format!("expected {dim} numbers")))?;
                    for x in row {
                        data.push(x.as_f64().ok_or_else(|| ctx.err(&format!("features[{r}]"), "expected numbers"))?);
                    }
                }
                data
            }
            Value::Object(o) => {
                let off = ctx.uint(o, "offset", "features.offset")? as usize;
                let bin = companion
                    .as_ref()
                    .ok_or_else(|| ctx.err("features.offset", "no features_file declared in header"))?;
                if off % 8 != 0 {
                    return Err(ctx.err("features.offset", "offset must be a multiple of 8"));
                }
                let start = off / 8;
                bin.get(start..start + n_regions * dim)
                    .ok_or_else(|| ctx.err("features.offset", "offset past end of features file"))?
                    .to_vec()
            }
            _ => return Err(ctx.err("features", "expected an array or {\"offset\": n}")),
        };
        let features = Tensor::matrix(n_regions, dim, data)
            .and_then(RegionFeatures::new)
            .map_err(|e| ctx.err("features", e.to_string()))?;
        let o1 = ctx.object(rec, "o1", "o1")?;
        let o2 = ctx.object(rec, "o2", "o2")?;
        let relation: SpatialRelation = ctx
            .string(rec, "relation", "relation")?
            .parse()
            .map_err(|e: VsdError| ctx.err("relation", e.to_string()))?;
        let description: Vec<String> = ctx
            .string(rec, "description", "description")?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if description.is_empty() || description.len() > MAX_DESCRIPTION_TOKENS {
            return Err(ctx.err(
                "description",
                format!("length {} outside 1..={MAX_DESCRIPTION_TOKENS}", description.len()),
            ));
        }
        let split = match rec.get("split") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.parse::<Split>().map_err(|e| ctx.err("split", e.to_string()))?),
            Some(_) => return Err(ctx.err("split", "expected a string or null")),
        };
        out.push(VsdInstance {
            id,
            scene,
            features,
            o1,
            o2,
            relation,
            description,
            split,
        });
    }
    Ok(out)
}
