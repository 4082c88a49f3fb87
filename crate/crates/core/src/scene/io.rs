use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Camera, SceneBundle};
use crate::blob;
use crate::error::{Error, Result};

const FORMAT: &str = "s3d-bundle";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct BlobEntry {
    file: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    region_count: usize,
    feature_dim: usize,
    noise_sigma: f64,
    region_types: Vec<u32>,
    camera: Camera,
    blobs: BTreeMap<String, BlobEntry>,
}

fn entry(file: &str, dtype: &str, shape: Vec<usize>) -> BlobEntry {
    BlobEntry {
        file: file.to_string(),
        dtype: dtype.to_string(),
        shape,
    }
}

/// Writes `bundle` as a directory: `manifest.json` plus one blob per array.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let (n, h, w, l) = (bundle.n_points(), bundle.height(), bundle.width(), bundle.feature_dim);

    let mut blobs = BTreeMap::new();
    blobs.insert("points".into(), entry("points.bin", "f32", vec![n, 3]));
    blobs.insert("gt_region".into(), entry("gt_region.bin", "i32", vec![n]));
    blobs.insert("mask".into(), entry("mask.bin", "i32", vec![h, w]));
    blobs.insert("feat2d".into(), entry("feat2d.bin", "f32", vec![h, w, l]));
    if bundle.colors.is_some() {
        blobs.insert("colors".into(), entry("colors.bin", "f32", vec![n, 3]));
    }

    let flat = |v: &[[f32; 3]]| v.iter().flatten().copied().collect::<Vec<f32>>();
    blob::write_f32(&dir.join("points.bin"), &flat(&bundle.points))?;
    if let Some(c) = &bundle.colors {
        blob::write_f32(&dir.join("colors.bin"), &flat(c))?;
    }
    blob::write_i32(&dir.join("gt_region.bin"), &bundle.gt_region)?;
    blob::write_i32(&dir.join("mask.bin"), &bundle.mask)?;
    blob::write_f32(&dir.join("feat2d.bin"), &bundle.feat2d)?;

    let manifest = Manifest {
        format: FORMAT.into(),
        version: blob::VERSION,
        region_count: bundle.region_count,
        feature_dim: l,
        noise_sigma: bundle.noise_sigma,
        region_types: bundle.region_types.clone(),
        camera: bundle.camera.clone(),
        blobs,
    };
    blob::write_manifest(&dir.join(MANIFEST), &manifest)
}

fn lookup<'a>(m: &'a Manifest, path: &Path, name: &str, dtype: &str) -> Result<&'a BlobEntry> {
    let e = m.blobs.get(name).ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("missing blob `{name}`"),
    })?;
    if e.dtype != dtype {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("blob `{name}` has dtype {}, expected {dtype}", e.dtype),
        });
    }
    Ok(e)
}

fn triples(flat: Vec<f32>) -> Vec<[f32; 3]> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let mpath = dir.join(MANIFEST);
    let m: Manifest = blob::read_manifest(&mpath)?;
    if m.format != FORMAT || m.version != blob::VERSION {
        return Err(Error::MalformedHeader {
            path: mpath,
            reason: format!("unsupported format {} v{}", m.format, m.version),
        });
    }

    let points = lookup(&m, &mpath, "points", "f32")?;
    let gt = lookup(&m, &mpath, "gt_region", "i32")?;
    let mask = lookup(&m, &mpath, "mask", "i32")?;
    let feat = lookup(&m, &mpath, "feat2d", "f32")?;

    let (h, w) = (m.camera.height, m.camera.width);
    if points.shape.len() != 2 || points.shape[1] != 3 {
        return Err(Error::DimensionMismatch(format!("points shape {:?}", points.shape)));
    }
    let n = points.shape[0];
    if gt.shape != [n] {
        return Err(Error::DimensionMismatch(format!(
            "gt_region shape {:?} vs {n} points",
            gt.shape
        )));
    }
    if mask.shape != [h, w] {
        return Err(Error::DimensionMismatch(format!(
            "mask shape {:?} vs camera raster [{h}, {w}]",
            mask.shape
        )));
    }
    if feat.shape.len() != 3 || feat.shape[..2] != mask.shape[..] {
        return Err(Error::DimensionMismatch(format!(
            "feat2d shape {:?} vs mask shape {:?}",
            feat.shape, mask.shape
        )));
    }
    if feat.shape[2] != m.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "feat2d depth {} vs feature_dim {}",
            feat.shape[2], m.feature_dim
        )));
    }

    let colors = match m.blobs.get("colors") {
        Some(_) => {
            let c = lookup(&m, &mpath, "colors", "f32")?;
            if c.shape != [n, 3] {
                return Err(Error::DimensionMismatch(format!("colors shape {:?}", c.shape)));
            }
            Some(triples(blob::read_f32(&dir.join(&c.file), n * 3)?))
        }
        None => None,
    };

    let bundle = SceneBundle {
        points: triples(blob::read_f32(&dir.join(&points.file), n * 3)?),
        colors,
        gt_region: blob::read_i32(&dir.join(&gt.file), n)?,
        mask: blob::read_i32(&dir.join(&mask.file), h * w)?,
        feat2d: blob::read_f32(&dir.join(&feat.file), h * w * m.feature_dim)?,
        camera: m.camera,
        feature_dim: m.feature_dim,
        region_count: m.region_count,
        region_types: m.region_types,
        noise_sigma: m.noise_sigma,
    };
    bundle.validate()?;
    Ok(bundle)
}
