//! Ingestion of externally produced (possibly overlapping) binary masks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};

/// A one-id-per-pixel region raster.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRaster {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<i32>,
    pub region_count: usize,
    /// Input mask index of each output region id.
    pub source: Vec<usize>,
}

/// Flattens binary masks into a partition. Where masks overlap, the mask
/// with the smallest area wins (ties by lower input index). Masks that end
/// up owning no pixel are dropped; surviving masks are renumbered `0..`
/// in input order.
pub fn resolve_overlaps(width: usize, height: usize, masks: &[Vec<bool>]) -> Result<MaskRaster> {
    let pixels = width * height;
    if let Some((i, m)) = masks.iter().enumerate().find(|(_, m)| m.len() != pixels) {
        return Err(Error::DimensionMismatch(format!(
            "mask {i} has {} pixels, raster has {pixels}",
            m.len()
        )));
    }
    let area: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by_key(|&i| (area[i], i));

    let mut owner = vec![usize::MAX; pixels];
    for &i in order.iter().rev() {
        for (p, _) in masks[i].iter().enumerate().filter(|(_, &b)| b) {
            owner[p] = i;
        }
    }

    let mut remap = vec![-1i32; masks.len()];
    let mut source = Vec::new();
    for i in 0..masks.len() {
        if owner.contains(&i) {
            remap[i] = source.len() as i32;
            source.push(i);
        }
    }
    let ids = owner
        .into_iter()
        .map(|o| if o == usize::MAX { -1 } else { remap[o] })
        .collect();
    Ok(MaskRaster {
        width,
        height,
        ids,
        region_count: source.len(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct StackManifest {
    width: usize,
    height: usize,
    count: usize,
}

/// Writes a mask stack: `masks.json` plus an `i32` blob of 0/1 values with
/// shape `[count, height, width]`.
pub fn write_mask_stack(dir: &Path, width: usize, height: usize, masks: &[Vec<bool>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let flat: Vec<i32> = masks.iter().flatten().map(|&b| i32::from(b)).collect();
    if flat.len() != masks.len() * width * height {
        return Err(Error::DimensionMismatch("mask sizes do not match the raster".into()));
    }
    blob::write_i32(&dir.join("masks.bin"), &flat)?;
    blob::write_manifest(
        &dir.join("masks.json"),
        &StackManifest {
            width,
            height,
            count: masks.len(),
        },
    )
}

/// Reads a mask stack and resolves it into a [`MaskRaster`].
pub fn read_mask_stack(dir: &Path) -> Result<MaskRaster> {
    let m: StackManifest = blob::read_manifest(&dir.join("masks.json"))?;
    let pixels = m.width * m.height;
    let flat = blob::read_i32(&dir.join("masks.bin"), m.count * pixels)?;
    let masks: Vec<Vec<bool>> = if pixels == 0 {
        vec![Vec::new(); m.count]
    } else {
        flat.chunks_exact(pixels).map(|c| c.iter().map(|&v| v != 0).collect()).collect()
    };
    resolve_overlaps(m.width, m.height, &masks)
}
