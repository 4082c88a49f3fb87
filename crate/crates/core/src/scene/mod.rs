//! Synthetic scenes: camera model, generator, mask ingestion, and the
//! on-disk bundle format.

pub mod camera;
mod generate;
mod ingest;
mod io;

pub use camera::{project, Camera, Pixel, Pose};
pub use generate::{
    generate_dataset, generate_scene, n_object_types, object_point_count, type_prototypes, type_weights,
    FeatureField, Layout, ObjectShape, SceneSpec, OBJECT_SHAPES,
};
pub use ingest::{read_mask_stack, resolve_overlaps, write_mask_stack, MaskRaster};
pub use io::{read_bundle, write_bundle};

use crate::error::{Error, Result};

/// Everything known about one frame: points, camera, ground truth, the
/// region mask raster, and the 2D feature raster.
///
/// Rasters are row-major over `camera.height x camera.width`; `feat2d` holds
/// `feature_dim` values per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub points: Vec<[f32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub camera: Camera,
    pub gt_region: Vec<i32>,
    pub mask: Vec<i32>,
    pub feat2d: Vec<f32>,
    pub feature_dim: usize,
    pub region_count: usize,
    /// Object type of each region; indexes [`OBJECT_SHAPES`].
    pub region_types: Vec<u32>,
    pub noise_sigma: f64,
}

impl SceneBundle {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i].map(f64::from)
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.map(f64::from)).collect()
    }

    /// Mask id under each point, or `None` for behind/outside points.
    pub fn point_mask_ids(&self) -> Result<Vec<Option<i32>>> {
        let pixels = project(&self.points_f64(), &self.camera)?;
        Ok(pixels
            .into_iter()
            .map(|px| {
                px.cell(self.width(), self.height())
                    .map(|(c, r)| self.mask[r * self.width() + c])
            })
            .collect())
    }

    /// Feature vector of the pixel at raster index `pix`.
    pub fn pixel_feature(&self, pix: usize) -> &[f32] {
        &self.feat2d[pix * self.feature_dim..(pix + 1) * self.feature_dim]
    }

    /// Object type of ground-truth region `r`, if `r` is a region.
    pub fn region_type(&self, r: i32) -> Option<u32> {
        usize::try_from(r).ok().and_then(|r| self.region_types.get(r).copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::DimensionMismatch("bundle has no points".into()));
        }
        self.camera.validate()?;
        let n = self.points.len();
        if self.gt_region.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} gt labels for {n} points",
                self.gt_region.len()
            )));
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(Error::DimensionMismatch(format!("{} colors for {n} points", c.len())));
            }
            if c.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput("colors must lie in [0, 1]".into()));
            }
        }
        let pixels = self.width() * self.height();
        if self.mask.len() != pixels {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} cells, raster has {pixels}",
                self.mask.len()
            )));
        }
        if self.feat2d.len() != pixels * self.feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "feat2d has {} values, expected {}",
                self.feat2d.len(),
                pixels * self.feature_dim
            )));
        }
        if self.region_types.len() != self.region_count {
            return Err(Error::DimensionMismatch(format!(
                "{} region types for {} regions",
                self.region_types.len(),
                self.region_count
            )));
        }
        let rc = self.region_count as i32;
        if let Some(bad) = self.mask.iter().find(|&&id| id < -1 || id >= rc) {
            return Err(Error::Inconsistency(format!("mask id {bad} outside [-1, {rc})")));
        }
        if let Some(bad) = self.gt_region.iter().find(|&&id| id < -1 || id >= rc) {
            return Err(Error::Inconsistency(format!("gt region {bad} outside [-1, {rc})")));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite point coordinate".into()));
        }
        if self.feat2d.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(())
    }
}
