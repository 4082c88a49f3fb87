//! Region-level 2D to 3D feature distillation with group-balanced loss
//! weights.

pub mod kmeans;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{Error, Result};
use crate::scene::SceneBundle;
use crate::nn::{embed_tokens, encode, pos_embed, project_3d, Bound, TokenInputs};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenize::{TokenMode, TokenSet};

pub use kmeans::{kmeans, nearest, KMeans};

pub const DEFAULT_K_GROUPS: usize = 16;
pub const DEFAULT_SMOOTH_L1_BETA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

/// Pooled 2D features, one row per token, aligned with the token order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures2D {
    pub features: Tensor,
    pub pooling: Pooling,
    pub region_ids: Vec<i32>,
}

/// Mask region each token distills from. Mask-guided tokens carry their
/// region; a KNN token takes the region under its FPS center point, or
/// `None` when that point falls outside every mask.
pub fn token_regions(bundle: &SceneBundle, tokens: &TokenSet) -> Result<Vec<Option<i32>>> {
    match tokens.mode {
        TokenMode::SamGuided => Ok(tokens.tokens.iter().map(|t| Some(t.region_id)).collect()),
        TokenMode::KnnBaseline => {
            let ids = bundle.point_mask_ids()?;
            tokens
                .tokens
                .iter()
                .map(|t| {
                    let c = t.center_index.ok_or_else(|| {
                        Error::Inconsistency("KNN token without a center point".into())
                    })?;
                    Ok(ids.get(c).copied().flatten().filter(|&r| r >= 0))
                })
                .collect()
        }
    }
}

/// Pools `feat2d` over the pixels of each region in `regions`.
pub fn pool_regions(bundle: &SceneBundle, regions: &[i32], pooling: Pooling) -> Result<RegionFeatures2D> {
    let l = bundle.feature_dim;
    let mut acc = vec![
        match pooling {
            Pooling::Mean => 0.0,
            Pooling::Max => f64::NEG_INFINITY,
        };
        regions.len() * l
    ];
    let mut counts = vec![0usize; regions.len()];
    // region id -> rows that request it
    let mut rows_of = vec![Vec::new(); bundle.region_count];
    for (row, &r) in regions.iter().enumerate() {
        let slot = usize::try_from(r).ok().and_then(|r| rows_of.get_mut(r)).ok_or_else(|| {
            Error::Inconsistency(format!("region {r} is not in the mask raster"))
        })?;
        slot.push(row);
    }
    for (pix, &id) in bundle.mask.iter().enumerate() {
        let Some(rows) = usize::try_from(id).ok().and_then(|r| rows_of.get(r)) else {
            continue;
        };
        let f = bundle.pixel_feature(pix);
        for &row in rows {
            counts[row] += 1;
            let dst = &mut acc[row * l..(row + 1) * l];
            for (a, &v) in dst.iter_mut().zip(f) {
                match pooling {
                    Pooling::Mean => *a += f64::from(v),
                    Pooling::Max => *a = a.max(f64::from(v)),
                }
            }
        }
    }
    for (row, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Inconsistency(format!(
                "region {} has no masked pixels",
                regions[row]
            )));
        }
        if pooling == Pooling::Mean {
            acc[row * l..(row + 1) * l].iter_mut().for_each(|a| *a /= c as f64);
        }
    }
    Ok(RegionFeatures2D {
        features: Tensor::matrix(regions.len(), l, acc),
        pooling,
        region_ids: regions.to_vec(),
    })
}

/// Pools the 2D features of each mask-guided token's region.
pub fn pool_region_features(bundle: &SceneBundle, tokens: &TokenSet, pooling: Pooling) -> Result<RegionFeatures2D> {
    if tokens.mode != TokenMode::SamGuided {
        return Err(Error::InvalidInput("region pooling needs mask-guided tokens".into()));
    }
    let regions: Vec<i32> = tokens.tokens.iter().map(|t| t.region_id).collect();
    pool_regions(bundle, &regions, pooling)
}

/// Per-group loss weights from group sizes:
/// `k = (n - n_min) / n_max`, `tau = 1 - k`, `w = tau / sum(tau)`.
pub fn group_weights(counts: &[usize]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n_max = counts.iter().copied().max().unwrap_or(0);
    if n_max == 0 {
        return Err(Error::InvalidInput("group counts must include a nonempty group".into()));
    }
    let n_min = counts.iter().copied().min().unwrap_or(0);
    let k: Vec<f64> = counts.iter().map(|&n| (n - n_min) as f64 / n_max as f64).collect();
    let tau: Vec<f64> = k.iter().map(|k| 1.0 - k).collect();
    let total: f64 = tau.iter().sum();
    let w = tau.iter().map(|t| t / total).collect();
    Ok((k, tau, w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub k_groups: usize,
    pub seed: u64,
    /// Group of every region the table was built from, in input order.
    pub group_of_region: Vec<usize>,
    pub counts: Vec<usize>,
    pub k: Vec<f64>,
    pub tau: Vec<f64>,
    pub w: Vec<f64>,
    #[serde(skip)]
    pub centroids: Vec<Vec<f64>>,
}

impl WeightTable {
    /// Clusters max-pooled region features and derives group weights.
    pub fn build(features: &[Vec<f64>], k_groups: usize, seed: u64) -> Result<Self> {
        let km = kmeans(features, k_groups, seed)?;
        let mut counts = vec![0; k_groups];
        for &a in &km.assignment {
            counts[a] += 1;
        }
        let (k, tau, w) = group_weights(&counts)?;
        Ok(Self {
            k_groups,
            seed,
            group_of_region: km.assignment,
            counts,
            k,
            tau,
            w,
            centroids: km.centroids,
        })
    }

    /// Group whose centroid is nearest to `feature`.
    pub fn group_of(&self, feature: &[f64]) -> Result<usize> {
        if self.centroids.is_empty() || self.centroids[0].len() != feature.len() {
            return Err(Error::Inconsistency(format!(
                "feature of width {} cannot be matched to the weight table",
                feature.len()
            )));
        }
        Ok(nearest(&self.centroids, feature))
    }

    /// Groups with the fewest members.
    pub fn tail_groups(&self) -> Vec<usize> {
        let min = self.counts.iter().copied().min().unwrap_or(0);
        (0..self.k_groups).filter(|&g| self.counts[g] == min).collect()
    }

    /// Writes `weights.json` and `centroids.bin` (`[K, width]` f64).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let flat: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        blob::write_f64(&dir.join("centroids.bin"), &flat)?;
        blob::write_manifest(&dir.join("weights.json"), &StoredTable {
            width: self.centroids.first().map_or(0, Vec::len),
            table: self.clone(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let s: StoredTable = blob::read_manifest(&dir.join("weights.json"))?;
        let mut t = s.table;
        let flat = blob::read_f64(&dir.join("centroids.bin"), t.k_groups * s.width)?;
        t.centroids = if s.width == 0 {
            vec![Vec::new(); t.k_groups]
        } else {
            flat.chunks_exact(s.width).map(<[f64]>::to_vec).collect()
        };
        if t.counts.len() != t.k_groups || t.w.len() != t.k_groups {
            return Err(Error::DimensionMismatch("weight table arrays disagree with K".into()));
        }
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTable {
    width: usize,
    #[serde(flatten)]
    table: WeightTable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    /// Multiply weights by K so the mean weight is one.
    #[default]
    MeanOne,
    /// Use the normalized weights as they are.
    PaperLiteral,
}

impl fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleMode::MeanOne => "mean-one",
            ScaleMode::PaperLiteral => "paper-literal",
        })
    }
}

impl FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-one" => Ok(ScaleMode::MeanOne),
            "paper-literal" => Ok(ScaleMode::PaperLiteral),
            other => Err(Error::InvalidInput(format!("unknown scale mode `{other}`"))),
        }
    }
}

/// Per-region loss coefficients `s * w[group]`. In mean-one mode this is
/// evaluated as `tau[group] / mean(tau)`, which equals `K * w[group]` and
/// is exactly 1 when all groups have the same size.
pub fn region_coefficients(table: &WeightTable, groups: &[usize], mode: ScaleMode) -> Result<Vec<f64>> {
    let mean_tau = table.tau.iter().sum::<f64>() / table.k_groups as f64;
    groups
        .iter()
        .map(|&g| {
            if g >= table.k_groups {
                return Err(Error::Inconsistency(format!("group {g} outside the weight table")));
            }
            Ok(match mode {
                ScaleMode::MeanOne => table.tau[g] / mean_tau,
                ScaleMode::PaperLiteral => table.w[g],
            })
        })
        .collect()
}

/// `(1/M) * sum_i c_i * smooth_l1(F_2D[i], F_3D[i])`, with `c_i` the
/// per-region coefficients (all ones for the unweighted loss).
pub fn stage1_loss(tape: &Tape, f2d: Var, f3d: Var, coefficients: &[f64], beta: f64) -> Result<Var> {
    let m = tape.shape(f3d)[0];
    if coefficients.len() != m || m == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} loss coefficients for {m} regions",
            coefficients.len()
        )));
    }
    let rows = tape.smooth_l1_rows(f3d, f2d, beta)?;
    let c: Vec<f64> = coefficients.iter().map(|c| c / m as f64).collect();
    tape.weighted_sum(rows, &c)
}

/// Encoder over all tokens followed by the projection head: `F_3D`.
pub fn forward_3d(p: &Bound, inputs: &TokenInputs) -> Result<Var> {
    let tape = p.tape;
    let x = tape.add(embed_tokens(p, inputs)?, pos_embed(p, &inputs.centroids)?)?;
    project_3d(p, encode(p, x)?)
}

#[cfg(test)]
mod tests;
