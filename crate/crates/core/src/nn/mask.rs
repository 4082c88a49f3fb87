use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

const MASK_STREAM: u64 = 0x6d61_736b;

/// Partition of `M` token positions into visible and masked, both sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Everything visible.
    pub fn none(m: usize) -> Self {
        Self {
            visible: (0..m).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }
}

/// Masks `round(ratio * m)` positions chosen uniformly without replacement.
/// The choice depends only on `(seed, scene_id, epoch)`.
pub fn make_mask_plan(m: usize, ratio: f64, seed: u64, scene_id: u64, epoch: u64) -> Result<MaskPlan> {
    if m == 0 {
        return Err(Error::InvalidInput("mask plan needs at least one token".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("mask ratio {ratio} not in [0, 1)")));
    }
    let n_masked = (ratio * m as f64).round() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut seed::stream(seed, &[MASK_STREAM, scene_id, epoch]));
    let mut masked = order[..n_masked].to_vec();
    let mut visible = order[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked, ratio })
}
