//! Model zoo: point-patch embedder, centroid positional embedding,
//! pre-norm transformer encoder/decoder, heads, and parameter management.

mod checkpoint;
mod mask;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use mask::{make_mask_plan, MaskPlan};
pub use model::{
    decode, embed_tokens, encode, linear, pos_embed, predictor, project_3d, TokenInputs,
};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Grads, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Arch {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub pointnet_hidden: usize,
    pub max_points_per_token: usize,
    /// Width of the 2D features the projection head maps onto.
    pub feat2d_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 1,
            pointnet_hidden: 64,
            max_points_per_token: 128,
            feat2d_dim: 32,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidInput(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.pointnet_hidden == 0 || self.max_points_per_token == 0 || self.feat2d_dim == 0 {
            return Err(Error::InvalidInput("zero-sized architecture dimension".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (l, h, l2) = (self.embed_dim, self.pointnet_hidden, self.feat2d_dim);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("pn.w1".into(), vec![3, h]),
            ("pn.b1".into(), vec![1, h]),
            ("pn.w2".into(), vec![h, l]),
            ("pn.b2".into(), vec![1, l]),
            ("pos.w1".into(), vec![3, l]),
            ("pos.b1".into(), vec![1, l]),
            ("pos.w2".into(), vec![l, l]),
            ("pos.b2".into(), vec![1, l]),
        ];
        for (stack, layers) in [("enc", self.n_enc_layers), ("dec", self.n_dec_layers)] {
            for i in 0..layers {
                let p = format!("{stack}.{i}");
                out.extend([
                    (format!("{p}.ln1.g"), vec![1, l]),
                    (format!("{p}.ln1.b"), vec![1, l]),
                    (format!("{p}.attn.wq"), vec![l, l]),
                    (format!("{p}.attn.wk"), vec![l, l]),
                    (format!("{p}.attn.wv"), vec![l, l]),
                    (format!("{p}.attn.wo"), vec![l, l]),
                    (format!("{p}.attn.bo"), vec![1, l]),
                    (format!("{p}.ln2.g"), vec![1, l]),
                    (format!("{p}.ln2.b"), vec![1, l]),
                    (format!("{p}.mlp.w1"), vec![l, 2 * l]),
                    (format!("{p}.mlp.b1"), vec![1, 2 * l]),
                    (format!("{p}.mlp.w2"), vec![2 * l, l]),
                    (format!("{p}.mlp.b2"), vec![1, l]),
                ]);
            }
            if layers > 0 {
                out.push((format!("{stack}.ln.g"), vec![1, l]));
                out.push((format!("{stack}.ln.b"), vec![1, l]));
            }
        }
        out.extend([
            ("mask_query".into(), vec![1, l]),
            ("proj.w".into(), vec![l, l2]),
            ("proj.b".into(), vec![1, l2]),
            ("pred.w1".into(), vec![l, l]),
            ("pred.b1".into(), vec![1, l]),
            ("pred.w2".into(), vec![l, l]),
            ("pred.b2".into(), vec![1, l]),
        ]);
        out
    }
}

/// Whether weight decay applies: not to norm gains, biases, or the mask query.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(name == "mask_query" || matches!(last, "g" | "b" | "b1" | "b2" | "bo"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
}

/// Named parameter collection for the whole model family.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub params: BTreeMap<String, Param>,
}

impl ModelParams {
    /// Deterministic initialization keyed by `seed` and each parameter's name.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in arch.layout() {
            let mut rng = seed::stream(seed, &[name_key(&name)]);
            let n: usize = shape.iter().product();
            let last = name.rsplit('.').next().unwrap_or(&name);
            let data: Vec<f64> = if name == "mask_query" {
                (0..n).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect()
            } else if name.starts_with("pos.") && name.ends_with('2') {
                // zero final layer: no positional contribution at init
                vec![0.0; n]
            } else if last == "g" {
                vec![1.0; n]
            } else if !decays(&name) {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(
                name,
                Param {
                    value: Tensor::new(shape, data)?,
                    frozen: false,
                },
            );
        }
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = false);
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.params.values().all(|p| p.frozen)
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape; frozen ones become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), !p.frozen)))
            .collect();
        Bound {
            tape,
            arch: self.arch.clone(),
            vars,
        }
    }

    /// Little-endian bytes of every value in name order; used for hashing
    /// and freeze checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_values() * 8);
        for (name, p) in &self.params {
            out.extend_from_slice(name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn name_key(name: &str) -> u64 {
    // FNV-1a
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Parameters placed on a tape for one forward/backward pass.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    arch: Arch,
    vars: BTreeMap<String, Var>,
}

impl<'t> Bound<'t> {
    /// Binds an explicit `(name, var)` list, e.g. when a gradient check owns
    /// the leaves.
    pub fn from_vars(
        tape: &'t Tape,
        arch: &Arch,
        vars: impl IntoIterator<Item = (String, Var)>,
    ) -> Self {
        Self {
            tape,
            arch: arch.clone(),
            vars: vars.into_iter().collect(),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Gradients of trainable parameters, by name. Parameters the loss does
    /// not reach get zero gradients.
    pub fn grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, &v)| self.tape.requires_grad(v))
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}
