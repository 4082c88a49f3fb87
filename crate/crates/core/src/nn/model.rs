use super::{Arch, Bound};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenize::TokenSet;

const LN_EPS: f64 = 1e-5;

/// Token geometry ready for the embedder: member coordinates relative to
/// each token's centroid, capped at `max_points_per_token`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenInputs {
    pub local: Vec<Vec<[f64; 3]>>,
    pub centroids: Vec<[f64; 3]>,
}

impl TokenInputs {
    pub fn new(points: &[[f64; 3]], tokens: &TokenSet, max_points: usize) -> Result<Self> {
        if max_points == 0 {
            return Err(Error::InvalidInput("max_points_per_token must be positive".into()));
        }
        let mut local = Vec::with_capacity(tokens.len());
        for (t, tok) in tokens.tokens.iter().enumerate() {
            if tok.point_indices.is_empty() {
                return Err(Error::InvalidInput(format!("token {t} is empty")));
            }
            let mut members = tok.point_indices.clone();
            members.sort_unstable();
            if members.len() > max_points {
                let n = members.len();
                members = (0..max_points).map(|i| members[i * n / max_points]).collect();
            }
            let c = tok.centroid;
            local.push(
                members
                    .iter()
                    .map(|&i| {
                        let p = points.get(i).ok_or_else(|| {
                            Error::InvalidInput(format!("token {t} references point {i}"))
                        })?;
                        Ok([p[0] - c[0], p[1] - c[1], p[2] - c[2]])
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            local,
            centroids: tokens.centroids(),
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    /// The tokens at `index`, in that order.
    pub fn subset(&self, index: &[usize]) -> Self {
        Self {
            local: index.iter().map(|&i| self.local[i].clone()).collect(),
            centroids: index.iter().map(|&i| self.centroids[i]).collect(),
        }
    }
}

pub fn linear(tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    tape.add_row(tape.matmul(x, w)?, b)
}

fn bound_linear(p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    linear(p.tape, x, p.var(w)?, p.var(b)?)
}

fn rows_tensor(rows: &[[f64; 3]]) -> Tensor {
    Tensor::matrix(rows.len(), 3, rows.iter().flatten().copied().collect())
}

/// Shared pointwise two-layer perceptron followed by a max over each
/// token's points. Returns `[M, L]`.
pub fn embed_tokens(p: &Bound, inputs: &TokenInputs) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("embed_tokens: no tokens".into()));
    }
    let tape = p.tape;
    let mut offsets = Vec::with_capacity(inputs.len() + 1);
    offsets.push(0);
    let mut flat = Vec::new();
    for pts in &inputs.local {
        flat.extend_from_slice(pts);
        offsets.push(flat.len());
    }
    let x = tape.constant(rows_tensor(&flat));
    let h = tape.gelu(bound_linear(p, x, "pn.w1", "pn.b1")?)?;
    let h = bound_linear(p, h, "pn.w2", "pn.b2")?;
    tape.segment_max(h, &offsets)
}

/// Two-layer perceptron on raw centroid coordinates. Returns `[M, L]`.
pub fn pos_embed(p: &Bound, centroids: &[[f64; 3]]) -> Result<Var> {
    let tape = p.tape;
    let c = tape.constant(rows_tensor(centroids));
    let h = tape.gelu(bound_linear(p, c, "pos.w1", "pos.b1")?)?;
    bound_linear(p, h, "pos.w2", "pos.b2")
}

fn layer_norm(p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    p.tape.layer_norm(x, p.var(&format!("{prefix}.g"))?, p.var(&format!("{prefix}.b"))?, 1, LN_EPS)
}

pub(super) fn attention(p: &Bound, x: Var, prefix: &str, n_heads: usize) -> Result<Var> {
    let tape = p.tape;
    let w = |n: &str| p.var(&format!("{prefix}.{n}"));
    let q = tape.matmul(x, w("wq")?)?;
    let k = tape.matmul(x, w("wk")?)?;
    let v = tape.matmul(x, w("wv")?)?;
    let l = tape.shape(q)[1];
    let dh = l / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale)?;
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    linear(tape, cat, w("wo")?, w("bo")?)
}

fn block(p: &Bound, x: Var, prefix: &str, n_heads: usize) -> Result<Var> {
    let tape = p.tape;
    let a = attention(p, layer_norm(p, x, &format!("{prefix}.ln1"))?, &format!("{prefix}.attn"), n_heads)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(p, x, &format!("{prefix}.ln2"))?;
    let h = tape.gelu(bound_linear(p, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?)?;
    let h = bound_linear(p, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))?;
    tape.add(x, h)
}

fn stack(p: &Bound, x: Var, name: &str, layers: usize, n_heads: usize) -> Result<Var> {
    if p.tape.shape(x)[0] == 0 {
        return Err(Error::InvalidInput(format!("{name}: no input tokens")));
    }
    let mut x = x;
    for i in 0..layers {
        x = block(p, x, &format!("{name}.{i}"), n_heads)?;
    }
    if layers > 0 {
        x = layer_norm(p, x, &format!("{name}.ln"))?;
    }
    Ok(x)
}

/// Pre-norm transformer encoder. With zero layers this is the identity.
pub fn encode(p: &Bound, x: Var) -> Result<Var> {
    let a: &Arch = p.arch();
    stack(p, x, "enc", a.n_enc_layers, a.n_heads)
}

/// Transformer decoder over all `M` positions: encoder outputs fill the
/// `visible` positions (rows of `enc_visible`, in order), the shared mask
/// query fills the `masked` ones, and `pos` (`[M, L]`) is added everywhere.
pub fn decode(p: &Bound, enc_visible: Var, visible: &[usize], masked: &[usize], pos: Var) -> Result<Var> {
    let tape = p.tape;
    let m = visible.len() + masked.len();
    if tape.shape(enc_visible)[0] != visible.len() || tape.shape(pos)[0] != m {
        return Err(Error::InvalidInput(format!(
            "decode: {} encoded rows, {} visible, {m} positions",
            tape.shape(enc_visible)[0],
            visible.len()
        )));
    }
    let mut slot = vec![usize::MAX; m];
    for (row, &i) in visible.iter().chain(masked).enumerate() {
        if i >= m || slot[i] != usize::MAX {
            return Err(Error::InvalidInput("decode: visible/masked is not a partition".into()));
        }
        slot[i] = row;
    }
    let x = if masked.is_empty() {
        enc_visible
    } else {
        let q = tape.gather_rows(p.var("mask_query")?, &vec![0; masked.len()])?;
        if visible.is_empty() {
            q
        } else {
            tape.concat_rows(&[enc_visible, q])?
        }
    };
    let x = tape.add(tape.gather_rows(x, &slot)?, pos)?;
    let a = p.arch();
    stack(p, x, "dec", a.n_dec_layers, a.n_heads)
}

/// Linear map from encoder width to 2D feature width.
pub fn project_3d(p: &Bound, h: Var) -> Result<Var> {
    bound_linear(p, h, "proj.w", "proj.b")
}

/// Two-layer perceptron applied to the student's pooled instance feature.
pub fn predictor(p: &Bound, x: Var) -> Result<Var> {
    let h = p.tape.gelu(bound_linear(p, x, "pred.w1", "pred.b1")?)?;
    bound_linear(p, h, "pred.w2", "pred.b2")
}
