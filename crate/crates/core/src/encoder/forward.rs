//! Patch extraction and the traced transformer forward pass.

use super::{AffineVars, EncoderVars, ModelConfig};
use crate::error::Error;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;
use rand::rngs::StdRng;
use rand::Rng;

/// Epsilon inside every layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// A patch-token sequence on the tape. `includes_class_token` distinguishes
/// the raw M-token embedding from the (M+1)-token encoder input.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSequence {
    pub tokens: Var,
    pub includes_class_token: bool,
}

/// Optional record of what a forward pass produced, used by the shape-audit
/// and attention tests.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// (name, shape) for every interesting intermediate, in creation order.
    pub shapes: Vec<(String, Vec<usize>)>,
    /// Attention probability matrices, layer-major then head-major.
    pub attention: Vec<Tensor>,
}

impl ForwardTrace {
    fn record(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.shapes.push((name.into(), shape.to_vec()));
    }
}

/// Cut an [S, S, 3] image into non-overlapping patches, row-major over the
/// patch grid; each output row is the row-major flattening of one patch
/// (y, then x, then channel).
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 || shape[0] != shape[1] {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: "square [S, S, 3] image required".into(),
        });
    }
    let size = shape[0];
    if patch_size == 0 || size % patch_size != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: shape.to_vec(),
            reason: format!("size {size} not divisible by patch {patch_size}"),
        });
    }
    let side = size / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(side * side * patch_dim);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..3 {
                        data.push(image.at3(py * patch_size + dy, px * patch_size + dx, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![side * side, patch_dim], data)
}

/// Inverse of [`patchify`]: reassemble patches into an [S, S, 3] image.
pub fn unpatchify(patches: &Tensor, patch_size: usize, image_size: usize) -> Result<Tensor> {
    let side = image_size / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    if patches.rank() != 2
        || patches.shape() != [side * side, patch_dim]
        || image_size % patch_size != 0
    {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: patches.shape().to_vec(),
            reason: format!("expected [{}, {patch_dim}]", side * side),
        });
    }
    let mut image = Tensor::zeros(vec![image_size, image_size, 3]);
    for py in 0..side {
        for px in 0..side {
            let row = py * side + px;
            let mut i = 0;
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    for c in 0..3 {
                        image.set3(
                            py * patch_size + dy,
                            px * patch_size + dx,
                            c,
                            patches.at2(row, i),
                        );
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(image)
}

/// Project a patch matrix into embedding space: patches * W + b.
pub fn embed(tape: &mut Tape, patches: &Tensor, proj: AffineVars) -> Result<Var> {
    let x = tape.leaf(patches.clone(), false);
    let projected = tape.matmul(x, proj.weight)?;
    tape.add_row(projected, proj.bias)
}

/// Prepend the class token and add position embeddings.
pub fn add_class_and_position(
    tape: &mut Tape,
    seq: EmbeddingSequence,
    vars: &EncoderVars,
) -> Result<EmbeddingSequence> {
    if seq.includes_class_token {
        return Err(Error::Bookkeeping {
            reason: "sequence already carries a class token".into(),
        });
    }
    let with_class = tape.concat(&[vars.class_token, seq.tokens], 0)?;
    let tokens = tape.add(with_class, vars.pos_embed)?;
    Ok(EmbeddingSequence {
        tokens,
        includes_class_token: true,
    })
}

/// Inverted dropout on the tape; identity when `rate` is zero or no rng is
/// supplied (inference).
fn maybe_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut Option<&mut StdRng>) -> Var {
    let Some(rng) = rng.as_deref_mut() else {
        return x;
    };
    if rate == 0.0 {
        return x;
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..shape.iter().product())
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.leaf(Tensor::new(shape, mask).expect("mask shape"), false);
    tape.mul(x, m).expect("same shape")
}

fn attention(
    tape: &mut Tape,
    x_normed: Var,
    block: &super::BlockVars,
    config: &ModelConfig,
    layer: usize,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Var> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x_normed, block.query.weight)?;
    let q = tape.add_row(q, block.query.bias)?;
    let k = tape.matmul(x_normed, block.key.weight)?;
    let k = tape.add_row(k, block.key.bias)?;
    let v = tape.matmul(x_normed, block.value.weight)?;
    let v = tape.add_row(v, block.value.bias)?;

    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, 1)?;
        if let Some(t) = trace.as_deref_mut() {
            t.record(format!("blocks.{layer}.head.{h}.scores"), tape.shape(scores));
            t.record(format!("blocks.{layer}.head.{h}.probs"), tape.shape(probs));
            t.attention.push(tape.value(probs).clone());
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat(&heads, 1)?;
    let out = tape.matmul(cat, block.out.weight)?;
    tape.add_row(out, block.out.bias)
}

/// Run the pre-norm transformer stack over a class-token sequence and return
/// the normalized class-token representation as a [1, D] tensor.
pub fn encoder_forward(
    tape: &mut Tape,
    seq: EmbeddingSequence,
    vars: &EncoderVars,
    config: &ModelConfig,
    mut dropout_rng: Option<&mut StdRng>,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var> {
    if !seq.includes_class_token {
        return Err(Error::Bookkeeping {
            reason: "encoder_forward expects a class-token sequence".into(),
        });
    }
    let mut x = seq.tokens;
    for (i, block) in vars.blocks.iter().enumerate() {
        let normed = tape.layernorm(x, block.norm1_gain, block.norm1_bias, LAYERNORM_EPS)?;
        let attn = attention(tape, normed, block, config, i, &mut trace)?;
        let attn = maybe_dropout(tape, attn, config.dropout, &mut dropout_rng);
        x = tape.add(x, attn)?;

        let normed2 = tape.layernorm(x, block.norm2_gain, block.norm2_bias, LAYERNORM_EPS)?;
        let hidden = tape.matmul(normed2, block.fc1.weight)?;
        let hidden = tape.add_row(hidden, block.fc1.bias)?;
        if let Some(t) = trace.as_deref_mut() {
            t.record(format!("blocks.{i}.mlp.hidden"), tape.shape(hidden));
        }
        let hidden = tape.gelu(hidden);
        let mlp = tape.matmul(hidden, block.fc2.weight)?;
        let mlp = tape.add_row(mlp, block.fc2.bias)?;
        let mlp = maybe_dropout(tape, mlp, config.dropout, &mut dropout_rng);
        x = tape.add(x, mlp)?;

        if !tape.value(x).is_all_finite() {
            return Err(Error::NonFinite {
                context: format!("encoder block {i} output"),
            });
        }
        if let Some(t) = trace.as_deref_mut() {
            t.record(format!("blocks.{i}.output"), tape.shape(x));
        }
    }
    let normed = tape.layernorm(x, vars.norm_gain, vars.norm_bias, LAYERNORM_EPS)?;
    let class_row = tape.slice(normed, 0, 0, 1)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record("class_repr", tape.shape(class_row));
    }
    Ok(class_row)
}

/// Classification head: affine map from the class representation [1, D] to
/// the 6 * (N + 1) logit vector.
pub fn head(tape: &mut Tape, class_repr: Var, vars: &EncoderVars) -> Result<Var> {
    let logits = tape.matmul(class_repr, vars.head.weight)?;
    let logits = tape.add_row(logits, vars.head.bias)?;
    let width = tape.shape(logits)[1];
    tape.reshape(logits, &[width])
}

/// Full path from a fused patch embedding to logits.
pub fn classify(
    tape: &mut Tape,
    seq: EmbeddingSequence,
    vars: &EncoderVars,
    config: &ModelConfig,
) -> Result<Var> {
    classify_traced(tape, seq, vars, config, None, None)
}

pub fn classify_traced(
    tape: &mut Tape,
    seq: EmbeddingSequence,
    vars: &EncoderVars,
    config: &ModelConfig,
    dropout_rng: Option<&mut StdRng>,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var> {
    let full = add_class_and_position(tape, seq, vars)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record("sequence", tape.shape(full.tokens));
    }
    let class_repr = encoder_forward(tape, full, vars, config, dropout_rng, trace.as_deref_mut())?;
    let logits = head(tape, class_repr, vars)?;
    if let Some(t) = trace.as_deref_mut() {
        t.record("logits", tape.shape(logits));
    }
    Ok(logits)
}
