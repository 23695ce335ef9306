//! Channel-replacement fusion of RGB and depth.
//!
//! The multimodal input is never concatenated or run through a second
//! branch. Instead the depth plane replaces one RGB channel at a time,
//! giving three ordinary three-channel images (RGD, RDB, DGB). Each gets
//! its own patch projection, and the three patch embeddings are averaged
//! elementwise into a single sequence for the shared encoder stack. The
//! naive baseline embeds RGB and replicated depth separately and averages
//! those two; the unimodal modes embed a single stream.

use crate::encoder::{embed, patchify, EmbeddingSequence, EncoderVars, ModelConfig};
use crate::error::Error;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;
use rand::rngs::StdRng;
use rand::Rng;

/// An aligned RGB + depth sample with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    rgb: Tensor,
    depth: Tensor,
    pub subject_id: String,
    /// Main expression class, 0..6.
    pub expression: usize,
    /// Ordinal intensity level from the source annotation (metadata only).
    pub intensity: u8,
}

impl ImagePair {
    /// Validates alignment and value range: rgb is [S, S, 3], depth is
    /// [S, S, 1] with the same S, and every value is finite in [0, 1].
    pub fn new(
        rgb: Tensor,
        depth: Tensor,
        subject_id: impl Into<String>,
        expression: usize,
        intensity: u8,
    ) -> Result<Self> {
        let s = rgb.shape().first().copied().unwrap_or(0);
        if rgb.rank() != 3 || rgb.shape() != [s, s, 3] {
            return Err(Error::InvalidShape {
                op: "ImagePair::new",
                shape: rgb.shape().to_vec(),
                reason: "rgb must be square [S, S, 3]".into(),
            });
        }
        if depth.shape() != [s, s, 1] {
            return Err(Error::ShapeMismatch {
                op: "ImagePair::new",
                lhs: rgb.shape().to_vec(),
                rhs: depth.shape().to_vec(),
            });
        }
        for (name, t) in [("rgb", &rgb), ("depth", &depth)] {
            if !t.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
                return Err(Error::NonFinite {
                    context: format!("{name} plane outside [0, 1]"),
                });
            }
        }
        if expression >= crate::encoder::NUM_EXPRESSIONS {
            return Err(Error::LabelOutOfRange {
                label: expression,
                limit: crate::encoder::NUM_EXPRESSIONS,
            });
        }
        Ok(ImagePair {
            rgb,
            depth,
            subject_id: subject_id.into(),
            expression,
            intensity,
        })
    }

    /// Uniform-random valid pair; handy for gradient checks and smoke tests
    /// that need an input but not a dataset.
    pub fn random(rng: &mut StdRng, size: usize) -> Self {
        let rgb = Tensor::new(
            vec![size, size, 3],
            (0..size * size * 3).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let depth = Tensor::new(vec![size, size, 1], (0..size * size).map(|_| rng.gen()).collect())
            .unwrap();
        ImagePair::new(rgb, depth, "random", 0, 1).unwrap()
    }

    pub fn size(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn rgb(&self) -> &Tensor {
        &self.rgb
    }

    pub fn depth(&self) -> &Tensor {
        &self.depth
    }

    /// Replace one RGB channel (0, 1 or 2) with the depth plane.
    fn with_channel_replaced(&self, channel: usize) -> Tensor {
        let s = self.size();
        let mut out = self.rgb.clone();
        for y in 0..s {
            for x in 0..s {
                out.set3(y, x, channel, self.depth.at3(y, x, 0));
            }
        }
        out
    }

    /// Depth copied into all three channels, for the depth-only and naive
    /// streams.
    pub fn depth_as_rgb(&self) -> Tensor {
        let s = self.size();
        let mut out = Tensor::zeros(vec![s, s, 3]);
        for y in 0..s {
            for x in 0..s {
                let d = self.depth.at3(y, x, 0);
                for c in 0..3 {
                    out.set3(y, x, c, d);
                }
            }
        }
        out
    }
}

/// The three channel-replacement recombinations of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTriple {
    /// (R, G, D): depth replaces blue.
    pub rgd: Tensor,
    /// (R, D, B): depth replaces green.
    pub rdb: Tensor,
    /// (D, G, B): depth replaces red.
    pub dgb: Tensor,
}

/// Build the three recombined images. Each differs from the original RGB in
/// exactly the replaced plane.
pub fn channel_replace(pair: &ImagePair) -> FusedTriple {
    FusedTriple {
        rgd: pair.with_channel_replaced(2),
        rdb: pair.with_channel_replaced(1),
        dgb: pair.with_channel_replaced(0),
    }
}

/// Elementwise mean of three equal-shaped sequences on the tape.
///
/// Written as a + ((b - a) + (c - a)) / 3 rather than (a + b + c) / 3: the
/// two are equal to rounding, but this form returns `a` bit-for-bit when all
/// three inputs coincide, which the unimodal-equality contract relies on.
pub fn mean3(tape: &mut Tape, a: Var, b: Var, c: Var) -> Result<Var> {
    let db = tape.sub(b, a)?;
    let dc = tape.sub(c, a)?;
    let sum = tape.add(db, dc)?;
    let third = tape.scale(sum, 1.0 / 3.0);
    tape.add(a, third)
}

fn embed_image(
    tape: &mut Tape,
    image: &Tensor,
    vars: &EncoderVars,
    config: &ModelConfig,
    stream: usize,
) -> Result<Var> {
    let Some(proj) = vars.patch_proj.get(stream).copied() else {
        return Err(Error::Bookkeeping {
            reason: format!(
                "stream {stream} out of range for {} mode",
                config.fusion_mode.as_str()
            ),
        });
    };
    let patches = patchify(image, config.patch_size)?;
    embed(tape, &patches, proj)
}

fn sequence(tokens: Var) -> EmbeddingSequence {
    EmbeddingSequence {
        tokens,
        includes_class_token: false,
    }
}

/// Alternative fusion: three recombined images through three projections,
/// averaged patchwise into one M x D sequence.
pub fn fuse_alternative(
    tape: &mut Tape,
    pair: &ImagePair,
    vars: &EncoderVars,
    config: &ModelConfig,
) -> Result<EmbeddingSequence> {
    let triple = channel_replace(pair);
    let e_rgd = embed_image(tape, &triple.rgd, vars, config, 0)?;
    let e_rdb = embed_image(tape, &triple.rdb, vars, config, 1)?;
    let e_dgb = embed_image(tape, &triple.dgb, vars, config, 2)?;
    Ok(sequence(mean3(tape, e_rgd, e_rdb, e_dgb)?))
}

/// Naive fusion baseline: RGB and replicated depth embedded separately,
/// averaged patchwise.
pub fn fuse_naive(
    tape: &mut Tape,
    pair: &ImagePair,
    vars: &EncoderVars,
    config: &ModelConfig,
) -> Result<EmbeddingSequence> {
    let e_rgb = embed_image(tape, pair.rgb(), vars, config, 0)?;
    let depth3 = pair.depth_as_rgb();
    let e_depth = embed_image(tape, &depth3, vars, config, 1)?;
    let total = tape.add(e_rgb, e_depth)?;
    Ok(sequence(tape.scale(total, 0.5)))
}

/// Single-modality embedding: the RGB image or the replicated depth image
/// through the sole projection.
pub fn fuse_unimodal(
    tape: &mut Tape,
    pair: &ImagePair,
    vars: &EncoderVars,
    config: &ModelConfig,
) -> Result<EmbeddingSequence> {
    use crate::encoder::FusionMode;
    let image = match config.fusion_mode {
        FusionMode::RgbOnly => pair.rgb().clone(),
        FusionMode::DepthOnly => pair.depth_as_rgb(),
        other => {
            return Err(Error::Bookkeeping {
                reason: format!("fuse_unimodal called in {} mode", other.as_str()),
            })
        }
    };
    Ok(sequence(embed_image(tape, &image, vars, config, 0)?))
}

/// Dispatch on the configured fusion mode. This is the single entry point
/// the training harness uses.
pub fn embed_input(
    tape: &mut Tape,
    pair: &ImagePair,
    vars: &EncoderVars,
    config: &ModelConfig,
) -> Result<EmbeddingSequence> {
    use crate::encoder::FusionMode;
    if pair.size() != config.image_size {
        return Err(Error::InvalidShape {
            op: "embed_input",
            shape: pair.rgb().shape().to_vec(),
            reason: format!("config expects image_size {}", config.image_size),
        });
    }
    let expected = config.fusion_mode.num_streams();
    if vars.patch_proj.len() != expected {
        return Err(Error::Bookkeeping {
            reason: format!(
                "{} mode needs {expected} patch projections, parameters have {}",
                config.fusion_mode.as_str(),
                vars.patch_proj.len()
            ),
        });
    }
    match config.fusion_mode {
        FusionMode::Alternative => fuse_alternative(tape, pair, vars, config),
        FusionMode::Naive => fuse_naive(tape, pair, vars, config),
        FusionMode::RgbOnly | FusionMode::DepthOnly => fuse_unimodal(tape, pair, vars, config),
    }
}
