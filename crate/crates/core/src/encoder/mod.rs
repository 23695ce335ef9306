//! Model configuration, encoder parameters, and the transformer forward
//! pass.
//!
//! The encoder is a single pre-norm transformer stack operating on a patch
//! embedding sequence with a prepended class token. The classification head
//! maps the final class-token representation onto `6 * (N + 1)` logits: six
//! main expression classes followed by N latent subclass slots per
//! expression (see the `filter` module for the label algebra).

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint};
pub use forward::{
    add_class_and_position, classify, classify_traced, embed, encoder_forward, head, patchify,
    unpatchify, EmbeddingSequence, ForwardTrace,
};

use crate::error::Error;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;
use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};

/// Number of main expression classes. Fixed by the label taxonomy (anger,
/// disgust, fear, happiness, sadness, surprise).
pub const NUM_EXPRESSIONS: usize = 6;

/// How RGB and depth are combined into one embedding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Channel replacement: three RGB+D recombinations, one projection each,
    /// patchwise average of the three embeddings.
    Alternative,
    /// RGB and replicated depth embedded separately, then averaged.
    Naive,
    RgbOnly,
    DepthOnly,
}

impl FusionMode {
    /// Number of independent patch projections the mode owns.
    pub fn num_streams(self) -> usize {
        match self {
            FusionMode::Alternative => 3,
            FusionMode::Naive => 2,
            FusionMode::RgbOnly | FusionMode::DepthOnly => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Alternative => "alternative",
            FusionMode::Naive => "naive",
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::DepthOnly => "depth_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alternative" => Ok(FusionMode::Alternative),
            "naive" => Ok(FusionMode::Naive),
            "rgb_only" => Ok(FusionMode::RgbOnly),
            "depth_only" => Ok(FusionMode::DepthOnly),
            other => Err(Error::Config {
                problems: vec![format!(
                    "unknown fusion_mode '{other}' (expected alternative, naive, rgb_only or depth_only)"
                )],
            }),
        }
    }
}

/// Architecture and label-space hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Latent subclass slots per expression (N). Zero disables the subclass
    /// machinery and leaves a plain six-way head.
    pub num_subclasses: usize,
    /// Relabeling confidence margin.
    pub delta: f64,
    pub fusion_mode: FusionMode,
    pub dropout: f64,
}

impl Default for ModelConfig {
    /// The full-scale configuration used by the training protocol:
    /// standard small-ViT widths (384 x 12 layers x 6 heads) on 224px
    /// inputs.
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            mlp_ratio: 4,
            num_subclasses: 5,
            delta: 0.4,
            fusion_mode: FusionMode::Alternative,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Smallest config that exercises every code path; used by the gradient
    /// checker.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 4,
            num_subclasses: 1,
            ..ModelConfig::default()
        }
    }

    /// A step up from `tiny`, still cheap enough for interactive checks.
    pub fn small() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            embed_dim: 32,
            num_layers: 3,
            num_heads: 4,
            num_subclasses: 2,
            ..ModelConfig::default()
        }
    }

    /// Patches per image (M).
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length: patch_size^2 * 3 channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Output width of the classification head: 6 * (N + 1).
    pub fn head_width(&self) -> usize {
        NUM_EXPRESSIONS * (self.num_subclasses + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Validate every rule and report all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.image_size == 0 || self.patch_size == 0 {
            problems.push("image_size and patch_size must be positive".to_string());
        } else if self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            problems.push("embed_dim and num_heads must be positive".to_string());
        } else if self.embed_dim % self.num_heads != 0 {
            problems.push(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be at least 1".to_string());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            problems.push(format!("delta {} outside (0, 1)", self.delta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    /// Flat key=value lines describing this config; the inverse of
    /// [`ModelConfig::apply_kv`] over the default.
    pub fn to_kv_lines(&self) -> Vec<String> {
        vec![
            format!("image_size = {}", self.image_size),
            format!("patch_size = {}", self.patch_size),
            format!("embed_dim = {}", self.embed_dim),
            format!("num_layers = {}", self.num_layers),
            format!("num_heads = {}", self.num_heads),
            format!("mlp_ratio = {}", self.mlp_ratio),
            format!("num_subclasses = {}", self.num_subclasses),
            format!("delta = {}", self.delta),
            format!("fusion_mode = {}", self.fusion_mode.as_str()),
            format!("dropout = {}", self.dropout),
        ]
    }

    /// Apply one key=value pair. Returns false if the key does not belong to
    /// the model config (the caller decides whether that is an error).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |key: &str, value: &str| Error::Config {
            problems: vec![format!("cannot parse {key} = '{value}'")],
        };
        match key {
            "image_size" => self.image_size = value.parse().map_err(|_| bad(key, value))?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad(key, value))?,
            "embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key, value))?,
            "num_layers" => self.num_layers = value.parse().map_err(|_| bad(key, value))?,
            "num_heads" => self.num_heads = value.parse().map_err(|_| bad(key, value))?,
            "mlp_ratio" => self.mlp_ratio = value.parse().map_err(|_| bad(key, value))?,
            "num_subclasses" => {
                self.num_subclasses = value.parse().map_err(|_| bad(key, value))?
            }
            "delta" => self.delta = value.parse().map_err(|_| bad(key, value))?,
            "fusion_mode" => self.fusion_mode = FusionMode::parse(value)?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad(key, value))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A linear map with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub out: Affine,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub fc1: Affine,
    pub fc2: Affine,
}

/// All trainable parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// One patch projection per fusion stream.
    pub patch_proj: Vec<Affine>,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub head: Affine,
}

/// Standard deviation of the truncated-normal weight init.
const INIT_STD: f64 = 0.02;

fn trunc_normal(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn init_affine(rng: &mut StdRng, rows: usize, cols: usize) -> Affine {
    Affine {
        weight: trunc_normal(rng, vec![rows, cols]),
        bias: Tensor::zeros(vec![cols]),
    }
}

impl EncoderParams {
    /// Fresh parameters: truncated-normal weights (std 0.02), zero biases,
    /// zero class token and position embeddings, unit layernorm gains.
    pub fn init(config: &ModelConfig, rng: &mut StdRng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_dim();
        let hidden = config.mlp_ratio * d;
        let patch_proj = (0..config.fusion_mode.num_streams())
            .map(|_| init_affine(rng, p, d))
            .collect();
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                norm1_gain: Tensor::filled(vec![d], 1.0),
                norm1_bias: Tensor::zeros(vec![d]),
                query: init_affine(rng, d, d),
                key: init_affine(rng, d, d),
                value: init_affine(rng, d, d),
                out: init_affine(rng, d, d),
                norm2_gain: Tensor::filled(vec![d], 1.0),
                norm2_bias: Tensor::zeros(vec![d]),
                fc1: init_affine(rng, d, hidden),
                fc2: init_affine(rng, hidden, d),
            })
            .collect();
        Ok(EncoderParams {
            patch_proj,
            class_token: Tensor::zeros(vec![1, d]),
            pos_embed: Tensor::zeros(vec![config.seq_len(), d]),
            blocks,
            norm_gain: Tensor::filled(vec![d], 1.0),
            norm_bias: Tensor::zeros(vec![d]),
            head: init_affine(rng, d, config.head_width()),
        })
    }

    /// Named parameter groups in canonical order. The same order is used by
    /// `register`, the optimizer state, and the checkpoint format.
    pub fn groups(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, proj) in self.patch_proj.iter().enumerate() {
            out.push((format!("patch_proj.{i}.weight"), &proj.weight));
            out.push((format!("patch_proj.{i}.bias"), &proj.bias));
        }
        out.push(("class_token".to_string(), &self.class_token));
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1.gain"), &b.norm1_gain));
            out.push((format!("blocks.{i}.norm1.bias"), &b.norm1_bias));
            out.push((format!("blocks.{i}.attn.query.weight"), &b.query.weight));
            out.push((format!("blocks.{i}.attn.query.bias"), &b.query.bias));
            out.push((format!("blocks.{i}.attn.key.weight"), &b.key.weight));
            out.push((format!("blocks.{i}.attn.key.bias"), &b.key.bias));
            out.push((format!("blocks.{i}.attn.value.weight"), &b.value.weight));
            out.push((format!("blocks.{i}.attn.value.bias"), &b.value.bias));
            out.push((format!("blocks.{i}.attn.out.weight"), &b.out.weight));
            out.push((format!("blocks.{i}.attn.out.bias"), &b.out.bias));
            out.push((format!("blocks.{i}.norm2.gain"), &b.norm2_gain));
            out.push((format!("blocks.{i}.norm2.bias"), &b.norm2_bias));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), &b.fc1.weight));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), &b.fc1.bias));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), &b.fc2.weight));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), &b.fc2.bias));
        }
        out.push(("norm.gain".to_string(), &self.norm_gain));
        out.push(("norm.bias".to_string(), &self.norm_bias));
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable view over the same groups, in the same order.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, proj) in self.patch_proj.iter_mut().enumerate() {
            out.push((format!("patch_proj.{i}.weight"), &mut proj.weight));
            out.push((format!("patch_proj.{i}.bias"), &mut proj.bias));
        }
        out.push(("class_token".to_string(), &mut self.class_token));
        out.push(("pos_embed".to_string(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.norm1.gain"), &mut b.norm1_gain));
            out.push((format!("blocks.{i}.norm1.bias"), &mut b.norm1_bias));
            out.push((format!("blocks.{i}.attn.query.weight"), &mut b.query.weight));
            out.push((format!("blocks.{i}.attn.query.bias"), &mut b.query.bias));
            out.push((format!("blocks.{i}.attn.key.weight"), &mut b.key.weight));
            out.push((format!("blocks.{i}.attn.key.bias"), &mut b.key.bias));
            out.push((format!("blocks.{i}.attn.value.weight"), &mut b.value.weight));
            out.push((format!("blocks.{i}.attn.value.bias"), &mut b.value.bias));
            out.push((format!("blocks.{i}.attn.out.weight"), &mut b.out.weight));
            out.push((format!("blocks.{i}.attn.out.bias"), &mut b.out.bias));
            out.push((format!("blocks.{i}.norm2.gain"), &mut b.norm2_gain));
            out.push((format!("blocks.{i}.norm2.bias"), &mut b.norm2_bias));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), &mut b.fc1.weight));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), &mut b.fc1.bias));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), &mut b.fc2.weight));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), &mut b.fc2.bias));
        }
        out.push(("norm.gain".to_string(), &mut self.norm_gain));
        out.push(("norm.bias".to_string(), &mut self.norm_bias));
        out.push(("head.weight".to_string(), &mut self.head.weight));
        out.push(("head.bias".to_string(), &mut self.head.bias));
        out
    }

    /// Total number of scalar parameters actually held.
    pub fn num_elements(&self) -> usize {
        self.groups().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every group on a tape as a gradient-tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        let affine = |tape: &mut Tape, a: &Affine| AffineVars {
            weight: tape.leaf(a.weight.clone(), true),
            bias: tape.leaf(a.bias.clone(), true),
        };
        let patch_proj = self.patch_proj.iter().map(|p| affine(tape, p)).collect();
        let class_token = tape.leaf(self.class_token.clone(), true);
        let pos_embed = tape.leaf(self.pos_embed.clone(), true);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                norm1_gain: tape.leaf(b.norm1_gain.clone(), true),
                norm1_bias: tape.leaf(b.norm1_bias.clone(), true),
                query: affine(tape, &b.query),
                key: affine(tape, &b.key),
                value: affine(tape, &b.value),
                out: affine(tape, &b.out),
                norm2_gain: tape.leaf(b.norm2_gain.clone(), true),
                norm2_bias: tape.leaf(b.norm2_bias.clone(), true),
                fc1: affine(tape, &b.fc1),
                fc2: affine(tape, &b.fc2),
            })
            .collect();
        EncoderVars {
            patch_proj,
            class_token,
            pos_embed,
            blocks,
            norm_gain: tape.leaf(self.norm_gain.clone(), true),
            norm_bias: tape.leaf(self.norm_bias.clone(), true),
            head: affine(tape, &self.head),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub query: AffineVars,
    pub key: AffineVars,
    pub value: AffineVars,
    pub out: AffineVars,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub fc1: AffineVars,
    pub fc2: AffineVars,
}

/// Tape handles for every parameter group, mirroring [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub patch_proj: Vec<AffineVars>,
    pub class_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub head: AffineVars,
}

impl EncoderVars {
    /// Vars in the same canonical order as [`EncoderParams::groups`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in &self.patch_proj {
            out.push(p.weight);
            out.push(p.bias);
        }
        out.push(self.class_token);
        out.push(self.pos_embed);
        for b in &self.blocks {
            out.extend([
                b.norm1_gain,
                b.norm1_bias,
                b.query.weight,
                b.query.bias,
                b.key.weight,
                b.key.bias,
                b.value.weight,
                b.value.bias,
                b.out.weight,
                b.out.bias,
                b.norm2_gain,
                b.norm2_bias,
                b.fc1.weight,
                b.fc1.bias,
                b.fc2.weight,
                b.fc2.bias,
            ]);
        }
        out.push(self.norm_gain);
        out.push(self.norm_bias);
        out.push(self.head.weight);
        out.push(self.head.bias);
        out
    }
}

/// Parameter totals broken down by section.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCount {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

/// Closed-form parameter count for a configuration; never instantiates the
/// tensors.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let d = config.embed_dim;
    let p = config.patch_dim();
    let hidden = config.mlp_ratio * d;
    let w = config.head_width();
    let streams = config.fusion_mode.num_streams();

    let per_block = 2 * d                  // norm1
        + 3 * (d * d + d)                  // query, key, value
        + (d * d + d)                      // attention output projection
        + 2 * d                            // norm2
        + (d * hidden + hidden)            // fc1
        + (hidden * d + d); // fc2

    let groups = vec![
        ("patch_proj".to_string(), streams * (p * d + d)),
        ("class_token".to_string(), d),
        ("pos_embed".to_string(), config.seq_len() * d),
        ("blocks".to_string(), config.num_layers * per_block),
        ("norm".to_string(), 2 * d),
        ("head".to_string(), d * w + w),
    ];
    let total = groups.iter().map(|(_, n)| n).sum();
    ParamCount { groups, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().num_patches(), 196);
        assert_eq!(ModelConfig::default().head_width(), 36);
        assert_eq!(ModelConfig::default().patch_dim(), 768);
    }

    #[test]
    fn validate_reports_every_violation() {
        let config = ModelConfig {
            image_size: 30,
            patch_size: 16,
            embed_dim: 10,
            num_heads: 4,
            delta: 1.5,
            ..ModelConfig::default()
        };
        match config.validate().unwrap_err() {
            Error::Config { problems } => {
                assert_eq!(problems.len(), 3, "{problems:?}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn head_width_degenerates_without_subclasses() {
        let config = ModelConfig {
            num_subclasses: 0,
            ..ModelConfig::default()
        };
        assert_eq!(config.head_width(), 6);
    }

    #[test]
    fn kv_round_trip() {
        let config = ModelConfig {
            image_size: 64,
            embed_dim: 32,
            fusion_mode: FusionMode::Naive,
            ..ModelConfig::default()
        };
        let mut rebuilt = ModelConfig::default();
        for line in config.to_kv_lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            assert!(rebuilt.apply_kv(k, v).unwrap());
        }
        assert_eq!(rebuilt, config);
        assert!(!rebuilt.apply_kv("no_such_key", "1").unwrap());
    }

    #[test]
    fn init_produces_expected_shapes_and_zeros() {
        let config = ModelConfig::tiny();
        let mut rng = StdRng::seed_from_u64(0);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        assert_eq!(params.patch_proj.len(), 3);
        assert_eq!(params.patch_proj[0].weight.shape(), &[768, 8]);
        assert_eq!(params.pos_embed.shape(), &[5, 8]);
        assert_eq!(params.head.weight.shape(), &[8, 12]);
        assert!(params.class_token.data().iter().all(|&v| v == 0.0));
        assert!(params.pos_embed.data().iter().all(|&v| v == 0.0));
        assert!(params.head.bias.data().iter().all(|&v| v == 0.0));
        // truncated normal stays within two standard deviations
        assert!(params
            .patch_proj[0]
            .weight
            .data()
            .iter()
            .all(|&v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn groups_and_vars_share_order() {
        let config = ModelConfig::tiny();
        let mut rng = StdRng::seed_from_u64(1);
        let params = EncoderParams::init(&config, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let groups = params.groups();
        let flat = vars.flat();
        assert_eq!(groups.len(), flat.len());
        for ((name, tensor), var) in groups.iter().zip(&flat) {
            assert_eq!(
                tape.value(*var).shape(),
                tensor.shape(),
                "group {name} out of order"
            );
            assert_eq!(tape.value(*var), *tensor, "group {name} value mismatch");
        }
        let mut_names: Vec<String> = params
            .clone()
            .groups_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let names: Vec<String> = groups.into_iter().map(|(n, _)| n).collect();
        assert_eq!(mut_names, names);
    }

    #[test]
    fn count_matches_instantiated_parameters() {
        for config in [
            ModelConfig::tiny(),
            ModelConfig::small(),
            ModelConfig {
                fusion_mode: FusionMode::Naive,
                ..ModelConfig::tiny()
            },
            ModelConfig {
                fusion_mode: FusionMode::DepthOnly,
                num_layers: 0,
                ..ModelConfig::tiny()
            },
        ] {
            let mut rng = StdRng::seed_from_u64(2);
            let params = EncoderParams::init(&config, &mut rng).unwrap();
            assert_eq!(params.num_elements(), count_parameters(&config).total);
        }
    }

    #[test]
    fn count_hand_checked_minimal_config() {
        // One patch (image == patch), one stream, no blocks, two classes per
        // expression group: every term is small enough to sum by hand.
        let config = ModelConfig {
            image_size: 4,
            patch_size: 4,
            embed_dim: 2,
            num_layers: 0,
            num_heads: 1,
            mlp_ratio: 1,
            num_subclasses: 1,
            fusion_mode: FusionMode::RgbOnly,
            ..ModelConfig::default()
        };
        // patch_proj: 48*2 + 2 = 98, class 2, pos 2*2=4, norm 4,
        // head: 2*12 + 12 = 36. total = 144.
        let count = count_parameters(&config);
        assert_eq!(count.total, 98 + 2 + 4 + 4 + 36);
    }
}
