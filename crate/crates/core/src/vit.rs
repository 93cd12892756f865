//! Vision Transformer: patch embedding, learnable positional embeddings and
//! class token, pre-norm encoder blocks (multi-head self-attention + MLP),
//! and a linear classification head on the class-token representation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch shape {got:?} does not match config {want:?}")]
    BatchShape { got: Vec<usize>, want: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_mlp_ratio() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(VitError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(VitError::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(VitError::Config("channels, depth and num_classes must be positive".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(VitError::Config(format!("mlp_ratio {} too small", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    /// Closed-form parameter count (kept in sync with `param_shapes` by test).
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let per_block = 2 * d            // norm1
            + 4 * d * d                  // wq wk wv wo
            + 2 * d                      // norm2
            + d * h + h + h * d + d;     // mlp
        self.patch_dim() * d + d         // patch projection
            + d                          // class token
            + self.tokens() * d          // positional table
            + self.depth * per_block
            + 2 * d                      // final norm
            + d * self.num_classes + self.num_classes
    }
}

/// Canonical name/shape walk, in the construction order of the model.
pub fn param_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let h = config.mlp_hidden();
    let mut shapes = vec![
        ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![1, d]),
        ("pos_embed".to_string(), vec![config.tokens(), d]),
    ];
    for i in 0..config.depth {
        let p = format!("blocks.{i}");
        shapes.push((format!("{p}.norm1.gamma"), vec![d]));
        shapes.push((format!("{p}.norm1.beta"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            shapes.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        shapes.push((format!("{p}.norm2.gamma"), vec![d]));
        shapes.push((format!("{p}.norm2.beta"), vec![d]));
        shapes.push((format!("{p}.mlp.w1"), vec![d, h]));
        shapes.push((format!("{p}.mlp.b1"), vec![h]));
        shapes.push((format!("{p}.mlp.w2"), vec![h, d]));
        shapes.push((format!("{p}.mlp.b2"), vec![d]));
    }
    shapes.push(("norm.gamma".to_string(), vec![d]));
    shapes.push(("norm.beta".to_string(), vec![d]));
    shapes.push(("head.weight".to_string(), vec![d, config.num_classes]));
    shapes.push(("head.bias".to_string(), vec![config.num_classes]));
    shapes
}

/// Weight matrices eligible for magnitude pruning. Biases, norm parameters,
/// positional table and class token stay dense.
pub fn prunable_names(config: &ViTConfig) -> Vec<String> {
    param_shapes(config)
        .into_iter()
        .map(|(name, _)| name)
        .filter(|n| {
            n == "patch_embed.weight"
                || n == "head.weight"
                || n.contains(".attn.w")
                || n.ends_with(".mlp.w1")
                || n.ends_with(".mlp.w2")
        })
        .collect()
}

/// Truncated-normal init (std 0.02, clipped at 2σ) for projections and
/// embeddings; zeros for biases and norm β, ones for norm γ.
pub fn init_params<E: Scalar>(config: &ViTConfig, seed: u64) -> Result<ParamSet<E>, VitError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).expect("valid std");
    let trunc = |rng: &mut ChaCha8Rng| loop {
        let v = normal.sample(rng);
        if v.abs() <= 0.04 {
            return fl::<E>(v);
        }
    };
    let mut params = ParamSet::new();
    for (name, shape) in param_shapes(config) {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = if name.ends_with(".gamma") {
            vec![E::one(); numel]
        } else if name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![E::zero(); numel]
        } else {
            (0..numel).map(|_| trunc(&mut rng)).collect()
        };
        params.insert(name, Tensor::new(shape, data).expect("shape/data consistent"));
    }
    Ok(params)
}

/// Split `[C×H×W]` into non-overlapping patches, top-left to bottom-right;
/// each row is one flattened patch, channel-major.
pub fn patchify<E: Scalar>(image: &Tensor<E>, patch_size: usize) -> Result<Tensor<E>, VitError> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(VitError::Config(format!("patchify expects [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(VitError::Config(format!(
            "image {h}x{w} not divisible by patch_size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let data = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch_size {
                    let row = py * patch_size + y;
                    let base = ch * h * w + row * w + px * patch_size;
                    out.extend_from_slice(&data[base..base + patch_size]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, c * patch_size * patch_size], out)?)
}

/// Batched patchify: `[B,C,H,W]` → `[B·P, C·p²]` with samples stacked in order.
pub fn patchify_batch<E: Scalar>(batch: &Tensor<E>, patch_size: usize) -> Result<Tensor<E>, VitError> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(VitError::Config(format!("patchify_batch expects [B,C,H,W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let mut rows = Vec::new();
    let mut cols = 0;
    for s in 0..b {
        let img = Tensor::new(vec![c, h, w], batch.data()[s * per..(s + 1) * per].to_vec())?;
        let p = patchify(&img, patch_size)?;
        cols = p.cols();
        rows.extend_from_slice(p.data());
    }
    Ok(Tensor::new(vec![b * (h / patch_size) * (w / patch_size), cols], rows)?)
}

/// Scaled dot-product attention: `softmax(q·kᵀ/√d_h)·v`.
pub fn attention<E: Scalar>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var, TensorError> {
    let d_h = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, fl(1.0 / (d_h as f64).sqrt()))?;
    let weights = tape.softmax(scaled, 1)?;
    tape.matmul(weights, v)
}

/// Parameter leaves on a tape, keyed by name.
pub struct ViTVars {
    map: BTreeMap<String, Var>,
}

impl ViTVars {
    pub fn var(&self, name: &str) -> Result<Var, VitError> {
        self.map.get(name).copied().ok_or_else(|| VitError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Put every parameter on the tape (as trainable leaves when `trainable`).
pub fn insert_params<E: Scalar>(
    tape: &mut Tape<E>,
    params: &ParamSet<E>,
    trainable: bool,
) -> Result<ViTVars, VitError> {
    let mut map = BTreeMap::new();
    for (name, tensor) in params.iter() {
        map.insert(name.clone(), tape.leaf(tensor.clone(), trainable)?);
    }
    Ok(ViTVars { map })
}

fn activation<E: Scalar>(tape: &mut Tape<E>, act: Activation, x: Var) -> Result<Var, TensorError> {
    match act {
        Activation::Gelu => tape.gelu(x),
        Activation::Relu => tape.relu(x),
    }
}

/// One pre-norm encoder block over `samples` packed sequences of
/// `tokens` rows each: `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
fn encoder_block_packed<E: Scalar>(
    tape: &mut Tape<E>,
    config: &ViTConfig,
    vars: &ViTVars,
    block: usize,
    x: Var,
    samples: usize,
    tokens: usize,
) -> Result<Var, VitError> {
    let p = format!("blocks.{block}");
    let eps = fl::<E>(config.layer_norm_eps);
    let d_h = config.head_dim();

    let g1 = vars.var(&format!("{p}.norm1.gamma"))?;
    let b1 = vars.var(&format!("{p}.norm1.beta"))?;
    let ln1 = tape.layer_norm(x, g1, b1, eps)?;

    let q = tape.matmul(ln1, vars.var(&format!("{p}.attn.wq"))?)?;
    let k = tape.matmul(ln1, vars.var(&format!("{p}.attn.wk"))?)?;
    let v = tape.matmul(ln1, vars.var(&format!("{p}.attn.wv"))?)?;

    let mut sample_outs = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut head_outs = Vec::with_capacity(config.num_heads);
        for head in 0..config.num_heads {
            let qs = tape.slice_block(q, s * tokens, tokens, head * d_h, d_h)?;
            let ks = tape.slice_block(k, s * tokens, tokens, head * d_h, d_h)?;
            let vs = tape.slice_block(v, s * tokens, tokens, head * d_h, d_h)?;
            head_outs.push(attention(tape, qs, ks, vs)?);
        }
        sample_outs.push(tape.concat_cols(&head_outs)?);
    }
    let mhsa = if samples == 1 { sample_outs[0] } else { tape.concat_rows(&sample_outs)? };
    let projected = tape.matmul(mhsa, vars.var(&format!("{p}.attn.wo"))?)?;
    let x = tape.add(x, projected)?;

    let g2 = vars.var(&format!("{p}.norm2.gamma"))?;
    let b2 = vars.var(&format!("{p}.norm2.beta"))?;
    let ln2 = tape.layer_norm(x, g2, b2, eps)?;
    let h = tape.matmul(ln2, vars.var(&format!("{p}.mlp.w1"))?)?;
    let h = tape.add_rows(h, vars.var(&format!("{p}.mlp.b1"))?)?;
    let h = activation(tape, config.activation, h)?;
    let o = tape.matmul(h, vars.var(&format!("{p}.mlp.w2"))?)?;
    let o = tape.add_rows(o, vars.var(&format!("{p}.mlp.b2"))?)?;
    Ok(tape.add(x, o)?)
}

/// Encoder block over a single `[tokens × d]` sequence.
pub fn encoder_block<E: Scalar>(
    tape: &mut Tape<E>,
    config: &ViTConfig,
    vars: &ViTVars,
    block: usize,
    x: Var,
) -> Result<Var, VitError> {
    let tokens = tape.value(x).rows();
    encoder_block_packed(tape, config, vars, block, x, 1, tokens)
}

/// Full forward pass: `[B,C,H,W]` batch → `[B,K]` logits.
pub fn vit_forward<E: Scalar>(
    tape: &mut Tape<E>,
    config: &ViTConfig,
    vars: &ViTVars,
    batch: &Tensor<E>,
) -> Result<Var, VitError> {
    config.validate()?;
    let want = vec![config.channels, config.image_size, config.image_size];
    if batch.rank() != 4 || batch.shape()[1..] != want[..] {
        return Err(VitError::BatchShape { got: batch.shape().to_vec(), want });
    }
    let b = batch.shape()[0];
    let patches_per = config.num_patches();
    let tokens = config.tokens();

    let patches = patchify_batch(batch, config.patch_size)?;
    let pv = tape.leaf(patches, false)?;
    let x = tape.matmul(pv, vars.var("patch_embed.weight")?)?;
    let x = tape.add_rows(x, vars.var("patch_embed.bias")?)?;

    // interleave [cls; patches_s] per sample, then tile positional rows
    let cls = vars.var("cls_token")?;
    let mut parts = Vec::with_capacity(2 * b);
    for s in 0..b {
        parts.push(cls);
        parts.push(tape.slice_rows(x, s * patches_per, patches_per)?);
    }
    let x = tape.concat_rows(&parts)?;
    let mut x = tape.add_rows(x, vars.var("pos_embed")?)?;

    for block in 0..config.depth {
        x = encoder_block_packed(tape, config, vars, block, x, b, tokens)?;
    }

    let g = vars.var("norm.gamma")?;
    let be = vars.var("norm.beta")?;
    let x = tape.layer_norm(x, g, be, fl(config.layer_norm_eps))?;

    let cls_indices: Vec<usize> = (0..b).map(|s| s * tokens).collect();
    let cls_repr = tape.gather_rows(x, &cls_indices)?;
    let logits = tape.matmul(cls_repr, vars.var("head.weight")?)?;
    Ok(tape.add_rows(logits, vars.var("head.bias")?)?)
}

/// Inference-only forward on a throwaway tape.
pub fn vit_logits<E: Scalar>(
    config: &ViTConfig,
    params: &ParamSet<E>,
    batch: &Tensor<E>,
) -> Result<Tensor<E>, VitError> {
    let mut tape = Tape::new();
    let vars = insert_params(&mut tape, params, false)?;
    let out = vit_forward(&mut tape, config, &vars, batch)?;
    Ok(tape.value(out).clone())
}

/// Test configs used across the crate.
pub fn tiny_config(num_classes: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 16,
        num_heads: 2,
        depth: 2,
        mlp_ratio: 2.0,
        num_classes,
        activation: Activation::Gelu,
        layer_norm_eps: 1e-5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn patchify_index_oracle() {
        // 1x4x4 image, values 0..15, patch 2: row 0 must be [0,1,4,5]
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn patchify_whole_image_patch() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patchify_channel_major_rows() {
        // 3-channel 2x2 image, patch 2: single row of length 12 ordered c0,c1,c2
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let img = Tensor::new(vec![3, 2, 2], data.clone()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 12]);
        assert_eq!(p.data(), &data[..]);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Tensor::new(vec![1, 4, 4], vec![0.0; 16]).unwrap();
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn attention_single_token_returns_value() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.9]]).unwrap(), false).unwrap();
        let k = tape.leaf(Tensor::from_rows(&[vec![1.2, 0.4]]).unwrap(), false).unwrap();
        let v = tape.leaf(Tensor::from_rows(&[vec![5.0, -7.0]]).unwrap(), false).unwrap();
        let a = attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.value(a).data(), &[5.0, -7.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape
            .leaf(Tensor::from_rows(&[vec![0.5, 1.0], vec![-2.0, 0.1]]).unwrap(), false)
            .unwrap();
        let k = tape
            .leaf(Tensor::from_rows(&[vec![0.7, -0.3], vec![0.7, -0.3]]).unwrap(), false)
            .unwrap();
        let v = tape
            .leaf(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, -1.0]]).unwrap(), false)
            .unwrap();
        let a = attention(&mut tape, q, k, v).unwrap();
        for row in 0..2 {
            assert!((tape.value(a).at2(row, 0) - 1.5).abs() < 1e-12);
            assert!((tape.value(a).at2(row, 1) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_closed_form_softmax_weights() {
        // d_h = 1, scores [[0, ln3], [0, 0]]: row0 = 0.25 v0 + 0.75 v1, row1 = mean
        let ln3 = 3.0f64.ln();
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(), false).unwrap();
        let k = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![ln3]]).unwrap(), false).unwrap();
        let v = tape.leaf(Tensor::from_rows(&[vec![4.0], vec![8.0]]).unwrap(), false).unwrap();
        let a = attention(&mut tape, q, k, v).unwrap();
        assert!((tape.value(a).at2(0, 0) - (0.25 * 4.0 + 0.75 * 8.0)).abs() < 1e-12);
        assert!((tape.value(a).at2(1, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..5);
            let d = rng.gen_range(1..4);
            let rand_mat = |rng: &mut ChaCha8Rng| {
                Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .unwrap()
            };
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(rand_mat(&mut rng), false).unwrap();
            let k = tape.leaf(rand_mat(&mut rng), false).unwrap();
            let vt = rand_mat(&mut rng);
            let v = tape.leaf(vt.clone(), false).unwrap();
            let a = attention(&mut tape, q, k, v).unwrap();
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|i| vt.at2(i, j)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12;
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
                for i in 0..n {
                    let o = tape.value(a).at2(i, j);
                    assert!(o >= lo && o <= hi, "output {o} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn encoder_block_with_zero_output_layers_is_identity() {
        let config = tiny_config(3);
        let mut params = init_params::<f64>(&config, 7).unwrap();
        for name in ["blocks.0.attn.wo", "blocks.0.mlp.w2"] {
            let t = params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let vars = insert_params(&mut tape, &params, false).unwrap();
        let x0 = Tensor::new(
            vec![config.tokens(), config.embed_dim],
            (0..config.tokens() * config.embed_dim).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let x = tape.leaf(x0.clone(), false).unwrap();
        let out = encoder_block(&mut tape, &config, &vars, 0, x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_single_head_matches_one_head_config() {
        let mut config = tiny_config(3);
        config.num_heads = 1;
        let params = init_params::<f64>(&config, 3).unwrap();
        let x0 = Tensor::new(
            vec![config.tokens(), config.embed_dim],
            (0..config.tokens() * config.embed_dim).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap();

        let run = |cfg: &ViTConfig| {
            let mut tape = Tape::new();
            let vars = insert_params(&mut tape, &params, false).unwrap();
            let x = tape.leaf(x0.clone(), false).unwrap();
            let out = encoder_block(&mut tape, cfg, &vars, 0, x).unwrap();
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(&config), run(&config));
    }

    #[test]
    fn encoder_block_preserves_shape() {
        let config = tiny_config(5);
        let params = init_params::<f64>(&config, 19).unwrap();
        let mut tape = Tape::new();
        let vars = insert_params(&mut tape, &params, false).unwrap();
        let x = tape
            .leaf(Tensor::zeros(vec![config.tokens(), config.embed_dim]), false)
            .unwrap();
        let out = encoder_block(&mut tape, &config, &vars, 1, x).unwrap();
        assert_eq!(tape.value(out).shape(), &[config.tokens(), config.embed_dim]);
    }

    fn random_batch(config: &ViTConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = b * config.channels * config.image_size * config.image_size;
        Tensor::new(
            vec![b, config.channels, config.image_size, config.image_size],
            (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_output_shape() {
        let config = tiny_config(7);
        let params = init_params::<f64>(&config, 5).unwrap();
        let batch = random_batch(&config, 3, 101);
        let logits = vit_logits(&config, &params, &batch).unwrap();
        assert_eq!(logits.shape(), &[3, 7]);
    }

    #[test]
    fn forward_is_position_sensitive() {
        let config = tiny_config(4);
        let params = init_params::<f64>(&config, 23).unwrap();
        let batch = random_batch(&config, 1, 55);
        let logits = vit_logits(&config, &params, &batch).unwrap();

        // swap two patches of the input; nonzero positional table must change logits
        let p = config.patch_size;
        let mut swapped = batch.clone();
        {
            let hw = config.image_size;
            let d = swapped.data_mut();
            for y in 0..p {
                for x in 0..p {
                    let a = y * hw + x;
                    let b = y * hw + (x + p);
                    d.swap(a, b);
                }
            }
        }
        let logits2 = vit_logits(&config, &params, &swapped).unwrap();
        let diff: f64 =
            logits.data().iter().zip(logits2.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "permuting patches left logits unchanged");
    }

    #[test]
    fn forward_zero_params_yield_head_bias() {
        let config = tiny_config(4);
        let mut params = init_params::<f64>(&config, 1).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let bias = vec![0.3, -0.7, 0.0, 2.0];
        *params.get_mut("head.bias").unwrap() =
            Tensor::new(vec![4], bias.clone()).unwrap();
        let batch = random_batch(&config, 2, 77);
        let logits = vit_logits(&config, &params, &batch).unwrap();
        for row in 0..2 {
            for (j, b) in bias.iter().enumerate() {
                assert!((logits.at2(row, j) - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config(3);
        let params = init_params::<f64>(&config, 9).unwrap();
        let batch = random_batch(&config, 2, 3);
        let a = vit_logits(&config, &params, &batch).unwrap();
        let b = vit_logits(&config, &params, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_count_matches_shape_walker() {
        for config in [
            tiny_config(10),
            ViTConfig {
                image_size: 32,
                channels: 3,
                patch_size: 4,
                embed_dim: 64,
                num_heads: 4,
                depth: 4,
                mlp_ratio: 2.0,
                num_classes: 10,
                activation: Activation::Gelu,
                layer_norm_eps: 1e-5,
            },
        ] {
            let params = init_params::<f32>(&config, 0).unwrap();
            // the walker sums actual allocated tensor sizes
            let walked: usize = params.iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(walked, config.param_count());
        }
    }

    #[test]
    fn config_validation() {
        let mut bad = tiny_config(2);
        bad.patch_size = 3;
        assert!(bad.validate().is_err());
        let mut bad = tiny_config(2);
        bad.num_heads = 3;
        assert!(bad.validate().is_err());
    }
}
