//! Stage 1: self-supervised contrastive learning. Two-view flip
//! augmentation, the spatial-preserving spectral encoder, the projection
//! head, and the normalized temperature-scaled cross-entropy loss.

use crate::dataset::Patch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorId};

pub const ENCODER_HIDDEN: usize = 128;
pub const PROJECTION_HIDDEN: usize = 128;
pub const PROJECTION_DIM: usize = 64;

/// Per-pixel spectral map with shared weights across the p x p positions:
/// bands -> 128 -> h, ReLU after each layer, dropout between them.
/// Output keeps the spatial extents: p x p x h for a p x p x bands input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub bands: usize,
    pub hidden: usize,
}

impl EncoderParams {
    pub fn init(bands: usize, hidden: usize, rng: &mut Rng) -> Self {
        EncoderParams {
            w1: Tensor::init_uniform(ENCODER_HIDDEN, bands, bands, rng),
            b1: Tensor::zeros(vec![ENCODER_HIDDEN]),
            w2: Tensor::init_uniform(hidden, ENCODER_HIDDEN, ENCODER_HIDDEN, rng),
            b2: Tensor::zeros(vec![hidden]),
            bands,
            hidden,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("encoder.w1", &self.w1),
            ("encoder.b1", &self.b1),
            ("encoder.w2", &self.w2),
            ("encoder.b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("encoder.w1", &mut self.w1),
            ("encoder.b1", &mut self.b1),
            ("encoder.w2", &mut self.w2),
            ("encoder.b2", &mut self.b2),
        ]
    }
}

/// Two fully connected layers on the flattened p*p*h encoder output:
/// p*p*h -> 128 (ReLU, dropout) -> 64, no activation after the final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub input_dim: usize,
}

impl ProjectionParams {
    pub fn init(input_dim: usize, rng: &mut Rng) -> Self {
        ProjectionParams {
            w1: Tensor::init_uniform(PROJECTION_HIDDEN, input_dim, input_dim, rng),
            b1: Tensor::zeros(vec![PROJECTION_HIDDEN]),
            w2: Tensor::init_uniform(PROJECTION_DIM, PROJECTION_HIDDEN, PROJECTION_HIDDEN, rng),
            b2: Tensor::zeros(vec![PROJECTION_DIM]),
            input_dim,
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("projection.w1", &self.w1),
            ("projection.b1", &self.b1),
            ("projection.w2", &self.w2),
            ("projection.b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("projection.w1", &mut self.w1),
            ("projection.b1", &mut self.b1),
            ("projection.w2", &mut self.w2),
            ("projection.b2", &mut self.b2),
        ]
    }
}

/// Two augmented views of one patch; both keep the source shape.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Vec<f32>,
    pub view_b: Vec<f32>,
}

fn flip_spatial(pixels: &[f32], p: usize, bands: usize, hflip: bool, vflip: bool) -> Vec<f32> {
    let mut out = vec![0.0f32; pixels.len()];
    for r in 0..p {
        for c in 0..p {
            let sr = if vflip { p - 1 - r } else { r };
            let sc = if hflip { p - 1 - c } else { c };
            let src = (sr * p + sc) * bands;
            let dst = (r * p + c) * bands;
            out[dst..dst + bands].copy_from_slice(&pixels[src..src + bands]);
        }
    }
    out
}

/// Each view independently applies a random horizontal flip (prob 0.5) and a
/// random vertical flip (prob 0.5) to the spatial axes; bands untouched.
pub fn augment(patch: &Patch, p: usize, bands: usize, rng: &mut Rng) -> ViewPair {
    let make_view = |rng: &mut Rng| {
        let hflip = rng.coin();
        let vflip = rng.coin();
        flip_spatial(&patch.pixels, p, bands, hflip, vflip)
    };
    ViewPair {
        view_a: make_view(rng),
        view_b: make_view(rng),
    }
}

/// Tape handles for encoder parameters inserted as leaves.
pub struct EncoderIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn encoder_leaves(tape: &mut Tape, params: &EncoderParams) -> EncoderIds {
    EncoderIds {
        w1: tape.leaf(params.w1.clone()),
        b1: tape.leaf(params.b1.clone()),
        w2: tape.leaf(params.w2.clone()),
        b2: tape.leaf(params.b2.clone()),
    }
}

pub struct ProjectionIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn projection_leaves(tape: &mut Tape, params: &ProjectionParams) -> ProjectionIds {
    ProjectionIds {
        w1: tape.leaf(params.w1.clone()),
        b1: tape.leaf(params.b1.clone()),
        w2: tape.leaf(params.w2.clone()),
        b2: tape.leaf(params.b2.clone()),
    }
}

/// Forward pass of the encoder over a batch of n flattened patches
/// (shape n x p*p*bands), producing n x p*p*h.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    ids: &EncoderIds,
    x: TensorId,
    n: usize,
    patch_size: usize,
    bands: usize,
    hidden: usize,
    dropout_rate: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<TensorId> {
    let spatial = patch_size * patch_size;
    let got = tape.value(x).shape().to_vec();
    if got != [n, spatial * bands] {
        return Err(Error::shape(
            "encode",
            format!("[{n}, {}]", spatial * bands),
            format!("{got:?}"),
        ));
    }
    let per_pixel = tape.reshape(x, vec![n * spatial, bands])?;
    let h1 = tape.affine(per_pixel, ids.w1, ids.b1)?;
    let h1 = tape.relu(h1);
    let h1 = tape.dropout(h1, dropout_rate, rng, training)?;
    let h2 = tape.affine(h1, ids.w2, ids.b2)?;
    let h2 = tape.relu(h2);
    tape.reshape(h2, vec![n, spatial * hidden])
}

/// Projection head: n x p*p*h -> n x 64, l2-normalized rows.
pub fn project(
    tape: &mut Tape,
    ids: &ProjectionIds,
    h: TensorId,
    dropout_rate: f32,
    rng: &mut Rng,
    training: bool,
) -> Result<TensorId> {
    let z = tape.affine(h, ids.w1, ids.b1)?;
    let z = tape.relu(z);
    let z = tape.dropout(z, dropout_rate, rng, training)?;
    let z = tape.affine(z, ids.w2, ids.b2)?;
    tape.l2_normalize_rows(z)
}

/// NT-Xent over 2N projections paired as (2k, 2k+1) row-wise. Cosine
/// similarities scaled by the temperature, self-similarity excluded, and the
/// loss averaged over all 2N ordered positive pairs. Computed with
/// max-shifted log-sum-exp via the log-softmax primitive.
pub fn nt_xent(tape: &mut Tape, z: TensorId, temperature: f32) -> Result<TensorId> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("nt_xent", "2N x d matrix", format!("{shape:?}")));
    }
    let two_n = shape[0];
    if !two_n.is_multiple_of(2) || two_n < 2 {
        return Err(Error::InvalidArgument(format!(
            "nt_xent needs an even number of views >= 2, got {two_n}"
        )));
    }
    // Cosine similarity: normalize then dot products.
    let zn = tape.l2_normalize_rows(z)?;
    let sim = tape.matmul_nt(zn, zn)?;
    let sim = tape.scale(sim, 1.0 / temperature);
    // Exclude self-similarity by pushing the diagonal far below any real
    // scaled cosine.
    let mut mask = vec![0.0f32; two_n * two_n];
    for i in 0..two_n {
        mask[i * two_n + i] = -1.0e9;
    }
    let mask = tape.leaf(Tensor::matrix(two_n, two_n, mask)?);
    let masked = tape.add(sim, mask)?;
    let log_probs = tape.log_softmax_rows(masked);
    let pos_indices: Vec<usize> = (0..two_n).map(|i| i * two_n + (i ^ 1)).collect();
    let pos = tape.gather(log_probs, pos_indices)?;
    let mean = tape.mean(pos);
    Ok(tape.scale(mean, -1.0))
}
