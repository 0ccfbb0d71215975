//! The four frozen toy networks.
//!
//! All take images in `[0, 1]` and first map them to `[-1, 1]`. The
//! projector, attention encoder and embedder area-resize their input to a
//! fixed 8×8 canvas, so they accept any image with sides of at least 16.

use crate::tensor::{ResizeMode, Tape, Tensor, TensorError, Var};

use super::layers::{Conv, Linear, WeightRng};

/// Side of the canvas seen by the encoders.
const CANVAS: usize = 8;
/// Side of the encoder feature grid.
const GRID: usize = 4;

fn normalize_input<'t>(x: Var<'t>) -> Var<'t> {
    x.scale(2.0).add_scalar(-1.0)
}

fn check_image(op: &'static str, x: &Var<'_>, min_side: usize) -> Result<(), TensorError> {
    match x.shape()[..] {
        [3, h, w] if h >= min_side && w >= min_side => Ok(()),
        ref s => Err(TensorError::invalid(
            op,
            format!("expected [3, h, w] image with sides >= {min_side}, got {s:?}"),
        )),
    }
}

/// Area resize to 8×8, then a stride-2 and a stride-1 conv + tanh stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ConvStack {
    fn init(rng: &mut WeightRng, c1: usize, c2: usize, g: f64) -> Self {
        ConvStack {
            conv1: Conv::init_scaled(rng, 3, c1, 3, 2, 1, g),
            conv2: Conv::init_scaled(rng, c1, c2, 3, 1, 1, g),
        }
    }

    /// Returns `[c2, 4, 4]` features.
    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        let x = x.resize((CANVAS, CANVAS), ResizeMode::Area)?;
        let h = self.conv1.forward(tape, normalize_input(x))?.tanh();
        Ok(self.conv2.forward(tape, h)?.tanh())
    }

    fn out_channels(&self) -> usize {
        self.conv2.weight.shape()[0]
    }
}

/// Face projector: image → `[seq, d]` condition tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceProjector {
    pub encoder: ConvStack,
    pub head: Linear,
    pub seq: usize,
    pub dim: usize,
}

impl FaceProjector {
    pub const SEQ: usize = 4;
    pub const DIM: usize = 16;

    pub fn init(rng: &mut WeightRng) -> Self {
        let encoder = ConvStack::init(rng, 8, 16, 1.0);
        let head = Linear::init(rng, 16 * GRID * GRID, Self::SEQ * Self::DIM);
        FaceProjector {
            encoder,
            head,
            seq: Self::SEQ,
            dim: Self::DIM,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        check_image("project_condition", &x, 16)?;
        let feats = self.encoder.forward(tape, x)?;
        self.head
            .forward(tape, feats)?
            .reshape(&[self.seq, self.dim])
    }
}

/// Single-head cross-attention: queries from an image, keys from condition tokens.
///
/// Only the attention map is produced; no value product is computed.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub query_encoder: ConvStack,
    pub w_q: Tensor,
    pub w_k: Tensor,
}

impl CrossAttentionBlock {
    pub const HEADS: usize = 1;
    pub const RES: usize = GRID * GRID;
    pub const DIM: usize = 16;

    pub fn init(rng: &mut WeightRng) -> Self {
        let query_encoder = ConvStack::init(rng, 8, Self::DIM, 2.0);
        let w_q = rng.scaled(&[Self::DIM, Self::DIM], Self::DIM, 6.0);
        let w_k = rng.scaled(&[FaceProjector::DIM, Self::DIM], FaceProjector::DIM, 6.0);
        CrossAttentionBlock {
            query_encoder,
            w_q,
            w_k,
        }
    }

    /// `Q`: `[1, res, d]`.
    pub fn query<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        check_image("attention query", &x, 16)?;
        let c = self.query_encoder.out_channels();
        let feats = self
            .query_encoder
            .forward(tape, x)?
            .reshape(&[c, Self::RES])?;
        let q = feats.transpose()?.matmul(&tape.constant(&self.w_q))?;
        q.reshape(&[Self::HEADS, Self::RES, Self::DIM])
    }

    /// `softmax(Q Kᵀ / sqrt(d))` over the token axis: `[1, res, seq]`.
    pub fn attention_map<'t>(
        &self,
        tape: &'t Tape,
        query: Var<'t>,
        tokens: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        let seq = match tokens.shape()[..] {
            [s, d] if d == FaceProjector::DIM => s,
            ref s => {
                return Err(TensorError::invalid(
                    "attention_forward",
                    format!("tokens must be [seq, {}], got {s:?}", FaceProjector::DIM),
                ))
            }
        };
        let k =
            tokens
                .matmul(&tape.constant(&self.w_k))?
                .reshape(&[Self::HEADS, seq, Self::DIM])?;
        let logits = query
            .matmul(&k.transpose()?)?
            .scale(1.0 / (Self::DIM as f64).sqrt());
        logits.softmax(2)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x_query: Var<'t>,
        tokens: Var<'t>,
    ) -> Result<Var<'t>, TensorError> {
        let q = self.query(tape, x_query)?;
        self.attention_map(tape, q, tokens)
    }
}

/// Fully convolutional proposal net with a 12×12 receptive field and stride 2.
#[derive(Clone, Debug, PartialEq)]
pub struct PNetToy {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub head: Conv,
}

impl PNetToy {
    pub const MIN_SIDE: usize = 12;

    pub fn init(rng: &mut WeightRng) -> Self {
        let mut conv1 = Conv::init_scaled(rng, 3, 10, 3, 1, 0, 2.0);
        // zero-mean 3×3 kernels per input channel: flat regions of any colour respond alike
        for k in conv1.weight.data_mut().chunks_mut(9) {
            let mean = k.iter().sum::<f64>() / 9.0;
            k.iter_mut().for_each(|v| *v -= mean);
        }
        PNetToy {
            conv1,
            conv2: Conv::init_scaled(rng, 10, 16, 3, 1, 0, 2.0),
            conv3: Conv::init_scaled(rng, 16, 32, 3, 1, 0, 2.0),
            head: Conv::init_scaled(rng, 32, 2, 1, 1, 0, 1.0),
        }
    }

    /// Output side for an input side: `ceil((side - 10) / 2)`.
    pub fn output_side(side: usize) -> usize {
        (side - 10).div_ceil(2)
    }

    /// `[2, h', w']`: channel 0 is the non-face probability, channel 1 the face probability.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        check_image("pnet_forward", &x, Self::MIN_SIDE)?;
        let h = self.conv1.forward(tape, normalize_input(x))?.tanh();
        // 2×2 pooling in ceil mode: pad odd sides by one zero row/column
        let shape = h.shape();
        let h = h.pad2d(0, shape[1] % 2, 0, shape[2] % 2)?;
        let h = h.pool_avg((2, 2), (2, 2))?;
        let h = self.conv2.forward(tape, h)?.tanh();
        let h = self.conv3.forward(tape, h)?.tanh();
        self.head.forward(tape, h)?.softmax(0)
    }

    /// `(P_F, P_T)`.
    pub fn probabilities<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), TensorError> {
        let out = self.forward(tape, x)?;
        Ok((out.select(0)?, out.select(1)?))
    }
}

/// Identity embedder: image → unit-norm `[128]` embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedder {
    pub encoder: ConvStack,
    pub head: Linear,
}

impl IdentityEmbedder {
    pub const DIM: usize = 128;

    pub fn init(rng: &mut WeightRng) -> Self {
        let encoder = ConvStack::init(rng, 16, 32, 24.0);
        let head = Linear::init_scaled(rng, 32 * GRID * GRID, Self::DIM, 1.0, 0.0);
        IdentityEmbedder { encoder, head }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        check_image("embed_identity", &x, 16)?;
        let c = self.encoder.out_channels();
        let n = GRID * GRID;
        // subtract each channel's spatial mean
        let centering = Tensor::from_fn(&[n, n], |i| {
            f64::from(u8::from(i / n == i % n)) - 1.0 / n as f64
        });
        let feats = self
            .encoder
            .forward(tape, x)?
            .reshape(&[c, n])?
            .matmul(&tape.constant(&centering))?;
        self.head
            .forward(tape, feats)?
            .reshape(&[Self::DIM])?
            .l2_normalize()
    }
}
