//! Top-down global-context attention and bottom-up saliency fusion.
//!
//! For features `y: [C,H,W]` the block computes
//!
//! ```text
//! h  = softmax over all H·W positions of (W_k * y)          [H,W]
//! y' = Σ_ij y[:,i,j] · h[i,j]                               [C]
//! z  = y + W_v2 · ReLU(LN(W_v1 · y'))    (broadcast to every pixel)
//! z' = z ⊙ ln(ε + s)                     (s: saliency pooled to H×W)
//! ```
//!
//! `W_k`, `W_v1`, `W_v2` are bias-free 1×1 convolutions; the bottleneck has
//! `max(1, C / ratio)` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_BOTTLENECK_RATIO: usize = 4;

pub fn bottleneck_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// Tape handles for the block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GcParams {
    pub w_k: Var,
    pub w_v1: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w_v2: Var,
}

impl GcParams {
    pub const W_K: &'static str = "gc.w_k";
    pub const W_V1: &'static str = "gc.w_v1";
    pub const LN_GAIN: &'static str = "gc.ln_gain";
    pub const LN_BIAS: &'static str = "gc.ln_bias";
    pub const W_V2: &'static str = "gc.w_v2";

    /// Looks the block's parameters up by canonical name.
    pub fn from_vars(vars: &std::collections::BTreeMap<String, Var>) -> Result<Self> {
        let get = |name: &str| {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        Ok(GcParams {
            w_k: get(Self::W_K)?,
            w_v1: get(Self::W_V1)?,
            ln_gain: get(Self::LN_GAIN)?,
            ln_bias: get(Self::LN_BIAS)?,
            w_v2: get(Self::W_V2)?,
        })
    }

    /// Inserts freshly initialized block parameters for `channels` inputs.
    /// `W_v2` starts at zero so the block begins as the identity.
    pub fn init(params: &mut ParamSet, channels: usize, ratio: usize, rng: &mut impl Rng) {
        let cb = bottleneck_width(channels, ratio);
        params.insert(Self::W_K, he_normal(rng, vec![1, channels, 1, 1], channels));
        params.insert(Self::W_V1, he_normal(rng, vec![cb, channels, 1, 1], channels));
        params.insert(Self::LN_GAIN, Tensor::full(vec![cb], 1.0));
        params.insert(Self::LN_BIAS, Tensor::zeros(vec![cb]));
        params.insert(Self::W_V2, Tensor::zeros(vec![channels, cb, 1, 1]));
    }
}

pub(crate) fn he_normal(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    // Box-Muller keeps the stream independent of distribution-crate versions.
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Spatial softmax of the 1×1 projection `W_k * y`; output `[H,W]`.
pub fn topdown_map(tape: &mut Tape, features: Var, w_k: Var) -> Result<Var> {
    let logits = tape.conv2d(features, w_k, None, 1, 0)?;
    let shape = tape.shape(logits).to_vec();
    let logits = tape.reshape(logits, &shape[1..])?;
    tape.softmax(logits)
}

/// Attention-weighted sum of feature vectors; output `[C]`.
pub fn global_context(tape: &mut Tape, features: Var, attention: Var) -> Result<Var> {
    let [c, h, w] = *tape.shape(features) else {
        return Err(crate::error::shape_err(
            "global_context",
            format!("features {:?}", tape.shape(features)),
        ));
    };
    if tape.shape(attention) != [h, w] {
        return Err(crate::error::shape_err(
            "global_context",
            format!("attention {:?} for features {:?}", tape.shape(attention), [c, h, w]),
        ));
    }
    let y = tape.reshape(features, &[c, h * w])?;
    let a = tape.reshape(attention, &[h * w, 1])?;
    let ctx = tape.matmul(y, a)?;
    tape.reshape(ctx, &[c])
}

pub struct GcOutput {
    /// Fused features `z`, `[C,H,W]`.
    pub features: Var,
    /// Top-down attention map `h`, `[H,W]`.
    pub attention: Var,
}

pub fn gc_block(tape: &mut Tape, features: Var, params: &GcParams) -> Result<GcOutput> {
    let attention = topdown_map(tape, features, params.w_k)?;
    let ctx = global_context(tape, features, attention)?;
    let c = tape.shape(ctx)[0];
    let t = tape.reshape(ctx, &[c, 1, 1])?;
    let t = tape.conv2d(t, params.w_v1, None, 1, 0)?;
    let cb = tape.shape(t)[0];
    let t = tape.reshape(t, &[cb])?;
    let t = tape.layer_norm(t, params.ln_gain, params.ln_bias, LN_EPS)?;
    let t = tape.relu(t)?;
    let t = tape.reshape(t, &[cb, 1, 1])?;
    let t = tape.conv2d(t, params.w_v2, None, 1, 0)?;
    let t = tape.reshape(t, &[c])?;
    let features = tape.add_channel(features, t)?;
    Ok(GcOutput {
        features,
        attention,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            epsilon: std::f64::consts::E,
        }
    }
}

/// Per-pixel factor `ln(ε + s)` with `s` pooled to `h×w`.
pub fn fusion_weights(saliency: &SaliencyMap, h: usize, w: usize, cfg: &FusionConfig) -> Result<Tensor> {
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::Config(format!("fusion epsilon must be > 0, got {}", cfg.epsilon)));
    }
    let pooled = saliency.downscale(h, w);
    Tensor::new(
        vec![h, w],
        pooled.values().iter().map(|s| (cfg.epsilon + s).ln()).collect(),
    )
}

/// Scales every channel of `z` by `ln(ε + s)`. The saliency is a constant:
/// gradients reach `z` only.
pub fn fuse_bottom_up(tape: &mut Tape, z: Var, saliency: &SaliencyMap, cfg: &FusionConfig) -> Result<Var> {
    let [_, h, w] = *tape.shape(z) else {
        return Err(crate::error::shape_err("fuse_bottom_up", format!("{:?}", tape.shape(z))));
    };
    let weights = fusion_weights(saliency, h, w, cfg)?;
    let m = tape.constant(weights);
    tape.mul_spatial(z, m)
}
