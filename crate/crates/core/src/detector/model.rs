use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{AnchorConfig, DEFAULT_NEG_POS_RATIO, DEFAULT_POS_THRESHOLD};
use crate::attention::{self, FusionConfig, GcParams, DEFAULT_BOTTLENECK_RATIO};
use crate::error::{shape_err, Error, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

/// Which attention path sits after the second backbone stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    TopDown,
    BottomUpTopDown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Output channels of the four stride-2 stages.
    pub channels: [usize; 4],
    pub feature_dim: usize,
    pub anchors: AnchorConfig,
    pub temperature: f64,
    pub attention: AttentionMode,
    pub bottleneck_ratio: usize,
    pub fusion: FusionConfig,
    pub pos_threshold: f64,
    pub neg_pos_ratio: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub top_k: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            image_size: 64,
            channels: [8, 16, 24, 32],
            feature_dim: 16,
            anchors: AnchorConfig::default(),
            temperature: 10.0,
            attention: AttentionMode::BottomUpTopDown,
            bottleneck_ratio: DEFAULT_BOTTLENECK_RATIO,
            fusion: FusionConfig::default(),
            pos_threshold: DEFAULT_POS_THRESHOLD,
            neg_pos_ratio: DEFAULT_NEG_POS_RATIO,
            nms_iou: 0.45,
            score_threshold: 0.01,
            top_k: 50,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(16) {
            return Err(Error::Config(format!("image_size must be a positive multiple of 16, got {s}")));
        }
        let sizes: Vec<usize> = self.anchors.levels.iter().map(|l| l.size).collect();
        if sizes != [s / 8, s / 16] {
            return Err(Error::Config(format!(
                "anchor levels must match the {}x{0} and {}x{1} head maps, got {sizes:?}",
                s / 8,
                s / 16
            )));
        }
        if self.anchors.aspects.is_empty() || self.channels.contains(&0) || self.feature_dim == 0 {
            return Err(Error::Config("empty layer width or aspect list".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        for (name, v) in [("pos_threshold", self.pos_threshold), ("nms_iou", self.nms_iou), ("score_threshold", self.score_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.neg_pos_ratio < 0.0 {
            return Err(Error::Config("neg_pos_ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Category id held by each non-background classifier row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLayout {
    pub categories: Vec<usize>,
    /// Leading rows (after background) trained in the base stage.
    pub num_base: usize,
}

impl ClassLayout {
    pub fn base(categories: Vec<usize>) -> Self {
        let num_base = categories.len();
        ClassLayout {
            categories,
            num_base,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn row_of(&self, category: usize) -> Option<usize> {
        self.categories.iter().position(|&c| c == category).map(|p| p + 1)
    }

    pub fn category_of(&self, row: usize) -> Option<usize> {
        row.checked_sub(1).and_then(|r| self.categories.get(r).copied())
    }

    pub fn novel_categories(&self) -> &[usize] {
        &self.categories[self.num_base..]
    }
}

pub const CLASSIFIER: &str = "cls.weight";

pub fn stage_names(stage: usize) -> (String, String) {
    (format!("backbone.conv{stage}.weight"), format!("backbone.conv{stage}.bias"))
}

pub fn head_names(level: usize) -> [String; 4] {
    [
        format!("head{level}.feat.weight"),
        format!("head{level}.feat.bias"),
        format!("head{level}.reg.weight"),
        format!("head{level}.reg.bias"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub layout: ClassLayout,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DetectorConfig,
    layout: ClassLayout,
}

impl Detector {
    pub fn init(config: DetectorConfig, layout: ClassLayout, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (s, &c_out) in config.channels.iter().enumerate() {
            let (w, b) = stage_names(s + 1);
            params.insert(w, attention::he_normal(rng, vec![c_out, c_in, 3, 3], c_in * 9));
            params.insert(b, Tensor::zeros(vec![c_out]));
            c_in = c_out;
        }
        GcParams::init(&mut params, config.channels[1], config.bottleneck_ratio, rng);
        let a = config.anchors.per_position();
        let d = config.feature_dim;
        for level in 0..2 {
            let c = config.channels[level + 2];
            let [fw, fb, rw, rb] = head_names(level);
            params.insert(fw, attention::he_normal(rng, vec![a * d, c, 3, 3], c * 9));
            params.insert(fb, Tensor::zeros(vec![a * d]));
            params.insert(rw, scaled(attention::he_normal(rng, vec![a * 4, c, 3, 3], c * 9), 0.1));
            params.insert(rb, Tensor::zeros(vec![a * 4]));
        }
        params.insert(CLASSIFIER, attention::he_normal(rng, vec![layout.num_rows(), d], d));
        Ok(Detector {
            config,
            layout,
            params,
        })
    }

    pub fn classifier(&self) -> &Tensor {
        self.params.get(CLASSIFIER).expect("classifier present")
    }

    pub fn to_checkpoint(&self) -> crate::tensor::Checkpoint {
        let meta = serde_json::to_value(Meta {
            config: self.config.clone(),
            layout: self.layout.clone(),
        })
        .expect("detector meta serializes");
        crate::tensor::Checkpoint::from_params(&self.params, Some(meta))
    }

    pub fn from_checkpoint(ckpt: &crate::tensor::Checkpoint) -> Result<Self> {
        let meta = ckpt
            .meta
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing detector metadata".into()))?;
        let meta: Meta = serde_json::from_value(meta)?;
        meta.config.validate()?;
        let params = ckpt.to_params()?;
        let rows = params
            .get(CLASSIFIER)
            .ok_or_else(|| Error::Checkpoint(format!("missing {CLASSIFIER}")))?
            .shape()[0];
        if rows != meta.layout.num_rows() {
            return Err(Error::Checkpoint(format!(
                "classifier has {rows} rows, layout expects {}",
                meta.layout.num_rows()
            )));
        }
        Ok(Detector {
            config: meta.config,
            layout: meta.layout,
            params,
        })
    }
}

fn scaled(t: Tensor, f: f64) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::from_parts(shape, t.into_data().into_iter().map(|v| v * f).collect())
}

/// Per-anchor outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `[A, rows]` cosine logits.
    pub logits: Var,
    /// `[A, 4]` encoded box offsets.
    pub offsets: Var,
    /// `[A, D]` penultimate features `f_i`.
    pub features: Var,
    /// `[16,16]` top-down map when the GC block is active.
    pub attention: Option<Var>,
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// `[A·D, H, W]` head output to `[H·W·A, D]` rows in anchor order.
fn per_anchor(tape: &mut Tape, x: Var, a: usize, d: usize) -> Result<Var> {
    let [ad, h, w] = *tape.shape(x) else {
        return Err(shape_err("head", format!("{:?}", tape.shape(x))));
    };
    let x = tape.reshape(x, &[ad, h * w])?;
    let x = tape.transpose(x)?;
    tape.reshape(x, &[h * w * a, d])
}

/// Forward pass. `saliency` is required in bottom-up mode and ignored otherwise.
pub fn forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    image: &Tensor,
    saliency: Option<&SaliencyMap>,
    cfg: &DetectorConfig,
) -> Result<Outputs> {
    let s = cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(shape_err("forward", format!("image {:?}, expected [3,{s},{s}]", image.shape())));
    }
    let centered = image.data().iter().map(|v| v - 0.5).collect();
    let mut x = tape.constant(Tensor::from_parts(image.shape().to_vec(), centered));
    let mut stages = Vec::with_capacity(4);
    let mut attention_map = None;
    for stage in 1..=4 {
        let (w, b) = stage_names(stage);
        x = tape.conv2d(x, lookup(vars, &w)?, Some(lookup(vars, &b)?), 2, 1)?;
        x = tape.relu(x)?;
        if stage == 2 && cfg.attention != AttentionMode::None {
            let gc = GcParams::from_vars(vars)?;
            let out = attention::gc_block(tape, x, &gc)?;
            x = out.features;
            attention_map = Some(out.attention);
            if cfg.attention == AttentionMode::BottomUpTopDown {
                let sal = saliency.ok_or_else(|| {
                    Error::Config("bottom-up attention requires a saliency map".into())
                })?;
                x = attention::fuse_bottom_up(tape, x, sal, &cfg.fusion)?;
            }
        }
        stages.push(x);
    }
    let a = cfg.anchors.per_position();
    let d = cfg.feature_dim;
    let mut feats = Vec::with_capacity(2);
    let mut offs = Vec::with_capacity(2);
    for level in 0..2 {
        let [fw, fb, rw, rb] = head_names(level);
        let src = stages[level + 2];
        let f = tape.conv2d(src, lookup(vars, &fw)?, Some(lookup(vars, &fb)?), 1, 1)?;
        feats.push(per_anchor(tape, f, a, d)?);
        let r = tape.conv2d(src, lookup(vars, &rw)?, Some(lookup(vars, &rb)?), 1, 1)?;
        offs.push(per_anchor(tape, r, a, 4)?);
    }
    let features = tape.concat_rows(&feats)?;
    let offsets = tape.concat_rows(&offs)?;
    let logits = cosine_logits(tape, features, lookup(vars, CLASSIFIER)?, cfg.temperature)?;
    Ok(Outputs {
        logits,
        offsets,
        features,
        attention: attention_map,
    })
}

/// `temperature · f̂_i · ŵ_j`.
pub fn cosine_logits(tape: &mut Tape, features: Var, weights: Var, temperature: f64) -> Result<Var> {
    let f = tape.l2_normalize_rows(features)?;
    let w = tape.l2_normalize_rows(weights)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(f, wt)?;
    tape.scale(cos, temperature)
}

/// Plain-value forward with every parameter held constant.
pub fn predict(det: &Detector, image: &Tensor, saliency: Option<&SaliencyMap>) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = det.params.register(&mut tape, false);
    let out = forward(&mut tape, &vars, image, saliency, &det.config)?;
    Ok(Prediction {
        logits: tape.value(out.logits).clone(),
        offsets: tape.value(out.offsets).clone(),
        features: tape.value(out.features).clone(),
        attention: out.attention.map(|a| tape.value(a).clone()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub offsets: Tensor,
    pub features: Tensor,
    pub attention: Option<Tensor>,
}

/// Per-anchor background cross-entropy `−log softmax(logits_i)[0]`.
pub fn background_losses(logits: &Tensor) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[0]
        })
        .collect()
}
