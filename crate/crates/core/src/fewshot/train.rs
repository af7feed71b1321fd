use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{novel_loss, Hyperparams};
use super::support::SupportSet;
use crate::detector::{
    background_losses, detect, evaluate_map, forward, generate_anchors, hard_negative_mining, match_anchors,
    predict, AnchorSet, Detection, Detector, GroundTruth, GtBox, MatchResult, Prediction, CLASSIFIER,
};
use crate::error::{Error, Result};
use crate::saliency::{SaliencyConfig, SaliencyMap};
use crate::synthdata::{Scene, SplitSpec};
use crate::tensor::{ParamSet, Sgd, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) at whose start the rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    /// Global L2 norm cap on each batch gradient; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_steps: vec![31],
            lr_decay: 0.1,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for fine-tuning on a support set.
    pub fn novel() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr_steps: vec![23],
            ..TrainConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| s <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let rates = [self.lr, self.momentum, self.weight_decay, self.lr_decay, self.clip_norm];
        if rates.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("lr, momentum, weight_decay, lr_decay and clip_norm must be >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_bbox: f64,
    pub loss_conc_pos: f64,
    pub loss_conc_neg: f64,
    pub loss_dist: f64,
    pub lr: f64,
}

/// Annotated objects of `scene` whose category has a classifier row.
pub fn scene_targets(det: &Detector, scene: &Scene) -> Vec<GtBox> {
    scene
        .annotated()
        .filter_map(|o| det.layout.row_of(o.class_id).map(|row| GtBox { bbox: o.bbox, row }))
        .collect()
}

struct Sample<'a> {
    scene: &'a Scene,
    gt: Vec<GtBox>,
    matches: MatchResult,
    saliency: SaliencyMap,
    frozen: Option<Prediction>,
}

fn prepare<'a>(
    det: &Detector,
    anchors: &AnchorSet,
    scenes: &'a [Scene],
    saliency: &SaliencyConfig,
    frozen: Option<&Detector>,
) -> Result<Vec<Sample<'a>>> {
    scenes
        .iter()
        .map(|scene| {
            let gt = scene_targets(det, scene);
            let matches = match_anchors(anchors, &gt, det.config.pos_threshold);
            let sal = saliency.compute(scene)?;
            let frozen = frozen.map(|b| predict(b, &scene.image, Some(&sal))).transpose()?;
            Ok(Sample {
                scene,
                gt,
                matches,
                saliency: sal,
                frozen,
            })
        })
        .collect()
}

fn run_epochs(
    det: &mut Detector,
    samples: &[Sample],
    anchors: &AnchorSet,
    hp: &Hyperparams,
    cfg: &TrainConfig,
    stage: &str,
    sink: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        sgd.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<ParamSet> = None;
            for &s in batch {
                let sample = &samples[s];
                let mut tape = Tape::new();
                let vars = det.params.register(&mut tape, true);
                let diverged = |e: Error| match e {
                    Error::NonFinite(op) => Error::Diverged {
                        stage: stage.to_string(),
                        epoch,
                        detail: format!("non-finite value in {op}"),
                    },
                    e => e,
                };
                let out = forward(&mut tape, &vars, &sample.scene.image, Some(&sample.saliency), &det.config)
                    .map_err(diverged)?;
                let mut matches = sample.matches.clone();
                hard_negative_mining(&background_losses(tape.value(out.logits)), &mut matches, det.config.neg_pos_ratio);
                let loss = novel_loss(
                    &mut tape,
                    &out,
                    vars[CLASSIFIER],
                    &matches,
                    anchors,
                    &sample.gt,
                    sample.frozen.as_ref(),
                    hp,
                )
                .map_err(diverged)?;
                let parts = [loss.total, loss.cls, loss.bbox, loss.conc_pos, loss.conc_neg, loss.dist];
                for (acc, v) in sums.iter_mut().zip(parts) {
                    *acc += tape.value(v).item()?;
                }
                let total = tape.value(loss.total).item()?;
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        stage: stage.to_string(),
                        epoch,
                        detail: format!("loss {total} on scene seed {}", sample.scene.seed),
                    });
                }
                let g = ParamSet::collect_grads(&vars, &tape.backward(loss.total)?);
                match grads.as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    stage: stage.to_string(),
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            if cfg.clip_norm > 0.0 {
                let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > cfg.clip_norm {
                    grads.scale(cfg.clip_norm / norm);
                }
            }
            sgd.step(&mut det.params, &grads)?;
        }
        if !det.params.all_finite() {
            return Err(Error::Diverged {
                stage: stage.to_string(),
                epoch,
                detail: "non-finite parameter".into(),
            });
        }
        let n = samples.len().max(1) as f64;
        let m = EpochMetrics {
            stage: stage.to_string(),
            epoch,
            loss_total: sums[0] / n,
            loss_cls: sums[1] / n,
            loss_bbox: sums[2] / n,
            loss_conc_pos: sums[3] / n,
            loss_conc_neg: sums[4] / n,
            loss_dist: sums[5] / n,
            lr: sgd.lr,
        };
        sink(&m)?;
        log.push(m);
    }
    Ok(log)
}

/// Plain detection training, `(Lcls + α·Lbbox) / max(N,1)` per image.
pub fn train_base(
    det: &mut Detector,
    scenes: &[Scene],
    saliency: &SaliencyConfig,
    alpha: f64,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let anchors = generate_anchors(&det.config.anchors)?;
    let samples = prepare(det, &anchors, scenes, saliency, None)?;
    let hp = Hyperparams {
        alpha,
        beta: 0.0,
        eta: 0.0,
        gamma: 0.0,
        ..Hyperparams::default()
    };
    run_epochs(det, &samples, &anchors, &hp, cfg, "base", sink)
}

/// Fine-tunes an imprinted detector on the support set with the full novel
/// objective. `frozen` is the base detector used for distillation.
pub fn train_novel(
    det: &mut Detector,
    frozen: &Detector,
    support: &SupportSet,
    saliency: &SaliencyConfig,
    hp: &Hyperparams,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    hp.validate()?;
    if det.layout.categories[..det.layout.num_base] != frozen.layout.categories[..] {
        return Err(Error::Config("novel detector's base rows do not match the frozen detector".into()));
    }
    det.config.fusion.epsilon = hp.epsilon;
    let anchors = generate_anchors(&det.config.anchors)?;
    let samples = prepare(det, &anchors, &support.scenes, saliency, Some(frozen))?;
    run_epochs(det, &samples, &anchors, hp, cfg, "novel", sink)
}

/// Complete ground truth of `scenes`, with `image_id` the scene index.
pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.objects.iter().map(move |o| GroundTruth {
                image_id: i,
                class: o.class_id,
                bbox: o.bbox.to_array(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_map: f64,
    pub novel_map: f64,
    pub all_map: f64,
    pub per_class: BTreeMap<usize, f64>,
}

pub fn run_detector(det: &Detector, scenes: &[Scene], saliency: &SaliencyConfig) -> Result<Vec<Detection>> {
    let anchors = generate_anchors(&det.config.anchors)?;
    let mut dets = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let sal = saliency.compute(scene)?;
        let pred = predict(det, &scene.image, Some(&sal))?;
        dets.extend(detect(&pred, &anchors, &det.layout, &det.config, i)?);
    }
    Ok(dets)
}

/// VOC-style evaluation against complete annotations.
pub fn evaluate(
    det: &Detector,
    scenes: &[Scene],
    split: &SplitSpec,
    saliency: &SaliencyConfig,
) -> Result<(EvalReport, Vec<Detection>)> {
    let dets = run_detector(det, scenes, saliency)?;
    let report = evaluate_map(&dets, &ground_truth(scenes), 0.5);
    Ok((
        EvalReport {
            base_map: report.mean_over(&split.base()),
            novel_map: report.mean_over(&split.novel),
            all_map: report.map,
            per_class: report.per_class,
        },
        dets,
    ))
}

/// Mean `cos(f_i, w_row)` over positive anchors of annotated objects in
/// `scenes` whose category has a row.
pub fn positive_cosine(det: &Detector, scenes: &[Scene], saliency: &SaliencyConfig) -> Result<f64> {
    let anchors = generate_anchors(&det.config.anchors)?;
    let d = det.config.feature_dim;
    let w = det.classifier().data();
    let (mut sum, mut n) = (0.0, 0usize);
    for scene in scenes {
        let gt = scene_targets(det, scene);
        if gt.is_empty() {
            continue;
        }
        let m = match_anchors(&anchors, &gt, det.config.pos_threshold);
        let sal = saliency.compute(scene)?;
        let pred = predict(det, &scene.image, Some(&sal))?;
        for i in m.positive_indices() {
            let f = &pred.features.data()[i * d..(i + 1) * d];
            let row = m.positive[i].expect("positive");
            let r = &w[row * d..(row + 1) * d];
            sum += cosine(f, r);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
