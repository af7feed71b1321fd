use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::anchors::AnchorSet;
use super::boxes::{decode_box, iou, BBox};
use super::model::{ClassLayout, DetectorConfig, Prediction};
use crate::error::Result;
use crate::tensor::softmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    /// Category id.
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

fn as_box(b: &[f64; 4]) -> BBox {
    BBox {
        cx: b[0],
        cy: b[1],
        w: b[2],
        h: b[3],
    }
}

/// Greedy single-class suppression. Returns kept indices in descending score
/// order; equal scores go to the lower index.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64, score_thr: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).filter(|&i| scores[i] >= score_thr).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= top_k {
            break;
        }
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thr) {
            keep.push(i);
        }
    }
    keep
}

/// Decodes one image's prediction into per-class suppressed detections.
pub fn detect(
    pred: &Prediction,
    anchors: &AnchorSet,
    layout: &ClassLayout,
    cfg: &DetectorConfig,
    image_id: usize,
) -> Result<Vec<Detection>> {
    let k = layout.num_rows();
    let probs: Vec<Vec<f64>> = pred.logits.data().chunks(k).map(softmax).collect();
    let boxes = pred
        .offsets
        .data()
        .chunks(4)
        .zip(&anchors.boxes)
        .map(|(o, a)| decode_box(&[o[0], o[1], o[2], o[3]], a))
        .collect::<Result<Vec<_>>>()?;
    let mut dets = Vec::new();
    for row in 1..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[row]).collect();
        let class = layout.category_of(row).expect("row within layout");
        for i in nms(&boxes, &scores, cfg.nms_iou, cfg.score_threshold, cfg.top_k) {
            dets.push(Detection {
                image_id,
                class,
                score: scores[i],
                bbox: boxes[i].to_array(),
            });
        }
    }
    Ok(dets)
}

/// 11-point interpolated AP from a ranked hit/miss list.
pub fn average_precision_11(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(hits.len());
    for (n, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            curve
                .iter()
                .filter(|(r, _)| *r >= t)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// AP for every class with at least one ground-truth box.
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

impl MapReport {
    /// Mean AP over `classes` that have ground truth; 0 when none do.
    pub fn mean_over(&self, classes: &[usize]) -> f64 {
        let aps: Vec<f64> = classes.iter().filter_map(|c| self.per_class.get(c)).copied().collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

/// Per-class matching by descending score: a detection is a hit when its
/// best-IoU gt in the same image reaches `iou_thr` and is still unclaimed.
pub fn evaluate_map(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MapReport {
    let mut per_class = BTreeMap::new();
    let classes: std::collections::BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    for &class in &classes {
        let class_gt: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        class_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut claimed = vec![false; class_gt.len()];
        let hits: Vec<bool> = class_dets
            .iter()
            .map(|d| {
                let db = as_box(&d.bbox);
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in class_gt.iter().enumerate() {
                    if gt.image_id != d.image_id {
                        continue;
                    }
                    let o = iou(&db, &as_box(&gt.bbox));
                    if best.is_none_or(|(_, b)| o > b) {
                        best = Some((g, o));
                    }
                }
                match best {
                    Some((g, o)) if o >= iou_thr && !claimed[g] => {
                        claimed[g] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        per_class.insert(class, average_precision_11(&hits, class_gt.len()));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    MapReport { per_class, map }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::from_corners(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn identical_boxes_collapse() {
        let boxes = [b(0.0, 0.0, 1.0, 1.0), b(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(nms(&boxes, &[0.5, 0.5], 0.5, 0.0, 10), vec![0]);
    }

    #[test]
    fn disjoint_boxes_survive() {
        let boxes = [b(0.0, 0.0, 0.1, 0.1), b(0.5, 0.5, 0.6, 0.6), b(0.8, 0.0, 0.9, 0.1)];
        assert_eq!(nms(&boxes, &[0.2, 0.9, 0.5], 0.5, 0.0, 10), vec![1, 2, 0]);
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![
            GroundTruth { image_id: 0, class: 1, bbox: [0.3, 0.3, 0.2, 0.2] },
            GroundTruth { image_id: 1, class: 2, bbox: [0.6, 0.6, 0.3, 0.2] },
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection { image_id: g.image_id, class: g.class, score: 0.9, bbox: g.bbox })
            .collect();
        let r = evaluate_map(&dets, &gts, 0.5);
        assert_eq!(r.per_class.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(r.map, 1.0);
        let r = evaluate_map(&[], &gts, 0.5);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_miss() {
        let gts = vec![GroundTruth { image_id: 0, class: 1, bbox: [0.5, 0.5, 0.2, 0.2] }];
        let d = Detection { image_id: 0, class: 1, score: 0.9, bbox: [0.5, 0.5, 0.2, 0.2] };
        let r = evaluate_map(&[d.clone(), Detection { score: 0.8, ..d }], &gts, 0.5);
        assert_eq!(r.map, 1.0);
        let wrong_image = Detection { image_id: 3, class: 1, score: 0.9, bbox: [0.5, 0.5, 0.2, 0.2] };
        assert_eq!(evaluate_map(&[wrong_image], &gts, 0.5).map, 0.0);
    }
}
