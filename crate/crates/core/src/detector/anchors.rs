use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use crate::error::{Error, Result};

/// One prediction level: a square `size×size` feature map with one base scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub size: usize,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub levels: Vec<AnchorLevel>,
    pub aspects: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            levels: vec![
                AnchorLevel { size: 8, scale: 0.25 },
                AnchorLevel { size: 4, scale: 0.45 },
            ],
            aspects: vec![1.0, 2.0, 0.5],
        }
    }
}

impl AnchorConfig {
    pub fn per_position(&self) -> usize {
        self.aspects.len()
    }

    pub fn count(&self) -> usize {
        self.levels.iter().map(|l| l.size * l.size).sum::<usize>() * self.aspects.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub scale_index: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Scale-major, row-major, aspect-minor. An aspect `a` gives a box of width
/// `s·√a` and height `s/√a`.
pub fn generate_anchors(cfg: &AnchorConfig) -> Result<AnchorSet> {
    if cfg.levels.is_empty() || cfg.aspects.is_empty() {
        return Err(Error::Config("anchor config needs at least one level and aspect".into()));
    }
    let mut boxes = Vec::with_capacity(cfg.count());
    let mut scale_index = Vec::with_capacity(cfg.count());
    for (li, level) in cfg.levels.iter().enumerate() {
        if level.size == 0 {
            return Err(Error::Config("anchor level with zero size".into()));
        }
        let n = level.size as f64;
        for i in 0..level.size {
            for j in 0..level.size {
                let cy = (i as f64 + 0.5) / n;
                let cx = (j as f64 + 0.5) / n;
                for &a in &cfg.aspects {
                    let r = a.sqrt();
                    boxes.push(BBox::new(cx, cy, level.scale * r, level.scale / r)?);
                    scale_index.push(li);
                }
            }
        }
    }
    Ok(AnchorSet { boxes, scale_index })
}

/// Annotated ground truth for one image; `row` is the detector class row (≥ 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub row: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub positive: Vec<Option<usize>>,
    pub hard_negative: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| p.is_some()).count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.positive.len()).filter(|&i| self.positive[i].is_some()).collect()
    }

    pub fn hard_negative_indices(&self) -> Vec<usize> {
        (0..self.hard_negative.len()).filter(|&i| self.hard_negative[i]).collect()
    }
}

pub const DEFAULT_POS_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;

/// Threshold matching plus a forced match of every gt to its best anchor.
/// Gts are forced in order; a gt whose best anchor was already forced by an
/// earlier gt takes its best remaining anchor instead.
pub fn match_anchors(anchors: &AnchorSet, gt: &[GtBox], pos_thr: f64) -> MatchResult {
    let n = anchors.len();
    let mut positive = vec![None; n];
    let mut matched_gt = vec![None; n];
    if gt.is_empty() {
        return MatchResult {
            positive,
            hard_negative: vec![false; n],
            matched_gt,
        };
    }
    let overlaps: Vec<Vec<f64>> = anchors
        .boxes
        .iter()
        .map(|a| gt.iter().map(|g| iou(a, &g.bbox)).collect())
        .collect();
    for (i, row) in overlaps.iter().enumerate() {
        let mut best = 0;
        for g in 1..gt.len() {
            if row[g] > row[best] {
                best = g;
            }
        }
        if row[best] >= pos_thr {
            matched_gt[i] = Some(best);
        }
    }
    let mut forced = vec![false; n];
    for g in 0..gt.len() {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if forced[i] || overlaps[i][g] <= 0.0 {
                continue;
            }
            if best.is_none_or(|b| overlaps[i][g] > overlaps[b][g]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            forced[i] = true;
            matched_gt[i] = Some(g);
        }
    }
    for i in 0..n {
        positive[i] = matched_gt[i].map(|g| gt[g].row);
    }
    MatchResult {
        positive,
        hard_negative: vec![false; n],
        matched_gt,
    }
}

/// Flags the `ratio·N` highest-loss non-positive anchors (at least one when
/// `N = 0`); ties go to the lower index.
pub fn hard_negative_mining(losses: &[f64], matches: &mut MatchResult, ratio: f64) {
    let n_pos = matches.num_positive();
    let quota = if n_pos == 0 {
        1
    } else {
        (ratio.max(0.0) * n_pos as f64).floor() as usize
    };
    let mut candidates: Vec<usize> = (0..losses.len())
        .filter(|&i| matches.positive[i].is_none())
        .collect();
    candidates.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    matches.hard_negative = vec![false; losses.len()];
    for &i in candidates.iter().take(quota) {
        matches.hard_negative[i] = true;
    }
}
