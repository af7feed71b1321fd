use super::anchors::{AnchorSet, GtBox, MatchResult};
use super::boxes::encode_box;
use super::model::Outputs;
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 1.0;

/// Handles to the loss and its unweighted parts.
#[derive(Clone, Copy, Debug)]
pub struct BaseLoss {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
}

/// Encoded regression targets of the positive anchors, in anchor order.
pub fn regression_targets(anchors: &AnchorSet, gt: &[GtBox], matches: &MatchResult) -> Result<Vec<[f64; 4]>> {
    matches
        .positive_indices()
        .into_iter()
        .map(|i| {
            let g = matches.matched_gt[i].expect("positive anchors carry a gt index");
            encode_box(&gt[g].bbox, &anchors.boxes[i])
        })
        .collect()
}

/// `(Lcls + α·Lbbox) / max(N,1)`, with `Lcls` summed over positives and hard
/// negatives and `Lbbox` summed over positives.
pub fn base_loss(
    tape: &mut Tape,
    out: &Outputs,
    matches: &MatchResult,
    anchors: &AnchorSet,
    gt: &[GtBox],
    alpha: f64,
) -> Result<BaseLoss> {
    let targets: Vec<Option<usize>> = matches
        .positive
        .iter()
        .zip(&matches.hard_negative)
        .map(|(&p, &neg)| p.or(if neg { Some(0) } else { None }))
        .collect();
    let cls = tape.cross_entropy(out.logits, &targets)?;
    let pos = matches.positive_indices();
    let bbox = if pos.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let enc = regression_targets(anchors, gt, matches)?;
        let pred = tape.index_rows(out.offsets, &pos)?;
        let target = tape.constant(Tensor::new(
            vec![pos.len(), 4],
            enc.into_iter().flatten().collect(),
        )?);
        let diff = tape.sub(pred, target)?;
        let l = tape.smooth_l1(diff)?;
        tape.sum(l)?
    };
    let weighted = tape.scale(bbox, alpha)?;
    let sum = tape.add(cls, weighted)?;
    let n = pos.len().max(1) as f64;
    let total = tape.scale(sum, 1.0 / n)?;
    Ok(BaseLoss { total, cls, bbox })
}
