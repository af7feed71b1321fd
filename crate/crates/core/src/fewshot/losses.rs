use serde::{Deserialize, Serialize};

use crate::detector::{base_loss, AnchorSet, GtBox, MatchResult, Outputs, Prediction};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Loss weights and shot counts for the novel stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub k_shot: usize,
    pub base_multiplier: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 1.0,
            beta: 2.0,
            eta: 0.4,
            gamma: 0.5,
            epsilon: std::f64::consts::E,
            k_shot: 2,
            base_multiplier: 3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.eta, self.gamma];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {weights:?}")));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.k_shot == 0 {
            return Err(Error::Config("k_shot must be >= 1".into()));
        }
        Ok(())
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean cosine between selected feature rows and selected weight rows.
fn mean_cosine(tape: &mut Tape, features: Var, weights: Var, anchors: &[usize], rows: &[usize]) -> Result<Var> {
    let f = tape.index_rows(features, anchors)?;
    let f = tape.l2_normalize_rows(f)?;
    let w = tape.index_rows(weights, rows)?;
    let w = tape.l2_normalize_rows(w)?;
    let p = tape.mul(f, w)?;
    let s = tape.sum(p)?;
    tape.scale(s, 1.0 / anchors.len() as f64)
}

/// `−mean cos(ŵ_j, f̂_i)` over positive anchors; 0 with no positives.
pub fn object_concentration_loss(tape: &mut Tape, features: Var, weights: Var, matches: &MatchResult) -> Result<Var> {
    let pos = matches.positive_indices();
    if pos.is_empty() {
        return Ok(zero(tape));
    }
    let rows: Vec<usize> = pos.iter().map(|&i| matches.positive[i].expect("positive")).collect();
    let m = mean_cosine(tape, features, weights, &pos, &rows)?;
    tape.scale(m, -1.0)
}

/// `mean cos(ŵ_0, f̂_i)` over hard negatives; 0 with none.
pub fn background_concentration_loss(tape: &mut Tape, features: Var, weights: Var, matches: &MatchResult) -> Result<Var> {
    let neg = matches.hard_negative_indices();
    if neg.is_empty() {
        return Ok(zero(tape));
    }
    mean_cosine(tape, features, weights, &neg, &vec![0; neg.len()])
}

/// MSE over the background and base logit columns plus MSE over the box
/// offsets, against a frozen prediction.
pub fn distillation_loss(tape: &mut Tape, out: &Outputs, base: &Prediction) -> Result<Var> {
    let n = tape.shape(out.logits)[0];
    if base.logits.shape()[0] != n || base.offsets.shape()[0] != n {
        return Err(shape_err(
            "distillation_loss",
            format!("{n} anchors against {} frozen", base.logits.shape()[0]),
        ));
    }
    let kb = base.logits.shape()[1];
    if kb > tape.shape(out.logits)[1] {
        return Err(shape_err("distillation_loss", "frozen detector has more classes".to_string()));
    }
    let l = tape.slice_cols(out.logits, 0, kb)?;
    let bl = tape.constant(base.logits.clone());
    let d = tape.sub(l, bl)?;
    let sq = tape.mul(d, d)?;
    let logit_term = tape.mean(sq)?;
    let bo = tape.constant(base.offsets.clone());
    let d = tape.sub(out.offsets, bo)?;
    let sq = tape.mul(d, d)?;
    let box_term = tape.mean(sq)?;
    tape.add(logit_term, box_term)
}

#[derive(Clone, Copy, Debug)]
pub struct NovelLoss {
    pub total: Var,
    pub cls: Var,
    pub bbox: Var,
    pub conc_pos: Var,
    pub conc_neg: Var,
    pub dist: Var,
}

/// `base + β·L+ + η·L− + γ·L_dist`. A term with zero weight is left out of
/// the sum entirely, so all-zero weights return `base` itself.
pub fn combine_novel_loss(
    tape: &mut Tape,
    base: Var,
    conc_pos: Var,
    conc_neg: Var,
    dist: Var,
    hp: &Hyperparams,
) -> Result<Var> {
    let mut total = base;
    for (w, term) in [(hp.beta, conc_pos), (hp.eta, conc_neg), (hp.gamma, dist)] {
        if w != 0.0 {
            let t = tape.scale(term, w)?;
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
pub fn novel_loss(
    tape: &mut Tape,
    out: &Outputs,
    classifier: Var,
    matches: &MatchResult,
    anchors: &AnchorSet,
    gt: &[GtBox],
    frozen: Option<&Prediction>,
    hp: &Hyperparams,
) -> Result<NovelLoss> {
    let b = base_loss(tape, out, matches, anchors, gt, hp.alpha)?;
    let conc_pos = object_concentration_loss(tape, out.features, classifier, matches)?;
    let conc_neg = background_concentration_loss(tape, out.features, classifier, matches)?;
    let dist = match frozen {
        Some(p) => distillation_loss(tape, out, p)?,
        None if hp.gamma == 0.0 => zero(tape),
        None => return Err(Error::Config("distillation weight set without a frozen detector".into())),
    };
    let total = combine_novel_loss(tape, b.total, conc_pos, conc_neg, dist, hp)?;
    Ok(NovelLoss {
        total,
        cls: b.cls,
        bbox: b.bbox,
        conc_pos,
        conc_neg,
        dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(tape: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        tape.param(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    fn matches(positive: Vec<Option<usize>>, hard_negative: Vec<bool>) -> MatchResult {
        let n = positive.len();
        MatchResult {
            matched_gt: positive.iter().map(|p| p.map(|_| 0)).collect(),
            positive,
            hard_negative: if hard_negative.is_empty() { vec![false; n] } else { hard_negative },
        }
    }

    #[test]
    fn object_concentration_examples() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 3.0]);
        let parallel = rows(&mut tape, &[2, 2], &[0.0, 2.0, 0.0, 0.5]);
        let m = matches(vec![Some(1), Some(1)], vec![]);
        let l = object_concentration_loss(&mut tape, parallel, w, &m).unwrap();
        assert!((tape.value(l).item().unwrap() + 1.0).abs() < 1e-15);

        let ortho = rows(&mut tape, &[2, 2], &[4.0, 0.0, -1.0, 0.0]);
        let l = object_concentration_loss(&mut tape, ortho, w, &m).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let f = rows(&mut tape, &[2, 2], &[0.8, 0.6, (1.0f64 - 0.04).sqrt(), 0.2]);
        let l = object_concentration_loss(&mut tape, f, w, &m).unwrap();
        assert!((tape.value(l).item().unwrap() + 0.4).abs() < 1e-12);

        let none = matches(vec![None, None], vec![]);
        let l = object_concentration_loss(&mut tape, f, w, &none).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn background_concentration_examples() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, &[2, 2], &[2.0, 0.0, 0.0, 1.0]);
        let m = matches(vec![None, None], vec![true, true]);
        let f = rows(&mut tape, &[2, 2], &[1.0, 0.0, 5.0, 0.0]);
        let l = background_concentration_loss(&mut tape, f, w, &m).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
        let f = rows(&mut tape, &[2, 2], &[0.0, 1.0, 0.0, -2.0]);
        let l = background_concentration_loss(&mut tape, f, w, &m).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let f = rows(&mut tape, &[2, 2], &[-0.5, 0.75f64.sqrt(), 0.5, 0.75f64.sqrt()]);
        let l = background_concentration_loss(&mut tape, f, w, &m).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn zero_norm_feature_is_an_error() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let f = rows(&mut tape, &[1, 2], &[0.0, 0.0]);
        let m = matches(vec![Some(1)], vec![]);
        assert!(object_concentration_loss(&mut tape, f, w, &m).is_err());
    }

    #[test]
    fn linear_combination() {
        let mut tape = Tape::new();
        let base = tape.constant(Tensor::scalar(0.4 + 0.2));
        let pos = tape.constant(Tensor::scalar(-0.5));
        let neg = tape.constant(Tensor::scalar(0.3));
        let dist = tape.constant(Tensor::scalar(0.1));
        let hp = Hyperparams {
            alpha: 1.0,
            beta: 2.0,
            eta: 0.4,
            gamma: 0.5,
            ..Hyperparams::default()
        };
        let t = combine_novel_loss(&mut tape, base, pos, neg, dist, &hp).unwrap();
        assert!((tape.value(t).item().unwrap() + 0.23).abs() < 1e-15);

        let zeros = Hyperparams {
            beta: 0.0,
            eta: 0.0,
            gamma: 0.0,
            ..hp
        };
        let t = combine_novel_loss(&mut tape, base, pos, neg, dist, &zeros).unwrap();
        assert_eq!(t, base);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(Hyperparams { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
