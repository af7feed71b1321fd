use std::collections::BTreeMap;

use super::support::SupportSet;
use crate::detector::{generate_anchors, iou, predict, AnchorSet, BBox, ClassLayout, Detector, CLASSIFIER};
use crate::error::{Error, Result};
use crate::saliency::SaliencyConfig;
use crate::tensor::Tensor;

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroNorm("imprint"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Normalize each feature, average, normalize the average.
pub fn imprint_row(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::Insufficient("no features to imprint".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for f in features {
        for (m, v) in mean.iter_mut().zip(normalized(f)?) {
            *m += v;
        }
    }
    let k = features.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    normalized(&mean).map_err(|_| Error::DegenerateImprint("support features cancel out".into()))
}

/// Highest-IoU anchor, ties to the lower index. Zero overlap is an error.
pub fn best_anchor(anchors: &AnchorSet, b: &BBox) -> Result<usize> {
    let mut best = (0, 0.0);
    for (i, a) in anchors.boxes.iter().enumerate() {
        let o = iou(a, b);
        if o > best.1 {
            best = (i, o);
        }
    }
    if best.1 <= 0.0 {
        return Err(Error::DegenerateImprint(format!("no anchor overlaps {b:?}")));
    }
    Ok(best.0)
}

/// Extends a base detector with one imprinted classifier row per novel
/// category. Every other parameter is copied unchanged.
pub fn init_novel_detector(
    base: &Detector,
    support: &SupportSet,
    novel: &[usize],
    saliency: &SaliencyConfig,
) -> Result<Detector> {
    if base.layout.categories.len() != base.layout.num_base {
        return Err(Error::Config("detector already has novel rows".into()));
    }
    if let Some(c) = novel.iter().find(|c| base.layout.row_of(**c).is_some()) {
        return Err(Error::Config(format!("category {c} is already a base class")));
    }
    let anchors = generate_anchors(&base.config.anchors)?;
    let d = base.config.feature_dim;
    let mut feats: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for scene in &support.scenes {
        let wanted: Vec<_> = scene.annotated().filter(|o| novel.contains(&o.class_id)).collect();
        if wanted.is_empty() {
            continue;
        }
        let sal = saliency.compute(scene)?;
        let pred = predict(base, &scene.image, Some(&sal))?;
        for obj in wanted {
            let i = best_anchor(&anchors, &obj.bbox)?;
            feats
                .entry(obj.class_id)
                .or_default()
                .push(pred.features.data()[i * d..(i + 1) * d].to_vec());
        }
    }
    let old = base.classifier();
    let mut rows = old.data().to_vec();
    for c in novel {
        let f = feats
            .get(c)
            .ok_or_else(|| Error::Insufficient(format!("no support instance of class {c}")))?;
        rows.extend(imprint_row(f)?);
    }
    let mut categories = base.layout.categories.clone();
    categories.extend_from_slice(novel);
    let layout = ClassLayout {
        categories,
        num_base: base.layout.num_base,
    };
    let mut params = base.params.clone();
    params.insert(CLASSIFIER, Tensor::new(vec![layout.num_rows(), d], rows)?);
    Ok(Detector {
        config: base.config.clone(),
        layout,
        params,
    })
}
