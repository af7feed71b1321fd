use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{derive_seed, Scene};

/// The K-shot training set: only the sampled instances are annotated.
#[derive(Clone, Debug)]
pub struct SupportSet {
    pub k: usize,
    pub scenes: Vec<Scene>,
}

impl SupportSet {
    /// Annotated instance count per category.
    pub fn annotation_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for obj in self.scenes.iter().flat_map(|s| s.annotated()) {
            *counts.entry(obj.class_id).or_insert(0) += 1;
        }
        counts
    }
}

const SUPPORT_STREAM: u64 = 10;

/// Draws exactly `k` instances of every novel class and `multiplier·k` of
/// every base class from `pool`; every other object becomes unannotated.
pub fn sample_support_set(
    pool: &[Scene],
    novel: &[usize],
    base: &[usize],
    k: usize,
    multiplier: usize,
    seed: u64,
) -> Result<SupportSet> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let mut chosen: BTreeSet<(usize, usize)> = BTreeSet::new();
    let quotas = novel.iter().map(|&c| (c, k)).chain(base.iter().map(|&c| (c, multiplier * k)));
    for (class, quota) in quotas {
        let mut instances: Vec<(usize, usize)> = pool
            .iter()
            .enumerate()
            .flat_map(|(s, scene)| {
                scene
                    .objects
                    .iter()
                    .enumerate()
                    .filter(move |(_, o)| o.class_id == class)
                    .map(move |(o, _)| (s, o))
            })
            .collect();
        if instances.len() < quota {
            return Err(Error::Insufficient(format!(
                "class {class} has {} instances, need {quota}",
                instances.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SUPPORT_STREAM, class as u64));
        instances.shuffle(&mut rng);
        chosen.extend(instances.into_iter().take(quota));
    }
    let scenes = pool
        .iter()
        .enumerate()
        .filter(|(s, _)| chosen.iter().any(|&(cs, _)| cs == *s))
        .map(|(s, scene)| {
            let mut scene = scene.clone();
            for (o, obj) in scene.objects.iter_mut().enumerate() {
                obj.annotated = chosen.contains(&(s, o));
            }
            scene
        })
        .collect();
    Ok(SupportSet { k, scenes })
}
