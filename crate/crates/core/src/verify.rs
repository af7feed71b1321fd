//! The finite-difference suite behind `attfd gradcheck`.
//!
//! Every tape primitive and every composite objective is checked at
//! [`POINTS`] random points. Inputs to kinked primitives are drawn away from
//! their kinks.

use std::f64::consts::E;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{bottleneck_width, fuse_bottom_up, gc_block, FusionConfig, GcParams};
use crate::detector::{base_loss, generate_anchors, match_anchors, AnchorConfig, AnchorLevel, GtBox, Outputs, Prediction};
use crate::error::Result;
use crate::fewshot::{background_concentration_loss, novel_loss, object_concentration_loss, Hyperparams};
use crate::saliency::SaliencyMap;
use crate::tensor::{GradCheck, OpKind, Tape, Tensor, Var};

pub const POINTS: u64 = 10;
pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Gen = fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>;
type Body = fn(&mut Tape, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Values whose magnitude stays at least `gap` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let mag = if kink > 0.0 && rng.gen_bool(0.5) {
                rng.gen_range(0.0..kink - gap)
            } else {
                rng.gen_range(kink + gap..kink + 1.5)
            };
            sign * mag
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Primitive outputs are projected on a fixed random tensor so every output
/// coordinate reaches the scalar.
fn projected(name: &str, gen: Gen, body: Body, fault: Option<OpKind>) -> Result<SuiteEntry> {
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let point = gen(&mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = body(&mut tape, &vars)?;
        let probe = random(&mut rng, tape.shape(out), 1.0);
        let report = checker(fault).run(&point, |t, v| {
            let out = body(t, v)?;
            let p = t.constant(probe.clone());
            let flat_out = flatten(t, out)?;
            let flat_p = flatten(t, p)?;
            t.dot(flat_out, flat_p)
        })?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(entry(name, worst))
}

fn flatten(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    t.reshape(v, &[n])
}

fn checker(fault: Option<OpKind>) -> GradCheck {
    let c = GradCheck::new(STEP);
    match fault {
        Some(k) => c.with_fault(k),
        None => c,
    }
}

fn entry(name: &str, worst: f64) -> SuiteEntry {
    SuiteEntry {
        name: name.to_string(),
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    }
}

fn primitives() -> Vec<(&'static str, Gen, Body)> {
    vec![
        (
            "conv2d",
            |r| vec![("x", random(r, &[2, 5, 4], 1.0)), ("k", random(r, &[3, 2, 3, 3], 1.0)), ("b", random(r, &[3], 1.0))],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        (
            "matmul/transpose/reshape",
            |r| vec![("a", random(r, &[3, 4], 1.0)), ("b", random(r, &[2, 4], 1.0))],
            |t, v| {
                let bt = t.transpose(v[1])?;
                let p = t.matmul(v[0], bt)?;
                t.reshape(p, &[6])
            },
        ),
        (
            "add/sub/mul/scale",
            |r| vec![("a", random(r, &[2, 3], 1.0)), ("b", random(r, &[2, 3], 1.0))],
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let m = t.mul(s, d)?;
                t.scale(m, -1.7)
            },
        ),
        ("relu", |r| vec![("x", away_from(r, &[12], 0.0, 0.01))], |t, v| t.relu(v[0])),
        (
            "ln_eps",
            |r| {
                let d = (0..8).map(|_| r.gen_range(0.0..1.0)).collect();
                vec![("x", Tensor::new(vec![8], d).expect("shape"))]
            },
            |t, v| t.ln_eps(v[0], E),
        ),
        ("softmax", |r| vec![("x", random(r, &[3, 4], 1.0))], |t, v| t.softmax(v[0])),
        (
            "layer_norm",
            |r| vec![("x", random(r, &[5], 1.0)), ("g", random(r, &[5], 1.0)), ("b", random(r, &[5], 1.0))],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "add_channel/mul_spatial",
            |r| vec![("x", random(r, &[3, 2, 2], 1.0)), ("v", random(r, &[3], 1.0)), ("m", random(r, &[2, 2], 1.0))],
            |t, v| {
                let y = t.add_channel(v[0], v[1])?;
                t.mul_spatial(y, v[2])
            },
        ),
        ("l2_normalize_rows", |r| vec![("x", random(r, &[3, 4], 1.0))], |t, v| t.l2_normalize_rows(v[0])),
        (
            "index_rows/concat_rows/slice_cols",
            |r| vec![("a", random(r, &[4, 3], 1.0)), ("b", random(r, &[2, 3], 1.0))],
            |t, v| {
                let g = t.index_rows(v[0], &[3, 0, 3])?;
                let c = t.concat_rows(&[g, v[1]])?;
                t.slice_cols(c, 1, 3)
            },
        ),
        ("smooth_l1", |r| vec![("x", away_from(r, &[12], 1.0, 0.01))], |t, v| t.smooth_l1(v[0])),
        (
            "cross_entropy",
            |r| vec![("x", random(r, &[4, 5], 4.0))],
            |t, v| t.cross_entropy(v[0], &[Some(0), None, Some(4), Some(2)]),
        ),
        (
            "sum/mean/dot",
            |r| vec![("a", random(r, &[5], 1.0)), ("b", random(r, &[5], 1.0))],
            |t, v| {
                let d = t.dot(v[0], v[1])?;
                let s = t.sum(v[0])?;
                let m = t.mean(v[1])?;
                let x = t.mul(d, s)?;
                t.add(x, m)
            },
        ),
    ]
}

fn gc_and_fusion(fault: Option<OpKind>) -> Result<SuiteEntry> {
    let c = 8;
    let cb = bottleneck_width(c, 4);
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let sal = SaliencyMap::new(16, 16, (0..256).map(|_| rng.gen::<f64>()).collect())?;
        let point = [
            ("y", random(&mut rng, &[c, 4, 4], 1.0)),
            ("w_k", random(&mut rng, &[1, c, 1, 1], 1.0)),
            ("w_v1", random(&mut rng, &[cb, c, 1, 1], 1.0)),
            ("ln_gain", random(&mut rng, &[cb], 1.5)),
            ("ln_bias", random(&mut rng, &[cb], 0.5)),
            ("w_v2", random(&mut rng, &[c, cb, 1, 1], 1.0)),
        ];
        let probe = random(&mut rng, &[c * 16], 1.0);
        let report = checker(fault).run(&point, |t, v| {
            let p = GcParams {
                w_k: v[1],
                w_v1: v[2],
                ln_gain: v[3],
                ln_bias: v[4],
                w_v2: v[5],
            };
            let z = gc_block(t, v[0], &p)?.features;
            let z = fuse_bottom_up(t, z, &sal, &FusionConfig::default())?;
            let z = flatten(t, z)?;
            let pr = t.constant(probe.clone());
            t.dot(z, pr)
        })?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(entry("gc_block + fusion", worst))
}

#[derive(Clone, Copy)]
enum Objective {
    Base,
    Object,
    Background,
    Novel,
}

/// Objectives with the detector outputs and classifier as leaves.
fn objective(name: &str, which: Objective, fault: Option<OpKind>) -> Result<SuiteEntry> {
    let anchors = generate_anchors(&AnchorConfig {
        levels: vec![AnchorLevel { size: 2, scale: 0.4 }, AnchorLevel { size: 1, scale: 0.7 }],
        aspects: vec![1.0, 2.0, 0.5],
    })?;
    let n = anchors.len();
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let gt: Vec<GtBox> = (0..2)
            .map(|_| GtBox {
                bbox: anchors.boxes[rng.gen_range(0..n)],
                row: rng.gen_range(1..5),
            })
            .collect();
        let mut m = match_anchors(&anchors, &gt, 0.5);
        for i in 0..n {
            m.hard_negative[i] = m.positive[i].is_none() && rng.gen_bool(0.3);
        }
        let frozen = Prediction {
            logits: random(&mut rng, &[n, 4], 3.0),
            offsets: random(&mut rng, &[n, 4], 0.5),
            features: Tensor::zeros(vec![n, 3]),
            attention: None,
        };
        let point = [
            ("features", random(&mut rng, &[n, 3], 1.0)),
            ("logits", random(&mut rng, &[n, 5], 3.0)),
            ("offsets", random(&mut rng, &[n, 4], 0.5)),
            ("classifier", random(&mut rng, &[5, 3], 1.0)),
        ];
        let hp = Hyperparams::default();
        let report = checker(fault).run(&point, |t, v| {
            let out = Outputs {
                features: v[0],
                logits: v[1],
                offsets: v[2],
                attention: None,
            };
            match which {
                Objective::Base => Ok(base_loss(t, &out, &m, &anchors, &gt, hp.alpha)?.total),
                Objective::Object => object_concentration_loss(t, v[0], v[3], &m),
                Objective::Background => background_concentration_loss(t, v[0], v[3], &m),
                Objective::Novel => Ok(novel_loss(t, &out, v[3], &m, &anchors, &gt, Some(&frozen), &hp)?.total),
            }
        })?;
        worst = worst.max(report.max_rel_error());
    }
    Ok(entry(name, worst))
}

/// Runs every check. With `fault` set, the named backward rule is
/// sign-flipped in the analytic pass.
pub fn gradient_suite(fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (name, gen, body) in primitives() {
        out.push(projected(name, gen, body, fault)?);
    }
    out.push(gc_and_fusion(fault)?);
    out.push(objective("base loss", Objective::Base, fault)?);
    out.push(objective("object concentration", Objective::Object, fault)?);
    out.push(objective("background concentration", Objective::Background, fault)?);
    out.push(objective("novel objective", Objective::Novel, fault)?);
    Ok(out)
}
