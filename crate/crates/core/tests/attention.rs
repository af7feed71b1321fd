use attfd::attention::{
    bottleneck_width, fuse_bottom_up, gc_block, global_context, topdown_map, FusionConfig, GcParams, LN_EPS,
};
use attfd::saliency::SaliencyMap;
use attfd::tensor::{grad_check, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

struct Block {
    w_k: Tensor,
    w_v1: Tensor,
    gain: Tensor,
    bias: Tensor,
    w_v2: Tensor,
}

fn random_block(rng: &mut ChaCha8Rng, c: usize) -> Block {
    let cb = bottleneck_width(c, 4);
    Block {
        w_k: random(rng, &[1, c, 1, 1], 1.0),
        w_v1: random(rng, &[cb, c, 1, 1], 1.0),
        gain: random(rng, &[cb], 1.5),
        bias: random(rng, &[cb], 0.5),
        w_v2: random(rng, &[c, cb, 1, 1], 1.0),
    }
}

fn run_block(y: &Tensor, b: &Block) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let yv = tape.param(y.clone());
    let p = GcParams {
        w_k: tape.param(b.w_k.clone()),
        w_v1: tape.param(b.w_v1.clone()),
        ln_gain: tape.param(b.gain.clone()),
        ln_bias: tape.param(b.bias.clone()),
        w_v2: tape.param(b.w_v2.clone()),
    };
    let out = gc_block(&mut tape, yv, &p).unwrap();
    (tape.value(out.features).clone(), tape.value(out.attention).clone())
}

/// Scalar loops straight from the block's defining sums.
fn loop_oracle(y: &Tensor, b: &Block) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let cb = b.gain.numel();
    let mut logits = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                logits[i * w + j] += b.w_k.at(&[0, ch, 0, 0]) * y.at(&[ch, i, j]);
            }
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let att: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    let mut ctx = vec![0.0; c];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                ctx[ch] += y.at(&[ch, i, j]) * att[i * w + j];
            }
        }
    }
    let mut t1 = vec![0.0; cb];
    for k in 0..cb {
        for ch in 0..c {
            t1[k] += b.w_v1.at(&[k, ch, 0, 0]) * ctx[ch];
        }
    }
    let mean = t1.iter().sum::<f64>() / cb as f64;
    let var = t1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cb as f64;
    let r: Vec<f64> = (0..cb)
        .map(|k| (b.gain.data()[k] * (t1[k] - mean) / (var + LN_EPS).sqrt() + b.bias.data()[k]).max(0.0))
        .collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let mut t2 = 0.0;
        for k in 0..cb {
            t2 += b.w_v2.at(&[ch, k, 0, 0]) * r[k];
        }
        for p in 0..h * w {
            out[ch * h * w + p] = y.data()[ch * h * w + p] + t2;
        }
    }
    (out, att)
}

#[test]
fn gc_block_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (c, h, w) in [(4, 3, 5), (8, 4, 4), (16, 6, 3), (5, 1, 7)] {
        let y = random(&mut rng, &[c, h, w], 2.0);
        let b = random_block(&mut rng, c);
        let (z, att) = run_block(&y, &b);
        let (z_ref, att_ref) = loop_oracle(&y, &b);
        for (a, r) in z.data().iter().zip(&z_ref) {
            assert!((a - r).abs() < 1e-12, "{a} vs {r}");
        }
        for (a, r) in att.data().iter().zip(&att_ref) {
            assert!((a - r).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_w_v2_identity_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let y = random(&mut rng, &[8, 5, 4], 3.0);
        let mut b = random_block(&mut rng, 8);
        b.w_v2 = Tensor::zeros(b.w_v2.shape().to_vec());
        let (z, _) = run_block(&y, &b);
        assert_eq!(z, y);
    }
}

#[test]
fn init_block_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = attfd::tensor::ParamSet::new();
    GcParams::init(&mut params, 8, 4, &mut rng);
    let y = random(&mut rng, &[8, 4, 4], 1.0);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let yv = tape.constant(y.clone());
    let z = gc_block(&mut tape, yv, &GcParams::from_vars(&vars).unwrap()).unwrap().features;
    assert_eq!(tape.value(z), &y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn topdown_map_sums_to_one(seed in any::<u64>(), c in 1usize..6, h in 1usize..9, w in 1usize..9, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let y = tape.constant(random(&mut rng, &[c, h, w], scale));
        let wk = tape.constant(random(&mut rng, &[1, c, 1, 1], 1.0));
        let m = topdown_map(&mut tape, y, wk).unwrap();
        let s: f64 = tape.value(m).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(tape.value(m).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn fusion_neutral_and_zeroing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z0 = random(&mut rng, &[6, 8, 8], 4.0);
    let mut tape = Tape::new();
    let z = tape.param(z0.clone());
    let out = fuse_bottom_up(&mut tape, z, &SaliencyMap::zeros(64, 64), &FusionConfig::default()).unwrap();
    assert_eq!(tape.value(out), &z0);

    // One fully non-salient 8x8 cell at the top-left, everything else 1.
    let mut vals = vec![1.0; 64 * 64];
    for y in 0..8 {
        for x in 0..8 {
            vals[y * 64 + x] = 0.0;
        }
    }
    let s = SaliencyMap::new(64, 64, vals).unwrap();
    let out = fuse_bottom_up(&mut tape, z, &s, &FusionConfig { epsilon: 1.0 }).unwrap();
    let v = tape.value(out);
    for c in 0..6 {
        assert_eq!(v.at(&[c, 0, 0]), 0.0);
        assert_eq!(v.at(&[c, 3, 3]), z0.at(&[c, 3, 3]) * 2f64.ln());
    }
}

#[test]
fn gradcheck_gc_block_and_fusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut vals: Vec<f64> = (0..16 * 16).map(|_| rng.gen::<f64>()).collect();
    vals[0] = 0.0;
    vals[1] = 1.0;
    let sal = SaliencyMap::new(16, 16, vals).unwrap();
    for _ in 0..10 {
        let b = random_block(&mut rng, 8);
        let point = [
            ("y", random(&mut rng, &[8, 4, 4], 1.0)),
            ("w_k", b.w_k),
            ("w_v1", b.w_v1),
            ("gain", b.gain),
            ("bias", b.bias),
            ("w_v2", b.w_v2),
            ("probe", random(&mut rng, &[8, 4, 4], 1.0)),
        ];
        let report = grad_check(
            |tape, v| {
                let p = GcParams {
                    w_k: v[1],
                    w_v1: v[2],
                    ln_gain: v[3],
                    ln_bias: v[4],
                    w_v2: v[5],
                };
                let z = gc_block(tape, v[0], &p)?.features;
                let z = fuse_bottom_up(tape, z, &sal, &FusionConfig::default())?;
                let z = tape.reshape(z, &[128])?;
                let probe = tape.reshape(v[6], &[128])?;
                tape.dot(z, probe)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.per_leaf);
    }
}

#[test]
fn context_gradient_reaches_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let point = [("y", random(&mut rng, &[3, 2, 3], 1.0)), ("h", random(&mut rng, &[2, 3], 1.0))];
    let report = grad_check(
        |tape, v| {
            let c = global_context(tape, v[0], v[1])?;
            let c2 = tape.mul(c, c)?;
            tape.sum(c2)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6);
}
