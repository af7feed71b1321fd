use attfd::tensor::{grad_check, Tape, Tensor, Var};
use attfd::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero by `gap`, so kinks stay out of
/// finite-difference reach.
fn random_away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(gap..1.5);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // Either side of |x| = kink.
            if kink == 0.0 {
                sign * mag
            } else if rng.gen_bool(0.5) {
                sign * (kink - mag.min(kink - gap))
            } else {
                sign * (kink + mag)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Straight nested-loop convolution, independent of the im2col path.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for a in 0..kh {
                        for bb in 0..kw {
                            let ii = (i * stride + a) as isize - pad as isize;
                            let jj = (j * stride + bb) as isize - pad as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += x.at(&[c, ii as usize, jj as usize]) * k.at(&[o, c, a, bb]);
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out).unwrap()
}

fn conv_value(x: Tensor, k: Tensor, b: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, k, b) = (tape.constant(x), tape.constant(k), tape.constant(b));
    let y = tape.conv2d(x, k, Some(b), stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv2d_scalar_multiply_add() {
    let y = conv_value(t(&[1, 1, 1], &[2.0]), t(&[1, 1, 1, 1], &[3.0]), t(&[1], &[1.0]), 1, 0).unwrap();
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let x = t(&[1, 2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, -8.0]);
    let y = conv_value(x.clone(), t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_ones_window_sums() {
    let y = conv_value(
        Tensor::full(vec![1, 3, 3], 1.0),
        Tensor::full(vec![1, 1, 3, 3], 1.0),
        t(&[1], &[0.0]),
        1,
        1,
    )
    .unwrap();
    assert_eq!(y.shape(), &[1, 3, 3]);
    assert_eq!(y.at(&[0, 1, 1]), 9.0);
    for &(i, j) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(y.at(&[0, i, j]), 4.0);
    }
    // Same values from the loop oracle.
    let oracle = naive_conv(
        &Tensor::full(vec![1, 3, 3], 1.0),
        &Tensor::full(vec![1, 1, 3, 3], 1.0),
        &t(&[1], &[0.0]),
        1,
        1,
    );
    assert_eq!(y, oracle);
}

#[test]
fn conv2d_matches_loop_oracle_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(ci, co, h, w, k, s, p) in &[
        (3, 4, 7, 6, 3, 2, 1),
        (2, 3, 5, 5, 3, 1, 1),
        (4, 2, 8, 8, 1, 1, 0),
        (1, 1, 4, 9, 2, 3, 0),
    ] {
        let x = random(&mut rng, &[ci, h, w]);
        let kk = random(&mut rng, &[co, ci, k, k]);
        let b = random(&mut rng, &[co]);
        let got = conv_value(x.clone(), kk.clone(), b.clone(), s, p).unwrap();
        let want = naive_conv(&x, &kk, &b, s, p);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv2d_channel_mismatch_is_a_shape_error() {
    let err = conv_value(
        Tensor::zeros(vec![2, 3, 3]),
        Tensor::zeros(vec![1, 3, 1, 1]),
        Tensor::zeros(vec![1]),
        1,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
}

fn softmax_of(x: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.softmax(v).unwrap();
    tape.value(s).clone()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(t(&[1, 1], &[0.0])).data(), &[1.0]);
    for c in [-3.0, 0.0, 17.5] {
        assert_eq!(softmax_of(Tensor::full(vec![2, 2], c)).data(), &[0.25; 4]);
    }
    let s = softmax_of(t(&[2, 2], &[1f64.ln(), 3f64.ln(), 2f64.ln(), 2f64.ln()]));
    for (got, want) in s.data().iter().zip([0.125, 0.375, 0.25, 0.25]) {
        assert!((got - want).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(data in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let n = data.len();
        let s = softmax_of(Tensor::new(vec![n], data).unwrap());
        let total: f64 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
    }
}

fn layer_norm_of(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let n = x.len();
    let x = tape.constant(t(&[n], x));
    let g = tape.constant(t(&[n], gain));
    let b = tape.constant(t(&[n], bias));
    let y = tape.layer_norm(x, g, b, eps).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(&[5.0, 5.0], &[1.0, 1.0], &[0.0, 0.0], 1e-5), vec![0.0, 0.0]);
    assert_eq!(layer_norm_of(&[1.0, -1.0], &[1.0, 1.0], &[2.0, 2.0], 0.0), vec![3.0, 1.0]);
    assert_eq!(
        layer_norm_of(&[0.3, -7.0, 2.0], &[0.0; 3], &[0.5, -0.25, 1.0], 1e-5),
        vec![0.5, -0.25, 1.0]
    );
}

#[test]
fn backward_square() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn backward_through_softmax_sum_is_zero() {
    let mut tape = Tape::new();
    let l = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 0.0]));
    let s = tape.softmax(l).unwrap();
    let total = tape.sum(s).unwrap();
    let g = tape.backward(total).unwrap();
    assert!(g.get(l).unwrap().data().iter().all(|v| v.abs() < 1e-16));
}

#[test]
fn unreachable_leaf_gets_zero_and_fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.scale(x, 4.0).unwrap();
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 7.0);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let mut other = Tape::new();
    let y = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
    assert!(matches!(tape.relu(y), Err(Error::ForeignVar)));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[-1.0]));
    assert!(matches!(tape.ln_eps(x, 0.5), Err(Error::NonFinite(_))));
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
}

#[test]
fn l2_normalize_zero_row_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    assert!(matches!(tape.l2_normalize_rows(x), Err(Error::ZeroNorm(_))));
}

/// A composite that touches every primitive once.
fn composite(tape: &mut Tape, v: &[Var]) -> Result<Var> {
    let (x, k, b, g, lb) = (v[0], v[1], v[2], v[3], v[4]);
    let y = tape.conv2d(x, k, Some(b), 1, 1)?; // [2,3,3]
    let y = tape.relu(y)?;
    let pooled = tape.reshape(y, &[2, 9])?;
    let logits = tape.slice_cols(pooled, 0, 4)?; // [2,4]
    let h = tape.softmax(logits)?;
    let ht = tape.transpose(h)?; // [4,2]
    let prod = tape.matmul(logits, ht)?; // [2,2]
    let flat = tape.reshape(prod, &[4])?;
    let z = tape.layer_norm(flat, g, lb, 1e-5)?;
    let z2 = tape.reshape(z, &[2, 2])?;
    let n = tape.l2_normalize_rows(z2)?;
    let ce = tape.cross_entropy(n, &[Some(1), Some(0)])?;
    let rows = tape.index_rows(pooled, &[1, 0, 1])?;
    let cat = tape.concat_rows(&[rows, pooled])?;
    let s = tape.smooth_l1(cat)?;
    let m = tape.mean(s)?;
    let sum = tape.add(ce, m)?;
    tape.sub(sum, m).and_then(|d| tape.add(d, m))
}

#[test]
fn backward_is_deterministic_and_replay_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = [
        random(&mut rng, &[1, 3, 3]),
        random(&mut rng, &[2, 1, 3, 3]),
        random(&mut rng, &[2]),
        random(&mut rng, &[4]),
        random(&mut rng, &[4]),
    ];
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|p| tape.param(p.clone())).collect();
        let out = composite(&mut tape, &vars).unwrap();
        assert!(tape.replay_matches().unwrap());
        let g = tape.backward(out).unwrap();
        vars.iter()
            .flat_map(|&v| g.get(v).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

// ---- finite-difference checks, 10 random points per primitive ----------------

const POINTS: u64 = 10;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check_primitive<F, G>(name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let point = gen(&mut rng);
        let weights = {
            // Random projection of the output so every coordinate matters.
            let mut tape = Tape::new();
            let vars: Vec<Var> = point.iter().map(|(_, t)| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            random(&mut rng, tape.shape(out))
        };
        let report = grad_check(
            |tape, vars| {
                let out = f(tape, vars)?;
                let w = tape.constant(weights.clone());
                tape.dot(out, w)
            },
            &point,
            H,
        )
        .unwrap();
        assert!(
            report.max_rel_error() < TOL,
            "{name} seed {seed}: {:?}",
            report.per_leaf
        );
    }
}

#[test]
fn gradcheck_conv2d() {
    check_primitive(
        "conv2d",
        |r| {
            vec![
                ("x", random(r, &[2, 5, 4])),
                ("k", random(r, &[3, 2, 3, 3])),
                ("b", random(r, &[3])),
            ]
        },
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    );
}

#[test]
fn gradcheck_matmul_transpose_reshape() {
    check_primitive(
        "matmul",
        |r| vec![("a", random(r, &[3, 4])), ("b", random(r, &[2, 4]))],
        |t, v| {
            let bt = t.transpose(v[1])?;
            let p = t.matmul(v[0], bt)?;
            t.reshape(p, &[6])
        },
    );
}

#[test]
fn gradcheck_elementwise() {
    check_primitive(
        "add/sub/mul/scale",
        |r| vec![("a", random(r, &[2, 3])), ("b", random(r, &[2, 3]))],
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            t.scale(m, -1.7)
        },
    );
}

#[test]
fn gradcheck_relu() {
    check_primitive("relu", |r| vec![("x", random_away_from(r, &[12], 0.0, 0.01))], |t, v| t.relu(v[0]));
}

#[test]
fn gradcheck_ln_eps() {
    check_primitive(
        "ln_eps",
        |r| {
            let n = 8;
            let d: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
            vec![("x", Tensor::new(vec![n], d).unwrap())]
        },
        |t, v| t.ln_eps(v[0], std::f64::consts::E),
    );
}

#[test]
fn gradcheck_softmax() {
    check_primitive("softmax", |r| vec![("x", random(r, &[3, 4]))], |t, v| t.softmax(v[0]));
}

#[test]
fn gradcheck_layer_norm() {
    check_primitive(
        "layer_norm",
        |r| vec![("x", random(r, &[5])), ("g", random(r, &[5])), ("b", random(r, &[5]))],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn gradcheck_channel_broadcasts() {
    check_primitive(
        "add_channel/mul_spatial",
        |r| vec![("x", random(r, &[3, 2, 2])), ("v", random(r, &[3])), ("m", random(r, &[2, 2]))],
        |t, v| {
            let y = t.add_channel(v[0], v[1])?;
            t.mul_spatial(y, v[2])
        },
    );
}

#[test]
fn gradcheck_l2_normalize_rows() {
    check_primitive("l2_normalize_rows", |r| vec![("x", random(r, &[3, 4]))], |t, v| t.l2_normalize_rows(v[0]));
}

#[test]
fn gradcheck_gather_concat_slice() {
    check_primitive(
        "index_rows/concat_rows/slice_cols",
        |r| vec![("a", random(r, &[4, 3])), ("b", random(r, &[2, 3]))],
        |t, v| {
            let g = t.index_rows(v[0], &[3, 0, 3])?;
            let c = t.concat_rows(&[g, v[1]])?;
            t.slice_cols(c, 1, 3)
        },
    );
}

#[test]
fn gradcheck_smooth_l1() {
    check_primitive("smooth_l1", |r| vec![("x", random_away_from(r, &[12], 1.0, 0.01))], |t, v| t.smooth_l1(v[0]));
}

#[test]
fn gradcheck_cross_entropy() {
    check_primitive(
        "cross_entropy",
        |r| {
            let mut x = random(r, &[4, 5]);
            x = Tensor::new(vec![4, 5], x.data().iter().map(|v| v * 4.0).collect()).unwrap();
            vec![("x", x)]
        },
        |t, v| t.cross_entropy(v[0], &[Some(0), None, Some(4), Some(2)]),
    );
}

#[test]
fn gradcheck_reductions() {
    check_primitive(
        "sum/mean/dot",
        |r| vec![("a", random(r, &[5])), ("b", random(r, &[5]))],
        |t, v| {
            let d = t.dot(v[0], v[1])?;
            let s = t.sum(v[0])?;
            let m = t.mean(v[1])?;
            let x = t.mul(d, s)?;
            t.add(x, m)
        },
    );
}

#[test]
fn gradcheck_composite_touching_every_primitive() {
    // Layer norm feeding a row normalization has large third derivatives;
    // truncation error at h = 1e-3 sits right at the tolerance here.
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = vec![
            ("x", random(&mut rng, &[1, 3, 3])),
            ("k", random(&mut rng, &[2, 1, 3, 3])),
            ("b", random(&mut rng, &[2])),
            ("g", random(&mut rng, &[4])),
            ("lb", random(&mut rng, &[4])),
        ];
        let report = grad_check(composite, &point, 1e-4);
        let report = report.unwrap();
        assert!(report.max_rel_error() < TOL, "seed {seed}: {report:?}");
    }
}
