mod common;

use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqfusion::data::SynthMode;
use seqfusion::fusion::{FusionConfig, FusionMode, ModelParams};
use seqfusion::graph::{OpKind, Tape, Var};
use seqfusion::precision::{DoubleDouble, Real};
use seqfusion::training::{finite_difference_check, grad_check, relative_error, GradCheckOptions};
use seqfusion::{Execution, Tensor};

use common::{rng, synth};

const EPS: f64 = 1e-5;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Loss `Σ w ⊙ op(inputs)` with fixed random `w` of magnitude in [0.5, 1.5].
fn weighted_loss(inputs: &[Tensor], weights: &Tensor, build: &Build, trainable: bool) -> (Tape, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

fn max_op_error(r: &mut ChaCha8Rng, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = build(&mut probe, &vars);
    let shape = probe.shape(out).to_vec();
    let mut weights = random_tensor(r, &shape, 0.5, 1.5);
    for w in weights.data_mut() {
        if r.random_bool(0.5) {
            *w = -*w;
        }
    }

    let (tape, vars, loss) = weighted_loss(&inputs, &weights, build, true);
    let grads = tape.backward(loss).unwrap();
    let eval = |inputs: &[Tensor]| {
        let (tape, _, loss) = weighted_loss(inputs, &weights, build, false);
        tape.value(loss).item()
    };

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

fn fixed() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        rng_seed: RngSeed::Fixed(0x5eed),
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(fixed())]

    #[test]
    fn binary_and_linear_ops_match_finite_differences(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut r, &[k, n], -2.0, 2.0);
        let x = random_tensor(&mut r, &[k], -2.0, 2.0);
        let y = random_tensor(&mut r, &[k], -2.0, 2.0);
        let s = random_tensor(&mut r, &[], -2.0, 2.0);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
            ("matvec", vec![a.clone(), x.clone()], Box::new(|t, v| t.matvec(v[0], v[1]).unwrap())),
            ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]).unwrap())),
            ("add", vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            ("sub", vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
            ("mul", vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            ("scale", vec![x.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
            ("scale_by", vec![s.clone(), x.clone()], Box::new(|t, v| t.scale_by(v[0], v[1]).unwrap())),
            ("dot", vec![x.clone(), y.clone()], Box::new(|t, v| t.dot(v[0], v[1]).unwrap())),
            ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ];
        for (name, inputs, build) in cases {
            let e = max_op_error(&mut r, inputs, build.as_ref());
            prop_assert!(e < 1e-6, "{name}: {e:e}");
        }
    }

    #[test]
    fn nonlinear_ops_match_finite_differences(seed in any::<u64>(), n in 1usize..7, rows in 1usize..4) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n], -3.0, 3.0);
        let m = random_tensor(&mut r, &[rows, n], -3.0, 3.0);
        let target = r.random_range(0..n);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("sigmoid", vec![x.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
            ("tanh", vec![x.clone()], Box::new(|t, v| t.tanh(v[0]))),
            ("softmax", vec![x.clone()], Box::new(|t, v| t.softmax(v[0]).unwrap())),
            ("softmax_rows", vec![m.clone()], Box::new(|t, v| t.softmax_rows(v[0]).unwrap())),
            ("cross_entropy", vec![x.clone()], Box::new(move |t, v| {
                let p = t.softmax(v[0]).unwrap();
                t.cross_entropy(p, target).unwrap()
            })),
        ];
        for (name, inputs, build) in cases {
            let e = max_op_error(&mut r, inputs, build.as_ref());
            prop_assert!(e < 1e-6, "{name}: {e:e}");
        }
    }

    #[test]
    fn structural_ops_match_finite_differences(seed in any::<u64>(), n in 1usize..5, rows in 1usize..4) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[n], -2.0, 2.0);
        let y = random_tensor(&mut r, &[n + 1], -2.0, 2.0);
        let a = random_tensor(&mut r, &[rows, n], -2.0, 2.0);
        let b = random_tensor(&mut r, &[rows, 2], -2.0, 2.0);
        let s1 = random_tensor(&mut r, &[], -2.0, 2.0);
        let s2 = random_tensor(&mut r, &[], -2.0, 2.0);
        let row = r.random_range(0..rows);
        let start = r.random_range(0..=n);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            ("concat", vec![x.clone(), y.clone()], Box::new(|t, v| t.concat(&[v[0], v[1], v[0]]).unwrap())),
            ("concat_cols", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
            ("slice", vec![y.clone()], Box::new(move |t, v| t.slice(v[0], start, (n + 1 - start).clamp(1, 2)).unwrap())),
            ("stack", vec![x.clone(), x.clone()], Box::new(|t, v| t.stack(&[v[0], v[1], v[0]]).unwrap())),
            ("row", vec![a.clone()], Box::new(move |t, v| t.row(v[0], row).unwrap())),
            ("mean", vec![s1.clone(), s2.clone()], Box::new(|t, v| t.mean(&[v[0], v[1], v[1]]).unwrap())),
        ];
        for (name, inputs, build) in cases {
            let e = max_op_error(&mut r, inputs, build.as_ref());
            prop_assert!(e < 1e-6, "{name}: {e:e}");
        }
    }
}

#[test]
fn linear_toy_model_is_exact_up_to_rounding() {
    // L = w·x + b, gradients w.r.t. (w, b).
    let mut r = rng(3);
    let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let b = 0.25;
    let mut tape = Tape::new();
    let wv = tape.leaf(Tensor::vector(&w));
    let bv = tape.leaf(Tensor::scalar(b));
    let xv = tape.constant(Tensor::vector(&x));
    let d = tape.dot(wv, xv).unwrap();
    let loss = tape.add(d, bv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = vec![grads.get(wv).unwrap().to_vec(), grads.get(bv).unwrap().to_vec()];
    let names = vec!["w".to_string(), "b".to_string()];

    fn toy<R: Real>(w: &[f64], x: &[f64], b: f64, shift: (usize, usize, R)) -> R {
        let mut wr: Vec<R> = w.iter().map(|&v| R::from_f64(v)).collect();
        let mut br = R::from_f64(b);
        match shift {
            (0, j, d) => wr[j] = wr[j] + d,
            (_, _, d) => br = br + d,
        }
        wr.iter().zip(x).fold(br, |s, (&wi, &xi)| s + wi * R::from_f64(xi))
    }

    let r64 = finite_difference_check(&names, &analytic, EPS, Execution::Sequential, |i, j, d: f64| {
        Ok(toy(&w, &x, b, (i, j, d)))
    })
    .unwrap();
    assert!(r64.max_rel_error < 1e-10, "{r64:?}");
    let rdd = finite_difference_check(&names, &analytic, EPS, Execution::Sequential, |i, j, d: DoubleDouble| {
        Ok(toy(&w, &x, b, (i, j, d)))
    })
    .unwrap();
    assert!(rdd.max_rel_error < 1e-10, "{rdd:?}");
    assert_eq!(rdd.checked, 7);
}

fn tiny(mode: FusionMode, heads: usize) -> ModelParams {
    ModelParams::init(
        FusionConfig {
            mode,
            d_model: 8,
            heads,
            input_dim: 4,
            ..FusionConfig::default()
        },
        1,
    )
    .unwrap()
}

#[test]
fn corrupted_backward_is_caught() {
    let corpus = synth(SynthMode::Easy, 1, 3, 4, 0.5, 4);
    let sample = &corpus.sequences[0];
    for kind in [OpKind::Tanh, OpKind::Sigmoid, OpKind::MatVec, OpKind::Softmax, OpKind::ScaleBy] {
        let opts = GradCheckOptions {
            fault: Some((kind, 1.01)),
            ..GradCheckOptions::default()
        };
        let r = grad_check(&tiny(FusionMode::ScalarGate, 4), sample, &opts).unwrap();
        assert!(r.max_rel_error > 1e-3, "{kind:?}: {r:?}");
    }
}

#[test]
fn sequential_and_parallel_probes_agree_bitwise() {
    let corpus = synth(SynthMode::Easy, 1, 3, 4, 0.5, 5);
    let m = tiny(FusionMode::Hadamard, 2);
    let run = |exec| {
        let opts = GradCheckOptions {
            exec,
            ..GradCheckOptions::default()
        };
        grad_check(&m, &corpus.sequences[0], &opts).unwrap()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn gradcheck_error_grows_with_larger_epsilon() {
    let corpus = synth(SynthMode::Easy, 1, 3, 4, 0.5, 0);
    let m = tiny(FusionMode::Concat, 4);
    let at = |epsilon| {
        let opts = GradCheckOptions {
            epsilon,
            ..GradCheckOptions::default()
        };
        grad_check(&m, &corpus.sequences[0], &opts).unwrap().max_rel_error
    };
    let (small, large) = (at(1e-5), at(1e-3));
    assert!(small < 1e-4);
    assert!(large > small, "{large:e} vs {small:e}");
}
