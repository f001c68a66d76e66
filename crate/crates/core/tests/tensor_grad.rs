//! Finite-difference checks for every primitive plus engine-level properties.

use looprecon::tensor::{grad_check, GradCheck, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contract with fixed random weights so every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            weighted_sum(tape, y, 99)
        },
        &inputs,
        &GradCheck::default(),
    )
    .unwrap();
    assert!(report.passed, "{name}: {report:?}");
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng, -2.0, 2.0);
    let b = random(&[4], &mut rng, -2.0, 2.0);
    let s = random(&[], &mut rng, 0.5, 2.0);
    check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check("sub", vec![b.clone(), a.clone()], |t, v| t.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check("mul-scalar", vec![s.clone(), a.clone()], |t, v| t.mul(v[0], v[1]));
    let denom = Tensor::from_fn(&[4], |i| if i % 2 == 0 { 0.7 + i as f64 * 0.3 } else { -1.1 - i as f64 * 0.2 });
    check("div", vec![a.clone(), denom.clone()], |t, v| t.div(v[0], v[1]));
    check("div-rev", vec![denom, a], |t, v| t.div(v[1], v[0]));
}

#[test]
fn unary_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 5], &mut rng, -2.0, 2.0);
    let pos = random(&[2, 5], &mut rng, 0.2, 2.0);
    check("exp", vec![x.clone()], |t, v| t.exp(v[0]));
    check("log", vec![pos.clone()], |t, v| t.log(v[0]));
    check("sqrt", vec![pos.clone()], |t, v| t.sqrt(v[0]));
    check("neg", vec![x.clone()], |t, v| t.neg(v[0]));
    check("pow", vec![pos], |t, v| t.powf(v[0], 2.5));
    check("sin", vec![x.clone()], |t, v| t.sin(v[0]));
    check("cos", vec![x.clone()], |t, v| t.cos(v[0]));
    check("gelu", vec![x], |t, v| t.gelu(v[0]));
}

#[test]
fn matmul_shared_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng, -2.0, 2.0);
    let w = random(&[4, 5], &mut rng, -2.0, 2.0);
    let b = random(&[2, 4, 3], &mut rng, -2.0, 2.0);
    check("matmul-shared", vec![a.clone(), w], |t, v| t.matmul(v[0], v[1]));
    check("matmul-batched", vec![a, b], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 4, 2], &mut rng, -2.0, 2.0);
    for axis in 0..3 {
        check("sum", vec![x.clone()], |t, v| t.sum(v[0], axis));
        check("mean", vec![x.clone()], |t, v| t.mean(v[0], axis));
        check("max", vec![x.clone()], |t, v| t.max(v[0], axis));
    }
}

#[test]
fn layout_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 4], &mut rng, -2.0, 2.0);
    let y = random(&[2, 1, 4], &mut rng, -2.0, 2.0);
    check("reshape", vec![x.clone()], |t, v| t.reshape(v[0], &[6, 4]));
    check("transpose", vec![x.clone()], |t, v| t.transpose(v[0], &[2, 0, 1]));
    check("concat", vec![x.clone(), y], |t, v| t.concat(&[v[0], v[1], v[0]], 1));
    check("narrow", vec![x.clone()], |t, v| t.narrow(v[0], 2, 1, 2));
    check("split", vec![x.clone()], |t, v| {
        let parts = t.split(v[0], 1, &[1, 2])?;
        let a = t.sum(parts[0], 1)?;
        let b = t.sum(parts[1], 1)?;
        let bb = t.mul(b, b)?;
        t.add(a, bb)
    });
    check("gather", vec![x], |t, v| t.gather(v[0], &[1, 0, 1, 1]));
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 5], &mut rng, -2.0, 2.0);
    let g = random(&[5], &mut rng, -2.0, 2.0);
    let b = random(&[5], &mut rng, -2.0, 2.0);
    check("softmax", vec![x.clone()], |t, v| t.softmax(v[0]));
    check("layer_norm", vec![x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn composites() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[6], &mut rng, -2.0, 2.0);
    check("softplus", vec![x.clone()], |t, v| t.softplus(v[0]));
    check("relu", vec![x.clone()], |t, v| t.relu(v[0]));
    check("abs", vec![x.clone()], |t, v| t.abs(v[0]));
    check("expand_last", vec![x], |t, v| t.expand_last(v[0], 3));
}

#[test]
fn softmax_cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.5]).unwrap();
    let onehot = Tensor::from_f64(&[4], &[0.0, 0.0, 1.0, 0.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let l = tape.param(logits.clone());
    let y = tape.constant(onehot.clone());
    let p = tape.softmax(l).unwrap();
    let lp = tape.log(p).unwrap();
    let prod = tape.mul(lp, y).unwrap();
    let s = tape.sum_all(prod).unwrap();
    let loss = tape.neg(s).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(l).unwrap();
    let probs = tape.value(p).data().to_vec();
    for i in 0..4 {
        let expected = probs[i] - onehot.data()[i];
        assert!((g.data()[i] - expected).abs() < 1e-12);
    }
    // and against finite differences
    let report = grad_check(
        |tape, v| {
            let y = tape.constant(onehot.clone());
            let p = tape.softmax(v[0])?;
            let lp = tape.log(p)?;
            let prod = tape.mul(lp, y)?;
            let s = tape.sum_all(prod)?;
            tape.neg(s)
        },
        &[logits],
        &GradCheck::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn mlp_with_layer_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 6], &mut rng, -2.0, 2.0);
    let w1 = random(&[6, 8], &mut rng, -1.0, 1.0);
    let b1 = random(&[8], &mut rng, -1.0, 1.0);
    let g = random(&[8], &mut rng, 0.5, 1.5);
    let beta = random(&[8], &mut rng, -0.5, 0.5);
    let w2 = random(&[8, 8], &mut rng, -1.0, 1.0);
    let w3 = random(&[8, 3], &mut rng, -1.0, 1.0);
    let report = grad_check(
        |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let h = t.layer_norm(h, v[3], v[4])?;
            let h = t.gelu(h)?;
            let h = t.matmul(h, v[5])?;
            let h = t.sigmoid(h)?;
            let h = t.matmul(h, v[6])?;
            let sq = t.square(h)?;
            t.mean_all(sq)
        },
        &[x, w1, b1, g, beta, w2, w3],
        &GradCheck {
            tol: 1e-4,
            ..GradCheck::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

trait Sigmoid {
    fn sigmoid(&mut self, x: Var) -> Result<Var>;
}

impl Sigmoid for Tape<f64> {
    // 1 / (1 + exp(-x)) from primitives
    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        let e = self.exp(n)?;
        let d = self.add_scalar(e, 1.0)?;
        let one = self.scalar_const(1.0);
        self.div(one, d)
    }
}

#[test]
fn fan_out_sums_branch_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random(&[5], &mut rng, -2.0, 2.0);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(x0.clone());
    let a = tape.exp(x).unwrap();
    let b = tape.sin(x).unwrap();
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum_all(s).unwrap();
    let g = tape.backward(loss).unwrap();
    for (i, &v) in x0.data().iter().enumerate() {
        let manual = v.exp() + v.cos();
        assert!((g.get(x).unwrap().data()[i] - manual).abs() < 1e-14);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[16, 32], &mut rng, -2.0, 2.0).cast::<f32>();
        let w = random(&[32, 32], &mut rng, -1.0, 1.0).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.param(x);
        let wv = tape.param(w);
        let h = tape.matmul(xv, wv).unwrap();
        let h = tape.softmax(h).unwrap();
        let loss = tape.sum_all(h).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(h).clone(), g.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in proptest::collection::vec(-20.0f64..20.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[n], &row).unwrap());
        let y = tape.softmax(x).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let xs = tape.constant(Tensor::from_f64(&[n], &shifted).unwrap());
        let ys = tape.softmax(xs).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(tape.value(ys)) < 1e-6);
    }

    #[test]
    fn random_point_primitive_jvps(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 3], &mut rng, -2.0, 2.0);
        let w = random(&[3, 3], &mut rng, -2.0, 2.0);
        let report = grad_check(
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let s = t.sin(h)?;
                let e = t.softmax(s)?;
                weighted_sum(t, e, seed)
            },
            &[x, w],
            &GradCheck::default(),
        ).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }
}
