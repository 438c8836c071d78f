//! Every differentiable op against central finite differences.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackgroup_nd::gradcheck::{max_relative_error, numeric_grad};
use trackgroup_nd::{Tape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.2..2.0))
}

/// `loss = sum(f(inputs) * R)` for a fixed random `R`; compares the tape
/// gradient of every input with finite differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> Result<(), TestCaseError> {
    let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(Arc::new(x.clone()), true)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).clone();
        let Some(w) = weights else {
            return (0.0, shape, vec![]);
        };
        let w = tape.constant(w.clone());
        let weighted = tape.mul(out, w).unwrap();
        let loss = tape.sum(weighted);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
        (tape.value(loss).item(), shape, grads)
    };

    let (_, out, _) = eval(inputs, None);
    let mut rng = ChaCha8Rng::seed_from_u64(out.len() as u64);
    let weights = Tensor::new(out.shape().to_vec(), (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let (_, _, grads) = eval(inputs, Some(&weights));

    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_grad(x, STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            let mut tape = Tape::inference();
            let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        });
        let analytic = grads[i].clone().unwrap_or_else(|| x.map(|_| 0.0));
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        prop_assert!(err < TOL, "input {i}: relative error {err:e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }
    Ok(())
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..5, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul((r, c, seed) in dims(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&[random(r, k, &mut rng), random(k, c, &mut rng)], |t, v| t.matmul(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn elementwise_binary((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = [random(r, c, &mut rng), random(r, c, &mut rng)];
        check(&xs, |t, v| t.add(v[0], v[1]).unwrap())?;
        check(&xs, |t, v| t.sub(v[0], v[1]).unwrap())?;
        check(&xs, |t, v| t.mul(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn row_broadcast((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = [random(r, c, &mut rng), random(1, c, &mut rng)];
        check(&xs, |t, v| t.add_row(v[0], v[1]).unwrap())?;
        check(&xs, |t, v| t.mul_row(v[0], v[1]).unwrap())?;
    }

    #[test]
    fn scalar_ops((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(r, c, &mut rng);
        check(&[x.clone()], |t, v| t.scale(v[0], -1.7))?;
        check(&[x.clone()], |t, v| t.add_scalar(v[0], 0.3))?;
        check(&[x, random(1, 1, &mut rng)], |t, v| t.scale_by(v[0], v[1]).unwrap())?;
        check(&[positive(r, c, &mut rng)], |t, v| t.recip(v[0]))?;
    }

    #[test]
    fn activations((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(r, c, &mut rng);
        check(&[x.clone()], |t, v| t.sigmoid(v[0]))?;
        check(&[x.clone()], |t, v| t.tanh(v[0]))?;
        check(&[x.clone()], |t, v| t.relu(v[0]))?;
        check(&[x.clone()], |t, v| t.leaky_relu(v[0], 0.2))?;
        check(&[x.clone()], |t, v| t.exp(v[0]))?;
        check(&[x.clone()], |t, v| t.square(v[0]))?;
        check(&[x], |t, v| t.clamp(v[0], -0.5, 0.5))?;
        check(&[positive(r, c, &mut rng)], |t, v| t.log(v[0]))?;
    }

    #[test]
    fn structural((r, c, seed) in dims(), c2 in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = [random(r, c, &mut rng), random(r, c2, &mut rng)];
        check(&xs, |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap())?;
        check(&xs[..1], |t, v| t.slice_cols(v[0], c / 2, c).unwrap())?;
        check(&xs[..1], |t, v| t.transpose(v[0]))?;
        check(&xs[..1], |t, v| t.reshape(v[0], vec![c, r]).unwrap())?;
        check(&[random(r, 1, &mut rng)], |t, v| t.diag(v[0]).unwrap())?;
    }

    #[test]
    fn reductions((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(r, c, &mut rng);
        check(&[x.clone()], |t, v| t.sum(v[0]))?;
        check(&[x.clone()], |t, v| t.mean(v[0]))?;
        check(&[x.clone()], |t, v| t.sum_cols(v[0]))?;
        check(&[x.clone()], |t, v| t.mean_rows(v[0]))?;
        check(&[x.clone()], |t, v| t.max(v[0]))?;
        check(&[x], |t, v| t.l2_norm_rows(v[0]))?;
    }

    #[test]
    fn normalisers((r, c, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(r, c + 1, &mut rng);
        check(&[x.clone()], |t, v| t.softmax_rows(v[0]))?;
        check(&[x], |t, v| t.layer_norm_rows(v[0], 1e-5))?;
    }

    #[test]
    fn pair_kernels(n in 1usize..5, heads in 1usize..4, hd in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * hd;
        let (q, k) = (random(n, d, &mut rng), random(n, d, &mut rng));
        check(&[q.clone()], |t, v| t.pairwise_diff(v[0]))?;
        check(&[q.clone(), k.clone()], |t, v| t.pair_broadcast_add(v[0], v[1]).unwrap())?;
        check(&[q.clone(), k.clone()], |t, v| t.head_scores(v[0], v[1], heads).unwrap())?;
        check(&[random(n * n, heads, &mut rng)], |t, v| t.softmax_neighbors(v[0], n).unwrap())?;
        check(&[random(n * n, heads, &mut rng), k], |t, v| t.head_aggregate(v[0], v[1], heads).unwrap())?;
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random(3, 4, &mut rng), random(4, 2, &mut rng));
    let mut tape = Tape::inference();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
            assert!((tape.value(c).get(i, j) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn consecutive_tapes_give_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, w) = (random(4, 3, &mut rng), random(3, 3, &mut rng));
    let run = || {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vw = tape.leaf(Arc::new(w.clone()), true);
        let h = tape.matmul(vx, vw).unwrap();
        let h = tape.tanh(h);
        let s = tape.softmax_rows(h);
        let loss = tape.mean(s);
        let sq = tape.square(loss);
        tape.backward(sq).unwrap();
        tape.grad(vw).unwrap().clone()
    };
    let first = run();
    assert_eq!(first.data(), run().data());
}
