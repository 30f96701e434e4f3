//! Central finite-difference checks for every differentiable tape op.

use kgseq_core::autograd::{Tape, Var};
use kgseq_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `‖analytic − numeric‖∞ / max(‖numeric‖∞, 1e-8)` for every input of `f`,
/// where `f` maps leaves to a scalar node.
fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&Tape<'t, f64>, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out).unwrap();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        let v = tape.value(out).data()[0];
        v
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project<'t>(tape: &Tape<'t, f64>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&shape, &mut rng));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod).unwrap()
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_grads(m in dim(), k in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, k], &mut rng), random(&[k, n], &mut rng)];
        let err = check(&inputs, |t, v| { let y = t.matmul(v[0], v[1]).unwrap(); project(t, y, seed) });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn matmul_t_grads(m in dim(), k in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, k], &mut rng), random(&[n, k], &mut rng)];
        let err = check(&inputs, |t, v| { let y = t.matmul_t(v[0], v[1]).unwrap(); project(t, y, seed) });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn elementwise_grads(m in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, n], &mut rng), random(&[m, n], &mut rng)];
        let err = check(&inputs, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.mul(a, v[1]).unwrap();
            let c = t.scale(b, -1.7).unwrap();
            let d = t.relu(c).unwrap();
            project(t, d, seed)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn softmax_grads(m in dim(), n in dim(), axis in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, n], &mut rng)];
        let err = check(&inputs, |t, v| { let y = t.softmax(v[0], axis).unwrap(); project(t, y, seed) });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn layer_norm_grads(m in dim(), n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, n], &mut rng), random(&[n], &mut rng), random(&[n], &mut rng)];
        let err = check(&inputs, |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap(); project(t, y, seed) });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn embedding_grads(v in dim(), d in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let inputs = [random(&[v, d], &mut rng)];
        let err = check(&inputs, |t, x| { let y = t.embedding(x[0], &ids).unwrap(); project(t, y, seed) });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn concat_slice_block_reshape_grads(m in dim(), n in dim(), axis in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[m, n], &mut rng), random(&[m, n], &mut rng)];
        let err = check(&inputs, |t, v| {
            let c = t.concat(&[v[0], v[1], v[0]], axis).unwrap();
            let len = t.shape(c)[axis];
            let s = t.slice(c, axis, len / 3, len).unwrap();
            let sh = t.shape(s);
            let b = t.block(s, (0, sh[0]), (sh[1] / 2, sh[1])).unwrap();
            let bs = t.shape(b);
            let r = t.reshape(b, &[bs[0] * bs[1]]).unwrap();
            project(t, r, seed)
        });
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn cross_entropy_grads(m in dim(), n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..n as u32)).collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let inputs = [random(&[m, n], &mut rng)];
        let err = check(&inputs, |t, v| t.weighted_cross_entropy(v[0], &targets, &weights).unwrap());
        prop_assert!(err < TOL, "rel err {err}");
        let err = check(&inputs, |t, v| t.cross_entropy(v[0], &targets).unwrap());
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(m in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[m, n], &mut rng).map(|v| v * 30.0));
        let y = tape.softmax(x, 1).unwrap();
        let y = tape.value(y);
        for r in 0..m {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(m in dim(), n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[m, n], &mut rng).map(|v| v * 5.0 + 2.0));
        let g = tape.constant(Tensor::full(&[n], 1.0));
        let b = tape.constant(Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let xv = tape.value(x).clone();
        let y = tape.value(y);
        for r in 0..m {
            let row = xv.row(r);
            let mu_in = row.iter().sum::<f64>() / n as f64;
            let var_in = row.iter().map(|v| (v - mu_in).powi(2)).sum::<f64>() / n as f64;
            // rows that are (numerically) constant carry no scale to normalise
            prop_assume!(var_in > 1e-2);
            let out = y.row(r);
            let mu = out.iter().sum::<f64>() / n as f64;
            let var = out.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mu.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss(m in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&[m, n], &mut rng);
        let w0 = random(&[n, n], &mut rng);
        let run = |which: u8| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.leaf(w0.clone());
            let y = tape.matmul(x, w).unwrap();
            let f = { let s = tape.softmax(y, 1).unwrap(); project(&tape, s, 1) };
            let g = { let r = tape.relu(y).unwrap(); project(&tape, r, 2) };
            let loss = match which { 0 => f, 1 => g, _ => tape.add(f, g).unwrap() };
            tape.backward(loss).unwrap().wrt(w).unwrap().data().to_vec()
        };
        let (gf, gg, gsum) = (run(0), run(1), run(2));
        for i in 0..gsum.len() {
            prop_assert!((gsum[i] - gf[i] - gg[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let tape = Tape::<f64>::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let c = tape.value(c);
    for i in 0..2 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..3 {
                s += a.data()[i * 3 + p] * b.data()[p * 2 + j];
            }
            assert!((s - c.data()[i * 2 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = [
        random(&[4, 5], &mut rng),
        random(&[5, 6], &mut rng),
        random(&[6, 6], &mut rng),
        random(&[6, 3], &mut rng),
    ];
    let err = check(&inputs, |t, v| {
        let h1 = t.matmul(v[0], v[1]).unwrap();
        let h1 = t.relu(h1).unwrap();
        let h2 = t.matmul(h1, v[2]).unwrap();
        let h2 = t.relu(h2).unwrap();
        let logits = t.matmul(h2, v[3]).unwrap();
        t.cross_entropy(logits, &[0, 2, 1, 2]).unwrap()
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn tiny_transformer_loss_matches_finite_differences() {
    use kgseq_core::model::{ModelConfig, Seq2Seq};
    use rand_distr::{Distribution, Normal};

    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        vocab_size: 16,
        max_len: 8,
        dropout: 0.0,
        num_buckets: 8,
        max_distance: 16,
    };
    let mut model = Seq2Seq::<f64>::new(config, 3).unwrap();
    // larger weights than the default init keep every gradient well above FD noise
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.0, 0.4).unwrap();
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let batch: Vec<(Vec<u32>, Vec<u32>)> = vec![
        (vec![3, 4, 5, 6], vec![7, 8, 1]),
        (vec![9, 10], vec![11, 12, 13, 1]),
    ];
    let loss_of = |m: &Seq2Seq<f64>| -> f64 {
        let tape = Tape::new();
        let refs: Vec<(&[u32], &[u32])> = batch.iter().map(|(i, t)| (i.as_slice(), t.as_slice())).collect();
        let l = m.batch_loss(&tape, &refs, None).unwrap();
        let v = tape.value(l).data()[0];
        v
    };

    let mut analytic: Vec<Tensor<f64>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    {
        let tape = Tape::new();
        let refs: Vec<(&[u32], &[u32])> = batch.iter().map(|(i, t)| (i.as_slice(), t.as_slice())).collect();
        let l = model.batch_loss(&tape, &refs, None).unwrap();
        tape.backward(l).unwrap().accumulate_params(&mut analytic);
    }

    let mut worst: f64 = 0.0;
    for pi in 0..model.params().len() {
        let n = model.params()[pi].numel();
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for j in 0..n {
            let orig = model.params()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + H;
            let up = loss_of(&model);
            model.params_mut()[pi].data_mut()[j] = orig - H;
            let down = loss_of(&model);
            model.params_mut()[pi].data_mut()[j] = orig;
            let num = (up - down) / (2.0 * H);
            diff = diff.max((num - analytic[pi].data()[j]).abs());
            scale = scale.max(num.abs());
        }
        let rel = diff / scale;
        assert!(rel < TOL, "{}: rel err {rel}", model.param_specs()[pi].name);
        worst = worst.max(rel);
    }
    println!("tiny transformer worst relative error {worst:.2e}");
}
