use adapterbias_lab::numerics::{finite_diff_check, layer_norm, outer_product, softmax_rows, AttnDims, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Entries of magnitude in [0.5, 1.5] with random sign.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.5..1.5);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Largest finite-difference error over every input of `op`, with the output
/// contracted against a fixed random tensor so every output entry matters.
fn primitive_error(seed: u64, inputs: Vec<Tensor>, op: impl Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.shape(), t.data().to_vec(), true).unwrap()).collect();
        let y = op(&mut tape, &vars);
        tape.shape(y).to_vec()
    };
    let weights = rand_tensor(&mut rng, &probe);
    let mut worst = 0.0_f64;
    for i in 0..inputs.len() {
        let err = finite_diff_check(
            |theta: &Tensor| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let src = if j == i { theta } else { t };
                        tape.input(src.shape(), src.data().to_vec(), true).unwrap()
                    })
                    .collect();
                let y = op(&mut tape, &vars);
                let w = tape.constant(weights.shape(), weights.data().to_vec()).unwrap();
                let prod = tape.mul(y, w).unwrap();
                let loss = tape.sum(prod).unwrap();
                let grads = tape.backward(loss).unwrap();
                let g = grads.get(vars[i]).map_or_else(|| vec![0.0; theta.numel()], <[f64]>::to_vec);
                Ok((tape.scalar(loss).unwrap(), g))
            },
            &inputs[i],
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, _) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[m, n]);
        let row = rand_tensor(&mut rng, &[n]);
        let s = rand_tensor(&mut rng, &[1]);
        let c: f64 = rng.gen_range(-2.0..2.0);
        prop_assert!(primitive_error(seed, vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone(), row], |t, v| t.add_row(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone(), s], |t, v| t.add_scalar(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone()], move |t, v| t.scale(v[0], c).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone()], |t, v| t.gelu(v[0]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a.clone()], |t, v| t.sigmoid(v[0]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a], |t, v| t.sum(v[0]).unwrap()) < TOL);
    }

    #[test]
    fn linear_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let w = rand_tensor(&mut rng, &[k]);
        let u = rand_tensor(&mut rng, &[m]);
        let table = rand_tensor(&mut rng, &[k, n]);
        let rows: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..k)).collect();
        prop_assert!(primitive_error(seed, vec![a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![a, w.clone()], |t, v| t.matvec(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![u, w], |t, v| t.outer(v[0], v[1]).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![table], move |t, v| t.gather_rows(v[0], &rows).unwrap()) < TOL);
    }

    #[test]
    fn normalising_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, _, _) = dims(&mut rng);
        let n = rng.gen_range(3..6);
        let x = rand_tensor(&mut rng, &[m, n]);
        let gamma = rand_tensor(&mut rng, &[n]);
        let beta = rand_tensor(&mut rng, &[n]);
        let mut mask: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        mask[0] = 1.0;
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        prop_assert!(primitive_error(seed, vec![x.clone(), gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![x.clone()], move |t, v| t.softmax_rows(v[0], &mask).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![x], move |t, v| t.cross_entropy(v[0], &labels).unwrap()) < TOL);
    }

    #[test]
    fn attention_primitives_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = AttnDims {
            batch: rng.gen_range(1..3),
            seq: rng.gen_range(1..4),
            heads: rng.gen_range(1..3),
            head_dim: rng.gen_range(1..3),
        };
        let rows = d.batch * d.seq;
        let width = d.heads * d.head_dim;
        let q = rand_tensor(&mut rng, &[rows, width]);
        let k = rand_tensor(&mut rng, &[rows, width]);
        let p = rand_tensor(&mut rng, &[d.batch * d.heads * d.seq, d.seq]);
        prop_assert!(primitive_error(seed, vec![q, k.clone()], move |t, v| t.attn_scores(v[0], v[1], d).unwrap()) < TOL);
        prop_assert!(primitive_error(seed, vec![p, k], move |t, v| t.attn_context(v[0], v[1], d).unwrap()) < TOL);
    }

    #[test]
    fn outer_product_has_rank_one(seed in any::<u64>(), r in 2usize..6, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = outer_product(&rand_tensor(&mut rng, &[r]), &rand_tensor(&mut rng, &[c])).unwrap();
        for i in 0..r {
            for k in i + 1..r {
                for j in 0..c {
                    for l in j + 1..c {
                        let minor = b.at2(i, j) * b.at2(k, l) - b.at2(i, l) * b.at2(k, j);
                        prop_assert!(minor.abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..7));
        let x = Tensor::randn(&[m, n], 3.0, &mut rng);
        let mask = vec![1.0; n];
        let p = softmax_rows(&x, &mask).unwrap();
        let xs = Tensor::matrix(m, n, x.data().iter().map(|v| v + shift).collect()).unwrap();
        let q = softmax_rows(&xs, &mask).unwrap();
        for r in 0..m {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_maps_constant_rows_to_zero(value in -1e3f64..1e3, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(2, n, vec![value; 2 * n]).unwrap();
        let y = layer_norm(&x, &rand_tensor(&mut rng, &[n]), &Tensor::zeros(&[n]), 1e-12).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let wv = tape.input(w.shape(), w.data().to_vec(), true).unwrap();
            let xv = tape.constant(x.shape(), x.data().to_vec()).unwrap();
            let g = tape.constant(&[3], gamma.data().to_vec()).unwrap();
            let bt = tape.constant(&[3], beta.data().to_vec()).unwrap();
            let h = tape.matmul(xv, wv).unwrap();
            let n = tape.layer_norm(h, g, bt, 1e-12).unwrap();
            let l1 = tape.cross_entropy(n, &[0, 2, 1]).unwrap();
            let act = tape.gelu(h).unwrap();
            let l2 = tape.sum(act).unwrap();
            let s1 = tape.scale(l1, ca).unwrap();
            let s2 = tape.scale(l2, cb).unwrap();
            let loss = tape.add(s1, s2).unwrap();
            tape.backward(loss).unwrap().get(wv).unwrap().to_vec()
        };
        let (g1, g2, g) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..g.len() {
            prop_assert!((g[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }
}
