//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error};
pub use tape::{AttnDims, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// `out[i,j] = v[i] · alpha[j]`
pub fn outer_product(v: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.leaf(v), tape.leaf(alpha));
    let out = tape.outer(a, b)?;
    Ok(tape.to_tensor(out))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, g, b) = (tape.leaf(x), tape.leaf(gamma), tape.leaf(beta));
    let out = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.to_tensor(out))
}

/// Row softmax of `x` restricted to columns where `mask` is nonzero.
pub fn softmax_rows(x: &Tensor, mask: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = tape.softmax_rows(xv, mask)?;
    Ok(tape.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn outer_product_minors_vanish() {
        let b = outer_product(&randn(&[5], 1), &randn(&[4], 2)).unwrap();
        for i in 0..5 {
            for k in i + 1..5 {
                for j in 0..4 {
                    for l in j + 1..4 {
                        let minor = b.at2(i, j) * b.at2(k, l) - b.at2(i, l) * b.at2(k, j);
                        assert!(minor.abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_normalise_and_ignore_shift() {
        let x = randn(&[3, 5], 3);
        let mask = [1.0, 1.0, 0.0, 1.0, 1.0];
        let p = softmax_rows(&x, &mask).unwrap();
        let shifted = Tensor::matrix(3, 5, x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let q = softmax_rows(&shifted, &mask).unwrap();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p.at2(r, 2), 0.0);
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        assert!(softmax_rows(&randn(&[1, 3], 4), &[0.0; 3]).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Tensor::matrix(2, 4, vec![3.25; 8]).unwrap();
        let y = layer_norm(&x, &randn(&[4], 5), &Tensor::zeros(&[4]), LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_uses_population_variance() {
        let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn gelu_is_exact_gaussian_form() {
        let (y, dy) = kernels::gelu(1.0);
        assert!((y - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((dy - (0.841_344_746_068_542_9 + 0.241_970_724_519_143_37)).abs() < 1e-15);
    }

    fn loss_of(a: f64, b: f64, x: &Tensor, w: &Tensor) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let h = tape.matmul(xv, wv).unwrap();
        let g = tape.gelu(h).unwrap();
        let l1 = tape.sum(g).unwrap();
        let sq = tape.mul(h, h).unwrap();
        let l2 = tape.sum(sq).unwrap();
        let s1 = tape.scale(l1, a).unwrap();
        let s2 = tape.scale(l2, b).unwrap();
        let total = tape.add(s1, s2).unwrap();
        let grads = tape.backward(total).unwrap();
        (tape.scalar(total).unwrap(), grads.get(wv).unwrap().to_vec())
    }

    #[test]
    fn backward_is_linear() {
        let x = randn(&[3, 4], 6);
        let w = randn(&[4, 2], 7).with_requires_grad(true);
        let (_, g1) = loss_of(1.0, 0.0, &x, &w);
        let (_, g2) = loss_of(0.0, 1.0, &x, &w);
        let (_, g) = loss_of(2.5, -0.75, &x, &w);
        for i in 0..g.len() {
            assert!((g[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = randn(&[3, 4], 8);
        let w = randn(&[4, 2], 9).with_requires_grad(true);
        let honest = finite_diff_check(
            |p: &Tensor| {
                let p = p.clone().with_requires_grad(true);
                Ok(loss_of(1.0, 0.5, &x, &p))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(honest < 1e-6, "{honest}");
        let corrupted = finite_diff_check(
            |p: &Tensor| {
                let p = p.clone().with_requires_grad(true);
                let (f, mut g) = loss_of(1.0, 0.5, &x, &p);
                g[3] *= 1.1;
                Ok((f, g))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(corrupted > 1e-2, "{corrupted}");
    }

    #[test]
    fn gradients_accumulate_across_fan_out() {
        let w = Tensor::vector(vec![1.5, -2.0]).unwrap().with_requires_grad(true);
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let a = tape.add(v, v).unwrap();
        let b = tape.mul(a, v).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let x = tape.input(&[2], vec![3.0, 4.0], true).unwrap();
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }
}
