use flowfix_core::rng::rng_for;
use flowfix_core::tensor::grad_check;
use flowfix_core::{Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn projected(t: &mut Tape, y: Var, seed: u64) -> flowfix_core::Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng_for(seed, &[1]));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn randn(shape: &[usize], seed: u64, tag: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng_for(seed, &[tag]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn unary_and_reduction_grads(seed in any::<u64>(), n in 1usize..5, m in 1usize..5, op in 0usize..8) {
        let x = randn(&[n, m], seed, 2);
        let r = grad_check(
            |t, x| {
                let y = match op {
                    0 => t.gelu(x),
                    1 => t.silu(x),
                    2 => t.tanh(x),
                    3 => t.softmax(x, 1)?,
                    4 => t.softmax(x, 0)?,
                    5 => t.layernorm(x, None, None, 1e-6)?,
                    6 => t.mul(x, x)?,
                    _ => {
                        let y = t.transpose(x)?;
                        t.scale(y, 0.3)
                    }
                };
                projected(t, y, seed)
            },
            &x,
            H,
            TOL,
        )
        .unwrap();
        prop_assert!(r.passed(), "op {op}: {r}");
    }

    #[test]
    fn binary_and_structural_grads(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, m in 1usize..5, op in 0usize..7) {
        let x = randn(&[n, k], seed, 3);
        let other_kn = randn(&[m, k], seed, 4);
        let bias = randn(&[k], seed, 5);
        let r = grad_check(
            |t, x| {
                let y = match op {
                    0 => {
                        let w = t.constant(other_kn.clone());
                        t.matmul_nt(x, w)?
                    }
                    1 => {
                        let w = t.constant(other_kn.clone());
                        let wt = t.transpose(w)?;
                        t.matmul(x, wt)?
                    }
                    2 => {
                        let b = t.constant(bias.clone());
                        t.add(x, b)?
                    }
                    3 => {
                        let g = t.constant(bias.clone());
                        t.layernorm(x, Some(g), Some(g), 1e-6)?
                    }
                    4 => {
                        let sq = t.mul(x, x)?;
                        let both = t.concat_cols(&[x, sq])?;
                        t.slice_cols(both, k / 2, k)?
                    }
                    5 => {
                        let both = t.concat_rows(&[x, x])?;
                        let ids: Vec<usize> = (0..3).map(|i| (i * 7 + seed as usize) % (2 * n)).collect();
                        t.gather_rows(both, &ids)?
                    }
                    _ => {
                        let flat = t.reshape(x, &[n * k])?;
                        let y = t.mul(flat, flat)?;
                        t.reshape(y, &[k, n])?
                    }
                };
                projected(t, y, seed)
            },
            &x,
            H,
            TOL,
        )
        .unwrap();
        prop_assert!(r.passed(), "op {op}: {r}");
    }

    #[test]
    fn matmul_associative_with_identity(seed in any::<u64>()) {
        let a = randn(&[4, 4], seed, 6);
        let b = randn(&[4, 4], seed, 7);
        let c = randn(&[4, 4], seed, 8);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        prop_assert!(a.matmul(&eye).unwrap().max_abs_diff(&a) < 1e-10);
        prop_assert!(eye.matmul(&a).unwrap().max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(seed in any::<u64>(), n in 1usize..6, m in 1usize..8, shift in -50.0f64..50.0) {
        let x = randn(&[n, m], seed, 9).map(|v| 5.0 * v);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = t.softmax(xv, 1).unwrap();
        let shifted = t.constant(x.map(|v| v + shift));
        let ys = t.softmax(shifted, 1).unwrap();
        let (y, ys) = (t.value(y).clone(), t.value(ys).clone());
        for r in 0..n {
            let s: f64 = y.data()[r * m..(r + 1) * m].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
        prop_assert!(y.max_abs_diff(&ys) < 1e-10);
    }

    #[test]
    fn fan_out_sums_path_gradients(seed in any::<u64>()) {
        let x = randn(&[3, 2], seed, 10);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), true);
        let a = t.tanh(xv);
        let b = t.scale(xv, 3.0);
        let s = t.add(a, b).unwrap();
        let loss = t.sum(s);
        t.backward(loss).unwrap();
        let g = t.grad(xv).unwrap();
        let expect = x.map(|v| 1.0 - v.tanh().powi(2) + 3.0);
        prop_assert!(g.max_abs_diff(&expect) < 1e-12);
    }
}
