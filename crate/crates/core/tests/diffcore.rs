use ganpo::diffcore::{grad_check_many, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_nalgebra(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed + 1);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let want = DMatrix::from_row_slice(m, k, a.data()) * DMatrix::from_row_slice(k, n, b.data());
        for i in 0..m {
            for j in 0..n {
                prop_assert!((tape.value(c).data()[i * n + j] - want[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn composite_expression_gradients_match_differences(b in 1usize..3, t in 1usize..4, d in 3usize..6, seed in 0u64..1000) {
        let x = randn(&[b, t, d], seed);
        let w = randn(&[d, d], seed + 1);
        let g = randn(&[d], seed + 2);
        let r = grad_check_many(
            |tape, v| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.layer_norm(h, 1e-5)?;
                let h = tape.mul(h, v[2])?;
                let h = tape.gelu(h);
                let s = tape.log_softmax(h)?;
                let e = tape.exp(s);
                let y = tape.mul(e, h)?;
                Ok(tape.sum(y))
            },
            &[x, w, g],
            1e-6,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn masked_mean_ignores_masked_entries(b in 1usize..4, t in 2usize..6, d in 1usize..4, seed in 0u64..1000, junk in -1e3f64..1e3) {
        let x = randn(&[b, t, d], seed);
        let mut mask = vec![1.0; b * t];
        for r in 0..b {
            mask[r * t + t - 1] = 0.0;
        }
        let mask = Tensor::new(&[b, t], mask).unwrap();
        let mut y = x.clone();
        for r in 0..b {
            for k in 0..d {
                y.data_mut()[(r * t + t - 1) * d + k] = junk;
            }
        }
        let mean = |h: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(h.clone());
            let m = tape.masked_mean(v, &mask, 1).unwrap();
            tape.value(m).clone()
        };
        let (a, c) = (mean(&x), mean(&y));
        prop_assert!(a.max_abs_diff(&c) == 0.0);
        for r in 0..b {
            for k in 0..d {
                let want: f64 = (0..t - 1).map(|i| x.data()[(r * t + i) * d + k]).sum::<f64>() / (t - 1) as f64;
                prop_assert!((a.data()[r * d + k] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn broadcast_add_sums_gradient_over_the_repeated_axis() {
    let mut tape = Tape::new();
    let a = tape.param(randn(&[3, 4], 5));
    let bias = tape.param(randn(&[4], 6));
    let y = tape.add(a, bias).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(bias).unwrap().data().iter().all(|&g| g == 3.0));
    assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    assert!(tape.matmul(a, b).is_err());
    assert!(tape.add(a, b).is_err());
}
