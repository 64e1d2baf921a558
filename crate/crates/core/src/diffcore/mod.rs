//! Minimal reverse-mode differentiable tensor core.
//!
//! Supplies exactly the operations the recommender needs: dense matrix
//! products, elementwise maps, masked softmax, concatenation and slicing,
//! embedding gathers and a fused multi-head attention kernel. Everything is
//! `f64` so finite-difference checks stay sharp.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::identity(2));
        let b = tape.leaf(Tensor::matrix(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[1., 2., 3., 4.]);

        let p = tape.leaf(Tensor::matrix(&[vec![1., 0.], vec![0., 0.]]).unwrap());
        let b = tape.leaf(Tensor::matrix(&[vec![5., 6.], vec![7., 8.]]).unwrap());
        let c = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(c), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let w = random(&[3, 2], 3);
        // Both operands, checked one at a time against a fixed weighting.
        let err_a = grad_check(
            |t, x| {
                let bv = t.leaf(b.clone());
                let wv = t.leaf(w.clone());
                let c = t.matmul(x, bv)?;
                let cw = t.mul(c, wv)?;
                Ok(t.sum(cw))
            },
            &a,
            1e-6,
        )
        .unwrap();
        let err_b = grad_check(
            |t, x| {
                let av = t.leaf(a.clone());
                let wv = t.leaf(w.clone());
                let c = t.matmul(av, x)?;
                let cw = t.mul(c, wv)?;
                Ok(t.sum(cw))
            },
            &b,
            1e-6,
        )
        .unwrap();
        assert!(err_a < 1e-6, "{err_a}");
        assert!(err_b < 1e-6, "{err_b}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0., 0., 0.]));
        let s = tape.softmax(x, None).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.leaf(Tensor::vector(vec![2f64.ln(), 0.]));
        let s = tape.softmax(x, None).unwrap();
        assert!((tape.value(s)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.value(s)[1] - 1.0 / 3.0).abs() < 1e-15);

        let x = tape.leaf(Tensor::vector(vec![5., 1., 9.]));
        let s = tape.softmax(x, Some(&[true, false, true])).unwrap();
        // e^5/(e^5+e^9) = 1/(1+e^4), evaluated without any max-shift.
        let first = 1.0 / (1.0 + 4f64.exp());
        let last = 1.0 / (1.0 + (-4f64).exp());
        assert!((tape.value(s)[0] - first).abs() < 1e-15);
        assert_eq!(tape.value(s)[1], 0.0);
        assert!((tape.value(s)[2] - last).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1., 2.]));
        assert!(matches!(
            tape.softmax(x, Some(&[false, false])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        let t = tape.tanh(z);
        assert_eq!(tape.scalar(s), 0.5);
        assert_eq!(tape.scalar(t), 0.0);

        let v = tape.leaf(Tensor::vector(vec![1.5, -2.0, 3.25]));
        let w = tape.leaf(Tensor::vector(vec![1.0]));
        let ws = tape.weighted_sum(&[v], w).unwrap();
        assert_eq!(tape.value(ws), tape.value(v));
    }

    #[test]
    fn sigmoid_and_tanh_stay_in_open_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-15., -1., 0., 1., 15.]));
        let s = tape.sigmoid(x);
        assert!(tape.value(s).iter().all(|v| *v > 0.0 && *v < 1.0));
        let t = tape.tanh(x);
        assert!(tape.value(t).iter().all(|v| *v > -1.0 && *v < 1.0));
    }

    #[test]
    fn embedding_lookup_scatters_to_looked_up_rows_only() {
        let table = random(&[5, 3], 4).with_grad();
        let mut tape = Tape::new();
        let tv = tape.param(&table);
        let rows = tape.embedding_lookup(tv, &[3, 1, 3]).unwrap();
        let loss = tape.sum(rows);
        let g = tape.backward(loss).unwrap().get_or_zeros(tv, 15);
        assert_eq!(&g[0..3], &[0., 0., 0.]);
        assert_eq!(&g[3..6], &[1., 1., 1.]);
        assert_eq!(&g[6..9], &[0., 0., 0.]);
        assert_eq!(&g[9..12], &[2., 2., 2.]);
        assert_eq!(&g[12..15], &[0., 0., 0.]);

        assert!(matches!(
            tape.embedding_lookup(tv, &[5]),
            Err(Error::OutOfVocabulary { index: 5, size: 5 })
        ));
    }

    #[test]
    fn backward_examples() {
        let x = random(&[2, 3], 5).with_grad();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let loss = tape.sum(xv);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        let loss = tape.dot(xv, xv).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(xv).unwrap(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::vector(vec![1., 2.]).with_grad());
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_tensor_gets_zero_grad() {
        let mut used = Tensor::vector(vec![1., 2.]).with_grad();
        let mut unused = Tensor::vector(vec![3., 4.]).with_grad();
        let mut tape = Tape::new();
        let u = tape.param(&used);
        let n = tape.param(&unused);
        let loss = tape.sum(u);
        let g = tape.backward(loss).unwrap();
        drop(tape);
        g.write_to(u, &mut used).unwrap();
        g.write_to(n, &mut unused).unwrap();
        assert_eq!(used.grad().unwrap(), &[1., 1.]);
        assert_eq!(unused.grad().unwrap(), &[0., 0.]);
    }

    #[test]
    fn two_branches_accumulate() {
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]).with_grad();
        let grad_of = |branches: &[bool; 2]| {
            let mut tape = Tape::new();
            let xv = tape.param(&x);
            let mut terms = Vec::new();
            if branches[0] {
                let t = tape.tanh(xv);
                terms.push(tape.sum(t));
            }
            if branches[1] {
                let s = tape.sigmoid(xv);
                let p = tape.mul(s, xv).unwrap();
                terms.push(tape.sum(p));
            }
            let loss = if terms.len() == 2 {
                tape.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            tape.backward(loss).unwrap().get_or_zeros(xv, 3)
        };
        let both = grad_of(&[true, true]);
        let a = grad_of(&[true, false]);
        let b = grad_of(&[false, true]);
        for i in 0..3 {
            assert!((both[i] - (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_examples() {
        let x = random(&[7], 6);
        let err = grad_check(|t, v| t.dot(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");

        let x = Tensor::vector(vec![1., 2., 3.]);
        let err = grad_check(
            |t, v| {
                let s = t.softmax(v, None)?;
                t.select(s, 0)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        assert!(matches!(
            grad_check(|t, v| Ok(t.sum(v)), &x, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn every_op_passes_grad_check() {
        let m = random(&[3, 4], 10);
        let v = random(&[4], 11);
        let step = 1e-6;
        type Case = Box<dyn for<'t> Fn(&mut Tape<'t>, Var) -> crate::Result<Var>>;
        // Fixed non-uniform weighting so every output element matters.
        fn weigh(t: &mut Tape<'_>, y: Var) -> crate::Result<Var> {
            let n = t.value(y).len();
            let wv = t.leaf(Tensor::vector((0..n).map(|i| ((i + 1) as f64).sin()).collect()));
            let flat = t.reshape(y, vec![n])?;
            t.dot(flat, wv)
        }
        let cases: Vec<(&str, Tensor, Case)> = vec![
            ("sigmoid", m.clone(), Box::new(move |t, x| { let y = t.sigmoid(x); weigh(t, y) })),
            ("tanh", m.clone(), Box::new(move |t, x| { let y = t.tanh(x); weigh(t, y) })),
            ("one_minus*mul", m.clone(), Box::new(move |t, x| { let y = t.one_minus(x); let z = t.mul(y, x)?; weigh(t, z) })),
            ("scale+sub", m.clone(), Box::new(move |t, x| { let y = t.scale(x, 2.5); let z = t.sub(y, x)?; let z = t.mul(z, x)?; weigh(t, z) })),
            ("add_bias", m.clone(), Box::new(move |t, x| { let b = t.row(x, 1)?; let y = t.add_bias(x, b)?; let y = t.tanh(y); weigh(t, y) })),
            ("softmax masked", v.clone(), Box::new(move |t, x| { let y = t.softmax(x, Some(&[true, false, true, true]))?; weigh(t, y) })),
            ("concat axis1", m.clone(), Box::new(move |t, x| { let a = t.slice_cols(x, 0, 1)?; let y = t.concat(&[x, a], 1)?; let y = t.tanh(y); let y = t.slice_cols(y, 1, 4)?; weigh(t, y) })),
            ("stack rows", m.clone(), Box::new(move |t, x| { let r0 = t.row(x, 0)?; let r2 = t.row(x, 2)?; let s = t.stack(&[r2, r0, r2])?; let s = t.sigmoid(s); weigh(t, s) })),
            ("weighted_sum", m.clone(), Box::new(move |t, x| { let r0 = t.row(x, 0)?; let r1 = t.row(x, 1)?; let ws = t.slice_cols(r0, 0, 2)?; let ws = t.softmax(ws, None)?; let y = t.weighted_sum(&[r0, r1], ws)?; weigh(t, y) })),
            ("log_sum_exp", v.clone(), Box::new(move |t, x| t.log_sum_exp(x))),
            ("matmul self", m.clone(), Box::new(move |t, x| { let r = t.reshape(x, vec![4, 3])?; let y = t.matmul(x, r)?; let y = t.tanh(y); weigh(t, y) })),
        ];
        for (name, x, f) in cases {
            let err = grad_check(|t, v| f(t, v), &x, step).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn attention_gradient_and_row_sums() {
        let qkv = random(&[4, 6], 20);
        let w = random(&[4, 6], 21);
        let mask = [true, true, false, true];
        let err = grad_check(
            |t, x| {
                let q = t.tanh(x);
                let k = t.sigmoid(x);
                let y = t.multi_head_attention(q, k, x, &mask, 3)?;
                let wv = t.leaf(w.clone());
                let y = t.mul(y, wv)?;
                Ok(t.sum(y))
            },
            &qkv,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let mut tape = Tape::new();
        let x = tape.leaf(qkv.clone());
        let y = tape.multi_head_attention(x, x, x, &mask, 3).unwrap();
        let (heads, probs) = tape.attention_weights(y).unwrap();
        for h in 0..heads {
            for i in 0..4 {
                let row = &probs[(h * 4 + i) * 4..(h * 4 + i + 1) * 4];
                let s: f64 = row.iter().sum();
                if mask[i] {
                    assert!((s - 1.0).abs() < 1e-12);
                    assert_eq!(row[2], 0.0);
                } else {
                    assert_eq!(s, 0.0);
                }
            }
        }
        assert!(tape.value(y)[12..18].iter().all(|v| *v == 0.0));
    }

    proptest! {
        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(xs.clone()));
            let s = tape.softmax(x, None).unwrap();
            let shifted = tape.leaf(Tensor::vector(xs.iter().map(|v| v + c).collect()));
            let s2 = tape.softmax(shifted, None).unwrap();
            let p = tape.value(s);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(tape.value(s2)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
