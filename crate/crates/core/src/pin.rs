//! Parallel interest network: a multi-head detector splits each clicked news
//! vector into `k` interest slices, one GRU channel per slice folds them over
//! the session, and additive attention fuses the channel states into `s`.

use crate::diffcore::{Tape, Var};
use crate::encoder::{additive_attention, multi_head_self_attention};
use crate::error::{Error, Result};
use crate::model::{Additive, Gru, Pin, SelfAttention};

/// Multi-head self-attention over the session (`T × D`). Head `i` occupies
/// columns `i·D/k .. (i+1)·D/k` of the result.
pub fn detect_interests(tape: &mut Tape<'_>, session: Var, mask: &[bool], p: &SelfAttention<Var>, k: usize) -> Result<Var> {
    let d = tape.shape(session)[1];
    if k == 0 || d % k != 0 {
        return Err(Error::Config(format!("{k} channels do not divide dimension {d}")));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("empty session".into()));
    }
    multi_head_self_attention(tape, session, mask, p, k)
}

/// One GRU update of a channel state.
pub fn gru_step(tape: &mut Tape<'_>, d: Var, x_prev: Var, w: &Gru<Var>) -> Result<Var> {
    let cat = tape.concat(&[d, x_prev], 0)?;
    let g = tape.matmul(cat, w.reset)?;
    let g = tape.sigmoid(g);
    let z = tape.matmul(cat, w.update)?;
    let z = tape.sigmoid(z);
    let gated = tape.mul(x_prev, g)?;
    let cat = tape.concat(&[d, gated], 0)?;
    let cand = tape.matmul(cat, w.candidate)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let keep = tape.mul(keep, x_prev)?;
    let take = tape.mul(z, cand)?;
    tape.add(keep, take)
}

/// Folds every channel over the unmasked steps from a zero state and
/// returns the final states stacked as `k × D`.
pub fn run_channels(tape: &mut Tape<'_>, interests: Var, mask: &[bool], channels: &[Gru<Var>]) -> Result<Var> {
    let (t, d) = (tape.shape(interests)[0], tape.shape(interests)[1]);
    let k = channels.len();
    if k == 0 || d % k != 0 {
        return Err(Error::Config(format!("{k} channels do not divide dimension {d}")));
    }
    if mask.len() != t {
        return Err(Error::dim("run_channels mask", &[t], &[mask.len()]));
    }
    let dk = d / k;
    let mut finals = Vec::with_capacity(k);
    for (i, w) in channels.iter().enumerate() {
        let slice = tape.slice_cols(interests, i * dk, dk)?;
        let mut x = tape.constant(vec![d], vec![0.0; d])?;
        for step in (0..t).filter(|&s| mask[s]) {
            let di = tape.row(slice, step)?;
            x = gru_step(tape, di, x, w)?;
        }
        finals.push(x);
    }
    tape.stack(&finals)
}

/// `s = Σ β_i u_i` with `β` from additive attention over the final states.
pub fn fuse_session(tape: &mut Tape<'_>, finals: Var, p: &Additive<Var>) -> Result<Var> {
    let k = tape.shape(finals)[0];
    additive_attention(tape, finals, &vec![true; k], p)
}

/// Session vector from the clicked news vectors (`T × D`). Fails with
/// [`Error::Degenerate`] when no step is unmasked.
pub fn session_vector(tape: &mut Tape<'_>, session: Var, mask: &[bool], p: &Pin<Var>) -> Result<Var> {
    let interests = detect_interests(tape, session, mask, &p.detector, p.channels.len())?;
    let finals = run_channels(tape, interests, mask, &p.channels)?;
    fuse_session(tape, finals, &p.fusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::model::{tiny_config, ModelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn detector(tape: &mut Tape<'_>, d: usize, seed: u64) -> SelfAttention<Var> {
        SelfAttention {
            query: tape.leaf(random(&[d, d], seed, 1.0)),
            key: tape.leaf(random(&[d, d], seed + 1, 1.0)),
            value: tape.leaf(random(&[d, d], seed + 2, 1.0)),
            output: None,
        }
    }

    fn gru(tape: &mut Tape<'_>, input: usize, d: usize, seed: u64) -> Gru<Var> {
        Gru {
            reset: tape.leaf(random(&[input, d], seed, 0.5)),
            update: tape.leaf(random(&[input, d], seed + 1, 0.5)),
            candidate: tape.leaf(random(&[input, d], seed + 2, 0.5)),
        }
    }

    #[test]
    fn single_step_detector_is_value_projection() {
        let mut tape = Tape::new();
        let n = tape.leaf(random(&[1, 8], 1, 1.0));
        let p = detector(&mut tape, 8, 2);
        let out = detect_interests(&mut tape, n, &[true], &p, 2).unwrap();
        let v = tape.matmul(n, p.value).unwrap();
        assert!(close(tape.value(out), tape.value(v), 1e-14));
    }

    #[test]
    fn identical_steps_give_identical_interests() {
        let mut tape = Tape::new();
        let row = random(&[8], 3, 1.0);
        let r = tape.leaf(row);
        let session = tape.stack(&[r, r]).unwrap();
        let p = detector(&mut tape, 8, 4);
        let out = detect_interests(&mut tape, session, &[true, true], &p, 4).unwrap();
        assert_eq!(&tape.value(out)[..8], &tape.value(out)[8..]);
    }

    #[test]
    fn detector_rows_sum_to_one_per_head() {
        let mut tape = Tape::new();
        let session = tape.leaf(random(&[4, 8], 5, 1.0));
        let p = detector(&mut tape, 8, 6);
        let mask = [true, false, true, true];
        let out = detect_interests(&mut tape, session, &mask, &p, 2).unwrap();
        let (heads, probs) = tape.attention_weights(out).unwrap();
        assert_eq!(heads, 2);
        for h in 0..2 {
            for i in [0, 2, 3] {
                let row = &probs[(h * 4 + i) * 4..(h * 4 + i + 1) * 4];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[1], 0.0);
            }
        }
    }

    #[test]
    fn detector_rejects_bad_input() {
        let mut tape = Tape::new();
        let session = tape.leaf(random(&[2, 8], 5, 1.0));
        let p = detector(&mut tape, 8, 6);
        assert!(matches!(detect_interests(&mut tape, session, &[false, false], &p, 2), Err(Error::Degenerate(_))));
        assert!(matches!(detect_interests(&mut tape, session, &[true, true], &p, 3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_gru_halves_the_state() {
        let mut tape = Tape::new();
        let zero = |t: &mut Tape<'_>| t.leaf(Tensor::zeros(&[12, 8]));
        let w = Gru { reset: zero(&mut tape), update: zero(&mut tape), candidate: zero(&mut tape) };
        let d = tape.leaf(random(&[4], 7, 1.0));
        let p = random(&[8], 8, 1.0);
        let x = tape.leaf(p.clone());
        let u = gru_step(&mut tape, d, x, &w).unwrap();
        let half: Vec<f64> = p.data().iter().map(|v| 0.5 * v).collect();
        assert!(close(tape.value(u), &half, 1e-15));
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::vector(vec![1.0; 4]));
        let x = tape.leaf(Tensor::vector(vec![1.0; 8]));
        let mut w = gru(&mut tape, 12, 8, 9);
        w.update = tape.leaf(Tensor::new(vec![12, 8], vec![10.0; 96]).unwrap());
        let u = gru_step(&mut tape, d, x, &w).unwrap();
        // Candidate recomputed directly with the same reset gate.
        let cat = tape.concat(&[d, x], 0).unwrap();
        let g = tape.matmul(cat, w.reset).unwrap();
        let g = tape.sigmoid(g);
        let xg = tape.mul(x, g).unwrap();
        let cat2 = tape.concat(&[d, xg], 0).unwrap();
        let c = tape.matmul(cat2, w.candidate).unwrap();
        let c = tape.tanh(c);
        assert!(close(tape.value(u), tape.value(c), 1e-6));
    }

    #[test]
    fn gru_shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::new();
        let w = gru(&mut tape, 12, 8, 9);
        let d = tape.leaf(Tensor::zeros(&[3]));
        let x = tape.leaf(Tensor::zeros(&[8]));
        assert!(matches!(gru_step(&mut tape, d, x, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gru_weight_gradients_match_finite_differences() {
        let d = random(&[4], 10, 1.0);
        let x = random(&[8], 11, 1.0);
        let probe = random(&[8], 12, 1.0);
        for which in 0..3 {
            let base = random(&[12, 8], 20 + which, 0.5);
            let err = crate::diffcore::grad_check(
                |t, wv| {
                    let mut w = gru(t, 12, 8, 30);
                    match which {
                        0 => w.reset = wv,
                        1 => w.update = wv,
                        _ => w.candidate = wv,
                    }
                    let dv = t.leaf(d.clone());
                    let xv = t.leaf(x.clone());
                    let u = gru_step(t, dv, xv, &w)?;
                    let pv = t.leaf(probe.clone());
                    t.dot(u, pv)
                },
                &base,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "weight {which}: {err}");
        }
    }

    #[test]
    fn single_step_channel_is_one_update_from_zero() {
        let mut tape = Tape::new();
        let interests = tape.leaf(random(&[1, 8], 13, 1.0));
        let channels = [gru(&mut tape, 12, 8, 40), gru(&mut tape, 12, 8, 50)];
        let finals = run_channels(&mut tape, interests, &[true], &channels).unwrap();
        for (i, w) in channels.iter().enumerate() {
            let di = tape.slice_cols(interests, i * 4, 4).unwrap();
            let di = tape.reshape(di, vec![4]).unwrap();
            let zero = tape.constant(vec![8], vec![0.0; 8]).unwrap();
            let u = gru_step(&mut tape, di, zero, w).unwrap();
            assert!(close(&tape.value(finals)[i * 8..(i + 1) * 8], tape.value(u), 1e-15));
        }
    }

    #[test]
    fn masked_step_equals_deleted_step() {
        let full = random(&[3, 8], 14, 1.0);
        let mut tape = Tape::new();
        let channels = [gru(&mut tape, 12, 8, 60), gru(&mut tape, 12, 8, 70)];
        let a = tape.leaf(full.clone());
        let with_mask = run_channels(&mut tape, a, &[true, false, true], &channels).unwrap();
        let short = Tensor::new(vec![2, 8], [full.row(0), full.row(2)].concat()).unwrap();
        let b = tape.leaf(short);
        let deleted = run_channels(&mut tape, b, &[true, true], &channels).unwrap();
        assert_eq!(tape.value(with_mask), tape.value(deleted));
    }

    #[test]
    fn identical_channels_agree_and_fuse_uniformly() {
        let mut tape = Tape::new();
        let w = gru(&mut tape, 12, 8, 80);
        let step = random(&[4], 15, 1.0);
        let row = [step.data(), step.data()].concat();
        let interests = tape.leaf(Tensor::new(vec![2, 8], [row.clone(), row].concat()).unwrap());
        let finals = run_channels(&mut tape, interests, &[true, true], &[w, w]).unwrap();
        let f = tape.value(finals).to_vec();
        assert_eq!(&f[..8], &f[8..]);
        let fusion = Additive {
            proj: tape.leaf(random(&[8, 4], 16, 1.0)),
            bias: tape.leaf(random(&[4], 17, 1.0)),
            query: tape.leaf(random(&[4], 18, 1.0)),
        };
        let beta = crate::encoder::additive_weights(&mut tape, finals, &[true, true], &fusion).unwrap();
        assert!(close(tape.value(beta), &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn fusion_examples() {
        let mut tape = Tape::new();
        let fusion = Additive {
            proj: tape.leaf(random(&[8, 4], 16, 1.0)),
            bias: tape.leaf(random(&[4], 17, 1.0)),
            query: tape.leaf(random(&[4], 18, 1.0)),
        };
        let one = tape.leaf(random(&[1, 8], 19, 1.0));
        let s = fuse_session(&mut tape, one, &fusion).unwrap();
        assert_eq!(tape.value(s), tape.value(one));

        let v = random(&[8], 20, 1.0);
        let same = tape.leaf(Tensor::new(vec![3, 8], v.data().repeat(3)).unwrap());
        let s = fuse_session(&mut tape, same, &fusion).unwrap();
        assert!(close(tape.value(s), v.data(), 1e-14));

        let finals = random(&[3, 8], 21, 1.0);
        let f = tape.leaf(finals.clone());
        let zero_q = Additive { query: tape.leaf(Tensor::zeros(&[4])), ..fusion };
        let s = fuse_session(&mut tape, f, &zero_q).unwrap();
        let mean: Vec<f64> = (0..8).map(|c| (0..3).map(|r| finals.at(r, c)).sum::<f64>() / 3.0).collect();
        assert!(close(tape.value(s), &mean, 1e-14));
    }

    #[test]
    fn empty_session_is_degenerate() {
        let params = ModelParams::init(&tiny_config(), None, 1).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let session = tape.leaf(random(&[2, 8], 22, 1.0));
        let r = session_vector(&mut tape, session, &[false, false], &vars.pin);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn channel_count_must_divide_dimension() {
        let cfg = crate::model::ModelConfig { channels: 3, ..tiny_config() };
        assert!(matches!(ModelParams::init(&cfg, None, 1), Err(Error::Config(_))));
    }

    #[test]
    fn pin_gradients_match_finite_differences() {
        let params = ModelParams::init(&tiny_config(), None, 2).unwrap();
        let session = random(&[3, 8], 23, 1.0);
        let probe = random(&[8], 24, 1.0);
        let worst = params
            .grad_check("pin.", 1e-6, |tape, vars| {
                let x = tape.leaf(session.clone());
                let s = session_vector(tape, x, &[true, true, true], &vars.pin)?;
                let p = tape.leaf(probe.clone());
                tape.dot(s, p)
            })
            .unwrap();
        assert!(worst < 1e-4, "{worst}");
    }

    proptest! {
        #[test]
        fn session_vector_is_a_convex_combination_of_channel_states(seed in 0u64..300) {
            let params = ModelParams::init(&tiny_config(), None, seed).unwrap();
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let session = tape.leaf(random(&[3, 8], seed + 7, 2.0));
            let mask = [true, seed % 2 == 0, true];
            let interests = detect_interests(&mut tape, session, &mask, &vars.pin.detector, 2).unwrap();
            let finals = run_channels(&mut tape, interests, &mask, &vars.pin.channels).unwrap();
            let beta = crate::encoder::additive_weights(&mut tape, finals, &[true, true], &vars.pin.fusion).unwrap();
            let b = tape.value(beta).to_vec();
            prop_assert!(b.iter().all(|w| *w >= 0.0));
            prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let s = session_vector(&mut tape, session, &mask, &vars.pin).unwrap();
            let f = tape.value(finals).to_vec();
            for c in 0..8 {
                let expected = b[0] * f[c] + b[1] * f[8 + c];
                prop_assert!((tape.value(s)[c] - expected).abs() < 1e-12);
                prop_assert!(tape.value(s)[c].is_finite());
            }
        }
    }
}
