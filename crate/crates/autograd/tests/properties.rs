use m2clip_autograd::{
    cosine_similarity, multi_head_attention, AttentionWeights, Tape, Tensor, TensorError,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-5.0f64..5.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in tensor(vec![4, 7])) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax(v).unwrap();
        for row in tape.value(s).chunks(7) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_shift_invariant(x in tensor(vec![3, 5]), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let shifted = Tensor::new([3, 5], x.data().iter().map(|v| v + c).collect()).unwrap();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for (p, q) in tape.value(sa).iter().zip(tape.value(sb)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in tensor(vec![3, 8])) {
        let rows_vary = x.data().chunks(8).all(|r| r.iter().any(|&v| (v - r[0]).abs() > 1e-3));
        prop_assume!(rows_vary);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::full([8], 1.0));
        let b = tape.constant(Tensor::zeros([8]));
        // A negligible eps isolates the normalization from the regularizer.
        let y = tape.layer_norm(v, g, b, 1e-12).unwrap();
        for row in tape.value(y).chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn matmul_is_associative(a in tensor(vec![3, 4]), b in tensor(vec![4, 2]), c in tensor(vec![2, 5])) {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let ab = tape.matmul(a, b).unwrap();
        let left = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let right = tape.matmul(a, bc).unwrap();
        let scale = tape.value(left).iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (x, y) in tape.value(left).iter().zip(tape.value(right)) {
            prop_assert!((x - y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn cosine_bounds_and_self_similarity(u in tensor(vec![6]), v in tensor(vec![6])) {
        prop_assume!(u.data().iter().any(|x| x.abs() > 1e-3));
        let neg = Tensor::new([6], u.data().iter().map(|x| -x).collect()).unwrap();
        let mut tape = Tape::new();
        let (uu, vv, nn) = (tape.constant(u), tape.constant(v), tape.constant(neg));
        let same = cosine_similarity(&mut tape, uu, uu).unwrap();
        let opp = cosine_similarity(&mut tape, uu, nn).unwrap();
        let any = cosine_similarity(&mut tape, uu, vv).unwrap();
        prop_assert!((tape.scalar(same) - 1.0).abs() < 1e-12);
        prop_assert!((tape.scalar(opp) + 1.0).abs() < 1e-12);
        prop_assert!(tape.scalar(any).abs() <= 1.0 + 1e-12);
    }
}

#[test]
fn orthogonal_cosine_is_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    let c = cosine_similarity(&mut tape, a, b).unwrap();
    assert_eq!(tape.scalar(c), 0.0);
}

#[test]
fn zero_vector_cosine_is_finite() {
    let mut tape = Tape::new();
    let a = tape.variable(Tensor::zeros([3]));
    let b = tape.constant(Tensor::full([3], 1.0));
    let c = cosine_similarity(&mut tape, a, b).unwrap();
    assert_eq!(tape.scalar(c), 0.0);
    let g = tape.backward(c).unwrap();
    assert!(g.wrt(a).unwrap().iter().all(|v| v.is_finite()));
}

fn random_weights(tape: &mut Tape<'_>, d: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let mut w = || tape.constant(Tensor::randn([d, d], 0.5, rng));
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || tape.constant(Tensor::randn([d], 0.5, rng));
    let (bq, bk, bv, bo) = (b(), b(), b(), b());
    AttentionWeights {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

#[test]
fn attention_single_key_is_projected_value() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let w = random_weights(&mut tape, d, &mut rng);
    let q = tape.constant(Tensor::randn([3, d], 1.0, &mut rng));
    let kv = tape.constant(Tensor::randn([1, d], 1.0, &mut rng));
    let out = multi_head_attention(&mut tape, q, kv, &w, 2, false).unwrap();
    let v = tape.linear(kv, w.wv, Some(w.bv)).unwrap();
    let want = tape.linear(v, w.wo, Some(w.bo)).unwrap();
    let want = tape.value(want).to_vec();
    for row in tape.value(out).chunks(d) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_zero_query_key_is_uniform_mean() {
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let mut w = random_weights(&mut tape, d, &mut rng);
    w.wq = tape.constant(Tensor::zeros([d, d]));
    w.wk = tape.constant(Tensor::zeros([d, d]));
    let q = tape.constant(Tensor::randn([2, d], 1.0, &mut rng));
    let kv = tape.constant(Tensor::randn([5, d], 1.0, &mut rng));
    let out = multi_head_attention(&mut tape, q, kv, &w, 2, false).unwrap();
    let mean = tape.mean_axis(kv, 0).unwrap();
    let mean = tape.reshape(mean, [1, d]).unwrap();
    let v = tape.linear(mean, w.wv, Some(w.bv)).unwrap();
    let want = tape.linear(v, w.wo, Some(w.bo)).unwrap();
    let want = tape.value(want).to_vec();
    for row in tape.value(out).chunks(d) {
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let w = random_weights(&mut tape, 6, &mut rng);
    let x = tape.constant(Tensor::zeros([2, 6]));
    let err = multi_head_attention(&mut tape, x, x, &w, 4, false).unwrap_err();
    assert!(matches!(err, TensorError::Config { .. }));
}

#[test]
fn causal_attention_ignores_future_tokens() {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let w = random_weights(&mut tape, d, &mut rng);
    let base = Tensor::randn([5, d], 1.0, &mut rng);
    let mut changed = base.clone();
    changed.data_mut()[3 * d..].iter_mut().for_each(|v| *v += 1.0);
    let a = tape.constant(base);
    let b = tape.constant(changed);
    let oa = multi_head_attention(&mut tape, a, a, &w, 4, true).unwrap();
    let ob = multi_head_attention(&mut tape, b, b, &w, 4, true).unwrap();
    assert_eq!(tape.value(oa)[..3 * d], tape.value(ob)[..3 * d]);
    assert_ne!(tape.value(oa)[3 * d..], tape.value(ob)[3 * d..]);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let w = random_weights(&mut tape, 8, &mut rng);
        let x = tape.variable(Tensor::randn([2, 4, 8], 1.0, &mut rng));
        let y = multi_head_attention(&mut tape, x, x, &w, 2, true).unwrap();
        let y = tape.gelu(y);
        let loss = tape.mean(y);
        let g = tape.backward(loss).unwrap();
        (tape.tensor(y), g.wrt(x).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
