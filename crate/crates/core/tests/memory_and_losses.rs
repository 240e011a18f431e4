mod common;

use omae::features::FeatureRecord;
use omae::losses::{
    loss_comp, loss_ole, loss_rec, loss_triplet, memory_losses, nuclear_norm, total_loss_and_grads, BatchAssignment,
    LossWeights,
};
use omae::nalgebra::DMatrix;
use omae::network::{BatchInput, ModelParams, NetworkSpec};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn closed_form_cases() {
    for (name, result) in common::loss_zero_cases() {
        assert!(result.is_ok(), "{name}: {result:?}");
    }
}

#[test]
fn softmax_properties() {
    common::softmax_trials(300, 21).unwrap();
}

fn random_matrix(rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rec_matches_scalar_formula(seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let v = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (xa, xm, xg) = (v(&mut rng, 5), v(&mut rng, 3), v(&mut rng, 3));
        let (ya, ym, yg) = (v(&mut rng, 5), v(&mut rng, 3), v(&mut rng, 3));
        let f32s = |x: &[f64]| x.iter().map(|&a| a as f32).collect::<Vec<_>>();
        let rec = common::record(&f32s(&xa), &f32s(&xm), &f32s(&xg));
        let xa: Vec<f64> = rec.x_app.iter().map(|&a| a as f64).collect();
        let xmo: Vec<f64> = rec.x_mag.iter().chain(&rec.x_ang).map(|&a| a as f64).collect();
        let ymo: Vec<f64> = ym.iter().chain(&yg).copied().collect();
        let l2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let dot: f64 = xa.iter().zip(&ya).map(|(p, q)| p * q).sum();
        let cos = dot / (l2(&xa, &[0.0; 5]) * l2(&ya, &[0.0; 5]));
        let expected = l2(&xa, &ya) + l2(&xmo, &ymo) + lambda * (1.0 - cos);
        let got = loss_rec(&rec, &common::trace(&ya, &ym, &yg), lambda);
        prop_assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn memory_terms_match_brute_force(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let (b, d, n) = (rng.gen_range(1..7), rng.gen_range(1..5), rng.gen_range(2..6));
        let h = random_matrix(&mut rng, b, d);
        let m = random_matrix(&mut rng, n, d);
        let a = BatchAssignment::from_attention(&h, &m).unwrap();
        let mut comp = 0.0;
        let mut trip = 0.0;
        for j in 0..b {
            let hj: Vec<f64> = h.row(j).iter().copied().collect();
            // top two items by dot product, lowest index first on ties
            let mut order: Vec<usize> = (0..n).collect();
            let score = |i: usize| (0..d).map(|c| m[(i, c)] * hj[c]).sum::<f64>();
            order.sort_by(|&x, &y| score(y).total_cmp(&score(x)).then(x.cmp(&y)));
            let (p, q) = (order[0], order[1]);
            prop_assert_eq!(a.nearest[j], p);
            prop_assert_eq!(a.second[j], Some(q));
            let d2 = |i: usize| (0..d).map(|c| (hj[c] - m[(i, c)]).powi(2)).sum::<f64>();
            comp += d2(p).sqrt();
            trip += (d2(p) - d2(q) + 1.0).max(0.0);
        }
        prop_assert!((loss_comp(&h, &m, &a) - comp).abs() < 1e-9);
        prop_assert!((loss_triplet(&h, &m, &a, 1.0).unwrap() - trip).abs() < 1e-9);
    }

    #[test]
    fn ole_is_row_permutation_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let h = random_matrix(&mut rng, 6, 3);
        let nearest: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let a = BatchAssignment::new(nearest.clone(), vec![None; 6]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let hp = DMatrix::from_fn(6, 3, |i, j| h[(perm[i], j)]);
        let ap = BatchAssignment::new(perm.iter().map(|&i| nearest[i]).collect(), vec![None; 6]);
        let (x, y) = (loss_ole(&h, &a, 1.0).unwrap(), loss_ole(&hp, &ap, 1.0).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn ole_orthogonal_classes() {
    let mut rng = common::rng(5);
    for _ in 0..50 {
        // class 0 lives in span(e0, e1), class 1 in span(e2, e3)
        let mut h = DMatrix::zeros(5, 4);
        for i in 0..3 {
            h[(i, 0)] = rng.gen_range(-1.0..1.0);
            h[(i, 1)] = rng.gen_range(-1.0..1.0);
        }
        for i in 3..5 {
            h[(i, 2)] = rng.gen_range(-1.0..1.0);
            h[(i, 3)] = rng.gen_range(-1.0..1.0);
        }
        let a = BatchAssignment::new(vec![0, 0, 0, 1, 1], vec![None; 5]);
        let n0 = nuclear_norm(&h.rows(0, 3).into_owned()).unwrap();
        let n1 = nuclear_norm(&h.rows(3, 2).into_owned()).unwrap();
        assert!((nuclear_norm(&h).unwrap() - n0 - n1).abs() < 1e-9);
        let expected = (1.0 - n0).max(0.0) + (1.0 - n1).max(0.0);
        let got = loss_ole(&h, &a, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert!(got >= -1e-12);
    }
}

fn small_batch(seed: u64) -> (ModelParams, BatchInput) {
    let spec = NetworkSpec::uniform(6, 4, 5, 4, 7);
    let params = ModelParams::init(&spec, seed).unwrap();
    let mut rng = common::rng(seed + 100);
    let records: Vec<FeatureRecord> = (0..8)
        .map(|_| {
            let v = |rng: &mut rand_chacha::ChaCha8Rng, n| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
            common::record(&v(&mut rng, 6), &v(&mut rng, 4), &v(&mut rng, 4))
        })
        .collect();
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let input = BatchInput::from_records(&spec, &refs).unwrap();
    (params, input)
}

#[test]
fn memory_term_gradients_isolate_and_scale() {
    for seed in 0..10 {
        let (params, input) = small_batch(seed);
        let full = LossWeights::default();
        let rec_only = LossWeights { lambda_comp: 0.0, lambda_tr: 0.0, lambda_ole: 0.0, ..full };
        let double = LossWeights { lambda_comp: 2.0 * full.lambda_comp, lambda_tr: 2.0 * full.lambda_tr, lambda_ole: 2.0 * full.lambda_ole, ..full };
        let (_, g0) = total_loss_and_grads(&params, &input, &rec_only).unwrap();
        let (_, g1) = total_loss_and_grads(&params, &input, &full).unwrap();
        let (_, g2) = total_loss_and_grads(&params, &input, &double).unwrap();

        // with the memory terms off, only the readout pathway reaches the memory
        let fwd = omae::network::forward_batch(&params, &input).unwrap();
        let assign = BatchAssignment::from_forward(&fwd);
        let mem = memory_losses(&fwd.h, &params.memory, &assign, &full).unwrap();
        let direct = &g1.memory - &g0.memory;
        assert!((direct - &mem.d_memory).abs().max() < 1e-10, "seed {seed}");

        for ((_, a), ((_, b), (_, c))) in g0.tensors().iter().zip(g1.tensors().iter().zip(g2.tensors().iter())) {
            for i in 0..a.len() {
                let (d1, d2) = (b[i] - a[i], c[i] - a[i]);
                assert!((d2 - 2.0 * d1).abs() < 1e-9 * (1.0 + d2.abs()), "seed {seed}");
            }
        }
    }
}
