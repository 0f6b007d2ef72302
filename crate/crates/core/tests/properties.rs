use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molvae::chem::dataset::split_indices;
use molvae::chem::TaskType;
use molvae::disentangle::{LatentPair, VariationalHead, LOGVAR_MAX, LOGVAR_MIN};
use molvae::encoders::Modality;
use molvae::fusion::GatedFusion;
use molvae::losses::{gaussian_kl, ortho_loss, task_loss};
use molvae::nn::{Mode, ParamStore, Session};
use molvae::tape::Tape;
use molvae::training::optim::clip_global_norm;
use molvae::training::schedule::NoamSchedule;
use molvae::training::roc_auc;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_rows_lie_on_simplex(seed in any::<u64>(), batch in 1usize..8, scale in 0.1f64..50.0) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = GatedFusion::new(&mut store, &mut rng, 3, 4);
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let shared: Vec<_> = (0..3)
            .map(|_| {
                let z = molvae::nn::normal_matrix(&mut rng, batch, 4) * scale;
                s.tape.constant(z)
            })
            .collect();
        let w = fusion.gate_weights(&mut s, &shared);
        for row in s.tape.value(w).rows() {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logvar_stays_clamped(seed in any::<u64>(), scale in 1.0f64..1e4) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = VariationalHead::new(&mut store, &mut rng, Modality::Graph, 8, 3, 3, 0.0);
        let mut s = Session::new(&store, Mode::TRAIN, ChaCha8Rng::seed_from_u64(seed));
        let x = molvae::nn::normal_matrix(&mut rng, 5, 8) * scale;
        let x = s.tape.constant(x);
        let lp = head.encode(&mut s, x);
        for v in [lp.logvar_shared, lp.logvar_private] {
            prop_assert!(s.tape.value(v).iter().all(|&l| (LOGVAR_MIN..=LOGVAR_MAX).contains(&l)));
        }
    }

    #[test]
    fn split_is_a_partition(n in 3usize..500, seed in any::<u64>(), tr in 0.3f64..0.8, va in 0.05f64..0.15) {
        let ratios = [tr, va, 1.0 - tr - va];
        let Ok(parts) = split_indices(n, ratios, seed) else { return Ok(()) };
        let all: Vec<usize> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.iter().copied().collect::<HashSet<_>>().len(), n);
        prop_assert!(all.iter().all(|&i| i < n));
        prop_assert_eq!(split_indices(n, ratios, seed).unwrap(), parts);
    }

    #[test]
    fn auc_matches_pair_count(pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) * 0.25).collect();
        let mut wins = 0.0;
        let mut total = 0.0;
        for (sp, _) in scores.iter().zip(&labels).filter(|p| *p.1) {
            for (sn, _) in scores.iter().zip(&labels).filter(|p| !*p.1) {
                total += 1.0;
                wins += if sp > sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - wins / total).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(mu in sized_matrix(6, 5, -5.0, 5.0), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logvar = molvae::nn::normal_matrix(&mut rng, mu.nrows(), mu.ncols()) * 3.0;
        let mut t = Tape::new();
        let m = t.constant(mu);
        let l = t.constant(logvar);
        let kl = gaussian_kl(&mut t, m, l);
        prop_assert!(t.scalar(kl) >= 0.0);
    }

    #[test]
    fn ortho_lies_in_unit_interval(
        a in matrix(4, 3, -3.0, 3.0),
        b in matrix(4, 5, -3.0, 3.0),
    ) {
        let mut t = Tape::new();
        let zs = t.constant(a);
        let zp = t.constant(b);
        let lp = LatentPair {
            modality: Modality::Sequence,
            mu_shared: zs,
            logvar_shared: zs,
            z_shared: zs,
            mu_private: zp,
            logvar_private: zp,
            z_private: zp,
        };
        let o = ortho_loss(&mut t, &[lp]);
        let v = t.scalar(o);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn masked_labels_do_not_matter(
        preds in matrix(5, 3, -4.0, 4.0),
        labels in matrix(5, 3, 0.0, 1.0),
        mask_bits in proptest::collection::vec(any::<bool>(), 15),
        junk in proptest::collection::vec(prop_oneof![Just(f64::NAN), Just(f64::INFINITY), -1e6f64..1e6], 15),
        classification in any::<bool>(),
    ) {
        prop_assume!(mask_bits.iter().any(|&b| b));
        let task = if classification { TaskType::Classification } else { TaskType::Regression };
        let labels = labels.mapv(f64::round);
        let mask = Array2::from_shape_fn((5, 3), |(i, j)| if mask_bits[i * 3 + j] { 1.0 } else { 0.0 });
        let mutated = Array2::from_shape_fn((5, 3), |(i, j)| {
            if mask_bits[i * 3 + j] { labels[(i, j)] } else { junk[i * 3 + j] }
        });
        let run = |y: &Array2<f64>| {
            let mut t = Tape::new();
            let p = t.input(preds.clone());
            let loss = task_loss(&mut t, p, y, &mask, task).unwrap();
            let g = t.backward(loss);
            (t.scalar(loss).to_bits(), g.wrt(p).unwrap().mapv(f64::to_bits))
        };
        prop_assert_eq!(run(&labels), run(&mutated));
    }

    #[test]
    fn clipped_norm_is_bounded(
        values in proptest::collection::vec(-100.0f64..100.0, 1..40),
        max_norm in 0.01f64..20.0,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::zeros((1, values.len())));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let c = t.constant(Array2::from_shape_vec((1, values.len()), values.clone()).unwrap());
        let prod = t.mul(w, c);
        let loss = t.sum(prod);
        let mut grads = t.backward(loss);
        let before = clip_global_norm(&mut grads, &[id], max_norm);
        let after = grads.param(id).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(after <= max_norm + 1e-9);
        if before <= max_norm {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn learning_rate_never_drops_below_final(
        init_frac in 0.01f64..1.0,
        final_frac in 0.01f64..1.0,
        warmup in 1usize..50,
        horizon in 1usize..500,
        step in 1usize..2000,
    ) {
        let max = 2e-3;
        let sched = NoamSchedule::new(max * init_frac, max, max * final_frac, warmup, horizon).unwrap();
        let lr = sched.lr(step);
        prop_assert!(lr <= max + 1e-15);
        if step >= warmup {
            prop_assert!(lr >= sched.final_ - 1e-15);
        }
    }
}
