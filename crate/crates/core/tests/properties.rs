use proptest::prelude::*;

use ebst::datagen::{gen_gaussian_shift, gen_two_moons, load_csv, write_csv, Domain, DomainDataset};
use ebst::energy::{annealed_target_loss, ebm_loss, energy};
use ebst::metrics::{marginal_kl, per_class_accuracy};
use ebst::nn::{argmax, logsumexp, softmax};
use ebst::pseudolabel::{
    compute_lambdas, hard_pseudo_label, smooth_label, soft_pseudo_label, step1_sample_objective, LambdaVector,
    PseudoLabel,
};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..8)
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn prob_and_lambda() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|k| (simplex(k), prop::collection::vec(0.01f64..=1.0, k)))
}

proptest! {
    #[test]
    fn softmax_is_on_the_simplex_and_shift_invariant(z in logits(), c in -100.0f64..100.0) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&shifted).iter().zip(p.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(p.argmax(), argmax(&z));
    }

    #[test]
    fn energy_is_bounded_by_the_largest_logit(z in logits()) {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = energy(&z).0;
        prop_assert!(e <= -max + 1e-12);
        prop_assert!(e >= -max - (z.len() as f64).ln() - 1e-12);
        prop_assert!((logsumexp(&z) + e).abs() < 1e-12);
    }

    #[test]
    fn lambdas_lie_in_unit_interval(probs in (2usize..5).prop_flat_map(|k| prop::collection::vec(simplex(k), 1..30)),
                                    portion in 0.01f64..=1.0) {
        let l = compute_lambdas(&probs, portion).unwrap();
        prop_assert_eq!(l.len(), probs[0].len());
        prop_assert!(l.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn hard_labels_are_feasible_and_never_worse_than_skipping((prob, lam) in prob_and_lambda()) {
        let lambdas = LambdaVector::new(lam).unwrap();
        let label = hard_pseudo_label(&prob, &lambdas);
        prop_assert!(label.is_feasible());
        prop_assert!(step1_sample_objective(&label.vector, &prob, &lambdas) <= 0.0);
        if label.selected {
            let k = argmax(&label.vector);
            prop_assert!(prob[k] > lambdas.values()[k]);
        }
        let soft = soft_pseudo_label(&prob, &lambdas);
        prop_assert_eq!(soft.selected, label.selected);
        prop_assert!(soft.is_feasible());
    }

    #[test]
    fn smoothing_keeps_unit_mass(k in 2usize..8, winner in 0usize..8, eps in 0.0f64..0.99) {
        let winner = winner % k;
        let s = smooth_label(&PseudoLabel::one_hot(winner, k), eps, k).unwrap();
        prop_assert!((s.vector.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((s.vector[winner] - (1.0 - eps)).abs() < 1e-15);
        if 1.0 - eps > eps / (k - 1) as f64 {
            prop_assert_eq!(argmax(&s.vector), winner);
        }
    }

    #[test]
    fn ebm_loss_with_one_hot_label_is_negated_logit(z in prop::collection::vec(-20.0f64..20.0, 2..6),
                                                    pick in 0usize..6, lam in 0.01f64..=1.0) {
        let k = pick % z.len();
        let lambdas = LambdaVector::new(vec![lam; z.len()]).unwrap();
        let v = ebm_loss(&z, &PseudoLabel::one_hot(k, z.len()).vector, &lambdas).unwrap();
        prop_assert!((v - (-z[k] + lam.ln())).abs() < 1e-12);
    }

    #[test]
    fn anneal_blend_stays_between_its_parts(l in -50.0f64..50.0, r in -50.0f64..50.0, beta in 0.0f64..10.0) {
        let v = annealed_target_loss(l, r, beta);
        prop_assert!(v >= l.min(r) - 1e-12 && v <= l.max(r) + 1e-12);
        prop_assert_eq!(annealed_target_loss(l, r, 0.0), l);
    }

    #[test]
    fn marginal_kl_is_nonnegative_and_zero_on_equal(q in (2usize..6).prop_flat_map(simplex),
                                                    p in (2usize..6).prop_flat_map(simplex)) {
        prop_assert_eq!(marginal_kl(&q, &q), 0.0);
        if p.len() == q.len() {
            prop_assert!(marginal_kl(&p, &q) >= 0.0);
        }
    }

    #[test]
    fn mean_accuracy_ignores_class_renaming(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let perm = [2usize, 0, 1];
        let pred2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let truth2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let (_, a) = per_class_accuracy(&pred, &truth, 3).unwrap();
        let (_, b) = per_class_accuracy(&pred2, &truth2, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>(), half in 1usize..20) {
        let a = gen_two_moons(2 * half, 0.1, seed).unwrap();
        let b = gen_two_moons(2 * half, 0.1, seed).unwrap();
        prop_assert_eq!(a.features(), b.features());
        prop_assert_eq!(a.fingerprint(), b.fingerprint());
        let (s1, t1) = gen_gaussian_shift(3 * half, 3, &[1.0, 1.0], seed).unwrap();
        let (s2, t2) = gen_gaussian_shift(3 * half, 3, &[1.0, 1.0], seed).unwrap();
        prop_assert_eq!(s1.features(), s2.features());
        prop_assert_eq!(t1.fingerprint(), t2.fingerprint());
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec((prop::collection::vec(-1e3f64..1e3, 3), prop::option::of(0usize..4)), 0..20)) {
        let (features, labels): (Vec<Vec<f64>>, Vec<Option<usize>>) = rows.into_iter().unzip();
        let ds = DomainDataset::new(features, labels, Domain::Source, 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, 4).unwrap();
        prop_assert_eq!(back.features(), ds.features());
        prop_assert_eq!(back.labels(), ds.labels());
    }
}

#[test]
fn kl_minimum_over_a_grid_is_at_the_truth() {
    let q = [0.2, 0.3, 0.5];
    let mut best = (f64::INFINITY, [0.0; 3]);
    let steps = 100;
    for i in 1..steps {
        for j in 1..steps - i {
            let p = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let v = marginal_kl(&p, &q);
            assert!(v >= 0.0);
            if v < best.0 {
                best = (v, p);
            }
        }
    }
    assert!(best.0 < 1e-12, "{best:?}");
    for (a, b) in best.1.iter().zip(q) {
        assert!((a - b).abs() < 1e-12);
    }
}
