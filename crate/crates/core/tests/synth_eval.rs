use massdpo::eval::{jaccard, ranking_metrics, relative_logit_error};
use massdpo::nalgebra::DVector;
use massdpo::rng::Xoshiro256StarStar;
use massdpo::synth::{gen_dataset, pick_preferred, PreferredRule, SynthConfig};
use massdpo::{prepare_pool, PreparedPool};
use proptest::prelude::*;

#[test]
fn pl_sampling_frequency() {
    let mut rng = Xoshiro256StarStar::seed_from_u64(2024);
    let draws = 100_000;
    let rewards = [2f64.ln(), 0.0];
    let hits = (0..draws)
        .filter(|_| pick_preferred(PreferredRule::PlSample, &rewards, &mut rng) == 0)
        .count();
    let p = 2.0 / 3.0;
    let se = (p * (1.0 - p) / draws as f64).sqrt();
    assert!((hits as f64 / draws as f64 - p).abs() <= 3.0 * se);
}

#[test]
fn pools_from_distinct_streams_differ() {
    let cfg = SynthConfig {
        dim: 4,
        pools: 40,
        candidates_per_pool: 10,
        clusters: 3,
        ..Default::default()
    };
    let pools = gen_dataset(&cfg).unwrap();
    for i in 0..pools.len() {
        for j in i + 1..pools.len() {
            assert_ne!(pools[i].candidates, pools[j].candidates);
        }
    }
}

#[test]
fn features_and_offsets_within_caps() {
    let cfg = SynthConfig {
        dim: 5,
        pools: 10,
        candidates_per_pool: 30,
        clusters: 4,
        cluster_noise: 3.0,
        feature_scale: 0.5,
        ..Default::default()
    };
    let cap = 10.0 * cfg.feature_scale;
    for raw in gen_dataset(&cfg).unwrap() {
        let p = prepare_pool(&raw, &DVector::zeros(5), 0.1).unwrap();
        let phi_cap = 2.0 * cap * (5f64).sqrt();
        assert!(p.phi.iter().all(|f| f.norm() <= phi_cap));
        assert!(p.b.iter().all(|b| b.is_finite()));
    }
}

fn arb_pool() -> impl Strategy<Value = (PreparedPool, DVector<f64>)> {
    (1usize..5, 1usize..50, any::<u64>()).prop_map(|(d, n, seed)| {
        let cfg = SynthConfig {
            dim: d,
            candidates_per_pool: n + 1,
            clusters: 1 + n / 3,
            seed,
            ..Default::default()
        };
        let raw = massdpo::synth::gen_pool(&cfg, 0).unwrap();
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let theta = DVector::from_fn(d, |_, _| rng.next_gaussian());
        (prepare_pool(&raw, &DVector::zeros(d), 0.1).unwrap(), theta)
    })
}

proptest! {
    #[test]
    fn logit_error_matches_pairwise((pool, delta) in arb_pool()) {
        let zero = DVector::zeros(pool.dim());
        let fast = relative_logit_error(&delta, &zero, &pool).unwrap();
        let mut slow: f64 = 0.0;
        for a in &pool.phi {
            for b in &pool.phi {
                slow = slow.max(((a - b).dot(&delta)).abs());
            }
        }
        prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
    }

    #[test]
    fn ranking_metrics_are_bounded((pool, theta) in arb_pool()) {
        let ks: Vec<usize> = (1..=pool.n_candidates() + 1).collect();
        let m = ranking_metrics(&theta, &pool, &ks, 0.1).unwrap();
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        for w in m.ndcg.windows(2) {
            prop_assert!(w[1].1 >= w[0].1);
        }
        prop_assert!(m.recall.iter().chain(&m.ndcg).all(|(_, v)| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in proptest::collection::vec(0usize..20, 0..10), b in proptest::collection::vec(0usize..20, 0..10)) {
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }
}
