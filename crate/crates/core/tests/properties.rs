use fedwake::data::{partition_stats, synthesize_federation, FederationSpec};
use fedwake::eval::{false_alarms_per_hour, operating_point, EvalTargets, ScoredExample};
use fedwake::local::LocalTrainingConfig;
use fedwake::model::{ModelSpec, Params};
use fedwake::server::{
    pseudo_gradient, run_round, select_clients, selection_count, AveragingStrategy, RoundConfig, BYTES_PER_PARAM,
};
use fedwake::{ClientUpdate, Federation, ServerState};
use proptest::prelude::*;

fn updates_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<ClientUpdate>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(d, k)| {
        (
            prop::collection::vec(-5.0..5.0f64, d),
            prop::collection::vec((prop::collection::vec(-5.0..5.0f64, d), 1usize..200), k),
        )
            .prop_map(|(w, clients)| {
                let updates = clients
                    .into_iter()
                    .enumerate()
                    .map(|(i, (weights, n))| ClientUpdate {
                        user_id: (i as u64) * 7 + 3,
                        weights: Params::from_vec(weights),
                        example_count: n,
                        train_loss: 0.0,
                        local_steps: 1,
                    })
                    .collect();
                (w, updates)
            })
    })
}

proptest! {
    #[test]
    fn pseudo_gradient_ignores_arrival_order((w, updates) in updates_strategy(), rot in 0usize..8) {
        let w = Params::from_vec(w);
        let mut shuffled = updates.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        let a = pseudo_gradient(&w, &updates).unwrap();
        let b = pseudo_gradient(&w, &shuffled).unwrap();
        prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn identical_client_deltas_are_recovered((w, mut updates) in updates_strategy(), delta in prop::collection::vec(-1.0..1.0f64, 6)) {
        let w = Params::from_vec(w);
        for u in &mut updates {
            for j in 0..w.len() {
                u.weights[j] = w[j] - delta[j];
            }
        }
        let g = pseudo_gradient(&w, &updates).unwrap();
        for j in 0..w.len() {
            prop_assert!((g[j] - delta[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn plain_unit_step_is_weighted_average((w, updates) in updates_strategy()) {
        let w = Params::from_vec(w);
        let g = pseudo_gradient(&w, &updates).unwrap();
        let mut state = ServerState::new(w.clone());
        state.apply_plain(&g, 1.0).unwrap();
        let n: usize = updates.iter().map(|u| u.example_count).sum();
        for j in 0..w.len() {
            let avg: f64 = updates.iter().map(|u| u.example_count as f64 / n as f64 * u.weights[j]).sum();
            prop_assert!((state.weights[j] - avg).abs() < 1e-9, "coord {}: {} vs {}", j, state.weights[j], avg);
            let lo = updates.iter().map(|u| u.weights[j]).fold(f64::INFINITY, f64::min);
            let hi = updates.iter().map(|u| u.weights[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(state.weights[j] >= lo - 1e-9 && state.weights[j] <= hi + 1e-9);
        }
    }

    #[test]
    fn adam_moments_stay_bounded(gs in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 1..60)) {
        let strategy = AveragingStrategy::adam(0.01);
        let mut state = ServerState::new(Params::zeros(3));
        let mut max_abs = [0.0f64; 3];
        for g in &gs {
            for (bound, x) in max_abs.iter_mut().zip(g) {
                *bound = bound.max(x.abs());
            }
            state.apply_adam(&Params::from_vec(g.clone()), &strategy).unwrap();
            for ((m, v), bound) in state.m.iter().zip(state.v.iter()).zip(&max_abs) {
                prop_assert!(*v >= 0.0);
                prop_assert!(m.abs() <= bound + 1e-12);
            }
        }
        prop_assert_eq!(state.adam_step, gs.len() as u64);
        prop_assert_eq!(state.round, gs.len() as u64);
    }

    #[test]
    fn selection_is_sorted_unique_subset(k in 1usize..400, c in 0.001..=1.0f64, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..k as u64).map(|i| i * 3 + 1).collect();
        let chosen = select_clients(&ids, c, seed).unwrap();
        prop_assert_eq!(chosen.len(), selection_count(k, c));
        prop_assert!(chosen.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(chosen.iter().all(|id| ids.binary_search(id).is_ok()));
    }

    #[test]
    fn fah_scales_inversely_with_negative_duration(count in 0usize..1000, seconds in 1.0..1e6f64, factor in 1.0..100.0f64) {
        let base = false_alarms_per_hour(count, seconds);
        let stretched = false_alarms_per_hour(count, seconds * factor);
        prop_assert!((stretched * factor - base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn operating_point_recall_grows_with_budget(
        scores in prop::collection::vec((0.0..1.0f64, any::<bool>(), 0.5..4.0f64), 2..200),
        b1 in 0.0..2000.0f64,
        b2 in 0.0..2000.0f64,
    ) {
        let mut scored: Vec<ScoredExample<f64>> = scores
            .iter()
            .map(|&(s, pos, d)| ScoredExample { score: s, label: usize::from(pos), duration_s: d })
            .collect();
        scored[0].label = 1;
        scored[1].label = 0;
        let (lo, hi) = (b1.min(b2), b1.max(b2));
        let tight = operating_point(&scored, &EvalTargets { fah_budget: lo, recall_target: 0.9 }).unwrap();
        let loose = operating_point(&scored, &EvalTargets { fah_budget: hi, recall_target: 0.9 }).unwrap();
        prop_assert!(loose.recall >= tight.recall);
        prop_assert!(tight.fah <= lo && loose.fah <= hi);
        prop_assert!(tight.recall >= 0.0 && loose.recall <= 1.0);
    }
}

#[test]
fn upload_accounting_counts_every_selected_client() {
    let spec = FederationSpec { user_count: 60, size_mean: 10.0, size_std: 5.0, ..FederationSpec::default() };
    let fed: Federation = synthesize_federation(&spec, 5).unwrap();
    let model = ModelSpec::relu(vec![10, 4, 2]).unwrap();
    let ids = fed.user_ids();
    let cfg = RoundConfig {
        participation: 0.2,
        local: LocalTrainingConfig::fed_sgd(0.1),
        strategy: AveragingStrategy::plain(1.0),
    };
    let mut state = ServerState::new(model.xavier_init(1));
    for t in 1..=7u64 {
        let record = run_round(&mut state, &model, &fed, &ids, &cfg, t).unwrap();
        assert_eq!(record.selected_users.len(), 12);
        assert_eq!(record.upload_bytes, 12 * model.param_count() as u64 * BYTES_PER_PARAM);
    }
    assert_eq!(state.cumulative_uploads, 7 * 12);
    assert_eq!(state.cumulative_upload_bytes, 7 * 12 * model.param_count() as u64 * BYTES_PER_PARAM);
}

#[test]
fn synthesized_federation_matches_crowdsourced_statistics() {
    for seed in 0..3 {
        let spec = FederationSpec { user_count: 1374, ..FederationSpec::default() };
        let fed: Federation = synthesize_federation(&spec, seed).unwrap();
        let s = partition_stats(&fed);
        assert_eq!(s.user_count, 1374);
        assert!((35.0..=43.0).contains(&s.size_mean), "seed {seed}: mean {}", s.size_mean);
        assert!((27.0..=37.0).contains(&s.size_std), "seed {seed}: std {}", s.size_std);
        assert!((0.16..=0.20).contains(&s.positive_rate), "seed {seed}: positive rate {}", s.positive_rate);
    }
}
