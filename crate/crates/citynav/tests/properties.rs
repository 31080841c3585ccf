//! Property tests: structural invariants that must hold for arbitrary
//! inputs, not just the hand-picked cases in the unit and acceptance suites.

mod common;

use std::collections::BTreeSet;

use citynav::bench::compute_metrics;
use citynav::coop_opt::{
    clipped_surrogate, group_advantages, individual_reward, kl_categorical, RewardRatio,
};
use citynav::mesosim::{generate_background_demand, EpisodeLog, GravityParams, VehicleRecord};
use citynav::netgraph::{k_shortest_paths, shortest_path, NodeId};
use citynav::partition::{build_region_graph, louvain_partition, modularity};
use citynav::rng::derive_rng;
use citynav::Scalar;
use proptest::prelude::*;

proptest! {
    /// Ranked path search: costs are non-decreasing, the head equals the
    /// single-path search, and every returned path is chained and distinct.
    #[test]
    fn ranked_paths_are_sorted_distinct_and_chained(seed in 0u64..5000, k in 1usize..=6) {
        let mut rng = derive_rng(seed, "prop-paths");
        let net = common::random_network(&mut rng);
        let n = net.num_nodes() as u64;
        let src = NodeId(seed % n);
        let dst = NodeId((seed / n + 1) % n);
        prop_assume!(src != dst);
        let weight = |e: &citynav::netgraph::Edge| e.free_flow_time();

        let ranked = k_shortest_paths(&net, src, dst, k, weight);
        prop_assert!(ranked.len() <= k);
        for pair in ranked.windows(2) {
            prop_assert!(pair[0].cost <= pair[1].cost, "costs must be non-decreasing");
        }
        let distinct: BTreeSet<Vec<u64>> = ranked
            .iter()
            .map(|p| p.edges.iter().map(|e| e.0).collect())
            .collect();
        prop_assert_eq!(distinct.len(), ranked.len(), "paths must be pairwise distinct");
        for p in &ranked {
            prop_assert!(p.is_chained(&net));
        }
        match (shortest_path(&net, src, dst, weight), ranked.first()) {
            (Some(best), Some(head)) => prop_assert_eq!(best.cost, head.cost),
            (None, None) => {}
            (best, head) => prop_assert!(
                false,
                "single search found {:?} but ranked search found {:?}",
                best.map(|p| p.cost),
                head.map(|p| p.cost)
            ),
        }
    }

    /// Group-relative advantages sum to zero and ignore constant shifts.
    #[test]
    fn advantages_center_and_shift_invariance(
        rewards in prop::collection::vec(-1e3f64..1e3, 1..16),
        shift in -1e3f64..1e3,
    ) {
        let adv = group_advantages(&rewards, None);
        let sum: Scalar = adv.iter().sum();
        prop_assert!(sum.abs() <= 1e-9 * rewards.len() as Scalar);

        let shifted: Vec<Scalar> = rewards.iter().map(|r| r + shift).collect();
        let adv2 = group_advantages(&shifted, None);
        for (a, b) in adv.iter().zip(&adv2) {
            prop_assert!((a - b).abs() <= 1e-6, "shift must not change advantages");
        }
    }

    /// KL divergence is non-negative and zero exactly on identical inputs.
    #[test]
    fn kl_is_nonnegative_and_zero_on_self(
        raw_p in prop::collection::vec(0.05f64..1.0, 2..6),
        raw_q_extra in prop::collection::vec(0.05f64..1.0, 2..6),
    ) {
        prop_assume!(raw_p.len() == raw_q_extra.len());
        let norm = |v: &[Scalar]| {
            let s: Scalar = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let p = norm(&raw_p);
        let q = norm(&raw_q_extra);
        let kl = kl_categorical(&p, &q).unwrap();
        prop_assert!(kl >= -1e-12, "KL must be non-negative, got {}", kl);
        let self_kl = kl_categorical(&p, &p).unwrap();
        prop_assert!(self_kl.abs() <= 1e-12);
    }

    /// The clipped surrogate never exceeds either branch it minimizes over.
    #[test]
    fn surrogate_is_a_lower_envelope(
        ratio in 0.01f64..5.0,
        advantage in -10f64..10.0,
        epsilon in 0.01f64..0.5,
    ) {
        let s = clipped_surrogate(ratio, advantage, epsilon);
        let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
        prop_assert!(s <= ratio * advantage + 1e-12);
        prop_assert!(s <= clipped + 1e-12);
        prop_assert!(s == ratio.mul_add(advantage, 0.0).min(clipped));
    }

    /// Idling strictly lowers the individual reward; a faster trip never
    /// lowers the literal-ratio reward.
    #[test]
    fn individual_reward_is_monotone(
        tau in 1.0f64..5000.0,
        tau_hat in 1.0f64..5000.0,
        idle in 0u64..100,
        lambda in 0.001f64..1.0,
    ) {
        let base = individual_reward(tau, tau_hat, idle, lambda, RewardRatio::Literal).unwrap();
        let more_idle =
            individual_reward(tau, tau_hat, idle + 1, lambda, RewardRatio::Literal).unwrap();
        prop_assert!(more_idle < base);
        let slower =
            individual_reward(tau + 10.0, tau_hat, idle, lambda, RewardRatio::Literal).unwrap();
        prop_assert!(slower >= base);
        let inv = individual_reward(tau + 10.0, tau_hat, idle, lambda, RewardRatio::Inverted)
            .unwrap();
        let inv_base = individual_reward(tau, tau_hat, idle, lambda, RewardRatio::Inverted)
            .unwrap();
        prop_assert!(inv <= inv_base, "a slower trip must not raise the inverted reward");
    }

    /// Any label assignment yields a partition that covers every node
    /// exactly once, with modularity in [-1, 1] and a region graph whose
    /// boundary lists account for every inter-region edge exactly once.
    #[test]
    fn arbitrary_partitions_are_exact_covers(seed in 0u64..5000) {
        let mut rng = derive_rng(seed, "prop-partition");
        let net = common::random_network(&mut rng);
        let part = louvain_partition(&net, 1.0, seed);

        let q = modularity(&net, &part);
        prop_assert!((-1.0..=1.0).contains(&q), "modularity {} out of range", q);

        let mut seen = vec![false; net.num_nodes()];
        for r in 0..part.num_regions() {
            for &m in part.members(r) {
                prop_assert!(!seen[m], "node listed in two regions");
                seen[m] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s), "node missing from every region");

        let rg = build_region_graph(&net, &part);
        let mut counted = 0usize;
        for (_, edges) in rg.pairs() {
            counted += edges.len();
        }
        let crossing = net
            .edges()
            .iter()
            .filter(|e| part.region_of(&net, e.from) != part.region_of(&net, e.to))
            .count();
        prop_assert_eq!(counted, crossing);
    }

    /// Metrics on synthetic logs: throughput is bounded by the departed
    /// fleet, the empty flag fires exactly when nothing finished, and
    /// throughput times mean travel time reproduces the duration sum.
    #[test]
    fn metrics_respect_their_definitions(
        specs in prop::collection::vec(
            (any::<bool>(), 0u64..240, prop::option::of(1u64..100), 0u64..50, 1.0f64..200.0),
            0..20,
        ),
    ) {
        let horizon = 200u64;
        let vehicles: Vec<VehicleRecord> = specs
            .iter()
            .enumerate()
            .map(|(i, &(controlled, depart, dur, idle, tau_hat))| VehicleRecord {
                id: i as u64,
                controlled,
                origin: 0,
                dest: 1,
                depart_step: depart,
                injected_step: (depart < horizon).then_some(depart),
                arrive_step: dur
                    .map(|d| depart + d)
                    .filter(|&a| a <= horizon && depart < horizon),
                tau_hat_s: tau_hat,
                idle_steps: idle,
                pending_wait_steps: 0,
                route: vec![0],
                fixed_route: None,
                global_plan: vec![],
            })
            .collect();
        let log = EpisodeLog {
            seed: 0,
            step_length_s: 2.0,
            horizon_steps: horizon,
            vehicles,
            region_steps: vec![],
            edge_passes: Default::default(),
            incidents: vec![],
            queue_trace: None,
        };
        let m = compute_metrics(&log);
        let departed = log
            .vehicles
            .iter()
            .filter(|v| v.controlled && v.depart_step < horizon)
            .count() as u64;
        let finished: Vec<_> = log
            .vehicles
            .iter()
            .filter(|v| v.controlled && v.depart_step < horizon && v.arrive_step.is_some())
            .collect();
        prop_assert!(m.tp <= departed);
        prop_assert_eq!(m.tp, finished.len() as u64);
        prop_assert_eq!(m.empty, m.tp == 0);
        let durations: Scalar = finished
            .iter()
            .map(|v| (v.arrive_step.unwrap() - v.depart_step) as Scalar * log.step_length_s)
            .sum();
        prop_assert!((m.tp as Scalar * m.att_s - durations).abs() <= 1e-9 * durations.max(1.0));
    }

    /// Gravity demand is reproducible per seed, bounded by the horizon, and
    /// routable by construction (origin differs from destination).
    #[test]
    fn background_demand_is_seeded_and_in_horizon(seed in 0u64..2000, theta in 0.0f64..3.0) {
        let mut rng = derive_rng(seed, "prop-demand");
        let net = common::random_connected_network(&mut rng);
        let part = louvain_partition(&net, 1.0, seed);
        let rg = build_region_graph(&net, &part);
        let params = GravityParams {
            activities: vec![1.0; part.num_regions()],
            gamma: 1.0,
            theta,
            horizon_s: 600.0,
            bucket_s: 300.0,
        };
        let a = generate_background_demand(&net, &part, &rg, &params, seed, 1000).unwrap();
        let b = generate_background_demand(&net, &part, &rg, &params, seed, 1000).unwrap();
        prop_assert_eq!(&a, &b, "same seed must give the same demand");
        for t in &a {
            prop_assert!(t.depart_s >= 0.0 && t.depart_s < params.horizon_s);
            prop_assert!(t.origin != t.dest);
            prop_assert!(!t.controlled);
            prop_assert!(t.id.0 >= 1000);
        }
        if theta == 0.0 {
            prop_assert!(a.is_empty(), "zero demand intensity must generate no trips");
        }
    }
}
