//! Property tests over the public API.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use goalgauge::clustering::stability::{align, best_alignment_trace, contingency};
use goalgauge::clustering::{
    adjusted_rand_index, kmeans, run_clustering, stability_matrix, ClusteringConfig, KMeansConfig,
};
use goalgauge::completion::{match_end_tag, ClassificationReport};
use goalgauge::exec::Execution;
use goalgauge::interaction::{
    concat_turns, read_dataset, truncate_interaction, write_dataset, TurnFormat,
};
use goalgauge::rng::seeded_rng;
use goalgauge::rtree::{build_tree, correlate, histogram, ThresholdMode, TreeConfig};
use goalgauge::{Interaction, Role};
use proptest::prelude::*;

use common::*;

fn interaction(pairs: usize, tail_user: bool) -> Interaction {
    let mut messages = Vec::new();
    for t in 1..=pairs {
        messages.push((Role::User, format!("prompt {t}\nwith, commas")));
        if t < pairs || !tail_user {
            messages.push((Role::Assistant, format!("reply {t} \"quoted\"")));
        }
    }
    Interaction::new(format!("x{pairs}"), messages, Some(true), BTreeMap::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_a_strict_labeled_prefix(pairs in 2usize..9, seed in any::<u64>(), tail_user in any::<bool>()) {
        let x = interaction(pairs, tail_user);
        let f = TurnFormat::default();
        let t = truncate_interaction(&x, &mut seeded_rng(seed)).unwrap();
        prop_assert!(t.n_turns() >= 1 && t.n_turns() < pairs);
        prop_assert_eq!(t.complete_label(), Some(false));
        prop_assert_eq!(t.id(), format!("{}:trunc", x.id()));
        let full = concat_turns(&x, None, &f).unwrap();
        let cut = concat_turns(&t, None, &f).unwrap();
        prop_assert!(full.starts_with(&cut) && cut.len() < full.len());
        prop_assert_eq!(cut, concat_turns(&x, Some(t.n_turns()), &f).unwrap());
    }

    #[test]
    fn concatenation_grows_by_prefix(pairs in 1usize..9, tail_user in any::<bool>()) {
        let x = interaction(pairs, tail_user);
        let f = TurnFormat::default();
        let mut last = String::new();
        for k in 1..=pairs {
            let s = concat_turns(&x, Some(k), &f).unwrap();
            prop_assert!(s.starts_with(&last) && s.len() > last.len());
            last = s;
        }
        prop_assert!(concat_turns(&x, Some(pairs + 1), &f).is_err());
    }

    #[test]
    fn dataset_round_trips(pairs in proptest::collection::vec(1usize..6, 1..8)) {
        let data: Vec<Interaction> = pairs.iter().enumerate().map(|(i, p)| {
            let x = interaction(*p, i % 2 == 0);
            Interaction::new(format!("id-{i}"), x.messages(), if i % 3 == 0 { None } else { Some(i % 2 == 0) }, BTreeMap::new()).unwrap()
        }).collect();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        prop_assert_eq!(read_dataset(buf.as_slice(), "mem").unwrap(), data);
    }

    #[test]
    fn metrics_complement_symmetry(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let r = ClassificationReport::from_counts(tp, fp, fn_, tn);
        let s = r.swapped();
        prop_assert_eq!(s.accuracy, r.accuracy);
        prop_assert_eq!(s.swapped(), r.clone());
        for v in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn end_tag_found_at_the_start_only_within_window(pad in 0usize..40, tail in "[a-z ]{0,20}") {
        let patterns = vec!["<end>".to_string()];
        let text = format!("{}<end>{tail}", " ".repeat(pad));
        prop_assert!(match_end_tag(&text, &patterns, 32, false).is_some());
        let late = format!("{}<end>", "x".repeat(pad + 28));
        prop_assert!(match_end_tag(&late, &patterns, 32, false).is_none());
    }

    #[test]
    fn tree_leaves_match_enumeration(seed in any::<u64>(), alpha in 0.01f64..0.99, path_mass in any::<bool>()) {
        let states = random_table(&mut seeded_rng(seed), 4, 5);
        let gw = table_gateway(states.clone(), 5);
        let mode = if path_mass { ThresholdMode::PathMass } else { ThresholdMode::PerToken };
        let cfg = TreeConfig { alpha, mode, budget: 1_000_000, max_depth: None };
        let tree = build_tree("A:", &cfg, &gw).unwrap();
        let got: BTreeSet<Vec<String>> = tree.leaf_paths().into_iter().map(|(p, _)| p).collect();
        prop_assert_eq!(&got, &oracle_leaves(&states, alpha, path_mass, 5));
        prop_assert!(tree.leaf_mass() <= 1.0 + 1e-6);
        prop_assert!(got.contains(&tree.greedy));
        for node in &tree.nodes {
            if let Some(p) = node.parent {
                prop_assert!((node.path_logprob - (tree.nodes[p].path_logprob + node.token_logprob)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tree_leaves_shrink_with_alpha(seed in any::<u64>(), a in 0.01f64..0.98, b in 0.01f64..0.98) {
        let (lo, hi) = (a.min(b), a.max(b));
        let states = random_table(&mut seeded_rng(seed), 4, 5);
        let gw = table_gateway(states, 5);
        for mode in [ThresholdMode::PerToken, ThresholdMode::PathMass] {
            let leaves = |alpha| -> BTreeSet<Vec<String>> {
                let cfg = TreeConfig { alpha, mode, budget: 1_000_000, max_depth: None };
                build_tree("A:", &cfg, &gw).unwrap().leaf_paths().into_iter().map(|(p, _)| p).collect()
            };
            prop_assert!(leaves(hi).is_subset(&leaves(lo)));
        }
    }

    #[test]
    fn tree_budget_is_respected(seed in any::<u64>(), budget in 1usize..12) {
        let states = random_table(&mut seeded_rng(seed), 4, 5);
        let gw = table_gateway(states, 5);
        let cfg = |budget| TreeConfig { alpha: 0.01, mode: ThresholdMode::PerToken, budget, max_depth: None };
        let unbounded = build_tree("A:", &cfg(1_000_000), &gw).unwrap();
        let tree = build_tree("A:", &cfg(budget), &gw).unwrap();
        prop_assert!(tree.nodes.len() - 1 <= budget);
        prop_assert_eq!(tree.budget_exhausted, unbounded.nodes.len() - 1 > budget);
        if !tree.budget_exhausted {
            prop_assert_eq!(tree.nodes.len(), unbounded.nodes.len());
            prop_assert!(tree.leaves().all(|n| !n.cut));
        }
        for n in &tree.nodes {
            prop_assert_eq!(n.children.is_empty(), n.leaf);
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_descends(seed in any::<u64>(), n in 2usize..80, dim in 1usize..6, k in 1usize..8) {
        prop_assume!(k <= n);
        let mut rng = seeded_rng(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect()).collect();
        let cfg = KMeansConfig::new(k, seed);
        let a = kmeans(&points, &cfg).unwrap();
        let b = kmeans(&points, &KMeansConfig { exec: Execution::Sequential, ..cfg }).unwrap();
        prop_assert_eq!(&a.assignments, &b.assignments);
        prop_assert_eq!(&a.inertia_history, &b.inertia_history);
        for w in a.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(a.assignments.iter().all(|c| *c < k));
    }

    #[test]
    fn greedy_alignment_never_beats_search(labels in proptest::collection::vec((0usize..5, 0usize..5), 1..60)) {
        let a: BTreeMap<String, usize> = labels.iter().enumerate().map(|(i, (x, _))| (format!("s{i:03}"), *x)).collect();
        let b: BTreeMap<String, usize> = labels.iter().enumerate().map(|(i, (_, y))| (format!("s{i:03}"), *y)).collect();
        let (rows, cols, counts) = contingency(&a, &b).unwrap();
        let m = align(&rows, &cols, &counts);
        prop_assert_eq!(m.total(), labels.len() as u64);
        prop_assert!(m.trace() <= best_alignment_trace(&counts).unwrap());
        let (self_rows, self_cols, self_counts) = contingency(&a, &a).unwrap();
        prop_assert!(align(&self_rows, &self_cols, &self_counts).is_diagonal());
    }

    #[test]
    fn ari_is_symmetric_and_label_blind(labels in proptest::collection::vec((0usize..4, 0usize..4), 2..50), shift in 1usize..10) {
        let (a, b): (Vec<usize>, Vec<usize>) = labels.into_iter().unzip();
        let ab = adjusted_rand_index(&a, &b);
        prop_assert!((ab - adjusted_rand_index(&b, &a)).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|x| x * 7 + shift).collect();
        prop_assert!((adjusted_rand_index(&renamed, &b) - ab).abs() < 1e-12);
        prop_assert_eq!(adjusted_rand_index(&a, &renamed), 1.0);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn histogram_and_correlation_bounds(xs in proptest::collection::vec(-1e3f64..1e3, 2..100), bins in 1usize..30) {
        let h = histogram(&xs, bins).unwrap();
        prop_assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), xs.len());
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.5 + (i % 3) as f64).collect();
        if let Ok(r) = correlate(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - correlate(&ys, &xs).unwrap()).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn merge_loop_invariants(k1 in 1usize..10, seed in any::<u64>(), per_topic in 3usize..8) {
        let data = planted_dataset(per_topic);
        let (gw, _) = planted_gateway();
        let cfg = ClusteringConfig { k1, seed, ..ClusteringConfig::default() };
        let run = run_clustering(&data, &cfg, &gw).unwrap();
        let m = &run.merge;
        prop_assert_eq!(m.accepts, m.k_initial - m.k_final);
        prop_assert!(m.queries <= k1 * k1);
        prop_assert!(run.clusters.check_consistency().is_ok());
        prop_assert_eq!(run.clusters.assignments.len(), data.len());
        // Cluster count after each accepted merge drops by exactly one.
        let accepted = m.decisions.iter().filter(|d| d.accepted).count();
        prop_assert_eq!(accepted, m.accepts);
        // Every final cluster holds a single planted topic once k1 >= 3.
        if k1 >= 3 {
            prop_assert_eq!(run.clusters.k(), 3);
            let s = stability_matrix(&run.clusters, &run.clusters).unwrap();
            prop_assert!(s.is_diagonal());
            for c in &run.clusters.clusters {
                let topics: BTreeSet<usize> = c.member_ids.iter().map(|id| topic_of(id)).collect();
                prop_assert_eq!(topics.len(), 1);
            }
        }
    }
}
