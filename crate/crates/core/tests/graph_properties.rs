use std::collections::{BTreeMap, BTreeSet, VecDeque};

use medkg::ehr::EncodedVisit;
use medkg::kgraph::{
    build_cooccurrence, build_tree_hierarchy, graph_stats, khop_neighborhood, prune_by_frequency, ConceptType, EdgeSet,
    KnowledgeGraph, TreeScheme, Vocabulary,
};
use proptest::prelude::*;

fn vocab_n(n: usize) -> Vocabulary {
    Vocabulary::from_entries((0..n).map(|i| (format!("c{i}"), ConceptType::N))).unwrap()
}

fn graph(n: usize, pairs: &[(usize, usize)]) -> KnowledgeGraph {
    let e = EdgeSet::from_pairs("umls", n, pairs.iter().copied(), true).unwrap();
    KnowledgeGraph::new(vocab_n(n), vec![e]).unwrap()
}

fn bfs(n: usize, pairs: &[(usize, usize)], seed: usize, k: usize) -> BTreeSet<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in pairs {
        if u != v {
            adj[u].push(v);
            adj[v].push(u);
        }
    }
    let mut dist = vec![usize::MAX; n];
    dist[seed] = 0;
    let mut queue = VecDeque::from([seed]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..n).filter(|&i| dist[i] <= k).collect()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

fn edges_strategy(n: usize, max: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 0..max)
}

fn visits_strategy(n: usize) -> impl Strategy<Value = Vec<EncodedVisit>> {
    prop::collection::vec(
        (prop::collection::btree_set(0..n / 2, 0..5), prop::collection::btree_set(n / 2..n, 0..5)),
        1..12,
    )
    .prop_map(|vs| vs.into_iter().map(|(d, m)| EncodedVisit::from_codes(d.into_iter().collect(), m.into_iter().collect())).collect())
}

fn typed_vocab(n: usize) -> Vocabulary {
    Vocabulary::from_entries((0..n).map(|i| (format!("c{i}"), if i < n / 2 { ConceptType::D } else { ConceptType::M }))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetrized_adjacency_is_symmetric(pairs in edges_strategy(15, 40)) {
        let g = graph(15, &pairs);
        let e = &g.edge_sets[0];
        for u in 0..15 {
            for v in 0..15 {
                prop_assert_eq!(e.has_edge(u, v), e.has_edge(v, u));
            }
        }
        for &(u, v) in &pairs {
            prop_assert_eq!(e.has_edge(u, v), u != v);
        }
    }

    #[test]
    fn khop_matches_bfs(pairs in edges_strategy(30, 45), seed in 0usize..30, k in 0usize..5) {
        let g = graph(30, &pairs);
        prop_assert_eq!(khop_neighborhood(&g, seed, k).unwrap(), bfs(30, &pairs, seed, k));
    }

    #[test]
    fn cooccurrence_incoming_weights_sum_to_one(visits in visits_strategy(16)) {
        let vocab = typed_vocab(16);
        let pairs = [(ConceptType::D, ConceptType::M), (ConceptType::M, ConceptType::D), (ConceptType::D, ConceptType::D)];
        for e in build_cooccurrence(&visits, &vocab, &pairs).unwrap() {
            for v in 0..16 {
                let w = e.incoming_weights(v).unwrap_or(&[]);
                prop_assert!(w.iter().all(|&x| x > 0.0));
                if !w.is_empty() {
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn prune_is_idempotent(pairs in edges_strategy(20, 40), visits in visits_strategy(20), keep in 0.05f64..=1.0) {
        let g = graph(20, &pairs);
        let (once, map) = prune_by_frequency(&g, &visits, keep).unwrap();
        let remap = |ids: &[usize]| ids.iter().filter_map(|&c| map[c]).collect::<Vec<_>>();
        let moved: Vec<EncodedVisit> = visits.iter().map(|v| EncodedVisit::from_codes(remap(&v.d), remap(&v.m))).collect();
        let (twice, map2) = prune_by_frequency(&once, &moved, keep).unwrap();
        prop_assert_eq!(&twice, &once);
        prop_assert!(map2.iter().enumerate().all(|(i, m)| *m == Some(i)));
    }

    #[test]
    fn prune_keeps_induced_subgraph(pairs in edges_strategy(20, 50), visits in visits_strategy(20), keep in 0.05f64..=1.0) {
        let g = graph(20, &pairs);
        let (pruned, map) = prune_by_frequency(&g, &visits, keep).unwrap();
        let mut freq = [0usize; 20];
        for v in &visits {
            for &c in v.d.iter().chain(&v.m) {
                freq[c] += 1;
            }
        }
        let n_keep = (keep * 20.0).ceil() as usize;
        let mut ranked: Vec<usize> = (0..20).collect();
        ranked.sort_by_key(|&i| (std::cmp::Reverse(freq[i]), i));
        let kept: BTreeSet<usize> = ranked[..n_keep].iter().copied().collect();
        prop_assert_eq!(pruned.n_nodes(), n_keep);
        // Bijection between surviving ids and dense indices.
        for (old, new) in map.iter().enumerate() {
            prop_assert_eq!(new.is_some(), kept.contains(&old));
            if let Some(new) = new {
                prop_assert_eq!(pruned.vocab.id(*new), g.vocab.id(old));
                prop_assert_eq!(pruned.vocab.get(g.vocab.id(old)), Some(*new));
            }
        }
        let expected: BTreeSet<(usize, usize)> = g.edge_sets[0]
            .edges()
            .filter(|(u, v)| kept.contains(u) && kept.contains(v))
            .map(|(u, v)| (map[u].unwrap(), map[v].unwrap()))
            .collect();
        let got: BTreeSet<(usize, usize)> = pruned.edge_sets[0].edges().collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn tree_is_a_forest_over_inputs(codes in prop::collection::btree_set((400u32..430, prop::option::of(0u32..20)), 1..50)) {
        let codes: Vec<String> = codes
            .into_iter()
            .map(|(cat, sub)| match sub {
                Some(s) => format!("{cat}.{s}"),
                None => cat.to_string(),
            })
            .collect();
        let tree = build_tree_hierarchy(&codes, TreeScheme::IcdLike).unwrap();
        let n = tree.graph.n_nodes();
        // Brute-force parent count from the upward edges.
        let mut n_parents = vec![0usize; n];
        for (c, p) in tree.parent.iter().enumerate() {
            if let Some(p) = p {
                n_parents[c] += 1;
                prop_assert!(tree.graph.edge_sets[0].has_edge(c, *p) && tree.graph.edge_sets[0].has_edge(*p, c));
            }
        }
        for (i, &k) in n_parents.iter().enumerate() {
            prop_assert_eq!(k, usize::from(i != tree.root));
        }
        prop_assert_eq!(tree.graph.undirected_edges().len(), n - 1);
        let mut uf: Vec<usize> = (0..n).collect();
        for (u, v) in tree.graph.undirected_edges() {
            let (a, b) = (find(&mut uf, u), find(&mut uf, v));
            prop_assert!(a != b, "cycle through ({}, {})", u, v);
            uf[a] = b;
        }
        // Inputs that are a prefix of another input are internal, so only
        // codes without descendants are leaves.
        let expected: BTreeSet<&str> = codes
            .iter()
            .filter(|c| !codes.iter().any(|o| o != *c && o.starts_with(c.as_str())))
            .map(String::as_str)
            .collect();
        let leaves: BTreeSet<&str> = tree.leaves().into_iter().map(|i| tree.graph.vocab.id(i)).collect();
        prop_assert_eq!(leaves, expected);
    }
}

#[test]
fn cooccurrence_matches_pair_enumeration() {
    let vocab = typed_vocab(6);
    let visits = vec![
        EncodedVisit::from_codes(vec![0, 1], vec![3, 4]),
        EncodedVisit::from_codes(vec![1], vec![3]),
        EncodedVisit::from_codes(vec![0, 2], vec![3, 5]),
    ];
    let sets = build_cooccurrence(&visits, &vocab, &[(ConceptType::D, ConceptType::M)]).unwrap();
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for v in &visits {
        for &a in &v.d {
            for &b in &v.m {
                *counts.entry((a, b)).or_default() += 1.0;
            }
        }
    }
    let mut expected = BTreeMap::new();
    for (&(a, b), &c) in &counts {
        let total: f64 = counts.iter().filter(|((_, t), _)| *t == b).map(|(_, c)| c).sum();
        expected.insert((a, b), c / total);
    }
    let e = &sets[0];
    let got: BTreeMap<(usize, usize), f64> = e.edges().zip(e.weights().unwrap()).map(|(p, &w)| (p, w)).collect();
    assert_eq!(got.keys().collect::<Vec<_>>(), expected.keys().collect::<Vec<_>>());
    for (k, w) in &expected {
        assert!((got[k] - w).abs() < 1e-15);
    }
    // Concept 1 and 5 never meet.
    assert!(!e.has_edge(1, 5));
}

#[test]
fn stats_match_set_arithmetic() {
    let vocab = typed_vocab(10);
    let e = EdgeSet::from_pairs("umls", 10, [(0, 5), (1, 5), (2, 6), (0, 1)], true).unwrap();
    let g = KnowledgeGraph::new(vocab, vec![e]).unwrap();
    let train = vec![EncodedVisit::from_codes(vec![0, 1], vec![5]), EncodedVisit::from_codes(vec![2], vec![6, 7])];
    let test = vec![EncodedVisit::from_codes(vec![0, 3], vec![8])];
    let stats = graph_stats(&g, &[("train", &train), ("test", &test)]);
    let train_set: BTreeSet<usize> = [0, 1, 2, 5, 6, 7].into();
    let test_set: BTreeSet<usize> = [0, 3, 8].into();
    assert_eq!(stats.coverage["train"], train_set.len() as f64 / 10.0);
    assert_eq!(stats.coverage["test"], test_set.len() as f64 / 10.0);
    assert_eq!(stats.unseen_in_train["test"], test_set.difference(&train_set).count() as f64 / 3.0);
    assert_eq!(stats.unseen_in_train["train"], 0.0);
    assert_eq!(stats.edges, 4);
    assert_eq!(stats.degree_mean, 0.8);
    let all = vec![EncodedVisit::from_codes((0..5).collect(), (5..10).collect())];
    assert_eq!(graph_stats(&g, &[("all", &all)]).coverage["all"], 1.0);
}
