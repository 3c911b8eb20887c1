use medkg::embed::{ConceptEmbedder, EmbedConfig, EmbedderVariant};
use medkg::explain::{gnn_explain, EdgeSubgraph, ExplainConfig};
use medkg::kgraph::{ConceptType, EdgeSet, KnowledgeGraph, Vocabulary};
use numcore::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two components plus an isolated node 9.
fn embedder() -> (ConceptEmbedder, ParamStore) {
    let vocab = Vocabulary::from_entries((0..10).map(|i| (format!("c{i}"), ConceptType::N))).unwrap();
    let pairs = [(0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (6, 7), (7, 8), (3, 5)];
    let e = EdgeSet::from_pairs("umls", 10, pairs, true).unwrap();
    let cfg = EmbedConfig { variant: EmbedderVariant::UmlsDualStack, k: 6, depth: 2, stacks: 2 };
    let emb = ConceptEmbedder::umls(KnowledgeGraph::new(vocab, vec![e]).unwrap(), cfg).unwrap();
    let mut store = ParamStore::new();
    emb.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
    (emb, store)
}

#[test]
fn all_ones_mask_reproduces_the_embedding_exactly() {
    let (emb, store) = embedder();
    let full = emb.compute_table(&store).unwrap();
    for seed in 0..9 {
        for hops in 0..=2 {
            let sub = EdgeSubgraph::new(&emb, seed, hops).unwrap();
            let mut g = Graph::new();
            let ones = g.constant(Tensor::filled(sub.edges.len().max(1), 1, 1.0)).unwrap();
            let ones = if sub.edges.is_empty() { g.slice_rows(ones, 0, 0).unwrap() } else { ones };
            let e = sub.masked_embedding(&mut g, &emb, &store, ones).unwrap();
            let got = g.value(e).data();
            assert!(got.iter().zip(full.row(seed)).all(|(a, b)| a.to_bits() == b.to_bits()), "seed {seed}, hops {hops}");
        }
    }
}

#[test]
fn thresholds_bracket_the_edge_set() {
    let (emb, store) = embedder();
    let cfg = ExplainConfig { steps: 20, ..Default::default() };
    let sub = EdgeSubgraph::new(&emb, 0, 2).unwrap();
    let all = gnn_explain(&emb, &store, 0, 2, 0.0, &cfg).unwrap();
    assert_eq!(all.edges.len(), sub.edges.len());
    assert!(all.edges.windows(2).all(|w| w[0].weight >= w[1].weight));
    let none = gnn_explain(&emb, &store, 0, 2, 1.0 + 1e-9, &cfg).unwrap();
    assert!(none.edges.is_empty());
    assert_eq!(none.n_nodes, sub.nodes.len());
}

#[test]
fn isolated_seed_has_an_empty_explanation() {
    let (emb, store) = embedder();
    let out = gnn_explain(&emb, &store, 9, 2, 0.0, &ExplainConfig::default()).unwrap();
    assert!(out.edges.is_empty());
    assert_eq!(out.n_nodes, 1);
    assert!(gnn_explain(&emb, &store, 0, 3, 0.5, &ExplainConfig::default()).is_err());
}
