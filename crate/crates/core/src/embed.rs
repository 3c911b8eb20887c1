//! Concept embedders: GraphSAGE stacks over knowledge graphs, or a plain
//! trainable matrix. All parameters live under the `embed.` prefix.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Read;
use std::path::Path;
use std::rc::Rc;

use numcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::EncodedVisit;
use crate::error::{invalid, Error, Result};
use crate::init;
use crate::kgraph::{build_cooccurrence, build_tree_hierarchy, ConceptType, EdgeSet, KnowledgeGraph, TreeHierarchy, TreeScheme, Vocabulary};

pub const PREFIX: &str = "embed.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderVariant {
    UmlsDualStack,
    IcdAtcPair,
    IcdAtcCoHetero,
    EmbeddingMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub variant: EmbedderVariant,
    pub k: usize,
    pub depth: usize,
    pub stacks: usize,
}

/// One GNN over one graph. Every stack runs all edge sets of the graph and
/// stacks are max-pooled.
#[derive(Debug, Clone)]
pub struct Tower {
    pub name: String,
    pub graph: KnowledgeGraph,
    pub stacks: usize,
    src: Vec<Rc<[usize]>>,
    dst: Vec<Rc<[usize]>>,
}

impl Tower {
    pub fn new(name: impl Into<String>, graph: KnowledgeGraph, stacks: usize) -> Self {
        let src = graph.edge_sets.iter().map(|e| Rc::from(e.src())).collect();
        let dst = graph.edge_sets.iter().map(|e| Rc::from(e.dst())).collect();
        Self { name: name.into(), graph, stacks, src, dst }
    }

    pub fn features_name(&self) -> String {
        format!("{PREFIX}{}.x", self.name)
    }

    pub fn projection_name(&self) -> String {
        format!("{PREFIX}{}.proj", self.name)
    }

    pub fn layer_name(&self, stack: usize, layer: usize, edge_set: usize, part: &str) -> String {
        format!("{PREFIX}{}.s{stack}.l{layer}.{}.{part}", self.name, self.graph.edge_sets[edge_set].tag)
    }
}

/// Per-edge multiplicative mask for one tower, one `E x 1` column per edge
/// set in that tower (`None` leaves the set unmasked).
pub type EdgeMask<'a> = (usize, &'a [Option<Var>]);

#[derive(Debug, Clone)]
pub struct ConceptEmbedder {
    pub config: EmbedConfig,
    /// Concepts addressed by the node table, typed d/m/n.
    pub vocab: Vocabulary,
    pub towers: Vec<Tower>,
    /// Concept index to `(tower, node)`.
    row_map: Vec<(usize, usize)>,
    gather: Option<Rc<[usize]>>,
}

fn check_config(cfg: &EmbedConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(Error::Config("embedding width k must be positive".into()));
    }
    if cfg.variant != EmbedderVariant::EmbeddingMatrix && (cfg.depth == 0 || cfg.stacks == 0) {
        return Err(Error::Config("GNN variants need depth >= 1 and stacks >= 1".into()));
    }
    Ok(())
}

fn codes_of(vocab: &Vocabulary, ty: ConceptType) -> Vec<String> {
    vocab.of_type(ty).iter().map(|&i| vocab.id(i).to_string()).collect()
}

impl ConceptEmbedder {
    /// Dual-stack (or `stacks`-way) max-pooled GNN over a UMLS-style graph
    /// whose nodes are the concepts.
    pub fn umls(graph: KnowledgeGraph, config: EmbedConfig) -> Result<Self> {
        check_config(&config)?;
        let vocab = graph.vocab.clone();
        if (0..vocab.len()).any(|i| vocab.ty(i) == ConceptType::Internal) {
            return invalid("UMLS-style graphs must not contain internal nodes");
        }
        let n = vocab.len();
        let tower = Tower::new("umls", graph, config.stacks);
        Ok(Self { config, vocab, towers: vec![tower], row_map: (0..n).map(|i| (0, i)).collect(), gather: None })
    }

    /// Separate GNNs over an ICD-like disease tree and an ATC-like
    /// medication tree; tables are joined by lookup.
    pub fn icd_atc_pair(vocab: &Vocabulary, config: EmbedConfig) -> Result<Self> {
        check_config(&config)?;
        let vocab = Self::structured(vocab)?;
        let icd = build_tree_hierarchy(&codes_of(&vocab, ConceptType::D), TreeScheme::IcdLike)?;
        let atc = build_tree_hierarchy(&codes_of(&vocab, ConceptType::M), TreeScheme::AtcLike)?;
        let mut row_map = Vec::with_capacity(vocab.len());
        for i in 0..vocab.len() {
            let (tower, tree) = if vocab.ty(i) == ConceptType::D { (0, &icd) } else { (1, &atc) };
            row_map.push((tower, tree.graph.vocab.get(vocab.id(i)).expect("leaf present")));
        }
        let towers = vec![Tower::new("icd", icd.graph, config.stacks), Tower::new("atc", atc.graph, config.stacks)];
        Self::with_towers(config, vocab, towers, row_map)
    }

    /// One heterogeneous GNN over both trees plus co-occurrence edge sets
    /// counted on `train_visits` (indexed by `vocab`); per-edge-set
    /// convolutions are summed in each layer.
    pub fn icd_atc_hetero(vocab: &Vocabulary, train_visits: &[EncodedVisit], config: EmbedConfig) -> Result<Self> {
        check_config(&config)?;
        let structured = Self::structured(vocab)?;
        let icd = build_tree_hierarchy(&codes_of(&structured, ConceptType::D), TreeScheme::IcdLike)?;
        let atc = build_tree_hierarchy(&codes_of(&structured, ConceptType::M), TreeScheme::AtcLike)?;

        let mut merged = Vocabulary::new();
        let mut maps = Vec::new();
        for tree in [&icd, &atc] {
            let mut map = Vec::with_capacity(tree.graph.n_nodes());
            for (id, ty) in tree.graph.vocab.iter() {
                // Internal prefixes are namespaced so the two trees cannot collide.
                let is_root = id == TreeHierarchy::root_name(tree.scheme);
                let name = if ty == ConceptType::Internal && !is_root {
                    format!("{}:{id}", tree.scheme.tag())
                } else {
                    id.to_string()
                };
                map.push(Some(merged.push(name, ty)?));
            }
            maps.push(map);
        }
        let n = merged.len();
        let mut edge_sets = vec![icd.graph.edge_sets[0].remap(&maps[0], n)?, atc.graph.edge_sets[0].remap(&maps[1], n)?];
        let pairs = [
            (ConceptType::D, ConceptType::D),
            (ConceptType::M, ConceptType::M),
            (ConceptType::D, ConceptType::M),
            (ConceptType::M, ConceptType::D),
        ];
        // Co-occurrence is counted over the input vocabulary, then moved to
        // the merged node space.
        let to_merged: Vec<Option<usize>> = (0..vocab.len()).map(|i| merged.get(vocab.id(i))).collect();
        for e in build_cooccurrence(train_visits, vocab, &pairs)? {
            edge_sets.push(e.remap(&to_merged, n)?);
        }
        let row_map = (0..structured.len()).map(|i| (0, merged.get(structured.id(i)).expect("leaf present"))).collect();
        let graph = KnowledgeGraph::new(merged, edge_sets)?;
        Self::with_towers(config, structured, vec![Tower::new("hetero", graph, config.stacks)], row_map)
    }

    /// Trainable `|C| x k` matrix, no graph.
    pub fn matrix(vocab: &Vocabulary, config: EmbedConfig) -> Result<Self> {
        check_config(&config)?;
        let n = vocab.len();
        Ok(Self { config, vocab: vocab.clone(), towers: Vec::new(), row_map: (0..n).map(|i| (0, i)).collect(), gather: None })
    }

    fn structured(vocab: &Vocabulary) -> Result<Vocabulary> {
        let entries: Vec<(String, ConceptType)> = vocab
            .iter()
            .filter(|(_, ty)| matches!(ty, ConceptType::D | ConceptType::M))
            .map(|(id, ty)| (id.to_string(), ty))
            .collect();
        if entries.iter().all(|(_, t)| *t != ConceptType::D) || entries.iter().all(|(_, t)| *t != ConceptType::M) {
            return invalid("tree variants need both disease and medication codes");
        }
        Vocabulary::from_entries(entries)
    }

    fn with_towers(config: EmbedConfig, vocab: Vocabulary, towers: Vec<Tower>, row_map: Vec<(usize, usize)>) -> Result<Self> {
        let mut offsets = vec![0];
        for t in &towers {
            offsets.push(offsets.last().unwrap() + t.graph.n_nodes());
        }
        let gather: Vec<usize> = row_map.iter().map(|&(t, node)| offsets[t] + node).collect();
        Ok(Self { config, vocab, towers, row_map, gather: Some(Rc::from(gather)) })
    }

    pub fn n_concepts(&self) -> usize {
        self.vocab.len()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    /// `(tower, node)` holding concept `c`.
    pub fn locate(&self, c: usize) -> Option<(usize, usize)> {
        self.row_map.get(c).copied()
    }

    pub fn matrix_name() -> String {
        format!("{PREFIX}matrix")
    }

    /// Initializes all embedder parameters. `features`, when given, supplies
    /// frozen node features for the single-tower variants; a trainable
    /// projection maps them to width k if their width differs.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng, features: Option<Tensor>) -> Result<()> {
        let k = self.config.k;
        if self.towers.is_empty() {
            if features.is_some() {
                return invalid("the embedding-matrix variant takes no node features");
            }
            store.insert(Self::matrix_name(), init::normal(rng, self.n_concepts(), k, 1.0 / (k as f64).sqrt()));
            return Ok(());
        }
        if features.is_some() && self.towers.len() != 1 {
            return invalid("node-feature files are supported for single-graph variants only");
        }
        for tower in &self.towers {
            let n = tower.graph.n_nodes();
            let k0 = match &features {
                Some(f) => {
                    if f.rows() != n {
                        return invalid(format!("feature file has {} rows, graph has {n} nodes", f.rows()));
                    }
                    store.insert_frozen(tower.features_name(), f.clone());
                    f.cols()
                }
                None => {
                    store.insert(tower.features_name(), init::normal(rng, n, k, 1.0 / (k as f64).sqrt()));
                    k
                }
            };
            if k0 != k {
                store.insert(tower.projection_name(), init::xavier(rng, k0, k));
            }
            for s in 0..tower.stacks {
                for l in 0..self.config.depth {
                    for e in 0..tower.graph.edge_sets.len() {
                        store.insert(tower.layer_name(s, l, e, "w_self"), init::xavier(rng, k, k));
                        store.insert(tower.layer_name(s, l, e, "w_neigh"), init::xavier(rng, k, k));
                        store.insert(tower.layer_name(s, l, e, "b"), Tensor::zeros(1, k));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output table of one tower, `|V_tower| x k`.
    pub fn tower_table(&self, g: &mut Graph, store: &ParamStore, t: usize, mask: Option<&[Option<Var>]>) -> Result<Var> {
        let tower = &self.towers[t];
        let mut x = g.param(store, &tower.features_name())?;
        if store.contains(&tower.projection_name()) {
            let p = g.param(store, &tower.projection_name())?;
            x = g.matmul(x, p)?;
        }
        let mut pooled: Option<Var> = None;
        for s in 0..tower.stacks {
            let mut h = x;
            for l in 0..self.config.depth {
                let mut acc: Option<Var> = None;
                for (e, edges) in tower.graph.edge_sets.iter().enumerate() {
                    let w_self = g.param(store, &tower.layer_name(s, l, e, "w_self"))?;
                    let w_neigh = g.param(store, &tower.layer_name(s, l, e, "w_neigh"))?;
                    let b = g.param(store, &tower.layer_name(s, l, e, "b"))?;
                    let m = mask.and_then(|m| m.get(e).copied().flatten());
                    let conv = sage_conv(g, h, edges, (&tower.src[e], &tower.dst[e]), w_self, w_neigh, b, m)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, conv)?,
                        None => conv,
                    });
                }
                h = acc.expect("graphs carry at least one edge set");
                if l + 1 < self.config.depth {
                    h = g.relu(h)?;
                }
            }
            pooled = Some(match pooled {
                Some(p) => g.maximum(p, h)?,
                None => h,
            });
        }
        Ok(pooled.expect("at least one stack"))
    }

    /// `|C| x k` concept table `f_theta` on the tape.
    pub fn node_table(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        self.node_table_masked(g, store, None)
    }

    pub fn node_table_masked(&self, g: &mut Graph, store: &ParamStore, mask: Option<EdgeMask<'_>>) -> Result<Var> {
        if self.towers.is_empty() {
            return Ok(g.param(store, &Self::matrix_name())?);
        }
        let mut tables = Vec::with_capacity(self.towers.len());
        for t in 0..self.towers.len() {
            let m = mask.and_then(|(mt, m)| (mt == t).then_some(m));
            tables.push(self.tower_table(g, store, t, m)?);
        }
        match &self.gather {
            None => Ok(tables[0]),
            Some(idx) => {
                let all = if tables.len() == 1 { tables[0] } else { g.concat_rows(&tables)? };
                Ok(g.gather_rows(all, idx.clone())?)
            }
        }
    }

    /// Evaluates the table off-tape.
    pub fn compute_table(&self, store: &ParamStore) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = self.node_table(&mut g, store)?;
        Ok(g.value(t).clone())
    }
}

/// One GraphSAGE convolution without activation:
/// `H W_self + agg(H) W_neigh + b`. Unweighted sets aggregate by mean,
/// weighted sets by weight-scaled sum. `mask` scales each message.
#[allow(clippy::too_many_arguments)]
fn sage_conv(
    g: &mut Graph,
    h: Var,
    edges: &EdgeSet,
    (src, dst): (&Rc<[usize]>, &Rc<[usize]>),
    w_self: Var,
    w_neigh: Var,
    b: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let n = edges.n_nodes();
    let (rows, _) = g.shape(h);
    if rows != n {
        return invalid(format!("feature matrix has {rows} rows, graph has {n} nodes"));
    }
    let self_term = g.matmul(h, w_self)?;
    if edges.num_edges() == 0 {
        return Ok(g.add_row_bias(self_term, b)?);
    }
    let messages = g.gather_rows(h, src.clone())?;
    let agg = match edges.weights() {
        None => {
            let messages = match mask {
                Some(m) => g.scale_rows(messages, m)?,
                None => messages,
            };
            g.segment_mean(messages, dst.clone(), n)?
        }
        Some(w) => {
            let mut scale = g.constant(Tensor::column_vector(w.to_vec()))?;
            if let Some(m) = mask {
                scale = g.mul(scale, m)?;
            }
            let messages = g.scale_rows(messages, scale)?;
            g.segment_sum(messages, dst.clone(), n)?
        }
    };
    let neigh = g.matmul(agg, w_neigh)?;
    let sum = g.add(self_term, neigh)?;
    Ok(g.add_row_bias(sum, b)?)
}

/// GraphSAGE layer `act(H W_self + agg(H) W_neigh + b)` with ReLU iff
/// `apply_relu`. Isolated nodes get a zero neighbor term.
pub fn sage_layer(
    g: &mut Graph,
    h: Var,
    edges: &EdgeSet,
    w_self: Var,
    w_neigh: Var,
    b: Var,
    apply_relu: bool,
) -> Result<Var> {
    let src: Rc<[usize]> = Rc::from(edges.src());
    let dst: Rc<[usize]> = Rc::from(edges.dst());
    let out = sage_conv(g, h, edges, (&src, &dst), w_self, w_neigh, b, None)?;
    Ok(if apply_relu { g.relu(out)? } else { out })
}

/// Gathers table rows; gradients scatter back additively.
pub fn lookup(g: &mut Graph, table: Var, ids: &[usize]) -> Result<Var> {
    let (rows, _) = g.shape(table);
    if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
        return invalid(format!("concept index {bad} outside table of {rows} rows"));
    }
    Ok(g.gather_rows(table, Rc::from(ids))?)
}

/// Excludes all embedder parameters and node features from optimization.
pub fn freeze(store: &mut ParamStore) -> Result<()> {
    if !store.names().any(|n| n.starts_with(PREFIX)) {
        return Err(Error::Missing("no concept-embedder parameters to freeze".into()));
    }
    store.freeze_prefix(PREFIX);
    Ok(())
}

pub fn embedder_fingerprint(store: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with(PREFIX)) {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Node table cached against a fingerprint of the embedder parameters, so
/// a changed `theta` always triggers recomputation.
#[derive(Debug, Clone, Default)]
pub struct CachedTable {
    entry: Option<(u64, Tensor)>,
    pub recomputations: usize,
}

impl CachedTable {
    pub fn get(&mut self, embedder: &ConceptEmbedder, store: &ParamStore) -> Result<&Tensor> {
        let fp = embedder_fingerprint(store);
        if self.entry.as_ref().is_none_or(|(f, _)| *f != fp) {
            self.entry = Some((fp, embedder.compute_table(store)?));
            self.recomputations += 1;
        }
        Ok(&self.entry.as_ref().expect("just filled").1)
    }
}

/// Reads a node-feature file: a header `<rows> <width> <text|binary>`
/// followed by whitespace-separated rows or little-endian `f64` values.
pub fn load_node_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_node_features(&bytes, &path.display().to_string())
}

pub fn parse_node_features(bytes: &[u8], source_name: &str) -> Result<Tensor> {
    let malformed = |line: usize, detail: &str| Error::Malformed { source_name: source_name.into(), line, detail: detail.into() };
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| malformed(1, "missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| malformed(1, "header is not UTF-8"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let [rows, cols, format] = parts[..] else {
        return Err(malformed(1, "expected `<rows> <width> <text|binary>`"));
    };
    let rows: usize = rows.parse().map_err(|_| malformed(1, "bad row count"))?;
    let cols: usize = cols.parse().map_err(|_| malformed(1, "bad width"))?;
    let body = &bytes[nl + 1..];
    let data: Vec<f64> = match format {
        "binary" => {
            if body.len() != rows * cols * 8 {
                return Err(malformed(2, "binary body length does not match header"));
            }
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
        }
        "text" => {
            let text = std::str::from_utf8(body).map_err(|_| malformed(2, "body is not UTF-8"))?;
            let mut data = Vec::with_capacity(rows * cols);
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            if lines.len() != rows {
                return Err(malformed(2, &format!("expected {rows} rows, found {}", lines.len())));
            }
            for (i, line) in lines.iter().enumerate() {
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|_| malformed(i + 2, "bad number"))?);
                }
                if data.len() - before != cols {
                    return Err(malformed(i + 2, &format!("expected {cols} values")));
                }
            }
            data
        }
        _ => return Err(malformed(1, "format must be `text` or `binary`")),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(malformed(2, "non-finite feature value"));
    }
    Ok(Tensor::from_matrix(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use numcore::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph() -> EdgeSet {
        EdgeSet::from_pairs("umls", 3, [(0, 1), (1, 2)], true).unwrap()
    }

    #[test]
    fn identity_sage_on_path() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::column_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let i = g.constant(Tensor::identity(1)).unwrap();
        let b = g.constant(Tensor::zeros(1, 1)).unwrap();
        let out = sage_layer(&mut g, h, &path_graph(), i, i, b, false).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn isolated_node_uses_self_term() {
        let edges = EdgeSet::from_pairs("umls", 3, [(0, 1)], true).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::column_vector(vec![1.0, 2.0, -3.0])).unwrap();
        let ws = g.constant(Tensor::scalar(2.0)).unwrap();
        let wn = g.constant(Tensor::scalar(5.0)).unwrap();
        let b = g.constant(Tensor::scalar(0.5)).unwrap();
        let out = sage_layer(&mut g, h, &edges, ws, wn, b, true).unwrap();
        assert_eq!(g.value(out).data()[2], 0.0);
        let out = sage_layer(&mut g, h, &edges, ws, wn, b, false).unwrap();
        assert_eq!(g.value(out).data()[2], -5.5);
    }

    #[test]
    fn weighted_messages_match_dense_adjacency() {
        let e = EdgeSet::weighted("co_dd", 3, [(0, 2, 1.0), (1, 2, 3.0), (2, 0, 2.0)]).map(|mut e| {
            e.normalize_incoming();
            e
        });
        let e = e.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = init::normal(&mut rng, 3, 2, 1.0);
        let ws = init::normal(&mut rng, 2, 2, 1.0);
        let wn = init::normal(&mut rng, 2, 2, 1.0);
        let mut g = Graph::new();
        let (xv, wsv, wnv) = (g.constant(x.clone()).unwrap(), g.constant(ws.clone()).unwrap(), g.constant(wn.clone()).unwrap());
        let b = g.constant(Tensor::zeros(1, 2)).unwrap();
        let out = sage_layer(&mut g, xv, &e, wsv, wnv, b, false).unwrap();
        let mut adj = Tensor::zeros(3, 3);
        adj.set(2, 0, 0.25);
        adj.set(2, 1, 0.75);
        adj.set(0, 2, 1.0);
        let mut expected = x.matmul(&ws);
        expected.add_assign(&adj.matmul(&x).matmul(&wn));
        for (a, b) in g.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn toy_vocab(n: usize) -> Vocabulary {
        Vocabulary::from_entries((0..n).map(|i| (format!("c{i}"), ConceptType::N))).unwrap()
    }

    #[test]
    fn identical_stacks_equal_single_stack() {
        let graph = KnowledgeGraph::new(toy_vocab(3), vec![path_graph()]).unwrap();
        let cfg = |stacks| EmbedConfig { variant: EmbedderVariant::UmlsDualStack, k: 4, depth: 2, stacks };
        let dual = ConceptEmbedder::umls(graph.clone(), cfg(2)).unwrap();
        let single = ConceptEmbedder::umls(graph, cfg(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        dual.init_params(&mut store, &mut rng, None).unwrap();
        let names: Vec<String> = store.names().filter(|n| n.contains(".s0.")).map(String::from).collect();
        for n in names {
            let t = store.get(&n).unwrap().clone();
            store.insert(n.replace(".s0.", ".s1."), t);
        }
        let a = dual.compute_table(&store).unwrap();
        let b = single.compute_table(&store).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn matrix_variant_returns_parameter() {
        let e = ConceptEmbedder::matrix(&toy_vocab(5), EmbedConfig { variant: EmbedderVariant::EmbeddingMatrix, k: 3, depth: 0, stacks: 0 }).unwrap();
        let mut store = ParamStore::new();
        e.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2), None).unwrap();
        assert!(e.compute_table(&store).unwrap().bit_eq(store.get(&ConceptEmbedder::matrix_name()).unwrap()));
    }

    #[test]
    fn lookup_examples() {
        let mut store = ParamStore::new();
        store.insert("t", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let mut g = Graph::new();
        let t = g.param(&store, "t").unwrap();
        let rows = lookup(&mut g, t, &[1, 1]).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 4.0, 3.0, 4.0]);
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("t").unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
        let empty = lookup(&mut g, t, &[]).unwrap();
        assert_eq!(g.shape(empty), (0, 2));
        assert!(lookup(&mut g, t, &[2]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.insert("t", init::normal(&mut rng, 4, 3, 1.0));
        let w = init::normal(&mut rng, 5, 3, 1.0);
        let err = finite_diff_check(
            |g, p| {
                let t = g.param(p, "t")?;
                let r = g.gather_rows(t, Rc::from(vec![3, 0, 3, 2, 1]))?;
                let c = g.constant(w.clone())?;
                let m = g.mul(r, c)?;
                let sq = g.mul(m, m)?;
                g.sum(sq)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn cache_tracks_parameter_changes() {
        let graph = KnowledgeGraph::new(toy_vocab(3), vec![path_graph()]).unwrap();
        let e = ConceptEmbedder::umls(graph, EmbedConfig { variant: EmbedderVariant::UmlsDualStack, k: 2, depth: 1, stacks: 2 }).unwrap();
        let mut store = ParamStore::new();
        e.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(4), None).unwrap();
        let mut cache = CachedTable::default();
        let first = cache.get(&e, &store).unwrap().clone();
        cache.get(&e, &store).unwrap();
        assert_eq!(cache.recomputations, 1);
        store.get_mut("embed.umls.x").unwrap().data_mut()[0] += 1.0;
        let second = cache.get(&e, &store).unwrap().clone();
        assert_eq!(cache.recomputations, 2);
        assert!(!first.bit_eq(&second));
    }

    #[test]
    fn feature_file_formats() {
        let t = parse_node_features(b"2 2 text\n1 2\n3 4\n", "f").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        let mut bin = b"1 2 binary\n".to_vec();
        bin.extend(0.5f64.to_le_bytes());
        bin.extend((-1.0f64).to_le_bytes());
        assert_eq!(parse_node_features(&bin, "f").unwrap().data(), &[0.5, -1.0]);
        assert!(parse_node_features(b"2 2 text\n1 2\n", "f").is_err());
    }

    #[test]
    fn freeze_requires_parameters() {
        let mut store = ParamStore::new();
        assert!(freeze(&mut store).is_err());
        store.insert("embed.matrix", Tensor::zeros(1, 1));
        store.insert("enc.cls", Tensor::zeros(1, 1));
        freeze(&mut store).unwrap();
        assert!(store.is_frozen("embed.matrix") && !store.is_frozen("enc.cls"));
    }
}
