//! Concept vocabularies and the graphs built over them: the flat
//! UMLS-style graph, ICD/ATC-style trees and co-occurrence edge sets.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ehr::EncodedVisit;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptType {
    D,
    M,
    N,
    Internal,
}

impl ConceptType {
    pub const OBSERVED: [ConceptType; 3] = [ConceptType::D, ConceptType::M, ConceptType::N];

    pub fn tag(self) -> &'static str {
        match self {
            ConceptType::D => "d",
            ConceptType::M => "m",
            ConceptType::N => "n",
            ConceptType::Internal => "internal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "d" => Some(ConceptType::D),
            "m" => Some(ConceptType::M),
            "n" => Some(ConceptType::N),
            "internal" => Some(ConceptType::Internal),
            _ => None,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Ordered concept ids with a dense index and per-type slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    ids: Vec<String>,
    types: Vec<ConceptType>,
    index: HashMap<String, usize>,
    by_type: [Vec<usize>; 4],
    local: Vec<usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, ty: ConceptType) -> Result<usize> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return invalid(format!("duplicate concept id `{id}`"));
        }
        let idx = self.ids.len();
        self.index.insert(id.clone(), idx);
        self.ids.push(id);
        self.types.push(ty);
        self.local.push(self.by_type[ty.slot()].len());
        self.by_type[ty.slot()].push(idx);
        Ok(idx)
    }

    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, ConceptType)>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for (id, ty) in entries {
            v.push(id, ty)?;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ty(&self, idx: usize) -> ConceptType {
        self.types[idx]
    }

    /// Dense indices of all concepts of `ty`, in vocabulary order.
    pub fn of_type(&self, ty: ConceptType) -> &[usize] {
        &self.by_type[ty.slot()]
    }

    /// Position of `idx` within the slice of its own type.
    pub fn local_index(&self, idx: usize) -> usize {
        self.local[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ConceptType)> {
        self.ids.iter().map(String::as_str).zip(self.types.iter().copied())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, ty) in self.iter() {
            out.push_str(id);
            out.push('\t');
            out.push_str(ty.tag());
            out.push('\n');
        }
        out
    }
}

/// One edge set in CSR form keyed by destination: the incoming sources of
/// node `v` are `src[offsets[v]..offsets[v + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub tag: String,
    pub directed: bool,
    n_nodes: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    dst: Vec<usize>,
    weight: Option<Vec<f64>>,
}

impl EdgeSet {
    /// Unweighted edge set; self loops and duplicates are removed and
    /// `symmetrize` adds the reverse of every edge.
    pub fn from_pairs(
        tag: impl Into<String>,
        n_nodes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        symmetrize: bool,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in pairs {
            if u >= n_nodes || v >= n_nodes {
                return invalid(format!("edge ({u},{v}) outside {n_nodes} nodes"));
            }
            if u == v {
                continue;
            }
            set.insert((v, u));
            if symmetrize {
                set.insert((u, v));
            }
        }
        Ok(Self::from_sorted(tag.into(), !symmetrize, n_nodes, set.into_iter().map(|(v, u)| (u, v, None))))
    }

    /// Directed weighted edge set. Duplicate `(src, dst)` pairs are summed.
    pub fn weighted(
        tag: impl Into<String>,
        n_nodes: usize,
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (u, v, w) in triples {
            if u >= n_nodes || v >= n_nodes {
                return invalid(format!("edge ({u},{v}) outside {n_nodes} nodes"));
            }
            if !(w.is_finite() && w > 0.0) {
                return invalid(format!("edge ({u},{v}) has non-positive weight {w}"));
            }
            if u != v {
                *map.entry((v, u)).or_insert(0.0) += w;
            }
        }
        Ok(Self::from_sorted(tag.into(), true, n_nodes, map.into_iter().map(|((v, u), w)| (u, v, Some(w)))))
    }

    fn from_sorted(
        tag: String,
        directed: bool,
        n_nodes: usize,
        edges: impl Iterator<Item = (usize, usize, Option<f64>)>,
    ) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut weight = Vec::new();
        let mut weighted = false;
        for (u, v, w) in edges {
            src.push(u);
            dst.push(v);
            if let Some(w) = w {
                weighted = true;
                weight.push(w);
            }
        }
        let mut offsets = vec![0; n_nodes + 1];
        for &v in &dst {
            offsets[v + 1] += 1;
        }
        for i in 0..n_nodes {
            offsets[i + 1] += offsets[i];
        }
        Self { tag, directed, n_nodes, offsets, src, dst, weight: weighted.then_some(weight) }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weight.as_deref()
    }

    pub fn incoming(&self, v: usize) -> &[usize] {
        &self.src[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn incoming_weights(&self, v: usize) -> Option<&[f64]> {
        self.weight.as_ref().map(|w| &w[self.offsets[v]..self.offsets[v + 1]])
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.incoming(v).binary_search(&u).is_ok()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    /// Scales weights so incoming weights of every node sum to one.
    pub fn normalize_incoming(&mut self) {
        if let Some(w) = self.weight.as_mut() {
            for v in 0..self.n_nodes {
                let range = self.offsets[v]..self.offsets[v + 1];
                let total: f64 = w[range.clone()].iter().sum();
                if total > 0.0 {
                    for x in &mut w[range] {
                        *x /= total;
                    }
                }
            }
        }
    }

    /// Re-indexes endpoints through `map`; edges touching an unmapped node
    /// are dropped.
    pub fn remap(&self, map: &[Option<usize>], n_nodes: usize) -> Result<Self> {
        match &self.weight {
            None => {
                let pairs = self.edges().filter_map(|(u, v)| Some((map[u]?, map[v]?)));
                let mut e = Self::from_pairs(self.tag.clone(), n_nodes, pairs, false)?;
                e.directed = self.directed;
                Ok(e)
            }
            Some(w) => {
                let triples = self
                    .edges()
                    .zip(w.iter())
                    .filter_map(|((u, v), &w)| Some((map[u]?, map[v]?, w)));
                let mut e = Self::weighted(self.tag.clone(), n_nodes, triples)?;
                e.directed = self.directed;
                Ok(e)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    pub vocab: Vocabulary,
    pub edge_sets: Vec<EdgeSet>,
    /// Node count of the graph this one was pruned from (its own count if
    /// never pruned).
    pub origin_node_count: usize,
}

impl KnowledgeGraph {
    pub fn new(vocab: Vocabulary, edge_sets: Vec<EdgeSet>) -> Result<Self> {
        let n = vocab.len();
        if let Some(e) = edge_sets.iter().find(|e| e.n_nodes != n) {
            return invalid(format!("edge set `{}` sized for {} nodes, vocabulary has {n}", e.tag, e.n_nodes));
        }
        Ok(Self { vocab, edge_sets, origin_node_count: n })
    }

    pub fn n_nodes(&self) -> usize {
        self.vocab.len()
    }

    pub fn edge_set(&self, tag: &str) -> Option<&EdgeSet> {
        self.edge_sets.iter().find(|e| e.tag == tag)
    }

    /// Distinct neighbors of each node over all edge sets, ignoring direction.
    pub fn undirected_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n_nodes()];
        for e in &self.edge_sets {
            for (u, v) in e.edges() {
                adj[u].insert(v);
                adj[v].insert(u);
            }
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Unique undirected `(lo, hi)` node pairs over all edge sets.
    pub fn undirected_edges(&self) -> BTreeSet<(usize, usize)> {
        self.edge_sets
            .iter()
            .flat_map(|e| e.edges())
            .map(|(u, v)| (u.min(v), u.max(v)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub kept: usize,
    pub dropped_unknown: usize,
    pub dropped_self_loops: usize,
    pub duplicates: usize,
}

pub fn parse_vocab(text: &str, source_name: &str) -> Result<Vocabulary> {
    let mut vocab = Vocabulary::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |detail: String| Error::Malformed { source_name: source_name.into(), line: i + 1, detail };
        let mut cols = line.split('\t');
        let (Some(id), Some(ty), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(malformed("expected `concept_id<TAB>type`".into()));
        };
        let ty = ConceptType::parse(ty.trim()).ok_or_else(|| malformed(format!("unknown type `{ty}`")))?;
        vocab.push(id.trim(), ty).map_err(|e| malformed(e.to_string()))?;
    }
    Ok(vocab)
}

/// Parses `src<TAB>dst[<TAB>edge_type]` lines into one symmetrized edge set.
/// Relation labels are collapsed. Unknown endpoints are an error in `strict`
/// mode and dropped otherwise.
pub fn parse_edges(text: &str, vocab: &Vocabulary, strict: bool, source_name: &str) -> Result<(EdgeSet, BuildReport)> {
    let mut report = BuildReport::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::Malformed {
                source_name: source_name.into(),
                line: i + 1,
                detail: "expected `src<TAB>dst<TAB>edge_type`".into(),
            });
        }
        let (a, b) = (cols[0].trim(), cols[1].trim());
        let (u, v) = match (vocab.get(a), vocab.get(b)) {
            (Some(u), Some(v)) => (u, v),
            (u, _) => {
                if strict {
                    let id = if u.is_none() { a } else { b };
                    return Err(Error::UnknownConcept { line: i + 1, id: id.into() });
                }
                report.dropped_unknown += 1;
                continue;
            }
        };
        if u == v {
            report.dropped_self_loops += 1;
            continue;
        }
        if !seen.insert((u.min(v), u.max(v))) {
            report.duplicates += 1;
        }
    }
    report.kept = seen.len();
    let edges = EdgeSet::from_pairs("umls", vocab.len(), seen, true)?;
    Ok((edges, report))
}

pub fn build_graph(vocab_file: &Path, edge_file: &Path, strict: bool) -> Result<(KnowledgeGraph, BuildReport)> {
    let vocab_text = std::fs::read_to_string(vocab_file)?;
    let edge_text = std::fs::read_to_string(edge_file)?;
    let vocab = parse_vocab(&vocab_text, &vocab_file.display().to_string())?;
    let (edges, report) = parse_edges(&edge_text, &vocab, strict, &edge_file.display().to_string())?;
    Ok((KnowledgeGraph::new(vocab, vec![edges])?, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeScheme {
    IcdLike,
    AtcLike,
}

impl TreeScheme {
    pub fn tag(self) -> &'static str {
        match self {
            TreeScheme::IcdLike => "icd",
            TreeScheme::AtcLike => "atc",
        }
    }

    fn leaf_type(self) -> ConceptType {
        match self {
            TreeScheme::IcdLike => ConceptType::D,
            TreeScheme::AtcLike => ConceptType::M,
        }
    }

    /// Proper prefixes of `code` acting as ancestors, nearest first.
    pub fn ancestors(self, code: &str) -> Result<Vec<String>> {
        let valid = match self {
            TreeScheme::IcdLike => {
                !code.starts_with('.')
                    && code.chars().all(|c| c.is_ascii_alphanumeric() || c == '.')
                    && code.matches('.').count() <= 1
            }
            TreeScheme::AtcLike => code.chars().all(|c| c.is_ascii_alphanumeric()),
        };
        if code.is_empty() || !valid {
            return invalid(format!("`{code}` is not a valid {} code", self.tag()));
        }
        let lengths: Vec<usize> = match self {
            TreeScheme::IcdLike => (1..code.len()).rev().filter(|&l| !code[..l].ends_with('.')).collect(),
            TreeScheme::AtcLike => [5, 4, 3, 1].into_iter().filter(|&l| l < code.len()).collect(),
        };
        Ok(lengths.into_iter().map(|l| code[..l].to_string()).collect())
    }
}

/// A code hierarchy: the graph holds child-parent edges in both directions,
/// `parent` keeps the upward direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeHierarchy {
    pub graph: KnowledgeGraph,
    pub parent: Vec<Option<usize>>,
    pub root: usize,
    pub scheme: TreeScheme,
}

impl TreeHierarchy {
    pub fn root_name(scheme: TreeScheme) -> String {
        format!("{}:root", scheme.tag())
    }

    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.parent.len()];
        for p in self.parent.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.parent.len()).filter(|&i| !has_child[i]).collect()
    }
}

/// Builds a tree whose internal nodes are the code-string prefixes of
/// `codes`. Input codes come first in the vocabulary, in the given order.
pub fn build_tree_hierarchy(codes: &[String], scheme: TreeScheme) -> Result<TreeHierarchy> {
    if codes.is_empty() {
        return invalid("empty code list");
    }
    let mut vocab = Vocabulary::new();
    for c in codes {
        if vocab.get(c).is_none() {
            scheme.ancestors(c)?;
            vocab.push(c.clone(), scheme.leaf_type())?;
        }
    }
    let n_inputs = vocab.len();
    let mut parent: Vec<Option<usize>> = vec![None; n_inputs];
    let node = |vocab: &mut Vocabulary, parent: &mut Vec<Option<usize>>, name: &str| -> Result<usize> {
        match vocab.get(name) {
            Some(i) => Ok(i),
            None => {
                parent.push(None);
                vocab.push(name, ConceptType::Internal)
            }
        }
    };
    let root = node(&mut vocab, &mut parent, &TreeHierarchy::root_name(scheme))?;
    for i in 0..n_inputs {
        let mut child = i;
        let code = vocab.id(i).to_string();
        for anc in scheme.ancestors(&code)? {
            let p = node(&mut vocab, &mut parent, &anc)?;
            if parent[child].is_some() {
                break;
            }
            parent[child] = Some(p);
            child = p;
        }
        if parent[child].is_none() && child != root {
            parent[child] = Some(root);
        }
    }
    let pairs: Vec<(usize, usize)> = parent.iter().enumerate().filter_map(|(c, p)| p.map(|p| (c, p))).collect();
    let edges = EdgeSet::from_pairs(scheme.tag(), vocab.len(), pairs, true)?;
    Ok(TreeHierarchy { graph: KnowledgeGraph::new(vocab, vec![edges])?, parent, root, scheme })
}

/// Within-visit co-occurrence edges `src_type -> dst_type` per configured
/// pair, tagged `co_<src><dst>`, with incoming weights normalized to one.
/// Visits index into `vocab`.
pub fn build_cooccurrence(
    visits: &[EncodedVisit],
    vocab: &Vocabulary,
    pairs: &[(ConceptType, ConceptType)],
) -> Result<Vec<EdgeSet>> {
    if visits.is_empty() {
        return invalid("co-occurrence needs a non-empty training split");
    }
    let mut out = Vec::with_capacity(pairs.len());
    for &(s, t) in pairs {
        let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for v in visits {
            let src: BTreeSet<usize> = v.concepts(s).into_iter().collect();
            let dst: BTreeSet<usize> = v.concepts(t).into_iter().collect();
            for &a in &src {
                for &b in &dst {
                    if a != b {
                        *counts.entry((a, b)).or_insert(0.0) += 1.0;
                    }
                }
            }
        }
        let tag = format!("co_{}{}", s.tag(), t.tag());
        let mut e = EdgeSet::weighted(tag, vocab.len(), counts.into_iter().map(|((a, b), c)| (a, b, c)))?;
        e.normalize_incoming();
        out.push(e);
    }
    Ok(out)
}

/// Keeps the `ceil(keep_fraction * origin_node_count)` most frequent nodes
/// (token counts over `visits`, ties to the lower index) and the edges
/// between them. Survivors keep their relative order. Returns the pruned
/// graph and the old-to-new index map.
pub fn prune_by_frequency(
    graph: &KnowledgeGraph,
    visits: &[EncodedVisit],
    keep_fraction: f64,
) -> Result<(KnowledgeGraph, Vec<Option<usize>>)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return invalid(format!("keep_fraction {keep_fraction} outside (0, 1]"));
    }
    let n = graph.n_nodes();
    let mut freq = vec![0usize; n];
    for v in visits {
        for ty in ConceptType::OBSERVED {
            for c in v.concepts(ty) {
                if c < n {
                    freq[c] += 1;
                }
            }
        }
    }
    let keep = ((keep_fraction * graph.origin_node_count as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();

    let mut map = vec![None; n];
    let mut vocab = Vocabulary::new();
    for (new, &old) in kept.iter().enumerate() {
        map[old] = Some(new);
        vocab.push(graph.vocab.id(old), graph.vocab.ty(old))?;
    }
    let mut edge_sets = Vec::with_capacity(graph.edge_sets.len());
    for e in &graph.edge_sets {
        let mut r = e.remap(&map, keep)?;
        r.normalize_incoming();
        edge_sets.push(r);
    }
    let mut pruned = KnowledgeGraph::new(vocab, edge_sets)?;
    pruned.origin_node_count = graph.origin_node_count;
    Ok((pruned, map))
}

/// Nodes within `k` undirected hops of `node`, including it.
pub fn khop_neighborhood(graph: &KnowledgeGraph, node: usize, k: usize) -> Result<BTreeSet<usize>> {
    khop_with(&graph.undirected_neighbors(), node, k)
}

pub(crate) fn khop_with(adj: &[Vec<usize>], node: usize, k: usize) -> Result<BTreeSet<usize>> {
    if node >= adj.len() {
        return invalid(format!("node {node} outside {} nodes", adj.len()));
    }
    let mut seen = BTreeSet::from([node]);
    let mut queue = VecDeque::from([(node, 0)]);
    while let Some((u, d)) = queue.pop_front() {
        if d == k {
            continue;
        }
        for &v in &adj[u] {
            if seen.insert(v) {
                queue.push_back((v, d + 1));
            }
        }
    }
    Ok(seen)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub degree_mean: f64,
    pub degree_std: f64,
    /// Fraction of observed-type vocabulary concepts appearing in each split.
    pub coverage: BTreeMap<String, f64>,
    /// Fraction of each split's concepts never seen in the `train` split.
    pub unseen_in_train: BTreeMap<String, f64>,
}

pub fn graph_stats(graph: &KnowledgeGraph, splits: &[(&str, &[EncodedVisit])]) -> GraphStats {
    let adj = graph.undirected_neighbors();
    let n = graph.n_nodes();
    let degrees: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = degrees.iter().sum::<f64>() / n as f64;
        let var = degrees.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let observed: BTreeSet<usize> =
        (0..n).filter(|&i| graph.vocab.ty(i) != ConceptType::Internal).collect();
    let concepts_of = |visits: &[EncodedVisit]| -> BTreeSet<usize> {
        visits
            .iter()
            .flat_map(|v| ConceptType::OBSERVED.into_iter().flat_map(|t| v.concepts(t)))
            .filter(|c| observed.contains(c))
            .collect()
    };
    let train = splits.iter().find(|(name, _)| *name == "train").map(|(_, v)| concepts_of(v));
    let mut coverage = BTreeMap::new();
    let mut unseen = BTreeMap::new();
    for (name, visits) in splits {
        let s = concepts_of(visits);
        let cov = if observed.is_empty() { 0.0 } else { s.len() as f64 / observed.len() as f64 };
        coverage.insert(name.to_string(), cov);
        if let Some(train) = &train {
            let frac = if s.is_empty() { 0.0 } else { s.difference(train).count() as f64 / s.len() as f64 };
            unseen.insert(name.to_string(), frac);
        }
    }
    GraphStats {
        nodes: n,
        edges: graph.undirected_edges().len(),
        degree_mean: mean,
        degree_std: std,
        coverage,
        unseen_in_train: unseen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(ids: &[&str]) -> Vocabulary {
        Vocabulary::from_entries(ids.iter().map(|&i| (i, ConceptType::N))).unwrap()
    }

    #[test]
    fn single_edge_is_symmetrized() {
        let v = vocab(&["a", "b", "c"]);
        let (e, report) = parse_edges("a\tb\trel\n", &v, true, "t").unwrap();
        assert!(e.has_edge(0, 1) && e.has_edge(1, 0));
        assert_eq!(e.num_edges(), 2);
        assert_eq!(report.kept, 1);
    }

    #[test]
    fn unknown_endpoint_dropped_or_rejected() {
        let v = vocab(&["a", "b"]);
        let (e, report) = parse_edges("a\tb\tx\na\tzzz\tx\n", &v, false, "t").unwrap();
        assert_eq!(report.dropped_unknown, 1);
        assert_eq!(e.num_edges(), 2);
        let err = parse_edges("a\tb\tx\na\tzzz\tx\n", &v, true, "t").unwrap_err();
        assert!(matches!(err, Error::UnknownConcept { line: 2, .. }));
    }

    #[test]
    fn duplicates_and_self_loops_removed() {
        let v = vocab(&["a", "b"]);
        let (e, report) = parse_edges("a\tb\tx\nb\ta\ty\na\tb\tx\na\ta\tx\n", &v, true, "t").unwrap();
        assert_eq!(e.num_edges(), 2);
        assert_eq!(report.duplicates, 2);
        assert_eq!(report.dropped_self_loops, 1);
    }

    #[test]
    fn malformed_line_reports_row() {
        let v = vocab(&["a", "b"]);
        let err = parse_edges("a\tb\tx\nonly-one-column\n", &v, true, "edges.tsv").unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }));
        assert!(parse_vocab("a\td\nb\tq\n", "v").is_err());
        assert!(parse_vocab("a\td\na\tm\n", "v").is_err());
    }

    #[test]
    fn sibling_codes_share_parent() {
        let t = build_tree_hierarchy(&["428.0".into(), "428.1".into()], TreeScheme::IcdLike).unwrap();
        let p = t.graph.vocab.get("428").unwrap();
        assert_eq!(t.parent[0], Some(p));
        assert_eq!(t.parent[1], Some(p));
        assert_eq!(t.graph.vocab.ty(p), ConceptType::Internal);
        assert_eq!(t.leaves(), vec![0, 1]);
    }

    #[test]
    fn single_code_is_a_path() {
        let t = build_tree_hierarchy(&["A10BA02".into()], TreeScheme::AtcLike).unwrap();
        let names: Vec<&str> = t.graph.vocab.iter().map(|(id, _)| id).collect();
        assert_eq!(names, ["A10BA02", "atc:root", "A10BA", "A10B", "A10", "A"]);
        let mut node = 0;
        let mut depth = 0;
        while let Some(p) = t.parent[node] {
            node = p;
            depth += 1;
        }
        assert_eq!((node, depth), (t.root, 5));
        assert!(t.graph.undirected_neighbors().iter().all(|a| a.len() <= 2));
    }

    #[test]
    fn tree_rejects_bad_input() {
        assert!(build_tree_hierarchy(&[], TreeScheme::IcdLike).is_err());
        assert!(build_tree_hierarchy(&["4-28".into()], TreeScheme::IcdLike).is_err());
    }

    #[test]
    fn cooccurrence_normalizes_incoming() {
        let v = Vocabulary::from_entries([("a", ConceptType::D), ("b", ConceptType::D), ("c", ConceptType::D)]).unwrap();
        let visits = vec![
            EncodedVisit::from_codes(vec![0, 2], vec![]),
            EncodedVisit::from_codes(vec![0, 2], vec![]),
            EncodedVisit::from_codes(vec![1, 2], vec![]),
            EncodedVisit::from_codes(vec![1, 2], vec![]),
        ];
        let e = &build_cooccurrence(&visits, &v, &[(ConceptType::D, ConceptType::D)]).unwrap()[0];
        assert_eq!(e.incoming(2), &[0, 1]);
        assert_eq!(e.incoming_weights(2).unwrap(), &[0.5, 0.5]);
        assert!(!e.has_edge(0, 1));
        assert!(build_cooccurrence(&[], &v, &[]).is_err());
    }

    #[test]
    fn prune_keeps_most_frequent() {
        let v = vocab(&["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]);
        let g = KnowledgeGraph::new(v, vec![EdgeSet::from_pairs("umls", 10, (0..9).map(|i| (i, i + 1)), true).unwrap()])
            .unwrap();
        // Concept i appears (i * 7 % 10) + 1 times, all distinct.
        let visits: Vec<EncodedVisit> = (0..10)
            .flat_map(|i| std::iter::repeat_n(i, i * 7 % 10 + 1))
            .map(|i| EncodedVisit::from_text(vec![i]))
            .collect();
        let (p, map) = prune_by_frequency(&g, &visits, 0.5).unwrap();
        let kept: Vec<usize> = (0..10).filter(|&i| map[i].is_some()).collect();
        let mut expected: Vec<usize> = (0..10).collect();
        expected.sort_by_key(|&i| std::cmp::Reverse(i * 7 % 10));
        let mut expected = expected[..5].to_vec();
        expected.sort_unstable();
        assert_eq!(kept, expected);
        assert_eq!(p.n_nodes(), 5);

        let (same, ident) = prune_by_frequency(&g, &visits, 1.0).unwrap();
        assert_eq!(same, g);
        assert!(ident.iter().enumerate().all(|(i, m)| *m == Some(i)));
        assert!(prune_by_frequency(&g, &visits, 0.0).is_err());
    }

    #[test]
    fn khop_examples() {
        let g = KnowledgeGraph::new(vocab(&["a", "b", "c"]), vec![EdgeSet::from_pairs("umls", 3, [(0, 1), (1, 2)], true).unwrap()])
            .unwrap();
        assert_eq!(khop_neighborhood(&g, 0, 0).unwrap(), BTreeSet::from([0]));
        assert_eq!(khop_neighborhood(&g, 0, 1).unwrap(), BTreeSet::from([0, 1]));
        assert!(khop_neighborhood(&g, 3, 1).is_err());
    }

    #[test]
    fn triangle_stats() {
        let g = KnowledgeGraph::new(
            vocab(&["a", "b", "c"]),
            vec![EdgeSet::from_pairs("umls", 3, [(0, 1), (1, 2), (2, 0)], true).unwrap()],
        )
        .unwrap();
        let all = vec![EncodedVisit::from_text(vec![0, 1, 2])];
        let s = graph_stats(&g, &[("train", &all)]);
        assert_eq!((s.nodes, s.edges, s.degree_mean, s.degree_std), (3, 3, 2.0, 0.0));
        assert_eq!(s.coverage["train"], 1.0);
        assert_eq!(s.unseen_in_train["train"], 0.0);
    }
}
