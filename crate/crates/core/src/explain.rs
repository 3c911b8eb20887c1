//! Attention-based interpretability, edge-mask explanations of concept
//! embeddings, masking-robustness curves and subgroup evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::rc::Rc;

use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::downstream::{evaluate_scores, Sample, TaskSpec};
use crate::ehr::{has_code_prefix, EncodedPatient, EncodedVisit, HEART_FAILURE_PREFIX};
use crate::embed::ConceptEmbedder;
use crate::encoder::{Token, VisitRepr, VisitTokens};
use crate::error::{invalid, Error, Result};
use crate::kgraph::{khop_neighborhood, ConceptType, Vocabulary};
use crate::metrics::{self, MetricReport, SubgroupReport};
use crate::pretrain::{head_logits, LossWeights, PretrainModel, DIRECTIONS};

/// Encodes clean visits against a precomputed concept table.
pub fn encode_visits(model: &PretrainModel, store: &ParamStore, table: &Tensor, tokens: &[VisitTokens]) -> Result<(Graph, Vec<VisitRepr>)> {
    let mut g = Graph::new();
    let t = g.constant(table.clone())?;
    let vars = model.encoder.bind(&mut g, store)?;
    let ext = vars.extend_table(&mut g, t)?;
    let mut reprs = Vec::with_capacity(tokens.len());
    for tk in tokens {
        reprs.push(vars.encode_visit(&mut g, ext, tk, model.config.include_text)?);
    }
    Ok((g, reprs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub mean: f64,
    /// Mean entropy per concept type tag.
    pub per_type: BTreeMap<String, f64>,
    /// Number of attention distributions averaged.
    pub n_sets: usize,
}

impl EntropyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("type,mean_entropy\n");
        for (t, v) in &self.per_type {
            let _ = writeln!(s, "{t},{v}");
        }
        let _ = writeln!(s, "all,{}", self.mean);
        s
    }
}

/// Mean natural-log entropy of CLS attention per visit and type. Empty
/// sets are skipped.
pub fn attention_entropy_report(model: &PretrainModel, store: &ParamStore, visits: &[EncodedVisit]) -> Result<EntropyReport> {
    let table = model.embedder.compute_table(store)?;
    let (mut sum, mut n) = (0.0, 0usize);
    let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for chunk in visits.chunks(64) {
        let tokens: Vec<VisitTokens> = chunk.iter().map(VisitTokens::from_visit).collect();
        let (_, reprs) = encode_visits(model, store, &table, &tokens)?;
        for r in &reprs {
            for ty in ConceptType::OBSERVED {
                let Some(e) = r.get(ty) else { continue };
                if e.attention.is_empty() {
                    continue;
                }
                let h = metrics::entropy(&e.attention);
                sum += h;
                n += 1;
                let slot = per.entry(ty.tag().to_string()).or_default();
                slot.0 += h;
                slot.1 += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Missing("no nonempty concept sets to measure".into()));
    }
    Ok(EntropyReport { mean: sum / n as f64, per_type: per.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(), n_sets: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConcept {
    pub concept: String,
    pub ty: String,
    pub category: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub ty: String,
    pub category: String,
    pub members: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRanking {
    /// Sorted by score within each type, types in d, m, n order.
    pub concepts: Vec<RankedConcept>,
    pub categories: Vec<CategoryScore>,
    /// Note-type shares among the top text tokens.
    pub note_types: BTreeMap<String, f64>,
}

pub const CATEGORY_PERCENTILE: f64 = 90.0;
pub const TOP_TEXT_TOKENS: usize = 8;

/// Group of a code: ICD category before the dot, ATC first three
/// characters (anatomical main group plus therapeutic subgroup).
pub fn code_category(code: &str, ty: ConceptType) -> String {
    match ty {
        ConceptType::D => code.split('.').next().unwrap_or(code).to_string(),
        ConceptType::M => code.chars().take(3).collect(),
        _ => code.to_string(),
    }
}

/// Ranks a visit's concepts by CLS attention and aggregates per category.
pub fn rank_concepts(model: &PretrainModel, store: &ParamStore, table: &Tensor, visit: &EncodedVisit) -> Result<ConceptRanking> {
    let vocab: &Vocabulary = &model.embedder.vocab;
    let (_, reprs) = encode_visits(model, store, table, &[VisitTokens::from_visit(visit)])?;
    let repr = &reprs[0];
    let mut concepts = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut note_types = BTreeMap::new();
    for ty in ConceptType::OBSERVED {
        let Some(enc) = repr.get(ty) else { continue };
        let ids = visit.concepts(ty);
        let mut rows: Vec<(usize, f64)> = enc.attention.iter().copied().enumerate().collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, score) in &rows {
            let id = vocab.id(ids[i]);
            let category = if ty == ConceptType::N { visit.n[i].note_type.clone() } else { code_category(id, ty) };
            groups.entry((ty.tag().to_string(), category.clone())).or_default().push(score);
            concepts.push(RankedConcept { concept: id.to_string(), ty: ty.tag().to_string(), category, score });
        }
        if ty == ConceptType::N && !rows.is_empty() {
            let top = &rows[..rows.len().min(TOP_TEXT_TOKENS)];
            for &(i, _) in top {
                *note_types.entry(visit.n[i].note_type.clone()).or_insert(0.0) += 1.0 / top.len() as f64;
            }
        }
    }
    let categories = groups
        .into_iter()
        .map(|((ty, category), scores)| {
            Ok(CategoryScore { ty, category, members: scores.len(), score: metrics::percentile(&scores, CATEGORY_PERCENTILE)? })
        })
        .collect::<Result<_>>()?;
    Ok(ConceptRanking { concepts, categories, note_types })
}

/// Edge-mask optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Mask size penalty.
    pub alpha: f64,
    /// Mask entropy penalty.
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { alpha: 0.005, beta: 0.1, steps: 200, lr: 0.01, init_std: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationGraph {
    pub seed: String,
    pub hops: usize,
    pub threshold: f64,
    /// Nodes of the hop neighborhood.
    pub n_nodes: usize,
    /// Kept edges by descending weight.
    pub edges: Vec<ExplainedEdge>,
    pub final_loss: f64,
}

impl ExplanationGraph {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("a\tb\tweight\n");
        for e in &self.edges {
            let _ = writeln!(s, "{}\t{}\t{}", e.a, e.b, e.weight);
        }
        s
    }
}

/// Undirected edges of a seed's hop subgraph inside one embedder tower.
#[derive(Debug, Clone)]
pub struct EdgeSubgraph {
    pub tower: usize,
    pub node: usize,
    pub nodes: BTreeSet<usize>,
    /// `(lo, hi)` node pairs with both ends in `nodes`.
    pub edges: Vec<(usize, usize)>,
    /// Per edge set, per directed edge: index into `edges`, or `None`.
    slots: Vec<Vec<Option<usize>>>,
}

impl EdgeSubgraph {
    pub fn new(embedder: &ConceptEmbedder, concept: usize, hops: usize) -> Result<Self> {
        if hops > embedder.config.depth {
            return invalid(format!("{hops} hops exceed GNN depth {}", embedder.config.depth));
        }
        let (tower, node) = embedder.locate(concept).ok_or_else(|| Error::Invalid(format!("concept index {concept} outside the embedder")))?;
        let t = embedder.towers.get(tower).ok_or_else(|| Error::Invalid("embedder has no graph".into()))?;
        let nodes = khop_neighborhood(&t.graph, node, hops)?;
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut slots = Vec::with_capacity(t.graph.edge_sets.len());
        for set in &t.graph.edge_sets {
            let mut s = Vec::with_capacity(set.num_edges());
            for (u, v) in set.edges() {
                if u != v && nodes.contains(&u) && nodes.contains(&v) {
                    let key = (u.min(v), u.max(v));
                    let n = index.len();
                    s.push(Some(*index.entry(key).or_insert(n)));
                } else {
                    s.push(None);
                }
            }
            slots.push(s);
        }
        let mut edges = vec![(0, 0); index.len()];
        for (k, i) in index {
            edges[i] = k;
        }
        Ok(Self { tower, node, nodes, edges, slots })
    }

    /// Builds per-set multiplicative mask columns from an `E x 1` mask over
    /// the subgraph edges. Edges outside the subgraph keep weight 1.
    fn columns(&self, g: &mut Graph, mask: Var) -> Result<Vec<Option<Var>>> {
        let one = g.constant(Tensor::scalar(1.0))?;
        let padded = g.concat_rows(&[mask, one])?;
        let pad = self.edges.len();
        let mut out = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            if s.iter().all(Option::is_none) {
                out.push(None);
                continue;
            }
            let idx: Rc<[usize]> = s.iter().map(|o| o.unwrap_or(pad)).collect();
            out.push(Some(g.gather_rows(padded, idx)?));
        }
        Ok(out)
    }

    /// Seed embedding with subgraph edges scaled by `mask` (`E x 1`).
    pub fn masked_embedding(&self, g: &mut Graph, embedder: &ConceptEmbedder, store: &ParamStore, mask: Var) -> Result<Var> {
        let cols = self.columns(g, mask)?;
        let table = embedder.tower_table(g, store, self.tower, Some(&cols))?;
        Ok(g.gather_rows(table, Rc::from([self.node]))?)
    }
}

/// Optimizes a soft mask over the seed's hop-subgraph edges so that the
/// masked embedding stays close to the full one, then keeps edges whose
/// mask reaches `threshold`.
pub fn gnn_explain(
    embedder: &ConceptEmbedder,
    store: &ParamStore,
    concept: usize,
    hops: usize,
    threshold: f64,
    cfg: &ExplainConfig,
) -> Result<ExplanationGraph> {
    let seed_id = embedder.vocab.id(concept).to_string();
    let sub = EdgeSubgraph::new(embedder, concept, hops)?;
    let mut out = ExplanationGraph { seed: seed_id, hops, threshold, n_nodes: sub.nodes.len(), edges: Vec::new(), final_loss: 0.0 };
    if sub.edges.is_empty() {
        return Ok(out);
    }
    let mut frozen = store.subset(crate::embed::PREFIX);
    crate::embed::freeze(&mut frozen)?;
    let target = {
        let mut g = Graph::new();
        let t = embedder.tower_table(&mut g, &frozen, sub.tower, None)?;
        g.value(t).row(sub.node).to_vec()
    };
    let e = sub.edges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|err| Error::Config(err.to_string()))?;
    let mut params = ParamStore::new();
    params.insert("explain.logits", Tensor::column_vector((0..e).map(|_| normal.sample(&mut rng)).collect()));
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let target_t = Tensor::row_vector(target);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let mut all = frozen.clone();
        all.merge(&params);
        let z = g.param(&all, "explain.logits")?;
        let m = g.sigmoid(z)?;
        let emb = sub.masked_embedding(&mut g, embedder, &all, m)?;
        let tgt = g.constant(target_t.clone())?;
        let d = g.sub(emb, tgt)?;
        let d2 = g.mul(d, d)?;
        let fit = g.sum(d2)?;
        let size = g.sum(m)?;
        let size = g.scale(size, cfg.alpha)?;
        // Bernoulli entropy of sigmoid(z): m softplus(-z) + (1-m) softplus(z).
        let nz = g.scale(z, -1.0)?;
        let sp_neg = g.softplus(nz)?;
        let sp_pos = g.softplus(z)?;
        let a = g.mul(m, sp_neg)?;
        let b = g.mul(m, sp_pos)?;
        let b = g.sub(sp_pos, b)?;
        let ent = g.add(a, b)?;
        let ent = g.mean(ent)?;
        let ent = g.scale(ent, cfg.beta)?;
        let reg = g.add(size, ent)?;
        let loss = g.add(fit, reg)?;
        out.final_loss = g.value(loss).item()?;
        if !out.final_loss.is_finite() {
            return Err(Error::Divergence(format!("explanation loss {} at step {step}", out.final_loss)));
        }
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(loss)?;
        adam.step(&mut params, &grads);
    }
    let z = params.get("explain.logits").expect("mask logits");
    let tower = &embedder.towers[sub.tower];
    let name = |node: usize| tower.graph.vocab.id(node).to_string();
    let mut kept: Vec<(f64, usize)> =
        z.data().iter().map(|&v| numcore::sigmoid(v)).enumerate().filter(|&(_, w)| w >= threshold).map(|(i, w)| (w, i)).collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    out.edges = kept.into_iter().map(|(w, i)| ExplainedEdge { a: name(sub.edges[i].0), b: name(sub.edges[i].1), weight: w }).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Diseases,
    Medications,
    Text,
    /// Diseases and medications.
    Codes,
    All,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "d" | "diseases" => Ok(Self::Diseases),
            "m" | "medications" => Ok(Self::Medications),
            "n" | "text" => Ok(Self::Text),
            "codes" => Ok(Self::Codes),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }

    pub fn types(self) -> &'static [ConceptType] {
        match self {
            Self::Diseases => &[ConceptType::D],
            Self::Medications => &[ConceptType::M],
            Self::Text => &[ConceptType::N],
            Self::Codes => &[ConceptType::D, ConceptType::M],
            Self::All => &ConceptType::OBSERVED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    Random,
    /// Highest CLS attention first.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub metric: f64,
}

pub fn curve_csv(rows: &[(String, Vec<CurvePoint>)]) -> String {
    let mut s = String::from("series,fraction,metric\n");
    for (name, pts) in rows {
        for p in pts {
            let _ = writeln!(s, "{name},{},{}", p.fraction, p.metric);
        }
    }
    s
}

/// Mean sample-averaged AuPRC of the reconstruction heads with nonzero
/// weight, on the given (possibly masked) inputs against clean targets.
pub fn reconstruction_metric(model: &PretrainModel, store: &ParamStore, table: &Tensor, visits: &[EncodedVisit], tokens: &[VisitTokens], w: &LossWeights) -> Result<f64> {
    if visits.len() != tokens.len() || visits.is_empty() {
        return invalid("reconstruction metric needs one token set per visit");
    }
    let weights = w.recon();
    let mut scores: [Vec<Vec<f64>>; 4] = Default::default();
    for tc in tokens.chunks(64) {
        let mut g = Graph::new();
        let t = g.constant(table.clone())?;
        let vars = model.encoder.bind(&mut g, store)?;
        let ext = vars.extend_table(&mut g, t)?;
        let heads = model.bind_heads(&mut g, store)?;
        let (_, batch) = model.encode_batch(&mut g, &vars, ext, tc)?;
        for dir in 0..4 {
            if weights[dir] == 0.0 {
                continue;
            }
            let z = head_logits(&mut g, &heads, &batch, dir)?;
            let z = g.value(z);
            scores[dir].extend((0..z.rows()).map(|r| z.row(r).to_vec()));
        }
    }
    let refs: Vec<&EncodedVisit> = visits.iter().collect();
    let targets = model.targets(&refs)?;
    let (mut sum, mut n) = (0.0, 0);
    for (dir, &(_, tgt)) in DIRECTIONS.iter().enumerate() {
        if weights[dir] == 0.0 {
            continue;
        }
        let t = if tgt == ConceptType::D { &targets.d } else { &targets.m };
        let labels: Vec<Vec<bool>> = (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v > 0.5).collect()).collect();
        sum += metrics::auprc_sample_avg(&scores[dir], &labels)?.value;
        n += 1;
    }
    if n == 0 {
        return invalid("every reconstruction head has weight zero");
    }
    Ok(sum / n as f64)
}

/// Replaces `round(f * q)` tokens of each selected type set with MASK.
pub fn mask_tokens(
    tokens: &VisitTokens,
    attention: Option<&VisitRepr>,
    modality: Modality,
    strategy: MaskStrategy,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VisitTokens> {
    let mut out = tokens.clone();
    for &ty in modality.types() {
        let q = tokens.of_type(ty).len();
        let count = (fraction * q as f64).round() as usize;
        let mut order: Vec<usize> = (0..q).collect();
        match strategy {
            MaskStrategy::Random => order.shuffle(rng),
            MaskStrategy::Attention => {
                let att = attention.and_then(|r| r.get(ty)).map(|e| e.attention.clone()).ok_or_else(|| Error::Invalid("attention ordering needs clean encodings".into()))?;
                order.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
            }
        }
        let slot = out.of_type_mut(ty);
        for &i in &order[..count.min(q)] {
            slot[i] = Token::Mask;
        }
    }
    Ok(out)
}

/// Reconstruction metric as increasing fractions of one modality are
/// masked.
#[allow(clippy::too_many_arguments)]
pub fn masking_robustness_curve(
    model: &PretrainModel,
    store: &ParamStore,
    visits: &[EncodedVisit],
    w: &LossWeights,
    modality: Modality,
    strategy: MaskStrategy,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if fractions.windows(2).any(|p| p[1] < p[0]) || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return invalid("fractions must ascend within [0,1]");
    }
    if modality.types().contains(&ConceptType::N) && !model.config.include_text && modality == Modality::Text {
        return Err(Error::Config("text masking on a model without text".into()));
    }
    let table = model.embedder.compute_table(store)?;
    let clean: Vec<VisitTokens> = visits.iter().map(VisitTokens::from_visit).collect();
    let attention = match strategy {
        MaskStrategy::Attention => {
            let mut all = Vec::with_capacity(clean.len());
            for c in clean.chunks(64) {
                all.extend(encode_visits(model, store, &table, c)?.1);
            }
            Some(all)
        }
        MaskStrategy::Random => None,
    };
    let mut curve = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masked = clean
            .iter()
            .enumerate()
            .map(|(i, t)| mask_tokens(t, attention.as_ref().map(|a| &a[i]), modality, strategy, f, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        curve.push(CurvePoint { fraction: f, metric: reconstruction_metric(model, store, &table, visits, &masked, w)? });
    }
    Ok(curve)
}

/// Whether the patient had a heart-failure code in the sample's history.
pub fn heart_failure_history(sample: &Sample, patients: &[EncodedPatient], vocab: &Vocabulary) -> bool {
    patients[sample.patient].visits[..sample.t].iter().any(|v| v.d.iter().any(|&c| has_code_prefix(vocab.id(c), HEART_FAILURE_PREFIX)))
}

fn prevalence(spec: &TaskSpec, samples: &[&Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples.iter().map(|s| s.target_row(spec.label_width).iter().sum::<f64>()).sum();
    total / (samples.len() * spec.label_width) as f64
}

/// Overall metrics plus one breakdown for `member` and one for its
/// complement. Subgroups where metrics are undefined carry a note.
pub fn subgroup_eval(spec: &TaskSpec, scores: &[Vec<f64>], samples: &[Sample], threshold: f64, name: &str, member: &[bool]) -> Result<MetricReport> {
    if member.len() != samples.len() {
        return invalid("subgroup predicate must cover every sample");
    }
    let mut report = evaluate_scores(spec, scores, samples, threshold)?;
    for (label, want) in [(name.to_string(), true), (format!("not {name}"), false)] {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| member[i] == want).collect();
        let sub: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let refs: Vec<&Sample> = sub.iter().collect();
        let sub_scores: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
        let mut entry = SubgroupReport { name: label, n_samples: sub.len(), prevalence: prevalence(spec, &refs), metrics: BTreeMap::new(), note: None };
        if sub.is_empty() {
            entry.note = Some("empty subgroup".into());
        } else {
            match evaluate_scores(spec, &sub_scores, &sub, threshold) {
                Ok(r) => entry.metrics = r.metrics,
                Err(e) => entry.note = Some(e.to_string()),
            }
        }
        report.subgroups.push(entry);
    }
    Ok(report)
}
