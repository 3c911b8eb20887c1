//! Masked auto-encoder pretraining over single visits.
//!
//! Four directional decoders reconstruct the disease and medication sets of
//! a visit from its per-type CLS representations, and two sum decoders do
//! the same from the unweighted sum of token outputs.

use std::fmt::Write as _;

use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{multihot, EncodedVisit};
use crate::embed::ConceptEmbedder;
use crate::encoder::{corrupt_tokens, CorruptionConfig, EncoderVars, VisitEncoder, VisitRepr, VisitTokens};
use crate::error::{invalid, Error, Result};
use crate::init;
use crate::kgraph::ConceptType;

pub const PREFIX: &str = "pre.";

/// Directional decoders in the order `d→d, m→d, m→m, d→m`.
pub const DIRECTIONS: [(ConceptType, ConceptType); 4] = [
    (ConceptType::D, ConceptType::D),
    (ConceptType::M, ConceptType::D),
    (ConceptType::M, ConceptType::M),
    (ConceptType::D, ConceptType::M),
];

fn head_name(src: ConceptType, tgt: ConceptType) -> String {
    format!("{PREFIX}{}2{}", src.tag(), tgt.tag())
}

fn sum_head_name(ty: ConceptType) -> String {
    format!("{PREFIX}sum_{}", ty.tag())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dd: f64,
    pub md: f64,
    pub mm: f64,
    pub dm: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { dd: 1.0, md: 1.0, mm: 1.0, dm: 1.0, lambda: 0.25 }
    }
}

impl LossWeights {
    /// Only disease targets are reconstructed.
    pub fn disease_focused() -> Self {
        Self { mm: 0.0, dm: 0.0, ..Self::default() }
    }

    pub fn recon(&self) -> [f64; 4] {
        [self.dd, self.md, self.mm, self.dm]
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.dd, self.md, self.mm, self.dm, self.lambda];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub weights: LossWeights,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            min_delta: 1e-4,
            weights: LossWeights::default(),
            corruption: CorruptionConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.corruption.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr.is_finite() && self.lr >= 0.0) || self.batch_size == 0 || !(self.min_delta >= 0.0) {
            return Err(Error::Config("invalid pretraining optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub include_text: bool,
    pub decoder_hidden: usize,
}

/// Embedder, visit encoder and pretraining decoders.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub embedder: ConceptEmbedder,
    pub encoder: VisitEncoder,
    pub config: ModelConfig,
}

/// Two-layer decoder bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    pub fn bind(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Self> {
        let mut p = |s: &str| g.param(store, &format!("{name}.{s}"));
        Ok(Self { w1: p("w1")?, b1: p("b1")?, w2: p("w2")?, b2: p("b2")? })
    }

    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: (usize, usize, usize)) {
        let (i, h, o) = dims;
        store.insert(format!("{name}.w1"), init::xavier(rng, i, h));
        store.insert(format!("{name}.b1"), Tensor::zeros(1, h));
        store.insert(format!("{name}.w2"), init::xavier(rng, h, o));
        store.insert(format!("{name}.b2"), Tensor::zeros(1, o));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w1, self.b1)?;
        let h = g.relu(h)?;
        Ok(g.linear(h, self.w2, self.b2)?)
    }
}

/// Decoders bound to a tape; index order follows [`DIRECTIONS`].
pub struct HeadVars {
    pub directional: [Mlp; 4],
    pub sum_d: Mlp,
    pub sum_m: Mlp,
}

/// Batch-stacked visit representations, `B x k` each.
#[derive(Debug, Clone, Copy)]
pub struct BatchReprs {
    pub vd: Var,
    pub vm: Var,
    pub vn: Option<Var>,
    pub sum_d: Var,
    pub sum_m: Var,
}

/// Multi-hot reconstruction targets, `B x |C(d)|` and `B x |C(m)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub d: Tensor,
    pub m: Tensor,
}

impl Targets {
    fn of(&self, ty: ConceptType) -> &Tensor {
        if ty == ConceptType::D {
            &self.d
        } else {
            &self.m
        }
    }
}

fn decoder_input(g: &mut Graph, r: &BatchReprs, src: ConceptType) -> Result<Var> {
    let v = if src == ConceptType::D { r.vd } else { r.vm };
    match r.vn {
        Some(n) => Ok(g.concat_cols(&[v, n])?),
        None => Ok(v),
    }
}

/// Logits of one directional decoder, `B x |C(tgt)|`.
pub fn head_logits(g: &mut Graph, heads: &HeadVars, r: &BatchReprs, dir: usize) -> Result<Var> {
    let x = decoder_input(g, r, DIRECTIONS[dir].0)?;
    heads.directional[dir].forward(g, x)
}

/// Weighted sum of the directional BCE terms. Terms with weight exactly 0
/// or an empty target vocabulary are skipped; their values come back as
/// `None`.
pub fn recon_loss(g: &mut Graph, heads: &HeadVars, r: &BatchReprs, t: &Targets, w: &LossWeights) -> Result<(Var, [Option<f64>; 4])> {
    let mut total: Option<Var> = None;
    let mut terms = [None; 4];
    for (i, (&wi, &(_, tgt))) in w.recon().iter().zip(&DIRECTIONS).enumerate() {
        let target = t.of(tgt);
        if wi == 0.0 || target.numel() == 0 {
            continue;
        }
        let logits = head_logits(g, heads, r, i)?;
        if g.shape(logits) != (target.rows(), target.cols()) {
            return invalid(format!("decoder {i} emits {:?}, targets are {:?}", g.shape(logits), target.shape()));
        }
        let bce = g.bce_with_logits(logits, target)?;
        terms[i] = Some(g.value(bce).item()?);
        let term = if wi == 1.0 { bce } else { g.scale(bce, wi)? };
        total = Some(match total {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0))?,
    };
    Ok((total, terms))
}

/// Sum of the two sum-decoder BCE terms.
pub fn sum_loss(g: &mut Graph, heads: &HeadVars, r: &BatchReprs, t: &Targets) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (head, x, target) in [(&heads.sum_d, r.sum_d, &t.d), (&heads.sum_m, r.sum_m, &t.m)] {
        if target.numel() == 0 {
            continue;
        }
        let logits = head.forward(g, x)?;
        let bce = g.bce_with_logits(logits, target)?;
        total = Some(match total {
            Some(a) => g.add(a, bce)?,
            None => bce,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0))?),
    }
}

/// `recon + lambda * sum`; with `lambda = 0` this is `recon` itself.
pub fn total_loss(g: &mut Graph, recon: Var, sum: Option<Var>, lambda: f64) -> Result<Var> {
    match sum {
        Some(s) if lambda != 0.0 => {
            let s = g.scale(s, lambda)?;
            Ok(g.add(recon, s)?)
        }
        _ => Ok(recon),
    }
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub sum: Option<f64>,
    pub terms: [Option<f64>; 4],
}

/// Everything a forward pass over a batch exposes.
pub struct BatchForward {
    pub loss: Var,
    pub values: LossValues,
    pub reprs: Vec<VisitRepr>,
    pub batch: BatchReprs,
    pub heads: HeadVars,
}

impl PretrainModel {
    pub fn new(embedder: ConceptEmbedder, encoder: VisitEncoder, config: ModelConfig) -> Result<Self> {
        if embedder.k() != encoder.config.k {
            return Err(Error::Config(format!("embedding width {} != encoder width {}", embedder.k(), encoder.config.k)));
        }
        if config.include_text && embedder.vocab.of_type(ConceptType::N).is_empty() {
            return Err(Error::Config("text is included but the embedder has no text concepts".into()));
        }
        if config.decoder_hidden == 0 {
            return Err(Error::Config("decoder hidden width must be positive".into()));
        }
        Ok(Self { embedder, encoder, config })
    }

    pub fn k(&self) -> usize {
        self.encoder.config.k
    }

    pub fn n_targets(&self, ty: ConceptType) -> usize {
        self.embedder.vocab.of_type(ty).len()
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng, features: Option<Tensor>) -> Result<()> {
        self.embedder.init_params(store, rng, features)?;
        self.encoder.init_params(store, rng);
        let k = self.k();
        let h = self.config.decoder_hidden;
        let input = if self.config.include_text { 2 * k } else { k };
        for (src, tgt) in DIRECTIONS {
            Mlp::init(store, rng, &head_name(src, tgt), (input, h, self.n_targets(tgt)));
        }
        for ty in [ConceptType::D, ConceptType::M] {
            Mlp::init(store, rng, &sum_head_name(ty), (k, h, self.n_targets(ty)));
        }
        Ok(())
    }

    pub fn bind_heads(&self, g: &mut Graph, store: &ParamStore) -> Result<HeadVars> {
        let mut dirs = Vec::with_capacity(4);
        for (src, tgt) in DIRECTIONS {
            dirs.push(Mlp::bind(g, store, &head_name(src, tgt))?);
        }
        Ok(HeadVars {
            directional: [dirs[0], dirs[1], dirs[2], dirs[3]],
            sum_d: Mlp::bind(g, store, &sum_head_name(ConceptType::D))?,
            sum_m: Mlp::bind(g, store, &sum_head_name(ConceptType::M))?,
        })
    }

    /// Encoder vars plus the MASK-extended concept table on `g`.
    pub fn bind_encoder(&self, g: &mut Graph, store: &ParamStore) -> Result<(EncoderVars, Var)> {
        let table = self.embedder.node_table(g, store)?;
        let vars = self.encoder.bind(g, store)?;
        let ext = vars.extend_table(g, table)?;
        Ok((vars, ext))
    }

    pub fn targets(&self, visits: &[&EncodedVisit]) -> Result<Targets> {
        let vocab = &self.embedder.vocab;
        let rows = |ty: ConceptType| -> Result<Tensor> {
            let n = vocab.of_type(ty).len();
            let mut data = Vec::with_capacity(visits.len() * n);
            for v in visits {
                data.extend(multihot(&v.concepts(ty), vocab, ty)?);
            }
            Ok(Tensor::from_matrix(visits.len(), n, data))
        };
        Ok(Targets { d: rows(ConceptType::D)?, m: rows(ConceptType::M)? })
    }

    /// Encodes `tokens` and stacks the per-visit representations.
    pub fn encode_batch(&self, g: &mut Graph, vars: &EncoderVars, ext: Var, tokens: &[VisitTokens]) -> Result<(Vec<VisitRepr>, BatchReprs)> {
        if tokens.is_empty() {
            return invalid("empty batch");
        }
        let mut reprs = Vec::with_capacity(tokens.len());
        let (mut vd, mut vm, mut vn, mut sd, mut sm) = (vec![], vec![], vec![], vec![], vec![]);
        for t in tokens {
            let r = vars.encode_visit(g, ext, t, self.config.include_text)?;
            vd.push(r.d.cls);
            vm.push(r.m.cls);
            if let Some(n) = &r.n {
                vn.push(n.cls);
            }
            sd.push(vars.sum_aggregate(g, &r.d)?);
            sm.push(vars.sum_aggregate(g, &r.m)?);
            reprs.push(r);
        }
        let mut stack = |parts: &[Var]| -> Result<Var> {
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                Ok(g.concat_rows(parts)?)
            }
        };
        let batch = BatchReprs {
            vd: stack(&vd)?,
            vm: stack(&vm)?,
            vn: if vn.is_empty() { None } else { Some(stack(&vn)?) },
            sum_d: stack(&sd)?,
            sum_m: stack(&sm)?,
        };
        Ok((reprs, batch))
    }

    /// Full pretraining forward pass. `tokens` are the (possibly corrupted)
    /// inputs; targets always come from the clean visits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, visits: &[&EncodedVisit], tokens: &[VisitTokens], w: &LossWeights) -> Result<BatchForward> {
        let (vars, ext) = self.bind_encoder(g, store)?;
        let heads = self.bind_heads(g, store)?;
        let (reprs, batch) = self.encode_batch(g, &vars, ext, tokens)?;
        let targets = self.targets(visits)?;
        let (recon, terms) = recon_loss(g, &heads, &batch, &targets, w)?;
        let sum = if w.lambda != 0.0 { Some(sum_loss(g, &heads, &batch, &targets)?) } else { None };
        let loss = total_loss(g, recon, sum, w.lambda)?;
        let values = LossValues {
            total: g.value(loss).item()?,
            recon: g.value(recon).item()?,
            sum: sum.map(|s| g.value(s).item()).transpose()?,
            terms,
        };
        Ok(BatchForward { loss, values, reprs, batch, heads })
    }

    /// Applies token corruption per type, drawing replacements from the
    /// same type's vocabulary.
    pub fn corrupt(&self, visit: &EncodedVisit, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<VisitTokens> {
        let mut tokens = VisitTokens::from_visit(visit);
        if cfg.selection_rate == 0.0 {
            return Ok(tokens);
        }
        for ty in ConceptType::OBSERVED {
            if ty == ConceptType::N && !self.config.include_text {
                continue;
            }
            let pool = self.embedder.vocab.of_type(ty);
            let (out, _) = corrupt_tokens(tokens.of_type(ty), cfg, rng, pool)?;
            *tokens.of_type_mut(ty) = out;
        }
        Ok(tokens)
    }

    /// Mean loss over `visits` without corruption, batch-size weighted.
    pub fn evaluate(&self, store: &ParamStore, visits: &[EncodedVisit], w: &LossWeights, batch_size: usize) -> Result<LossValues> {
        if visits.is_empty() {
            return invalid("no visits to evaluate");
        }
        let mut acc = LossAccumulator::default();
        for chunk in visits.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedVisit> = chunk.iter().collect();
            let tokens: Vec<VisitTokens> = chunk.iter().map(VisitTokens::from_visit).collect();
            let mut g = Graph::new();
            let out = self.forward(&mut g, store, &refs, &tokens, w)?;
            acc.add(&out.values, chunk.len());
        }
        Ok(acc.mean())
    }
}

#[derive(Debug, Default)]
struct LossAccumulator {
    n: usize,
    total: f64,
    recon: f64,
    sum: Option<f64>,
    terms: [Option<f64>; 4],
}

impl LossAccumulator {
    fn add(&mut self, v: &LossValues, n: usize) {
        let w = n as f64;
        self.n += n;
        self.total += w * v.total;
        self.recon += w * v.recon;
        if let Some(s) = v.sum {
            *self.sum.get_or_insert(0.0) += w * s;
        }
        for (a, t) in self.terms.iter_mut().zip(v.terms) {
            if let Some(t) = t {
                *a.get_or_insert(0.0) += w * t;
            }
        }
    }

    fn mean(&self) -> LossValues {
        let n = self.n as f64;
        LossValues {
            total: self.total / n,
            recon: self.recon / n,
            sum: self.sum.map(|s| s / n),
            terms: self.terms.map(|t| t.map(|t| t / n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_terms: [Option<f64>; 4],
    pub val_sum: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_dd,val_md,val_mm,val_dm,val_sum\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in history {
        let _ = write!(s, "{},{:.17e},{:.17e}", r.epoch, r.train_loss, r.val_loss);
        for t in r.val_terms {
            let _ = write!(s, ",{}", opt(t));
        }
        let _ = writeln!(s, ",{}", opt(r.val_sum));
    }
    s
}

/// Result of [`pretrain`]; `store` holds the restored best parameters.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
}

/// Early-stopped pretraining. Each epoch shuffles the training visits,
/// corrupts their tokens and takes one Adam step per batch; validation
/// runs uncorrupted. The parameters of the best validation epoch are
/// restored into `store` before returning.
pub fn pretrain(
    model: &PretrainModel,
    store: &mut ParamStore,
    train: &[EncodedVisit],
    validation: &[EncodedVisit],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Missing("pretraining needs nonempty train and validation visits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, Adam)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_acc = LossAccumulator::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let visits: Vec<&EncodedVisit> = chunk.iter().map(|&i| &train[i]).collect();
            let tokens = visits.iter().map(|v| model.corrupt(v, &cfg.corruption, &mut rng)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, store, &visits, &tokens, &cfg.weights)?;
            if !out.values.total.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}, batch {b}: loss {}", out.values.total)));
            }
            let grads = g.backward(out.loss)?;
            if !grads.global_norm().is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}, batch {b}: non-finite gradient")));
            }
            adam.step(store, &grads);
            train_acc.add(&out.values, chunk.len());
        }
        let val = model.evaluate(store, validation, &cfg.weights, cfg.batch_size)?;
        if !val.total.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation loss {}", val.total)));
        }
        let train_mean = train_acc.mean();
        log::debug!("pretrain epoch {epoch}: train {:.6} val {:.6}", train_mean.total, val.total);
        history.push(EpochRecord { epoch, train_loss: train_mean.total, val_loss: val.total, val_terms: val.terms, val_sum: val.sum });

        let improved = best.as_ref().is_none_or(|(b, ..)| val.total < b - cfg.min_delta);
        if improved {
            best = Some((val.total, epoch, store.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, best_store, best_adam) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, store.clone(), adam),
    };
    *store = best_store;
    Ok(PretrainOutcome { history, best_epoch, best_val_loss, stopped_early, optimizer: best_adam, rng })
}
