//! Fine-tuning predictors over visit sequences.
//!
//! Medication recommendation mean-pools the history and appends the current
//! visit's disease representation. Every other task runs a GRU over the
//! history and pools its states with `n_q` trainable temporal queries.
//! The concept embedder is always frozen; its table is computed once and
//! enters each tape as a constant.

use std::collections::BTreeMap;

use numcore::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{has_code_prefix, label_los, EncodedPatient, HEART_FAILURE_PREFIX, LOS_CLASSES};
use crate::embed::{self, embedder_fingerprint, CachedTable};
use crate::encoder::{Token, VisitTokens};
use crate::error::{invalid, Error, Result};
use crate::init;
use crate::kgraph::{ConceptType, Vocabulary};
use crate::metrics::{self, F1Variant, MetricReport};
use crate::pretrain::PretrainModel;

pub const PREFIX: &str = "ds.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Task {
    MedicationRecommendation,
    HeartFailure,
    Diagnosis,
    Readmission { horizon_days: f64 },
    LengthOfStay,
}

impl Task {
    pub fn name(&self) -> String {
        match self {
            Task::MedicationRecommendation => "med-rec".into(),
            Task::HeartFailure => "heart-failure".into(),
            Task::Diagnosis => "diagnosis".into(),
            Task::Readmission { horizon_days } => format!("readmission@{horizon_days}"),
            Task::LengthOfStay => "los".into(),
        }
    }

    /// Parses `med-rec`, `heart-failure`, `diagnosis`, `readmission@<days>`
    /// or `los`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "med-rec" => Ok(Task::MedicationRecommendation),
            "heart-failure" => Ok(Task::HeartFailure),
            "diagnosis" => Ok(Task::Diagnosis),
            "los" => Ok(Task::LengthOfStay),
            _ => match s.strip_prefix("readmission@").map(str::parse::<f64>) {
                Some(Ok(h)) if h > 0.0 && h.is_finite() => Ok(Task::Readmission { horizon_days: h }),
                _ => Err(Error::Config(format!("unknown task `{s}`"))),
            },
        }
    }

    fn default_lr(&self) -> f64 {
        match self {
            Task::HeartFailure => 1e-5,
            _ => 1e-4,
        }
    }

    fn default_n_q(&self) -> usize {
        match self {
            Task::Diagnosis => 4,
            _ => 1,
        }
    }

    fn default_head(&self) -> Vec<usize> {
        match self {
            Task::Diagnosis => Vec::new(),
            Task::MedicationRecommendation => vec![128],
            _ => vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossForm {
    Binary,
    MultiLabel,
    MultiClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub label_width: usize,
    pub loss: LossForm,
}

impl TaskSpec {
    pub fn new(task: Task, vocab: &Vocabulary) -> Self {
        let (label_width, loss) = match task {
            Task::MedicationRecommendation => (vocab.of_type(ConceptType::M).len(), LossForm::MultiLabel),
            Task::Diagnosis => (vocab.of_type(ConceptType::D).len(), LossForm::MultiLabel),
            Task::HeartFailure | Task::Readmission { .. } => (1, LossForm::Binary),
            Task::LengthOfStay => (LOS_CLASSES, LossForm::MultiClass),
        };
        Self { task, label_width, loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Binary(bool),
    /// Local indices within the label vocabulary slice.
    Multi(Vec<usize>),
    Class(usize),
}

/// One prediction: the history is visits `0..t` of `patient`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub patient: usize,
    pub t: usize,
    pub label: Label,
}

impl Sample {
    pub fn target_row(&self, width: usize) -> Vec<f64> {
        let mut row = vec![0.0; width];
        match &self.label {
            Label::Binary(b) => row[0] = f64::from(u8::from(*b)),
            Label::Multi(ids) => ids.iter().for_each(|&i| row[i] = 1.0),
            Label::Class(c) => row[*c] = 1.0,
        }
        row
    }

    pub fn positive(&self) -> bool {
        matches!(self.label, Label::Binary(true))
    }
}

/// Samples for every admissible history length `t >= 1`. Heart failure,
/// diagnosis and medication recommendation label visit `t`; readmission
/// labels the gap after visit `t - 1` and length of stay the duration of
/// visit `t - 1`, the last history visit.
pub fn build_samples(task: Task, patients: &[EncodedPatient], vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (pi, p) in patients.iter().enumerate() {
        let n = p.visits.len();
        for t in 1..=n {
            let label = match task {
                Task::HeartFailure if t < n => {
                    Label::Binary(p.visits[t].d.iter().any(|&c| has_code_prefix(vocab.id(c), HEART_FAILURE_PREFIX)))
                }
                Task::Diagnosis if t < n => Label::Multi(p.visits[t].d.iter().map(|&c| vocab.local_index(c)).collect()),
                Task::MedicationRecommendation if t < n => Label::Multi(p.visits[t].m.iter().map(|&c| vocab.local_index(c)).collect()),
                Task::Readmission { horizon_days } if t < n => Label::Binary(p.visits[t].time_days - p.visits[t - 1].time_days < horizon_days),
                Task::LengthOfStay => Label::Class(label_los(p.visits[t - 1].duration_days)?),
                _ => continue,
            };
            out.push(Sample { patient: pi, t, label });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Task default when absent.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub n_q: Option<usize>,
    pub head_hidden: Option<Vec<usize>>,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { lr: None, batch_size: 32, max_epochs: 30, patience: 5, min_delta: 1e-4, n_q: None, head_hidden: None, threshold: 0.5, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_some_and(|lr| !(lr.is_finite() && lr >= 0.0)) || self.batch_size == 0 || self.n_q == Some(0) {
            return Err(Error::Config("invalid fine-tuning optimizer settings".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0,1)", self.threshold)));
        }
        Ok(())
    }
}

/// A task model: pretrained embedder and encoder plus a sequence model.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    pub spec: TaskSpec,
    pub base: PretrainModel,
    pub n_q: usize,
    pub head_hidden: Vec<usize>,
}

struct GruVars {
    wz: Var,
    uz: Var,
    bz: Var,
    wr: Var,
    ur: Var,
    br: Var,
    wh: Var,
    uh: Var,
    bh: Var,
}

struct SeqVars {
    gru: Option<GruVars>,
    queries: Option<Var>,
    head: Vec<(Var, Var)>,
}

/// Attention captured for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// One row per query over the history states; empty for pooling.
    pub temporal: Vec<Vec<f64>>,
    /// Per history visit (and the current visit for medication
    /// recommendation), CLS attention per type in token order.
    pub visits: Vec<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub trace: Trace,
}

fn visit_attention(r: &crate::encoder::VisitRepr) -> BTreeMap<String, Vec<f64>> {
    let mut m = BTreeMap::new();
    for ty in ConceptType::OBSERVED {
        if let Some(e) = r.get(ty) {
            m.insert(ty.tag().to_string(), e.attention.clone());
        }
    }
    m
}

impl DownstreamModel {
    pub fn new(task: Task, base: PretrainModel, cfg: &FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = TaskSpec::new(task, &base.embedder.vocab);
        if spec.label_width == 0 {
            return Err(Error::Config(format!("task {} has an empty label space", task.name())));
        }
        Ok(Self {
            spec,
            base,
            n_q: cfg.n_q.unwrap_or_else(|| task.default_n_q()),
            head_hidden: cfg.head_hidden.clone().unwrap_or_else(|| task.default_head()),
        })
    }

    pub fn is_pooling(&self) -> bool {
        self.spec.task == Task::MedicationRecommendation
    }

    /// Width `k * r` of a concatenated visit representation.
    pub fn repr_width(&self) -> usize {
        self.base.k() * (2 + usize::from(self.base.config.include_text))
    }

    fn head_input(&self) -> usize {
        if self.is_pooling() {
            self.repr_width() + self.base.k()
        } else {
            self.repr_width()
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (x, h) = (self.repr_width(), self.repr_width());
        if !self.is_pooling() {
            for gate in ["z", "r", "h"] {
                store.insert(format!("{PREFIX}gru.w{gate}"), init::xavier(rng, x, h));
                store.insert(format!("{PREFIX}gru.u{gate}"), init::xavier(rng, h, h));
                store.insert(format!("{PREFIX}gru.b{gate}"), Tensor::zeros(1, h));
            }
            store.insert(format!("{PREFIX}q"), init::normal(rng, self.n_q, h, 1.0 / (h as f64).sqrt()));
        }
        let mut dims = vec![self.head_input()];
        dims.extend(&self.head_hidden);
        dims.push(self.spec.label_width);
        for (l, w) in dims.windows(2).enumerate() {
            store.insert(format!("{PREFIX}head.l{l}.w"), init::xavier(rng, w[0], w[1]));
            store.insert(format!("{PREFIX}head.l{l}.b"), Tensor::zeros(1, w[1]));
        }
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<SeqVars> {
        let mut p = |n: String| g.param(store, &n);
        let gru = if self.is_pooling() {
            None
        } else {
            Some(GruVars {
                wz: p(format!("{PREFIX}gru.wz"))?,
                uz: p(format!("{PREFIX}gru.uz"))?,
                bz: p(format!("{PREFIX}gru.bz"))?,
                wr: p(format!("{PREFIX}gru.wr"))?,
                ur: p(format!("{PREFIX}gru.ur"))?,
                br: p(format!("{PREFIX}gru.br"))?,
                wh: p(format!("{PREFIX}gru.wh"))?,
                uh: p(format!("{PREFIX}gru.uh"))?,
                bh: p(format!("{PREFIX}gru.bh"))?,
            })
        };
        let queries = if self.is_pooling() { None } else { Some(p(format!("{PREFIX}q"))?) };
        let mut head = Vec::new();
        for l in 0..=self.head_hidden.len() {
            head.push((p(format!("{PREFIX}head.l{l}.w"))?, p(format!("{PREFIX}head.l{l}.b"))?));
        }
        Ok(SeqVars { gru, queries, head })
    }

    fn head_forward(g: &mut Graph, head: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in head.iter().enumerate() {
            h = g.linear(h, w, b)?;
            if i + 1 < head.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Logits for `samples` (rows in input order) plus their traces.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        table: &Tensor,
        patients: &[EncodedPatient],
        samples: &[&Sample],
    ) -> Result<(Var, Vec<Trace>)> {
        if samples.is_empty() {
            return invalid("empty batch");
        }
        let table = g.constant(table.clone())?;
        let enc = self.base.encoder.bind(g, store)?;
        let ext = enc.extend_table(g, table)?;
        let seq = self.bind(g, store)?;
        let include_text = self.base.config.include_text;

        let mut by_patient: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_patient.entry(s.patient).or_default().push(i);
        }
        let mut rows: Vec<Option<Var>> = vec![None; samples.len()];
        let mut traces: Vec<Option<Trace>> = vec![None; samples.len()];
        for (&pi, idx) in &by_patient {
            let p = patients.get(pi).ok_or_else(|| Error::Invalid(format!("sample refers to patient {pi}")))?;
            let horizon = idx.iter().map(|&i| samples[i].t).max().expect("nonempty group");
            if horizon == 0 || horizon > p.visits.len() {
                return invalid(format!("history length {horizon} invalid for {} visits", p.visits.len()));
            }
            let mut xs = Vec::with_capacity(horizon);
            let mut visit_att = Vec::with_capacity(horizon);
            for v in &p.visits[..horizon] {
                let r = enc.encode_visit(g, ext, &VisitTokens::from_visit(v), include_text)?;
                xs.push(enc.concat_repr(g, &r)?);
                visit_att.push(visit_attention(&r));
            }
            let states = match &seq.gru {
                Some(gru) => Some(self.run_gru(g, gru, &xs)?),
                None => None,
            };
            for &i in idx {
                let t = samples[i].t;
                let (input, temporal, mut vis) = if let Some(states) = &states {
                    let s = if t == 1 { states[0] } else { g.concat_rows(&states[..t])? };
                    let q = seq.queries.expect("sequence model has queries");
                    let st = g.transpose(s)?;
                    let scores = g.matmul(q, st)?;
                    let att = g.softmax_rows(scores)?;
                    let ctx = g.matmul(att, s)?;
                    let pooled = g.mean_rows(ctx)?;
                    let a = g.value(att);
                    let temporal = (0..a.rows()).map(|r| a.row(r).to_vec()).collect();
                    (pooled, temporal, visit_att[..t].to_vec())
                } else {
                    let cur = p.visits.get(t).ok_or_else(|| Error::Invalid("medication recommendation needs visit t".into()))?;
                    let hist = if t == 1 { xs[0] } else { g.concat_rows(&xs[..t])? };
                    let pooled = g.mean_rows(hist)?;
                    let tokens: Vec<Token> = cur.d.iter().map(|&c| Token::Concept(c)).collect();
                    let cur_d = enc.encode_tokens(g, ext, &tokens, &vec![false; tokens.len()], ConceptType::D)?;
                    let mut att = visit_att[..t].to_vec();
                    att.push(BTreeMap::from([("d".to_string(), cur_d.attention.clone())]));
                    (g.concat_cols(&[pooled, cur_d.cls])?, Vec::new(), att)
                };
                rows[i] = Some(Self::head_forward(g, &seq.head, input)?);
                traces[i] = Some(Trace { temporal, visits: std::mem::take(&mut vis) });
            }
        }
        let rows: Vec<Var> = rows.into_iter().map(|r| r.expect("every sample visited")).collect();
        let logits = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        Ok((logits, traces.into_iter().map(|t| t.expect("every sample visited")).collect()))
    }

    /// Hidden states after each of `xs`, starting from a zero state.
    fn run_gru(&self, g: &mut Graph, gru: &GruVars, xs: &[Var]) -> Result<Vec<Var>> {
        let mut h = g.constant(Tensor::zeros(1, self.repr_width()))?;
        let mut states = Vec::with_capacity(xs.len());
        for &x in xs {
            h = gru_step(g, gru, x, h)?;
            states.push(h);
        }
        Ok(states)
    }

    fn loss(&self, g: &mut Graph, logits: Var, samples: &[&Sample]) -> Result<Var> {
        match self.spec.loss {
            LossForm::MultiClass => {
                let classes: Vec<usize> = samples
                    .iter()
                    .map(|s| match s.label {
                        Label::Class(c) => Ok(c),
                        _ => invalid("class label expected"),
                    })
                    .collect::<Result<_>>()?;
                Ok(g.softmax_cross_entropy(logits, &classes)?)
            }
            _ => {
                let w = self.spec.label_width;
                let mut data = Vec::with_capacity(samples.len() * w);
                for s in samples {
                    let ok = matches!((&s.label, self.spec.loss), (Label::Binary(_), LossForm::Binary) | (Label::Multi(_), LossForm::MultiLabel));
                    if !ok {
                        return invalid(format!("label {:?} does not fit task {}", s.label, self.spec.task.name()));
                    }
                    data.extend(s.target_row(w));
                }
                Ok(g.bce_with_logits(logits, &Tensor::from_matrix(samples.len(), w, data))?)
            }
        }
    }

    /// Logits and attention traces for the history `0..t` of `patient`.
    pub fn predict_patient(&self, store: &ParamStore, table: &Tensor, patient: &EncodedPatient, t: usize) -> Result<Prediction> {
        if t == 0 {
            return invalid("prediction needs at least one history visit (t >= 1)");
        }
        let sample = Sample { patient: 0, t, label: Label::Binary(false) };
        let mut g = Graph::new();
        let (logits, mut traces) = self.forward(&mut g, store, table, std::slice::from_ref(patient), &[&sample])?;
        Ok(Prediction { logits: g.value(logits).data().to_vec(), trace: traces.remove(0) })
    }

    /// Probabilities per sample: sigmoid for binary and multi-label tasks,
    /// softmax for multi-class.
    pub fn predict_scores(&self, store: &ParamStore, table: &Tensor, patients: &[EncodedPatient], samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut g = Graph::new();
            let (logits, _) = self.forward(&mut g, store, table, patients, &refs)?;
            let z = g.value(logits);
            for r in 0..z.rows() {
                let row = z.row(r);
                out.push(match self.spec.loss {
                    LossForm::MultiClass => {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.into_iter().map(|v| v / s).collect()
                    }
                    _ => row.iter().map(|&v| numcore::sigmoid(v)).collect(),
                });
            }
        }
        Ok(out)
    }

    /// Training loss of one batch on `g`; the node table enters as a
    /// constant.
    pub fn batch_loss(&self, g: &mut Graph, store: &ParamStore, table: &Tensor, patients: &[EncodedPatient], samples: &[&Sample]) -> Result<Var> {
        let (logits, _) = self.forward(g, store, table, patients, samples)?;
        self.loss(g, logits, samples)
    }

    fn mean_loss(&self, store: &ParamStore, table: &Tensor, patients: &[EncodedPatient], samples: &[Sample], batch_size: usize) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in samples.chunks(batch_size.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut g = Graph::new();
            let (logits, _) = self.forward(&mut g, store, table, patients, &refs)?;
            let l = self.loss(&mut g, logits, &refs)?;
            sum += g.value(l).item()? * chunk.len() as f64;
            n += chunk.len();
        }
        Ok(sum / n as f64)
    }
}

fn gru_step(g: &mut Graph, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hin: Var| -> Result<Var> {
        let a = g.matmul(x, w)?;
        let c = g.matmul(hin, u)?;
        let s = g.add(a, c)?;
        Ok(g.add_row_bias(s, b)?)
    };
    let z = gate(g, p.wz, p.uz, p.bz, h)?;
    let z = g.sigmoid(z)?;
    let r = gate(g, p.wr, p.ur, p.br, h)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let cand = gate(g, p.wh, p.uh, p.bh, rh)?;
    let cand = g.tanh(cand)?;
    // (1 - z) * h + z * cand
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    Ok(g.add(h, step)?)
}

/// Parameter state for fine-tuning: the embedder (frozen) and encoder of a
/// pretrained store plus freshly initialized sequence-model parameters.
pub fn finetune_store(model: &DownstreamModel, pretrained: &ParamStore, seed: u64) -> Result<ParamStore> {
    let mut store = pretrained.subset(embed::PREFIX);
    if store.is_empty() {
        return Err(Error::Incompatible("checkpoint has no concept-embedder parameters".into()));
    }
    let enc = pretrained.subset(crate::encoder::PREFIX);
    if enc.is_empty() {
        return Err(Error::Incompatible("checkpoint has no visit-encoder parameters".into()));
    }
    store.merge(&enc);
    embed::freeze(&mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f17e);
    model.init_params(&mut store, &mut rng);
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
}

/// Trains encoder and sequence model on `train`, early-stopping on the
/// validation loss and restoring the best parameters. The embedder is
/// checked bit-for-bit against its initial state after every epoch.
pub fn finetune(
    model: &DownstreamModel,
    store: &mut ParamStore,
    patients: &[EncodedPatient],
    train: &[Sample],
    validation: &[Sample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Missing(format!("task {} has no train or validation samples", model.spec.task.name())));
    }
    if store.names().any(|n| n.starts_with(embed::PREFIX) && !store.is_frozen(n)) {
        return Err(Error::Invalid("concept embedder must be frozen before fine-tuning".into()));
    }
    let fingerprint = embedder_fingerprint(store);
    let frozen = store.subset(embed::PREFIX);
    let table = CachedTable::default().get(&model.base.embedder, store)?.clone();

    let lr = cfg.lr.unwrap_or_else(|| model.spec.task.default_lr());
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, Adam)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let (logits, _) = model.forward(&mut g, store, &table, patients, &refs)?;
            let loss = model.loss(&mut g, logits, &refs)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("fine-tuning epoch {epoch}: loss {value}")));
            }
            let grads = g.backward(loss)?;
            adam.step(store, &grads);
            sum += value * chunk.len() as f64;
            n += chunk.len();
        }
        if embedder_fingerprint(store) != fingerprint || !store.bit_eq_prefix(&frozen, embed::PREFIX) {
            return Err(Error::Invalid(format!("concept embedder changed during fine-tuning epoch {epoch}")));
        }
        let val_loss = model.mean_loss(store, &table, patients, validation, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("fine-tuning epoch {epoch}: validation loss {val_loss}")));
        }
        log::debug!("finetune {} epoch {epoch}: train {:.6} val {val_loss:.6}", model.spec.task.name(), sum / n as f64);
        history.push(FinetuneEpoch { epoch, train_loss: sum / n as f64, val_loss });
        if best.as_ref().is_none_or(|(b, ..)| val_loss < b - cfg.min_delta) {
            best = Some((val_loss, epoch, store.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_store, best_adam) = best.unwrap_or((f64::NAN, 0, store.clone(), adam));
    *store = best_store;
    Ok(FinetuneOutcome { history, best_epoch, optimizer: best_adam, rng })
}

/// Recall cut-offs reported for diagnosis.
pub const RECALL_KS: [usize; 3] = [10, 20, 40];

/// Task metrics for class-probability `scores` of `samples`.
pub fn evaluate_scores(spec: &TaskSpec, scores: &[Vec<f64>], samples: &[Sample], threshold: f64) -> Result<MetricReport> {
    if scores.len() != samples.len() {
        return invalid(format!("{} score rows for {} samples", scores.len(), samples.len()));
    }
    let mut report = MetricReport::new(spec.task.name(), samples.len(), None);
    let width = spec.label_width;
    let bool_rows = || -> Vec<Vec<bool>> { samples.iter().map(|s| s.target_row(width).iter().map(|&v| v > 0.5).collect()).collect() };
    match spec.task {
        Task::HeartFailure | Task::Readmission { .. } => {
            let s: Vec<f64> = scores.iter().map(|r| r[0]).collect();
            let l: Vec<bool> = samples.iter().map(Sample::positive).collect();
            report.metrics.insert("auroc".into(), metrics::auroc(&s, &l)?);
            report.metrics.insert("auprc".into(), metrics::average_precision(&s, &l)?);
            let rows: Vec<Vec<f64>> = s.iter().map(|&x| vec![x]).collect();
            let lrows: Vec<Vec<bool>> = l.iter().map(|&x| vec![x]).collect();
            report.metrics.insert("f1".into(), metrics::f1_scores(&rows, &lrows, threshold, F1Variant::Binary)?);
            report.threshold = Some(threshold);
        }
        Task::Diagnosis => {
            let l = bool_rows();
            report.metrics.insert("f1_weighted".into(), metrics::f1_scores(scores, &l, threshold, F1Variant::Weighted)?);
            report.metrics.insert("f1_inflated_weighted".into(), metrics::f1_scores(scores, &l, threshold, F1Variant::InflatedWeighted)?);
            for k in RECALL_KS {
                let r = metrics::recall_at_k(scores, &l, k)?;
                report.metrics.insert(format!("recall@{k}"), r.value);
                report.excluded.insert(format!("recall@{k}"), r.excluded);
            }
            report.threshold = Some(threshold);
        }
        Task::MedicationRecommendation => {
            let l = bool_rows();
            let ap = metrics::auprc_sample_avg(scores, &l)?;
            report.metrics.insert("auprc".into(), ap.value);
            report.excluded.insert("auprc".into(), ap.excluded);
            report.metrics.insert("f1_sample".into(), metrics::f1_scores(scores, &l, threshold, F1Variant::SampleMacro)?);
            report.threshold = Some(threshold);
        }
        Task::LengthOfStay => {
            let classes: Vec<usize> = samples
                .iter()
                .map(|s| match s.label {
                    Label::Class(c) => Ok(c),
                    _ => invalid("class label expected"),
                })
                .collect::<Result<_>>()?;
            report.metrics.insert("weighted_auroc".into(), metrics::weighted_auroc(scores, &classes)?);
        }
    }
    Ok(report)
}

/// Scores every sample by its label's frequency among `train` samples.
pub fn frequency_prior(spec: &TaskSpec, train: &[Sample], n: usize) -> Vec<Vec<f64>> {
    let mut freq = vec![0.0; spec.label_width];
    for s in train {
        for (f, v) in freq.iter_mut().zip(s.target_row(spec.label_width)) {
            *f += v;
        }
    }
    let total = train.len().max(1) as f64;
    freq.iter_mut().for_each(|f| *f /= total);
    vec![freq; n]
}
