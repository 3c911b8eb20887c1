//! Pipeline stages behind the subcommands. Every stage reads its inputs from
//! the data and run directories and writes artifacts plus a manifest into
//! the run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use medkg::checkpoint::{sha256_hex, Checkpoint};
use medkg::config::RunConfig;
use medkg::downstream::{
    build_samples, evaluate_scores, finetune, finetune_store, frequency_prior, DownstreamModel, FinetuneEpoch, Sample, Task, TaskSpec,
};
use medkg::ehr::synthetic::{generate_synthetic, write_node_features};
use medkg::ehr::{encode_patient, load_dataset, make_splits, Dataset, EncodedPatient, EncodedVisit, SplitSet};
use medkg::embed::{load_node_features, ConceptEmbedder, EmbedderVariant};
use medkg::encoder::VisitEncoder;
use medkg::explain::{
    attention_entropy_report, curve_csv, gnn_explain, heart_failure_history, masking_robustness_curve, rank_concepts, subgroup_eval, EntropyReport,
};
use medkg::kgraph::{build_graph, parse_vocab, ConceptType, Vocabulary};
use medkg::metrics::MetricReport;
use medkg::pretrain::{history_csv, pretrain, PretrainModel, PretrainOutcome};
use medkg::{Error, Result};
use numcore::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "node_features.txt";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";

pub fn task_ckpt_name(task: Task) -> String {
    format!("task-{}.ckpt", task.name())
}

pub fn report_name(task: Task) -> String {
    format!("report-{}.json", task.name())
}

/// Where a command reads data from and writes artifacts to.
#[derive(Debug, Clone)]
pub struct Dirs {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Dirs {
    pub fn new(data: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self { data: data.into(), out: out.into() }
    }

    fn data_file(&self, name: &str) -> Result<PathBuf> {
        let p = self.data.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing(format!("{} not found; run `generate` first or point the data directory elsewhere", p.display())))
        }
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn existing_out(&self, name: &str, hint: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing(format!("{} not found; run `{hint}` first", p.display())))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub family_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub version: String,
}

/// Collects input and output hashes for a command's manifest.
pub struct Recorder {
    command: String,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), started: Instant::now(), inputs: BTreeMap::new(), outputs: BTreeMap::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        std::fs::write(path, bytes)?;
        self.outputs.insert(file_name(path), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self, dirs: &Dirs, cfg: &RunConfig) -> Result<Manifest> {
        let m = Manifest {
            command: self.command.clone(),
            config_hash: cfg.hash()?,
            family_hash: cfg.family_hash()?,
            seed: cfg.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        let path = dirs.out_file(&format!("{}.manifest.json", self.command));
        std::fs::write(path, serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn ensure_out(dirs: &Dirs) -> Result<()> {
    std::fs::create_dir_all(&dirs.out).map_err(|e| Error::Missing(format!("cannot create output directory {}: {e}", dirs.out.display())))
}

/// Writes the synthetic corpus, splits, vocabulary, edges and (optionally)
/// node features.
pub fn cmd_generate(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let mut rec = Recorder::new("generate");
    let corpus = generate_synthetic(&cfg.data.synthetic)?;
    let splits = make_splits(&corpus.dataset, cfg.data.fractions, cfg.seed)?;
    let mut jsonl = Vec::new();
    medkg::ehr::write_dataset(&corpus.dataset, &mut jsonl)?;
    rec.write(&dirs.out_file(DATASET_FILE), &jsonl)?;
    rec.write(&dirs.out_file(SPLITS_FILE), &serde_json::to_vec_pretty(&splits)?)?;
    rec.write(&dirs.out_file(VOCAB_FILE), corpus.vocab.to_tsv().as_bytes())?;
    rec.write(&dirs.out_file(EDGES_FILE), corpus.edges_tsv().as_bytes())?;
    if cfg.data.feature_width > 0 {
        let p = dirs.out_file(FEATURES_FILE);
        write_node_features(&p, &corpus.vocab, &corpus.concept_cluster, cfg.data.feature_width, cfg.seed)?;
        let bytes = std::fs::read(&p)?;
        rec.outputs.insert(FEATURES_FILE.into(), sha256_hex(&bytes));
    }
    rec.finish(dirs, cfg)
}

/// Everything a stage needs: model skeleton and split patients encoded
/// against the embedder vocabulary.
pub struct Prepared {
    pub model: PretrainModel,
    pub splits: SplitSet,
    pub pretrain: Vec<EncodedPatient>,
    pub train: Vec<EncodedPatient>,
    pub validation: Vec<EncodedPatient>,
    pub test: Vec<EncodedPatient>,
    pub features: Option<numcore::Tensor>,
}

impl Prepared {
    pub fn vocab(&self) -> &Vocabulary {
        &self.model.embedder.vocab
    }
}

pub fn visits(patients: &[EncodedPatient]) -> Vec<EncodedVisit> {
    patients.iter().flat_map(|p| p.visits.iter().cloned()).collect()
}

fn select<'a>(dataset: &'a Dataset, ids: &[String]) -> Result<Vec<&'a medkg::ehr::PatientRecord>> {
    ids.iter()
        .map(|id| dataset.get(id).ok_or_else(|| Error::Invalid(format!("split names unknown patient `{id}`"))))
        .collect()
}

/// Loads the corpus from `dirs.data` and builds the configured model.
pub fn prepare(cfg: &RunConfig, dirs: &Dirs, rec: Option<&mut Vec<PathBuf>>) -> Result<Prepared> {
    let dataset_path = dirs.data_file(DATASET_FILE)?;
    let splits_path = dirs.data_file(SPLITS_FILE)?;
    let (dataset, observed, _) = load_dataset(&dataset_path)?;
    let splits: SplitSet = serde_json::from_slice(&std::fs::read(&splits_path)?)?;
    let mut used = vec![dataset_path, splits_path];
    let m = &cfg.model;
    let strip_text = |p: &medkg::ehr::PatientRecord| {
        let mut p = p.clone();
        p.visits.iter_mut().for_each(|v| v.text_concepts.clear());
        p
    };
    let mut features = None;
    let embedder = match m.variant {
        EmbedderVariant::UmlsDualStack => {
            let (vocab_path, edges_path) = (dirs.data_file(VOCAB_FILE)?, dirs.data_file(EDGES_FILE)?);
            let (graph, report) = build_graph(&vocab_path, &edges_path, false)?;
            log::info!("graph: {} edges kept, {} unknown endpoints dropped", report.kept, report.dropped_unknown);
            used.push(vocab_path);
            used.push(edges_path);
            if cfg.data.feature_width > 0 {
                let fp = dirs.data_file(FEATURES_FILE)?;
                features = Some(load_node_features(&fp)?);
                used.push(fp);
            }
            ConceptEmbedder::umls(graph, m.embed())?
        }
        EmbedderVariant::EmbeddingMatrix => {
            let vocab = match dirs.data_file(VOCAB_FILE) {
                Ok(p) => {
                    let v = parse_vocab(&std::fs::read_to_string(&p)?, &p.display().to_string())?;
                    used.push(p);
                    v
                }
                Err(_) => observed.clone(),
            };
            ConceptEmbedder::matrix(&vocab, m.embed())?
        }
        EmbedderVariant::IcdAtcPair => ConceptEmbedder::icd_atc_pair(&observed, m.embed())?,
        EmbedderVariant::IcdAtcCoHetero => {
            let mut train_visits = Vec::new();
            for p in select(&dataset, &splits.pretrain)? {
                train_visits.extend(encode_patient(&strip_text(p), &observed, true)?.visits);
            }
            ConceptEmbedder::icd_atc_hetero(&observed, &train_visits, m.embed())?
        }
    };
    let has_text = !embedder.vocab.of_type(ConceptType::N).is_empty() && m.include_text;
    let encode = |ids: &[String]| -> Result<Vec<EncodedPatient>> {
        select(&dataset, ids)?
            .into_iter()
            .map(|p| if has_text { encode_patient(p, &embedder.vocab, cfg.data.strict) } else { encode_patient(&strip_text(p), &embedder.vocab, cfg.data.strict) })
            .collect()
    };
    let pretrain_p = encode(&splits.pretrain)?;
    let train = encode(&splits.train)?;
    let validation = encode(&splits.validation)?;
    let test = encode(&splits.test)?;
    let model = PretrainModel::new(embedder, VisitEncoder::new(m.encoder())?, m.model())?;
    if let Some(r) = rec {
        r.extend(used);
    }
    Ok(Prepared { model, splits, pretrain: pretrain_p, train, validation, test, features })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainMeta {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub history: Vec<medkg::pretrain::EpochRecord>,
}

/// Initializes and pretrains the configured model in memory.
pub fn run_pretrain(cfg: &RunConfig, prep: &Prepared) -> Result<(ParamStore, PretrainOutcome)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    prep.model.init_params(&mut store, &mut rng, prep.features.clone())?;
    let train = visits(&prep.pretrain);
    let val = visits(&prep.validation);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Missing("pretraining needs nonempty pretrain and validation splits".into()));
    }
    let outcome = pretrain(&prep.model, &mut store, &train, &val, &cfg.pretrain)?;
    Ok((store, outcome))
}

pub fn cmd_pretrain(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let mut rec = Recorder::new("pretrain");
    let mut used = Vec::new();
    let prep = prepare(cfg, dirs, Some(&mut used))?;
    for p in &used {
        rec.input(p)?;
    }
    let (store, outcome) = run_pretrain(cfg, &prep)?;
    let meta = PretrainMeta {
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        history: outcome.history.clone(),
    };
    let ckpt = Checkpoint {
        kind: "pretrain".into(),
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash()?,
        family_hash: cfg.family_hash()?,
        rng: Some(outcome.rng),
        optimizer: Some(outcome.optimizer),
        meta: serde_json::to_value(&meta)?,
        store,
    };
    rec.write(&dirs.out_file(PRETRAIN_CKPT), &ckpt.to_bytes()?)?;
    rec.write(&dirs.out_file("pretrain_history.csv"), history_csv(&outcome.history).as_bytes())?;
    rec.finish(dirs, cfg)
}

/// Loads the pretraining checkpoint and checks it against `cfg`.
pub fn load_pretrained(cfg: &RunConfig, dirs: &Dirs, rec: &mut Recorder) -> Result<ParamStore> {
    let path = dirs.existing_out(PRETRAIN_CKPT, "pretrain")?;
    rec.input(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.ensure_compatible("pretrain", &cfg.family_hash()?)?;
    Ok(ckpt.store)
}

/// Train and validation patients joined, with their samples indexed into
/// the joined list.
pub fn training_set(task: Task, prep: &Prepared) -> Result<(Vec<EncodedPatient>, Vec<Sample>, Vec<Sample>)> {
    let mut all = prep.train.clone();
    all.extend(prep.validation.iter().cloned());
    let train = build_samples(task, &prep.train, prep.vocab())?;
    let offset = prep.train.len();
    let val = build_samples(task, &prep.validation, prep.vocab())?
        .into_iter()
        .map(|mut s| {
            s.patient += offset;
            s
        })
        .collect();
    Ok((all, train, val))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskMeta {
    pub spec: TaskSpec,
    pub n_q: usize,
    pub head_hidden: Vec<usize>,
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub threshold: f64,
}

/// Fine-tunes `task` from a pretrained store in memory.
pub fn run_finetune(cfg: &RunConfig, prep: &Prepared, pretrained: &ParamStore, task: Task) -> Result<(DownstreamModel, ParamStore, TaskMeta, medkg::downstream::FinetuneOutcome)> {
    let model = DownstreamModel::new(task, prep.model.clone(), &cfg.finetune)?;
    let mut store = finetune_store(&model, pretrained, cfg.seed)?;
    let (patients, train, val) = training_set(task, prep)?;
    let outcome = finetune(&model, &mut store, &patients, &train, &val, &cfg.finetune)?;
    let meta = TaskMeta {
        spec: model.spec,
        n_q: model.n_q,
        head_hidden: model.head_hidden.clone(),
        best_epoch: outcome.best_epoch,
        history: outcome.history.clone(),
        threshold: cfg.finetune.threshold,
    };
    Ok((model, store, meta, outcome))
}

fn finetune_history_csv(h: &[FinetuneEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for e in h {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }
    s
}

pub fn cmd_finetune(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let task = cfg.task()?;
    let mut rec = Recorder::new(&format!("finetune-{}", task.name()));
    let pretrained = load_pretrained(cfg, dirs, &mut rec)?;
    let mut used = Vec::new();
    let prep = prepare(cfg, dirs, Some(&mut used))?;
    for p in &used {
        rec.input(p)?;
    }
    let (_, store, meta, outcome) = run_finetune(cfg, &prep, &pretrained, task)?;
    let ckpt = Checkpoint {
        kind: "task".into(),
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash()?,
        family_hash: cfg.family_hash()?,
        rng: Some(outcome.rng),
        optimizer: Some(outcome.optimizer),
        meta: serde_json::to_value(&meta)?,
        store,
    };
    rec.write(&dirs.out_file(&task_ckpt_name(task)), &ckpt.to_bytes()?)?;
    rec.write(&dirs.out_file(&format!("finetune-{}_history.csv", task.name())), finetune_history_csv(&meta.history).as_bytes())?;
    rec.finish(dirs, cfg)
}

/// Model metrics next to a label-prior baseline on the same samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub baseline: MetricReport,
}

/// Scores the test split and evaluates it against the training-label
/// prior. Heart failure adds a breakdown by heart-failure history.
pub fn run_evaluate(prep: &Prepared, model: &DownstreamModel, store: &ParamStore, threshold: f64) -> Result<Evaluation> {
    let task = model.spec.task;
    let test = build_samples(task, &prep.test, prep.vocab())?;
    if test.is_empty() {
        return Err(Error::Missing(format!("no test samples for {}", task.name())));
    }
    let table = model.base.embedder.compute_table(store)?;
    let scores = model.predict_scores(store, &table, &prep.test, &test, 64)?;
    let report = if task == Task::HeartFailure {
        let member: Vec<bool> = test.iter().map(|s| heart_failure_history(s, &prep.test, prep.vocab())).collect();
        subgroup_eval(&model.spec, &scores, &test, threshold, "heart-failure history", &member)?
    } else {
        evaluate_scores(&model.spec, &scores, &test, threshold)?
    };
    let train = build_samples(task, &prep.train, prep.vocab())?;
    let prior = frequency_prior(&model.spec, &train, test.len());
    let mut baseline = evaluate_scores(&model.spec, &prior, &test, threshold)?;
    baseline.task = format!("{} label prior", task.name());
    Ok(Evaluation { report, baseline })
}

pub fn load_task_model(cfg: &RunConfig, dirs: &Dirs, prep: &Prepared, rec: &mut Recorder) -> Result<(DownstreamModel, ParamStore, TaskMeta)> {
    let task = cfg.task()?;
    let path = dirs.existing_out(&task_ckpt_name(task), "finetune")?;
    rec.input(&path)?;
    let ckpt = Checkpoint::load(&path)?;
    ckpt.ensure_compatible("task", &cfg.family_hash()?)?;
    let meta: TaskMeta = serde_json::from_value(ckpt.meta.clone())?;
    if meta.spec.task != task {
        return Err(Error::Incompatible(format!("checkpoint holds task {}, config asks for {}", meta.spec.task.name(), task.name())));
    }
    let mut ft = cfg.finetune.clone();
    ft.n_q = Some(meta.n_q);
    ft.head_hidden = Some(meta.head_hidden.clone());
    let model = DownstreamModel::new(task, prep.model.clone(), &ft)?;
    if model.spec != meta.spec {
        return Err(Error::Incompatible("label space differs from the checkpoint".into()));
    }
    Ok((model, ckpt.store, meta))
}

pub fn cmd_evaluate(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let task = cfg.task()?;
    let mut rec = Recorder::new(&format!("evaluate-{}", task.name()));
    // Check the checkpoint first so a missing model is reported as such.
    dirs.existing_out(&task_ckpt_name(task), "finetune")?;
    let mut used = Vec::new();
    let prep = prepare(cfg, dirs, Some(&mut used))?;
    for p in &used {
        rec.input(p)?;
    }
    let (model, store, meta) = load_task_model(cfg, dirs, &prep, &mut rec)?;
    let eval = run_evaluate(&prep, &model, &store, meta.threshold)?;
    eval.report.validate()?;
    rec.write(&dirs.out_file(&report_name(task)), &serde_json::to_vec_pretty(&eval)?)?;
    rec.finish(dirs, cfg)
}

/// Most frequent disease among pretraining visits.
pub fn default_explain_concept(prep: &Prepared) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in prep.pretrain.iter().flat_map(|p| &p.visits) {
        for &c in &v.d {
            *counts.entry(c).or_default() += 1;
        }
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(c, _)| c)
}

pub fn cmd_explain(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let mut rec = Recorder::new("explain");
    let store = load_pretrained(cfg, dirs, &mut rec)?;
    let mut used = Vec::new();
    let prep = prepare(cfg, dirs, Some(&mut used))?;
    for p in &used {
        rec.input(p)?;
    }
    let test_visits = visits(&prep.test);
    let entropy = attention_entropy_report(&prep.model, &store, &test_visits)?;
    rec.write(&dirs.out_file("attention_entropy.csv"), entropy.to_csv().as_bytes())?;

    let table = prep.model.embedder.compute_table(&store)?;
    let mut rankings = Vec::new();
    for v in test_visits.iter().take(cfg.explain.n_ranked_visits) {
        rankings.push(rank_concepts(&prep.model, &store, &table, v)?);
    }
    rec.write(&dirs.out_file("concept_rankings.json"), &serde_json::to_vec_pretty(&rankings)?)?;

    if !prep.model.embedder.towers.is_empty() {
        let concept = match &cfg.explain.concept {
            Some(id) => prep.vocab().get(id).ok_or_else(|| Error::Unresolvable(id.clone()))?,
            None => default_explain_concept(&prep).ok_or_else(|| Error::Missing("no disease codes to explain".into()))?,
        };
        let hops = cfg.explain.hops.min(cfg.model.depth);
        let g = gnn_explain(&prep.model.embedder, &store, concept, hops, cfg.explain.threshold, &cfg.explain.mask)?;
        rec.write(&dirs.out_file("explanation.tsv"), g.to_tsv().as_bytes())?;
    }

    let mut series = Vec::new();
    for &modality in &cfg.explain.modalities {
        if modality.types().contains(&ConceptType::N) && !prep.model.config.include_text {
            continue;
        }
        for &strategy in &cfg.explain.strategies {
            let curve = masking_robustness_curve(&prep.model, &store, &test_visits, &cfg.pretrain.weights, modality, strategy, &cfg.explain.fractions, cfg.seed)?;
            series.push((format!("{}:{}", serde_plain(&modality)?, serde_plain(&strategy)?), curve));
        }
    }
    rec.write(&dirs.out_file("masking_curves.csv"), curve_csv(&series).as_bytes())?;
    rec.finish(dirs, cfg)
}

fn serde_plain<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_value(v)?.as_str().unwrap_or_default().to_string())
}

/// One row per horizon: readmission metrics after fine-tuning. A horizon
/// whose test labels are single-class has no evaluation.
pub fn sweep_horizons(cfg: &RunConfig, prep: &Prepared, pretrained: &ParamStore) -> Result<Vec<(f64, Option<Evaluation>)>> {
    let mut rows = Vec::new();
    for &h in &cfg.task.horizons_days {
        let task = Task::Readmission { horizon_days: h };
        let (model, store, meta, _) = run_finetune(cfg, prep, pretrained, task)?;
        let eval = match run_evaluate(prep, &model, &store, meta.threshold) {
            Ok(e) => Some(e),
            Err(Error::Invalid(msg)) => {
                log::warn!("horizon {h} days not evaluated: {msg}");
                None
            }
            Err(e) => return Err(e),
        };
        rows.push((h, eval));
    }
    Ok(rows)
}

/// One row per sum-loss weight: attention entropy on the test split.
pub fn sweep_lambdas(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<(f64, EntropyReport)>> {
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let mut c = cfg.clone();
        c.pretrain.weights.lambda = lambda;
        let (store, _) = run_pretrain(&c, prep)?;
        rows.push((lambda, attention_entropy_report(&prep.model, &store, &visits(&prep.test))?));
    }
    Ok(rows)
}

pub fn cmd_sweep(cfg: &RunConfig, dirs: &Dirs) -> Result<Manifest> {
    ensure_out(dirs)?;
    let mut rec = Recorder::new("sweep");
    match cfg.sweep.kind {
        medkg::config::SweepKind::Horizon => {
            let pretrained = load_pretrained(cfg, dirs, &mut rec)?;
            let mut used = Vec::new();
            let prep = prepare(cfg, dirs, Some(&mut used))?;
            for p in &used {
                rec.input(p)?;
            }
            let rows = sweep_horizons(cfg, &prep, &pretrained)?;
            let mut csv = String::from("horizon_days,n_samples,prevalence,auroc,auprc,f1\n");
            for (h, e) in &rows {
                let Some(e) = e else {
                    let n = build_samples(Task::Readmission { horizon_days: *h }, &prep.test, prep.vocab())?.len();
                    let _ = writeln!(csv, "{h},{n},NaN,NaN,NaN,NaN");
                    continue;
                };
                // Average precision of constant scores is the positive rate.
                let prevalence = e.baseline.metrics.get("auprc").copied().unwrap_or(f64::NAN);
                let m = |k: &str| e.report.get(k).unwrap_or(f64::NAN);
                let _ = writeln!(csv, "{h},{},{prevalence},{},{},{}", e.report.n_samples, m("auroc"), m("auprc"), m("f1"));
            }
            rec.write(&dirs.out_file("sweep_horizon.csv"), csv.as_bytes())?;
        }
        medkg::config::SweepKind::Lambda => {
            let mut used = Vec::new();
            let prep = prepare(cfg, dirs, Some(&mut used))?;
            for p in &used {
                rec.input(p)?;
            }
            let rows = sweep_lambdas(cfg, &prep)?;
            let mut csv = String::from("lambda,mean_entropy,n_sets\n");
            for (l, e) in &rows {
                let _ = writeln!(csv, "{l},{},{}", e.mean, e.n_sets);
            }
            rec.write(&dirs.out_file("sweep_lambda.csv"), csv.as_bytes())?;
        }
    }
    rec.finish(dirs, cfg)
}
