//! Patient records, JSONL ingestion, labels, and splits.

pub mod synthetic;

pub use synthetic::{generate_synthetic, write_node_features, SyntheticConfig, SyntheticCorpus, NOTE_TYPES};

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kgraph::{ConceptType, Vocabulary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TextConcept {
    pub concept_id: String,
    pub negated: bool,
    pub note_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time_days: f64,
    pub duration_days: f64,
    pub codes_d: Vec<String>,
    pub codes_m: Vec<String>,
    pub text_concepts: Vec<TextConcept>,
}

impl Visit {
    /// Sorts and deduplicates all sets, returning the number of duplicates.
    pub fn normalize(&mut self) -> usize {
        fn dedup<T: Ord>(v: &mut Vec<T>) -> usize {
            let before = v.len();
            v.sort();
            v.dedup();
            before - v.len()
        }
        dedup(&mut self.codes_d) + dedup(&mut self.codes_m) + dedup(&mut self.text_concepts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn has_medication(&self) -> bool {
        self.visits.iter().any(|v| !v.codes_m.is_empty())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub patients: usize,
    pub duplicates_removed: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientLine {
    schema: u32,
    patient_id: String,
    visits: Vec<Visit>,
}

fn validate(p: &PatientRecord) -> std::result::Result<(), String> {
    if p.visits.is_empty() {
        return Err(format!("patient `{}` has no visits", p.patient_id));
    }
    for (t, v) in p.visits.iter().enumerate() {
        if !(v.time_days.is_finite() && v.time_days >= 0.0) {
            return Err(format!("visit {t}: time_days must be a nonnegative number"));
        }
        if !(v.duration_days.is_finite() && v.duration_days >= 0.0) {
            return Err(format!("visit {t}: duration_days must be a nonnegative number"));
        }
    }
    if let Some(t) = p.visits.windows(2).position(|w| w[1].time_days <= w[0].time_days) {
        return Err(format!("visit {}: times not strictly increasing", t + 1));
    }
    Ok(())
}

pub fn parse_dataset(reader: impl BufRead, source_name: &str) -> Result<(Dataset, LoadReport)> {
    let mut report = LoadReport::default();
    let mut patients = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |detail: String| Error::Malformed { source_name: source_name.into(), line: i + 1, detail };
        let parsed: PatientLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if parsed.schema != SCHEMA_VERSION {
            return Err(malformed(format!("schema {} (expected {SCHEMA_VERSION})", parsed.schema)));
        }
        let mut p = PatientRecord { patient_id: parsed.patient_id, visits: parsed.visits };
        validate(&p).map_err(malformed)?;
        if !ids.insert(p.patient_id.clone()) {
            return Err(malformed(format!("duplicate patient id `{}`", p.patient_id)));
        }
        for v in &mut p.visits {
            report.duplicates_removed += v.normalize();
        }
        patients.push(p);
    }
    report.patients = patients.len();
    Ok((Dataset { patients }, report))
}

/// Loads a JSONL dataset and builds a vocabulary from the observed codes:
/// diseases, then medications, then text concepts, each sorted.
pub fn load_dataset(path: &Path) -> Result<(Dataset, Vocabulary, LoadReport)> {
    let file = std::fs::File::open(path)?;
    let (dataset, report) = parse_dataset(std::io::BufReader::new(file), &path.display().to_string())?;
    let vocab = observed_vocabulary(&dataset)?;
    Ok((dataset, vocab, report))
}

pub fn observed_vocabulary(dataset: &Dataset) -> Result<Vocabulary> {
    let mut d = BTreeSet::new();
    let mut m = BTreeSet::new();
    let mut n = BTreeSet::new();
    for v in dataset.patients.iter().flat_map(|p| &p.visits) {
        d.extend(v.codes_d.iter().cloned());
        m.extend(v.codes_m.iter().cloned());
        n.extend(v.text_concepts.iter().map(|t| t.concept_id.clone()));
    }
    Vocabulary::from_entries(
        d.into_iter()
            .map(|c| (c, ConceptType::D))
            .chain(m.into_iter().map(|c| (c, ConceptType::M)))
            .chain(n.into_iter().map(|c| (c, ConceptType::N))),
    )
}

pub fn write_dataset(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    for p in &dataset.patients {
        let line = PatientLine { schema: SCHEMA_VERSION, patient_id: p.patient_id.clone(), visits: p.visits.clone() };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(dataset, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TextToken {
    pub concept: usize,
    pub negated: bool,
    pub note_type: String,
}

/// A visit with concepts resolved to dense vocabulary indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EncodedVisit {
    pub time_days: f64,
    pub duration_days: f64,
    pub d: Vec<usize>,
    pub m: Vec<usize>,
    pub n: Vec<TextToken>,
}

impl EncodedVisit {
    pub fn from_codes(d: Vec<usize>, m: Vec<usize>) -> Self {
        Self { d, m, ..Default::default() }
    }

    pub fn from_text(n: Vec<usize>) -> Self {
        let n = n.into_iter().map(|concept| TextToken { concept, negated: false, note_type: String::new() }).collect();
        Self { n, ..Default::default() }
    }

    pub fn concepts(&self, ty: ConceptType) -> Vec<usize> {
        match ty {
            ConceptType::D => self.d.clone(),
            ConceptType::M => self.m.clone(),
            ConceptType::N => self.n.iter().map(|t| t.concept).collect(),
            ConceptType::Internal => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub patient_id: String,
    pub visits: Vec<EncodedVisit>,
}

/// Resolves a visit against `vocab`. In non-strict mode unknown concepts are
/// dropped; concepts present with the wrong type are always an error.
pub fn encode_visit(visit: &Visit, vocab: &Vocabulary, strict: bool) -> Result<EncodedVisit> {
    let resolve = |id: &str, ty: ConceptType| -> Result<Option<usize>> {
        match vocab.get(id) {
            Some(i) if vocab.ty(i) == ty => Ok(Some(i)),
            Some(_) => invalid(format!("concept `{id}` is not of type {}", ty.tag())),
            None if strict => Err(Error::Unresolvable(id.to_string())),
            None => Ok(None),
        }
    };
    let mut d = Vec::new();
    for c in &visit.codes_d {
        d.extend(resolve(c, ConceptType::D)?);
    }
    let mut m = Vec::new();
    for c in &visit.codes_m {
        m.extend(resolve(c, ConceptType::M)?);
    }
    let mut n = Vec::new();
    for t in &visit.text_concepts {
        if let Some(concept) = resolve(&t.concept_id, ConceptType::N)? {
            n.push(TextToken { concept, negated: t.negated, note_type: t.note_type.clone() });
        }
    }
    Ok(EncodedVisit { time_days: visit.time_days, duration_days: visit.duration_days, d, m, n })
}

pub fn encode_patient(p: &PatientRecord, vocab: &Vocabulary, strict: bool) -> Result<EncodedPatient> {
    let visits = p.visits.iter().map(|v| encode_visit(v, vocab, strict)).collect::<Result<_>>()?;
    Ok(EncodedPatient { patient_id: p.patient_id.clone(), visits })
}

pub const HEART_FAILURE_PREFIX: &str = "428";

/// 1 iff a disease code of visit `t`, stripped of non-alphanumerics, starts
/// with `prefix`.
pub fn label_heart_failure(patient: &PatientRecord, t: usize, prefix: &str) -> bool {
    patient.visits.get(t).is_some_and(|v| v.codes_d.iter().any(|c| has_code_prefix(c, prefix)))
}

/// Prefix test on a code stripped of non-alphanumerics.
pub fn has_code_prefix(code: &str, prefix: &str) -> bool {
    let stripped: String = code.chars().filter(char::is_ascii_alphanumeric).collect();
    stripped.starts_with(prefix)
}

/// Whether the visit after `t` starts within `horizon_days`; `None` for the
/// last visit, which is censored.
pub fn label_readmission(patient: &PatientRecord, t: usize, horizon_days: f64) -> Option<bool> {
    let now = patient.visits.get(t)?;
    let next = patient.visits.get(t + 1)?;
    Some(next.time_days - now.time_days < horizon_days)
}

pub const LOS_CLASSES: usize = 10;

/// Length-of-stay bucket: under a day is 0, days 1 to 7 map to their floor,
/// 8 to under 15 is 8, and longer stays are 9.
pub fn label_los(duration_days: f64) -> Result<usize> {
    if !(duration_days >= 0.0) || !duration_days.is_finite() {
        return invalid(format!("duration {duration_days} must be nonnegative"));
    }
    Ok(if duration_days < 1.0 {
        0
    } else if duration_days < 8.0 {
        duration_days.floor() as usize
    } else if duration_days < 15.0 {
        8
    } else {
        9
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSet {
    pub schema: u32,
    pub pretrain: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions multi-visit patients with at least one medication into
/// train/validation/test by seeded shuffle. Pretraining uses train plus the
/// single-visit patients with medications.
pub fn make_splits(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<SplitSet> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1"));
    }
    let eligible: Vec<&PatientRecord> = dataset.patients.iter().filter(|p| p.has_medication()).collect();
    let mut multi: Vec<usize> = (0..eligible.len()).filter(|&i| eligible[i].visits.len() > 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    multi.shuffle(&mut rng);
    let n = multi.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let counts = [n_train, n_val, n - n_train - n_val];
    if n > 0 && counts.iter().zip(fractions).any(|(&c, f)| f > 0.0 && c == 0) {
        return invalid(format!("{n} multi-visit patients are too few for fractions {fractions:?}"));
    }
    let ids = |idx: &[usize]| -> Vec<String> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| eligible[i].patient_id.clone()).collect()
    };
    let train = ids(&multi[..n_train]);
    let validation = ids(&multi[n_train..n_train + n_val]);
    let test = ids(&multi[n_train + n_val..]);
    let single: Vec<usize> = (0..eligible.len()).filter(|&i| eligible[i].visits.len() == 1).collect();
    let mut pretrain_idx: Vec<usize> = multi[..n_train].to_vec();
    pretrain_idx.extend(single);
    Ok(SplitSet { schema: SCHEMA_VERSION, pretrain: ids(&pretrain_idx), train, validation, test })
}

/// Multi-hot vector over the `ty` slice of `vocab`.
pub fn multihot(concepts: &[usize], vocab: &Vocabulary, ty: ConceptType) -> Result<Vec<f64>> {
    let mut out = vec![0.0; vocab.of_type(ty).len()];
    for &c in concepts {
        if c >= vocab.len() || vocab.ty(c) != ty {
            return Err(Error::Unresolvable(format!("index {c} as type {}", ty.tag())));
        }
        out[vocab.local_index(c)] = 1.0;
    }
    Ok(out)
}

pub fn ids_from_multihot(bits: &[f64], vocab: &Vocabulary, ty: ConceptType) -> Vec<usize> {
    let slice = vocab.of_type(ty);
    bits.iter().zip(slice).filter(|(b, _)| **b > 0.5).map(|(_, &i)| i).collect()
}
