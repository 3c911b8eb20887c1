//! Deterministic synthetic corpus with latent disease clusters.
//!
//! Each cluster owns a block of disease codes, medications and text
//! concepts. Every disease is linked to a few medications and text concepts
//! of its cluster, which drives both the visit contents and the knowledge
//! graph edges. Cluster 0 is the cardiac cluster and owns the `428.x`
//! heart-failure codes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, PatientRecord, TextConcept, Visit};
use crate::error::{invalid, Result};
use crate::kgraph::{ConceptType, Vocabulary};

pub const NOTE_TYPES: [&str; 6] = ["discharge_summary", "radiology", "nursing", "physician", "respiratory", "ecg"];

const CARDIAC_CATEGORIES: [&str; 5] = ["428", "401", "410", "427", "414"];
const ATC_LETTERS: &[u8] = b"CABDGHJLMNPRSV";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_clusters: usize,
    pub n_diseases: usize,
    pub n_medications: usize,
    pub n_text_concepts: usize,
    /// Mean visit count of multi-visit patients.
    pub mean_visits: f64,
    pub max_visits: usize,
    pub single_visit_rate: f64,
    /// Probability that each chronic condition recurs in a visit.
    pub chronic_prob: f64,
    /// Share of text tokens replaced by concepts of a foreign cluster.
    pub noise_rate: f64,
    pub negation_rate: f64,
    pub no_medication_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_clusters: 8,
            n_diseases: 120,
            n_medications: 80,
            n_text_concepts: 160,
            mean_visits: 3.0,
            max_visits: 8,
            single_visit_rate: 0.3,
            chronic_prob: 0.8,
            noise_rate: 0.1,
            negation_rate: 0.15,
            no_medication_rate: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_patients, self.n_clusters, self.n_diseases, self.n_medications, self.n_text_concepts, self.max_visits];
        if counts.contains(&0) {
            return invalid("synthetic counts must be positive");
        }
        let probs = [self.single_visit_rate, self.chronic_prob, self.noise_rate, self.negation_rate, self.no_medication_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid("synthetic probabilities must lie in [0,1]");
        }
        if self.n_clusters > ATC_LETTERS.len() {
            return invalid(format!("at most {} clusters", ATC_LETTERS.len()));
        }
        if self.n_diseases < 2 * self.n_clusters || self.n_medications < self.n_clusters || self.n_text_concepts < 2 * self.n_clusters {
            return invalid("each cluster needs at least two diseases, one medication and two text concepts");
        }
        if !(self.mean_visits >= 2.0) || self.max_visits < 2 {
            return invalid("multi-visit patients need mean_visits >= 2 and max_visits >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Primary latent cluster of each patient.
    pub patient_cluster: Vec<usize>,
    /// Every generated concept, diseases then medications then text.
    pub vocab: Vocabulary,
    pub concept_cluster: Vec<usize>,
    /// UMLS-style `(src, dst, relation)` lines, including a few duplicates
    /// and out-of-vocabulary endpoints.
    pub edges: Vec<(String, String, String)>,
}

impl SyntheticCorpus {
    pub fn edges_tsv(&self) -> String {
        let mut out = String::new();
        for (a, b, r) in &self.edges {
            out.push_str(&format!("{a}\t{b}\t{r}\n"));
        }
        out
    }
}

struct World {
    /// Per cluster, indices into `codes` of each type.
    diseases: Vec<Vec<usize>>,
    meds: Vec<Vec<usize>>,
    texts: Vec<Vec<usize>>,
    /// Per disease index (into `d_codes`), linked medication and text index.
    med_links: Vec<Vec<usize>>,
    text_links: Vec<Vec<usize>>,
    d_codes: Vec<String>,
    m_codes: Vec<String>,
    n_codes: Vec<String>,
}

fn split_counts(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|c| total / parts + usize::from(c < total % parts)).collect()
}

fn disease_code(cluster: usize, j: usize) -> String {
    let cat = if cluster == 0 {
        CARDIAC_CATEGORIES[j % 5].to_string()
    } else {
        format!("{}", 600 + cluster * 5 + j % 5)
    };
    let sub = j / 5;
    if sub < 10 {
        format!("{cat}.{sub}")
    } else {
        format!("{cat}.{:02}", sub)
    }
}

fn medication_code(cluster: usize, j: usize) -> String {
    let letter = ATC_LETTERS[cluster] as char;
    let a = (b'A' + (j / 3 % 4) as u8) as char;
    let b = (b'A' + (j % 2) as u8) as char;
    format!("{letter}{:02}{a}{b}{:02}", 1 + j % 3, j % 100 + 1)
}

fn build_world(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> World {
    let c = cfg.n_clusters;
    let mut w = World {
        diseases: vec![Vec::new(); c],
        meds: vec![Vec::new(); c],
        texts: vec![Vec::new(); c],
        med_links: Vec::new(),
        text_links: Vec::new(),
        d_codes: Vec::new(),
        m_codes: Vec::new(),
        n_codes: Vec::new(),
    };
    for (k, n) in split_counts(cfg.n_diseases, c).into_iter().enumerate() {
        for j in 0..n {
            w.diseases[k].push(w.d_codes.len());
            w.d_codes.push(disease_code(k, j));
        }
    }
    for (k, n) in split_counts(cfg.n_medications, c).into_iter().enumerate() {
        for j in 0..n {
            w.meds[k].push(w.m_codes.len());
            w.m_codes.push(medication_code(k, j));
        }
    }
    for (k, n) in split_counts(cfg.n_text_concepts, c).into_iter().enumerate() {
        for _ in 0..n {
            w.texts[k].push(w.n_codes.len());
            w.n_codes.push(format!("C{:07}", 100_000 + 37 * w.n_codes.len()));
        }
    }
    for k in 0..c {
        for _ in 0..w.diseases[k].len() {
            let n_med = rng.random_range(1..=2);
            let n_txt = rng.random_range(1..=3);
            w.med_links.push(w.meds[k].choose_multiple(rng, n_med).copied().collect());
            w.text_links.push(w.texts[k].choose_multiple(rng, n_txt).copied().collect());
        }
    }
    w
}

fn note_type(cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let idx = if rng.random_bool(0.5) { cluster % NOTE_TYPES.len() } else { rng.random_range(0..NOTE_TYPES.len()) };
    NOTE_TYPES[idx].to_string()
}

fn other_cluster(k: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    if n == 1 {
        return k;
    }
    let o = rng.random_range(0..n - 1);
    if o >= k { o + 1 } else { o }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = build_world(cfg, &mut rng);
    let c = cfg.n_clusters;
    let extra_visits = Poisson::new(cfg.mean_visits - 2.0).ok();

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut patient_cluster = Vec::with_capacity(cfg.n_patients);
    for pid in 0..cfg.n_patients {
        // Cluster 0 is drawn twice as often as the others.
        let r = rng.random_range(0..c + 1);
        let primary = r.saturating_sub(1);
        let secondary = (rng.random_bool(0.3)).then(|| other_cluster(primary, c, &mut rng));
        let no_meds = rng.random_bool(cfg.no_medication_rate);

        let n_chronic = rng.random_range(1..=2);
        let mut chronic: Vec<usize> = w.diseases[primary].choose_multiple(&mut rng, n_chronic).copied().collect();
        if primary == 0 && rng.random_bool(0.6) {
            // Heart-failure codes sit at every fifth position of cluster 0.
            let hf: Vec<usize> = w.diseases[0].iter().step_by(5).copied().collect();
            chronic[0] = *hf.choose(&mut rng).expect("cluster 0 has codes");
        }

        let n_visits = if rng.random_bool(cfg.single_visit_rate) {
            1
        } else {
            let extra = extra_visits.map_or(0.0, |p| p.sample(&mut rng)) as usize;
            (2 + extra).min(cfg.max_visits)
        };
        let gap = Exp::new(1.0 / (30.0 + 40.0 * (primary % 4) as f64)).expect("positive rate");
        let stay = Exp::new(1.0 / (1.5 + 2.0 * (primary % 5) as f64)).expect("positive rate");
        let mut time = rng.random_range(0.0..365.0f64);

        let mut visits = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            if t > 0 {
                time += 1.0 + gap.sample(&mut rng);
            }
            let mut d: BTreeSet<usize> = chronic.iter().copied().filter(|_| rng.random_bool(cfg.chronic_prob)).collect();
            let n_acute = rng.random_range(1..=3);
            for _ in 0..n_acute {
                let k = match secondary {
                    Some(s) if rng.random_bool(0.3) => s,
                    _ => primary,
                };
                d.insert(*w.diseases[k].choose(&mut rng).expect("non-empty cluster"));
            }
            if rng.random_bool(0.05) {
                d.insert(rng.random_range(0..w.d_codes.len()));
            }

            let mut m = BTreeSet::new();
            let mut text = BTreeSet::new();
            for &dc in &d {
                let k = cluster_of(&w.diseases, dc);
                if !no_meds {
                    m.extend(w.med_links[dc].iter().copied().filter(|_| rng.random_bool(0.7)));
                }
                for &tc in &w.text_links[dc] {
                    if rng.random_bool(0.6) {
                        text.insert((tc, k));
                    }
                }
            }
            if !no_meds && rng.random_bool(0.1) {
                m.insert(*w.meds[primary].choose(&mut rng).expect("non-empty cluster"));
            }
            for _ in 0..rng.random_range(0..=2) {
                text.insert((*w.texts[primary].choose(&mut rng).expect("non-empty cluster"), primary));
            }

            let mut text_concepts = Vec::with_capacity(text.len());
            for (tc, k) in text {
                let (tc, k) = if rng.random_bool(cfg.noise_rate) {
                    let o = other_cluster(k, c, &mut rng);
                    (*w.texts[o].choose(&mut rng).expect("non-empty cluster"), o)
                } else {
                    (tc, k)
                };
                text_concepts.push(TextConcept {
                    concept_id: w.n_codes[tc].clone(),
                    negated: rng.random_bool(cfg.negation_rate),
                    note_type: note_type(k, &mut rng),
                });
            }
            let mut visit = Visit {
                time_days: time,
                duration_days: stay.sample(&mut rng),
                codes_d: d.into_iter().map(|i| w.d_codes[i].clone()).collect(),
                codes_m: m.into_iter().map(|i| w.m_codes[i].clone()).collect(),
                text_concepts,
            };
            visit.normalize();
            visits.push(visit);
        }
        patients.push(PatientRecord { patient_id: format!("p{pid:05}"), visits });
        patient_cluster.push(primary);
    }

    let vocab = Vocabulary::from_entries(
        w.d_codes
            .iter()
            .map(|s| (s.clone(), ConceptType::D))
            .chain(w.m_codes.iter().map(|s| (s.clone(), ConceptType::M)))
            .chain(w.n_codes.iter().map(|s| (s.clone(), ConceptType::N))),
    )?;
    let mut concept_cluster = Vec::with_capacity(vocab.len());
    for groups in [&w.diseases, &w.meds, &w.texts] {
        let n: usize = groups.iter().map(Vec::len).sum();
        concept_cluster.extend((0..n).map(|i| cluster_of(groups, i)));
    }
    let edges = graph_edges(&w, &mut rng);
    Ok(SyntheticCorpus { dataset: Dataset { patients }, patient_cluster, vocab, concept_cluster, edges })
}

fn cluster_of(groups: &[Vec<usize>], idx: usize) -> usize {
    groups.iter().position(|g| g.contains(&idx)).expect("index belongs to a cluster")
}

fn push(edges: &mut Vec<(String, String, String)>, a: &str, b: &str, r: &str) {
    edges.push((a.to_string(), b.to_string(), r.to_string()));
}

fn graph_edges(w: &World, rng: &mut ChaCha8Rng) -> Vec<(String, String, String)> {
    let mut edges = Vec::new();
    for (dc, meds) in w.med_links.iter().enumerate() {
        for &mc in meds {
            push(&mut edges, &w.m_codes[mc], &w.d_codes[dc], "may_treat");
        }
    }
    for (dc, texts) in w.text_links.iter().enumerate() {
        for &tc in texts {
            push(&mut edges, &w.d_codes[dc], &w.n_codes[tc], "RO");
        }
    }
    for k in 0..w.diseases.len() {
        let ds = &w.diseases[k];
        for (i, &dc) in ds.iter().enumerate() {
            // Siblings within the same category are five positions apart.
            if let Some(&sib) = ds.get(i + 5) {
                push(&mut edges, &w.d_codes[dc], &w.d_codes[sib], "RB");
            }
        }
        let ts = &w.texts[k];
        for &tc in ts {
            for &other in ts.choose_multiple(rng, 2) {
                if other != tc {
                    push(&mut edges, &w.n_codes[tc], &w.n_codes[other], "RN");
                }
            }
        }
    }
    // A few hub concepts connected across clusters.
    let all_text: Vec<usize> = (0..w.n_codes.len()).collect();
    for k in 0..w.texts.len().min(3) {
        let hub = w.texts[k][0];
        for &other in all_text.choose_multiple(rng, 20) {
            if other != hub {
                push(&mut edges, &w.n_codes[hub], &w.n_codes[other], "RO");
            }
        }
    }
    let n_noise = (edges.len() / 20).max(1);
    for _ in 0..n_noise {
        let a = rng.random_range(0..w.d_codes.len());
        let b = rng.random_range(0..w.n_codes.len());
        push(&mut edges, &w.d_codes[a], &w.n_codes[b], "RO");
    }
    for i in 0..5 {
        push(&mut edges, &w.n_codes[i % w.n_codes.len()], &format!("C9{:06}", i), "RO");
    }
    let dups: Vec<(String, String, String)> = edges.iter().step_by(17).take(10).cloned().collect();
    for (a, b, r) in dups {
        edges.push((b, a, r));
    }
    edges
}

/// Writes a node-feature file aligned with `vocab`: each row is its
/// cluster's centroid plus Gaussian noise. Concepts without a cluster get
/// pure noise.
pub fn write_node_features(
    path: &Path,
    vocab: &Vocabulary,
    concept_cluster: &[usize],
    width: usize,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let n_clusters = concept_cluster.iter().max().map_or(0, |m| m + 1);
    let centroids: Vec<Vec<f64>> = (0..n_clusters).map(|_| (0..width).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{} {} text", vocab.len(), width)?;
    for i in 0..vocab.len() {
        let row: Vec<String> = (0..width)
            .map(|j| {
                let base = concept_cluster.get(i).map_or(0.0, |&c| centroids[c][j]);
                format!("{}", base + 0.5 * unit.sample(&mut rng))
            })
            .collect();
        writeln!(f, "{}", row.join(" "))?;
    }
    f.flush()?;
    Ok(())
}
