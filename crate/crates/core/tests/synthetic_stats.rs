use std::collections::BTreeSet;

use medkg::ehr::{generate_synthetic, make_splits, SyntheticConfig, SyntheticCorpus};

fn corpus() -> (SyntheticConfig, SyntheticCorpus) {
    let cfg = SyntheticConfig { n_patients: 1000, seed: 0, ..SyntheticConfig::default() };
    let c = generate_synthetic(&cfg).unwrap();
    (cfg, c)
}

fn within_3_sigma(observed: f64, expected: f64, sigma: f64, what: &str) {
    assert!((observed - expected).abs() <= 3.0 * sigma, "{what}: {observed} vs {expected} ± 3·{sigma}");
}

#[test]
fn statistics_match_configured_targets() {
    let (cfg, c) = corpus();
    let n = c.dataset.patients.len() as f64;
    let single = c.dataset.patients.iter().filter(|p| p.visits.len() == 1).count() as f64 / n;
    let p = cfg.single_visit_rate;
    within_3_sigma(single, p, (p * (1.0 - p) / n).sqrt(), "single-visit rate");

    // Multi-visit counts are 2 + Poisson(mean - 2), capped at max_visits.
    let lambda = cfg.mean_visits - 2.0;
    let (mut mean, mut second) = (0.0, 0.0);
    let mut pk = (-lambda).exp();
    for k in 0..60usize {
        let v = (2 + k).min(cfg.max_visits) as f64;
        mean += pk * v;
        second += pk * v * v;
        pk *= lambda / (k + 1) as f64;
    }
    let multi: Vec<f64> = c.dataset.patients.iter().filter(|p| p.visits.len() > 1).map(|p| p.visits.len() as f64).collect();
    let observed = multi.iter().sum::<f64>() / multi.len() as f64;
    within_3_sigma(observed, mean, ((second - mean * mean) / multi.len() as f64).sqrt(), "multi-visit mean");

    let flags: Vec<bool> = c
        .dataset
        .patients
        .iter()
        .flat_map(|p| p.visits.iter().flat_map(|v| v.text_concepts.iter().map(|t| t.negated)))
        .collect();
    let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    let q = cfg.negation_rate;
    within_3_sigma(rate, q, (q * (1.0 - q) / flags.len() as f64).sqrt(), "negation rate");

    // Cluster 0 is drawn with twice the weight of the others.
    let p0 = 2.0 / (cfg.n_clusters + 1) as f64;
    let share0 = c.patient_cluster.iter().filter(|&&k| k == 0).count() as f64 / n;
    within_3_sigma(share0, p0, (p0 * (1.0 - p0) / n).sqrt(), "cluster 0 share");
}

#[test]
fn same_cluster_pairs_cooccur_more_than_cross_cluster_pairs() {
    let (_, c) = corpus();
    let n_d = c.vocab.of_type(medkg::kgraph::ConceptType::D).len();
    let mut counts = vec![0u32; n_d * n_d];
    for p in &c.dataset.patients {
        for v in &p.visits {
            let ids: Vec<usize> = v.codes_d.iter().map(|code| c.vocab.get(code).unwrap()).collect();
            for &a in &ids {
                for &b in &ids {
                    if a < b {
                        counts[a * n_d + b] += 1;
                    }
                }
            }
        }
    }
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0.0, 0.0, 0.0);
    for a in 0..n_d {
        for b in a + 1..n_d {
            let x = f64::from(counts[a * n_d + b]);
            if c.concept_cluster[a] == c.concept_cluster[b] {
                same += x;
                n_same += 1.0;
            } else {
                cross += x;
                n_cross += 1.0;
            }
        }
    }
    assert!(same / n_same > 5.0 * (cross / n_cross), "{} vs {}", same / n_same, cross / n_cross);
}

#[test]
fn test_patients_are_never_pretrained_on() {
    let (_, c) = corpus();
    let s = make_splits(&c.dataset, [0.7, 0.1, 0.2], 0).unwrap();
    let pre: BTreeSet<&String> = s.pretrain.iter().collect();
    let train: BTreeSet<&String> = s.train.iter().collect();
    for id in s.test.iter().chain(&s.validation) {
        assert!(!pre.contains(id) && !train.contains(id));
    }
    assert!(train.is_subset(&pre));
    for id in pre.difference(&train) {
        assert_eq!(c.dataset.get(id).unwrap().visits.len(), 1);
    }
}
