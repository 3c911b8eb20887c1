use medkg::downstream::{finetune_store, DownstreamModel, FinetuneConfig, Task};
use medkg::ehr::{EncodedPatient, EncodedVisit};
use medkg::embed::{ConceptEmbedder, EmbedConfig, EmbedderVariant};
use medkg::encoder::{EncoderConfig, Token, VisitEncoder, VisitTokens};
use medkg::kgraph::{ConceptType, Vocabulary};
use medkg::pretrain::{ModelConfig, PretrainModel};
use numcore::{sigmoid, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 4;

fn setup(task: Task, n_q: usize, hidden: Vec<usize>) -> (DownstreamModel, ParamStore, Tensor) {
    let vocab = Vocabulary::from_entries(
        ["428.0", "401.1", "250.0", "414.2"]
            .iter()
            .map(|&c| (c, ConceptType::D))
            .chain(["C01AA01", "C03BB02", "A10BA02"].iter().map(|&c| (c, ConceptType::M))),
    )
    .unwrap();
    let embedder = ConceptEmbedder::matrix(&vocab, EmbedConfig { variant: EmbedderVariant::EmbeddingMatrix, k: K, depth: 0, stacks: 0 }).unwrap();
    let encoder = VisitEncoder::new(EncoderConfig { k: K, n_layers: 1, n_heads: 2, ffn_mult: 2 }).unwrap();
    let base = PretrainModel::new(embedder, encoder, ModelConfig { include_text: false, decoder_hidden: 4 }).unwrap();
    let mut pre = ParamStore::new();
    base.init_params(&mut pre, &mut ChaCha8Rng::seed_from_u64(3), None).unwrap();
    let cfg = FinetuneConfig { n_q: Some(n_q), head_hidden: Some(hidden), ..Default::default() };
    let model = DownstreamModel::new(task, base, &cfg).unwrap();
    let mut store = finetune_store(&model, &pre, 9).unwrap();
    // Nonzero biases so every term is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("ds.") && n.ends_with('b')).map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let table = model.base.embedder.compute_table(&store).unwrap();
    (model, store, table)
}

fn patient(n: usize) -> EncodedPatient {
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let visits = (0..n)
        .map(|t| {
            let d: Vec<usize> = (0..4).filter(|_| rng.random_bool(0.5)).collect();
            let m: Vec<usize> = (4..7).filter(|_| rng.random_bool(0.5)).collect();
            EncodedVisit { time_days: 30.0 * t as f64, duration_days: 1.0, ..EncodedVisit::from_codes(d, m) }
        })
        .collect();
    EncodedPatient { patient_id: "p".into(), visits }
}

/// Concatenated visit representations computed one visit at a time.
fn visit_reprs(model: &DownstreamModel, store: &ParamStore, table: &Tensor, visits: &[EncodedVisit]) -> Vec<Vec<f64>> {
    visits
        .iter()
        .map(|v| {
            let mut g = Graph::new();
            let enc = model.base.encoder.bind(&mut g, store).unwrap();
            let t = g.constant(table.clone()).unwrap();
            let ext = enc.extend_table(&mut g, t).unwrap();
            let r = enc.encode_visit(&mut g, ext, &VisitTokens::from_visit(v), false).unwrap();
            let c = enc.concat_repr(&mut g, &r).unwrap();
            g.value(c).data().to_vec()
        })
        .collect()
}

fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn head(store: &ParamStore, layers: usize, x: Vec<f64>) -> Vec<f64> {
    let mut h = x;
    for l in 0..layers {
        let w = store.get(&format!("ds.head.l{l}.w")).unwrap();
        let b = store.get(&format!("ds.head.l{l}.b")).unwrap();
        h = add(&vecmat(&h, w), b.data());
        if l + 1 < layers {
            h = h.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    h
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn pooled_history_matches_brute_force_mean() {
    let (model, store, table) = setup(Task::MedicationRecommendation, 1, vec![5]);
    let p = patient(6);
    let t = 5;
    let reprs = visit_reprs(&model, &store, &table, &p.visits[..t]);
    let mut mean = vec![0.0; 2 * K];
    for r in &reprs {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / t as f64;
        }
    }
    let mut g = Graph::new();
    let enc = model.base.encoder.bind(&mut g, &store).unwrap();
    let tv = g.constant(table.clone()).unwrap();
    let ext = enc.extend_table(&mut g, tv).unwrap();
    let tokens: Vec<Token> = p.visits[t].d.iter().map(|&c| Token::Concept(c)).collect();
    let cur = enc.encode_tokens(&mut g, ext, &tokens, &vec![false; tokens.len()], ConceptType::D).unwrap();
    let mut input = mean;
    input.extend(g.value(cur.cls).data());
    let expected = head(&store, 2, input);
    let got = model.predict_patient(&store, &table, &p, t).unwrap();
    close(&got.logits, &expected);
}

#[test]
fn temporal_attention_matches_brute_force_loop() {
    let n_q = 3;
    let (model, store, table) = setup(Task::HeartFailure, n_q, vec![6, 5]);
    let p = patient(5);
    let t = 4;
    let xs = visit_reprs(&model, &store, &table, &p.visits[..t]);
    let w = |n: &str| store.get(&format!("ds.gru.{n}")).unwrap();
    let h_dim = 2 * K;
    let mut h = vec![0.0; h_dim];
    let mut states = Vec::new();
    for x in &xs {
        let z: Vec<f64> = add(&add(&vecmat(x, w("wz")), &vecmat(&h, w("uz"))), w("bz").data()).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = add(&add(&vecmat(x, w("wr")), &vecmat(&h, w("ur"))), w("br").data()).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = add(&add(&vecmat(x, w("wh")), &vecmat(&rh, w("uh"))), w("bh").data()).into_iter().map(f64::tanh).collect();
        h = (0..h_dim).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        states.push(h.clone());
    }
    let q = store.get("ds.q").unwrap();
    let mut pooled = vec![0.0; h_dim];
    let mut temporal = Vec::new();
    for a in 0..n_q {
        let scores: Vec<f64> = states.iter().map(|s| s.iter().zip(q.row(a)).map(|(x, y)| x * y).sum()).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let att: Vec<f64> = e.iter().map(|v| v / z).collect();
        for (j, s) in states.iter().enumerate() {
            for i in 0..h_dim {
                pooled[i] += att[j] * s[i] / n_q as f64;
            }
        }
        temporal.push(att);
    }
    let expected = head(&store, 3, pooled);
    let got = model.predict_patient(&store, &table, &p, t).unwrap();
    close(&got.logits, &expected);
    assert_eq!(got.trace.temporal.len(), n_q);
    for (a, b) in got.trace.temporal.iter().zip(&temporal) {
        close(a, b);
    }
}
