//! Shared transformer set encoder with a learned CLS token.
//!
//! Each concept type is encoded separately by the same transformer; the
//! per-type input projection absorbs the negation bit. There is no
//! positional encoding, and token rows are put in a canonical order before
//! attention so outputs are bitwise invariant to input order.

use std::cmp::Ordering;
use std::rc::Rc;

use numcore::{multihead_attention, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::EncodedVisit;
use crate::embed::lookup;
use crate::error::{invalid, Error, Result};
use crate::init;
use crate::kgraph::ConceptType;

pub const PREFIX: &str = "enc.";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.k.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("k={} not divisible by {} heads", self.k, self.n_heads)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub selection_rate: f64,
    pub mask_prob: f64,
    pub replace_prob: f64,
    pub keep_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { selection_rate: 0.15, mask_prob: 0.8, replace_prob: 0.1, keep_prob: 0.1 }
    }
}

impl CorruptionConfig {
    pub fn none() -> Self {
        Self { selection_rate: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let p = [self.selection_rate, self.mask_prob, self.replace_prob, self.keep_prob];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return invalid("corruption rates must lie in [0,1]");
        }
        if (self.mask_prob + self.replace_prob + self.keep_prob - 1.0).abs() > 1e-9 {
            return invalid("mask, replace and keep probabilities must sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Concept(usize),
    Mask,
}

/// Replaces each token, independently with probability `selection_rate`,
/// by MASK, by a uniform draw from `pool`, or leaves it. Returns the
/// corrupted tokens and the selection mask.
pub fn corrupt_tokens(
    tokens: &[Token],
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
    pool: &[usize],
) -> Result<(Vec<Token>, Vec<bool>)> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(tokens.len());
    let mut selected = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if cfg.selection_rate > 0.0 && rng.random_bool(cfg.selection_rate) {
            let u: f64 = rng.random();
            let replaced = if u < cfg.mask_prob {
                Token::Mask
            } else if u < cfg.mask_prob + cfg.replace_prob && !pool.is_empty() {
                Token::Concept(pool[rng.random_range(0..pool.len())])
            } else {
                t
            };
            out.push(replaced);
            selected.push(true);
        } else {
            out.push(t);
            selected.push(false);
        }
    }
    Ok((out, selected))
}

/// Tokens of one visit, before lookup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisitTokens {
    pub d: Vec<Token>,
    pub m: Vec<Token>,
    pub n: Vec<Token>,
    pub n_negated: Vec<bool>,
}

impl VisitTokens {
    pub fn from_visit(v: &EncodedVisit) -> Self {
        Self {
            d: v.d.iter().map(|&c| Token::Concept(c)).collect(),
            m: v.m.iter().map(|&c| Token::Concept(c)).collect(),
            n: v.n.iter().map(|t| Token::Concept(t.concept)).collect(),
            n_negated: v.n.iter().map(|t| t.negated).collect(),
        }
    }

    pub fn of_type(&self, ty: ConceptType) -> &[Token] {
        match ty {
            ConceptType::D => &self.d,
            ConceptType::M => &self.m,
            ConceptType::N => &self.n,
            ConceptType::Internal => &[],
        }
    }

    pub fn of_type_mut(&mut self, ty: ConceptType) -> &mut Vec<Token> {
        match ty {
            ConceptType::D => &mut self.d,
            ConceptType::M => &mut self.m,
            _ => &mut self.n,
        }
    }

    pub fn flags(&self, ty: ConceptType) -> Vec<bool> {
        match ty {
            ConceptType::N => self.n_negated.clone(),
            _ => vec![false; self.of_type(ty).len()],
        }
    }
}

struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2_g: Var,
    ln2_b: Var,
}

/// Encoder parameters bound to one tape.
pub struct EncoderVars {
    n_heads: usize,
    k: usize,
    cls: Var,
    mask: Var,
    input: [(Var, Var); 3],
    layers: Vec<LayerVars>,
}

#[derive(Debug, Clone)]
pub struct TypeEncoding {
    /// CLS output, `1 x k`.
    pub cls: Var,
    /// Non-CLS outputs in canonical order, `q x k`; `None` for empty sets.
    pub tokens: Option<Var>,
    /// CLS-to-token attention in input order, head-averaged over the final
    /// layer and renormalized over the non-CLS tokens.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct VisitRepr {
    pub d: TypeEncoding,
    pub m: TypeEncoding,
    pub n: Option<TypeEncoding>,
}

impl VisitRepr {
    pub fn get(&self, ty: ConceptType) -> Option<&TypeEncoding> {
        match ty {
            ConceptType::D => Some(&self.d),
            ConceptType::M => Some(&self.m),
            ConceptType::N => self.n.as_ref(),
            ConceptType::Internal => None,
        }
    }

    /// Number of components `r`.
    pub fn arity(&self) -> usize {
        2 + usize::from(self.n.is_some())
    }
}

fn type_slot(ty: ConceptType) -> Result<usize> {
    match ty {
        ConceptType::D => Ok(0),
        ConceptType::M => Ok(1),
        ConceptType::N => Ok(2),
        ConceptType::Internal => invalid("internal nodes are not visit tokens"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisitEncoder {
    pub config: EncoderConfig,
}

impl VisitEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k = self.config.k;
        let f = k * self.config.ffn_mult;
        store.insert(format!("{PREFIX}cls"), init::normal(rng, 1, k, 1.0));
        store.insert(format!("{PREFIX}mask"), init::normal(rng, 1, k, 1.0 / (k as f64).sqrt()));
        for ty in ["d", "m", "n"] {
            store.insert(format!("{PREFIX}in.{ty}.w"), init::xavier(rng, k + 1, k));
            store.insert(format!("{PREFIX}in.{ty}.b"), Tensor::zeros(1, k));
        }
        for l in 0..self.config.n_layers {
            let p = |s: &str| format!("{PREFIX}l{l}.{s}");
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(p(w), init::xavier(rng, k, k));
            }
            for b in ["bq", "bk", "bv", "bo", "ln1.b", "ln2.b", "ffn.b2"] {
                store.insert(p(b), Tensor::zeros(1, k));
            }
            store.insert(p("ln1.g"), Tensor::filled(1, k, 1.0));
            store.insert(p("ln2.g"), Tensor::filled(1, k, 1.0));
            store.insert(p("ffn.w1"), init::xavier(rng, k, f));
            store.insert(p("ffn.b1"), Tensor::zeros(1, f));
            store.insert(p("ffn.w2"), init::xavier(rng, f, k));
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<EncoderVars> {
        let mut param = |name: String| g.param(store, &name);
        let cls = param(format!("{PREFIX}cls"))?;
        let mask = param(format!("{PREFIX}mask"))?;
        let mut input = Vec::with_capacity(3);
        for ty in ["d", "m", "n"] {
            input.push((param(format!("{PREFIX}in.{ty}.w"))?, param(format!("{PREFIX}in.{ty}.b"))?));
        }
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let mut p = |s: &str| param(format!("{PREFIX}l{l}.{s}"));
            layers.push(LayerVars {
                wq: p("wq")?,
                bq: p("bq")?,
                wk: p("wk")?,
                bk: p("bk")?,
                wv: p("wv")?,
                bv: p("bv")?,
                wo: p("wo")?,
                bo: p("bo")?,
                ln1_g: p("ln1.g")?,
                ln1_b: p("ln1.b")?,
                w1: p("ffn.w1")?,
                b1: p("ffn.b1")?,
                w2: p("ffn.w2")?,
                b2: p("ffn.b2")?,
                ln2_g: p("ln2.g")?,
                ln2_b: p("ln2.b")?,
            });
        }
        let input = [input[0], input[1], input[2]];
        Ok(EncoderVars { n_heads: self.config.n_heads, k: self.config.k, cls, mask, input, layers })
    }
}

impl EncoderVars {
    /// Concept table with the MASK embedding appended as the last row.
    pub fn extend_table(&self, g: &mut Graph, table: Var) -> Result<Var> {
        Ok(g.concat_rows(&[table, self.mask])?)
    }

    fn layer(&self, g: &mut Graph, x: Var, l: &LayerVars) -> Result<(Var, Vec<Tensor>)> {
        let q = g.linear(x, l.wq, l.bq)?;
        let k = g.linear(x, l.wk, l.bk)?;
        let v = g.linear(x, l.wv, l.bv)?;
        let att = multihead_attention(g, q, k, v, self.n_heads)?;
        let o = g.linear(att.output, l.wo, l.bo)?;
        let r = g.add(x, o)?;
        let x = g.layer_norm(r, l.ln1_g, l.ln1_b, LN_EPS)?;
        let h = g.linear(x, l.w1, l.b1)?;
        let h = g.relu(h)?;
        let f = g.linear(h, l.w2, l.b2)?;
        let r = g.add(x, f)?;
        Ok((g.layer_norm(r, l.ln2_g, l.ln2_b, LN_EPS)?, att.weights))
    }

    /// Encodes a set of token embeddings (`q x k`, `None` when empty) with
    /// their negation flags.
    pub fn encode_type_set(&self, g: &mut Graph, embeddings: Option<Var>, flags: &[bool], ty: ConceptType) -> Result<TypeEncoding> {
        let slot = type_slot(ty)?;
        let q = embeddings.map_or(0, |e| g.shape(e).0);
        if flags.len() != q {
            return invalid(format!("{} negation flags for {q} tokens", flags.len()));
        }
        let Some(emb) = embeddings.filter(|_| q > 0) else {
            let mut x = self.cls;
            for l in &self.layers {
                x = self.layer(g, x, l)?.0;
            }
            return Ok(TypeEncoding { cls: x, tokens: None, attention: Vec::new() });
        };
        if g.shape(emb).1 != self.k {
            return invalid(format!("token width {} != k={}", g.shape(emb).1, self.k));
        }

        // Canonical row order: lexicographic on (embedding, flag).
        let value = g.value(emb).clone();
        let mut order: Vec<usize> = (0..q).collect();
        order.sort_by(|&a, &b| {
            for (x, y) in value.row(a).iter().zip(value.row(b)) {
                match x.total_cmp(y) {
                    Ordering::Equal => continue,
                    o => return o,
                }
            }
            flags[a].cmp(&flags[b])
        });
        let sorted = g.gather_rows(emb, Rc::from(order.as_slice()))?;
        let flag_col = Tensor::column_vector(order.iter().map(|&i| f64::from(u8::from(flags[i]))).collect());
        let flag_col = g.constant(flag_col)?;
        let with_flag = g.concat_cols(&[sorted, flag_col])?;
        let (w, b) = self.input[slot];
        let tokens = g.linear(with_flag, w, b)?;

        let mut x = g.concat_rows(&[self.cls, tokens])?;
        let mut last = Vec::new();
        for l in &self.layers {
            let (y, weights) = self.layer(g, x, l)?;
            x = y;
            last = weights;
        }
        let mut att_sorted = vec![0.0; q];
        for w in &last {
            for (a, v) in att_sorted.iter_mut().zip(&w.row(0)[1..]) {
                *a += v;
            }
        }
        let total: f64 = att_sorted.iter().sum();
        let mut attention = vec![0.0; q];
        for (pos, &orig) in order.iter().enumerate() {
            attention[orig] = att_sorted[pos] / total;
        }
        let cls = g.slice_rows(x, 0, 1)?;
        let outputs = g.slice_rows(x, 1, q + 1)?;
        Ok(TypeEncoding { cls, tokens: Some(outputs), attention })
    }

    /// Looks tokens up in an extended table (see [`Self::extend_table`];
    /// MASK is its last row) and encodes them.
    pub fn encode_tokens(&self, g: &mut Graph, ext_table: Var, tokens: &[Token], flags: &[bool], ty: ConceptType) -> Result<TypeEncoding> {
        let (rows, _) = g.shape(ext_table);
        let mask_row = rows - 1;
        let idx: Vec<usize> = tokens
            .iter()
            .map(|t| match *t {
                Token::Concept(c) if c < mask_row => Ok(c),
                Token::Concept(c) => Err(Error::Unresolvable(format!("concept index {c}"))),
                Token::Mask => Ok(mask_row),
            })
            .collect::<Result<_>>()?;
        let emb = if idx.is_empty() { None } else { Some(lookup(g, ext_table, &idx)?) };
        self.encode_type_set(g, emb, flags, ty)
    }

    /// Encodes every present type of a visit with the shared transformer;
    /// `include_text = false` drops the text component.
    pub fn encode_visit(&self, g: &mut Graph, ext_table: Var, visit: &VisitTokens, include_text: bool) -> Result<VisitRepr> {
        let d = self.encode_tokens(g, ext_table, &visit.d, &visit.flags(ConceptType::D), ConceptType::D)?;
        let m = self.encode_tokens(g, ext_table, &visit.m, &visit.flags(ConceptType::M), ConceptType::M)?;
        let n = if include_text {
            Some(self.encode_tokens(g, ext_table, &visit.n, &visit.n_negated, ConceptType::N)?)
        } else {
            None
        };
        Ok(VisitRepr { d, m, n })
    }

    /// Sum of the non-CLS outputs; zeros for an empty set.
    pub fn sum_aggregate(&self, g: &mut Graph, enc: &TypeEncoding) -> Result<Var> {
        match enc.tokens {
            Some(t) => Ok(g.sum_rows(t)?),
            None => Ok(g.constant(Tensor::zeros(1, self.k))?),
        }
    }

    /// `v(d) ⊕ v(m) [⊕ v(n)]`, width `k * r`.
    pub fn concat_repr(&self, g: &mut Graph, r: &VisitRepr) -> Result<Var> {
        let mut parts = vec![r.d.cls, r.m.cls];
        if let Some(n) = &r.n {
            parts.push(n.cls);
        }
        Ok(g.concat_cols(&parts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(k: usize) -> (VisitEncoder, ParamStore) {
        let enc = VisitEncoder::new(EncoderConfig { k, n_layers: 1, n_heads: 2, ffn_mult: 4 }).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (enc, store)
    }

    #[test]
    fn permuted_set_is_bit_identical() {
        let (enc, store) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = init::normal(&mut rng, 5, 8, 1.0);
        let flags = [true, false, false, true, false];
        let perm = [3, 0, 4, 1, 2];
        let run = |rows: Tensor, flags: &[bool]| {
            let mut g = Graph::new();
            let vars = enc.bind(&mut g, &store).unwrap();
            let e = g.constant(rows).unwrap();
            let out = vars.encode_type_set(&mut g, Some(e), flags, ConceptType::N).unwrap();
            (g.value(out.cls).clone(), out.attention)
        };
        let (a, att_a) = run(rows.clone(), &flags);
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| rows.row(i).to_vec()).collect::<Vec<_>>());
        let pflags: Vec<bool> = perm.iter().map(|&i| flags[i]).collect();
        let (b, att_b) = run(permuted, &pflags);
        assert!(a.bit_eq(&b));
        for (pos, &i) in perm.iter().enumerate() {
            assert_eq!(att_b[pos].to_bits(), att_a[i].to_bits());
        }
        assert!((att_a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_set_is_cls_alone_and_singleton_gets_full_attention() {
        let (enc, store) = setup(4);
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, &store).unwrap();
        let empty = vars.encode_type_set(&mut g, None, &[], ConceptType::D).unwrap();
        assert!(empty.attention.is_empty() && empty.tokens.is_none());
        let mut x = vars.cls;
        for l in &vars.layers {
            x = vars.layer(&mut g, x, l).unwrap().0;
        }
        assert!(g.value(empty.cls).bit_eq(g.value(x)));
        let sum = vars.sum_aggregate(&mut g, &empty).unwrap();
        assert_eq!(g.value(sum).data(), &[0.0; 4]);

        let one = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]])).unwrap();
        let single = vars.encode_type_set(&mut g, Some(one), &[false], ConceptType::D).unwrap();
        assert_eq!(single.attention, vec![1.0]);
        let sum = vars.sum_aggregate(&mut g, &single).unwrap();
        assert!(g.value(sum).bit_eq(g.value(single.tokens.unwrap())));
    }

    #[test]
    fn sum_matches_loop() {
        let (enc, store) = setup(4);
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, &store).unwrap();
        let e = g.constant(init::normal(&mut ChaCha8Rng::seed_from_u64(5), 6, 4, 1.0)).unwrap();
        let out = vars.encode_type_set(&mut g, Some(e), &[false; 6], ConceptType::M).unwrap();
        let sum = vars.sum_aggregate(&mut g, &out).unwrap();
        let tokens = g.value(out.tokens.unwrap());
        for c in 0..4 {
            let mut s = 0.0;
            for r in 0..6 {
                s += tokens.get(r, c);
            }
            assert!((g.value(sum).data()[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn visit_without_text_has_two_components() {
        let (enc, store) = setup(4);
        let mut g = Graph::new();
        let vars = enc.bind(&mut g, &store).unwrap();
        let table = g.constant(init::normal(&mut ChaCha8Rng::seed_from_u64(6), 5, 4, 1.0)).unwrap();
        let ext = vars.extend_table(&mut g, table).unwrap();
        let v = VisitTokens {
            d: vec![Token::Concept(0), Token::Concept(1)],
            m: vec![],
            n: vec![Token::Concept(3)],
            n_negated: vec![true],
        };
        let r = vars.encode_visit(&mut g, ext, &v, false).unwrap();
        assert_eq!(r.arity(), 2);
        assert!(r.m.tokens.is_none());
        let again = vars.encode_visit(&mut g, ext, &v, true).unwrap();
        assert!(g.value(r.d.cls).bit_eq(g.value(again.d.cls)));
        assert_eq!(again.arity(), 3);
        let bad = VisitTokens { d: vec![Token::Concept(9)], ..Default::default() };
        assert!(vars.encode_visit(&mut g, ext, &bad, false).is_err());
    }

    #[test]
    fn corruption_examples() {
        let tokens: Vec<Token> = (0..50).map(Token::Concept).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (same, sel) = corrupt_tokens(&tokens, &CorruptionConfig::none(), &mut rng, &[0, 1]).unwrap();
        assert_eq!(same, tokens);
        assert!(sel.iter().all(|s| !s));
        let all = CorruptionConfig { selection_rate: 1.0, mask_prob: 1.0, replace_prob: 0.0, keep_prob: 0.0 };
        let (masked, _) = corrupt_tokens(&tokens, &all, &mut rng, &[0, 1]).unwrap();
        assert!(masked.iter().all(|t| *t == Token::Mask));
        let a = corrupt_tokens(&tokens, &CorruptionConfig::default(), &mut ChaCha8Rng::seed_from_u64(9), &[0, 1]).unwrap();
        let b = corrupt_tokens(&tokens, &CorruptionConfig::default(), &mut ChaCha8Rng::seed_from_u64(9), &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), tokens.len());
        let bad = CorruptionConfig { mask_prob: 0.5, ..Default::default() };
        assert!(corrupt_tokens(&tokens, &bad, &mut rng, &[]).is_err());
    }
}
