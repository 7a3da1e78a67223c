//! Caption metrics (BLEU-4, ROUGE-L, METEOR-lite, CIDEr), relation
//! accuracy and the per-relation and positive/negative breakdowns.
//!
//! Every metric takes tokenized hypotheses and, per hypothesis, one or more
//! tokenized references. Returned scores are on the tool's native scale
//! (BLEU/ROUGE/METEOR in [0, 1], CIDEr in [0, 10]); [`EvalReport`] scales
//! them by 100.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataspace::SpatialRelation;
use crate::error::{Result, VsdError};

/// Lowercases, splits on whitespace and detaches ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Normalizes already-split tokens the same way as [`tokenize`].
pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokenize(&tokens.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" "))
}

pub type Tokens = Vec<String>;

fn check_corpus(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(VsdError::InvalidInput("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(VsdError::InvalidInput(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(VsdError::InvalidInput(format!("instance {i} has no reference")));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

pub const BLEU_SMOOTHING_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    /// Replace zero clipped n-gram counts by [`BLEU_SMOOTHING_EPSILON`].
    pub smoothing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuDetail {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU-4 with clipped counts against the per-n-gram maximum over
/// references and the closest reference length (shorter on ties).
pub fn bleu4_detail(hyps: &[Tokens], refs: &[Vec<Tokens>], cfg: BleuConfig) -> Result<BleuDetail> {
    check_corpus(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        r += rs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for x in rs {
                for (g, k) in ngram_counts(x, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in hc {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        let num = if matched[n] == 0 && cfg.smoothing {
            BLEU_SMOOTHING_EPSILON
        } else {
            matched[n] as f64
        };
        precisions[n] = num / total[n].max(1) as f64;
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuDetail {
        score,
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

pub fn bleu4(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    Ok(bleu4_detail(hyps, refs, BleuConfig::default())?.score)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L: maximum LCS precision and recall over the references,
/// combined as `(1 + β²) P R / (R + β² P)`.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Tokens]) -> f64 {
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for x in refs {
        let l = lcs_len(hyp, x) as f64;
        if !hyp.is_empty() {
            p = p.max(l / hyp.len() as f64);
        }
        if !x.is_empty() {
            r = r.max(l / x.len() as f64);
        }
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L.
pub fn rouge_l(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Light suffix stripper for the stem-matching stage.
pub fn stem(word: &str) -> String {
    const SUFFIXES: [&str; 8] = ["ingly", "edly", "ing", "ies", "ed", "es", "ly", "s"];
    for suf in SUFFIXES {
        if let Some(base) = word.strip_suffix(suf) {
            if base.chars().count() >= 3 {
                if suf == "ies" {
                    return format!("{base}y");
                }
                let b = base.as_bytes();
                let doubled = suf.starts_with("ing") || suf.starts_with("ed");
                let n = b.len();
                if doubled && b[n - 1].is_ascii_alphabetic() && b[n - 1] == b[n - 2] && !b"aeioulsz".contains(&b[n - 1]) {
                    return base[..n - 1].to_string();
                }
                return base.to_string();
            }
        }
    }
    word.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteorAlignment {
    /// `(hyp index, ref index)` pairs sorted by hypothesis index.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
}

/// Two-stage unigram alignment: exact matches first, then stem matches on
/// what is left. Each hypothesis token, left to right, takes the earliest
/// unmatched reference token.
pub fn meteor_align(hyp: &[String], reference: &[String]) -> MeteorAlignment {
    let mut h_used = vec![false; hyp.len()];
    let mut r_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stems_h: Vec<String> = hyp.iter().map(|w| stem(w)).collect();
    let stems_r: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        for i in 0..hyp.len() {
            if h_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !r_used[j]
                    && if stage == 0 {
                        hyp[i] == reference[j]
                    } else {
                        stems_h[i] == stems_r[j]
                    }
            });
            if let Some(j) = hit {
                h_used[i] = true;
                r_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut chunks = 0;
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let continues = k > 0 && {
            let (pi, pj) = pairs[k - 1];
            i == pi + 1 && j == pj + 1
        };
        if !continues {
            chunks += 1;
        }
    }
    MeteorAlignment { pairs, chunks }
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// `F_mean (1 − pen)` with `F_mean = P R / (α P + (1 − α) R)` and
/// `pen = γ (chunks / matches)^β`; a single contiguous chunk is not
/// penalized.
pub fn meteor_sentence_single(hyp: &[String], reference: &[String]) -> f64 {
    let a = meteor_align(hyp, reference);
    let m = a.pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let pen = if a.chunks <= 1 {
        0.0
    } else {
        METEOR_GAMMA * (a.chunks as f64 / m as f64).powf(METEOR_BETA)
    };
    fmean * (1.0 - pen)
}

/// Best score over the references, averaged over the corpus.
pub fn meteor_lite(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, rs)| rs.iter().map(|r| meteor_sentence_single(h, r)).fold(0.0, f64::max))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Document frequencies for CIDEr: one document per instance, holding the
/// union of its references' n-grams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdfTable {
    pub n_docs: usize,
    pub doc_freq: BTreeMap<Vec<String>, usize>,
}

impl IdfTable {
    pub fn from_references(refs: &[Vec<Tokens>]) -> Self {
        let mut doc_freq: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for rs in refs {
            let mut seen: BTreeSet<&[String]> = Default::default();
            for r in rs {
                for n in 1..=4 {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        IdfTable {
            n_docs: refs.len(),
            doc_freq,
        }
    }

    /// `ln(N / df)`, with `df` floored at 1.
    pub fn idf(&self, ngram: &[String]) -> f64 {
        let df = self.doc_freq.get(ngram).copied().unwrap_or(0).max(1);
        (self.n_docs.max(1) as f64 / df as f64).ln()
    }

    /// `(n-gram text, idf)` sorted by ascending idf, then text.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.doc_freq.keys().map(|g| (g.join(" "), self.idf(g))).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

fn tfidf_vector<'a>(tokens: &'a [String], n: usize, idf: &IdfTable) -> BTreeMap<&'a [String], f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, k)| (g, k as f64 / total as f64 * idf.idf(g)))
        .collect()
}

/// TF-IDF cosine for one n. Identical n-gram multisets count as 1 even
/// when every weight vanishes.
fn cider_n(hyp: &[String], reference: &[String], n: usize, idf: &IdfTable) -> f64 {
    let (hc, rc) = (ngram_counts(hyp, n), ngram_counts(reference, n));
    if hc == rc {
        return 1.0;
    }
    let (vh, vr) = (tfidf_vector(hyp, n, idf), tfidf_vector(reference, n, idf));
    let dot: f64 = vh.iter().map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0)).sum();
    let nh = vh.values().map(|w| w * w).sum::<f64>().sqrt();
    let nr = vr.values().map(|w| w * w).sum::<f64>().sqrt();
    if nh == 0.0 || nr == 0.0 {
        0.0
    } else {
        dot / (nh * nr)
    }
}

/// `10 · mean_n mean_refs cos_n(hyp, ref)` per instance, averaged.
pub fn cider_with_idf(hyps: &[Tokens], refs: &[Vec<Tokens>], idf: &IdfTable) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut total = 0.0;
    for (h, rs) in hyps.iter().zip(refs) {
        let mut s = 0.0;
        for n in 1..=4 {
            s += rs.iter().map(|r| cider_n(h, r, n, idf)).sum::<f64>() / rs.len() as f64;
        }
        total += 10.0 * s / 4.0;
    }
    Ok(total / hyps.len() as f64)
}

/// CIDEr with document frequencies taken from `refs` itself.
pub fn cider(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    cider_with_idf(hyps, refs, &IdfTable::from_references(refs))
}

/// Exact-match percentage.
pub fn vsrc_accuracy(predictions: &[SpatialRelation], golds: &[SpatialRelation]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(VsdError::InvalidInput(format!(
            "{} predictions but {} gold relations",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(VsdError::InvalidInput("no relations to score".into()));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// One evaluated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: Tokens,
    pub references: Vec<Tokens>,
    pub gold: SpatialRelation,
    pub predicted: Option<SpatialRelation>,
}

/// Corpus scores ×100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VsdScores {
    pub count: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider: f64,
}

impl VsdScores {
    pub fn compute(records: &[&EvalRecord]) -> Result<Self> {
        let hyps: Vec<Tokens> = records.iter().map(|r| r.hypothesis.clone()).collect();
        let refs: Vec<Vec<Tokens>> = records.iter().map(|r| r.references.clone()).collect();
        Ok(VsdScores {
            count: records.len(),
            bleu4: 100.0 * bleu4(&hyps, &refs)?,
            rouge_l: 100.0 * rouge_l(&hyps, &refs)?,
            meteor_lite: 100.0 * meteor_lite(&hyps, &refs)?,
            cider: 100.0 * cider(&hyps, &refs)?,
        })
    }
}

/// Scores of a subset; `scores` is `None` when the bucket is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    pub empty: bool,
    pub scores: Option<VsdScores>,
}

impl Bucket {
    fn of(records: &[&EvalRecord]) -> Result<Self> {
        Ok(Bucket {
            count: records.len(),
            empty: records.is_empty(),
            scores: if records.is_empty() {
                None
            } else {
                Some(VsdScores::compute(records)?)
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: SpatialRelation,
    pub count: usize,
    pub empty: bool,
    pub bleu4: Option<f64>,
    /// Share of the bucket whose predicted relation is correct, in %.
    pub vsrc_precision: Option<f64>,
}

/// Scores within each gold-relation bucket, in relation order. Bucket
/// BLEU values do not average to the corpus BLEU unless buckets are the
/// same size.
pub fn per_relation_report(records: &[EvalRecord]) -> Result<Vec<RelationRow>> {
    let mut rows = Vec::with_capacity(SpatialRelation::COUNT);
    for rel in SpatialRelation::ALL {
        let bucket: Vec<&EvalRecord> = records.iter().filter(|r| r.gold == rel).collect();
        let bleu = if bucket.is_empty() {
            None
        } else {
            let hyps: Vec<Tokens> = bucket.iter().map(|r| r.hypothesis.clone()).collect();
            let refs: Vec<Vec<Tokens>> = bucket.iter().map(|r| r.references.clone()).collect();
            Some(100.0 * bleu4(&hyps, &refs)?)
        };
        let predicted: Vec<_> = bucket.iter().filter_map(|r| r.predicted).collect();
        let vsrc_precision = if bucket.is_empty() || predicted.len() != bucket.len() {
            None
        } else {
            Some(vsrc_accuracy(&predicted, &vec![rel; bucket.len()])?)
        };
        rows.push(RelationRow {
            relation: rel,
            count: bucket.len(),
            empty: bucket.is_empty(),
            bleu4: bleu,
            vsrc_precision,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosNegSplit {
    pub positive: Bucket,
    pub negative: Bucket,
}

/// Splits by relation correctness: positive when the predicted relation
/// equals the gold one. Records without a prediction are skipped.
pub fn pos_neg_split(records: &[EvalRecord]) -> Result<PosNegSplit> {
    let (pos, neg): (Vec<&EvalRecord>, Vec<&EvalRecord>) = records
        .iter()
        .filter(|r| r.predicted.is_some())
        .partition(|r| r.predicted == Some(r.gold));
    Ok(PosNegSplit {
        positive: Bucket::of(&pos)?,
        negative: Bucket::of(&neg)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: VsdScores,
    pub vsrc_accuracy: Option<f64>,
    pub per_relation: Vec<RelationRow>,
    pub pos_neg: Option<PosNegSplit>,
}

impl EvalReport {
    /// Relation accuracy and the positive/negative split are included only
    /// when every record carries a predicted relation.
    pub fn compute(records: &[EvalRecord]) -> Result<Self> {
        let all: Vec<&EvalRecord> = records.iter().collect();
        let scores = VsdScores::compute(&all)?;
        let with_rel = records.iter().all(|r| r.predicted.is_some());
        let (acc, pos_neg) = if with_rel {
            let p: Vec<_> = records.iter().filter_map(|r| r.predicted).collect();
            let g: Vec<_> = records.iter().map(|r| r.gold).collect();
            (Some(vsrc_accuracy(&p, &g)?), Some(pos_neg_split(records)?))
        } else {
            (None, None)
        };
        Ok(EvalReport {
            scores,
            vsrc_accuracy: acc,
            per_relation: per_relation_report(records)?,
            pos_neg,
        })
    }

    pub fn to_text(&self) -> String {
        let s = &self.scores;
        let mut out = String::new();
        let _ = writeln!(out, "instances    {}", s.count);
        let _ = writeln!(out, "BLEU-4       {:.2}", s.bleu4);
        let _ = writeln!(out, "ROUGE-L      {:.2}", s.rouge_l);
        let _ = writeln!(out, "METEOR-lite  {:.2}", s.meteor_lite);
        let _ = writeln!(out, "CIDEr        {:.2}", s.cider);
        if let Some(a) = self.vsrc_accuracy {
            let _ = writeln!(out, "VSRC acc     {a:.2}");
        }
        if let Some(pn) = &self.pos_neg {
            for (name, b) in [("positive", &pn.positive), ("negative", &pn.negative)] {
                match &b.scores {
                    Some(sc) => {
                        let _ = writeln!(out, "{name:<12} n={:<6} BLEU-4 {:.2}", b.count, sc.bleu4);
                    }
                    None => {
                        let _ = writeln!(out, "{name:<12} n=0      (empty)");
                    }
                }
            }
        }
        let _ = writeln!(out, "\n{}", self.per_relation_columns());
        out
    }

    /// Tab-separated per-relation table with a header row.
    pub fn per_relation_columns(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        let mut out = String::from("relation\tcount\tbleu4\tvsrc_precision\n");
        for r in &self.per_relation {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.relation.name(), r.count, fmt(r.bleu4), fmt(r.vsrc_precision));
        }
        out
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Keyed map of per-relation counts, handy for histograms.
pub fn relation_histogram<'a, I: IntoIterator<Item = &'a SpatialRelation>>(rels: I) -> BTreeMap<String, usize> {
    let mut m: BTreeMap<String, usize> = SpatialRelation::ALL.iter().map(|r| (r.name().to_string(), 0)).collect();
    for r in rels {
        *m.entry(r.name().to_string()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Tokens {
        tokenize(s)
    }

    fn one(h: &str, r: &str) -> (Vec<Tokens>, Vec<Vec<Tokens>>) {
        (vec![t(h)], vec![vec![t(r)]])
    }

    #[test]
    fn tokenization_is_frozen() {
        assert_eq!(t("A Cat, on the MAT."), vec!["a", "cat", ",", "on", "the", "mat", "."]);
        assert_eq!(t("  dog's\tbowl "), vec!["dog", "'", "s", "bowl"]);
        assert_eq!(normalize_tokens(&["The", "cup."]), vec!["the", "cup", "."]);
        assert!(t("").is_empty());
    }

    #[test]
    fn bleu_fixtures() {
        let (h, r) = one("a b c d", "a b c d e");
        let d = bleu4_detail(&h, &r, BleuConfig::default()).unwrap();
        assert_eq!(d.precisions, [1.0; 4]);
        assert!((d.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((100.0 * d.score - 77.88).abs() < 1e-2);
        assert!((d.score - (-0.25f64).exp()).abs() < 1e-12);

        let (h, r) = one("a cat sits on the mat", "a cat sits on the mat");
        assert!((bleu4(&h, &r).unwrap() - 1.0).abs() < 1e-12);

        let (h, r) = one("a b c x d e f", "a b c y d e f");
        assert_eq!(bleu4(&h, &r).unwrap(), 0.0);
        let smoothed = bleu4_detail(&h, &r, BleuConfig { smoothing: true }).unwrap();
        assert!(smoothed.score > 0.0 && smoothed.score < 1e-2);
        assert!(bleu4(&[], &[]).is_err());
        assert!(bleu4(&h, &[]).is_err());
    }

    #[test]
    fn bleu_hand_computed_corpus() {
        // hyp1 "the cat sat on the mat" vs "the cat is on the mat":
        //   1g 5/6, 2g 3/5, 3g 1/4, 4g 0/3
        // hyp2 "a dog" vs "a dog runs": 1g 2/2, 2g 1/1
        // corpus: 7/8, 4/6, 1/4, 0/3 → 0 without smoothing
        let hyps = vec![t("the cat sat on the mat"), t("a dog")];
        let refs = vec![vec![t("the cat is on the mat")], vec![t("a dog runs")]];
        let d = bleu4_detail(&hyps, &refs, BleuConfig::default()).unwrap();
        assert_eq!(d.precisions, [7.0 / 8.0, 4.0 / 6.0, 1.0 / 4.0, 0.0]);
        assert_eq!((d.hyp_len, d.ref_len), (8, 9));
        assert_eq!(d.score, 0.0);
        let s = bleu4_detail(&hyps, &refs, BleuConfig { smoothing: true }).unwrap();
        let oracle = (1.0f64 - 9.0 / 8.0).exp()
            * (((7.0f64 / 8.0).ln() + (4.0f64 / 6.0).ln() + 0.25f64.ln() + (1e-9f64 / 3.0).ln()) / 4.0).exp();
        assert!((s.score - oracle).abs() < 1e-12);
    }

    #[test]
    fn bleu_multi_reference_clipping_and_length() {
        // "the" appears twice in hyp, at most twice in one reference.
        let hyps = vec![t("the the the")];
        let refs = vec![vec![t("the cat"), t("the the dog")]];
        let d = bleu4_detail(&hyps, &refs, BleuConfig::default()).unwrap();
        assert_eq!(d.precisions[0], 2.0 / 3.0);
        assert_eq!(d.ref_len, 3);
        let refs = vec![vec![t("a b"), t("a b c d")]];
        let d = bleu4_detail(&[t("a b c")], &refs, BleuConfig::default()).unwrap();
        assert_eq!(d.ref_len, 2);
    }

    #[test]
    fn rouge_fixtures() {
        let (h, r) = one("a c e", "a b c d e");
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let oracle = (1.0 + b2) * 1.0 * 0.6 / (0.6 + b2 * 1.0);
        assert!((rouge_l(&h, &r).unwrap() - oracle).abs() < 1e-12);
        assert!((100.0 * oracle - 71.764_705_882_352_94).abs() < 1e-6);
        let (h, r) = one("x y", "a b");
        assert_eq!(rouge_l(&h, &r).unwrap(), 0.0);
        let (h, r) = one("a b c", "a b c");
        assert!((rouge_l(&h, &r).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(lcs_len(&t("a b c b d a b"), &t("b d c a b a")), 4);
    }

    #[test]
    fn meteor_fixtures() {
        let (h, r) = one("a cat on the mat", "a cat on the mat");
        assert!((meteor_lite(&h, &r).unwrap() - 1.0).abs() < 1e-12);
        let (h, r) = one("x y", "a b");
        assert_eq!(meteor_lite(&h, &r).unwrap(), 0.0);

        // one swap: "b a c" vs "a b c" → 3 matches in 3 chunks
        let a = meteor_align(&t("b a c"), &t("a b c"));
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(a.chunks, 3);
        let (h, r) = one("b a c", "a b c");
        assert!((meteor_lite(&h, &r).unwrap() - 0.5).abs() < 1e-12);

        // "the cat sits near a box" vs "a cat sitting near the box":
        // exact: cat, near, box, a, the; stem: sits~sitting
        let a = meteor_align(&t("the cat sits near a box"), &t("a cat sitting near the box"));
        assert_eq!(a.pairs, vec![(0, 4), (1, 1), (2, 2), (3, 3), (4, 0), (5, 5)]);
        assert_eq!(a.chunks, 4);
        let pen = 0.5 * (4.0f64 / 6.0).powi(3);
        let (h, r) = one("the cat sits near a box", "a cat sitting near the box");
        assert!((meteor_lite(&h, &r).unwrap() - (1.0 - pen)).abs() < 1e-12);

        // partial: 2 matches of hyp 4 / ref 2, one chunk
        let (h, r) = one("a b x y", "a b");
        let (p, rc) = (0.5, 1.0);
        let f = p * rc / (0.9 * p + 0.1 * rc);
        assert!((meteor_lite(&h, &r).unwrap() - f).abs() < 1e-12);
    }

    #[test]
    fn stems() {
        assert_eq!(stem("sitting"), "sit");
        assert_eq!(stem("running"), "run");
        assert_eq!(stem("falls"), "fall");
        assert_eq!(stem("sits"), "sit");
        assert_eq!(stem("puppies"), "puppy");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("bus"), "bus");
    }

    #[test]
    fn cider_idf_and_identity() {
        let refs = vec![vec![t("the cat")], vec![t("the dog")], vec![t("the bird")]];
        let idf = IdfTable::from_references(&refs);
        assert_eq!(idf.idf(&t("the")), 0.0);
        assert!((idf.idf(&t("cat")) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(idf.entries()[0], ("the".to_string(), 0.0));

        let hyps = vec![t("unique words here")];
        let refs = vec![vec![t("unique words here")]];
        assert!((cider(&hyps, &refs).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cider_three_document_oracle() {
        let hyps = vec![t("a cat on a mat"), t("a dog"), t("the bird flies")];
        let refs = vec![vec![t("a cat on the mat")], vec![t("a big dog")], vec![t("a bird flies")]];
        let got = cider(&hyps, &refs).unwrap();

        // Direct formula, one document per instance.
        let n_docs = 3.0f64;
        let df = |g: &[&str]| -> f64 {
            refs.iter()
                .filter(|rs| rs[0].windows(g.len()).any(|w| w.iter().zip(g).all(|(a, b)| a == b)))
                .count() as f64
        };
        let vec_of = |toks: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
            let mut grams: Vec<Vec<String>> = toks.windows(n).map(|w| w.to_vec()).collect();
            let total = grams.len() as f64;
            grams.sort();
            let mut out: Vec<(Vec<String>, f64)> = Vec::new();
            for g in grams {
                match out.last_mut() {
                    Some((last, c)) if *last == g => *c += 1.0,
                    _ => out.push((g, 1.0)),
                }
            }
            out.into_iter()
                .map(|(g, c)| {
                    let gs: Vec<&str> = g.iter().map(|s| s.as_str()).collect();
                    let d = df(&gs).max(1.0);
                    (g, c / total * (n_docs / d).ln())
                })
                .collect()
        };
        let mut expect = 0.0;
        for (h, rs) in hyps.iter().zip(&refs) {
            let mut s = 0.0;
            for n in 1..=4 {
                let (vh, vr) = (vec_of(h, n), vec_of(&rs[0], n));
                let identical = {
                    let mut a: Vec<_> = h.windows(n).collect();
                    let mut b: Vec<_> = rs[0].windows(n).collect();
                    a.sort();
                    b.sort();
                    a == b
                };
                let dot: f64 = vh
                    .iter()
                    .map(|(g, w)| w * vr.iter().find(|(x, _)| x == g).map_or(0.0, |x| x.1))
                    .sum();
                let nh = vh.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
                let nr = vr.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt();
                s += if identical {
                    1.0
                } else if nh * nr == 0.0 {
                    0.0
                } else {
                    dot / (nh * nr)
                };
            }
            expect += 10.0 * s / 4.0;
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(got > 0.0 && got < 10.0);
    }

    #[test]
    fn vsrc_accuracy_cases() {
        use SpatialRelation::*;
        assert_eq!(vsrc_accuracy(&[On, In], &[On, In]).unwrap(), 100.0);
        assert_eq!(vsrc_accuracy(&[On, In], &[In, On]).unwrap(), 0.0);
        assert_eq!(vsrc_accuracy(&[On, In, Under, On], &[On, In, Under, Above]).unwrap(), 75.0);
        assert!(vsrc_accuracy(&[On], &[On, In]).is_err());
        assert!(vsrc_accuracy(&[], &[]).is_err());
    }

    fn rec(id: usize, h: &str, r: &str, gold: SpatialRelation, pred: Option<SpatialRelation>) -> EvalRecord {
        EvalRecord {
            id: format!("r{id}"),
            hypothesis: t(h),
            references: vec![t(r)],
            gold,
            predicted: pred,
        }
    }

    #[test]
    fn relation_buckets() {
        use SpatialRelation::*;
        let recs = vec![
            rec(0, "a cup to the left of a box", "a cup to the left of a box", ToTheLeftOf, Some(ToTheLeftOf)),
            rec(1, "a cup to the right of a box", "a cup to the right of a box", ToTheRightOf, Some(ToTheLeftOf)),
            rec(2, "a cat on a mat", "a cat on a mat", On, Some(On)),
            rec(3, "a ball under a table", "a ball under the table", Under, Some(Under)),
            rec(4, "a pen on a desk", "a pen on a desk", On, Some(Under)),
        ];
        let rows = per_relation_report(&recs).unwrap();
        assert_eq!(rows.len(), 9);
        let get = |r: SpatialRelation| rows.iter().find(|x| x.relation == r).unwrap();
        assert_eq!(get(On).count, 2);
        assert_eq!(get(On).vsrc_precision, Some(50.0));
        assert_eq!(get(ToTheLeftOf).count, 1);
        assert_eq!(get(ToTheRightOf).vsrc_precision, Some(0.0));
        assert!(get(Behind).empty && get(Behind).bleu4.is_none());
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), recs.len());
        assert_eq!(rows.iter().filter(|r| !r.empty).count(), 4);

        let single: Vec<_> = recs.iter().filter(|r| r.gold == On).cloned().collect();
        let rows = per_relation_report(&single).unwrap();
        assert_eq!(rows.iter().filter(|r| !r.empty).count(), 1);

        let pn = pos_neg_split(&recs).unwrap();
        assert_eq!(pn.positive.count + pn.negative.count, recs.len());
        assert_eq!(pn.negative.count, 2);
        let correct: Vec<_> = recs.iter().filter(|r| r.predicted == Some(r.gold)).cloned().collect();
        let pn = pos_neg_split(&correct).unwrap();
        assert!(pn.negative.empty && pn.negative.scores.is_none());

        let report = EvalReport::compute(&recs).unwrap();
        assert_eq!(report.vsrc_accuracy, Some(60.0));
        assert!(report.to_text().contains("VSRC acc"));
        assert!(report.per_relation_columns().starts_with("relation\tcount"));
        let no_rel: Vec<_> = recs.iter().map(|r| EvalRecord { predicted: None, ..r.clone() }).collect();
        let report = EvalReport::compute(&no_rel).unwrap();
        assert!(report.vsrc_accuracy.is_none() && report.pos_neg.is_none());
    }

    #[test]
    fn identical_corpus_is_maximal() {
        let recs: Vec<_> = ["a cat on a mat", "a dog under the big table", "two"]
            .iter()
            .enumerate()
            .map(|(i, s)| rec(i, s, s, SpatialRelation::On, Some(SpatialRelation::On)))
            .collect();
        let r = EvalReport::compute(&recs).unwrap();
        // BLEU-4 needs a 4-gram somewhere in the corpus, which holds here.
        assert!((r.scores.bleu4 - 100.0).abs() < 1e-9);
        assert!((r.scores.rouge_l - 100.0).abs() < 1e-9);
        assert!((r.scores.meteor_lite - 100.0).abs() < 1e-9);
        assert!((r.scores.cider - 1000.0).abs() < 1e-9);
        assert_eq!(r.vsrc_accuracy, Some(100.0));
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    }

    const WORDS: [&str; 6] = ["a", "cat", "on", "the", "mat", "box"];

    fn sentence() -> impl Strategy<Value = Tokens> {
        prop::collection::vec(0..WORDS.len(), 1..8).prop_map(|v| v.into_iter().map(|i| WORDS[i].to_string()).collect())
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant(
            pairs in prop::collection::vec((sentence(), sentence(), sentence()), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let hyps: Vec<Tokens> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<Vec<Tokens>> = pairs.iter().map(|p| vec![p.1.clone(), p.2.clone()]).collect();
            let mut order: Vec<usize> = (0..hyps.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let ph: Vec<Tokens> = order.iter().map(|&i| hyps[i].clone()).collect();
            let pr: Vec<Vec<Tokens>> = order.iter().map(|&i| refs[i].clone()).collect();
            let swapped: Vec<Vec<Tokens>> = refs.iter().map(|r| vec![r[1].clone(), r[0].clone()]).collect();
            let cfg = BleuConfig { smoothing: true };
            let b = bleu4_detail(&hyps, &refs, cfg).unwrap().score;
            prop_assert!((b - bleu4_detail(&ph, &pr, cfg).unwrap().score).abs() < 1e-12);
            prop_assert!((b - bleu4_detail(&hyps, &swapped, cfg).unwrap().score).abs() < 1e-12);
            let c = cider(&hyps, &refs).unwrap();
            prop_assert!((c - cider(&ph, &pr).unwrap()).abs() < 1e-9);
            prop_assert!((c - cider(&hyps, &swapped).unwrap()).abs() < 1e-9);
            let r = rouge_l(&hyps, &refs).unwrap();
            prop_assert!((r - rouge_l(&ph, &pr).unwrap()).abs() < 1e-12);
            let m = meteor_lite(&hyps, &refs).unwrap();
            prop_assert!((m - meteor_lite(&ph, &pr).unwrap()).abs() < 1e-12);
            for v in [b, r, m] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
        }
    }
}
