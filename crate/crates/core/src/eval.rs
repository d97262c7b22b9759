//! Analysis and task metrics.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2, Axis};

use crate::error::{bail, Result};
use crate::model::{encoder_states, ParameterSet};
use crate::vocab::{TokenId, Vocabulary};

/// Mean-pooled encoder state of one sentence at one layer (0 = embeddings).
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRepresentation {
    pub layer: usize,
    pub vector: Array1<f64>,
}

const ENCODE_CHUNK: usize = 64;

/// Per-layer sentence vectors: `out[layer][sentence]`. Pooling averages the
/// encoder residual stream over non-special positions (all positions if a
/// sentence has only specials).
pub fn sentence_representations(
    params: &ParameterSet,
    sentences: &[Vec<TokenId>],
    vocab: &Vocabulary,
) -> Result<Vec<Vec<SentenceRepresentation>>> {
    let n_layers = params.config().n_layers_enc + 1;
    let mut out: Vec<Vec<SentenceRepresentation>> = vec![Vec::with_capacity(sentences.len()); n_layers];
    for chunk in sentences.chunks(ENCODE_CHUNK) {
        let inputs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let states = encoder_states(params, &inputs)?;
        for (s, per_layer) in chunk.iter().zip(states) {
            let keep: Vec<usize> = (0..s.len()).filter(|&i| !vocab.is_special(s[i])).collect();
            for (layer, m) in per_layer.into_iter().enumerate() {
                let vector = if keep.is_empty() {
                    m.mean_axis(Axis(0)).expect("non-empty input")
                } else {
                    m.select(Axis(0), &keep).mean_axis(Axis(0)).expect("non-empty selection")
                };
                out[layer].push(SentenceRepresentation { layer, vector });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RetrievalAccuracy {
    /// Source sentences querying the target pool.
    pub src_to_tgt: f64,
    pub tgt_to_src: f64,
    pub mean: f64,
}

fn unit_rows(reps: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = reps[0].len();
    let mut m = Array2::zeros((reps.len(), d));
    for (i, r) in reps.iter().enumerate() {
        if r.len() != d {
            bail!(InvalidArgument, "representation {i} has dimension {} not {d}", r.len());
        }
        let norm = r.dot(r).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            bail!(Numeric, "representation {i} has zero or non-finite norm");
        }
        m.row_mut(i).assign(&(r / norm));
    }
    Ok(m)
}

fn first_argmax<'a>(row: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

/// Accuracy@1 of cosine nearest-neighbour retrieval, where sentence `i` of
/// one side is the translation of sentence `i` of the other. Ties go to the
/// lowest index.
pub fn retrieval_accuracy(src: &[Array1<f64>], tgt: &[Array1<f64>]) -> Result<RetrievalAccuracy> {
    if src.len() != tgt.len() {
        bail!(InvalidArgument, "{} source vs {} target representations", src.len(), tgt.len());
    }
    if src.is_empty() {
        bail!(InvalidArgument, "no representations");
    }
    let a = unit_rows(src)?;
    let b = unit_rows(tgt)?;
    if a.ncols() != b.ncols() {
        bail!(InvalidArgument, "source and target dimensions differ");
    }
    let sim = a.dot(&b.t());
    let n = src.len();
    let fwd = (0..n).filter(|&i| first_argmax(sim.row(i).iter()) == i).count();
    let bwd = (0..n).filter(|&j| first_argmax(sim.column(j).iter()) == j).count();
    let src_to_tgt = fwd as f64 / n as f64;
    let tgt_to_src = bwd as f64 / n as f64;
    Ok(RetrievalAccuracy {
        src_to_tgt,
        tgt_to_src,
        mean: (src_to_tgt + tgt_to_src) / 2.0,
    })
}

/// Retrieval accuracy at every encoder layer.
pub fn retrieval_by_layer(
    params: &ParameterSet,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    vocab: &Vocabulary,
) -> Result<Vec<RetrievalAccuracy>> {
    let (src, tgt): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let rs = sentence_representations(params, &src, vocab)?;
    let rt = sentence_representations(params, &tgt, vocab)?;
    rs.iter()
        .zip(&rt)
        .map(|(a, b)| {
            let a: Vec<Array1<f64>> = a.iter().map(|r| r.vector.clone()).collect();
            let b: Vec<Array1<f64>> = b.iter().map(|r| r.vector.clone()).collect();
            retrieval_accuracy(&a, &b)
        })
        .collect()
}

/// English score minus the mean of the other languages' scores.
pub fn transfer_gap(en_score: f64, non_en_scores: &[f64]) -> Result<f64> {
    if non_en_scores.is_empty() {
        bail!(InvalidArgument, "no non-English scores");
    }
    Ok(en_score - non_en_scores.iter().sum::<f64>() / non_en_scores.len() as f64)
}

pub type AlignmentSet = BTreeSet<(usize, usize)>;

/// Links `(i, j)` where `j` is the first argmax of row `i` and `i` the first
/// argmax of column `j`.
pub fn mutual_argmax_align(sim: &Array2<f64>) -> Result<AlignmentSet> {
    if sim.is_empty() {
        bail!(InvalidArgument, "empty similarity matrix");
    }
    if sim.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "similarity matrix has non-finite entries");
    }
    let col_best: Vec<usize> = sim.columns().into_iter().map(|c| first_argmax(c.iter())).collect();
    Ok(sim
        .rows()
        .into_iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let j = first_argmax(r.iter());
            (col_best[j] == i).then_some((i, j))
        })
        .collect())
}

/// Token-level cosine similarities between two sentences' encoder states at
/// `layer`, aligned by mutual argmax.
pub fn align_pair(params: &ParameterSet, e: &[TokenId], f: &[TokenId], layer: usize) -> Result<AlignmentSet> {
    let states = encoder_states(params, &[e, f])?;
    if layer >= states[0].len() {
        bail!(InvalidArgument, "layer {layer} beyond encoder depth {}", states[0].len() - 1);
    }
    let unit = |m: &Array2<f64>| -> Result<Array2<f64>> {
        let rows: Vec<Array1<f64>> = m.rows().into_iter().map(|r| r.to_owned()).collect();
        unit_rows(&rows)
    };
    let a = unit(&states[0][layer])?;
    let b = unit(&states[1][layer])?;
    mutual_argmax_align(&a.dot(&b.t()))
}

/// Alignment error rate `1 - (|A∩S| + |A∩P|) / (|A| + |S|)`, 0 when both
/// `A` and `S` are empty.
pub fn aer(pred: &AlignmentSet, sure: &AlignmentSet, possible: &AlignmentSet) -> Result<f64> {
    if !sure.is_subset(possible) {
        bail!(InvalidArgument, "sure links must be a subset of possible links");
    }
    let denom = pred.len() + sure.len();
    if denom == 0 {
        return Ok(0.0);
    }
    let a_s = pred.intersection(sure).count();
    let a_p = pred.intersection(possible).count();
    // integer numerator keeps simple ratios such as 1/3 exact
    Ok((denom - a_s - a_p) as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn from_counts(overlap: usize, n_pred: usize, n_gold: usize) -> Self {
        if n_pred == 0 || n_gold == 0 {
            return Self::ZERO;
        }
        let precision = overlap as f64 / n_pred as f64;
        let recall = overlap as f64 / n_gold as f64;
        let f1 = if overlap == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

fn ngram_counts<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// ROUGE-N over whitespace tokens with clipped n-gram counts.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<Prf> {
    if n == 0 {
        bail!(InvalidArgument, "ROUGE-N needs n >= 1");
    }
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if c.len() < n || r.len() < n {
        return Ok(Prf::ZERO);
    }
    let cc = ngram_counts(&c, n);
    let rc = ngram_counts(&r, n);
    let overlap: usize = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    Ok(Prf::from_counts(overlap, c.len() + 1 - n, r.len() + 1 - n))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence of whitespace tokens.
pub fn rouge_l(candidate: &str, reference: &str) -> Prf {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    Prf::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Exact match (after whitespace normalization) and token-overlap F1 of one
/// answer.
pub fn qa_scores(pred: &str, gold: &str) -> (f64, f64) {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let g: Vec<&str> = gold.split_whitespace().collect();
    let em = if p == g { 1.0 } else { 0.0 };
    if p.is_empty() && g.is_empty() {
        return (em, 1.0);
    }
    let mut gc: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *gc.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(k) = gc.get_mut(t) {
            if *k > 0 {
                *k -= 1;
                overlap += 1;
            }
        }
    }
    (em, Prf::from_counts(overlap, p.len(), g.len()).f1)
}

/// Exact-match set F1 over entities (any hashable identity such as
/// `(sentence, tag, start, end)`). Both sets empty counts as perfect.
pub fn ner_f1<T: Ord>(pred: &[T], gold: &[T]) -> Prf {
    let p: BTreeSet<&T> = pred.iter().collect();
    let g: BTreeSet<&T> = gold.iter().collect();
    if p.is_empty() && g.is_empty() {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    Prf::from_counts(p.intersection(&g).count(), p.len(), g.len())
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        bail!(InvalidArgument, "{} predictions for {} references", preds.len(), golds.len());
    }
    if preds.is_empty() {
        bail!(InvalidArgument, "no predictions");
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub subset: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: impl Into<String>, subset: impl Into<String>, value: f64) -> Self {
        Self {
            metric: metric.into(),
            subset: subset.into(),
            value,
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,subset,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.metric, r.subset, r.value));
    }
    s
}

/// `layer,direction,accuracy` with directions `src_to_tgt`, `tgt_to_src`
/// and `mean`.
pub fn retrieval_csv(by_layer: &[RetrievalAccuracy]) -> String {
    let mut s = String::from("layer,direction,accuracy\n");
    for (l, r) in by_layer.iter().enumerate() {
        for (dir, v) in [("src_to_tgt", r.src_to_tgt), ("tgt_to_src", r.tgt_to_src), ("mean", r.mean)] {
            s.push_str(&format!("{l},{dir},{v}\n"));
        }
    }
    s
}
