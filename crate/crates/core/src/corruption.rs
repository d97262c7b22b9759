//! Span selection and the input/target constructions of the four pretraining
//! tasks: span corruption (SC), translation (MT), translation-pair span
//! corruption (TPSC) and translation span corruption (TSC).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const DEFAULT_NOISE_DENSITY: f64 = 0.5;
pub const DEFAULT_MEAN_SPAN_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "MT")]
    Mt,
    #[serde(rename = "TPSC")]
    Tpsc,
    #[serde(rename = "TSC")]
    Tsc,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sc => "SC",
            Task::Mt => "MT",
            Task::Tpsc => "TPSC",
            Task::Tsc => "TSC",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SC" => Ok(Task::Sc),
            "MT" => Ok(Task::Mt),
            "TPSC" => Ok(Task::Tpsc),
            "TSC" => Ok(Task::Tsc),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Sorted, pairwise non-touching spans of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMaskPlan {
    sentence_len: usize,
    spans: Vec<Span>,
}

impl SpanMaskPlan {
    pub fn new(sentence_len: usize, spans: Vec<Span>) -> Result<Self> {
        let mut prev_end: Option<usize> = None;
        for s in &spans {
            if s.len == 0 {
                bail!(InvalidArgument, "empty span at {}", s.start);
            }
            if s.end() > sentence_len {
                bail!(
                    InvalidArgument,
                    "span [{}, {}) exceeds sentence length {sentence_len}",
                    s.start,
                    s.end()
                );
            }
            if let Some(e) = prev_end {
                if s.start <= e {
                    bail!(InvalidArgument, "spans overlap, touch, or are unsorted at {}", s.start);
                }
            }
            prev_end = Some(s.end());
        }
        Ok(Self { sentence_len, spans })
    }

    pub fn empty(sentence_len: usize) -> Self {
        Self {
            sentence_len,
            spans: Vec::new(),
        }
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn masked_count(&self) -> usize {
        self.spans.iter().map(|s| s.len).sum()
    }

    fn check(&self, s: &[TokenId], vocab: &Vocabulary) -> Result<()> {
        if s.len() != self.sentence_len {
            bail!(
                InvalidArgument,
                "plan is for length {} but sentence has {} tokens",
                self.sentence_len,
                s.len()
            );
        }
        if self.spans.len() > vocab.sentinel_count() {
            bail!(
                InvalidArgument,
                "{} spans exceed the sentinel budget {}",
                self.spans.len(),
                vocab.sentinel_count()
            );
        }
        Ok(())
    }
}

/// `k` distinct sorted cut points drawn uniformly from `1..n`.
fn cut_points(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cuts: Vec<usize> = rand::seq::index::sample(rng, n - 1, k)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    cuts
}

/// Uniform composition of `total` into `parts` positive integers.
fn positive_composition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(parts >= 1 && total >= parts);
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cut_points(total, parts - 1, rng) {
        out.push(c - prev);
        prev = c;
    }
    out.push(total - prev);
    out
}

/// Draws a span plan for a sentence of `len` tokens.
///
/// The masked-token count is `round(len * noise_density)` (at least one), the
/// span count `round(masked / mean_span_len)` (at least one, at most what fits
/// with one unmasked token between neighbours). Span lengths and gaps are
/// uniform compositions. A `mean_span_len` above `len` is clamped to `len`.
pub fn sample_spans(
    len: usize,
    noise_density: f64,
    mean_span_len: usize,
    rng: &mut impl Rng,
) -> Result<SpanMaskPlan> {
    if len == 0 {
        bail!(InvalidArgument, "cannot corrupt an empty sentence");
    }
    if !(noise_density > 0.0 && noise_density <= 1.0) {
        bail!(InvalidArgument, "noise density must be in (0, 1], got {noise_density}");
    }
    if mean_span_len == 0 {
        bail!(InvalidArgument, "mean span length must be >= 1");
    }
    let mean = mean_span_len.min(len) as f64;
    let masked = ((len as f64 * noise_density).round() as usize).clamp(1, len);
    let unmasked = len - masked;
    let n_spans = ((masked as f64 / mean).round() as usize)
        .max(1)
        .min(masked)
        .min(unmasked + 1);

    let lengths = positive_composition(masked, n_spans, rng);
    // gaps g_0 >= 0, g_1..g_{n-1} >= 1, g_n >= 0, summing to `unmasked`
    let free = unmasked - (n_spans - 1);
    let mut gaps: Vec<usize> = positive_composition(free + n_spans + 1, n_spans + 1, rng)
        .into_iter()
        .map(|g| g - 1)
        .collect();
    for g in &mut gaps[1..n_spans] {
        *g += 1;
    }

    let mut spans = Vec::with_capacity(n_spans);
    let mut pos = 0;
    for (k, &l) in lengths.iter().enumerate() {
        pos += gaps[k];
        spans.push(Span { start: pos, len: l });
        pos += l;
    }
    debug_assert_eq!(pos + gaps[n_spans], len);
    SpanMaskPlan::new(len, spans)
}

/// Corrupted input: the k-th span is replaced by the sentinel `[M_k]`.
pub fn apply_gi(s: &[TokenId], plan: &SpanMaskPlan, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    plan.check(s, vocab)?;
    let mut out = Vec::with_capacity(s.len() - plan.masked_count() + plan.spans.len());
    let mut pos = 0;
    for (k, span) in plan.spans.iter().enumerate() {
        out.extend_from_slice(&s[pos..span.start]);
        out.push(vocab.sentinel(k + 1)?);
        pos = span.end();
    }
    out.extend_from_slice(&s[pos..]);
    Ok(out)
}

/// Span target: `[M_1] span_1 [M_2] span_2 ...`.
pub fn apply_go(s: &[TokenId], plan: &SpanMaskPlan, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    plan.check(s, vocab)?;
    let mut out = Vec::with_capacity(plan.masked_count() + plan.spans.len());
    for (k, span) in plan.spans.iter().enumerate() {
        out.push(vocab.sentinel(k + 1)?);
        out.extend_from_slice(&s[span.start..span.end()]);
    }
    Ok(out)
}

/// Splices the span contents of `go_out` back into `gi_out` at its sentinels.
pub fn reconstruct(gi_out: &[TokenId], go_out: &[TokenId], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut segments: Vec<(usize, &[TokenId])> = Vec::new();
    let mut i = 0;
    while i < go_out.len() {
        let k = vocab.sentinel_index(go_out[i]).ok_or_else(|| {
            Error::Data(format!("target position {i} should hold a sentinel"))
        })?;
        let end = go_out[i + 1..]
            .iter()
            .position(|&t| vocab.sentinel_index(t).is_some())
            .map_or(go_out.len(), |p| i + 1 + p);
        segments.push((k, &go_out[i + 1..end]));
        i = end;
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::with_capacity(gi_out.len() + go_out.len());
    for &t in gi_out {
        match vocab.sentinel_index(t) {
            None => out.push(t),
            Some(k) => {
                let n = segments
                    .iter()
                    .position(|&(sk, _)| sk == k)
                    .ok_or_else(|| Error::Data(format!("sentinel [M_{k}] missing from target")))?;
                if used[n] {
                    bail!(Data, "sentinel [M_{k}] occurs twice in the input");
                }
                used[n] = true;
                out.extend_from_slice(segments[n].1);
            }
        }
    }
    if let Some(n) = used.iter().position(|u| !u) {
        bail!(Data, "target sentinel [M_{}] has no slot in the input", segments[n].0);
    }
    Ok(out)
}

/// One pretraining example. `groups` holds the decoding-group ranges over
/// the target and is filled in by [`crate::pnat::partition_groups`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub task: Task,
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub span_starts: Vec<usize>,
    pub groups: Vec<(usize, usize)>,
}

impl TrainingExample {
    fn with_sentinel_starts(task: Task, input: Vec<TokenId>, target: Vec<TokenId>, vocab: &Vocabulary) -> Self {
        let span_starts = target
            .iter()
            .enumerate()
            .filter(|(_, &t)| vocab.sentinel_index(t).is_some())
            .map(|(i, _)| i)
            .collect();
        Self {
            task,
            input,
            target,
            span_starts,
            groups: Vec::new(),
        }
    }
}

fn nonempty(side: &[TokenId], what: &str) -> Result<()> {
    if side.is_empty() {
        bail!(InvalidArgument, "{what} sentence is empty");
    }
    Ok(())
}

pub fn make_sc_with_plan(s: &[TokenId], plan: &SpanMaskPlan, vocab: &Vocabulary) -> Result<TrainingExample> {
    Ok(TrainingExample::with_sentinel_starts(
        Task::Sc,
        apply_gi(s, plan, vocab)?,
        apply_go(s, plan, vocab)?,
        vocab,
    ))
}

pub fn make_sc(
    s: &[TokenId],
    density: f64,
    mean_span_len: usize,
    rng: &mut impl Rng,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    let plan = sample_spans(s.len(), density, mean_span_len, rng)?;
    make_sc_with_plan(s, &plan, vocab)
}

pub fn make_mt(e: &[TokenId], f: &[TokenId]) -> Result<TrainingExample> {
    nonempty(e, "source")?;
    nonempty(f, "target")?;
    Ok(TrainingExample {
        task: Task::Mt,
        input: e.to_vec(),
        target: f.to_vec(),
        span_starts: vec![0],
        groups: Vec::new(),
    })
}

fn joined(e: &[TokenId], f: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    let mut c = Vec::with_capacity(e.len() + f.len() + 1);
    c.extend_from_slice(e);
    c.push(vocab.sep());
    c.extend_from_slice(f);
    c
}

/// TPSC with an explicit plan over `e <sep> f`; the plan may not cover the
/// separator.
pub fn make_tpsc_with_plan(
    e: &[TokenId],
    f: &[TokenId],
    plan: &SpanMaskPlan,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    nonempty(e, "source")?;
    nonempty(f, "target")?;
    let boundary = e.len();
    if plan.spans.iter().any(|s| s.start <= boundary && boundary < s.end()) {
        bail!(InvalidArgument, "span covers the segment separator at {boundary}");
    }
    let c = joined(e, f, vocab);
    make_sc_with_plan(&c, plan, vocab).map(|mut ex| {
        ex.task = Task::Tpsc;
        ex
    })
}

/// Maps a plan over the `|e| + |f|` maskable positions onto `e <sep> f`,
/// cutting any span that straddles the boundary into one span per side.
fn lift_over_separator(plan: &SpanMaskPlan, e_len: usize) -> Result<SpanMaskPlan> {
    let mut spans = Vec::with_capacity(plan.spans.len() + 1);
    for s in &plan.spans {
        if s.end() <= e_len {
            spans.push(*s);
        } else if s.start >= e_len {
            spans.push(Span {
                start: s.start + 1,
                len: s.len,
            });
        } else {
            spans.push(Span {
                start: s.start,
                len: e_len - s.start,
            });
            spans.push(Span {
                start: e_len + 1,
                len: s.end() - e_len,
            });
        }
    }
    SpanMaskPlan::new(plan.sentence_len + 1, spans)
}

pub fn make_tpsc(
    e: &[TokenId],
    f: &[TokenId],
    density: f64,
    mean_span_len: usize,
    rng: &mut impl Rng,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    nonempty(e, "source")?;
    nonempty(f, "target")?;
    let flat = sample_spans(e.len() + f.len(), density, mean_span_len, rng)?;
    let plan = lift_over_separator(&flat, e.len())?;
    make_tpsc_with_plan(e, f, &plan, vocab)
}

/// Which sentence of a translation pair TSC corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// TSC with an explicit side and plan (over the corrupted side only). The
/// pair order is kept: `g_i(e) <sep> f` or `e <sep> g_i(f)`; the target is
/// the span output of the corrupted side.
pub fn make_tsc_with_plan(
    e: &[TokenId],
    f: &[TokenId],
    side: Side,
    plan: &SpanMaskPlan,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    nonempty(e, "source")?;
    nonempty(f, "target")?;
    let (input, target) = match side {
        Side::Source => (joined(&apply_gi(e, plan, vocab)?, f, vocab), apply_go(e, plan, vocab)?),
        Side::Target => (joined(e, &apply_gi(f, plan, vocab)?, vocab), apply_go(f, plan, vocab)?),
    };
    Ok(TrainingExample::with_sentinel_starts(Task::Tsc, input, target, vocab))
}

pub fn make_tsc(
    e: &[TokenId],
    f: &[TokenId],
    density: f64,
    mean_span_len: usize,
    rng: &mut impl Rng,
    vocab: &Vocabulary,
) -> Result<TrainingExample> {
    let side = if rng.random_bool(0.5) { Side::Source } else { Side::Target };
    let corrupted = match side {
        Side::Source => e,
        Side::Target => f,
    };
    nonempty(corrupted, "corrupted")?;
    let plan = sample_spans(corrupted.len(), density, mean_span_len, rng)?;
    make_tsc_with_plan(e, f, side, &plan, vocab)
}
