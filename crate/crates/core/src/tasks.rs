//! Text-to-text formats for downstream tasks and the decoders that read
//! them back: a label trie for classification, passage-restricted decoding
//! for extractive QA, a two-state tag automaton for NER, and plain greedy
//! generation.
//!
//! Every input is `<bos> segment <eos> [segment <eos>]` and every target is
//! `<bos> body <eos>`. Fine-tuning feeds the target without its leading
//! `<bos>`, which instead serves as the decoder start token.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::read_text;
use crate::model::{next_token_logits, ParameterSet};
use crate::vocab::{EntityTag, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Qa,
    Ner,
    Generation,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(TaskKind::Classification),
            "qa" => Ok(TaskKind::Qa),
            "ner" => Ok(TaskKind::Ner),
            "generation" | "gen" => Ok(TaskKind::Generation),
            _ => bail!(InvalidArgument, "unknown task kind {s:?}"),
        }
    }
}

/// Prefix tree over tokenized labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrie {
    children: Vec<BTreeMap<TokenId, usize>>,
    terminal: Vec<bool>,
}

impl LabelTrie {
    pub fn new(labels: &[Vec<TokenId>]) -> Result<Self> {
        let mut t = Self {
            children: vec![BTreeMap::new()],
            terminal: vec![false],
        };
        for label in labels {
            if label.is_empty() {
                bail!(InvalidArgument, "empty label");
            }
            let mut node = 0;
            for &tok in label {
                node = match t.children[node].get(&tok) {
                    Some(&n) => n,
                    None => {
                        t.children.push(BTreeMap::new());
                        t.terminal.push(false);
                        let n = t.children.len() - 1;
                        t.children[node].insert(tok, n);
                        n
                    }
                };
            }
            t.terminal[node] = true;
        }
        if t.children[0].is_empty() {
            bail!(InvalidArgument, "label set is empty");
        }
        Ok(t)
    }

    /// Tokens that may follow `prefix` (with `eos` once a label is complete);
    /// empty when `prefix` leaves the trie.
    pub fn next(&self, prefix: &[TokenId], eos: TokenId) -> Vec<TokenId> {
        let mut node = 0;
        for tok in prefix {
            match self.children[node].get(tok) {
                Some(&n) => node = n,
                None => return Vec::new(),
            }
        }
        let mut out: Vec<TokenId> = self.children[node].keys().copied().collect();
        if self.terminal[node] {
            out.push(eos);
            out.sort_unstable();
        }
        out
    }

    pub fn contains(&self, label: &[TokenId]) -> bool {
        let mut node = 0;
        for tok in label {
            match self.children[node].get(tok) {
                Some(&n) => node = n,
                None => return false,
            }
        }
        self.terminal[node]
    }
}

/// Decoding state of the NER output language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NerAutomatonState {
    /// At the start or right after `<sep>`: an entity tag or `<eos>`.
    AfterBosOrSep,
    /// After a tag: source tokens or `<sep>`.
    InsideEntity,
}

impl NerAutomatonState {
    /// Runs the automaton over a body (no `<bos>`); `None` if a transition is
    /// rejected or the body continues past `<eos>`.
    pub fn run(body: &[TokenId], source: &BTreeSet<TokenId>, vocab: &Vocabulary) -> Option<Self> {
        let mut state = Self::AfterBosOrSep;
        for (n, &tok) in body.iter().enumerate() {
            if tok == vocab.eos() {
                return (state == Self::AfterBosOrSep && n + 1 == body.len()).then_some(state);
            }
            state = state.advance(tok, source, vocab)?;
        }
        Some(state)
    }

    pub fn allows(self, tok: TokenId, source: &BTreeSet<TokenId>, vocab: &Vocabulary) -> bool {
        match self {
            Self::AfterBosOrSep => vocab.entity_tag_of(tok).is_some() || tok == vocab.eos(),
            Self::InsideEntity => source.contains(&tok) || tok == vocab.sep(),
        }
    }

    /// Next state after emitting `tok` (not `<eos>`).
    pub fn advance(self, tok: TokenId, source: &BTreeSet<TokenId>, vocab: &Vocabulary) -> Option<Self> {
        if !self.allows(tok, source, vocab) || tok == vocab.eos() {
            return None;
        }
        Some(if tok == vocab.sep() {
            Self::AfterBosOrSep
        } else {
            Self::InsideEntity
        })
    }

    pub fn allowed(self, source: &BTreeSet<TokenId>, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = match self {
            Self::AfterBosOrSep => EntityTag::ALL
                .iter()
                .map(|&t| vocab.entity_tag(t))
                .chain([vocab.eos()])
                .collect(),
            Self::InsideEntity => source.iter().copied().chain([vocab.sep()]).collect(),
        };
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// What the constrained decoder may emit for an example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constraint {
    Labels(LabelTrie),
    /// Unique passage tokens; `<eos>` is always allowed in addition.
    Passage(BTreeSet<TokenId>),
    /// Unique source-sentence tokens for the entity bodies.
    Ner(BTreeSet<TokenId>),
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormattedExample {
    pub kind: TaskKind,
    pub input_ids: Vec<TokenId>,
    pub target_ids: Vec<TokenId>,
    pub constraint: Constraint,
    /// QA only: false when some answer token is absent from the passage, so
    /// constrained decoding cannot reach the gold answer.
    pub answer_reachable: bool,
}

impl FormattedExample {
    /// Target without `<bos>`, as fed to the decoder during fine-tuning.
    pub fn decoder_target(&self) -> &[TokenId] {
        &self.target_ids[1..]
    }

    /// Target without `<bos>` and `<eos>`.
    pub fn target_body(&self) -> &[TokenId] {
        &self.target_ids[1..self.target_ids.len() - 1]
    }
}

fn segments(vocab: &Vocabulary, parts: &[&[TokenId]]) -> Vec<TokenId> {
    let mut out = vec![vocab.bos()];
    for p in parts {
        out.extend_from_slice(p);
        out.push(vocab.eos());
    }
    out
}

fn wrapped(vocab: &Vocabulary, body: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(body.len() + 2);
    out.push(vocab.bos());
    out.extend_from_slice(body);
    out.push(vocab.eos());
    out
}

/// Input `<bos> A <eos> [B <eos>]`, target `<bos> label <eos>`. No task
/// prefix is added.
pub fn format_classification(
    a: &str,
    b: Option<&str>,
    label: &str,
    labels: &[String],
    vocab: &Vocabulary,
) -> Result<FormattedExample> {
    if !labels.iter().any(|l| l == label) {
        bail!(InvalidArgument, "label {label:?} not in label set {labels:?}");
    }
    let encoded: Vec<Vec<TokenId>> = labels.iter().map(|l| vocab.encode(l)).collect();
    let trie = LabelTrie::new(&encoded)?;
    let a = vocab.encode(a);
    let input = match b {
        Some(b) => segments(vocab, &[&a, &vocab.encode(b)]),
        None => segments(vocab, &[&a]),
    };
    Ok(FormattedExample {
        kind: TaskKind::Classification,
        input_ids: input,
        target_ids: wrapped(vocab, &vocab.encode(label)),
        constraint: Constraint::Labels(trie),
        answer_reachable: true,
    })
}

/// Input `<bos> passage <eos> question <eos>`, target `<bos> answer <eos>`.
pub fn format_qa(passage: &str, question: &str, answer: &str, vocab: &Vocabulary) -> Result<FormattedExample> {
    let p = vocab.encode(passage);
    if p.is_empty() {
        bail!(InvalidArgument, "empty passage");
    }
    let q = vocab.encode(question);
    let ans = vocab.encode(answer);
    let allowed: BTreeSet<TokenId> = p.iter().copied().collect();
    let answer_reachable = ans.iter().all(|t| allowed.contains(t));
    Ok(FormattedExample {
        kind: TaskKind::Qa,
        input_ids: segments(vocab, &[&p, &q]),
        target_ids: wrapped(vocab, &ans),
        constraint: Constraint::Passage(allowed),
        answer_reachable,
    })
}

/// Input `<bos> text <eos>`, target `<bos> output <eos>`, unconstrained.
pub fn format_generation(source: &str, target: &str, vocab: &Vocabulary) -> Result<FormattedExample> {
    let s = vocab.encode(source);
    if s.is_empty() {
        bail!(InvalidArgument, "empty source text");
    }
    Ok(FormattedExample {
        kind: TaskKind::Generation,
        input_ids: segments(vocab, &[&s]),
        target_ids: wrapped(vocab, &vocab.encode(target)),
        constraint: Constraint::None,
        answer_reachable: true,
    })
}

/// A typed entity over source token positions `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub tag: EntityTag,
    pub start: usize,
    pub end: usize,
}

/// Reads BIO tags (`O`, `B-X`, `I-X`) into entities in input order.
pub fn bio_entities(tags: &[String]) -> Result<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<Entity> = None;
    for (i, t) in tags.iter().enumerate() {
        if t == "O" {
            out.extend(open.take());
            continue;
        }
        let (prefix, kind) = t
            .split_once('-')
            .ok_or_else(|| Error::Data(format!("malformed BIO tag {t:?} at {i}")))?;
        let tag =
            EntityTag::from_bio_label(kind).ok_or_else(|| Error::Data(format!("unknown entity type {kind:?} at {i}")))?;
        match prefix {
            "B" => {
                out.extend(open.take());
                open = Some(Entity { tag, start: i, end: i + 1 });
            }
            "I" => match open.as_mut() {
                Some(e) if e.tag == tag => e.end = i + 1,
                _ => bail!(Data, "I-{kind} at {i} does not continue a {kind} entity"),
            },
            _ => bail!(Data, "malformed BIO tag {t:?} at {i}"),
        }
    }
    out.extend(open);
    Ok(out)
}

/// Input `<bos> tokens <eos>`; target `<bos>` then `<tag> entity <sep>` for
/// each entity in order, then `<eos>`.
pub fn format_ner(tokens: &[String], tags: &[String], vocab: &Vocabulary) -> Result<FormattedExample> {
    if tokens.len() != tags.len() {
        bail!(Data, "{} tokens but {} tags", tokens.len(), tags.len());
    }
    if tokens.is_empty() {
        bail!(InvalidArgument, "empty NER sentence");
    }
    let ids: Vec<TokenId> = tokens.iter().map(|t| vocab.surface_id(t).unwrap_or(vocab.unk())).collect();
    let mut target = vec![vocab.bos()];
    for e in bio_entities(tags)? {
        target.push(vocab.entity_tag(e.tag));
        target.extend_from_slice(&ids[e.start..e.end]);
        target.push(vocab.sep());
    }
    target.push(vocab.eos());
    Ok(FormattedExample {
        kind: TaskKind::Ner,
        input_ids: segments(vocab, &[&ids]),
        constraint: Constraint::Ner(ids.iter().copied().collect()),
        target_ids: target,
        answer_reachable: true,
    })
}

/// One entity read back from decoder output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedEntity {
    pub tag: EntityTag,
    pub tokens: Vec<TokenId>,
    /// Source position, matched greedily left to right; `None` if the
    /// tokens do not occur contiguously in the source.
    pub span: Option<(usize, usize)>,
}

fn find_from(source: &[TokenId], needle: &[TokenId], from: usize) -> Option<usize> {
    if needle.is_empty() || needle.len() > source.len() {
        return None;
    }
    (from..=source.len() - needle.len()).find(|&i| &source[i..i + needle.len()] == needle)
}

/// Inverse of [`format_ner`]. Accepts a body with or without the surrounding
/// `<bos>`/`<eos>`; a trailing entity without `<sep>` (from a length-capped
/// decode) is kept.
pub fn parse_ner_output(decoded: &[TokenId], source: &[TokenId], vocab: &Vocabulary) -> Result<Vec<DecodedEntity>> {
    let mut body = decoded;
    if body.first() == Some(&vocab.bos()) {
        body = &body[1..];
    }
    let allowed: BTreeSet<TokenId> = source.iter().copied().collect();
    if NerAutomatonState::run(body, &allowed, vocab).is_none() {
        bail!(Format, "sequence is not a valid NER output");
    }
    if body.last() == Some(&vocab.eos()) {
        body = &body[..body.len() - 1];
    }
    let mut out: Vec<DecodedEntity> = Vec::new();
    let mut cursor = 0;
    let mut current: Option<DecodedEntity> = None;
    let close = |e: DecodedEntity, cursor: &mut usize, out: &mut Vec<DecodedEntity>| {
        let at = find_from(source, &e.tokens, *cursor).or_else(|| find_from(source, &e.tokens, 0));
        let span = at.map(|s| (s, s + e.tokens.len()));
        if let Some((_, end)) = span {
            *cursor = end;
        }
        out.push(DecodedEntity { span, ..e });
    };
    for &tok in body {
        if let Some(tag) = vocab.entity_tag_of(tok) {
            current = Some(DecodedEntity {
                tag,
                tokens: Vec::new(),
                span: None,
            });
        } else if tok == vocab.sep() {
            if let Some(e) = current.take() {
                close(e, &mut cursor, &mut out);
            }
        } else if let Some(e) = current.as_mut() {
            e.tokens.push(tok);
        }
    }
    if let Some(e) = current.take() {
        close(e, &mut cursor, &mut out);
    }
    Ok(out)
}

/// Result of a decode: the emitted tokens without `<bos>`/`<eos>`, and
/// whether `<eos>` was produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub body: Vec<TokenId>,
    pub finished: bool,
}

fn argmax_over(logits: &ndarray::Array1<f64>, allowed: &[TokenId]) -> Result<TokenId> {
    let mut best: Option<(TokenId, f64)> = None;
    for &t in allowed {
        let v = logits[t as usize];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::InvalidArgument("constrained decoding reached an empty allowed set".into()))
}

fn decode_with(
    params: &ParameterSet,
    input: &[TokenId],
    max_len: usize,
    vocab: &Vocabulary,
    mut allowed: impl FnMut(&[TokenId]) -> Result<Option<Vec<TokenId>>>,
) -> Result<Decoded> {
    let cap = max_len.min(params.config().max_len.saturating_sub(1));
    let mut prefix = vec![vocab.bos()];
    while prefix.len() - 1 < cap {
        let logits = next_token_logits(params, input, &prefix)?;
        let tok = match allowed(&prefix[1..])? {
            Some(set) => argmax_over(&logits, &set)?,
            None => {
                let all: Vec<TokenId> = (0..logits.len() as TokenId).collect();
                argmax_over(&logits, &all)?
            }
        };
        if tok == vocab.eos() {
            return Ok(Decoded {
                body: prefix.split_off(1),
                finished: true,
            });
        }
        prefix.push(tok);
    }
    Ok(Decoded {
        body: prefix.split_off(1),
        finished: false,
    })
}

/// Unconstrained greedy decoding; ties go to the lowest token id.
pub fn greedy_decode(params: &ParameterSet, input: &[TokenId], max_len: usize, vocab: &Vocabulary) -> Result<Decoded> {
    decode_with(params, input, max_len, vocab, |_| Ok(None))
}

/// Greedy decoding restricted at every step to the example's allowed set.
/// Label decoding always runs to the end of a full label, whatever
/// `max_len` is.
pub fn constrained_greedy_decode(
    params: &ParameterSet,
    example: &FormattedExample,
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<Decoded> {
    let input = &example.input_ids;
    match &example.constraint {
        Constraint::Labels(trie) => {
            decode_with(params, input, usize::MAX, vocab, |body| Ok(Some(trie.next(body, vocab.eos()))))
        }
        Constraint::Passage(set) => {
            let mut allowed: Vec<TokenId> = set.iter().copied().chain([vocab.eos()]).collect();
            allowed.sort_unstable();
            allowed.dedup();
            decode_with(params, input, max_len, vocab, |_| Ok(Some(allowed.clone())))
        }
        Constraint::Ner(source) => decode_with(params, input, max_len, vocab, |body| {
            let state = NerAutomatonState::run(body, source, vocab)
                .ok_or_else(|| Error::Format("NER prefix left the automaton".into()))?;
            Ok(Some(state.allowed(source, vocab)))
        }),
        Constraint::None => bail!(InvalidArgument, "example carries no decoding constraint"),
    }
}

/// Classification record: `{"a", "b"?, "label"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub passage: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerRecord {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub source: String,
    pub target: String,
}

/// A parsed JSON-lines task file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskDataset {
    Classification(Vec<ClassificationRecord>),
    Qa(Vec<QaRecord>),
    Ner(Vec<NerRecord>),
    Generation(Vec<GenerationRecord>),
}

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", n + 1))))
        .collect()
}

impl TaskDataset {
    pub fn parse(kind: TaskKind, text: &str) -> Result<Self> {
        let ds = match kind {
            TaskKind::Classification => Self::Classification(parse_lines(text)?),
            TaskKind::Qa => Self::Qa(parse_lines(text)?),
            TaskKind::Ner => Self::Ner(parse_lines(text)?),
            TaskKind::Generation => Self::Generation(parse_lines(text)?),
        };
        if ds.is_empty() {
            bail!(Data, "task file has no records");
        }
        Ok(ds)
    }

    pub fn load(kind: TaskKind, path: &Path) -> Result<Self> {
        Self::parse(kind, &read_text(path)?)
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Classification(_) => TaskKind::Classification,
            Self::Qa(_) => TaskKind::Qa,
            Self::Ner(_) => TaskKind::Ner,
            Self::Generation(_) => TaskKind::Generation,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Classification(r) => r.len(),
            Self::Qa(r) => r.len(),
            Self::Ner(r) => r.len(),
            Self::Generation(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted distinct labels of a classification set.
    pub fn label_set(&self) -> Vec<String> {
        match self {
            Self::Classification(r) => {
                let set: BTreeSet<&str> = r.iter().map(|x| x.label.as_str()).collect();
                set.into_iter().map(String::from).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Formats every record; `labels` overrides the label set of a
    /// classification file.
    pub fn format(&self, vocab: &Vocabulary, labels: Option<&[String]>) -> Result<Vec<FormattedExample>> {
        match self {
            Self::Classification(r) => {
                let own = self.label_set();
                let labels = labels.unwrap_or(&own);
                r.iter()
                    .map(|x| format_classification(&x.a, x.b.as_deref(), &x.label, labels, vocab))
                    .collect()
            }
            Self::Qa(r) => r.iter().map(|x| format_qa(&x.passage, &x.question, &x.answer, vocab)).collect(),
            Self::Ner(r) => r.iter().map(|x| format_ner(&x.tokens, &x.tags, vocab)).collect(),
            Self::Generation(r) => r.iter().map(|x| format_generation(&x.source, &x.target, vocab)).collect(),
        }
    }
}
