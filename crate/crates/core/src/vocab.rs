//! Whitespace vocabulary with the reserved tokens used by the corruption and
//! task-format procedures.
//!
//! Layout of ids: the fixed specials (`<pad> <bos> <eos> <sep> <unk>` and the
//! four entity tags) come first, then the sentinel block `[M_1] .. [M_S]`,
//! then surface tokens ordered by descending corpus frequency.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

pub const DEFAULT_SENTINELS: usize = 100;

const FIXED_SPECIALS: [&str; 9] = [
    PAD, BOS, EOS, SEP, UNK, "<loc>", "<per>", "<org>", "<misc>",
];
const ENTITY_TAG_OFFSET: usize = 5;

/// Entity categories of the NER output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityTag {
    Loc,
    Per,
    Org,
    Misc,
}

impl EntityTag {
    pub const ALL: [EntityTag; 4] = [EntityTag::Loc, EntityTag::Per, EntityTag::Org, EntityTag::Misc];

    pub fn token(self) -> &'static str {
        FIXED_SPECIALS[ENTITY_TAG_OFFSET + self as usize]
    }

    /// Parses the BIO suffix (`LOC`, `PER`, `ORG`, `MISC`), case-insensitive.
    pub fn from_bio_label(label: &str) -> Option<Self> {
        match label.to_ascii_uppercase().as_str() {
            "LOC" => Some(EntityTag::Loc),
            "PER" => Some(EntityTag::Per),
            "ORG" => Some(EntityTag::Org),
            "MISC" => Some(EntityTag::Misc),
            _ => None,
        }
    }
}

fn sentinel_text(k: usize) -> String {
    format!("[M_{k}]")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    sentinel_count: usize,
}

impl Vocabulary {
    /// Number of reserved ids for a given sentinel budget.
    pub fn special_count_for(sentinel_count: usize) -> usize {
        FIXED_SPECIALS.len() + sentinel_count
    }

    /// Builds a vocabulary of at most `max_size` ids (specials included) from
    /// whitespace-tokenized lines. Surface tokens are ranked by frequency, ties
    /// broken lexicographically, so the result does not depend on input order.
    pub fn build<I, S>(lines: I, max_size: usize, sentinel_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if sentinel_count == 0 {
            bail!(InvalidArgument, "sentinel count must be positive");
        }
        let specials = Self::special_count_for(sentinel_count);
        if max_size <= specials {
            bail!(
                InvalidArgument,
                "max_size {max_size} must exceed the {specials} reserved tokens"
            );
        }
        let mut base = Self::specials_only(sentinel_count);
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut seen_any = false;
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                seen_any = true;
                if base.id_of.contains_key(tok) {
                    continue;
                }
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
        if !seen_any {
            bail!(Data, "cannot build a vocabulary from an empty corpus");
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked.into_iter().take(max_size - specials) {
            base.push(tok);
        }
        Ok(base)
    }

    /// Vocabulary containing only the reserved tokens.
    pub fn specials_only(sentinel_count: usize) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            id_of: HashMap::new(),
            sentinel_count,
        };
        for s in FIXED_SPECIALS {
            v.push(s.to_owned());
        }
        for k in 1..=sentinel_count {
            v.push(sentinel_text(k));
        }
        v
    }

    fn push(&mut self, tok: String) {
        let id = self.tokens.len() as TokenId;
        self.id_of.insert(tok.clone(), id);
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special_count(&self) -> usize {
        Self::special_count_for(self.sentinel_count)
    }

    pub fn sentinel_count(&self) -> usize {
        self.sentinel_count
    }

    pub fn pad(&self) -> TokenId {
        0
    }
    pub fn bos(&self) -> TokenId {
        1
    }
    pub fn eos(&self) -> TokenId {
        2
    }
    pub fn sep(&self) -> TokenId {
        3
    }
    pub fn unk(&self) -> TokenId {
        4
    }

    pub fn entity_tag(&self, tag: EntityTag) -> TokenId {
        (ENTITY_TAG_OFFSET + tag as usize) as TokenId
    }

    pub fn entity_tag_of(&self, id: TokenId) -> Option<EntityTag> {
        let idx = (id as usize).checked_sub(ENTITY_TAG_OFFSET)?;
        EntityTag::ALL.get(idx).copied()
    }

    /// Id of the sentinel `[M_k]`, `k` counted from 1.
    pub fn sentinel(&self, k: usize) -> Result<TokenId> {
        if k == 0 || k > self.sentinel_count {
            bail!(
                InvalidArgument,
                "sentinel [M_{k}] outside budget 1..={}",
                self.sentinel_count
            );
        }
        Ok((FIXED_SPECIALS.len() + k - 1) as TokenId)
    }

    /// Inverse of [`Vocabulary::sentinel`].
    pub fn sentinel_index(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        let first = FIXED_SPECIALS.len();
        (first..first + self.sentinel_count)
            .contains(&id)
            .then(|| id - first + 1)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.special_count()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a surface token. Reserved strings are not surface tokens.
    pub fn surface_id(&self, tok: &str) -> Option<TokenId> {
        self.id_of
            .get(tok)
            .copied()
            .filter(|&id| !self.is_special(id))
    }

    pub fn surface_tokens(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(self.special_count())
            .map(|(i, t)| (i as TokenId, t.as_str()))
    }

    /// Whitespace tokenization; unknown tokens, and literal occurrences of
    /// reserved strings, map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| self.surface_id(t).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (n, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} out of range for |V|={}", self.len()))
            })?;
            if n > 0 {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < FIXED_SPECIALS.len() {
            bail!(Format, "vocabulary file has {} lines, too few for the reserved tokens", lines.len());
        }
        for (i, s) in FIXED_SPECIALS.iter().enumerate() {
            if lines[i] != *s {
                bail!(Format, "line {i}: expected reserved token {s}, found {:?}", lines[i]);
            }
        }
        let sentinel_count = lines[FIXED_SPECIALS.len()..]
            .iter()
            .enumerate()
            .take_while(|(k, l)| **l == sentinel_text(k + 1))
            .count();
        if sentinel_count == 0 {
            bail!(Format, "vocabulary file has no sentinel block");
        }
        let mut v = Self::specials_only(sentinel_count);
        for (i, l) in lines.iter().enumerate().skip(v.special_count()) {
            if l.is_empty() || l.contains(char::is_whitespace) {
                bail!(Format, "line {i}: invalid token {l:?}");
            }
            if v.id_of.contains_key(*l) {
                bail!(Format, "line {i}: duplicate token {l:?}");
            }
            v.push((*l).to_owned());
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized token list; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specials(s: usize) -> usize {
        Vocabulary::special_count_for(s)
    }

    #[test]
    fn frequency_orders_surface_tokens() {
        let v = Vocabulary::build(["a a b"], specials(2) + 8, 2).unwrap();
        let a = v.surface_id("a").unwrap();
        let b = v.surface_id("b").unwrap();
        assert!(a < b);
        assert_eq!(v.len(), specials(2) + 2);
    }

    #[test]
    fn input_order_does_not_matter() {
        let v1 = Vocabulary::build(["x y z z", "q q y"], 40, 3).unwrap();
        let v2 = Vocabulary::build(["q q y", "x y z z"], 40, 3).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn keeps_top_k_by_independent_tally() {
        // token t_i appears (i % 37) + 1 times
        let mut lines = Vec::new();
        for i in 0..1000 {
            let reps = (i % 37) + 1;
            lines.push(vec![format!("t{i}"); reps].join(" "));
        }
        let v = Vocabulary::build(&lines, specials(5) + 10, 5).unwrap();
        assert_eq!(v.surface_tokens().count(), 10);

        let mut tally: Vec<(String, usize)> = (0..1000).map(|i| (format!("t{i}"), (i % 37) + 1)).collect();
        tally.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let expected: Vec<&str> = tally.iter().take(10).map(|(t, _)| t.as_str()).collect();
        let got: Vec<&str> = v.surface_tokens().map(|(_, t)| t).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn build_errors() {
        assert!(Vocabulary::build(Vec::<String>::new(), 50, 2).is_err());
        assert!(Vocabulary::build(["  "], 50, 2).is_err());
        assert!(Vocabulary::build(["a"], 50, 0).is_err());
        assert!(Vocabulary::build(["a"], specials(2), 2).is_err());
    }

    #[test]
    fn unknown_and_reserved_map_to_unk() {
        let v = Vocabulary::build(["a b"], 30, 2).unwrap();
        assert_eq!(v.encode("a zzz"), vec![v.surface_id("a").unwrap(), v.unk()]);
        assert_eq!(v.encode("<eos> [M_1]"), vec![v.unk(), v.unk()]);
        let ids = v.encode("a b");
        assert_eq!(v.decode(&ids).unwrap(), "a b");
        assert!(v.decode(&[v.len() as TokenId]).is_err());
    }

    #[test]
    fn specials_never_come_from_corpus() {
        let v = Vocabulary::build(["<eos> <sep> [M_1] a"], 30, 2).unwrap();
        let surface: Vec<&str> = v.surface_tokens().map(|(_, t)| t).collect();
        assert_eq!(surface, vec!["a"]);
    }

    #[test]
    fn sentinel_block_is_contiguous() {
        let v = Vocabulary::specials_only(100);
        let ids: Vec<TokenId> = (1..=100).map(|k| v.sentinel(k).unwrap()).collect();
        for w in ids.windows(2) {
            assert_eq!(w[1], w[0] + 1);
        }
        for (k, &id) in (1..=100).zip(&ids) {
            assert_eq!(v.sentinel_index(id), Some(k));
        }
        assert!(v.sentinel(0).is_err());
        assert!(v.sentinel(101).is_err());
        assert_eq!(v.token(ids[0]), Some("[M_1]"));
    }

    #[test]
    fn text_file_round_trip() {
        let v = Vocabulary::build(["c a b a"], 40, 7).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.fingerprint(), back.fingerprint());
        assert!(Vocabulary::from_text("<pad>\n<bos>\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_encode_identity(words in proptest::collection::vec(0usize..20, 1..30)) {
            let corpus: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
            let v = Vocabulary::build([corpus.join(" ")], 100, 4).unwrap();
            let text = words.iter().map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            let ids = v.encode(&text);
            prop_assert_eq!(v.decode(&ids).unwrap(), text);
        }
    }
}
