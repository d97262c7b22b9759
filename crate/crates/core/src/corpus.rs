//! Corpus loading, synthetic cipher-language generation with exact gold
//! alignments, and exponent-smoothed multilingual sampling.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::io::read_text;
use crate::vocab::{TokenId, Vocabulary};

/// Default exponent for smoothing per-language sampling weights.
pub const DEFAULT_SAMPLING_ALPHA: f64 = 0.7;

/// Word alignment of one sentence pair, as `(src index, tgt index)` links.
pub type Alignment = Vec<(usize, usize)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonolingualCorpus {
    pub lang: String,
    pub sentences: Vec<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    pub gold_alignments: Option<Vec<Alignment>>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Attaches gold alignments after checking counts and index bounds.
    pub fn with_alignments(mut self, alignments: Vec<Alignment>) -> Result<Self> {
        if alignments.len() != self.pairs.len() {
            bail!(
                Data,
                "{} alignment lines for {} sentence pairs",
                alignments.len(),
                self.pairs.len()
            );
        }
        for (n, (links, (e, f))) in alignments.iter().zip(&self.pairs).enumerate() {
            if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= e.len() || j >= f.len()) {
                bail!(Data, "pair {n}: link {i}-{j} outside {}x{}", e.len(), f.len());
            }
        }
        self.gold_alignments = Some(alignments);
        Ok(self)
    }
}

/// Result of reading a TSV file: the accepted pairs plus the number of lines
/// that did not have exactly two columns.
#[derive(Debug, Clone)]
pub struct ParallelLoad {
    pub corpus: ParallelCorpus,
    pub rejected: usize,
}

/// Loads one sentence per line; blank lines are skipped.
pub fn load_monolingual(path: &Path, lang: &str, vocab: &Vocabulary) -> Result<MonolingualCorpus> {
    if lang.is_empty() {
        bail!(InvalidArgument, "language code must be nonempty");
    }
    let text = read_text(path)?;
    let sentences: Vec<Vec<TokenId>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l))
        .collect();
    if sentences.is_empty() {
        bail!(Data, "{}: no usable lines", path.display());
    }
    Ok(MonolingualCorpus {
        lang: lang.to_owned(),
        sentences,
    })
}

/// Loads `src<TAB>tgt` lines. Lines without exactly two nonempty columns are
/// rejected and counted.
pub fn load_parallel(path: &Path, langs: (&str, &str), vocab: &Vocabulary) -> Result<ParallelLoad> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    let mut rejected = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_tsv_line(line) {
            Some((e, f)) => pairs.push((vocab.encode(e), vocab.encode(f))),
            None => rejected += 1,
        }
    }
    if pairs.is_empty() {
        bail!(
            Data,
            "{}: no well-formed sentence pairs ({rejected} malformed lines)",
            path.display()
        );
    }
    Ok(ParallelLoad {
        corpus: ParallelCorpus {
            src_lang: langs.0.to_owned(),
            tgt_lang: langs.1.to_owned(),
            pairs,
            gold_alignments: None,
        },
        rejected,
    })
}

fn parse_tsv_line(line: &str) -> Option<(&str, &str)> {
    let mut cols = line.split('\t');
    let e = cols.next()?;
    let f = cols.next()?;
    if cols.next().is_some() || e.trim().is_empty() || f.trim().is_empty() {
        return None;
    }
    Some((e, f))
}

/// Parses one Pharaoh-format line (`0-0 1-2 ...`).
pub fn parse_pharaoh(line: &str) -> Result<Alignment> {
    line.split_whitespace()
        .map(|link| {
            let (i, j) = link
                .split_once('-')
                .ok_or_else(|| Error::Format(format!("bad alignment link {link:?}")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad alignment link {link:?}")))
            };
            Ok((parse(i)?, parse(j)?))
        })
        .collect()
}

pub fn format_pharaoh(links: &[(usize, usize)]) -> String {
    let mut s = String::new();
    for (n, (i, j)) in links.iter().enumerate() {
        if n > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{i}-{j}");
    }
    s
}

pub fn load_alignments(path: &Path) -> Result<Vec<Alignment>> {
    read_text(path)?.lines().map(parse_pharaoh).collect()
}

/// Normalized per-corpus sampling weights `q_i^alpha / sum_j q_j^alpha`, where
/// `q_i` is corpus i's share of all sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    weights: Vec<f64>,
}

impl SamplingDistribution {
    pub fn new(sizes: &[usize], alpha: f64) -> Result<Self> {
        if sizes.is_empty() {
            bail!(InvalidArgument, "no corpora to sample from");
        }
        if sizes.contains(&0) {
            bail!(InvalidArgument, "corpus sizes must be positive: {sizes:?}");
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            bail!(InvalidArgument, "sampling exponent must be finite and >= 0, got {alpha}");
        }
        let total: f64 = sizes.iter().map(|&n| n as f64).sum();
        let smoothed: Vec<f64> = sizes.iter().map(|&n| (n as f64 / total).powf(alpha)).collect();
        let z: f64 = smoothed.iter().sum();
        Ok(Self {
            weights: smoothed.into_iter().map(|w| w / z).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.weights.len() == 1 {
            return 0;
        }
        WeightedIndex::new(&self.weights)
            .expect("weights are positive and finite")
            .sample(rng)
    }
}

/// Shape of a synthetic cipher-language corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherConfig {
    /// Token types per language.
    pub vocab_size: usize,
    pub n_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub reorder_window: usize,
    /// Successors per token in the source-language bigram chain.
    pub branching: usize,
}

impl Default for CipherConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_pairs: 20_000,
            min_len: 6,
            max_len: 14,
            reorder_window: 3,
            branching: 4,
        }
    }
}

impl CipherConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            bail!(InvalidArgument, "cipher vocab_size must be >= 4, got {}", self.vocab_size);
        }
        if self.n_pairs == 0 {
            bail!(InvalidArgument, "n_pairs must be >= 1");
        }
        if self.reorder_window < 1 {
            bail!(InvalidArgument, "reorder_window must be >= 1");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            bail!(
                InvalidArgument,
                "invalid sentence length range {}..={}",
                self.min_len,
                self.max_len
            );
        }
        if self.branching == 0 {
            bail!(InvalidArgument, "branching must be >= 1");
        }
        Ok(())
    }
}

/// A source language given by a sparse bigram chain over `a0..a{k-1}` and a
/// target language obtained by a token bijection onto `b0..b{k-1}` followed
/// by shuffling inside consecutive windows.
#[derive(Debug, Clone)]
pub struct CipherLanguage {
    cfg: CipherConfig,
    bijection: Vec<usize>,
    start: WeightedIndex<f64>,
    successors: Vec<(Vec<usize>, WeightedIndex<f64>)>,
}

/// One generated sentence pair with its gold alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub alignment: Alignment,
}

impl CipherLanguage {
    pub fn new(cfg: &CipherConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.vocab_size;
        let mut bijection: Vec<usize> = (0..k).collect();
        bijection.shuffle(rng);

        let mut rank: Vec<usize> = (0..k).collect();
        rank.shuffle(rng);
        let start_w: Vec<f64> = rank.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect();
        let start = WeightedIndex::new(&start_w).expect("positive weights");

        let fanout = cfg.branching.min(k);
        let successors = (0..k)
            .map(|_| {
                let next: Vec<usize> = rand::seq::index::sample(rng, k, fanout).into_vec();
                let w: Vec<f64> = (0..fanout).map(|_| rng.random_range(0.5..1.5)).collect();
                (next, WeightedIndex::new(&w).expect("positive weights"))
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            bijection,
            start,
            successors,
        })
    }

    pub fn src_token(i: usize) -> String {
        format!("a{i}")
    }

    pub fn tgt_token(i: usize) -> String {
        format!("b{i}")
    }

    /// Source-language sentence as token indices.
    pub fn sample_indices(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let mut out = Vec::with_capacity(len);
        let mut cur = self.start.sample(rng);
        out.push(cur);
        while out.len() < len {
            let (next, w) = &self.successors[cur];
            cur = next[w.sample(rng)];
            out.push(cur);
        }
        out
    }

    pub fn sample_source(&self, rng: &mut impl Rng) -> Vec<String> {
        self.sample_indices(rng).into_iter().map(Self::src_token).collect()
    }

    /// Independent target-language sentence (translation of a fresh source).
    pub fn sample_target(&self, rng: &mut impl Rng) -> Vec<String> {
        self.sample_pair(rng).tgt
    }

    pub fn sample_pair(&self, rng: &mut impl Rng) -> CipherPair {
        let src = self.sample_indices(rng);
        let mapped: Vec<usize> = src.iter().map(|&i| self.bijection[i]).collect();
        // order[j] = source position that lands at target position j
        let mut order: Vec<usize> = (0..src.len()).collect();
        for chunk in order.chunks_mut(self.cfg.reorder_window) {
            chunk.shuffle(rng);
        }
        let tgt = order.iter().map(|&i| Self::tgt_token(mapped[i])).collect();
        let mut alignment: Alignment = order.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        alignment.sort_unstable();
        CipherPair {
            src: src.into_iter().map(Self::src_token).collect(),
            tgt,
            alignment,
        }
    }

    /// Target-language token for a source token index.
    pub fn translate_index(&self, i: usize) -> usize {
        self.bijection[i]
    }
}

/// Full synthetic dataset: training pairs, unpaired monolingual text for each
/// language, and held-out test pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherData {
    pub train: Vec<CipherPair>,
    pub mono_src: Vec<Vec<String>>,
    pub mono_tgt: Vec<Vec<String>>,
    pub test: Vec<CipherPair>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parallel cipher corpus with gold alignments, fully determined by `seed`.
pub fn generate_cipher_corpus(cfg: &CipherConfig, seed: u64) -> Result<Vec<CipherPair>> {
    Ok(generate_cipher_data(cfg, seed, 0, 0)?.train)
}

pub fn generate_cipher_data(
    cfg: &CipherConfig,
    seed: u64,
    n_mono: usize,
    n_test: usize,
) -> Result<CipherData> {
    let lang = CipherLanguage::new(cfg, &mut stream_rng(seed, 0))?;
    let mut rng = stream_rng(seed, 1);
    let train = (0..cfg.n_pairs).map(|_| lang.sample_pair(&mut rng)).collect();
    let mut rng = stream_rng(seed, 2);
    let mono_src = (0..n_mono).map(|_| lang.sample_source(&mut rng)).collect();
    let mut rng = stream_rng(seed, 3);
    let mono_tgt = (0..n_mono).map(|_| lang.sample_target(&mut rng)).collect();
    let mut rng = stream_rng(seed, 4);
    let test = (0..n_test).map(|_| lang.sample_pair(&mut rng)).collect();
    Ok(CipherData {
        train,
        mono_src,
        mono_tgt,
        test,
    })
}

/// TSV body (`src<TAB>tgt` per line) for a set of pairs.
pub fn pairs_to_tsv(pairs: &[CipherPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}\t{}", p.src.join(" "), p.tgt.join(" "));
    }
    s
}

pub fn pairs_to_pharaoh(pairs: &[CipherPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}", format_pharaoh(&p.alignment));
    }
    s
}

pub fn sentences_to_text(sentences: &[Vec<String>]) -> String {
    let mut s = String::new();
    for sent in sentences {
        let _ = writeln!(s, "{}", sent.join(" "));
    }
    s
}

/// Checks that `links` is a bijection between the positions of a `n_src` x
/// `n_tgt` sentence pair.
pub fn is_position_bijection(links: &[(usize, usize)], n_src: usize, n_tgt: usize) -> bool {
    if n_src != n_tgt || links.len() != n_src {
        return false;
    }
    let srcs: BTreeSet<usize> = links.iter().map(|l| l.0).collect();
    let tgts: BTreeSet<usize> = links.iter().map(|l| l.1).collect();
    srcs.len() == n_src
        && tgts.len() == n_tgt
        && srcs.iter().all(|&i| i < n_src)
        && tgts.iter().all(|&j| j < n_tgt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a b c x y"], 64, 4).unwrap()
    }

    #[test]
    fn monolingual_skips_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.en.txt");
        fs::write(&p, "a b\n\nc").unwrap();
        let c = load_monolingual(&p, "en", &vocab()).unwrap();
        assert_eq!(c.sentences.len(), 2);
        fs::write(&p, "").unwrap();
        assert!(load_monolingual(&p, "en", &vocab()).is_err());
        assert!(load_monolingual(&dir.path().join("missing"), "en", &vocab()).is_err());
    }

    #[test]
    fn monolingual_count_matches_line_counter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.en.txt");
        let mut body = String::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000 {
            if rng.random_bool(0.1) {
                body.push_str(if i % 2 == 0 { "\n" } else { "   \n" });
            } else {
                body.push_str("a b c\n");
            }
        }
        fs::write(&p, &body).unwrap();
        let nonblank = body.split('\n').filter(|l| !l.trim().is_empty()).count();
        let c = load_monolingual(&p, "en", &vocab()).unwrap();
        assert_eq!(c.sentences.len(), nonblank);
    }

    #[test]
    fn parallel_rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.en-fr.tsv");
        let v = vocab();
        fs::write(&p, "a b\tx y\n").unwrap();
        let l = load_parallel(&p, ("en", "fr"), &v).unwrap();
        assert_eq!(l.corpus.pairs, vec![(v.encode("a b"), v.encode("x y"))]);
        assert_eq!(l.rejected, 0);

        fs::write(&p, "a b\n").unwrap();
        assert!(load_parallel(&p, ("en", "fr"), &v).is_err());

        let body = "a\tx\nb\nc\tx\ty\na b\tc\n\tx\nq\tr\n";
        fs::write(&p, body).unwrap();
        let l = load_parallel(&p, ("en", "fr"), &v).unwrap();
        let one_tab = body
            .lines()
            .filter(|l| l.matches('\t').count() == 1 && l.split('\t').all(|c| !c.trim().is_empty()))
            .count();
        assert_eq!(l.corpus.len(), one_tab);
        assert_eq!(l.rejected, 3);
    }

    #[test]
    fn pharaoh_round_trip() {
        let links = vec![(0, 0), (1, 2), (2, 1)];
        assert_eq!(parse_pharaoh(&format_pharaoh(&links)).unwrap(), links);
        assert!(parse_pharaoh("0-x").is_err());
        assert_eq!(parse_pharaoh("").unwrap(), vec![]);
    }

    #[test]
    fn sampling_weights() {
        let d = SamplingDistribution::new(&[5, 5], 0.3).unwrap();
        assert_eq!(d.weights(), &[0.5, 0.5]);
        let d = SamplingDistribution::new(&[8, 2], 0.0).unwrap();
        assert_eq!(d.weights(), &[0.5, 0.5]);
        // 0.8^0.7 = 0.855.., 0.2^0.7 = 0.3241..
        let d = SamplingDistribution::new(&[8, 2], 0.7).unwrap();
        let a = 0.8f64.powf(0.7);
        let b = 0.2f64.powf(0.7);
        assert!((d.weights()[0] - a / (a + b)).abs() < 1e-15);
        assert!((d.weights()[0] - 0.7252).abs() < 1e-4);
        assert!((d.weights()[1] - 0.2748).abs() < 1e-4);
        let p = SamplingDistribution::new(&[8, 2], 1.0).unwrap();
        assert!((p.weights()[0] - 0.8).abs() < 1e-15);
        assert!(SamplingDistribution::new(&[3, 0], 0.7).is_err());
        assert!(SamplingDistribution::new(&[3], -1.0).is_err());
    }

    #[test]
    fn sampling_is_scale_invariant() {
        for alpha in [0.0, 0.3, 0.7, 1.0, 2.0] {
            let a = SamplingDistribution::new(&[8, 2], alpha).unwrap();
            let b = SamplingDistribution::new(&[80, 20], alpha).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                assert!((x - y).abs() < 1e-12);
            }
            assert!((a.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_frequencies_follow_weights() {
        let d = SamplingDistribution::new(&[8, 2], 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200_000;
        let hits = (0..n).filter(|_| d.sample(&mut rng) == 0).count();
        assert!((hits as f64 / n as f64 - d.weights()[0]).abs() < 0.005);
    }

    #[test]
    fn cipher_without_reordering_is_relabeling() {
        let cfg = CipherConfig {
            n_pairs: 200,
            reorder_window: 1,
            ..CipherConfig::default()
        };
        for p in generate_cipher_corpus(&cfg, 11).unwrap() {
            assert_eq!(p.src.len(), p.tgt.len());
            let identity: Alignment = (0..p.src.len()).map(|i| (i, i)).collect();
            assert_eq!(p.alignment, identity);
        }
    }

    #[test]
    fn cipher_is_deterministic() {
        let cfg = CipherConfig {
            n_pairs: 50,
            ..CipherConfig::default()
        };
        assert_eq!(
            generate_cipher_data(&cfg, 5, 10, 10).unwrap(),
            generate_cipher_data(&cfg, 5, 10, 10).unwrap()
        );
        assert_ne!(
            generate_cipher_corpus(&cfg, 5).unwrap(),
            generate_cipher_corpus(&cfg, 6).unwrap()
        );
    }

    #[test]
    fn cipher_alignments_are_bijections_and_token_consistent() {
        let cfg = CipherConfig {
            n_pairs: 1000,
            reorder_window: 3,
            ..CipherConfig::default()
        };
        let lang = CipherLanguage::new(&cfg, &mut stream_rng(9, 0)).unwrap();
        let pairs = generate_cipher_corpus(&cfg, 9).unwrap();
        for p in &pairs {
            assert!(is_position_bijection(&p.alignment, p.src.len(), p.tgt.len()));
            for &(i, j) in &p.alignment {
                let si: usize = p.src[i][1..].parse().unwrap();
                assert_eq!(p.tgt[j], CipherLanguage::tgt_token(lang.translate_index(si)));
            }
            // multiset of f equals the image of the multiset of e
            let mut img: Vec<String> = p
                .src
                .iter()
                .map(|t| CipherLanguage::tgt_token(lang.translate_index(t[1..].parse().unwrap())))
                .collect();
            let mut tgt = p.tgt.clone();
            img.sort();
            tgt.sort();
            assert_eq!(img, tgt);
        }
    }

    #[test]
    fn cipher_config_errors() {
        let bad = |f: fn(&mut CipherConfig)| {
            let mut c = CipherConfig::default();
            f(&mut c);
            generate_cipher_corpus(&c, 0).is_err()
        };
        assert!(bad(|c| c.reorder_window = 0));
        assert!(bad(|c| c.vocab_size = 3));
        assert!(bad(|c| c.n_pairs = 0));
        assert!(bad(|c| c.min_len = 0));
    }

    #[test]
    fn alignment_bounds_are_checked() {
        let c = ParallelCorpus {
            src_lang: "a".into(),
            tgt_lang: "b".into(),
            pairs: vec![(vec![10, 11], vec![12])],
            gold_alignments: None,
        };
        assert!(c.clone().with_alignments(vec![vec![(1, 0)]]).is_ok());
        assert!(c.clone().with_alignments(vec![vec![(2, 0)]]).is_err());
        assert!(c.with_alignments(vec![]).is_err());
    }
}
