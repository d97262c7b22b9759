//! Pre-norm encoder-decoder transformer: forward pass, loss, and exact
//! gradients by reverse-mode differentiation of the recorded pass.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2};

use super::layers::{
    attention, attention_backward, feed_forward, feed_forward_backward, layer_norm,
    layer_norm_backward, AttnCache, FfnCache, NormCache, Segment,
};
use super::params::{Id, ParameterSet};
use crate::error::{bail, Result};
use crate::pnat::{build_decoder_mask, AttentionMaskSpec, GroupPartition};
use crate::vocab::TokenId;

/// What the decoder reads: one token and one absolute position per target
/// slot, plus the self-attention mask over slots.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderFeed {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub mask: AttentionMaskSpec,
}

impl DecoderFeed {
    /// Shifted teacher forcing under a group partition: slot `i` reads
    /// `target[i - 1]`, except that every group's first slot reads `start`.
    /// Positions are global target indices.
    pub fn teacher_forced(target: &[TokenId], partition: &GroupPartition, start: TokenId) -> Result<Self> {
        let mask = build_decoder_mask(partition, target.len())?;
        let tokens = (0..target.len())
            .map(|i| {
                if partition.is_group_start(i) {
                    start
                } else {
                    target[i - 1]
                }
            })
            .collect();
        Ok(Self {
            tokens,
            positions: (0..target.len()).collect(),
            mask,
        })
    }

    /// Causal feed of an already-decoded prefix (the prefix starts with the
    /// start token); used for step-by-step generation.
    pub fn causal(prefix: &[TokenId]) -> Self {
        Self {
            tokens: prefix.to_vec(),
            positions: (0..prefix.len()).collect(),
            mask: AttentionMaskSpec::causal(prefix.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A supervised sequence pair with its decoding groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqPair {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub partition: GroupPartition,
}

impl SeqPair {
    pub fn feed(&self, start: TokenId) -> Result<DecoderFeed> {
        DecoderFeed::teacher_forced(&self.target, &self.partition, start)
    }
}

/// Per-example outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Residual stream after the embeddings and after each encoder layer.
    pub encoder_states: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    pub fn log_probs(&self) -> Array2<f64> {
        log_softmax(&self.logits)
    }
}

pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

struct EncLayerTape {
    ln_attn: NormCache,
    attn: AttnCache,
    ln_ffn: NormCache,
    ffn: FfnCache,
}

struct DecLayerTape {
    ln_self: NormCache,
    self_attn: AttnCache,
    ln_cross: NormCache,
    cross_attn: AttnCache,
    ln_ffn: NormCache,
    ffn: FfnCache,
}

struct EncoderPass {
    ids: Vec<TokenId>,
    segments: Vec<Range<usize>>,
    states: Vec<Array2<f64>>,
    layers: Vec<EncLayerTape>,
    norm: NormCache,
    out: Array2<f64>,
}

struct Tape {
    enc: EncoderPass,
    dec_ids: Vec<TokenId>,
    dec_pos: Vec<usize>,
    dec_segments: Vec<Range<usize>>,
    dec_layers: Vec<DecLayerTape>,
    dec_norm: NormCache,
    z: Array2<f64>,
    logits: Array2<f64>,
}

fn segments_of<I: Iterator<Item = usize>>(lens: I) -> Vec<Range<usize>> {
    let mut off = 0;
    lens.map(|n| {
        let r = off..off + n;
        off += n;
        r
    })
    .collect()
}

fn check_ids(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab_size) {
        bail!(InvalidArgument, "token id {bad} >= vocab size {vocab_size}");
    }
    Ok(())
}

fn embed(p: &ParameterSet, ids: &[TokenId], positions: &[usize], pos_table: Id) -> Array2<f64> {
    let emb = p.mat(p.layout().embed);
    let pos = p.mat(pos_table);
    let d = emb.ncols();
    let mut x = Array2::zeros((ids.len(), d));
    for (r, (&t, &q)) in ids.iter().zip(positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&emb.row(t as usize));
        row += &pos.row(q);
    }
    x
}

fn embed_backward(g: &mut ParameterSet, dx: &Array2<f64>, ids: &[TokenId], positions: &[usize], pos_table: Id) {
    let embed_id = g.layout().embed;
    {
        let mut ge = g.mat_mut(embed_id);
        for (r, &t) in ids.iter().enumerate() {
            ge.row_mut(t as usize).scaled_add(1.0, &dx.row(r));
        }
    }
    let mut gp = g.mat_mut(pos_table);
    for (r, &q) in positions.iter().enumerate() {
        gp.row_mut(q).scaled_add(1.0, &dx.row(r));
    }
}

fn run_encoder(p: &ParameterSet, inputs: &[&[TokenId]]) -> Result<EncoderPass> {
    let cfg = p.config();
    for inp in inputs {
        if inp.is_empty() {
            bail!(InvalidArgument, "empty encoder input");
        }
        if inp.len() > cfg.max_len {
            bail!(InvalidArgument, "input length {} exceeds max_len {}", inp.len(), cfg.max_len);
        }
        check_ids(inp, cfg.vocab_size)?;
    }
    let layout = p.layout();
    let ids: Vec<TokenId> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = inputs.iter().flat_map(|s| 0..s.len()).collect();
    let segments = segments_of(inputs.iter().map(|s| s.len()));
    let segs: Vec<Segment<'_>> = segments
        .iter()
        .map(|r| Segment {
            q: r.clone(),
            k: r.clone(),
            mask: None,
        })
        .collect();

    let mut x = embed(p, &ids, &positions, layout.enc_pos);
    let mut states = vec![x.clone()];
    let mut layers = Vec::with_capacity(layout.encoder.len());
    for lid in &layout.encoder {
        let (a, ln_attn) = layer_norm(&x, p, lid.ln_attn);
        let (att, attn) = attention(a, None, &segs, cfg.n_heads, p, lid.attn);
        x += &att;
        let (b, ln_ffn) = layer_norm(&x, p, lid.ln_ffn);
        let (ff, ffn) = feed_forward(b, p, lid.ffn);
        x += &ff;
        states.push(x.clone());
        layers.push(EncLayerTape {
            ln_attn,
            attn,
            ln_ffn,
            ffn,
        });
    }
    let (out, norm) = layer_norm(&x, p, layout.enc_norm);
    Ok(EncoderPass {
        ids,
        segments,
        states,
        layers,
        norm,
        out,
    })
}

fn run(p: &ParameterSet, items: &[(&[TokenId], &DecoderFeed)]) -> Result<Tape> {
    if items.is_empty() {
        bail!(InvalidArgument, "empty batch");
    }
    let cfg = p.config();
    for (_, feed) in items {
        if feed.is_empty() {
            bail!(InvalidArgument, "empty decoder feed");
        }
        if feed.positions.len() != feed.len() || feed.mask.len() != feed.len() {
            bail!(InvalidArgument, "decoder feed tokens, positions and mask disagree in length");
        }
        if let Some(&q) = feed.positions.iter().find(|&&q| q >= cfg.max_len) {
            bail!(InvalidArgument, "decoder position {q} exceeds max_len {}", cfg.max_len);
        }
        check_ids(&feed.tokens, cfg.vocab_size)?;
    }
    let inputs: Vec<&[TokenId]> = items.iter().map(|(i, _)| *i).collect();
    let enc = run_encoder(p, &inputs)?;

    let layout = p.layout();
    let dec_ids: Vec<TokenId> = items.iter().flat_map(|(_, f)| f.tokens.iter().copied()).collect();
    let dec_pos: Vec<usize> = items.iter().flat_map(|(_, f)| f.positions.iter().copied()).collect();
    let dec_segments = segments_of(items.iter().map(|(_, f)| f.len()));
    let self_segs: Vec<Segment<'_>> = dec_segments
        .iter()
        .zip(items)
        .map(|(r, (_, f))| Segment {
            q: r.clone(),
            k: r.clone(),
            mask: Some(&f.mask),
        })
        .collect();
    let cross_segs: Vec<Segment<'_>> = dec_segments
        .iter()
        .zip(&enc.segments)
        .map(|(q, k)| Segment {
            q: q.clone(),
            k: k.clone(),
            mask: None,
        })
        .collect();

    let mut y = embed(p, &dec_ids, &dec_pos, layout.dec_pos);
    let mut dec_layers = Vec::with_capacity(layout.decoder.len());
    for lid in &layout.decoder {
        let (a, ln_self) = layer_norm(&y, p, lid.ln_self);
        let (sa, self_attn) = attention(a, None, &self_segs, cfg.n_heads, p, lid.self_attn);
        y += &sa;
        let (b, ln_cross) = layer_norm(&y, p, lid.ln_cross);
        let (ca, cross_attn) = attention(b, Some(enc.out.clone()), &cross_segs, cfg.n_heads, p, lid.cross_attn);
        y += &ca;
        let (c, ln_ffn) = layer_norm(&y, p, lid.ln_ffn);
        let (ff, ffn) = feed_forward(c, p, lid.ffn);
        y += &ff;
        dec_layers.push(DecLayerTape {
            ln_self,
            self_attn,
            ln_cross,
            cross_attn,
            ln_ffn,
            ffn,
        });
    }
    let (z, dec_norm) = layer_norm(&y, p, layout.dec_norm);
    let logits = z.dot(&p.mat(layout.embed).t());
    Ok(Tape {
        enc,
        dec_ids,
        dec_pos,
        dec_segments,
        dec_layers,
        dec_norm,
        z,
        logits,
    })
}

fn backward(p: &ParameterSet, tape: &Tape, items: &[(&[TokenId], &DecoderFeed)], dlogits: &Array2<f64>) -> ParameterSet {
    let cfg = p.config();
    let layout = p.layout();
    let mut g = p.zeros_like();

    // output projection shares the embedding matrix
    general_mat_mul(1.0, &dlogits.t(), &tape.z, 1.0, &mut g.mat_mut(layout.embed));
    let dz = dlogits.dot(&p.mat(layout.embed));
    let mut dy = layer_norm_backward(&dz, &tape.dec_norm, p, &mut g, layout.dec_norm);

    let self_segs: Vec<Segment<'_>> = tape
        .dec_segments
        .iter()
        .zip(items)
        .map(|(r, (_, f))| Segment {
            q: r.clone(),
            k: r.clone(),
            mask: Some(&f.mask),
        })
        .collect();
    let cross_segs: Vec<Segment<'_>> = tape
        .dec_segments
        .iter()
        .zip(&tape.enc.segments)
        .map(|(q, k)| Segment {
            q: q.clone(),
            k: k.clone(),
            mask: None,
        })
        .collect();
    let enc_segs: Vec<Segment<'_>> = tape
        .enc
        .segments
        .iter()
        .map(|r| Segment {
            q: r.clone(),
            k: r.clone(),
            mask: None,
        })
        .collect();

    let mut denc_out = Array2::<f64>::zeros(tape.enc.out.raw_dim());
    for (lid, lt) in layout.decoder.iter().zip(&tape.dec_layers).rev() {
        let dc = feed_forward_backward(&dy, &lt.ffn, p, &mut g, lid.ffn);
        dy += &layer_norm_backward(&dc, &lt.ln_ffn, p, &mut g, lid.ln_ffn);

        let (db, dkv) = attention_backward(&dy, &lt.cross_attn, &cross_segs, cfg.n_heads, p, &mut g, lid.cross_attn);
        denc_out += &dkv.expect("cross-attention has separate keys");
        dy += &layer_norm_backward(&db, &lt.ln_cross, p, &mut g, lid.ln_cross);

        let (da, _) = attention_backward(&dy, &lt.self_attn, &self_segs, cfg.n_heads, p, &mut g, lid.self_attn);
        dy += &layer_norm_backward(&da, &lt.ln_self, p, &mut g, lid.ln_self);
    }
    embed_backward(&mut g, &dy, &tape.dec_ids, &tape.dec_pos, layout.dec_pos);

    let mut dx = layer_norm_backward(&denc_out, &tape.enc.norm, p, &mut g, layout.enc_norm);
    for (lid, lt) in layout.encoder.iter().zip(&tape.enc.layers).rev() {
        let db = feed_forward_backward(&dx, &lt.ffn, p, &mut g, lid.ffn);
        dx += &layer_norm_backward(&db, &lt.ln_ffn, p, &mut g, lid.ln_ffn);
        let (da, _) = attention_backward(&dx, &lt.attn, &enc_segs, cfg.n_heads, p, &mut g, lid.attn);
        dx += &layer_norm_backward(&da, &lt.ln_attn, p, &mut g, lid.ln_attn);
    }
    let enc_pos: Vec<usize> = tape.enc.segments.iter().flat_map(|r| 0..r.len()).collect();
    embed_backward(&mut g, &dx, &tape.enc.ids, &enc_pos, layout.enc_pos);
    g
}

/// Forward pass of one example under an explicit decoder feed.
pub fn forward(p: &ParameterSet, input: &[TokenId], feed: &DecoderFeed) -> Result<ForwardTrace> {
    let tape = run(p, &[(input, feed)])?;
    let enc_rows = tape.enc.segments[0].clone();
    Ok(ForwardTrace {
        encoder_states: tape
            .enc
            .states
            .iter()
            .map(|s| s.slice(s![enc_rows.clone(), ..]).to_owned())
            .collect(),
        logits: tape.logits,
    })
}

/// Encoder residual states (embeddings plus one per layer) of each input.
pub fn encoder_states(p: &ParameterSet, inputs: &[&[TokenId]]) -> Result<Vec<Vec<Array2<f64>>>> {
    let enc = run_encoder(p, inputs)?;
    Ok(enc
        .segments
        .iter()
        .map(|r| {
            enc.states
                .iter()
                .map(|s| s.slice(s![r.clone(), ..]).to_owned())
                .collect()
        })
        .collect())
}

/// Logits of the last decoder slot, given an encoded input and a causal
/// prefix. Recomputes the whole prefix (no caching).
pub fn next_token_logits(p: &ParameterSet, input: &[TokenId], prefix: &[TokenId]) -> Result<Array1<f64>> {
    let feed = DecoderFeed::causal(prefix);
    let trace = forward(p, input, &feed)?;
    Ok(trace.logits.row(prefix.len() - 1).to_owned())
}

/// Batch loss and its gradient.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean over the batch of each example's summed token loss.
    pub loss: f64,
    pub example_losses: Vec<f64>,
    pub grads: ParameterSet,
}

/// Mean over examples of the grouped loss, with exact gradients. Each
/// example's decoder is fed by shifted teacher forcing under its partition
/// (`start` at every group's first slot).
pub fn loss_and_grads(p: &ParameterSet, batch: &[SeqPair], start: TokenId) -> Result<LossAndGrads> {
    let feeds = batch.iter().map(|b| b.feed(start)).collect::<Result<Vec<_>>>()?;
    let items: Vec<(&[TokenId], &DecoderFeed)> = batch.iter().map(|b| b.input.as_slice()).zip(&feeds).collect();
    for b in batch {
        check_ids(&b.target, p.config().vocab_size)?;
    }
    let tape = run(p, &items)?;
    let n = batch.len() as f64;
    let log_probs = log_softmax(&tape.logits);
    let mut dlogits = log_probs.mapv(f64::exp);
    let mut example_losses = Vec::with_capacity(batch.len());
    for (seg, b) in tape.dec_segments.iter().zip(batch) {
        let mut l = 0.0;
        for (row, &y) in seg.clone().zip(&b.target) {
            l -= log_probs[(row, y as usize)];
            dlogits[(row, y as usize)] -= 1.0;
        }
        example_losses.push(l);
    }
    dlogits /= n;
    let loss = example_losses.iter().sum::<f64>() / n;
    if !loss.is_finite() {
        bail!(Numeric, "non-finite loss {loss} (example losses {example_losses:?})");
    }
    let grads = backward(p, &tape, &items, &dlogits);
    Ok(LossAndGrads {
        loss,
        example_losses,
        grads,
    })
}

/// Loss only, same definition as [`loss_and_grads`].
pub fn loss(p: &ParameterSet, batch: &[SeqPair], start: TokenId) -> Result<f64> {
    let feeds = batch.iter().map(|b| b.feed(start)).collect::<Result<Vec<_>>>()?;
    let items: Vec<(&[TokenId], &DecoderFeed)> = batch.iter().map(|b| b.input.as_slice()).zip(&feeds).collect();
    let tape = run(p, &items)?;
    let log_probs = log_softmax(&tape.logits);
    let total: f64 = tape
        .dec_segments
        .iter()
        .zip(batch)
        .map(|(seg, b)| -seg.clone().zip(&b.target).map(|(r, &y)| log_probs[(r, y as usize)]).sum::<f64>())
        .sum();
    Ok(total / batch.len() as f64)
}

/// Softmax rows of `logits`; exposed for the row-sum invariant.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax(logits).mapv(f64::exp)
}
