//! Row-wise building blocks with their backward passes. Inputs are packed:
//! rows of several sequences stacked into one matrix, with attention applied
//! per segment.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{AttnIds, FfnIds, NormIds, ParameterSet};
use crate::pnat::AttentionMaskSpec;

pub(crate) const NORM_EPS: f64 = 1e-6;

/// `acc += a^T b`
fn accumulate_at_b(acc: &mut ndarray::ArrayViewMut2<'_, f64>, a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, p: &ParameterSet, ids: NormIds) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let gain = p.vec(ids.gain);
    let bias = p.vec(ids.bias);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + NORM_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    p: &ParameterSet,
    g: &mut ParameterSet,
    ids: NormIds,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let gain = p.vec(ids.gain);
    g.vec_mut(ids.gain).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    g.vec_mut(ids.bias).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let mut dx = dy * &gain;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row).and(&xh).for_each(|v, &h| {
            *v = r * (*v - mean_d - h * mean_dx);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) struct FfnCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn feed_forward(x: Array2<f64>, p: &ParameterSet, ids: FfnIds) -> (Array2<f64>, FfnCache) {
    let mut pre = x.dot(&p.mat(ids.w1));
    pre += &p.vec(ids.b1);
    let act = pre.mapv(gelu);
    let mut out = act.dot(&p.mat(ids.w2));
    out += &p.vec(ids.b2);
    (out, FfnCache { input: x, pre, act })
}

pub(crate) fn feed_forward_backward(
    dy: &Array2<f64>,
    c: &FfnCache,
    p: &ParameterSet,
    g: &mut ParameterSet,
    ids: FfnIds,
) -> Array2<f64> {
    accumulate_at_b(&mut g.mat_mut(ids.w2), &c.act.view(), &dy.view());
    g.vec_mut(ids.b2).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let mut dpre = dy.dot(&p.mat(ids.w2).t());
    Zip::from(&mut dpre).and(&c.pre).for_each(|d, &h| *d *= gelu_grad(h));
    accumulate_at_b(&mut g.mat_mut(ids.w1), &c.input.view(), &dpre.view());
    g.vec_mut(ids.b1).scaled_add(1.0, &dpre.sum_axis(Axis(0)));
    dpre.dot(&p.mat(ids.w1).t())
}

/// One attention segment: query rows attend to key rows of the same sequence.
pub(crate) struct Segment<'a> {
    pub q: Range<usize>,
    pub k: Range<usize>,
    /// Decoder self-attention restriction; `None` means every key is visible.
    pub mask: Option<&'a AttentionMaskSpec>,
}

pub(crate) struct AttnCache {
    q_in: Array2<f64>,
    /// `None` when keys come from the query input (self-attention).
    kv_in: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    heads_out: Array2<f64>,
    /// probabilities per segment, per head
    probs: Vec<Vec<Array2<f64>>>,
}

fn masked_softmax_rows(scores: &mut Array2<f64>, mask: Option<&AttentionMaskSpec>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let visible = |k: usize| mask.is_none_or(|m| m.allowed(i, k));
        let max = row
            .iter()
            .enumerate()
            .filter(|(k, _)| visible(*k))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, v) in row.iter_mut().enumerate() {
            if visible(k) {
                *v = (*v - max).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= z;
    }
}

/// Multi-head attention without biases. `kv_in = None` is self-attention.
pub(crate) fn attention(
    q_in: Array2<f64>,
    kv_in: Option<Array2<f64>>,
    segments: &[Segment<'_>],
    n_heads: usize,
    p: &ParameterSet,
    ids: AttnIds,
) -> (Array2<f64>, AttnCache) {
    let src = kv_in.as_ref().unwrap_or(&q_in);
    let q = q_in.dot(&p.mat(ids.wq));
    let k = src.dot(&p.mat(ids.wk));
    let v = src.dot(&p.mat(ids.wv));
    let d = q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(segments.len());
    for seg in segments {
        let mut per_head = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![seg.q.clone(), cols.clone()]);
            let kh = k.slice(s![seg.k.clone(), cols.clone()]);
            let vh = v.slice(s![seg.k.clone(), cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            masked_softmax_rows(&mut scores, seg.mask);
            heads_out
                .slice_mut(s![seg.q.clone(), cols])
                .assign(&scores.dot(&vh));
            per_head.push(scores);
        }
        probs.push(per_head);
    }
    let out = heads_out.dot(&p.mat(ids.wo));
    (
        out,
        AttnCache {
            q_in,
            kv_in,
            q,
            k,
            v,
            heads_out,
            probs,
        },
    )
}

/// Returns `(d q_in, d kv_in)`; for self-attention the second is `None` and
/// both contributions are already summed into the first.
pub(crate) fn attention_backward(
    dy: &Array2<f64>,
    c: &AttnCache,
    segments: &[Segment<'_>],
    n_heads: usize,
    p: &ParameterSet,
    g: &mut ParameterSet,
    ids: AttnIds,
) -> (Array2<f64>, Option<Array2<f64>>) {
    accumulate_at_b(&mut g.mat_mut(ids.wo), &c.heads_out.view(), &dy.view());
    let dheads = dy.dot(&p.mat(ids.wo).t());
    let d = c.q.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (seg, per_head) in segments.iter().zip(&c.probs) {
        for (h, prob) in per_head.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            let qh = c.q.slice(s![seg.q.clone(), cols.clone()]);
            let kh = c.k.slice(s![seg.k.clone(), cols.clone()]);
            let vh = c.v.slice(s![seg.k.clone(), cols.clone()]);
            let dout = dheads.slice(s![seg.q.clone(), cols.clone()]);
            let dprob = dout.dot(&vh.t());
            dv.slice_mut(s![seg.k.clone(), cols.clone()])
                .scaled_add(1.0, &prob.t().dot(&dout));
            let mut dscore = prob * &dprob;
            for (mut row, p_row) in dscore.rows_mut().into_iter().zip(prob.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&p_row).for_each(|v, &pv| *v -= pv * dot);
            }
            dscore *= scale;
            dq.slice_mut(s![seg.q.clone(), cols.clone()])
                .scaled_add(1.0, &dscore.dot(&kh));
            dk.slice_mut(s![seg.k.clone(), cols])
                .scaled_add(1.0, &dscore.t().dot(&qh));
        }
    }
    let src = c.kv_in.as_ref().unwrap_or(&c.q_in);
    accumulate_at_b(&mut g.mat_mut(ids.wq), &c.q_in.view(), &dq.view());
    accumulate_at_b(&mut g.mat_mut(ids.wk), &src.view(), &dk.view());
    accumulate_at_b(&mut g.mat_mut(ids.wv), &src.view(), &dv.view());
    let dq_in = dq.dot(&p.mat(ids.wq).t());
    let mut dsrc = dk.dot(&p.mat(ids.wk).t());
    general_mat_mul(1.0, &dv, &p.mat(ids.wv).t(), 1.0, &mut dsrc);
    match c.kv_in {
        Some(_) => (dq_in, Some(dsrc)),
        None => (dq_in + dsrc, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut s = Array2::from_shape_fn((4, 4), |(i, k)| (i * 7 + k * 3) as f64 * 0.37 - 2.0);
        let part = crate::pnat::GroupPartition::from_ranges(vec![(0, 2), (2, 4)], 4).unwrap();
        let mask = crate::pnat::build_decoder_mask(&part, 4).unwrap();
        masked_softmax_rows(&mut s, Some(&mask));
        for i in 0..4 {
            assert!((s.row(i).sum() - 1.0).abs() < 1e-12);
            for k in 0..4 {
                if !mask.allowed(i, k) {
                    assert_eq!(s[(i, k)], 0.0);
                }
            }
        }
    }
}
