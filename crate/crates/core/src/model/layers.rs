//! Linear (optionally LoRA-wrapped), multi-head attention and feed-forward
//! building blocks with their backward passes.

use super::grads::{lora_a, lora_b, Sink};
use super::weights::{bias_of, gain_of, weight_of, ModelWeights};
use crate::lora::LoraSet;
use crate::numerics::{
    gemm, gemm_strided, layer_norm, layer_norm_backward, tanh, tanh_backward, LayerNormCache, Strided,
    Tensor, Trans, LAYER_NORM_EPS,
};

const SHAPES_CHECKED: &str = "shapes are validated when the model view is built";

pub(crate) struct Params<'a> {
    pub weights: &'a ModelWeights,
    pub lora: Option<&'a LoraSet>,
}

pub(crate) struct LinearCache {
    x: Tensor,
    /// `x · B` for a wrapped layer.
    xb: Option<Tensor>,
}

impl LinearCache {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

impl<'a> Params<'a> {
    fn affine(&self, layer: &str, x: &Tensor) -> Tensor {
        let w = self.weights.t(&weight_of(layer));
        let b = self.weights.t(&bias_of(layer));
        let mut y = Tensor::zeros(x.rows(), w.rows());
        gemm(1.0, x, Trans::No, w, Trans::Yes, 0.0, &mut y).expect(SHAPES_CHECKED);
        y.add_row_broadcast(b.data());
        y
    }

    /// `y = x Wᵀ + b (+ (α/r)·(x B) Aᵀ)`.
    pub fn linear(&self, layer: &str, x: &Tensor) -> Tensor {
        let mut y = self.affine(layer, x);
        if let Some(ad) = self.lora.and_then(|l| l.get(layer)) {
            let mut xb = Tensor::zeros(x.rows(), ad.rank);
            gemm(1.0, x, Trans::No, &ad.b, Trans::No, 0.0, &mut xb).expect(SHAPES_CHECKED);
            gemm(ad.scale(), &xb, Trans::No, &ad.a, Trans::Yes, 1.0, &mut y).expect(SHAPES_CHECKED);
        }
        y
    }

    pub fn linear_rec(&self, layer: &str, x: Tensor) -> (Tensor, LinearCache) {
        let mut y = self.affine(layer, &x);
        let xb = self.lora.and_then(|l| l.get(layer)).map(|ad| {
            let mut xb = Tensor::zeros(x.rows(), ad.rank);
            gemm(1.0, &x, Trans::No, &ad.b, Trans::No, 0.0, &mut xb).expect(SHAPES_CHECKED);
            gemm(ad.scale(), &xb, Trans::No, &ad.a, Trans::Yes, 1.0, &mut y).expect(SHAPES_CHECKED);
            xb
        });
        (y, LinearCache { x, xb })
    }

    /// Accumulates parameter gradients for trainable names and returns `dx`
    /// when requested.
    pub fn linear_back(
        &self,
        layer: &str,
        cache: &LinearCache,
        dy: &Tensor,
        sink: &mut Sink,
        need_dx: bool,
    ) -> Option<Tensor> {
        let w = self.weights.t(&weight_of(layer));
        let (n, m) = w.shape();
        if let Some(dw) = sink.slot(&weight_of(layer), n, m) {
            gemm(1.0, dy, Trans::Yes, &cache.x, Trans::No, 1.0, dw).expect(SHAPES_CHECKED);
        }
        if let Some(db) = sink.slot(&bias_of(layer), 1, n) {
            db.add_assign(&dy.sum_rows());
        }
        let adaptor = self.lora.and_then(|l| l.get(layer));
        let mut dx = need_dx.then(|| {
            let mut dx = Tensor::zeros(dy.rows(), m);
            gemm(1.0, dy, Trans::No, w, Trans::No, 0.0, &mut dx).expect(SHAPES_CHECKED);
            dx
        });
        if let (Some(ad), Some(xb)) = (adaptor, cache.xb.as_ref()) {
            let s = ad.scale();
            if let Some(da) = sink.slot(&lora_a(layer), n, ad.rank) {
                gemm(s, dy, Trans::Yes, xb, Trans::No, 1.0, da).expect(SHAPES_CHECKED);
            }
            let want_b = sink.wants(&lora_b(layer));
            if want_b || dx.is_some() {
                let mut dya = Tensor::zeros(dy.rows(), ad.rank);
                gemm(1.0, dy, Trans::No, &ad.a, Trans::No, 0.0, &mut dya).expect(SHAPES_CHECKED);
                if let Some(db) = sink.slot(&lora_b(layer), m, ad.rank) {
                    gemm(s, &cache.x, Trans::Yes, &dya, Trans::No, 1.0, db).expect(SHAPES_CHECKED);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(s, &dya, Trans::No, &ad.b, Trans::Yes, 1.0, dx).expect(SHAPES_CHECKED);
                }
            }
        }
        dx
    }

    pub fn norm(&self, name: &str, x: &Tensor) -> (Tensor, LayerNormCache) {
        layer_norm(
            x,
            self.weights.t(&gain_of(name)),
            self.weights.t(&bias_of(name)),
            LAYER_NORM_EPS,
        )
        .expect(SHAPES_CHECKED)
    }

    pub fn norm_back(&self, name: &str, cache: &LayerNormCache, dy: &Tensor, sink: &mut Sink) -> Tensor {
        let gain = self.weights.t(&gain_of(name));
        let d = gain.cols();
        let gname = gain_of(name);
        let bname = bias_of(name);
        // Both slots may be requested; take them one at a time.
        let mut dg = sink.wants(&gname).then(|| Tensor::zeros(1, d));
        let mut db = sink.wants(&bname).then(|| Tensor::zeros(1, d));
        let dx = layer_norm_backward(cache, gain, dy, dg.as_mut(), db.as_mut());
        if let Some(g) = dg {
            sink.slot(&gname, 1, d).expect("wanted").add_assign(&g);
        }
        if let Some(b) = db {
            sink.slot(&bname, 1, d).expect("wanted").add_assign(&b);
        }
        dx
    }
}

/// Counts of attention score evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionStats {
    /// Self-attention scores summed over all layers and heads.
    pub self_scores: u64,
    /// Cross-attention scores summed over all layers and heads.
    pub cross_scores: u64,
    pub layers: usize,
    pub heads: usize,
}

impl AttentionStats {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            ..Self::default()
        }
    }

    /// Self-attention scores for one layer and one head.
    pub fn self_scores_per_head(&self) -> u64 {
        let units = (self.layers * self.heads) as u64;
        debug_assert_eq!(self.self_scores % units.max(1), 0);
        self.self_scores / units.max(1)
    }

    pub fn accumulate(&mut self, other: &AttentionStats) {
        self.self_scores += other.self_scores;
        self.cross_scores += other.cross_scores;
    }
}

/// Query rows processed per score block.
const QUERY_BLOCK: usize = 32;

fn softmax_prefix(row: &mut [f64], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in live.iter_mut() {
        *v /= sum;
    }
    masked.fill(0.0);
}

/// Scaled dot-product attention over `heads` column blocks. With `causal`,
/// query row `i` sees keys `0..=i + (keys − queries)`, which covers both the
/// square case and a single query appended to a key cache. `count` grows by
/// the number of scores entering a softmax.
pub(crate) fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    mut probs: Option<&mut Vec<Tensor>>,
    count: &mut u64,
) -> Tensor {
    let (tq, d) = q.shape();
    let tk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = tk.saturating_sub(tq);
    let mut ctx = Tensor::zeros(tq, d);
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.extend((0..heads).map(|_| Tensor::zeros(tq, tk)));
    }
    let mut buf = vec![0.0; QUERY_BLOCK.min(tq) * tk];
    for h in 0..heads {
        let off = h * dh;
        let (qh, kh, vh) = (
            Strided::columns(q, off, dh),
            Strided::columns(k, off, dh),
            Strided::columns(v, off, dh),
        );
        for i0 in (0..tq).step_by(QUERY_BLOCK) {
            let i1 = (i0 + QUERY_BLOCK).min(tq);
            let rows = i1 - i0;
            let width = if causal { (i1 + offset).min(tk) } else { tk };
            let scores = &mut buf[..rows * width];
            gemm_strided(scale, qh.row_range(i0, i1), kh.top(width).t(), 0.0, scores, (0, rows, width, width, 1));
            for (r, row) in scores.chunks_exact_mut(width).enumerate() {
                let visible = if causal { (i0 + r + 1 + offset).min(tk) } else { tk };
                *count += visible as u64;
                softmax_prefix(row, visible);
            }
            let weights = Strided {
                data: scores,
                offset: 0,
                rows,
                cols: width,
                rs: width,
                cs: 1,
            };
            gemm_strided(1.0, weights, vh.top(width), 0.0, ctx.data_mut(), (i0 * d + off, rows, dh, d, 1));
            if let Some(p) = probs.as_deref_mut() {
                for (r, row) in scores.chunks_exact(width).enumerate() {
                    p[h].row_mut(i0 + r)[..width].copy_from_slice(row);
                }
            }
        }
    }
    ctx
}

/// Gradients of [`attend`] w.r.t. `q`, `k` and `v`. Masked probabilities
/// are exact zeros, so full-width products need no explicit mask.
fn attend_back(q: &Tensor, k: &Tensor, v: &Tensor, probs: &[Tensor], dctx: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (tq, d) = q.shape();
    let tk = k.rows();
    let heads = probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(tq, d);
    let mut dk = Tensor::zeros(tk, d);
    let mut dv = Tensor::zeros(tk, d);
    let mut ds = vec![0.0; tq * tk];
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        let g = Strided::columns(dctx, off, dh);
        let pv = Strided::columns(p, 0, tk);
        gemm_strided(1.0, pv.t(), g, 0.0, dv.data_mut(), (off, tk, dh, d, 1));
        gemm_strided(1.0, g, Strided::columns(v, off, dh).t(), 0.0, &mut ds, (0, tq, tk, tk, 1));
        for (i, row) in ds.chunks_exact_mut(tk).enumerate() {
            let pi = p.row(i);
            let dot: f64 = pi.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (x, &pw) in row.iter_mut().zip(pi) {
                *x = pw * (*x - dot) * scale;
            }
        }
        let dsv = Strided {
            data: &ds,
            offset: 0,
            rows: tq,
            cols: tk,
            rs: tk,
            cs: 1,
        };
        gemm_strided(1.0, dsv, Strided::columns(k, off, dh), 0.0, dq.data_mut(), (off, tq, dh, d, 1));
        gemm_strided(1.0, dsv.t(), Strided::columns(q, off, dh), 0.0, dk.data_mut(), (off, tk, dh, d, 1));
    }
    (dq, dk, dv)
}

/// Layer names of one attention block, in q/k/v/o order.
pub(crate) struct AttnNames(pub [String; 4]);

pub(crate) struct AttnCache {
    lin: [LinearCache; 4],
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
}

/// Full attention block: projections, scaled dot-product, output projection.
pub(crate) fn attention(
    p: &Params,
    names: &AttnNames,
    xq: &Tensor,
    xkv: &Tensor,
    heads: usize,
    causal: bool,
    count: &mut u64,
) -> Tensor {
    let [nq, nk, nv, no] = &names.0;
    let q = p.linear(nq, xq);
    let k = p.linear(nk, xkv);
    let v = p.linear(nv, xkv);
    let ctx = attend(&q, &k, &v, heads, causal, None, count);
    p.linear(no, &ctx)
}

pub(crate) fn attention_rec(
    p: &Params,
    names: &AttnNames,
    xq: &Tensor,
    xkv: &Tensor,
    heads: usize,
    causal: bool,
    count: &mut u64,
) -> (Tensor, AttnCache) {
    let [nq, nk, nv, no] = &names.0;
    let (q, cq) = p.linear_rec(nq, xq.clone());
    let (k, ck) = p.linear_rec(nk, xkv.clone());
    let (v, cv) = p.linear_rec(nv, xkv.clone());
    let mut probs = Vec::new();
    let ctx = attend(&q, &k, &v, heads, causal, Some(&mut probs), count);
    let (out, co) = p.linear_rec(no, ctx);
    (
        out,
        AttnCache {
            lin: [cq, ck, cv, co],
            q,
            k,
            v,
            probs,
        },
    )
}

/// Returns `(dxq, dxkv)`; `dxkv` only when `need_kv`.
pub(crate) fn attention_back(
    p: &Params,
    names: &AttnNames,
    cache: &AttnCache,
    dout: &Tensor,
    sink: &mut Sink,
    need_kv: bool,
) -> (Tensor, Option<Tensor>) {
    let [nq, nk, nv, no] = &names.0;
    let [cq, ck, cv, co] = &cache.lin;
    let dctx = p.linear_back(no, co, dout, sink, true).expect("dx requested");
    let (dq, dk, dv) = attend_back(&cache.q, &cache.k, &cache.v, &cache.probs, &dctx);
    let dxq = p.linear_back(nq, cq, &dq, sink, true).expect("dx requested");
    let dk_in = p.linear_back(nk, ck, &dk, sink, need_kv);
    let dv_in = p.linear_back(nv, cv, &dv, sink, need_kv);
    let dxkv = match (dk_in, dv_in) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        _ => None,
    };
    (dxq, dxkv)
}

pub(crate) struct FfCache {
    c1: LinearCache,
    act: Tensor,
    c2: LinearCache,
}

pub(crate) fn feed_forward(p: &Params, l1: &str, l2: &str, x: &Tensor) -> Tensor {
    let a = tanh(&p.linear(l1, x));
    p.linear(l2, &a)
}

pub(crate) fn feed_forward_rec(p: &Params, l1: &str, l2: &str, x: Tensor) -> (Tensor, FfCache) {
    let (h, c1) = p.linear_rec(l1, x);
    let act = tanh(&h);
    let (y, c2) = p.linear_rec(l2, act.clone());
    (y, FfCache { c1, act, c2 })
}

pub(crate) fn feed_forward_back(
    p: &Params,
    l1: &str,
    l2: &str,
    cache: &FfCache,
    dy: &Tensor,
    sink: &mut Sink,
    need_dx: bool,
) -> Option<Tensor> {
    let da = p.linear_back(l2, &cache.c2, dy, sink, true).expect("dx requested");
    let dh = tanh_backward(&cache.act, &da);
    p.linear_back(l1, &cache.c1, &dh, sink, need_dx)
}
