//! Encoder forward pass with cached activations, and its backward pass.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerIdx, ModelParameters};
use super::tensor::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, masked_softmax, View};

/// Inverted dropout driven by its own seeded stream.
pub(crate) struct Dropout {
    rng: ChaCha8Rng,
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Dropout {
        Dropout { rng: ChaCha8Rng::seed_from_u64(seed), rate }
    }

    fn mask(&mut self, len: usize) -> Option<Vec<f64>> {
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some((0..len).map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep }).collect())
    }
}

fn apply(mask: &Option<Vec<f64>>, x: &mut [f64]) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

/// Two disjoint mutable ranges of one buffer; `a` must end before `b` starts.
fn pair(g: &mut [f64], a: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

pub(crate) struct LayerCache {
    a: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `heads × n × n`.
    p: Vec<f64>,
    o: Vec<f64>,
    drop1: Option<Vec<f64>>,
    b: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
    drop2: Option<Vec<f64>>,
}

/// One sequence's activations, kept for the backward pass.
pub(crate) struct Pass {
    pub n: usize,
    ids: Vec<Vec<usize>>,
    drop0: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
    /// `n × 2` class logits.
    pub logits: Vec<f64>,
}

/// `x[t] = pos[t] + concat_f emb_f[ids[f][t]]` for the first `n` positions.
pub(crate) fn embed_ids(params: &ModelParameters, ids: &[Vec<usize>], n: usize) -> Vec<f64> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let w = &params.data;
    let lay = &params.layout;
    let mut x = w[lay.pos..lay.pos + n * d].to_vec();
    for t in 0..n {
        let mut col = 0;
        for (f, &width) in cfg.field_dims.iter().enumerate() {
            let row = lay.emb[f].0 + ids[f][t] * width;
            for j in 0..width {
                x[t * d + col + j] += w[row + j];
            }
            col += width;
        }
    }
    x
}

fn layer_forward(
    params: &ModelParameters,
    li: &LayerIdx,
    x: &mut [f64],
    n: usize,
    keep: &[bool],
    mut drop: Option<&mut Dropout>,
) -> LayerCache {
    let cfg = &params.config;
    let (d, f, nh) = (cfg.d_model, cfg.ffn_dim, cfg.n_heads);
    let dh = d / nh;
    let w = &params.data;
    let s = |o: usize, len: usize| &w[o..o + len];

    let mut a = vec![0.0; n * d];
    let mut xhat1 = vec![0.0; n * d];
    let mut rstd1 = vec![0.0; n];
    layer_norm(x, d, s(li.ln1_g, d), s(li.ln1_b, d), &mut a, &mut xhat1, &mut rstd1);
    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    linear(&a, n, d, s(li.wq, d * d), s(li.bq, d), d, &mut q);
    linear(&a, n, d, s(li.wk, d * d), s(li.bk, d), d, &mut k);
    linear(&a, n, d, s(li.wv, d * d), s(li.bv, d), d, &mut v);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; nh * n * n];
    let mut o = vec![0.0; n * d];
    for h in 0..nh {
        let head = View { off: h * dh, rs: d, cs: 1 };
        let ph = &mut p[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, scale, &q, head, &k, View { off: h * dh, rs: 1, cs: d }, 0.0, ph, View::rows(0, n));
        for row in ph.chunks_exact_mut(n) {
            masked_softmax(row, keep);
        }
        gemm(n, n, dh, 1.0, ph, View::rows(0, n), &v, head, 0.0, &mut o, head);
    }
    let mut y = vec![0.0; n * d];
    linear(&o, n, d, s(li.wo, d * d), s(li.bo, d), d, &mut y);
    let drop1 = drop.as_deref_mut().and_then(|dr| dr.mask(n * d));
    apply(&drop1, &mut y);
    x.iter_mut().zip(&y).for_each(|(xi, yi)| *xi += yi);

    let mut b = vec![0.0; n * d];
    let mut xhat2 = vec![0.0; n * d];
    let mut rstd2 = vec![0.0; n];
    layer_norm(x, d, s(li.ln2_g, d), s(li.ln2_b, d), &mut b, &mut xhat2, &mut rstd2);
    let mut hpre = vec![0.0; n * f];
    linear(&b, n, d, s(li.w1, d * f), s(li.b1, f), f, &mut hpre);
    let hact: Vec<f64> = hpre.iter().map(|&u| gelu(u)).collect();
    let mut z = y;
    linear(&hact, n, f, s(li.w2, f * d), s(li.b2, d), d, &mut z);
    let drop2 = drop.and_then(|dr| dr.mask(n * d));
    apply(&drop2, &mut z);
    x.iter_mut().zip(&z).for_each(|(xi, zi)| *xi += zi);

    LayerCache { a, xhat1, rstd1, q, k, v, p, o, drop1, b, xhat2, rstd2, hpre, hact, drop2 }
}

/// Runs the encoder layers in place on `x`.
pub(crate) fn encode(
    params: &ModelParameters,
    x: &mut [f64],
    n: usize,
    keep: &[bool],
    mut drop: Option<&mut Dropout>,
) -> Vec<LayerCache> {
    params.layout.layers.iter().map(|li| layer_forward(params, li, x, n, keep, drop.as_deref_mut())).collect()
}

/// Final normalization and the two-way linear head.
fn head(params: &ModelParameters, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = params.config.d_model;
    let w = &params.data;
    let lay = &params.layout;
    let mut hf = vec![0.0; n * d];
    let mut xhatf = vec![0.0; n * d];
    let mut rstdf = vec![0.0; n];
    layer_norm(x, d, &w[lay.lnf_g..lay.lnf_g + d], &w[lay.lnf_b..lay.lnf_b + d], &mut hf, &mut xhatf, &mut rstdf);
    let mut logits = vec![0.0; n * 2];
    linear(&hf, n, d, &w[lay.head_w..lay.head_w + 2 * d], &w[lay.head_b..lay.head_b + 2], 2, &mut logits);
    (hf, xhatf, rstdf, logits)
}

/// Forward pass over the first `n = ids[f].len()` positions. `keep[t]` is
/// false for masked keys.
pub(crate) fn forward(
    params: &ModelParameters,
    ids: Vec<Vec<usize>>,
    keep: &[bool],
    mut drop: Option<&mut Dropout>,
) -> Pass {
    let n = keep.len();
    let mut x = embed_ids(params, &ids, n);
    let drop0 = drop.as_deref_mut().and_then(|dr| dr.mask(x.len()));
    apply(&drop0, &mut x);
    let layers = encode(params, &mut x, n, keep, drop);
    let (hf, xhatf, rstdf, logits) = head(params, &x, n);
    Pass { n, ids, drop0, layers, xhatf, rstdf, hf, logits }
}

pub(crate) fn head_logits(params: &ModelParameters, h: &[f64], n: usize) -> Vec<f64> {
    head(params, h, n).3
}

fn layer_backward(params: &ModelParameters, li: &LayerIdx, c: &LayerCache, n: usize, dx: &mut [f64], g: &mut [f64]) {
    let cfg = &params.config;
    let (d, f, nh) = (cfg.d_model, cfg.ffn_dim, cfg.n_heads);
    let dh = d / nh;
    let w = &params.data;
    let s = |o: usize, len: usize| &w[o..o + len];

    // Feed-forward branch.
    let mut dz = dx.to_vec();
    apply(&c.drop2, &mut dz);
    let mut dhid = vec![0.0; n * f];
    {
        let (dw, db) = pair(g, li.w2..li.w2 + f * d, li.b2..li.b2 + d);
        linear_backward(&c.hact, n, f, s(li.w2, f * d), d, &dz, dw, db, &mut dhid);
    }
    dhid.iter_mut().zip(&c.hpre).for_each(|(gv, &u)| *gv *= gelu_grad(u));
    let mut dbn = vec![0.0; n * d];
    {
        let (dw, db) = pair(g, li.w1..li.w1 + d * f, li.b1..li.b1 + f);
        linear_backward(&c.b, n, d, s(li.w1, d * f), f, &dhid, dw, db, &mut dbn);
    }
    {
        let (dg, db) = pair(g, li.ln2_g..li.ln2_g + d, li.ln2_b..li.ln2_b + d);
        layer_norm_backward(&dbn, d, s(li.ln2_g, d), &c.xhat2, &c.rstd2, dg, db, dx);
    }

    // Attention branch.
    let mut dy = dx.to_vec();
    apply(&c.drop1, &mut dy);
    let mut dout = vec![0.0; n * d];
    {
        let (dw, db) = pair(g, li.wo..li.wo + d * d, li.bo..li.bo + d);
        linear_backward(&c.o, n, d, s(li.wo, d * d), d, &dy, dw, db, &mut dout);
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n * n];
    for h in 0..nh {
        let head = View { off: h * dh, rs: d, cs: 1 };
        let ph = &c.p[h * n * n..(h + 1) * n * n];
        gemm(n, dh, n, 1.0, &dout, head, &c.v, View { off: h * dh, rs: 1, cs: d }, 0.0, &mut dp, View::rows(0, n));
        gemm(n, n, dh, 1.0, ph, View::t(0, n), &dout, head, 0.0, &mut dv, head);
        for (prow, drow) in ph.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            drow.iter_mut().zip(prow).for_each(|(gv, &pv)| *gv = pv * (*gv - dot));
        }
        gemm(n, n, dh, scale, &dp, View::rows(0, n), &c.k, head, 0.0, &mut dq, head);
        gemm(n, n, dh, scale, &dp, View::t(0, n), &c.q, head, 0.0, &mut dk, head);
    }
    let mut da = vec![0.0; n * d];
    for (wo, bo, dm) in [(li.wq, li.bq, &dq), (li.wk, li.bk, &dk), (li.wv, li.bv, &dv)] {
        let (dw, db) = pair(g, wo..wo + d * d, bo..bo + d);
        linear_backward(&c.a, n, d, s(wo, d * d), d, dm, dw, db, &mut da);
    }
    let (dg, db) = pair(g, li.ln1_g..li.ln1_g + d, li.ln1_b..li.ln1_b + d);
    layer_norm_backward(&da, d, s(li.ln1_g, d), &c.xhat1, &c.rstd1, dg, db, dx);
}

/// Accumulates parameter gradients of a loss whose logit gradient is `dlogits`.
pub(crate) fn backward(params: &ModelParameters, pass: &Pass, dlogits: &[f64], g: &mut [f64]) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = pass.n;
    let w = &params.data;
    let lay = &params.layout;

    let mut dhf = vec![0.0; n * d];
    {
        let (dw, db) = pair(g, lay.head_w..lay.head_w + 2 * d, lay.head_b..lay.head_b + 2);
        linear_backward(&pass.hf, n, d, &w[lay.head_w..lay.head_w + 2 * d], 2, dlogits, dw, db, &mut dhf);
    }
    let mut dx = vec![0.0; n * d];
    {
        let (dg, db) = pair(g, lay.lnf_g..lay.lnf_g + d, lay.lnf_b..lay.lnf_b + d);
        layer_norm_backward(&dhf, d, &w[lay.lnf_g..lay.lnf_g + d], &pass.xhatf, &pass.rstdf, dg, db, &mut dx);
    }
    for (li, c) in lay.layers.iter().zip(&pass.layers).rev() {
        layer_backward(params, li, c, n, &mut dx, g);
    }
    apply(&pass.drop0, &mut dx);
    for (gv, v) in g[lay.pos..lay.pos + n * d].iter_mut().zip(&dx) {
        *gv += v;
    }
    for t in 0..n {
        let mut col = 0;
        for (f, &width) in cfg.field_dims.iter().enumerate() {
            let row = lay.emb[f].0 + pass.ids[f][t] * width;
            for j in 0..width {
                g[row + j] += dx[t * d + col + j];
            }
            col += width;
        }
    }
}
