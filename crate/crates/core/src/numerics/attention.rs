use super::ops::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Softmax probabilities saved for the backward pass, `[h × pq × pk]`.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    probs: Vec<f64>,
    heads: usize,
    pq: usize,
    pk: usize,
    dh: usize,
    scale: f64,
}

impl AttentionCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, p, d] => Ok((*h, *p, *d)),
        other => Err(Error::dim("softmax_attention", other, &[0, 0, 0])),
    }
}

/// Scaled dot-product attention per head with scale `1/sqrt(dh)`.
///
/// `q` is `[h × pq × dh]`, `k` and `v` are `[h × pk × dh]`. A causal mask
/// requires `pq == pk` and lets position `i` attend to `0..=i` only.
pub fn softmax_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    causal: bool,
) -> Result<(Tensor, AttentionCache)> {
    let (h, pq, dh) = dims3(q)?;
    let (hk, pk, dk) = dims3(k)?;
    if hk != h || dk != dh {
        return Err(Error::dim("softmax_attention q/k", q.shape(), k.shape()));
    }
    if k.shape() != v.shape() {
        return Err(Error::dim("softmax_attention k/v", k.shape(), v.shape()));
    }
    if causal && pq != pk {
        return Err(Error::dim("softmax_attention causal", q.shape(), k.shape()));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; h * pq * pk];
    let mut out = vec![0.0; h * pq * dh];
    for head in 0..h {
        let qh = &q.data()[head * pq * dh..(head + 1) * pq * dh];
        let kh = &k.data()[head * pk * dh..(head + 1) * pk * dh];
        let vh = &v.data()[head * pk * dh..(head + 1) * pk * dh];
        let ph = &mut probs[head * pq * pk..(head + 1) * pq * pk];
        gemm(pq, dh, pk, qh, false, kh, true, ph, false);
        for i in 0..pq {
            let row = &mut ph[i * pk..(i + 1) * pk];
            let visible = if causal { i + 1 } else { pk };
            let mut max = f64::NEG_INFINITY;
            for s in row[..visible].iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row[..visible].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row[..visible].iter_mut() {
                *s /= sum;
            }
            row[visible..].fill(0.0);
        }
        let oh = &mut out[head * pq * dh..(head + 1) * pq * dh];
        gemm(pq, pk, dh, ph, false, vh, false, oh, false);
    }
    Ok((
        Tensor::from_parts(vec![h, pq, dh], out),
        AttentionCache {
            probs,
            heads: h,
            pq,
            pk,
            dh,
            scale,
        },
    ))
}

/// Returns `(dq, dk, dv)`.
pub fn softmax_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    cache: &AttentionCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let AttentionCache {
        heads: h,
        pq,
        pk,
        dh,
        scale,
        ..
    } = *cache;
    if dout.shape() != [h, pq, dh] {
        return Err(Error::dim(
            "softmax_attention_backward",
            dout.shape(),
            &[h, pq, dh],
        ));
    }
    let mut dq = vec![0.0; h * pq * dh];
    let mut dk = vec![0.0; h * pk * dh];
    let mut dv = vec![0.0; h * pk * dh];
    let mut dp = vec![0.0; pq * pk];
    for head in 0..h {
        let qs = head * pq * dh..(head + 1) * pq * dh;
        let ks = head * pk * dh..(head + 1) * pk * dh;
        let p = &cache.probs[head * pq * pk..(head + 1) * pq * pk];
        let d_o = &dout.data()[qs.clone()];
        // dV = Pᵀ·dO
        gemm(pk, pq, dh, p, true, d_o, false, &mut dv[ks.clone()], false);
        // dP = dO·Vᵀ
        gemm(
            pq,
            dh,
            pk,
            d_o,
            false,
            &v.data()[ks.clone()],
            true,
            &mut dp,
            false,
        );
        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
        for i in 0..pq {
            let pr = &p[i * pk..(i + 1) * pk];
            let dr = &mut dp[i * pk..(i + 1) * pk];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot) * scale;
            }
        }
        gemm(
            pq,
            pk,
            dh,
            &dp,
            false,
            &k.data()[ks.clone()],
            false,
            &mut dq[qs.clone()],
            false,
        );
        gemm(
            pk,
            pq,
            dh,
            &dp,
            true,
            &q.data()[qs],
            false,
            &mut dk[ks],
            false,
        );
    }
    Ok((
        Tensor::from_parts(vec![h, pq, dh], dq),
        Tensor::from_parts(vec![h, pk, dh], dk),
        Tensor::from_parts(vec![h, pk, dh], dv),
    ))
}
