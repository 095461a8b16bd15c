//! Differentiable tensor primitives.
//!
//! Every forward op that needs intermediate values for its gradient returns a
//! small cache; the matching `*_backward` consumes the upstream gradient and
//! that cache. Nothing here knows about parameters or trainability.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` over raw row-major buffers.
///
/// `a_t`/`b_t` read the stored buffer as its transpose, so callers can form
/// `A·Bᵀ` and `Aᵀ·B` without materializing transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above) and the strides describe dense row-major or transposed layouts
    // that stay within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = require_rank2("matmul_backward", a)?;
    let (_, n) = require_rank2("matmul_backward", b)?;
    if dc.shape() != [m, n] {
        return Err(Error::dim("matmul_backward", dc.shape(), &[m, n]));
    }
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, dc.data(), false, b.data(), true, &mut da, false);
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, dc.data(), false, &mut db, false);
    Ok((
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    ))
}

/// Affine map over the last axis: `x[..., k] · w[k×n] + b[n]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (k, n) = require_rank2("linear", w)?;
    if x.last_dim() != k {
        return Err(Error::dim("linear", x.shape(), w.shape()));
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * n];
    if let Some(b) = b {
        if b.len() != n {
            return Err(Error::dim("linear bias", b.shape(), &[n]));
        }
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        rows,
        k,
        n,
        x.data(),
        false,
        w.data(),
        false,
        &mut out,
        b.is_some(),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// Gradients of [`linear`]. Weight and bias gradients are only formed when
/// requested, which lets frozen layers skip that work.
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_dw: bool,
    want_db: bool,
) -> Result<LinearGrads> {
    let (k, n) = require_rank2("linear_backward", w)?;
    let rows = x.rows();
    if dy.last_dim() != n || dy.rows() != rows || x.last_dim() != k {
        return Err(Error::dim("linear_backward", dy.shape(), x.shape()));
    }
    let mut dx = vec![0.0; rows * k];
    gemm(rows, n, k, dy.data(), false, w.data(), true, &mut dx, false);
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; k * n];
        gemm(k, rows, n, x.data(), true, dy.data(), false, &mut dw, false);
        dw
    });
    let db = want_db.then(|| {
        let mut db = vec![0.0; n];
        for row in dy.data().chunks_exact(n) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        db
    });
    Ok(LinearGrads {
        dx: Tensor::from_parts(x.shape().to_vec(), dx),
        dw,
        db,
    })
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

/// Row-wise normalization over the last axis followed by `gamma`/`beta`.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &Tensor,
    gamma: &Tensor,
    cache: &LayerNormCache,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if dy.shape() != cache.shape.as_slice() {
        return Err(Error::dim("layer_norm_backward", dy.shape(), &cache.shape));
    }
    let d = dy.last_dim();
    let rows = dy.rows();
    let g = gamma.data();
    let mut dx = vec![0.0; rows * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            sum += dxhat[j];
            sum_xh += dxhat[j] * xh[j];
        }
        let scale = cache.inv_std[r] / d as f64;
        for j in 0..d {
            dx[r * d + j] = scale * (d as f64 * dxhat[j] - sum - xh[j] * sum_xh);
        }
    }
    Ok((Tensor::from_parts(cache.shape.clone(), dx), dgamma, dbeta))
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Gradient of ReLU given its *input*; the subgradient at 0 is taken as 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU, as used by GPT-2.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect(),
    )
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| {
                let u = GELU_C * (v + 0.044715 * v * v * v);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
            })
            .collect(),
    )
}

/// Joins two tensors along the last axis. Leading axes must agree.
pub fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::dim("concat_last", sa, sb));
    }
    let (da, db) = (a.last_dim(), b.last_dim());
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = da + db;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits the gradient of a [`concat_last`] output back into its two inputs.
pub fn concat_last_backward(dy: &Tensor, left_width: usize) -> Result<(Tensor, Tensor)> {
    let d = dy.last_dim();
    if left_width == 0 || left_width >= d {
        return Err(Error::dim(
            "concat_last_backward",
            dy.shape(),
            &[left_width],
        ));
    }
    let right = d - left_width;
    let rows = dy.rows();
    let mut da = Vec::with_capacity(rows * left_width);
    let mut db = Vec::with_capacity(rows * right);
    for r in 0..rows {
        let row = dy.row(r);
        da.extend_from_slice(&row[..left_width]);
        db.extend_from_slice(&row[left_width..]);
    }
    let mut sa = dy.shape().to_vec();
    *sa.last_mut().unwrap() = left_width;
    let mut sb = dy.shape().to_vec();
    *sb.last_mut().unwrap() = right;
    Ok((Tensor::from_parts(sa, da), Tensor::from_parts(sb, db)))
}

/// Elementwise sum. The gradient passes through unchanged to both inputs.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add", a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    ))
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim("add_assign", a.shape(), b.shape()));
    }
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += y);
    Ok(())
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|v| v * s).collect())
}

/// Per-element multipliers recorded by [`dropout`]; `None` means identity.
#[derive(Debug, Clone, Default)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn is_identity(&self) -> bool {
        self.0.is_none()
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` at train time so
/// evaluation is the identity.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        DropoutMask(Some(mask)),
    ))
}

pub fn dropout_backward(dy: &Tensor, mask: &DropoutMask) -> Tensor {
    match &mask.0 {
        None => dy.clone(),
        Some(m) => Tensor::from_parts(
            dy.shape().to_vec(),
            dy.data().iter().zip(m).map(|(g, k)| g * k).collect(),
        ),
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("mse_loss produced {loss}")));
    }
    Ok((loss, Tensor::from_parts(pred.shape().to_vec(), grad)))
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64
}
