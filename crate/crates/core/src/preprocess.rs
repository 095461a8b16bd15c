//! Per-window instance normalization and overlapping patch extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean and population variance of one input window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub sigma2: f64,
    pub eps: f64,
}

impl NormStats {
    /// Multiplier that maps normalized values back to the input scale.
    pub fn scale(&self) -> f64 {
        (self.sigma2 + self.eps).sqrt()
    }
}

/// Standardizes `x` by its own mean and variance.
///
/// The variance is the mean of squared deviations (divide by `L`). A
/// constant window maps to exact zeros with `mu` equal to that constant.
pub fn instance_normalize(x: &[f64], eps: f64) -> Result<(Vec<f64>, NormStats)> {
    if x.is_empty() {
        return Err(Error::Data("cannot normalize an empty window".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "normalization eps must be > 0, got {eps}"
        )));
    }
    let n = x.len() as f64;
    if x.iter().all(|&v| v == x[0]) {
        return Ok((
            vec![0.0; x.len()],
            NormStats {
                mu: x[0],
                sigma2: 0.0,
                eps,
            },
        ));
    }
    let mu = x.iter().sum::<f64>() / n;
    let sigma2 = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let stats = NormStats { mu, sigma2, eps };
    let s = stats.scale();
    Ok((x.iter().map(|v| (v - mu) / s).collect(), stats))
}

pub fn instance_denormalize(y: &[f64], stats: &NormStats) -> Vec<f64> {
    let s = stats.scale();
    y.iter().map(|v| v * s + stats.mu).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    /// Number of copies of the last value appended before unfolding.
    pub pad: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_len: 16,
            stride: 8,
            pad: 8,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch_len {
            return Err(Error::Config(format!(
                "patching needs 1 <= stride <= patch_len, got stride {} and patch_len {}",
                self.stride, self.patch_len
            )));
        }
        Ok(())
    }

    /// Number of patches produced for an input of length `input_len`.
    pub fn num_patches(&self, input_len: usize) -> Result<usize> {
        self.validate()?;
        let padded = input_len + self.pad;
        if input_len == 0 || padded < self.patch_len {
            return Err(Error::Config(format!(
                "input length {input_len} plus padding {} is shorter than patch length {}",
                self.pad, self.patch_len
            )));
        }
        Ok((padded - self.patch_len) / self.stride + 1)
    }
}

/// Replication-pads `x` at the tail and unfolds it into `[N_p × P]`.
pub fn patch(x: &[f64], cfg: &PatchConfig) -> Result<Tensor> {
    let np = cfg.num_patches(x.len())?;
    let p = cfg.patch_len;
    let last = *x.last().expect("num_patches rejects empty input");
    let at = |i: usize| if i < x.len() { x[i] } else { last };
    let mut out = Vec::with_capacity(np * p);
    for j in 0..np {
        let start = j * cfg.stride;
        out.extend((start..start + p).map(at));
    }
    Ok(Tensor::from_parts(vec![np, p], out))
}

/// Normalized, patched windows ready for the backbone.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    /// `[B × N_p × P]`
    pub patches: Tensor,
    pub stats: Vec<NormStats>,
}

impl PatchBatch {
    pub fn batch_size(&self) -> usize {
        self.stats.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[1]
    }
}

pub fn prepare_batch<'a, I>(windows: I, eps: f64, cfg: &PatchConfig) -> Result<PatchBatch>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut data = Vec::new();
    let mut stats = Vec::new();
    let mut np = None;
    for w in windows {
        let (xn, st) = instance_normalize(w, eps)?;
        let t = patch(&xn, cfg)?;
        let this = t.shape()[0];
        if *np.get_or_insert(this) != this {
            return Err(Error::Data(
                "windows in one batch must share a length".into(),
            ));
        }
        data.extend_from_slice(t.data());
        stats.push(st);
    }
    let Some(np) = np else {
        return Err(Error::Data("empty batch".into()));
    };
    Ok(PatchBatch {
        patches: Tensor::from_parts(vec![stats.len(), np, cfg.patch_len], data),
        stats,
    })
}
