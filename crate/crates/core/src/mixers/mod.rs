//! Local/global feature alignment and the fused forecasting head.
//!
//! A branch takes the bare patch embedding `x_tilde` and one backbone
//! feature and aligns them. The default alignment is a residual MLP over
//! their concatenation:
//!
//! ```text
//! out = x_tilde + Dropout(W2 · ReLU(W1 · [x_tilde ‖ feature] + b1) + b2)
//! ```
//!
//! The local and global branch outputs are summed, flattened patch-major and
//! projected to the horizon by the head, then mapped back to the input scale.
//!
//! Features are read from the taps with one twist: the deepest tap passes
//! through the backbone's final layer norm before use, the way a GPT-2 style
//! stack exposes its last hidden state. Shallower taps are used raw.

mod similarity;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{LayerTaps, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::ops::{self, DropoutMask, LayerNormCache};
use crate::numerics::rng::Rng;
use crate::numerics::{
    softmax_attention, softmax_attention_backward, AttentionCache, ParamSet, Tensor,
};
use crate::preprocess::{instance_denormalize, NormStats};

pub use similarity::{similarity_matrices, write_similarity_csv, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionVariant {
    Mixer,
    Add,
    Cross,
    None,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [Self::Mixer, Self::Add, Self::Cross, Self::None];

    pub fn label(self) -> &'static str {
        match self {
            Self::Mixer => "MIXER",
            Self::Add => "ADD",
            Self::Cross => "CROSS",
            Self::None => "NONE",
        }
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown fusion variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerSelection {
    /// Local from tap `local_tap`, global from the deepest tap.
    Boundary,
    /// Local is the mean of taps `1..=ceil(N/2)`, global the mean of the rest.
    HalfAverage,
    LocalOnly,
    GlobalOnly,
}

impl LayerSelection {
    pub const ALL: [LayerSelection; 4] = [
        Self::Boundary,
        Self::HalfAverage,
        Self::LocalOnly,
        Self::GlobalOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Boundary => "BOUNDARY",
            Self::HalfAverage => "HALF_AVERAGE",
            Self::LocalOnly => "LOCAL_ONLY",
            Self::GlobalOnly => "GLOBAL_ONLY",
        }
    }
}

impl std::str::FromStr for LayerSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown layer selection `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub selection: LayerSelection,
    pub local_tap: usize,
    /// Mixer hidden width; 0 means "same as d_model".
    pub mixer_hidden: usize,
    pub dropout: f64,
    pub bias: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Mixer,
            selection: LayerSelection::Boundary,
            local_tap: 1,
            mixer_hidden: 0,
            dropout: 0.1,
            bias: true,
        }
    }
}

impl FusionConfig {
    pub fn hidden_width(&self, d_model: usize) -> usize {
        if self.mixer_hidden == 0 {
            d_model
        } else {
            self.mixer_hidden
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "mixer dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        let uses_local_tap = matches!(
            self.selection,
            LayerSelection::Boundary | LayerSelection::LocalOnly
        );
        if uses_local_tap && self.local_tap > n_layers {
            return Err(Error::Config(format!(
                "local tap {} out of range 0..={n_layers}",
                self.local_tap
            )));
        }
        if self.selection == LayerSelection::HalfAverage && n_layers < 2 {
            return Err(Error::Config("HALF_AVERAGE needs at least 2 blocks".into()));
        }
        Ok(())
    }

    pub fn branches(&self) -> (bool, bool) {
        match self.selection {
            LayerSelection::Boundary | LayerSelection::HalfAverage => (true, true),
            LayerSelection::LocalOnly => (true, false),
            LayerSelection::GlobalOnly => (false, true),
        }
    }
}

/// Inclusive tap ranges averaged for the local and global features.
pub fn feature_taps(cfg: &FusionConfig, n_layers: usize) -> (Vec<usize>, Vec<usize>) {
    match cfg.selection {
        LayerSelection::Boundary => (vec![cfg.local_tap], vec![n_layers]),
        LayerSelection::LocalOnly => (vec![cfg.local_tap], vec![]),
        LayerSelection::GlobalOnly => (vec![], vec![n_layers]),
        LayerSelection::HalfAverage => {
            let half = n_layers.div_ceil(2);
            ((1..=half).collect(), (half + 1..=n_layers).collect())
        }
    }
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Mixer, cross-attention and head parameters for one configuration.
pub fn init_params(
    cfg: &FusionConfig,
    d_model: usize,
    num_patches: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let hidden = cfg.hidden_width(d_model);
    let (local, global) = cfg.branches();
    for (branch, used) in [("local", local), ("global", global)] {
        if !used {
            continue;
        }
        match cfg.variant {
            FusionVariant::Mixer => {
                let pre = format!("mixer.{branch}");
                p.insert(
                    format!("{pre}.fc1.weight"),
                    normal(&[2 * d_model, hidden], rng),
                    true,
                )?;
                if cfg.bias {
                    p.insert(format!("{pre}.fc1.bias"), Tensor::zeros(&[hidden]), true)?;
                }
                p.insert(
                    format!("{pre}.fc2.weight"),
                    normal(&[hidden, d_model], rng),
                    true,
                )?;
                if cfg.bias {
                    p.insert(format!("{pre}.fc2.bias"), Tensor::zeros(&[d_model]), true)?;
                }
            }
            FusionVariant::Cross => {
                let pre = format!("cross.{branch}");
                for m in ["wq", "wk", "wv"] {
                    p.insert(format!("{pre}.{m}"), normal(&[d_model, d_model], rng), true)?;
                }
            }
            FusionVariant::Add | FusionVariant::None => {}
        }
    }
    p.insert(
        "head.weight",
        normal(&[num_patches * d_model, horizon], rng),
        true,
    )?;
    if cfg.bias {
        p.insert("head.bias", Tensor::zeros(&[horizon]), true)?;
    }
    Ok(p)
}

pub struct MixCache {
    concat: Tensor,
    pre: Tensor,
    act: Tensor,
    drop: DropoutMask,
    d_model: usize,
}

fn opt_param<'a>(params: &'a ParamSet, name: &str) -> Option<&'a Tensor> {
    params.get(name).ok()
}

/// Residual MLP alignment of `x_tilde` with `tap` using the `prefix` weights.
pub fn mix(
    params: &ParamSet,
    prefix: &str,
    x_tilde: &Tensor,
    tap: &Tensor,
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, MixCache)> {
    if x_tilde.shape() != tap.shape() {
        return Err(Error::dim("mix", x_tilde.shape(), tap.shape()));
    }
    let concat = ops::concat_last(x_tilde, tap)?;
    let pre = ops::linear(
        &concat,
        params.get(&format!("{prefix}.fc1.weight"))?,
        opt_param(params, &format!("{prefix}.fc1.bias")),
    )?;
    let act = ops::relu(&pre);
    let out = ops::linear(
        &act,
        params.get(&format!("{prefix}.fc2.weight"))?,
        opt_param(params, &format!("{prefix}.fc2.bias")),
    )?;
    let (out, drop) = ops::dropout(&out, dropout, training, rng)?;
    let y = ops::add(x_tilde, &out)?;
    Ok((
        y,
        MixCache {
            concat,
            pre,
            act,
            drop,
            d_model: x_tilde.last_dim(),
        },
    ))
}

/// Returns `(d x_tilde, d tap)` and accumulates mixer weight gradients.
pub fn mix_backward(
    params: &mut ParamSet,
    prefix: &str,
    cache: &MixCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let dout = ops::dropout_backward(dy, &cache.drop);
    let w2 = format!("{prefix}.fc2.weight");
    let b2 = format!("{prefix}.fc2.bias");
    let g = ops::linear_backward(
        &cache.act,
        params.get(&w2)?,
        &dout,
        params.is_trainable(&w2),
        params.is_trainable(&b2),
    )?;
    accumulate(params, &w2, g.dw)?;
    accumulate(params, &b2, g.db)?;
    let dpre = ops::relu_backward(&cache.pre, &g.dx);
    let w1 = format!("{prefix}.fc1.weight");
    let b1 = format!("{prefix}.fc1.bias");
    let g = ops::linear_backward(
        &cache.concat,
        params.get(&w1)?,
        &dpre,
        params.is_trainable(&w1),
        params.is_trainable(&b1),
    )?;
    accumulate(params, &w1, g.dw)?;
    accumulate(params, &b1, g.db)?;
    let (mut dx, dtap) = ops::concat_last_backward(&g.dx, cache.d_model)?;
    ops::add_assign(&mut dx, dy)?;
    Ok((dx, dtap))
}

fn accumulate(params: &mut ParamSet, name: &str, grad: Option<Vec<f64>>) -> Result<()> {
    match grad {
        Some(g) if params.contains(name) => params.accumulate_grad(name, &g),
        _ => Ok(()),
    }
}

pub struct CrossCache {
    xq: Tensor,
    feat: Tensor,
    per_sample: Vec<(Tensor, Tensor, Tensor, AttentionCache)>,
}

/// `x_tilde + softmax(x_tilde·Wq (feat·Wk)ᵀ / sqrt(d)) · feat·Wv`, one head.
pub fn cross_align(
    params: &ParamSet,
    prefix: &str,
    x_tilde: &Tensor,
    feat: &Tensor,
) -> Result<(Tensor, CrossCache)> {
    if x_tilde.shape() != feat.shape() {
        return Err(Error::dim("cross_align", x_tilde.shape(), feat.shape()));
    }
    let [bsz, np, d] = *x_tilde.shape() else {
        return Err(Error::dim("cross_align", x_tilde.shape(), &[0, 0, 0]));
    };
    let q = ops::linear(x_tilde, params.get(&format!("{prefix}.wq"))?, None)?;
    let k = ops::linear(feat, params.get(&format!("{prefix}.wk"))?, None)?;
    let v = ops::linear(feat, params.get(&format!("{prefix}.wv"))?, None)?;
    let mut out = x_tilde.clone();
    let mut per_sample = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let slice = |t: &Tensor| {
            Tensor::from_parts(
                vec![1, np, d],
                t.data()[b * np * d..(b + 1) * np * d].to_vec(),
            )
        };
        let (qb, kb, vb) = (slice(&q), slice(&k), slice(&v));
        let (o, c) = softmax_attention(&qb, &kb, &vb, false)?;
        out.data_mut()[b * np * d..(b + 1) * np * d]
            .iter_mut()
            .zip(o.data())
            .for_each(|(a, b)| *a += b);
        per_sample.push((qb, kb, vb, c));
    }
    Ok((
        out,
        CrossCache {
            xq: x_tilde.clone(),
            feat: feat.clone(),
            per_sample,
        },
    ))
}

pub fn cross_align_backward(
    params: &mut ParamSet,
    prefix: &str,
    cache: &CrossCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [bsz, np, d] = *dy.shape() else {
        return Err(Error::dim("cross_align_backward", dy.shape(), &[0, 0, 0]));
    };
    let mut dq = vec![0.0; bsz * np * d];
    let mut dk = vec![0.0; bsz * np * d];
    let mut dv = vec![0.0; bsz * np * d];
    for (b, (qb, kb, vb, c)) in cache.per_sample.iter().enumerate() {
        let r = b * np * d..(b + 1) * np * d;
        let dout = Tensor::from_parts(vec![1, np, d], dy.data()[r.clone()].to_vec());
        let (gq, gk, gv) = softmax_attention_backward(qb, kb, vb, &dout, c)?;
        dq[r.clone()].copy_from_slice(gq.data());
        dk[r.clone()].copy_from_slice(gk.data());
        dv[r].copy_from_slice(gv.data());
    }
    let shape = vec![bsz, np, d];
    let mut dx = dy.clone();
    let mut dfeat = Tensor::zeros(&shape);
    for (m, grad, input) in [
        ("wq", dq, &cache.xq),
        ("wk", dk, &cache.feat),
        ("wv", dv, &cache.feat),
    ] {
        let name = format!("{prefix}.{m}");
        let g = ops::linear_backward(
            input,
            params.get(&name)?,
            &Tensor::from_parts(shape.clone(), grad),
            params.is_trainable(&name),
            false,
        )?;
        accumulate(params, &name, g.dw)?;
        if m == "wq" {
            ops::add_assign(&mut dx, &g.dx)?;
        } else {
            ops::add_assign(&mut dfeat, &g.dx)?;
        }
    }
    Ok((dx, dfeat))
}

enum BranchCache {
    Mixer(MixCache),
    Cross(CrossCache),
    Add,
    None,
}

/// Per-branch state kept between [`fuse_and_project`] and its backward.
pub struct FuseCache {
    local: Option<(Vec<usize>, BranchCache)>,
    global: Option<(Vec<usize>, BranchCache)>,
    final_ln: Option<LayerNormCache>,
    flat: Tensor,
    n_layers: usize,
    shape: Vec<usize>,
}

/// Output of [`fuse_and_project`].
#[derive(Debug, Clone)]
pub struct Forecast {
    /// `[B × T]` on the normalized scale.
    pub normalized: Tensor,
    /// `[B × T]` mapped back through each window's statistics.
    pub denormalized: Tensor,
}

/// Tap `n` as seen by the mixers: raw for shallow taps, final-normed at the top.
fn readout(
    params: &ParamSet,
    taps: &LayerTaps,
    n: usize,
    ln_eps: f64,
    ln_cache: &mut Option<LayerNormCache>,
    top_out: &mut Option<Tensor>,
) -> Result<Tensor> {
    let depth = taps.depth();
    if n != depth || depth == 0 {
        return Ok(taps.hidden[n].clone());
    }
    if let Some(t) = top_out {
        return Ok(t.clone());
    }
    let (y, c) = ops::layer_norm(
        &taps.hidden[n],
        params.get("final_ln.gamma")?,
        params.get("final_ln.beta")?,
        ln_eps,
    )?;
    *ln_cache = Some(c);
    *top_out = Some(y.clone());
    Ok(y)
}

fn average(parts: &[Tensor]) -> Result<Tensor> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        ops::add_assign(&mut acc, p)?;
    }
    Ok(ops::scale(&acc, 1.0 / parts.len() as f64))
}

/// Resolves the local and global features from the taps per `cfg`.
/// Returns `None` for a branch the selection disables.
pub fn select_features(
    cfg: &FusionConfig,
    params: &ParamSet,
    taps: &LayerTaps,
    ln_eps: f64,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (lt, gt) = feature_taps(cfg, taps.depth());
    let mut c = None;
    let mut top = None;
    let mut resolve = |ids: &[usize]| -> Result<Option<Tensor>> {
        if ids.is_empty() {
            return Ok(None);
        }
        let parts = ids
            .iter()
            .map(|&n| readout(params, taps, n, ln_eps, &mut c, &mut top))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(average(&parts)?))
    };
    Ok((resolve(&lt)?, resolve(&gt)?))
}

#[allow(clippy::too_many_arguments)]
fn align(
    variant: FusionVariant,
    params: &ParamSet,
    branch: &str,
    x_tilde: &Tensor,
    feat: Tensor,
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, BranchCache)> {
    match variant {
        FusionVariant::Mixer => {
            let (y, c) = mix(
                params,
                &format!("mixer.{branch}"),
                x_tilde,
                &feat,
                dropout,
                training,
                rng,
            )?;
            Ok((y, BranchCache::Mixer(c)))
        }
        FusionVariant::Cross => {
            let (y, c) = cross_align(params, &format!("cross.{branch}"), x_tilde, &feat)?;
            Ok((y, BranchCache::Cross(c)))
        }
        FusionVariant::Add => Ok((ops::add(x_tilde, &feat)?, BranchCache::Add)),
        FusionVariant::None => Ok((feat, BranchCache::None)),
    }
}

/// Aligns the selected features with `x_tilde`, sums the branches and
/// projects the flattened result to the horizon.
#[allow(clippy::too_many_arguments)]
pub fn fuse_and_project(
    cfg: &FusionConfig,
    params: &ParamSet,
    x_tilde: &Tensor,
    taps: &LayerTaps,
    stats: &[NormStats],
    ln_eps: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Forecast, FuseCache)> {
    let n_layers = taps.depth();
    cfg.validate(n_layers)?;
    let [bsz, np, d] = *x_tilde.shape() else {
        return Err(Error::dim("fuse_and_project", x_tilde.shape(), &[0, 0, 0]));
    };
    if stats.len() != bsz {
        return Err(Error::dim("fuse_and_project stats", &[stats.len()], &[bsz]));
    }
    let (lt, gt) = feature_taps(cfg, n_layers);
    let mut ln_cache = None;
    let mut top = None;
    let mut feature = |ids: &[usize]| -> Result<Tensor> {
        let parts = ids
            .iter()
            .map(|&n| readout(params, taps, n, ln_eps, &mut ln_cache, &mut top))
            .collect::<Result<Vec<_>>>()?;
        average(&parts)
    };

    let mut fused: Option<Tensor> = None;
    let mut local = None;
    let mut global = None;
    for (branch, ids, slot) in [("local", &lt, &mut local), ("global", &gt, &mut global)] {
        if ids.is_empty() {
            continue;
        }
        let feat = feature(ids)?;
        let (y, c) = align(
            cfg.variant,
            params,
            branch,
            x_tilde,
            feat,
            cfg.dropout,
            training,
            rng,
        )?;
        match &mut fused {
            Some(f) => ops::add_assign(f, &y)?,
            None => fused = Some(y),
        }
        *slot = Some((ids.clone(), c));
    }
    let fused = fused.ok_or_else(|| Error::Config("layer selection enables no branch".into()))?;
    let flat = fused.reshape(&[bsz, np * d])?;
    let head_w = params.get("head.weight")?;
    if head_w.shape()[0] != np * d {
        return Err(Error::dim("head", head_w.shape(), &[np * d]));
    }
    let normalized = ops::linear(&flat, head_w, opt_param(params, "head.bias"))?;
    normalized.check_finite("forecast head")?;
    let horizon = normalized.last_dim();
    let mut den = Vec::with_capacity(bsz * horizon);
    for (b, st) in stats.iter().enumerate() {
        den.extend(instance_denormalize(normalized.row(b), st));
    }
    let denormalized = Tensor::from_parts(vec![bsz, horizon], den);
    Ok((
        Forecast {
            normalized,
            denormalized,
        },
        FuseCache {
            local,
            global,
            final_ln: ln_cache,
            flat,
            n_layers,
            shape: vec![bsz, np, d],
        },
    ))
}

/// Backpropagates a gradient on the normalized forecast `[B × T]`.
///
/// Returns one optional gradient per tap and the gradient on `x_tilde`.
pub fn fuse_backward(
    params: &mut ParamSet,
    cache: &FuseCache,
    dpred: &Tensor,
) -> Result<(Vec<Option<Tensor>>, Tensor)> {
    let g = ops::linear_backward(
        &cache.flat,
        params.get("head.weight")?,
        dpred,
        params.is_trainable("head.weight"),
        params.is_trainable("head.bias"),
    )?;
    accumulate(params, "head.weight", g.dw)?;
    accumulate(params, "head.bias", g.db)?;
    let dfused = g.dx.reshape(&cache.shape)?;

    let mut dx_tilde = Tensor::zeros(&cache.shape);
    let mut readout_grads: Vec<Option<Tensor>> = vec![None; cache.n_layers + 1];
    for (branch, slot) in [("local", &cache.local), ("global", &cache.global)] {
        let Some((ids, bc)) = slot else { continue };
        let dfeat = match bc {
            BranchCache::Mixer(c) => {
                let (dx, dfeat) = mix_backward(params, &format!("mixer.{branch}"), c, &dfused)?;
                ops::add_assign(&mut dx_tilde, &dx)?;
                dfeat
            }
            BranchCache::Cross(c) => {
                let (dx, dfeat) =
                    cross_align_backward(params, &format!("cross.{branch}"), c, &dfused)?;
                ops::add_assign(&mut dx_tilde, &dx)?;
                dfeat
            }
            BranchCache::Add => {
                ops::add_assign(&mut dx_tilde, &dfused)?;
                dfused.clone()
            }
            BranchCache::None => dfused.clone(),
        };
        let share = ops::scale(&dfeat, 1.0 / ids.len() as f64);
        for &n in ids {
            match &mut readout_grads[n] {
                Some(t) => ops::add_assign(t, &share)?,
                s @ None => *s = Some(share.clone()),
            }
        }
    }

    let top = cache.n_layers;
    if top > 0 {
        if let (Some(dtop), Some(lnc)) = (readout_grads[top].take(), &cache.final_ln) {
            let (dx, dgamma, dbeta) =
                ops::layer_norm_backward(&dtop, params.get("final_ln.gamma")?, lnc)?;
            params.accumulate_grad("final_ln.gamma", &dgamma)?;
            params.accumulate_grad("final_ln.beta", &dbeta)?;
            readout_grads[top] = Some(dx);
        }
    }
    Ok((readout_grads, dx_tilde))
}
