use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::numerics::ops::{self, DropoutMask, LayerNormCache};
use crate::numerics::rng::Rng;
use crate::numerics::{
    softmax_attention, softmax_attention_backward, AttentionCache, ParamSet, Tensor,
};

/// Hidden states `[B × N_p × d]`: index 0 is the embedding plus positions,
/// index `n` the output of block `n`.
#[derive(Debug, Clone)]
pub struct LayerTaps {
    pub hidden: Vec<Tensor>,
}

impl LayerTaps {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() - 1
    }
}

/// Token embedding `TE(patches)`, before positions are added.
pub fn embed(params: &ParamSet, patches: &Tensor, max_patches: usize) -> Result<Tensor> {
    let [_, np, _] = patches.shape() else {
        return Err(Error::dim("embed", patches.shape(), &[0, 0, 0]));
    };
    if *np > max_patches {
        return Err(Error::Capacity {
            what: "patch count",
            got: *np,
            max: max_patches,
        });
    }
    ops::linear(
        patches,
        params.get("embed.token.weight")?,
        Some(params.get("embed.token.bias")?),
    )
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Tensor,
    /// Per-sample `(q, k, v)` in head-major layout and the attention cache.
    heads: Vec<(Tensor, Tensor, Tensor, AttentionCache)>,
    merged: Tensor,
    attn_drop: DropoutMask,
    ln2: LayerNormCache,
    b: Tensor,
    fc: Tensor,
    act: Tensor,
    mlp_drop: DropoutMask,
}

/// Everything the backward pass needs from one forward call.
pub struct BackboneCache {
    patches: Tensor,
    embed_drop: DropoutMask,
    blocks: Vec<BlockCache>,
}

impl BackboneCache {
    pub fn patches(&self) -> &Tensor {
        &self.patches
    }
}

fn split_heads(qkv: &Tensor, b: usize, np: usize, h: usize, dh: usize, which: usize) -> Tensor {
    let d = h * dh;
    let mut out = vec![0.0; h * np * dh];
    for i in 0..np {
        let row = qkv.row(b * np + i);
        for head in 0..h {
            let src = &row[which * d + head * dh..which * d + (head + 1) * dh];
            out[(head * np + i) * dh..(head * np + i + 1) * dh].copy_from_slice(src);
        }
    }
    Tensor::from_parts(vec![h, np, dh], out)
}

#[allow(clippy::too_many_arguments)]
fn merge_heads_into(
    src: &Tensor,
    dst: &mut [f64],
    b: usize,
    np: usize,
    h: usize,
    dh: usize,
    offset: usize,
    row_width: usize,
) {
    for head in 0..h {
        for i in 0..np {
            let s = &src.data()[(head * np + i) * dh..(head * np + i + 1) * dh];
            let start = (b * np + i) * row_width + offset + head * dh;
            dst[start..start + dh].copy_from_slice(s);
        }
    }
}

fn block_forward(
    cfg: &BackboneConfig,
    params: &ParamSet,
    n: usize,
    x: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<(Tensor, BlockCache)> {
    let [bsz, np, d] = *x.shape() else {
        return Err(Error::dim("block", x.shape(), &[0, 0, 0]));
    };
    let p = |s: &str| params.get(&format!("block.{n}.{s}"));
    let (h, dh) = (cfg.n_heads, cfg.head_dim());

    let (a, ln1) = ops::layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?, cfg.ln_eps)?;
    let qkv = ops::linear(&a, p("attn.qkv.weight")?, Some(p("attn.qkv.bias")?))?;
    let mut merged = vec![0.0; bsz * np * d];
    let mut heads = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let q = split_heads(&qkv, b, np, h, dh, 0);
        let k = split_heads(&qkv, b, np, h, dh, 1);
        let v = split_heads(&qkv, b, np, h, dh, 2);
        let (o, cache) = softmax_attention(&q, &k, &v, cfg.causal)?;
        merge_heads_into(&o, &mut merged, b, np, h, dh, 0, d);
        heads.push((q, k, v, cache));
    }
    let merged = Tensor::from_parts(vec![bsz, np, d], merged);
    let proj = ops::linear(&merged, p("attn.proj.weight")?, Some(p("attn.proj.bias")?))?;
    let (proj, attn_drop) = ops::dropout(&proj, cfg.dropout, training, rng)?;
    let h1 = ops::add(x, &proj)?;

    let (bn, ln2) = ops::layer_norm(&h1, p("ln2.gamma")?, p("ln2.beta")?, cfg.ln_eps)?;
    let fc = ops::linear(&bn, p("mlp.fc.weight")?, Some(p("mlp.fc.bias")?))?;
    let act = ops::gelu(&fc);
    let m = ops::linear(&act, p("mlp.proj.weight")?, Some(p("mlp.proj.bias")?))?;
    let (m, mlp_drop) = ops::dropout(&m, cfg.dropout, training, rng)?;
    let out = ops::add(&h1, &m)?;

    Ok((
        out,
        BlockCache {
            ln1,
            a,
            heads,
            merged,
            attn_drop,
            ln2,
            b: bn,
            fc,
            act,
            mlp_drop,
        },
    ))
}

/// Backpropagates `dy` through block `n`, accumulating trainable gradients,
/// and returns the gradient with respect to the block input.
fn block_backward(
    cfg: &BackboneConfig,
    params: &mut ParamSet,
    n: usize,
    cache: &BlockCache,
    dy: &Tensor,
) -> Result<Tensor> {
    let name = |s: &str| format!("block.{n}.{s}");
    let [bsz, np, d] = *dy.shape() else {
        return Err(Error::dim("block_backward", dy.shape(), &[0, 0, 0]));
    };
    let (h, dh) = (cfg.n_heads, cfg.head_dim());

    // out = h1 + drop(proj2(gelu(fc(ln2(h1)))))
    let dm = ops::dropout_backward(dy, &cache.mlp_drop);
    let w = name("mlp.proj.weight");
    let bname = name("mlp.proj.bias");
    let g = ops::linear_backward(
        &cache.act,
        params.get(&w)?,
        &dm,
        params.is_trainable(&w),
        params.is_trainable(&bname),
    )?;
    accumulate(params, &w, g.dw)?;
    accumulate(params, &bname, g.db)?;
    let dfc = ops::gelu_backward(&cache.fc, &g.dx);
    let w = name("mlp.fc.weight");
    let bname = name("mlp.fc.bias");
    let g = ops::linear_backward(
        &cache.b,
        params.get(&w)?,
        &dfc,
        params.is_trainable(&w),
        params.is_trainable(&bname),
    )?;
    accumulate(params, &w, g.dw)?;
    accumulate(params, &bname, g.db)?;
    let (dln2, dgamma, dbeta) =
        ops::layer_norm_backward(&g.dx, params.get(&name("ln2.gamma"))?, &cache.ln2)?;
    params.accumulate_grad(&name("ln2.gamma"), &dgamma)?;
    params.accumulate_grad(&name("ln2.beta"), &dbeta)?;
    let mut dh1 = dy.clone();
    ops::add_assign(&mut dh1, &dln2)?;

    // h1 = x + drop(proj(attn(ln1(x))))
    let dproj = ops::dropout_backward(&dh1, &cache.attn_drop);
    let w = name("attn.proj.weight");
    let bname = name("attn.proj.bias");
    let g = ops::linear_backward(
        &cache.merged,
        params.get(&w)?,
        &dproj,
        params.is_trainable(&w),
        params.is_trainable(&bname),
    )?;
    accumulate(params, &w, g.dw)?;
    accumulate(params, &bname, g.db)?;
    let dmerged = g.dx;
    let mut dqkv = vec![0.0; bsz * np * 3 * d];
    for (b, (q, k, v, ac)) in cache.heads.iter().enumerate() {
        let mut dout = vec![0.0; h * np * dh];
        for head in 0..h {
            for i in 0..np {
                let src = &dmerged.row(b * np + i)[head * dh..(head + 1) * dh];
                dout[(head * np + i) * dh..(head * np + i + 1) * dh].copy_from_slice(src);
            }
        }
        let dout = Tensor::from_parts(vec![h, np, dh], dout);
        let (dq, dk, dv) = softmax_attention_backward(q, k, v, &dout, ac)?;
        merge_heads_into(&dq, &mut dqkv, b, np, h, dh, 0, 3 * d);
        merge_heads_into(&dk, &mut dqkv, b, np, h, dh, d, 3 * d);
        merge_heads_into(&dv, &mut dqkv, b, np, h, dh, 2 * d, 3 * d);
    }
    let dqkv = Tensor::from_parts(vec![bsz, np, 3 * d], dqkv);
    let w = name("attn.qkv.weight");
    let bname = name("attn.qkv.bias");
    let g = ops::linear_backward(
        &cache.a,
        params.get(&w)?,
        &dqkv,
        params.is_trainable(&w),
        params.is_trainable(&bname),
    )?;
    accumulate(params, &w, g.dw)?;
    accumulate(params, &bname, g.db)?;
    let (dln1, dgamma, dbeta) =
        ops::layer_norm_backward(&g.dx, params.get(&name("ln1.gamma"))?, &cache.ln1)?;
    params.accumulate_grad(&name("ln1.gamma"), &dgamma)?;
    params.accumulate_grad(&name("ln1.beta"), &dbeta)?;
    ops::add_assign(&mut dh1, &dln1)?;
    Ok(dh1)
}

fn accumulate(params: &mut ParamSet, name: &str, grad: Option<Vec<f64>>) -> Result<()> {
    match grad {
        Some(g) => params.accumulate_grad(name, &g),
        None => Ok(()),
    }
}

/// Runs the embedding and every block. Returns the taps, the bare token
/// embedding `x_tilde` (no positions) and the cache for [`backward`].
pub fn forward(
    cfg: &BackboneConfig,
    params: &ParamSet,
    patches: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<(LayerTaps, Tensor, BackboneCache)> {
    let x_tilde = embed(params, patches, cfg.max_patches)?;
    let [bsz, np, d] = *x_tilde.shape() else {
        unreachable!()
    };
    let pos = params.get("embed.pos")?;
    if pos.shape() != [cfg.max_patches, d] {
        return Err(Error::dim("embed.pos", pos.shape(), &[cfg.max_patches, d]));
    }
    let mut h0 = x_tilde.clone();
    for (i, v) in h0.data_mut().iter_mut().enumerate() {
        let row = (i / d) % np;
        *v += pos.data()[row * d + i % d];
    }
    let (h0, embed_drop) = ops::dropout(&h0, cfg.dropout, training, rng)?;
    h0.check_finite("embedding")?;
    debug_assert_eq!(h0.shape(), &[bsz, np, d]);

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(h0);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for n in 1..=cfg.n_layers {
        let (out, cache) = block_forward(cfg, params, n, &hidden[n - 1], training, rng)?;
        out.check_finite(&format!("block {n}"))?;
        hidden.push(out);
        blocks.push(cache);
    }
    Ok((
        LayerTaps { hidden },
        x_tilde,
        BackboneCache {
            patches: patches.clone(),
            embed_drop,
            blocks,
        },
    ))
}

/// Backpropagates gradients arriving at any subset of taps, plus a direct
/// gradient on `x_tilde`, into the trainable backbone parameters.
///
/// `tap_grads[n]` is the gradient with respect to tap `n`; `None` entries
/// contribute nothing and blocks above the highest populated tap are skipped.
pub fn backward(
    cfg: &BackboneConfig,
    params: &mut ParamSet,
    cache: &BackboneCache,
    mut tap_grads: Vec<Option<Tensor>>,
    dx_tilde: Option<Tensor>,
) -> Result<()> {
    if tap_grads.len() != cfg.n_layers + 1 {
        return Err(Error::Config(format!(
            "expected {} tap gradients, got {}",
            cfg.n_layers + 1,
            tap_grads.len()
        )));
    }
    let mut running: Option<Tensor> = None;
    for n in (1..=cfg.n_layers).rev() {
        let here = merge(running.take(), tap_grads[n].take())?;
        if let Some(dy) = here {
            running = Some(block_backward(cfg, params, n, &cache.blocks[n - 1], &dy)?);
        }
    }
    let dh0 = merge(running, tap_grads[0].take())?;
    let dsum = dh0.map(|g| ops::dropout_backward(&g, &cache.embed_drop));

    if let Some(g) = &dsum {
        if params.is_trainable("embed.pos") {
            let [_, np, d] = *g.shape() else {
                unreachable!()
            };
            let mut dpos = vec![0.0; cfg.max_patches * d];
            for (i, v) in g.data().iter().enumerate() {
                dpos[((i / d) % np) * d + i % d] += v;
            }
            params.accumulate_grad("embed.pos", &dpos)?;
        }
    }
    if let Some(dx) = merge(dsum, dx_tilde)? {
        let w = "embed.token.weight";
        let g = ops::linear_backward(
            &cache.patches,
            params.get(w)?,
            &dx,
            params.is_trainable(w),
            params.is_trainable("embed.token.bias"),
        )?;
        accumulate(params, w, g.dw)?;
        accumulate(params, "embed.token.bias", g.db)?;
    }
    Ok(())
}

fn merge(a: Option<Tensor>, b: Option<Tensor>) -> Result<Option<Tensor>> {
    Ok(match (a, b) {
        (Some(mut a), Some(b)) => {
            ops::add_assign(&mut a, &b)?;
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    })
}

/// Recomputes block `n` alone in eval mode; used to check the tap recurrence.
pub fn apply_block(
    cfg: &BackboneConfig,
    params: &ParamSet,
    n: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let mut rng = crate::numerics::rng::stream(0, 0);
    Ok(block_forward(cfg, params, n, x, false, &mut rng)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_params;
    use crate::numerics::rng::stream;
    use rand::Rng as _;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_patches: 8,
            dropout: 0.0,
            ..BackboneConfig::default()
        }
    }

    fn patches(b: usize, np: usize, p: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, 9);
        Tensor::from_fn(&[b, np, p], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_token_embedding() {
        let cfg = BackboneConfig {
            d_model: 4,
            n_heads: 1,
            ..tiny()
        };
        let mut params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        *params.get_mut("embed.token.weight").unwrap() = eye;
        let x = patches(2, 3, 4, 1);
        assert_eq!(embed(&params, &x, 8).unwrap(), x);
    }

    #[test]
    fn zero_patches_embed_to_bias() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        let bias = Tensor::from_fn(&[8], |i| i as f64);
        *params.get_mut("embed.token.bias").unwrap() = bias.clone();
        let out = embed(&params, &Tensor::zeros(&[1, 3, 4]), 8).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), bias.data());
        }
    }

    #[test]
    fn embed_matches_loop() {
        let cfg = tiny();
        let params = init_params(&cfg, 4, &mut stream(3, 0)).unwrap();
        let x = patches(2, 3, 4, 2);
        let out = embed(&params, &x, 8).unwrap();
        let w = params.get("embed.token.weight").unwrap();
        let b = params.get("embed.token.bias").unwrap();
        for r in 0..6 {
            for j in 0..8 {
                let mut s = b.data()[j];
                for k in 0..4 {
                    s += x.data()[r * 4 + k] * w.data()[k * 8 + j];
                }
                assert!((out.data()[r * 8 + j] - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn too_many_patches() {
        let cfg = tiny();
        let params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        let err = embed(&params, &Tensor::zeros(&[1, 9, 4]), 8).unwrap_err();
        assert!(matches!(err, Error::Capacity { got: 9, max: 8, .. }));
    }

    #[test]
    fn zero_depth_has_single_tap() {
        let cfg = BackboneConfig {
            n_layers: 0,
            ..tiny()
        };
        let params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        let (taps, xt, _) = forward(
            &cfg,
            &params,
            &patches(1, 3, 4, 0),
            false,
            &mut stream(0, 1),
        )
        .unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(taps.hidden[0].shape(), xt.shape());
    }

    #[test]
    fn zero_weights_zero_input_gives_zero_taps() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        let names: Vec<String> = params
            .names()
            .filter(|n| !n.ends_with("gamma"))
            .map(String::from)
            .collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let (taps, _, _) = forward(
            &cfg,
            &params,
            &Tensor::zeros(&[2, 3, 4]),
            false,
            &mut stream(0, 1),
        )
        .unwrap();
        for t in &taps.hidden {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn taps_satisfy_recurrence_and_replay() {
        let cfg = BackboneConfig {
            dropout: 0.1,
            ..tiny()
        };
        let params = init_params(&cfg, 4, &mut stream(5, 0)).unwrap();
        let x = patches(2, 5, 4, 7);
        let (a, _, _) = forward(&cfg, &params, &x, false, &mut stream(1, 1)).unwrap();
        let (b, _, _) = forward(&cfg, &params, &x, false, &mut stream(2, 1)).unwrap();
        for (u, v) in a.hidden.iter().zip(&b.hidden) {
            assert_eq!(u, v);
        }
        for n in 1..=cfg.n_layers {
            let re = apply_block(&cfg, &params, n, &a.hidden[n - 1]).unwrap();
            for (u, v) in re.data().iter().zip(a.hidden[n].data()) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn nan_input_names_the_stage() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 4, &mut stream(0, 0)).unwrap();
        params.get_mut("block.2.mlp.proj.bias").unwrap().data_mut()[0] = f64::NAN;
        let Err(err) = forward(
            &cfg,
            &params,
            &patches(1, 3, 4, 0),
            false,
            &mut stream(0, 1),
        ) else {
            panic!("NaN passed through");
        };
        assert!(err.to_string().contains("block 2"), "{err}");
    }
}
