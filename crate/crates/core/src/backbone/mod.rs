//! Patch embedding, learnable positions and a stack of pre-norm transformer
//! blocks whose every intermediate hidden state is kept as a "tap".
//!
//! Parameter names are stable and double as the weight-file manifest:
//!
//! ```text
//! embed.token.weight   [P × d]        embed.token.bias  [d]
//! embed.pos            [max_patches × d]
//! block.{n}.ln1.gamma / .beta         block.{n}.attn.qkv.weight [d × 3d] / .bias
//! block.{n}.attn.proj.weight [d × d] / .bias
//! block.{n}.ln2.gamma / .beta         block.{n}.mlp.fc.weight [d × d_ff] / .bias
//! block.{n}.mlp.proj.weight [d_ff × d] / .bias
//! final_ln.gamma / .beta
//! ```
//!
//! Blocks are numbered from 1 so that block `n` produces tap `n`.

mod stack;
mod weights;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{ParamSet, Tensor};

pub use stack::{apply_block, backward, embed, forward, BackboneCache, LayerTaps};
pub use weights::{load_weights, load_weights_checked, read_params, save_weights, write_params};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_patches: usize,
    pub causal: bool,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_patches: 128,
            causal: true,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_patches == 0 {
            return Err(Error::Config(
                "d_ff and max_patches must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which backbone tensors receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FreezePolicy {
    /// Layer norms and positional embedding.
    LnPe,
    Ln,
    Pe,
    Full,
    None,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 5] = [Self::LnPe, Self::Ln, Self::Pe, Self::Full, Self::None];

    pub fn label(self) -> &'static str {
        match self {
            Self::LnPe => "LN_PE",
            Self::Ln => "LN",
            Self::Pe => "PE",
            Self::Full => "FULL",
            Self::None => "NONE",
        }
    }
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown freeze policy `{s}`")))
    }
}

/// Which layer norms count as "the layer norm" for LN-based policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnScope {
    All,
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbed,
    PosEmbed,
    LayerNorm {
        is_final: bool,
    },
    Attention,
    FeedForward,
    /// Anything outside the backbone (mixers, head).
    Other,
}

pub fn param_role(name: &str) -> ParamRole {
    if name.starts_with("embed.token.") {
        ParamRole::TokenEmbed
    } else if name == "embed.pos" {
        ParamRole::PosEmbed
    } else if name.starts_with("final_ln.") {
        ParamRole::LayerNorm { is_final: true }
    } else if let Some(rest) = name.strip_prefix("block.") {
        let part = rest.split('.').nth(1).unwrap_or("");
        match part {
            "ln1" | "ln2" => ParamRole::LayerNorm { is_final: false },
            "attn" => ParamRole::Attention,
            _ => ParamRole::FeedForward,
        }
    } else {
        ParamRole::Other
    }
}

/// Trainable-scalar counts after a policy is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeSummary {
    /// Trainable scalars among positions, blocks and the final norm.
    pub backbone_trainable: usize,
    pub backbone_total: usize,
    /// Token embedding scalars; always trainable.
    pub token_embed: usize,
}

/// Sets trainable flags on every backbone entry of `params` per `policy`.
/// The token embedding stays trainable and non-backbone entries are untouched.
pub fn apply_freeze(
    params: &mut ParamSet,
    policy: FreezePolicy,
    scope: LnScope,
) -> Result<FreezeSummary> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut summary = FreezeSummary {
        backbone_trainable: 0,
        backbone_total: 0,
        token_embed: 0,
    };
    for name in names {
        let role = param_role(&name);
        let len = params.get(&name)?.len();
        let trainable = match role {
            ParamRole::Other => continue,
            ParamRole::TokenEmbed => {
                summary.token_embed += len;
                true
            }
            ParamRole::PosEmbed => matches!(
                policy,
                FreezePolicy::LnPe | FreezePolicy::Pe | FreezePolicy::Full
            ),
            ParamRole::LayerNorm { is_final } => {
                let in_scope = is_final || scope == LnScope::All;
                match policy {
                    FreezePolicy::Full => true,
                    FreezePolicy::LnPe | FreezePolicy::Ln => in_scope,
                    FreezePolicy::Pe | FreezePolicy::None => false,
                }
            }
            ParamRole::Attention | ParamRole::FeedForward => policy == FreezePolicy::Full,
        };
        params.set_trainable(&name, trainable)?;
        if role != ParamRole::TokenEmbed {
            summary.backbone_total += len;
            if trainable {
                summary.backbone_trainable += len;
            }
        }
    }
    Ok(summary)
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Fresh backbone parameters for a patch width of `patch_len`, all trainable.
pub fn init_params(cfg: &BackboneConfig, patch_len: usize, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    p.insert(
        "embed.token.weight",
        normal_tensor(&[patch_len, d], rng),
        true,
    )?;
    p.insert("embed.token.bias", Tensor::zeros(&[d]), true)?;
    p.insert("embed.pos", normal_tensor(&[cfg.max_patches, d], rng), true)?;
    for n in 1..=cfg.n_layers {
        let b = format!("block.{n}");
        p.insert(format!("{b}.ln1.gamma"), Tensor::filled(&[d], 1.0), true)?;
        p.insert(format!("{b}.ln1.beta"), Tensor::zeros(&[d]), true)?;
        p.insert(
            format!("{b}.attn.qkv.weight"),
            normal_tensor(&[d, 3 * d], rng),
            true,
        )?;
        p.insert(format!("{b}.attn.qkv.bias"), Tensor::zeros(&[3 * d]), true)?;
        p.insert(
            format!("{b}.attn.proj.weight"),
            normal_tensor(&[d, d], rng),
            true,
        )?;
        p.insert(format!("{b}.attn.proj.bias"), Tensor::zeros(&[d]), true)?;
        p.insert(format!("{b}.ln2.gamma"), Tensor::filled(&[d], 1.0), true)?;
        p.insert(format!("{b}.ln2.beta"), Tensor::zeros(&[d]), true)?;
        p.insert(
            format!("{b}.mlp.fc.weight"),
            normal_tensor(&[d, cfg.d_ff], rng),
            true,
        )?;
        p.insert(format!("{b}.mlp.fc.bias"), Tensor::zeros(&[cfg.d_ff]), true)?;
        p.insert(
            format!("{b}.mlp.proj.weight"),
            normal_tensor(&[cfg.d_ff, d], rng),
            true,
        )?;
        p.insert(format!("{b}.mlp.proj.bias"), Tensor::zeros(&[d]), true)?;
    }
    p.insert("final_ln.gamma", Tensor::filled(&[d], 1.0), true)?;
    p.insert("final_ln.beta", Tensor::zeros(&[d]), true)?;
    Ok(p)
}

/// The backbone parameters together with the shape they were built for.
#[derive(Debug, Clone)]
pub struct BackboneState {
    pub config: BackboneConfig,
    pub patch_len: usize,
    pub params: ParamSet,
}

impl BackboneState {
    pub fn init(config: BackboneConfig, patch_len: usize, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, patch_len, rng)?;
        Ok(Self {
            config,
            patch_len,
            params,
        })
    }

    pub fn apply_freeze(&mut self, policy: FreezePolicy, scope: LnScope) -> Result<FreezeSummary> {
        apply_freeze(&mut self.params, policy, scope)
    }

    pub fn forward(&self, patches: &Tensor, training: bool, rng: &mut Rng) -> Result<LayerTaps> {
        Ok(forward(&self.config, &self.params, patches, training, rng)?.0)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_weights(path, &self.params)
    }

    /// Loads a weight file that must hold exactly the tensors this config
    /// would create, with matching shapes.
    pub fn load(
        path: impl AsRef<std::path::Path>,
        config: BackboneConfig,
        patch_len: usize,
    ) -> Result<Self> {
        let expected = init_params(&config, patch_len, &mut crate::numerics::rng::stream(0, 0))?;
        let params = load_weights_checked(path, &expected)?;
        Ok(Self {
            config,
            patch_len,
            params,
        })
    }
}
