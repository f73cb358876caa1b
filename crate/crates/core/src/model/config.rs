use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::numerics::Real;

use super::norm::norm_kinds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// `layer`, `scale` or `batch`.
    pub norm: String,
    pub pre_norm: bool,
    pub codebook_size: usize,
    pub ema_rate: f64,
    pub ssm_state: usize,
    /// `false` replaces `SSM(X)` by `X` in the shared representation.
    pub use_ssm: bool,
    pub dropout: f64,
    /// `tokens` (embedding table) or `channels` (linear map of real inputs).
    pub input: String,
    pub vocab: usize,
    pub channels: usize,
    /// `classify` (mean-pool then linear) or `lm` (per-position logits).
    pub head: String,
    pub classes: usize,
    pub attn: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            d_model: 64,
            d_ffn: 128,
            norm: "layer".into(),
            pre_norm: false,
            codebook_size: crate::vq::DEFAULT_CODEBOOK_SIZE,
            ema_rate: crate::vq::DEFAULT_EMA_RATE,
            ssm_state: crate::ssm::DEFAULT_STATE_SIZE,
            use_ssm: true,
            dropout: 0.0,
            input: "tokens".into(),
            vocab: 16,
            channels: 3,
            head: "classify".into(),
            classes: 10,
            attn: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Tokens,
    Channels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Classify,
    Lm,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::config(field, msg)
}

impl ModelConfig {
    pub fn input_kind(&self) -> Result<InputKind> {
        match self.input.as_str() {
            "tokens" => Ok(InputKind::Tokens),
            "channels" => Ok(InputKind::Channels),
            other => Err(invalid("input", format!("unknown input kind `{other}` (known: tokens, channels)"))),
        }
    }

    pub fn head_kind(&self) -> Result<HeadKind> {
        match self.head.as_str() {
            "classify" => Ok(HeadKind::Classify),
            "lm" => Ok(HeadKind::Lm),
            other => Err(invalid("head", format!("unknown head `{other}` (known: classify, lm)"))),
        }
    }

    /// Width of the output logits.
    pub fn out_dim(&self) -> Result<usize> {
        Ok(match self.head_kind()? {
            HeadKind::Classify => self.classes,
            HeadKind::Lm => self.vocab,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("depth", "must be >= 1"));
        }
        if self.d_model == 0 {
            return Err(invalid("d_model", "must be >= 1"));
        }
        if self.d_ffn < self.d_model {
            return Err(invalid("d_ffn", format!("{} is smaller than d_model {}", self.d_ffn, self.d_model)));
        }
        norm_kinds::<f64>().get(&self.norm).map_err(|e| invalid("norm", e))?;
        if self.codebook_size == 0 {
            return Err(invalid("codebook_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(invalid("ema_rate", "must lie in [0, 1]"));
        }
        if self.ssm_state == 0 {
            return Err(invalid("ssm_state", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout", "must lie in [0, 1)"));
        }
        match self.input_kind()? {
            InputKind::Tokens if self.vocab == 0 => return Err(invalid("vocab", "must be >= 1")),
            InputKind::Channels if self.channels == 0 => return Err(invalid("channels", "must be >= 1")),
            _ => {}
        }
        match self.head_kind()? {
            HeadKind::Classify if self.classes == 0 => return Err(invalid("classes", "must be >= 1")),
            HeadKind::Lm if !self.attn.causal => {
                return Err(invalid("attn.causal", "the lm head needs causal attention"))
            }
            HeadKind::Lm if self.input_kind()? != InputKind::Tokens => {
                return Err(invalid("input", "the lm head needs token inputs"))
            }
            _ => {}
        }
        self.attn.validate().map_err(|e| e.in_section("attn"))
    }

    /// Number of trainable scalars implied by the configuration.
    pub fn param_count(&self) -> Result<usize> {
        let (d, f, n) = (self.d_model, self.d_ffn, self.ssm_state);
        let (z, v, w) = (self.attn.z_dim, self.attn.v_dim, self.attn.window);
        let norm = norm_param_count::<f64>(&self.norm, d)?;
        let ssm = d + d * n + d;
        let attn = (d * v + v) + 2 * (d * z + z) + (d * v + v) + (d * d + d) + (v * d + d) + (2 * w + 1);
        let ffn = d * f + f + f * d + d;
        let per_layer = ssm + attn + ffn + 2 * norm;
        let embed = match self.input_kind()? {
            InputKind::Tokens => self.vocab * d,
            InputKind::Channels => self.channels * d + d,
        };
        let out = self.out_dim()?;
        let head = d * out + out;
        let final_norm = if self.pre_norm { norm } else { 0 };
        Ok(self.depth * per_layer + embed + head + final_norm)
    }
}

fn norm_param_count<T: Real>(kind: &str, d: usize) -> Result<usize> {
    Ok(norm_kinds::<T>()
        .get(kind)?
        .params(d)
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum())
}
