//! Weather-specific prompt guidance: pick the learned prompt that best
//! matches the current diffusion state and inject its text embedding into
//! encoder features through the prompt adapter.

use candle_core::{DType, Tensor};

use crate::embedding::{FrozenEncoders, PromptBank};
use crate::layers::{scale_channels, Conv2d, Init, LayerNorm2d, Linear};
use crate::params::ParamBuilder;
use crate::prompt_trainer::argmax_lowest;
use crate::tensor::{ensure_finite, global_avg_pool, l2_normalize_last, sigmoid};
use crate::{Error, Result, Weather};

const PROBE_CHANNELS: [usize; 2] = [16, 32];

/// Convolutions plus global average pooling, mapping `[B, 3, H, W]` to unit
/// `[B, D]` shallow features.
#[derive(Clone)]
pub struct ShallowProbe {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Linear,
}

impl ShallowProbe {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        let [c1, c2] = PROBE_CHANNELS;
        Ok(Self {
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), 3, c1, 3, 2, Init::He)?,
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), c1, c2, 3, 2, Init::He)?,
            proj: Linear::new(pb, &format!("{name}.proj"), c2, width, Init::Scaled(1.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = crate::ops::gelu(&self.conv1.forward(x)?)?;
        let h = crate::ops::gelu(&self.conv2.forward(&h)?)?;
        l2_normalize_last(&self.proj.forward(&global_avg_pool(&h)?)?)
    }
}

/// `F_d` for a batch of states.
pub fn shallow_features(probe: &ShallowProbe, i_t: &Tensor) -> Result<Tensor> {
    ensure_finite(i_t, "probe input")?;
    probe.forward(i_t)
}

/// Per-sample prompt choice.
#[derive(Debug, Clone)]
pub struct PromptSelection {
    /// Cosine similarities `[B, 3]` between `F_d` and the encoded prompts;
    /// differentiable in the probe.
    pub similarities: Tensor,
    pub indices: Vec<usize>,
    /// Encoded selected prompts `F_s`, `[B, D]`.
    pub embeddings: Tensor,
}

impl PromptSelection {
    pub fn labels(&self) -> Result<Vec<Weather>> {
        self.indices.iter().map(|&i| Weather::from_index(i)).collect()
    }
}

/// Selects against precomputed encoded prompts `[3, D]` (rows in label order).
pub fn select_encoded(probe: &ShallowProbe, encoded: &Tensor, i_t: &Tensor) -> Result<PromptSelection> {
    let f_d = shallow_features(probe, i_t)?;
    let similarities = f_d.matmul(&encoded.t()?)?;
    let rows = similarities.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let indices: Vec<usize> = rows.iter().map(|r| argmax_lowest(r)).collect();
    let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
    let embeddings = encoded.index_select(&Tensor::new(idx.as_slice(), &crate::tensor::cpu())?, 0)?;
    Ok(PromptSelection {
        similarities,
        indices,
        embeddings,
    })
}

/// Single-state selection: returns the chosen prompt `P_s` (`N x D`), its
/// index and the three similarities.
pub fn select_prompt(
    probe: &ShallowProbe,
    enc: &FrozenEncoders,
    bank: &PromptBank,
    i_t: &Tensor,
) -> Result<(Tensor, usize, Vec<f64>)> {
    let batch = if i_t.rank() == 3 { i_t.unsqueeze(0)? } else { i_t.clone() };
    if batch.dim(0)? != 1 {
        return Err(Error::Shape("select_prompt takes a single state".into()));
    }
    let sel = select_encoded(probe, &bank.encode(enc)?, &batch)?;
    let sims = crate::tensor::to_f64_vec(&sel.similarities.get(0)?)?;
    let index = sel.indices[0];
    let prompt = bank.prompt(Weather::from_index(index)?).as_tensor().clone();
    Ok((prompt, index, sims))
}

/// Gated unit after a simplified NAF block: layer norm, 1x1 expansion to
/// twice the channels, depthwise 3x3, split-and-multiply gate, 1x1 back.
#[derive(Clone)]
pub struct NafBlock {
    norm: LayerNorm2d,
    expand: Conv2d,
    dw_weight: candle_core::Var,
    dw_bias: candle_core::Var,
    project: Conv2d,
}

impl NafBlock {
    /// The final projection starts at zero, so the block outputs zeros.
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm2d::new(pb, &format!("{name}.norm"), channels)?,
            expand: Conv2d::new(pb, &format!("{name}.expand"), channels, 2 * channels, 1, 1, Init::Scaled(1.0))?,
            dw_weight: pb.normal(&format!("{name}.dw.weight"), &[2 * channels, 9], 1.0 / 3.0)?,
            dw_bias: pb.zeros(&format!("{name}.dw.bias"), &[2 * channels])?,
            project: Conv2d::new(pb, &format!("{name}.project"), channels, channels, 1, 1, Init::Zero)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let h = self.expand.forward(&self.norm.forward(x)?)?;
        let h = crate::tensor::depthwise3x3(&h, &self.dw_weight, &self.dw_bias)?;
        let gated = (h.narrow(1, 0, c)? * h.narrow(1, c, c)?)?;
        self.project.forward(&gated)
    }

    pub fn project(&self) -> &Conv2d {
        &self.project
    }
}

/// Which inner parts of the adapter run; tests swap them for identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterParts {
    pub layer_norm: bool,
    pub block: bool,
}

impl Default for AdapterParts {
    fn default() -> Self {
        Self {
            layer_norm: true,
            block: true,
        }
    }
}

/// Prompt adapter for one encoder level:
/// `F_pa = Block(LN(F_e) * sigmoid(MLP(F_s))) + F_e`.
#[derive(Clone)]
pub struct PromptAdapter {
    channels: usize,
    mlp1: Linear,
    mlp2: Linear,
    norm: LayerNorm2d,
    block: NafBlock,
}

impl PromptAdapter {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, channels: usize) -> Result<Self> {
        let hidden = (width / 2).max(1);
        Ok(Self {
            channels,
            mlp1: Linear::new(pb, &format!("{name}.mlp1"), width, hidden, Init::He)?,
            mlp2: Linear::new(pb, &format!("{name}.mlp2"), hidden, channels, Init::Scaled(1.0))?,
            norm: LayerNorm2d::new(pb, &format!("{name}.norm"), channels)?,
            block: NafBlock::new(pb, &format!("{name}.block"), channels)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `w_c` in `(0, 1)^c` for each row of `F_s` `[B, D]`.
    pub fn channel_weights(&self, f_s: &Tensor) -> Result<Tensor> {
        sigmoid(&self.mlp2.forward(&crate::ops::gelu(&self.mlp1.forward(f_s)?)?)?)
    }

    pub fn forward(&self, f_e: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        self.compose(f_e, &self.channel_weights(f_s)?, AdapterParts::default())
    }

    /// Applies the residual structure with given channel weights.
    pub fn compose(&self, f_e: &Tensor, w_c: &Tensor, parts: AdapterParts) -> Result<Tensor> {
        let c = f_e.dim(1)?;
        if c != self.channels {
            return Err(Error::Shape(format!("adapter has {} channels, features have {c}", self.channels)));
        }
        let normed = if parts.layer_norm { self.norm.forward(f_e)? } else { f_e.clone() };
        let modulated = scale_channels(&normed, w_c)?;
        let branch = if parts.block { self.block.forward(&modulated)? } else { modulated };
        Ok((branch + f_e)?)
    }

    pub fn block(&self) -> &NafBlock {
        &self.block
    }
}
