//! Channel attention variants: squeeze-excitation (SE), CBAM-style channel
//! attention (CA) and channel residual attention (CRA).
//!
//! All three compute a per-channel gate in `(0, 1)` from globally pooled
//! descriptors and rescale the feature map with it:
//!
//! | kind | gate |
//! |------|------|
//! | SE   | `σ(E(relu(R(avg))))` |
//! | CA   | `σ(E(relu(R(avg))) + E(relu(R(max))))` |
//! | CRA  | `σ(avg + E(relu(R(avg))))` |
//!
//! `R` and `E` are the shared reduce/expand dense layers. CRA's skip adds the
//! raw pooled descriptor to the expanded output before the sigmoid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use sapnet_autograd::{Tape, Tensor, Var};

use crate::nn::{Binding, Linear};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Se,
    Ca,
    Cra,
    /// Identity pass-through.
    None,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [Self::Se, Self::Ca, Self::Cra, Self::None];

    pub fn has_weights(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Se => "se",
            Self::Ca => "ca",
            Self::Cra => "cra",
            Self::None => "none",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(Self::Se),
            "ca" => Ok(Self::Ca),
            "cra" => Ok(Self::Cra),
            "none" => Ok(Self::None),
            other => Err(format!(
                "unknown attention kind `{other}` (expected se, ca, cra or none)"
            )),
        }
    }
}

/// Width of the bottleneck for `channels` and reduction `r`: `ceil(C / r)`,
/// never below one.
pub fn reduced_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

/// Reduce/expand layers shared by every attention kind.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub reduce: Linear,
    pub expand: Linear,
    pub reduction: usize,
}

impl AttentionWeights {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = reduced_width(channels, reduction);
        Self {
            reduce: Linear::zeros(channels, hidden),
            expand: Linear::zeros(hidden, channels),
            reduction,
        }
    }

    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = reduced_width(channels, reduction);
        Self {
            reduce: Linear::uniform(channels, hidden, rng),
            expand: Linear::uniform(hidden, channels, rng),
            reduction,
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let hidden = self.reduce.out_dim();
        if self.expand.in_dim() != hidden || self.expand.out_dim() != c {
            return Err(Error::config(
                "model.attention",
                format!(
                    "inconsistent attention layers: reduce {c}->{hidden}, expand {}->{}",
                    self.expand.in_dim(),
                    self.expand.out_dim()
                ),
            ));
        }
        Ok(())
    }

    fn excite<'t>(&self, descriptor: Var<'t>, binding: Binding) -> Var<'t> {
        self.expand
            .forward(self.reduce.forward(descriptor, binding).relu(), binding)
    }
}

fn check_input(x: &Var<'_>, weights: Option<&AttentionWeights>) -> Result<()> {
    let value = x.value();
    let shape = value.shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!("attention expects [C, H, W], got {shape:?}")));
    }
    if let Some(w) = weights {
        w.validate()?;
        if w.channels() != shape[0] {
            return Err(Error::config(
                "model.channels",
                format!(
                    "attention weights are for {} channels but the feature map has {}",
                    w.channels(),
                    shape[0]
                ),
            ));
        }
    }
    if !value.all_finite() {
        return Err(Error::Numeric("attention input".into()));
    }
    Ok(())
}

/// The per-channel gate, or `None` for [`AttentionKind::None`].
pub fn attention_gate<'t>(
    kind: AttentionKind,
    x: Var<'t>,
    weights: Option<&AttentionWeights>,
    binding: Binding,
) -> Result<Option<Var<'t>>> {
    if kind == AttentionKind::None {
        return Ok(None);
    }
    let w =
        weights.ok_or_else(|| Error::config("model.attention", format!("attention kind `{kind}` needs weights")))?;
    check_input(&x, Some(w))?;
    let avg = x.global_avg_pool();
    let logits = match kind {
        AttentionKind::Se => w.excite(avg, binding),
        AttentionKind::Ca => w.excite(avg, binding) + w.excite(x.global_max_pool(), binding),
        AttentionKind::Cra => avg + w.excite(avg, binding),
        AttentionKind::None => unreachable!(),
    };
    Ok(Some(logits.sigmoid()))
}

/// Rescales `x` by its channel gate; identity for [`AttentionKind::None`].
pub fn apply_attention<'t>(
    kind: AttentionKind,
    x: Var<'t>,
    weights: Option<&AttentionWeights>,
    binding: Binding,
) -> Result<Var<'t>> {
    if kind == AttentionKind::None {
        check_input(&x, None)?;
        return Ok(x);
    }
    let gate = attention_gate(kind, x, weights, binding)?.expect("gated kind");
    Ok(x.mul_channels(gate))
}

/// Evaluates [`apply_attention`] on plain tensors.
pub fn apply_attention_tensor(kind: AttentionKind, x: &Tensor, weights: Option<&AttentionWeights>) -> Result<Tensor> {
    let tape = Tape::new();
    let out = apply_attention(kind, tape.constant(x), weights, Binding::Frozen)?;
    Ok(out.value().as_ref().clone())
}
