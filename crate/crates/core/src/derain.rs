//! Progressive recurrent derain network.
//!
//! Each stage is one progressive dilated unit (PDU):
//!
//! ```text
//! [x^{t-1}, y] -> conv+relu -> ConvLSTM -> 5 dilated residual blocks -> conv -> x^t
//! ```
//!
//! where `y` is the rainy input. Every stage reuses the same weights; the
//! ConvLSTM state carries information between stages. `x^0` is the rainy image
//! and the state starts at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sapnet_autograd::{ConvOptions, Tape, Tensor, Var};

use crate::attention::{apply_attention, reduced_width, AttentionKind, AttentionWeights};
use crate::image::ImageTensor;
use crate::nn::{Binding, Conv};
use crate::{Error, Result};

/// Architectural hyperparameters of the derain network.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub channels: usize,
    pub kernel: usize,
    /// Dilation rate of each residual block, in order.
    pub dilations: Vec<usize>,
    pub stages: usize,
    pub attention: AttentionKind,
    pub reduction: usize,
    /// `(dilated conv, attention, relu)` repetitions inside one residual block.
    pub block_repeats: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            kernel: 3,
            dilations: vec![1, 2, 4, 8, 16],
            stages: 6,
            attention: AttentionKind::Cra,
            reduction: 16,
            block_repeats: 2,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the smoke tests and examples.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            kernel: 3,
            dilations: vec![1, 2],
            stages: 2,
            attention: AttentionKind::Cra,
            reduction: 4,
            block_repeats: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(format!("model.{key}"), msg));
        if self.channels == 0 {
            return fail("channels", "must be positive");
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail("kernel", "must be odd");
        }
        if self.dilations.is_empty() {
            return fail("dilations", "needs at least one residual block");
        }
        if self.dilations.contains(&0) {
            return fail("dilations", "every dilation must be >= 1");
        }
        if self.stages == 0 {
            return fail("stages", "must be >= 1");
        }
        if self.reduction == 0 {
            return fail("reduction", "must be >= 1");
        }
        if self.block_repeats == 0 {
            return fail("block_repeats", "must be >= 1");
        }
        Ok(())
    }

    pub fn max_dilation(&self) -> usize {
        self.dilations.iter().copied().max().unwrap_or(1)
    }

    /// Smallest image side accepted by [`derain`].
    pub fn min_image_side(&self) -> usize {
        2 * self.max_dilation() + 1
    }

    /// Side of the square input region that can influence one output pixel
    /// of a single stage: every `k x k` convolution with dilation `d` on the
    /// path adds `(k - 1) * d`.
    pub fn receptive_field(&self) -> usize {
        let per_tap = self.kernel - 1;
        // input conv, ConvLSTM gate conv, output conv
        let fixed = 3 * per_tap;
        let blocks: usize = self.dilations.iter().map(|d| self.block_repeats * per_tap * d).sum();
        1 + fixed + blocks
    }
}

/// ConvLSTM weights. Each gate convolves the concatenation `[x, h]`, which is
/// the same as separate input and hidden kernels summed. Peepholes are one
/// learnable scalar per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmWeights {
    pub input_gate: Conv,
    pub forget_gate: Conv,
    pub cell: Conv,
    pub output_gate: Conv,
    pub peephole_input: Tensor,
    pub peephole_forget: Tensor,
    pub peephole_output: Tensor,
}

impl ConvLstmWeights {
    fn build(channels: usize, kernel: usize, mut conv: impl FnMut() -> Conv, peephole: impl Fn() -> Tensor) -> Self {
        debug_assert!(kernel > 0 && channels > 0);
        Self {
            input_gate: conv(),
            forget_gate: conv(),
            cell: conv(),
            output_gate: conv(),
            peephole_input: peephole(),
            peephole_forget: peephole(),
            peephole_output: peephole(),
        }
    }

    pub fn channels(&self) -> usize {
        self.input_gate.out_channels()
    }
}

/// One `(dilated conv, attention, relu)` repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct ResLayer {
    pub conv: Conv,
    pub attention: Option<AttentionWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub dilation: usize,
    pub layers: Vec<ResLayer>,
}

/// The single weight set shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DerainWeights {
    pub input: Conv,
    pub lstm: ConvLstmWeights,
    pub blocks: Vec<ResBlock>,
    pub output: Conv,
}

impl DerainWeights {
    /// All-zero weights of the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.channels, cfg.kernel);
        Ok(Self {
            input: Conv::zeros(6, c, k),
            lstm: ConvLstmWeights::build(c, k, || Conv::zeros(2 * c, c, k), || Tensor::zeros([c])),
            blocks: cfg
                .dilations
                .iter()
                .map(|&dilation| ResBlock {
                    dilation,
                    layers: (0..cfg.block_repeats)
                        .map(|_| ResLayer {
                            conv: Conv::zeros(c, c, k),
                            attention: cfg
                                .attention
                                .has_weights()
                                .then(|| AttentionWeights::zeros(c, cfg.reduction)),
                        })
                        .collect(),
                })
                .collect(),
            output: Conv::zeros(c, 3, k),
        })
    }

    /// Seeded random initialisation (uniform `±1/sqrt(fan_in)`, peepholes zero).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, k) = (cfg.channels, cfg.kernel);
        let input = Conv::uniform(6, c, k, &mut rng);
        let lstm = ConvLstmWeights::build(c, k, || Conv::uniform(2 * c, c, k, &mut rng), || Tensor::zeros([c]));
        let mut blocks = Vec::with_capacity(cfg.dilations.len());
        for &dilation in &cfg.dilations {
            let mut layers = Vec::with_capacity(cfg.block_repeats);
            for _ in 0..cfg.block_repeats {
                let conv = Conv::uniform(c, c, k, &mut rng);
                let attention = cfg
                    .attention
                    .has_weights()
                    .then(|| AttentionWeights::init(c, cfg.reduction, &mut rng));
                layers.push(ResLayer { conv, attention });
            }
            blocks.push(ResBlock { dilation, layers });
        }
        let output = Conv::uniform(c, 3, k, &mut rng);
        Ok(Self {
            input,
            lstm,
            blocks,
            output,
        })
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        fn conv<'a>(out: &mut Vec<(String, &'a Tensor)>, name: String, c: &'a Conv) {
            out.push((format!("{name}.weight"), &c.weight));
            out.push((format!("{name}.bias"), &c.bias));
        }
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        conv(&mut out, "input".into(), &self.input);
        let l = &self.lstm;
        conv(&mut out, "lstm.input_gate".into(), &l.input_gate);
        conv(&mut out, "lstm.forget_gate".into(), &l.forget_gate);
        conv(&mut out, "lstm.cell".into(), &l.cell);
        conv(&mut out, "lstm.output_gate".into(), &l.output_gate);
        out.push(("lstm.peephole_input".into(), &l.peephole_input));
        out.push(("lstm.peephole_forget".into(), &l.peephole_forget));
        out.push(("lstm.peephole_output".into(), &l.peephole_output));
        for (b, block) in self.blocks.iter().enumerate() {
            for (r, layer) in block.layers.iter().enumerate() {
                let prefix = format!("blocks.{b}.{r}");
                conv(&mut out, format!("{prefix}.conv"), &layer.conv);
                if let Some(att) = &layer.attention {
                    out.push((format!("{prefix}.attention.reduce.weight"), &att.reduce.weight));
                    out.push((format!("{prefix}.attention.reduce.bias"), &att.reduce.bias));
                    out.push((format!("{prefix}.attention.expand.weight"), &att.expand.weight));
                    out.push((format!("{prefix}.attention.expand.bias"), &att.expand.bias));
                }
            }
        }
        conv(&mut out, "output".into(), &self.output);
        out
    }

    /// Mutable view of the tensors, same order as [`DerainWeights::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.input.weight, &mut self.input.bias];
        let l = &mut self.lstm;
        for c in [&mut l.input_gate, &mut l.forget_gate, &mut l.cell, &mut l.output_gate] {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut l.peephole_input);
        out.push(&mut l.peephole_forget);
        out.push(&mut l.peephole_output);
        for block in &mut self.blocks {
            for layer in &mut block.layers {
                out.push(&mut layer.conv.weight);
                out.push(&mut layer.conv.bias);
                if let Some(att) = &mut layer.attention {
                    out.push(&mut att.reduce.weight);
                    out.push(&mut att.reduce.bias);
                    out.push(&mut att.expand.weight);
                    out.push(&mut att.expand.bias);
                }
            }
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?;
        let mine = self.named_tensors();
        let theirs = expected.named_tensors();
        if mine.len() != theirs.len() {
            return Err(Error::ConfigMismatch(format!(
                "weights hold {} tensors, configuration expects {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ename, et)) in mine.iter().zip(&theirs) {
            if name != ename || t.shape() != et.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "`{name}` has shape {:?}, configuration expects `{ename}` with shape {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Exact number of learnable scalars for `cfg`. Independent of `stages`.
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let (c, k) = (cfg.channels, cfg.kernel);
    let conv = |i: usize, o: usize| i * o * k * k + o;
    let attention = if cfg.attention.has_weights() {
        let hidden = reduced_width(c, cfg.reduction);
        2 * c * hidden + hidden + c
    } else {
        0
    };
    let lstm = 4 * conv(2 * c, c) + 3 * c;
    let blocks = cfg.dilations.len() * cfg.block_repeats * (conv(c, c) + attention);
    Ok(conv(6, c) + lstm + blocks + conv(c, 3))
}

/// ConvLSTM hidden and cell maps.
#[derive(Clone, Copy)]
pub struct RecurrentState<'t> {
    pub hidden: Var<'t>,
    pub cell: Var<'t>,
}

impl<'t> RecurrentState<'t> {
    pub fn zeros(tape: &'t Tape, channels: usize, height: usize, width: usize) -> Self {
        Self {
            hidden: tape.fixed(Tensor::zeros([channels, height, width])),
            cell: tape.fixed(Tensor::zeros([channels, height, width])),
        }
    }
}

/// Result of one ConvLSTM step including the gate activations.
pub struct LstmStep<'t> {
    pub state: RecurrentState<'t>,
    pub input_gate: Var<'t>,
    pub forget_gate: Var<'t>,
    pub output_gate: Var<'t>,
}

fn peephole<'t>(c: Var<'t>, weight: &Tensor, binding: Binding) -> Var<'t> {
    c.mul_channels(binding.bind(c.tape(), weight))
}

/// One ConvLSTM update:
///
/// ```text
/// i = σ(W_i * [x, h] + w_ci ∘ c + b_i)
/// f = σ(W_f * [x, h] + w_cf ∘ c + b_f)
/// c' = f ∘ c + i ∘ tanh(W_c * [x, h] + b_c)
/// o = σ(W_o * [x, h] + w_co ∘ c' + b_o)
/// h' = o ∘ tanh(c')
/// ```
pub fn conv_lstm_step<'t>(
    x: Var<'t>,
    state: RecurrentState<'t>,
    w: &ConvLstmWeights,
    binding: Binding,
) -> Result<LstmStep<'t>> {
    let xs = x.shape();
    let c = w.channels();
    if xs.len() != 3 || xs[0] != c {
        return Err(Error::config(
            "model.channels",
            format!("ConvLSTM expects {c} input channels, got shape {xs:?}"),
        ));
    }
    if state.hidden.shape() != xs || state.cell.shape() != xs {
        return Err(Error::config(
            "model.channels",
            format!(
                "recurrent state {:?}/{:?} does not match input {xs:?}",
                state.hidden.shape(),
                state.cell.shape()
            ),
        ));
    }
    let opts = ConvOptions::same(w.input_gate.kernel(), 1);
    let xh = Var::concat_channels(&[x, state.hidden]);
    let i = (w.input_gate.forward(xh, opts, binding) + peephole(state.cell, &w.peephole_input, binding)).sigmoid();
    let f = (w.forget_gate.forward(xh, opts, binding) + peephole(state.cell, &w.peephole_forget, binding)).sigmoid();
    let cell = f * state.cell + i * w.cell.forward(xh, opts, binding).tanh();
    let o = (w.output_gate.forward(xh, opts, binding) + peephole(cell, &w.peephole_output, binding)).sigmoid();
    let hidden = o * cell.tanh();
    Ok(LstmStep {
        state: RecurrentState { hidden, cell },
        input_gate: i,
        forget_gate: f,
        output_gate: o,
    })
}

fn residual_block<'t>(x: Var<'t>, block: &ResBlock, cfg: &ModelConfig, binding: Binding) -> Result<Var<'t>> {
    let opts = ConvOptions::same(cfg.kernel, block.dilation);
    let mut y = x;
    for layer in &block.layers {
        let z = layer.conv.forward(y, opts, binding);
        y = apply_attention(cfg.attention, z, layer.attention.as_ref(), binding)?.relu();
    }
    Ok(x + y)
}

/// One progressive dilated unit: returns the stage output and updated state.
pub fn pdu_forward<'t>(
    prev: Var<'t>,
    rainy: Var<'t>,
    state: RecurrentState<'t>,
    w: &DerainWeights,
    cfg: &ModelConfig,
    binding: Binding,
) -> Result<(Var<'t>, RecurrentState<'t>)> {
    let (ps, rs) = (prev.shape(), rainy.shape());
    if ps != rs || ps.len() != 3 || ps[0] != 3 {
        return Err(Error::Input(format!(
            "previous estimate {ps:?} and rainy image {rs:?} must both be [3, H, W] of equal size"
        )));
    }
    let same = ConvOptions::same(cfg.kernel, 1);
    let features = w
        .input
        .forward(Var::concat_channels(&[prev, rainy]), same, binding)
        .relu();
    let step = conv_lstm_step(features, state, &w.lstm, binding)?;
    let mut y = step.state.hidden;
    for block in &w.blocks {
        y = residual_block(y, block, cfg, binding)?;
    }
    Ok((w.output.forward(y, same, binding), step.state))
}

/// Runs every stage on the tape and returns the stage outputs `x^1..x^T`.
pub fn derain_graph<'t>(
    rainy: Var<'t>,
    w: &DerainWeights,
    cfg: &ModelConfig,
    binding: Binding,
) -> Result<Vec<Var<'t>>> {
    cfg.validate()?;
    let shape = rainy.shape();
    let (h, wd) = match shape[..] {
        [3, h, w] => (h, w),
        _ => return Err(Error::Input(format!("rainy image must be [3, H, W], got {shape:?}"))),
    };
    let min = cfg.min_image_side();
    if h < min || wd < min {
        return Err(Error::TooSmall {
            what: "the derain network",
            min_height: min,
            min_width: min,
            height: h,
            width: wd,
        });
    }
    let mut state = RecurrentState::zeros(rainy.tape(), cfg.channels, h, wd);
    let mut prev = rainy;
    let mut outputs = Vec::with_capacity(cfg.stages);
    for stage in 1..=cfg.stages {
        let (x, s) = pdu_forward(prev, rainy, state, w, cfg, binding)?;
        if !x.value().all_finite() || !s.cell.value().all_finite() {
            return Err(Error::Numeric(format!("derain stage {stage}")));
        }
        outputs.push(x);
        prev = x;
        state = s;
    }
    Ok(outputs)
}

/// Final output plus every intermediate stage output.
#[derive(Clone, Debug, PartialEq)]
pub struct DerainOutput {
    /// `x^1 .. x^T`; the last one is the final output.
    pub intermediates: Vec<ImageTensor>,
}

impl DerainOutput {
    pub fn final_image(&self) -> &ImageTensor {
        self.intermediates.last().expect("at least one stage")
    }

    pub fn into_final(mut self) -> ImageTensor {
        self.intermediates.pop().expect("at least one stage")
    }
}

/// Derains one image (no gradients recorded for the weights).
pub fn derain(rainy: &ImageTensor, w: &DerainWeights, cfg: &ModelConfig) -> Result<DerainOutput> {
    if !rainy.is_finite() {
        return Err(Error::Numeric("rainy input".into()));
    }
    let tape = Tape::new();
    let outputs = derain_graph(tape.constant(rainy.tensor()), w, cfg, Binding::Frozen)?;
    Ok(DerainOutput {
        intermediates: outputs
            .into_iter()
            .map(|v| ImageTensor::from_tensor(v.value().as_ref().clone()))
            .collect(),
    })
}
