//! Measures the receptive field of one recurrent stage by back-propagating
//! from a single output pixel and compares it with the closed form.
//!
//! ```text
//! cargo run --release --example receptive_field
//! ```

use sapnet::attention::AttentionKind;
use sapnet::autograd::{Tape, Tensor};
use sapnet::derain::{pdu_forward, DerainWeights, ModelConfig, RecurrentState};
use sapnet::nn::Binding;

fn measured_extent(cfg: &ModelConfig, size: usize) -> sapnet::Result<usize> {
    let mut w = DerainWeights::init(cfg, 0)?;
    // positive weights keep every ReLU active so no path is cut
    for t in w.tensors_mut() {
        *t = t.map(|v| v.abs() * 0.05 + 1e-3);
    }
    let tape = Tape::new();
    let x = tape.input(Tensor::full([3, size, size], 0.5));
    let state = RecurrentState::zeros(&tape, cfg.channels, size, size);
    let (y, _) = pdu_forward(x, x, state, &w, cfg, Binding::Frozen)?;
    let mut probe = Tensor::zeros([3, size, size]);
    probe.set3(0, size / 2, size / 2, 1.0);
    let grads = tape.backward((y * tape.constant(&probe)).sum());
    let g = grads.wrt(x).expect("input gradient");
    let row = size / 2;
    Ok((0..size).filter(|&c| (0..3).any(|ch| g.at3(ch, row, c) != 0.0)).count())
}

fn main() -> sapnet::Result<()> {
    for dilations in [vec![1], vec![1, 2], vec![1, 2, 4], vec![1, 2, 4, 8, 16]] {
        let cfg = ModelConfig {
            channels: 4,
            dilations: dilations.clone(),
            attention: AttentionKind::None,
            ..ModelConfig::default()
        };
        let rf = cfg.receptive_field();
        let measured = measured_extent(&cfg, rf + 12)?;
        println!("dilations {dilations:?}: closed form {rf}, measured {measured}");
    }
    Ok(())
}
