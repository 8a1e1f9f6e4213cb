//! Compares the three channel-attention variants on one feature map and
//! shows the gate each produces.
//!
//! ```text
//! cargo run --example attention_blocks
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::attention::{apply_attention_tensor, attention_gate, AttentionKind, AttentionWeights};
use sapnet::autograd::{Tape, Tensor};
use sapnet::nn::Binding;

fn main() -> sapnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let channels = 8;
    let x = Tensor::from_fn([channels, 6, 6], |_| rng.random_range(-1.0..1.0));
    let weights = AttentionWeights::init(channels, 4, &mut rng);

    for kind in AttentionKind::ALL {
        let tape = Tape::new();
        let gate = attention_gate(kind, tape.constant(&x), Some(&weights), Binding::Frozen)?;
        let y = apply_attention_tensor(kind, &x, Some(&weights))?;
        let gate = match gate {
            Some(g) => g
                .value()
                .data()
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(" "),
            None => "(identity)".into(),
        };
        println!(
            "{:>4}: gate [{gate}]  |y|/|x| = {:.3}",
            kind.to_string(),
            y.norm_l2() / x.norm_l2()
        );
    }
    Ok(())
}
