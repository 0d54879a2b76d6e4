// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build a small random model, save and reload it, then decode greedily.
//!
//! `cargo run --example generate`

use controllm::chat::{generate, render_prompt, Turn};
use controllm::model::fixtures::random_model;
use controllm::model::{load_model, HookSet};
use controllm::steering::SteeringPlan;

fn main() -> controllm::Result<()> {
    let dir = std::env::temp_dir();
    let (cfg, weights) = (
        dir.join("controllm-example.cfg"),
        dir.join("controllm-example.clmw"),
    );

    random_model(4, 32, 4, 7).save(&cfg, &weights)?;
    let model = load_model(&cfg, &weights)?;
    println!(
        "model {} ({} layers, hidden {})",
        model.model_id(),
        model.n_layers(),
        model.hidden_dim()
    );

    let prompt = model.encode("Once upon a time")?;
    let logits = model.forward(&prompt, &mut HookSet::new())?;
    println!(
        "forward: {} positions x {} logits",
        logits.seq_len(),
        logits.vocab_size()
    );

    let out = model.greedy_decode(&prompt, 16, &mut HookSet::new())?;
    println!("continuation: {:?}", model.decode(&out[prompt.len()..]));

    let chat = render_prompt(&[Turn::user("Hello there")]);
    let reply = generate(&model, &SteeringPlan::vanilla(), &chat, 16)?;
    println!("chat prompt {chat:?} -> {reply:?}");
    Ok(())
}
