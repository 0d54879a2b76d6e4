// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inject control vectors during decoding and compose several plans.
//!
//! `cargo run --example steer`

use std::sync::Arc;

use controllm::chat::generate;
use controllm::model::fixtures::{random_model, unembedding_vector};
use controllm::steering::{compose, make_hooks, SteeringPlan};

fn main() -> controllm::Result<()> {
    let model = random_model(4, 32, 4, 11);
    let last = model.n_layers() - 1;
    let target = u32::from(b'!');
    let bang = Arc::new(unembedding_vector(&model, target, "exclaim"));

    let prompt = model.encode("Steer me")?;
    for gamma in [-1.0, 0.0, 1.0, 2.0] {
        let plan = SteeringPlan::single(Arc::clone(&bang), [last], gamma);
        let logits = model.forward(&prompt, &mut make_hooks(&plan, &model)?)?;
        let text = generate(&model, &plan, "Steer me", 8)?;
        println!(
            "gamma {gamma:>4}: logit('!') = {:>8.3}  {text:?}",
            logits.last_row()[target as usize]
        );
    }

    let question = Arc::new(unembedding_vector(&model, u32::from(b'?'), "question"));
    let plan = compose(&[
        SteeringPlan::single(bang, [last], 1.5),
        SteeringPlan::single(question, [last], -0.5),
    ])?;
    for entry in plan.summary() {
        println!("entry {entry:?}");
    }
    println!("composed: {:?}", generate(&model, &plan, "Steer me", 8)?);
    Ok(())
}
