// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweep the steering strength and tabulate a metric per value.
//!
//! `cargo run --example sweep`

use std::sync::Arc;

use controllm::eval::{eval_language_modeling, EvalOptions};
use controllm::model::fixtures::{random_model, unembedding_vector};
use controllm::steering::{gamma_sweep, make_hooks, SteeringPlan};

fn main() -> controllm::Result<()> {
    let model = random_model(3, 32, 4, 21);
    let last = model.n_layers() - 1;
    let token = u32::from(b'e');
    let template = SteeringPlan::single(
        Arc::new(unembedding_vector(&model, token, "letter-e")),
        [last],
        1.0,
    );
    let gammas = [-2.0, -1.0, 0.0, 1.0, 2.0, 4.0];

    let prompt = model.encode("The sweep prompt")?;
    let logit = gamma_sweep(&template, &gammas, |plan| {
        let logits = model.forward(&prompt, &mut make_hooks(plan, &model)?)?;
        Ok(f64::from(logits.last_row()[token as usize]))
    })?;
    println!("logit of 'e'\n{}", logit.to_csv());

    let corpus = vec![model.encode("every evening the eel eats eggs")?];
    let ppl = gamma_sweep(&template, &gammas, |plan| {
        Ok(eval_language_modeling(&model, &corpus, plan, &EvalOptions::default())?.perplexity)
    })?;
    println!("perplexity\n{}", ppl.to_csv());
    Ok(())
}
