// SPDX-License-Identifier: MIT OR Apache-2.0

//! Extract a control vector from contrastive prompt pairs and store it.
//!
//! `cargo run --example extract`

use std::collections::BTreeSet;

use controllm::hub::Hub;
use controllm::model::fixtures::random_model;
use controllm::steering::{extract_control_vector, PromptPair, PromptPairSet, ReadPosition};

fn main() -> controllm::Result<()> {
    let model = random_model(4, 32, 4, 7);
    let pairs = [
        ("You enjoy parties? Yes", "You enjoy parties? No"),
        ("You talk to strangers? Yes", "You talk to strangers? No"),
        ("You like crowds? Yes", "You like crowds? No"),
    ]
    .into_iter()
    .map(|(p, n)| PromptPair::new("Extraversion", p, n))
    .collect::<controllm::Result<Vec<_>>>()?;
    let set = PromptPairSet::new("Extraversion", pairs)?;
    print!("{}", set.to_jsonl());

    let layers = BTreeSet::from([1, 2, 3]);
    let vector = extract_control_vector(&model, &set, &layers, ReadPosition::LastToken)?;
    for (layer, norm) in vector.norms() {
        println!("layer {layer}: |v| = {norm:.4}");
    }

    let path = std::env::temp_dir().join("controllm-example-extract.clmv");
    let _ = std::fs::remove_file(&path);
    let id = Hub::new(&path).save(&vector, false)?;
    println!("saved {id} to {}", path.display());
    Ok(())
}
