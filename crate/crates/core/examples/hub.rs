// SPDX-License-Identifier: MIT OR Apache-2.0

//! Store, list, verify and export control vectors in a hub file.
//!
//! `cargo run --example hub`

use controllm::hub::Hub;
use controllm::model::fixtures::{random_model, unembedding_vector};

fn main() -> controllm::Result<()> {
    let model = random_model(3, 16, 2, 3);
    let path = std::env::temp_dir().join("controllm-example-hub.clmv");
    let _ = std::fs::remove_file(&path);
    let hub = Hub::new(&path);

    for (name, token) in [("Openness", b'o'), ("Agreeableness", b'a')] {
        hub.save(&unembedding_vector(&model, u32::from(token), name), false)?;
    }
    // Saving an existing trait again needs `replace`.
    let again = unembedding_vector(&model, u32::from(b'o'), "Openness");
    println!(
        "duplicate without replace: {}",
        hub.save(&again, false).unwrap_err()
    );
    hub.save(&again, true)?;

    for entry in hub.list()? {
        println!(
            "{:<14} layers {:?} at offset {}",
            entry.trait_name, entry.layers, entry.offset
        );
    }
    println!("verified {} entries", hub.verify()?);
    let back = hub.load("Agreeableness", model.model_id())?;
    println!("loaded {} with norms {:?}", back.trait_name, back.norms());
    println!(
        "{}",
        serde_json::to_string_pretty(&hub.export_json()?).unwrap_or_default()
    );
    Ok(())
}
