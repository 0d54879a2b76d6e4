// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build a prompt-pair dataset and control vector from a scripted backend.
//!
//! `cargo run --example aca`
//!
//! Swap [`ScriptedBackend`] for `RemoteBackend` to drive a real endpoint.

use std::collections::BTreeSet;

use controllm::aca::{build_and_save, AcaOptions, ScriptedBackend};
use controllm::hub::Hub;
use controllm::model::fixtures::random_model;

fn main() -> controllm::Result<()> {
    let backend = ScriptedBackend::from_json(include_str!("data/aca_fixture.json"))?;
    let model = random_model(4, 32, 4, 5);
    let path = std::env::temp_dir().join("controllm-example-aca.clmv");
    let _ = std::fs::remove_file(&path);

    let options = AcaOptions {
        pair_count: 6,
        ..AcaOptions::default()
    };
    let out = build_and_save(
        "Conscientiousness",
        &backend,
        &model,
        &BTreeSet::from([2, 3]),
        &Hub::new(&path),
        &options,
    )?;

    println!("words: {:?}", out.seed.seed_words);
    println!("behaviors: {:?}", out.seed.seed_behaviors);
    print!("{}", out.pairs.to_jsonl());
    println!("stored {}", out.entry);
    Ok(())
}
