// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run the HTTP service on an ephemeral port and drive one chat turn.
//!
//! `cargo run --example service`

use std::io::{BufRead, BufReader};
use std::sync::{mpsc, Arc};

use controllm::hub::Hub;
use controllm::model::fixtures::{random_model, unembedding_vector};
use controllm::service::{serve_blocking, AppState, ServiceConfig};

fn main() -> controllm::Result<()> {
    let model = random_model(4, 32, 4, 13);
    let hub_path = std::env::temp_dir().join("controllm-example-service.clmv");
    let _ = std::fs::remove_file(&hub_path);
    let hub = Hub::new(&hub_path);
    hub.save(
        &unembedding_vector(&model, u32::from(b'o'), "Openness"),
        false,
    )?;

    let state = AppState::new(Some(Arc::new(model)), hub, ServiceConfig::default());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        serve_blocking("127.0.0.1:0".parse().unwrap(), state, |addr| {
            tx.send(addr).unwrap()
        })
    });
    let base = format!("http://{}", rx.recv().expect("server start"));
    println!("listening on {base}");

    let client = reqwest::blocking::Client::new();
    let get =
        |url: String| -> serde_json::Value { client.get(url).send().unwrap().json().unwrap() };
    println!("health: {}", get(format!("{base}/health")));
    println!("traits: {}", get(format!("{base}/traits")));

    let session: serde_json::Value = client
        .post(format!("{base}/sessions"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let id = session["session_id"].as_str().unwrap();
    let plan = serde_json::json!([{ "trait": "Openness", "gamma": 2.0 }]);
    let resp = client
        .put(format!("{base}/sessions/{id}/plan"))
        .json(&plan)
        .send()
        .unwrap();
    println!("plan: {}", resp.text().unwrap());

    let stream = client
        .post(format!("{base}/sessions/{id}/messages"))
        .json(&serde_json::json!({ "text": "Tell me something new", "max_new": 24 }))
        .send()
        .unwrap();
    for line in BufReader::new(stream).lines() {
        let line = line.unwrap();
        if let Some(event) = line.strip_prefix("data: ") {
            println!("event {event}");
        }
    }
    println!("session: {}", get(format!("{base}/sessions/{id}")));
    Ok(())
}
