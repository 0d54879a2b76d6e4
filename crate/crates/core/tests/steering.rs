// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::sync::Arc;

use common::{max_abs_diff, random_vector, record_rows};
use controllm::model::fixtures::{random_model, TINY_VOCAB};
use controllm::model::HookSet;
use controllm::steering::{
    compose, default_layer, extract_control_vector, gamma_sweep, make_hooks, PromptPair,
    PromptPairSet, ReadPosition, SteeringPlan, SweepStatus,
};
use controllm::Error;

const TEXTS: [(&str, &str); 8] = [
    ("I love meeting people", "I avoid meeting people"),
    ("Parties are fun", "Parties are tiring"),
    ("Talk to me", "Leave me alone"),
    ("Let us go out", "Let us stay in"),
    ("Crowds energise me", "Crowds drain me"),
    ("I speak first", "I speak last"),
    ("Call me tonight", "Text me later"),
    ("Yes, join us!", "No, not today."),
];

fn pair_set(p: usize) -> PromptPairSet {
    let pairs = TEXTS[..p]
        .iter()
        .map(|(a, b)| PromptPair::new("Extraversion", *a, *b).unwrap())
        .collect();
    PromptPairSet::new("Extraversion", pairs).unwrap()
}

/// Independent average of recorded residual differences.
fn oracle(
    handle: &controllm::model::ModelHandle,
    set: &PromptPairSet,
    layer: usize,
    pos: ReadPosition,
) -> Vec<f32> {
    let h = handle.hidden_dim();
    let mut acc = vec![0.0f64; h];
    let read = |text: &str| -> Vec<f64> {
        let rows = record_rows(handle, &handle.encode(text).unwrap(), layer);
        match pos {
            ReadPosition::LastToken => rows.last().unwrap().iter().map(|v| *v as f64).collect(),
            ReadPosition::MeanOverTokens => (0..h)
                .map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / rows.len() as f64)
                .collect(),
        }
    };
    for pair in &set.pairs {
        let (p, n) = (read(&pair.positive), read(&pair.negative));
        for j in 0..h {
            acc[j] += p[j] - n[j];
        }
    }
    acc.iter().map(|a| (a / set.len() as f64) as f32).collect()
}

#[test]
fn extraction_matches_recorded_average() {
    let m = random_model(3, 16, 2, 11);
    for p in [1, 2, 8] {
        for pos in [ReadPosition::LastToken, ReadPosition::MeanOverTokens] {
            let set = pair_set(p);
            let v = extract_control_vector(&m, &set, &BTreeSet::from([0, 2]), pos).unwrap();
            assert_eq!(v.meta.pair_count as usize, p);
            for l in [0, 2] {
                let d = max_abs_diff(&v.layer_vectors[&l], &oracle(&m, &set, l, pos));
                assert!(d <= 1e-6, "P={p} layer {l}: {d}");
            }
        }
    }
}

#[test]
fn role_swap_negates_exactly() {
    let m = random_model(2, 8, 2, 3);
    let layers = BTreeSet::from([0, 1]);
    let set = pair_set(8);
    let v = extract_control_vector(&m, &set, &layers, ReadPosition::LastToken).unwrap();
    let w = extract_control_vector(&m, &set.swapped(), &layers, ReadPosition::LastToken).unwrap();
    for l in layers {
        let neg: Vec<f32> = v.layer_vectors[&l].iter().map(|x| -x).collect();
        assert_eq!(w.layer_vectors[&l], neg);
    }
}

#[test]
fn identical_prompts_are_rejected() {
    assert!(matches!(
        PromptPair::new("T", "same", "same"),
        Err(Error::InvalidPair(_))
    ));
}

#[test]
fn extraction_errors() {
    let m = random_model(2, 8, 2, 4);
    let empty = PromptPairSet::new("T", vec![]).unwrap();
    assert!(matches!(
        extract_control_vector(&m, &empty, &BTreeSet::from([0]), ReadPosition::LastToken),
        Err(Error::EmptyPairSet)
    ));
    assert!(matches!(
        extract_control_vector(&m, &pair_set(1), &BTreeSet::new(), ReadPosition::LastToken),
        Err(Error::NoLayers)
    ));
    assert!(matches!(
        extract_control_vector(
            &m,
            &pair_set(1),
            &BTreeSet::from([2]),
            ReadPosition::LastToken
        ),
        Err(Error::LayerOutOfRange {
            layer: 2,
            n_layers: 2
        })
    ));
}

#[test]
fn three_entries_add_linearly_at_the_injection_site() {
    let m = random_model(3, 16, 4, 21);
    let tokens = m.encode("linear check").unwrap();
    let layer = 1;
    let vs: Vec<_> = (0..3)
        .map(|k| Arc::new(random_vector(&m, &format!("t{k}"), &[layer], 100 + k)))
        .collect();
    let gammas = [0.7f32, -1.3, 2.5];
    let plan = vs
        .iter()
        .zip(gammas)
        .fold(SteeringPlan::vanilla(), |p, (v, g)| {
            p.with_entry(Arc::clone(v), [layer], g)
        });

    let vanilla = record_rows(&m, &tokens, layer);
    let steered = RefCell::new(Vec::new());
    let mut hooks: HookSet<'_> = make_hooks(&plan, &m).unwrap();
    hooks.add(layer, |s| {
        *steered.borrow_mut() = (0..s.seq_len()).map(|i| s.row(i).to_vec()).collect()
    });
    m.forward(&tokens, &mut hooks).unwrap();
    drop(hooks);
    let steered = steered.into_inner();

    for (row_v, row_s) in vanilla.iter().zip(&steered) {
        let expected: Vec<f32> = (0..m.hidden_dim())
            .map(|j| {
                let mut x = row_v[j] as f64;
                for (v, g) in vs.iter().zip(gammas) {
                    x += g as f64 * v.layer_vectors[&layer][j] as f64;
                }
                x as f32
            })
            .collect();
        assert!(max_abs_diff(row_s, &expected) <= 1e-6);
    }
}

#[test]
fn gamma_zero_plan_is_vanilla() {
    let m = random_model(3, 8, 2, 8);
    let v = Arc::new(random_vector(&m, "t", &[0, 1, 2], 1));
    let plan = SteeringPlan::single(v, [0, 1, 2], 0.0);
    let prompt = m.encode("hello").unwrap();
    let a = m.greedy_decode(&prompt, 20, &mut HookSet::new()).unwrap();
    let b = m
        .greedy_decode(&prompt, 20, &mut make_hooks(&plan, &m).unwrap())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn composition_concatenates_and_rejects_foreign_models() {
    let m = random_model(2, 8, 2, 8);
    let other = random_model(2, 8, 2, 9);
    let a = SteeringPlan::single(Arc::new(random_vector(&m, "a", &[0], 1)), [0], 1.0);
    let b = SteeringPlan::single(Arc::new(random_vector(&m, "b", &[1], 2)), [1], -1.0);
    let ab = compose(&[a.clone(), b.clone()]).unwrap();
    let names: Vec<_> = ab.summary().into_iter().map(|s| s.trait_name).collect();
    assert_eq!(names, ["a", "b"]);
    let foreign = SteeringPlan::single(Arc::new(random_vector(&other, "c", &[0], 3)), [0], 1.0);
    assert!(matches!(
        compose(&[a, foreign.clone()]),
        Err(Error::ModelMismatch { .. })
    ));
    assert!(matches!(
        make_hooks(&foreign, &m),
        Err(Error::ModelMismatch { .. })
    ));
}

#[test]
fn plan_validation_errors() {
    let m = random_model(2, 8, 2, 8);
    let v = Arc::new(random_vector(&m, "a", &[0], 1));
    assert!(matches!(
        make_hooks(&SteeringPlan::single(Arc::clone(&v), [1], 1.0), &m),
        Err(Error::MissingLayer { layer: 1, .. })
    ));
    assert!(matches!(
        make_hooks(&SteeringPlan::single(v, [0], f32::NAN), &m),
        Err(Error::NonFiniteGamma(_))
    ));
}

#[test]
fn sweep_rows_follow_input_order_and_record_failures() {
    let m = random_model(2, 8, 2, 8);
    let v = Arc::new(random_vector(&m, "a", &[1], 1));
    let template = SteeringPlan::single(v, [1], 0.0);
    let table = gamma_sweep(&template, &[2.0, -1.0, 0.5], |p| {
        let g = p.entries[0].gamma;
        if g < 0.0 {
            Err(Error::Other("boom".into()))
        } else {
            Ok(g as f64 * 10.0)
        }
    })
    .unwrap();
    assert_eq!(
        table.rows.iter().map(|r| r.gamma).collect::<Vec<_>>(),
        [2.0, -1.0, 0.5]
    );
    assert!(matches!(table.rows[1].status, SweepStatus::Failed(_)));
    assert_eq!(table.succeeded(), 2);
    assert_eq!(
        table.to_csv(),
        "gamma,metric,status\n2,20,ok\n-1,,failed\n0.5,5,ok\n"
    );
}

#[test]
fn default_layer_is_two_thirds_deep() {
    assert_eq!(default_layer(1), 0);
    assert_eq!(default_layer(3), 2);
    assert_eq!(default_layer(12), 8);
    const { assert!(TINY_VOCAB > 256) };
}
