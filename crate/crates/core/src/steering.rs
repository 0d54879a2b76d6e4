// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control vectors: extraction from contrastive prompt pairs and scaled
//! injection into the residual stream.
//!
//! Extraction reads the post-block residual `x_{l+1}` of each positive and
//! negative prompt at a chosen token position and averages the differences:
//!
//! ```text
//! V_l = (1/P) Σ_i ( a_l(positive_i) − a_l(negative_i) )
//! ```
//!
//! Injection rewrites the same residual as `x_{l+1} + γ·V_l` at every
//! position, then lets the forward pass continue.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookSet, ModelHandle, ModelId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub positive: String,
    pub negative: String,
}

impl PromptPair {
    pub fn new(
        trait_name: impl Into<String>,
        positive: impl Into<String>,
        negative: impl Into<String>,
    ) -> Result<Self> {
        let pair = Self {
            trait_name: trait_name.into(),
            positive: positive.into(),
            negative: negative.into(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::InvalidPair("prompt texts must be non-empty".into()));
        }
        if self.positive == self.negative {
            return Err(Error::InvalidPair(format!(
                "positive and negative texts are identical: {:?}",
                self.positive
            )));
        }
        Ok(())
    }

    /// Same pair with the roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            trait_name: self.trait_name.clone(),
            positive: self.negative.clone(),
            negative: self.positive.clone(),
        }
    }
}

/// Contrastive pairs that all describe one trait.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPairSet {
    pub trait_name: String,
    pub pairs: Vec<PromptPair>,
}

impl PromptPairSet {
    pub fn new(trait_name: impl Into<String>, pairs: Vec<PromptPair>) -> Result<Self> {
        let trait_name = trait_name.into();
        if let Some(p) = pairs.iter().find(|p| p.trait_name != trait_name) {
            return Err(Error::InvalidPair(format!(
                "pair tagged `{}` in a set for `{trait_name}`",
                p.trait_name
            )));
        }
        Ok(Self { trait_name, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            trait_name: self.trait_name.clone(),
            pairs: self.pairs.iter().map(PromptPair::swapped).collect(),
        }
    }

    /// One JSON object per line: `{"trait", "positive", "negative"}`.
    pub fn to_jsonl(&self) -> String {
        self.pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("plain strings serialise") + "\n")
            .collect()
    }

    /// Parse JSON Lines. The set takes its trait from the first pair.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: PromptPair = serde_json::from_str(line).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            pair.validate().map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            pairs.push(pair);
        }
        let trait_name = pairs
            .first()
            .map(|p| p.trait_name.clone())
            .unwrap_or_default();
        Self::new(trait_name, pairs)
    }
}

/// Token position whose activation represents a prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadPosition {
    /// The final token, i.e. the "Yes"/"No" answer.
    #[default]
    LastToken,
    MeanOverTokens,
}

impl ReadPosition {
    pub fn code(self) -> u8 {
        match self {
            Self::LastToken => 0,
            Self::MeanOverTokens => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::LastToken),
            1 => Some(Self::MeanOverTokens),
            _ => None,
        }
    }
}

impl fmt::Display for ReadPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LastToken => "last_token",
            Self::MeanOverTokens => "mean_over_tokens",
        })
    }
}

impl FromStr for ReadPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_token" | "last" => Ok(Self::LastToken),
            "mean_over_tokens" | "mean" => Ok(Self::MeanOverTokens),
            other => Err(Error::Other(format!("unknown read position `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionMeta {
    pub pair_count: u32,
    pub read_position: ReadPosition,
    /// Which activation was differenced. Always the post-block residual.
    pub source: String,
    pub created_unix: u64,
}

pub const SOURCE_POST_BLOCK_RESIDUAL: &str = "post_block_residual";

/// Per-layer steering directions for one trait, bound to one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub model_id: ModelId,
    pub hidden_dim: usize,
    pub layer_vectors: BTreeMap<usize, Vec<f32>>,
    pub meta: ExtractionMeta,
}

impl ControlVector {
    pub fn layers(&self) -> BTreeSet<usize> {
        self.layer_vectors.keys().copied().collect()
    }

    /// Euclidean norm of each layer's vector.
    pub fn norms(&self) -> BTreeMap<usize, f32> {
        self.layer_vectors
            .iter()
            .map(|(l, v)| {
                let n = v
                    .iter()
                    .map(|x| f64::from(*x) * f64::from(*x))
                    .sum::<f64>()
                    .sqrt();
                (*l, n as f32)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_vectors.is_empty() {
            return Err(Error::InvalidVector(format!(
                "`{}` has no layers",
                self.trait_name
            )));
        }
        for (l, v) in &self.layer_vectors {
            if v.len() != self.hidden_dim {
                return Err(Error::InvalidVector(format!(
                    "`{}` layer {l} has {} entries, expected {}",
                    self.trait_name,
                    v.len(),
                    self.hidden_dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidVector(format!(
                    "`{}` layer {l} has non-finite entries",
                    self.trait_name
                )));
            }
        }
        Ok(())
    }

    /// Reject vectors that do not belong to `handle`.
    pub fn check_model(&self, handle: &ModelHandle) -> Result<()> {
        if self.model_id != handle.model_id() {
            return Err(Error::ModelMismatch {
                trait_name: self.trait_name.clone(),
                vector_model: self.model_id.short(),
                target_model: handle.model_id().short(),
            });
        }
        if self.hidden_dim != handle.hidden_dim() {
            return Err(Error::HiddenMismatch {
                trait_name: self.trait_name.clone(),
                expected: handle.hidden_dim(),
                found: self.hidden_dim,
            });
        }
        if let Some(l) = self.layer_vectors.keys().find(|l| **l >= handle.n_layers()) {
            return Err(Error::LayerOutOfRange {
                layer: *l,
                n_layers: handle.n_layers(),
            });
        }
        Ok(())
    }
}

/// Default injection layer: `⌊2n/3⌋`, kept inside `[0, n)`.
pub fn default_layer(n_layers: usize) -> usize {
    (2 * n_layers / 3).min(n_layers.saturating_sub(1))
}

fn read_activation(state: &crate::model::ResidualState, position: ReadPosition) -> Vec<f64> {
    match position {
        ReadPosition::LastToken => state
            .row(state.seq_len() - 1)
            .iter()
            .map(|v| f64::from(*v))
            .collect(),
        ReadPosition::MeanOverTokens => {
            let mut acc = vec![0.0f64; state.hidden_dim()];
            for r in 0..state.seq_len() {
                for (a, v) in acc.iter_mut().zip(state.row(r)) {
                    *a += f64::from(*v);
                }
            }
            let n = state.seq_len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
    }
}

/// Post-block residuals of `text` at each of `layers`, read at `position`.
pub fn layer_activations(
    handle: &ModelHandle,
    text: &str,
    layers: &BTreeSet<usize>,
    position: ReadPosition,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let tokens = handle.encode(text)?;
    let captured = std::cell::RefCell::new(BTreeMap::new());
    let mut hooks = HookSet::new();
    for &l in layers {
        let captured = &captured;
        hooks.add(l, move |s| {
            captured
                .borrow_mut()
                .insert(l, read_activation(s, position));
        });
    }
    handle.forward(&tokens, &mut hooks)?;
    drop(hooks);
    Ok(captured.into_inner())
}

/// Mean activation difference between the positive and negative prompts of
/// `pair_set`, for each requested layer.
pub fn extract_control_vector(
    handle: &ModelHandle,
    pair_set: &PromptPairSet,
    layers: &BTreeSet<usize>,
    read_position: ReadPosition,
) -> Result<ControlVector> {
    if pair_set.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    if layers.is_empty() {
        return Err(Error::NoLayers);
    }
    if let Some(l) = layers.iter().find(|l| **l >= handle.n_layers()) {
        return Err(Error::LayerOutOfRange {
            layer: *l,
            n_layers: handle.n_layers(),
        });
    }
    let h = handle.hidden_dim();
    let mut sums: BTreeMap<usize, Vec<f64>> = layers.iter().map(|l| (*l, vec![0.0; h])).collect();
    for pair in &pair_set.pairs {
        let pos = layer_activations(handle, &pair.positive, layers, read_position)?;
        let neg = layer_activations(handle, &pair.negative, layers, read_position)?;
        for (l, acc) in sums.iter_mut() {
            for ((a, p), n) in acc.iter_mut().zip(&pos[l]).zip(&neg[l]) {
                *a += p - n;
            }
        }
    }
    let p = pair_set.len() as f64;
    let layer_vectors = sums
        .into_iter()
        .map(|(l, acc)| (l, acc.into_iter().map(|a| (a / p) as f32).collect()))
        .collect();
    let vector = ControlVector {
        trait_name: pair_set.trait_name.clone(),
        model_id: handle.model_id(),
        hidden_dim: h,
        layer_vectors,
        meta: ExtractionMeta {
            pair_count: pair_set.len() as u32,
            read_position,
            source: SOURCE_POST_BLOCK_RESIDUAL.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
    };
    vector.validate()?;
    Ok(vector)
}

#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub control: Arc<ControlVector>,
    pub layers: BTreeSet<usize>,
    pub gamma: f32,
}

/// Serializable summary of a plan entry, used in reports and API responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntrySummary {
    #[serde(rename = "trait")]
    pub trait_name: String,
    pub layers: Vec<usize>,
    pub gamma: f32,
}

/// Ordered `(control vector, layers, γ)` entries applied during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct SteeringPlan {
    pub entries: Vec<PlanEntry>,
}

impl SteeringPlan {
    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn single(
        control: Arc<ControlVector>,
        layers: impl IntoIterator<Item = usize>,
        gamma: f32,
    ) -> Self {
        Self::vanilla().with_entry(control, layers, gamma)
    }

    pub fn with_entry(
        mut self,
        control: Arc<ControlVector>,
        layers: impl IntoIterator<Item = usize>,
        gamma: f32,
    ) -> Self {
        self.entries.push(PlanEntry {
            control,
            layers: layers.into_iter().collect(),
            gamma,
        });
        self
    }

    pub fn is_vanilla(&self) -> bool {
        self.entries.is_empty()
    }

    /// The same plan with every entry's γ replaced.
    pub fn with_gamma(&self, gamma: f32) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| PlanEntry { gamma, ..e.clone() })
                .collect(),
        }
    }

    pub fn model_id(&self) -> Option<ModelId> {
        self.entries.first().map(|e| e.control.model_id)
    }

    pub fn summary(&self) -> Vec<PlanEntrySummary> {
        self.entries
            .iter()
            .map(|e| PlanEntrySummary {
                trait_name: e.control.trait_name.clone(),
                layers: e.layers.iter().copied().collect(),
                gamma: e.gamma,
            })
            .collect()
    }

    pub fn validate(&self, handle: &ModelHandle) -> Result<()> {
        for e in &self.entries {
            e.control.check_model(handle)?;
            if !e.gamma.is_finite() {
                return Err(Error::NonFiniteGamma(f64::from(e.gamma)));
            }
            if let Some(l) = e
                .layers
                .iter()
                .find(|l| !e.control.layer_vectors.contains_key(l))
            {
                return Err(Error::MissingLayer {
                    trait_name: e.control.trait_name.clone(),
                    layer: *l,
                });
            }
        }
        Ok(())
    }
}

/// Concatenate plans in order. All plans must target the same model.
pub fn compose(plans: &[SteeringPlan]) -> Result<SteeringPlan> {
    let mut out = SteeringPlan::vanilla();
    let mut model: Option<ModelId> = None;
    for plan in plans {
        for e in &plan.entries {
            match model {
                Some(m) if m != e.control.model_id => {
                    return Err(Error::ModelMismatch {
                        trait_name: e.control.trait_name.clone(),
                        vector_model: e.control.model_id.short(),
                        target_model: m.short(),
                    })
                }
                _ => model = Some(e.control.model_id),
            }
            out.entries.push(e.clone());
        }
    }
    Ok(out)
}

/// Hooks that add `γ·V_l` to every position's residual at each planned layer.
/// Entries sharing a layer apply in plan order.
pub fn make_hooks(plan: &SteeringPlan, handle: &ModelHandle) -> Result<HookSet<'static>> {
    plan.validate(handle)?;
    let mut hooks = HookSet::new();
    for e in &plan.entries {
        for &l in &e.layers {
            let control = Arc::clone(&e.control);
            let gamma = e.gamma;
            hooks.add(l, move |state| {
                state.add_scaled(&control.layer_vectors[&l], gamma)
            });
        }
    }
    Ok(hooks)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f32,
    pub metric: Option<f64>,
    pub status: SweepStatus,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "gamma,metric,status";

    pub fn succeeded(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == SweepStatus::Ok)
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
            let status = match r.status {
                SweepStatus::Ok => "ok",
                SweepStatus::Failed(_) => "failed",
            };
            out.push_str(&format!("{},{metric},{status}\n", r.gamma));
        }
        out
    }
}

/// Evaluate `eval` once per γ, substituting γ into every entry of `template`.
/// A failing row is recorded and the sweep carries on.
pub fn gamma_sweep(
    template: &SteeringPlan,
    gammas: &[f32],
    mut eval: impl FnMut(&SteeringPlan) -> Result<f64>,
) -> Result<SweepTable> {
    if gammas.is_empty() {
        return Err(Error::Other("gamma list is empty".into()));
    }
    let rows = gammas
        .iter()
        .map(|&gamma| match eval(&template.with_gamma(gamma)) {
            Ok(m) => SweepRow {
                gamma,
                metric: Some(m),
                status: SweepStatus::Ok,
            },
            Err(e) => SweepRow {
                gamma,
                metric: None,
                status: SweepStatus::Failed(e.to_string()),
            },
        })
        .collect();
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::random_model;

    fn pairs(n: usize) -> PromptPairSet {
        let qs = [
            "You are always prepared?",
            "You like parties?",
            "You worry a lot?",
            "You keep promises?",
        ];
        PromptPairSet::new(
            "Trait",
            (0..n)
                .map(|i| {
                    let q = qs[i % qs.len()];
                    PromptPair::new("Trait", format!("{q} Yes"), format!("{q} No")).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pair_validation() {
        assert!(PromptPair::new("t", "a", "a").is_err());
        assert!(PromptPair::new("t", "", "a").is_err());
        let p = PromptPair::new("t", "a", "b").unwrap();
        assert!(PromptPairSet::new("u", vec![p]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let set = pairs(3);
        assert_eq!(PromptPairSet::from_jsonl(&set.to_jsonl()).unwrap(), set);
        let err = PromptPairSet::from_jsonl("{\"trait\":\"t\"}\n").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }));
    }

    #[test]
    fn identical_texts_give_zero_vector() {
        let m = random_model(2, 8, 2, 1);
        let set = PromptPairSet {
            trait_name: "Same".into(),
            pairs: vec![PromptPair {
                trait_name: "Same".into(),
                positive: "hello".into(),
                negative: "hello".into(),
            }],
        };
        let v = extract_control_vector(&m, &set, &[0, 1].into(), ReadPosition::LastToken).unwrap();
        assert!(v.layer_vectors.values().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn swap_negates_exactly() {
        let m = random_model(3, 16, 4, 2);
        let set = pairs(4);
        for pos in [ReadPosition::LastToken, ReadPosition::MeanOverTokens] {
            let a = extract_control_vector(&m, &set, &[0, 2].into(), pos).unwrap();
            let b = extract_control_vector(&m, &set.swapped(), &[0, 2].into(), pos).unwrap();
            for (l, va) in &a.layer_vectors {
                let vb = &b.layer_vectors[l];
                assert!(va.iter().zip(vb).all(|(x, y)| *x == -*y));
            }
        }
    }

    #[test]
    fn extraction_errors() {
        let m = random_model(2, 8, 2, 3);
        let empty = PromptPairSet::new("t", vec![]).unwrap();
        assert!(matches!(
            extract_control_vector(&m, &empty, &[0].into(), ReadPosition::LastToken),
            Err(Error::EmptyPairSet)
        ));
        assert!(matches!(
            extract_control_vector(&m, &pairs(1), &[5].into(), ReadPosition::LastToken),
            Err(Error::LayerOutOfRange { layer: 5, .. })
        ));
        assert!(matches!(
            extract_control_vector(&m, &pairs(1), &BTreeSet::new(), ReadPosition::LastToken),
            Err(Error::NoLayers)
        ));
    }

    #[test]
    fn foreign_vector_rejected_before_compute() {
        let a = random_model(2, 8, 2, 4);
        let b = random_model(2, 8, 2, 5);
        let v = Arc::new(
            extract_control_vector(&a, &pairs(1), &[1].into(), ReadPosition::LastToken).unwrap(),
        );
        let plan = SteeringPlan::single(v, [1], 1.0);
        assert!(matches!(
            make_hooks(&plan, &b),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn plan_layer_must_exist_in_vector() {
        let m = random_model(2, 8, 2, 4);
        let v = Arc::new(
            extract_control_vector(&m, &pairs(1), &[1].into(), ReadPosition::LastToken).unwrap(),
        );
        let plan = SteeringPlan::single(v.clone(), [0], 1.0);
        assert!(matches!(
            make_hooks(&plan, &m),
            Err(Error::MissingLayer { layer: 0, .. })
        ));
        let plan = SteeringPlan::single(v, [1], f32::NAN);
        assert!(matches!(
            make_hooks(&plan, &m),
            Err(Error::NonFiniteGamma(_))
        ));
    }

    #[test]
    fn compose_rejects_mixed_models() {
        let a = random_model(2, 8, 2, 6);
        let b = random_model(2, 8, 2, 7);
        let va = Arc::new(
            extract_control_vector(&a, &pairs(1), &[1].into(), ReadPosition::LastToken).unwrap(),
        );
        let vb = Arc::new(
            extract_control_vector(&b, &pairs(1), &[1].into(), ReadPosition::LastToken).unwrap(),
        );
        let p1 = SteeringPlan::single(va, [1], 1.0);
        let p2 = SteeringPlan::single(vb, [1], 1.0);
        assert!(compose(&[p1.clone(), p2]).is_err());
        assert!(compose(&[]).unwrap().is_vanilla());
        assert_eq!(
            compose(std::slice::from_ref(&p1)).unwrap().summary(),
            p1.summary()
        );
    }

    #[test]
    fn default_layer_is_two_thirds_depth() {
        assert_eq!(default_layer(1), 0);
        assert_eq!(default_layer(3), 2);
        assert_eq!(default_layer(4), 2);
        assert_eq!(default_layer(80), 53);
    }

    #[test]
    fn sweep_records_failures_without_aborting() {
        let table = gamma_sweep(&SteeringPlan::vanilla(), &[1.0, 2.0, 3.0], |_| Ok(1.0)).unwrap();
        assert_eq!(table.succeeded(), 3);
        let mut i = 0;
        let table = gamma_sweep(&SteeringPlan::vanilla(), &[1.0, 2.0, 3.0], |_| {
            i += 1;
            if i == 2 {
                Err(Error::Other("boom".into()))
            } else {
                Ok(i as f64)
            }
        })
        .unwrap();
        assert_eq!(
            table.to_csv(),
            "gamma,metric,status\n1,1,ok\n2,,failed\n3,3,ok\n"
        );
        assert!(gamma_sweep(&SteeringPlan::vanilla(), &[], |_| Ok(0.0)).is_err());
    }
}
