//! Uniform addressing, masking, and delta accounting over the encoder's
//! trainable parameters.
//!
//! Weights are addressed by [`WeightCoordinate`] — a stable layer ordinal
//! plus a flat offset into that tensor — independent of the concrete model
//! behind the [`ParamModel`] trait. [`CriticalWeightSet`] tracks which
//! coordinates the lock may touch under its L0 budget, and
//! [`apply_masked_update`] guarantees everything outside the set stays
//! bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

/// What a parameter tensor is, for eligibility decisions.
///
/// Normalization running statistics shift with data rather than with the
/// lock, so they are excluded from selection and ΔW accounting by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormStat,
}

impl ParamKind {
    pub fn eligible_by_default(self) -> bool {
        !matches!(self, ParamKind::NormStat)
    }
}

/// A model exposing named, ordinal-addressable parameter tensors.
///
/// Tensors must be in standard (row-major, contiguous) layout; the flat
/// index of a [`WeightCoordinate`] addresses that layout.
pub trait ParamModel<F: Scalar> {
    fn param_count(&self) -> usize;
    fn param_name(&self, id: usize) -> &str;
    fn param_kind(&self, id: usize) -> ParamKind;
    fn param(&self, id: usize) -> ArrayViewD<'_, F>;
    fn param_mut(&mut self, id: usize) -> ArrayViewMutD<'_, F>;

    fn param_names(&self) -> Vec<String> {
        (0..self.param_count()).map(|i| self.param_name(i).to_string()).collect()
    }

    /// Deep copy of every parameter tensor, ordinal order.
    fn snapshot(&self) -> Vec<ArrayD<F>> {
        (0..self.param_count()).map(|i| self.param(i).to_owned()).collect()
    }
}

/// Address of one scalar weight: `(layer ordinal, flat offset)`.
///
/// Ordering is lexicographic on that pair, which is also the deterministic
/// tie-break order used during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightCoordinate {
    pub layer: usize,
    pub index: usize,
}

impl WeightCoordinate {
    pub fn new(layer: usize, index: usize) -> Self {
        WeightCoordinate { layer, index }
    }
}

/// The set of coordinates the lock is allowed to update, with L0 budget
/// accounting and the round each member was added.
#[derive(Debug, Clone)]
pub struct CriticalWeightSet {
    coords: BTreeSet<WeightCoordinate>,
    round_added: BTreeMap<WeightCoordinate, u32>,
    budget: usize,
    last_round: Option<u32>,
}

impl CriticalWeightSet {
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::validation("weight budget must be positive"));
        }
        Ok(CriticalWeightSet {
            coords: BTreeSet::new(),
            round_added: BTreeMap::new(),
            budget,
            last_round: None,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.coords.len()
    }

    pub fn contains(&self, c: &WeightCoordinate) -> bool {
        self.coords.contains(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = &WeightCoordinate> {
        self.coords.iter()
    }

    pub fn round_of(&self, c: &WeightCoordinate) -> Option<u32> {
        self.round_added.get(c).copied()
    }

    /// Add one round's worth of fresh coordinates.
    ///
    /// Rejects duplicates, budget overflow, and non-monotone round stamps,
    /// which together keep `|set| = Σ per-round additions` exact.
    pub fn add_round(
        &mut self,
        coords: impl IntoIterator<Item = WeightCoordinate>,
        round: u32,
    ) -> Result<usize> {
        if let Some(last) = self.last_round {
            if round < last {
                return Err(Error::invariant(format!(
                    "round {round} precedes already-recorded round {last}"
                )));
            }
        }
        let fresh: Vec<WeightCoordinate> = coords.into_iter().collect();
        for c in &fresh {
            if self.coords.contains(c) {
                return Err(Error::invariant(format!(
                    "coordinate (layer {}, index {}) already selected",
                    c.layer, c.index
                )));
            }
        }
        let dedup: BTreeSet<&WeightCoordinate> = fresh.iter().collect();
        if dedup.len() != fresh.len() {
            return Err(Error::invariant("duplicate coordinates within one round"));
        }
        if self.coords.len() + fresh.len() > self.budget {
            return Err(Error::invariant(format!(
                "adding {} coordinates would exceed budget {} (have {})",
                fresh.len(),
                self.budget,
                self.coords.len()
            )));
        }
        let added = fresh.len();
        for c in fresh {
            self.coords.insert(c);
            self.round_added.insert(c, round);
        }
        self.last_round = Some(round);
        Ok(added)
    }

    /// Serializable form: `[{"layer": <name>, "index": n, "round": r}, ...]`.
    pub fn to_records(&self, layer_names: &[String]) -> Vec<CriticalWeightRecord> {
        self.coords
            .iter()
            .map(|c| CriticalWeightRecord {
                layer: layer_names
                    .get(c.layer)
                    .cloned()
                    .unwrap_or_else(|| format!("layer{}", c.layer)),
                index: c.index,
                round: self.round_added.get(c).copied().unwrap_or(0),
            })
            .collect()
    }

    pub fn from_records(records: &[CriticalWeightRecord], layer_names: &[String], budget: usize) -> Result<Self> {
        let mut set = CriticalWeightSet::new(budget)?;
        let by_name: BTreeMap<&str, usize> = layer_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut by_round: BTreeMap<u32, Vec<WeightCoordinate>> = BTreeMap::new();
        for r in records {
            let layer = *by_name
                .get(r.layer.as_str())
                .ok_or_else(|| Error::validation(format!("unknown layer `{}`", r.layer)))?;
            by_round
                .entry(r.round)
                .or_default()
                .push(WeightCoordinate::new(layer, r.index));
        }
        for (round, coords) in by_round {
            set.add_round(coords, round)?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalWeightRecord {
    pub layer: String,
    pub index: usize,
    pub round: u32,
}

/// ΔW accounting result.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeltaW {
    /// Elements whose |current − baseline| exceeds the tolerance.
    pub changed: usize,
    /// Total element count over eligible layers (the denominator).
    pub eligible_elements: usize,
    pub fraction: f64,
}

impl DeltaW {
    pub fn per_mille(&self) -> f64 {
        self.fraction * 1000.0
    }
}

/// The lockable encoder: live parameters, an immutable baseline snapshot,
/// and the set of layers eligible for selection.
///
/// Single-writer: updates go through `&mut self`; concurrent readers may
/// share `&self` between update steps.
pub struct EncoderState<F: Scalar, M: ParamModel<F>> {
    model: M,
    baseline: Vec<ArrayD<F>>,
    eligible: BTreeSet<usize>,
}

impl<F: Scalar, M: ParamModel<F>> EncoderState<F, M> {
    /// Snapshot `model` as the lock-start baseline; eligibility defaults to
    /// every non-normalization tensor.
    pub fn new(model: M) -> Self {
        let eligible = (0..model.param_count())
            .filter(|&i| model.param_kind(i).eligible_by_default())
            .collect();
        let baseline = model.snapshot();
        EncoderState {
            model,
            baseline,
            eligible,
        }
    }

    pub fn with_eligible(model: M, eligible: BTreeSet<usize>) -> Result<Self> {
        for &id in &eligible {
            if id >= model.param_count() {
                return Err(Error::validation(format!(
                    "eligible layer {id} out of range ({} tensors)",
                    model.param_count()
                )));
            }
        }
        let baseline = model.snapshot();
        Ok(EncoderState {
            model,
            baseline,
            eligible,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    /// Mutable model access for callers that manage their own masking
    /// (e.g. restoring a checkpoint). Lock training should go through
    /// [`apply_masked_update`].
    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn baseline(&self) -> &[ArrayD<F>] {
        &self.baseline
    }

    pub fn eligible_layers(&self) -> &BTreeSet<usize> {
        &self.eligible
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.model.param_names()
    }

    /// Element count across eligible layers.
    pub fn eligible_elements(&self) -> usize {
        self.eligible.iter().map(|&i| self.model.param(i).len()).sum()
    }

    /// Fraction (and raw count) of eligible elements that moved away from
    /// the baseline by more than `tolerance`.
    pub fn delta_w(&self, tolerance: F) -> DeltaW {
        let mut changed = 0usize;
        let mut total = 0usize;
        for &id in &self.eligible {
            let cur = self.model.param(id);
            let base = &self.baseline[id];
            total += cur.len();
            for (c, b) in cur.iter().zip(base.iter()) {
                if (*c - *b).abs() > tolerance {
                    changed += 1;
                }
            }
        }
        DeltaW {
            changed,
            eligible_elements: total,
            fraction: if total == 0 { 0.0 } else { changed as f64 / total as f64 },
        }
    }

    /// Coordinates (over eligible layers) that differ from the baseline.
    pub fn changed_coordinates(&self, tolerance: F) -> Vec<WeightCoordinate> {
        let mut out = Vec::new();
        for &id in &self.eligible {
            let cur = self.model.param(id);
            let base = &self.baseline[id];
            let cur_slice = cur.as_slice_memory_order().expect("standard layout");
            let base_slice = base.as_slice_memory_order().expect("standard layout");
            for (i, (c, b)) in cur_slice.iter().zip(base_slice).enumerate() {
                if (*c - *b).abs() > tolerance {
                    out.push(WeightCoordinate::new(id, i));
                }
            }
        }
        out
    }

    /// SHA-256 over every parameter's bit pattern, ordinal order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for id in 0..self.model.param_count() {
            for v in self.model.param(id).iter() {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Restore the live parameters to the baseline snapshot.
    pub fn reset_to_baseline(&mut self) {
        for id in 0..self.model.param_count() {
            let base = self.baseline[id].clone();
            self.model.param_mut(id).assign(&base);
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Per-coordinate adaptive-moment state: moments exist only for selected
/// coordinates.
#[derive(Debug, Clone)]
pub struct MaskedAdam<F> {
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    slots: BTreeMap<WeightCoordinate, AdamSlot<F>>,
}

#[derive(Debug, Clone, Copy)]
struct AdamSlot<F> {
    m: F,
    v: F,
    t: u32,
}

impl<F: Scalar> Default for MaskedAdam<F> {
    fn default() -> Self {
        MaskedAdam {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
            slots: BTreeMap::new(),
        }
    }
}

impl<F: Scalar> MaskedAdam<F> {
    /// Export `(coordinate, m, v, t)` rows for persistence.
    pub fn export_slots(&self) -> Vec<(WeightCoordinate, f64, f64, u32)> {
        self.slots
            .iter()
            .map(|(c, s)| (*c, s.m.as_f64(), s.v.as_f64(), s.t))
            .collect()
    }

    pub fn import_slots(&mut self, rows: &[(WeightCoordinate, f64, f64, u32)]) {
        self.slots.clear();
        for &(c, m, v, t) in rows {
            self.slots.insert(
                c,
                AdamSlot {
                    m: F::from_f64(m),
                    v: F::from_f64(v),
                    t,
                },
            );
        }
    }

    fn step(&mut self, coord: WeightCoordinate, grad: F, lr: F) -> F {
        let slot = self.slots.entry(coord).or_insert(AdamSlot {
            m: F::zero(),
            v: F::zero(),
            t: 0,
        });
        slot.t += 1;
        slot.m = self.beta1 * slot.m + (F::one() - self.beta1) * grad;
        slot.v = self.beta2 * slot.v + (F::one() - self.beta2) * grad * grad;
        let m_hat = slot.m / (F::one() - self.beta1.powi(slot.t as i32));
        let v_hat = slot.v / (F::one() - self.beta2.powi(slot.t as i32));
        lr * m_hat / (v_hat.sqrt() + self.epsilon)
    }
}

/// Optimizer kind for masked updates.
#[derive(Debug, Clone)]
pub enum MaskedOptimizer<F> {
    /// Plain gradient descent: `p -= step_size * g`.
    Sgd,
    /// Adaptive moments, state kept per selected coordinate.
    Adam(MaskedAdam<F>),
}

impl<F: Scalar> MaskedOptimizer<F> {
    pub fn adam() -> Self {
        MaskedOptimizer::Adam(MaskedAdam::default())
    }
}

/// One optimizer step restricted to the critical set.
///
/// Every element outside `set` is untouched (bitwise identical); selected
/// elements move against their gradient. An empty set is a no-op.
pub fn apply_masked_update<F: Scalar, M: ParamModel<F>>(
    state: &mut EncoderState<F, M>,
    set: &CriticalWeightSet,
    gradients: &[ArrayD<F>],
    step_size: F,
    optimizer: &mut MaskedOptimizer<F>,
) -> Result<()> {
    if gradients.len() != state.model.param_count() {
        return Err(Error::shape(format!(
            "gradient tensor count {} != parameter tensor count {}",
            gradients.len(),
            state.model.param_count()
        )));
    }
    for (id, g) in gradients.iter().enumerate() {
        if g.shape() != state.model.param(id).shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} != parameter shape {:?} in layer `{}`",
                g.shape(),
                state.model.param(id).shape(),
                state.model.param_name(id)
            )));
        }
    }
    if set.is_empty() {
        return Ok(());
    }
    if set.len() > set.budget() {
        return Err(Error::invariant("critical set exceeds its budget"));
    }
    if step_size < F::zero() {
        return Err(Error::validation("step size must be nonnegative"));
    }

    // BTreeSet iteration is (layer, index)-sorted; walk layer runs.
    let mut coords = set.iter().peekable();
    while let Some(&first) = coords.peek() {
        let layer = first.layer;
        let grads = gradients[layer]
            .as_slice_memory_order()
            .ok_or_else(|| Error::shape("gradient tensor not contiguous"))?;
        let mut view = state.model.param_mut(layer);
        let params = view
            .as_slice_memory_order_mut()
            .ok_or_else(|| Error::shape("parameter tensor not contiguous"))?;
        while let Some(&&c) = coords.peek().filter(|c| c.layer == layer).as_ref() {
            coords.next();
            if c.index >= params.len() {
                return Err(Error::invariant(format!(
                    "coordinate index {} out of range for layer {} ({} elements)",
                    c.index,
                    layer,
                    params.len()
                )));
            }
            let g = grads[c.index];
            if !g.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient at (layer {}, index {})",
                    layer, c.index
                )));
            }
            let delta = match optimizer {
                MaskedOptimizer::Sgd => step_size * g,
                MaskedOptimizer::Adam(adam) => adam.step(*c, g, step_size),
            };
            params[c.index] = params[c.index] - delta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    /// Tiny two-tensor model for exercising the addressing machinery.
    #[derive(Clone)]
    pub(crate) struct VecModel {
        pub tensors: Vec<(String, ParamKind, ArrayD<f64>)>,
    }

    impl ParamModel<f64> for VecModel {
        fn param_count(&self) -> usize {
            self.tensors.len()
        }
        fn param_name(&self, id: usize) -> &str {
            &self.tensors[id].0
        }
        fn param_kind(&self, id: usize) -> ParamKind {
            self.tensors[id].1
        }
        fn param(&self, id: usize) -> ArrayViewD<'_, f64> {
            self.tensors[id].2.view()
        }
        fn param_mut(&mut self, id: usize) -> ArrayViewMutD<'_, f64> {
            self.tensors[id].2.view_mut()
        }
    }

    fn two_element_model() -> VecModel {
        VecModel {
            tensors: vec![(
                "w".into(),
                ParamKind::Weight,
                ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![1.0, 2.0]).unwrap(),
            )],
        }
    }

    #[test]
    fn empty_set_is_a_noop() {
        let mut state = EncoderState::new(two_element_model());
        let set = CriticalWeightSet::new(10).unwrap();
        let grads = vec![ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![3.0, 5.0]).unwrap()];
        let before = state.checksum();
        apply_masked_update(&mut state, &set, &grads, 0.1, &mut MaskedOptimizer::Sgd).unwrap();
        assert_eq!(state.checksum(), before);
        assert_eq!(state.delta_w(0.0).changed, 0);
    }

    #[test]
    fn masked_sgd_moves_only_selected_element() {
        // 2-element tensor, set = {(0,1)}, gradient (3, 5), step 0.1:
        // element 0 unchanged, element 1 decreased by 0.5.
        let mut state = EncoderState::new(two_element_model());
        let mut set = CriticalWeightSet::new(10).unwrap();
        set.add_round([WeightCoordinate::new(0, 1)], 1).unwrap();
        let grads = vec![ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![3.0, 5.0]).unwrap()];
        apply_masked_update(&mut state, &set, &grads, 0.1, &mut MaskedOptimizer::Sgd).unwrap();
        assert_eq!(state.model().param(0)[[0]], 1.0);
        assert_eq!(state.model().param(0)[[1]], 2.0 - 0.5);
        let dw = state.delta_w(0.0);
        assert_eq!(dw.changed, 1);
        assert_eq!(dw.eligible_elements, 2);
    }

    #[test]
    fn zero_step_changes_nothing() {
        let mut state = EncoderState::new(two_element_model());
        let mut set = CriticalWeightSet::new(10).unwrap();
        set.add_round([WeightCoordinate::new(0, 0), WeightCoordinate::new(0, 1)], 1)
            .unwrap();
        let grads = vec![ArrayD::from_shape_vec(ndarray::IxDyn(&[2]), vec![3.0, 5.0]).unwrap()];
        let before = state.checksum();
        apply_masked_update(&mut state, &set, &grads, 0.0, &mut MaskedOptimizer::Sgd).unwrap();
        assert_eq!(state.checksum(), before);
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let mut state = EncoderState::new(two_element_model());
        let mut set = CriticalWeightSet::new(10).unwrap();
        set.add_round([WeightCoordinate::new(0, 0)], 1).unwrap();
        let grads = vec![ArrayD::from_shape_vec(ndarray::IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap()];
        let err = apply_masked_update(&mut state, &set, &grads, 0.1, &mut MaskedOptimizer::Sgd)
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn budget_and_duplicates_are_enforced() {
        let mut set = CriticalWeightSet::new(2).unwrap();
        set.add_round([WeightCoordinate::new(0, 0)], 1).unwrap();
        assert!(set
            .add_round([WeightCoordinate::new(0, 0)], 2)
            .is_err());
        set.add_round([WeightCoordinate::new(0, 1)], 2).unwrap();
        assert!(set.add_round([WeightCoordinate::new(0, 3)], 3).is_err());
        assert_eq!(set.len(), 2);
        assert_eq!(set.round_of(&WeightCoordinate::new(0, 1)), Some(2));
    }

    #[test]
    fn norm_stats_excluded_from_eligibility() {
        let model = VecModel {
            tensors: vec![
                (
                    "w".into(),
                    ParamKind::Weight,
                    ArrayD::zeros(ndarray::IxDyn(&[4])),
                ),
                (
                    "bn.running_mean".into(),
                    ParamKind::NormStat,
                    ArrayD::zeros(ndarray::IxDyn(&[4])),
                ),
            ],
        };
        let state = EncoderState::new(model);
        assert!(state.eligible_layers().contains(&0));
        assert!(!state.eligible_layers().contains(&1));
        assert_eq!(state.eligible_elements(), 4);
    }

    #[test]
    fn records_round_trip() {
        let mut set = CriticalWeightSet::new(4).unwrap();
        set.add_round([WeightCoordinate::new(0, 1), WeightCoordinate::new(0, 0)], 1)
            .unwrap();
        set.add_round([WeightCoordinate::new(1, 7)], 2).unwrap();
        let names = vec!["conv1.weight".to_string(), "embed.weight".to_string()];
        let records = set.to_records(&names);
        let back = CriticalWeightSet::from_records(&records, &names, 4).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(back.round_of(&WeightCoordinate::new(1, 7)), Some(2));
    }
}
