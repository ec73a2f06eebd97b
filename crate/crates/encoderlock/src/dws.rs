//! Domain-aware weight selection.
//!
//! Scores every eligible weight by the target-to-source gradient magnitude
//! ratio `|g_T| / (|g_S| + ε)` and grows the critical set by the top N
//! fresh coordinates each round. Already-selected coordinates are excluded
//! from re-selection so every round contributes exactly N new weights and
//! the budget arithmetic `M = N × R` stays exact.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::weightspace::{CriticalWeightSet, EncoderState, ParamModel, WeightCoordinate};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// New critical weights per round (N).
    pub n_per_round: usize,
    /// Maximum rounds (R); the associated budget is N × R.
    pub rounds_max: usize,
    /// Added to the denominator so a vanishing source gradient ranks the
    /// weight highest instead of dividing by zero.
    pub score_epsilon: f64,
    /// Independent batch pairs to average scores over.
    pub batches_per_score: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n_per_round: 100,
            rounds_max: 100,
            score_epsilon: 1e-12,
            batches_per_score: 1,
        }
    }
}

impl SelectionConfig {
    pub fn budget(&self) -> usize {
        self.n_per_round * self.rounds_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_round == 0 || self.rounds_max == 0 {
            return Err(Error::validation("N and R must be positive"));
        }
        if self.score_epsilon <= 0.0 {
            return Err(Error::validation("score_epsilon must be positive"));
        }
        if self.batches_per_score == 0 {
            return Err(Error::validation("batches_per_score must be positive"));
        }
        Ok(())
    }
}

/// Per-element scores, ordinal-aligned with the model's parameter tensors.
/// Ineligible layers carry zeros and are never consulted.
pub type ScoreTensors<F> = Vec<ArrayD<F>>;

/// Evaluate per-element scores, averaged over `batches_per_score`
/// independent evaluator calls.
///
/// The evaluators sample their own batches and return `(loss, gradients)`
/// with gradients ordinal-aligned to the model parameters. A non-finite
/// gradient raises a scoring error naming the layer.
pub fn score_weights<F, M, S, T>(
    state: &EncoderState<F, M>,
    mut loss_source: S,
    mut loss_target: T,
    cfg: &SelectionConfig,
) -> Result<ScoreTensors<F>>
where
    F: Scalar,
    M: ParamModel<F>,
    S: FnMut(&M) -> Result<(F, Vec<ArrayD<F>>)>,
    T: FnMut(&M) -> Result<(F, Vec<ArrayD<F>>)>,
{
    cfg.validate()?;
    let model = state.model();
    let n_params = model.param_count();
    let mut acc: ScoreTensors<F> = (0..n_params)
        .map(|i| ArrayD::zeros(model.param(i).raw_dim()))
        .collect();
    let eps = F::from_f64(cfg.score_epsilon);
    for _ in 0..cfg.batches_per_score {
        let (_, g_src) = loss_source(model)?;
        let (_, g_tgt) = loss_target(model)?;
        check_grads(state, &g_src)?;
        check_grads(state, &g_tgt)?;
        for &layer in state.eligible_layers() {
            let gs = &g_src[layer];
            let gt = &g_tgt[layer];
            let mut a = acc[layer].view_mut();
            ndarray::Zip::from(&mut a).and(gs).and(gt).for_each(|s, &g_s, &g_t| {
                *s = *s + g_t.abs() / (g_s.abs() + eps);
            });
        }
    }
    let k = F::from_f64(cfg.batches_per_score as f64);
    for &layer in state.eligible_layers() {
        acc[layer].mapv_inplace(|v| v / k);
    }
    Ok(acc)
}

fn check_grads<F: Scalar, M: ParamModel<F>>(
    state: &EncoderState<F, M>,
    grads: &[ArrayD<F>],
) -> Result<()> {
    let model = state.model();
    if grads.len() != model.param_count() {
        return Err(Error::shape(format!(
            "gradient count {} != parameter count {}",
            grads.len(),
            model.param_count()
        )));
    }
    for &layer in state.eligible_layers() {
        if grads[layer].shape() != model.param(layer).shape() {
            return Err(Error::shape(format!(
                "gradient shape mismatch in layer `{}`",
                model.param_name(layer)
            )));
        }
        if grads[layer].iter().any(|v| !v.is_finite()) {
            return Err(Error::Scoring {
                layer: model.param_name(layer).to_string(),
                detail: "non-finite gradient".to_string(),
            });
        }
    }
    Ok(())
}

/// Outcome of one selection round, also the per-round log record.
#[derive(Debug, Clone)]
pub struct RoundSelection {
    pub round: u32,
    pub added: Vec<WeightCoordinate>,
    /// Lowest score among the newly added coordinates.
    pub score_min_added: Option<f64>,
    /// Highest score among eligible coordinates left out.
    pub score_max_excluded: Option<f64>,
    /// Fewer than N fresh candidates remained; all of them were taken.
    pub exhausted: bool,
}

/// JSON-lines form of a [`RoundSelection`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundSelectionRecord {
    pub round: u32,
    pub added: Vec<SelectedCoordinate>,
    pub score_min_added: Option<f64>,
    pub score_max_excluded: Option<f64>,
    pub exhausted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedCoordinate {
    pub layer: String,
    pub index: usize,
}

impl RoundSelection {
    pub fn to_record(&self, layer_names: &[String]) -> RoundSelectionRecord {
        RoundSelectionRecord {
            round: self.round,
            added: self
                .added
                .iter()
                .map(|c| SelectedCoordinate {
                    layer: layer_names
                        .get(c.layer)
                        .cloned()
                        .unwrap_or_else(|| format!("layer{}", c.layer)),
                    index: c.index,
                })
                .collect(),
            score_min_added: self.score_min_added,
            score_max_excluded: self.score_max_excluded,
            exhausted: self.exhausted,
        }
    }
}

/// Grow the set with the N highest-scoring coordinates not already in it.
///
/// Ties break lexicographically on `(layer, index)` so selection is
/// deterministic. If fewer than N fresh candidates remain, all of them are
/// taken and the result is flagged exhausted.
pub fn select_round<F: Scalar>(
    scores: &ScoreTensors<F>,
    set: &mut CriticalWeightSet,
    eligible: &BTreeSet<usize>,
    cfg: &SelectionConfig,
    round: u32,
) -> Result<RoundSelection> {
    cfg.validate()?;
    let n = cfg.n_per_round;
    if set.len() + n > set.budget() {
        return Err(Error::invariant(format!(
            "selecting {n} more coordinates would exceed budget {} (have {})",
            set.budget(),
            set.len()
        )));
    }
    let mut candidates: Vec<(WeightCoordinate, f64)> = Vec::new();
    for &layer in eligible {
        let tensor = scores
            .get(layer)
            .ok_or_else(|| Error::shape(format!("no score tensor for layer {layer}")))?;
        let slice = tensor
            .as_slice_memory_order()
            .ok_or_else(|| Error::shape("score tensor not contiguous"))?;
        for (i, &v) in slice.iter().enumerate() {
            let coord = WeightCoordinate::new(layer, i);
            if !set.contains(&coord) {
                let s = v.as_f64();
                if !s.is_finite() {
                    return Err(Error::Scoring {
                        layer: format!("layer {layer}"),
                        detail: format!("non-finite score at index {i}"),
                    });
                }
                candidates.push((coord, s));
            }
        }
    }
    // score descending, then coordinate ascending
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let take = n.min(candidates.len());
    let exhausted = take < n;
    let added: Vec<WeightCoordinate> = candidates[..take].iter().map(|(c, _)| *c).collect();
    let score_min_added = candidates[..take].last().map(|(_, s)| *s);
    let score_max_excluded = candidates.get(take).map(|(_, s)| *s);
    set.add_round(added.iter().copied(), round)?;
    Ok(RoundSelection {
        round,
        added,
        score_min_added,
        score_max_excluded,
        exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightspace::ParamKind;
    use ndarray::{ArrayViewD, ArrayViewMutD, IxDyn};

    /// y = w1*x1 + w2*x2 with squared-error loss; gradients in closed form.
    #[derive(Clone)]
    struct LinearModel {
        w: ArrayD<f64>,
    }

    impl LinearModel {
        fn new(w1: f64, w2: f64) -> Self {
            LinearModel {
                w: ArrayD::from_shape_vec(IxDyn(&[2]), vec![w1, w2]).unwrap(),
            }
        }

        /// L = (w·x − t)², dL/dw = 2(w·x − t)·x
        fn eval(&self, x: [f64; 2], t: f64) -> (f64, Vec<ArrayD<f64>>) {
            let y = self.w[[0]] * x[0] + self.w[[1]] * x[1];
            let err = y - t;
            let g = ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0 * err * x[0], 2.0 * err * x[1]])
                .unwrap();
            (err * err, vec![g])
        }
    }

    impl ParamModel<f64> for LinearModel {
        fn param_count(&self) -> usize {
            1
        }
        fn param_name(&self, _id: usize) -> &str {
            "w"
        }
        fn param_kind(&self, _id: usize) -> ParamKind {
            ParamKind::Weight
        }
        fn param(&self, _id: usize) -> ArrayViewD<'_, f64> {
            self.w.view()
        }
        fn param_mut(&mut self, _id: usize) -> ArrayViewMutD<'_, f64> {
            self.w.view_mut()
        }
    }

    fn cfg(n: usize, r: usize) -> SelectionConfig {
        SelectionConfig {
            n_per_round: n,
            rounds_max: r,
            score_epsilon: 1e-12,
            batches_per_score: 1,
        }
    }

    fn flat_model(len: usize) -> LinearVec {
        LinearVec {
            w: ArrayD::zeros(IxDyn(&[len])),
        }
    }

    #[derive(Clone)]
    struct LinearVec {
        w: ArrayD<f64>,
    }

    impl ParamModel<f64> for LinearVec {
        fn param_count(&self) -> usize {
            1
        }
        fn param_name(&self, _id: usize) -> &str {
            "w"
        }
        fn param_kind(&self, _id: usize) -> ParamKind {
            ParamKind::Weight
        }
        fn param(&self, _id: usize) -> ArrayViewD<'_, f64> {
            self.w.view()
        }
        fn param_mut(&mut self, _id: usize) -> ArrayViewMutD<'_, f64> {
            self.w.view_mut()
        }
    }

    #[test]
    fn identical_gradients_score_one() {
        let state = EncoderState::new(LinearModel::new(0.5, -0.3));
        let scores = score_weights(
            &state,
            |m: &LinearModel| Ok(m.eval([1.0, 2.0], 3.0)),
            |m: &LinearModel| Ok(m.eval([1.0, 2.0], 3.0)),
            &cfg(1, 2),
        )
        .unwrap();
        for &v in scores[0].iter() {
            assert!((v - 1.0).abs() < 1e-6, "score {v} not ~1");
        }
    }

    #[test]
    fn disjoint_features_rank_target_weight_highest() {
        // source batch activates only x1, target only x2: w2 sees g_S = 0
        // and must rank far above w1 (finite thanks to epsilon).
        let state = EncoderState::new(LinearModel::new(0.5, -0.3));
        let scores = score_weights(
            &state,
            |m: &LinearModel| Ok(m.eval([1.0, 0.0], 2.0)),
            |m: &LinearModel| Ok(m.eval([0.0, 1.0], 2.0)),
            &cfg(1, 2),
        )
        .unwrap();
        let s1 = scores[0][[0]];
        let s2 = scores[0][[1]];
        assert!(s2.is_finite());
        assert!(s2 > 1e6 * (s1 + 1.0), "s2={s2} should dwarf s1={s1}");
    }

    #[test]
    fn ranking_matches_brute_force_and_is_scale_invariant() {
        let state = EncoderState::new(LinearModel::new(0.7, 0.2));
        let scores = score_weights(
            &state,
            |m: &LinearModel| Ok(m.eval([1.0, 0.4], 2.0)),
            |m: &LinearModel| Ok(m.eval([0.3, 1.0], -1.0)),
            &cfg(1, 2),
        )
        .unwrap();
        // brute-force ratio ranking from the closed-form gradients
        let (_, gs) = state.model().eval([1.0, 0.4], 2.0);
        let (_, gt) = state.model().eval([0.3, 1.0], -1.0);
        let r0 = gt[0][[0]].abs() / (gs[0][[0]].abs() + 1e-12);
        let r1 = gt[0][[1]].abs() / (gs[0][[1]].abs() + 1e-12);
        assert_eq!(scores[0][[0]] > scores[0][[1]], r0 > r1);

        // common positive scaling of both losses leaves the ranking alone
        let scaled = score_weights(
            &state,
            |m: &LinearModel| {
                let (l, mut g) = m.eval([1.0, 0.4], 2.0);
                g[0].mapv_inplace(|v| v * 7.0);
                Ok((l * 7.0, g))
            },
            |m: &LinearModel| {
                let (l, mut g) = m.eval([0.3, 1.0], -1.0);
                g[0].mapv_inplace(|v| v * 7.0);
                Ok((l * 7.0, g))
            },
            &cfg(1, 2),
        )
        .unwrap();
        assert_eq!(
            scores[0][[0]] > scores[0][[1]],
            scaled[0][[0]] > scaled[0][[1]]
        );
    }

    #[test]
    fn select_round_tie_break_and_exclusion() {
        // scores (0.2, 0.9, 0.9): N=1 picks c1 (tie c1/c2 broken by order)
        let state = EncoderState::new(flat_model(3));
        let scores = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.2, 0.9, 0.9]).unwrap()];
        let mut set = CriticalWeightSet::new(3).unwrap();
        let sel = select_round(&scores, &mut set, state.eligible_layers(), &cfg(1, 3), 1).unwrap();
        assert_eq!(sel.added, vec![WeightCoordinate::new(0, 1)]);
        assert_eq!(sel.score_min_added, Some(0.9));
        assert_eq!(sel.score_max_excluded, Some(0.9));
        assert!(!sel.exhausted);

        // same scores again: already-selected c1 is excluded, c2 joins
        let sel2 = select_round(&scores, &mut set, state.eligible_layers(), &cfg(1, 3), 2).unwrap();
        assert_eq!(sel2.added, vec![WeightCoordinate::new(0, 2)]);
        assert!(set.contains(&WeightCoordinate::new(0, 1)));
        assert!(set.contains(&WeightCoordinate::new(0, 2)));
        assert!(!set.contains(&WeightCoordinate::new(0, 0)));
    }

    #[test]
    fn exhaustive_selection_takes_everything_and_flags() {
        let state = EncoderState::new(flat_model(3));
        let scores = vec![ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 0.1, 0.3]).unwrap()];
        let mut set = CriticalWeightSet::new(100).unwrap();
        let sel = select_round(&scores, &mut set, state.eligible_layers(), &cfg(3, 1), 1).unwrap();
        assert_eq!(sel.added.len(), 3);
        assert!(!sel.exhausted);
        assert_eq!(sel.score_max_excluded, None);
        // nothing fresh remains: next round selects zero and flags it
        let sel2 = select_round(&scores, &mut set, state.eligible_layers(), &cfg(2, 40), 2).unwrap();
        assert!(sel2.exhausted);
        assert!(sel2.added.is_empty());
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let state = EncoderState::new(LinearModel::new(0.5, -0.3));
        let err = score_weights(
            &state,
            |_m: &LinearModel| {
                Ok((
                    1.0,
                    vec![ArrayD::from_shape_vec(IxDyn(&[2]), vec![f64::NAN, 0.0]).unwrap()],
                ))
            },
            |m: &LinearModel| Ok(m.eval([0.0, 1.0], 2.0)),
            &cfg(1, 2),
        )
        .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn growth_is_exactly_n_per_round() {
        let state = EncoderState::new(flat_model(50));
        let scores = vec![ArrayD::from_shape_fn(IxDyn(&[50]), |i| (i[0] * 7 % 13) as f64)];
        let c = cfg(5, 6);
        let mut set = CriticalWeightSet::new(c.budget()).unwrap();
        for r in 1..=6u32 {
            let sel = select_round(&scores, &mut set, state.eligible_layers(), &c, r).unwrap();
            assert_eq!(sel.added.len(), 5);
            assert_eq!(set.len(), 5 * r as usize);
        }
        // budget full: one more round is an invariant error
        assert!(select_round(&scores, &mut set, state.eligible_layers(), &c, 7).is_err());
    }
}
