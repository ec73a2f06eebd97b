//! The lock trainers.
//!
//! Supervised: per round, domain-aware selection grows the critical set,
//! masked updates minimize `L_el` over the lock subsets, then a fresh
//! challenger head is fine-tuned on the prohibited data and evaluated —
//! the max player of the minimax objective. The loop stops when the
//! challenger's validation accuracy falls below the goal or the weight
//! budget is spent.
//!
//! Unsupervised / zero-shot: the same loop with contrastive losses on
//! augmented views in place of labeled cross-entropy, and no challenger —
//! the contrastive regularizer acts on the feature space directly.

use crate::data::ImageSet;
use crate::dws::{self, RoundSelectionRecord, SelectionConfig};
use crate::error::{Error, Result};
use crate::losses::{
    el_loss, el_loss_contrastive, el_loss_partials, supervised_loss_grads,
    contrastive_loss_grads_for_encoder, AugmentationPolicy, LossBundle, SimilarityKind,
};
use crate::nn::{accuracy, train_head, ConvEncoder, HeadSpec, HeadTrainConfig, MlpHead, ParamGrads};
use crate::scalar::Scalar;
use crate::seeds;
use crate::weightspace::{
    apply_masked_update, CriticalWeightSet, EncoderState, MaskedOptimizer, ParamModel,
};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockVariant {
    Supervised,
    Unsupervised,
    Zeroshot,
}

/// Which loss carries the source term in the unsupervised lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLossKind {
    /// Contrastive on both domains (the default).
    Contrastive,
    /// Labeled cross-entropy on the source, contrastive on the target.
    CrossEntropy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockConfig {
    pub variant: LockVariant,
    pub n_per_round: usize,
    pub rounds_max: usize,
    /// Regularizer weight α.
    pub alpha: f64,
    /// Masked-update passes over the lock subsets per round.
    pub inner_epochs: usize,
    /// Samples per domain used for selection and masked updates.
    pub lock_subset_size: usize,
    /// Challenger validation accuracy below which the lock is done.
    pub acc_goal: f64,
    pub challenger_spec: HeadSpec,
    /// Learning rate of the masked adaptive-moment updates.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Abort if frozen-source-head accuracy falls below this mid-run.
    pub source_accuracy_floor: f64,
    pub score_epsilon: f64,
    pub batches_per_score: usize,
    /// Similarity mode for the contrastive losses.
    pub similarity: SimilarityKind,
    pub source_loss: SourceLossKind,
    pub augmentation: AugmentationPolicy,
    pub challenger_train: HeadTrainConfig,
    /// Global L2 clip for the combined lock gradient; `None` disables.
    /// Keeps the adaptive moments sane when the target loss spikes.
    pub grad_clip: Option<f64>,
}

impl Default for LockConfig {
    fn default() -> Self {
        LockConfig {
            variant: LockVariant::Supervised,
            n_per_round: 100,
            rounds_max: 100,
            alpha: 1000.0,
            inner_epochs: 5,
            lock_subset_size: 1000,
            acc_goal: 0.15,
            challenger_spec: HeadSpec::mlp(2, 256),
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
            source_accuracy_floor: 0.5,
            score_epsilon: 1e-12,
            batches_per_score: 1,
            similarity: SimilarityKind::RawCosine,
            source_loss: SourceLossKind::Contrastive,
            augmentation: AugmentationPolicy::default(),
            challenger_train: HeadTrainConfig::default(),
            grad_clip: Some(5.0),
        }
    }
}

impl LockConfig {
    pub fn unsupervised_defaults() -> Self {
        LockConfig {
            variant: LockVariant::Unsupervised,
            n_per_round: 200,
            alpha: 10.0,
            ..LockConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds_max > 0 && self.n_per_round == 0 {
            return Err(Error::validation("n_per_round must be positive"));
        }
        if !(self.acc_goal > 0.0 && self.acc_goal < 1.0) {
            return Err(Error::validation("acc_goal must lie strictly in (0, 1)"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.inner_epochs == 0 || self.batch_size == 0 || self.lock_subset_size == 0 {
            return Err(Error::validation(
                "inner_epochs, batch_size and lock_subset_size must be positive",
            ));
        }
        self.challenger_spec.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            n_per_round: self.n_per_round,
            rounds_max: self.rounds_max,
            score_epsilon: self.score_epsilon,
            batches_per_score: self.batches_per_score,
        }
    }

    pub fn budget(&self) -> usize {
        self.n_per_round * self.rounds_max
    }
}

/// One challenger retraining outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChallengerRecord {
    pub round: u32,
    pub head_init_seed: u64,
    pub valid_accuracy: f64,
    pub epochs_trained: usize,
}

/// Serializable snapshot of a loss bundle.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBundleRecord {
    pub l_source: f64,
    pub l_target: f64,
    pub alpha: f64,
    pub r_target: f64,
    pub l_el: f64,
    pub saturated: bool,
}

impl LossBundleRecord {
    fn from_bundle<F: Scalar>(b: &LossBundle<F>) -> Self {
        LossBundleRecord {
            l_source: b.l_source.as_f64(),
            l_target: b.l_target.as_f64(),
            alpha: b.alpha.as_f64(),
            r_target: b.r_target.as_f64(),
            l_el: b.l_el.as_f64(),
            saturated: b.saturated,
        }
    }
}

/// Per-round log record (one line of `rounds.jsonl`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Lock loss on the fixed evaluation batch after this round's masked
    /// updates, under the heads used for the updates.
    pub loss: LossBundleRecord,
    /// Same encoder and batch re-evaluated under the freshly trained
    /// challenger (supervised only): the minimax pressure measurement.
    pub loss_post_challenge: Option<LossBundleRecord>,
    pub challenger: Option<ChallengerRecord>,
    pub delta_w_count: usize,
    pub delta_w_per_mille: f64,
    pub source_eval_accuracy: f64,
    pub selected_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    AccGoalReached,
    RoundsComplete,
    BudgetExhausted,
    CandidatesExhausted,
}

/// Everything a lock run leaves behind besides the mutated encoder state.
#[derive(Debug)]
pub struct LockTrace {
    pub rounds: Vec<RoundRecord>,
    pub challengers: Vec<ChallengerRecord>,
    pub critical_set: CriticalWeightSet,
    pub selections: Vec<RoundSelectionRecord>,
    pub stop_reason: StopReason,
}

pub struct SupervisedLockInputs<'a, F> {
    pub source_train: &'a ImageSet<F>,
    /// Held-out source data monitored against the accuracy floor.
    pub source_eval: &'a ImageSet<F>,
    pub target_train: &'a ImageSet<F>,
    pub target_valid: &'a ImageSet<F>,
}

pub struct UnsupervisedLockInputs<'a, F> {
    pub source_train: &'a ImageSet<F>,
    pub source_eval: &'a ImageSet<F>,
    /// Unlabeled (labels, if any, are ignored).
    pub target_train: &'a ImageSet<F>,
}

/// Train a fresh challenger head against a frozen encoder.
///
/// The head starts from random init (a new seed every round), trains on
/// the prohibited training split with the shared fine-tuning recipe, and
/// reports best validation accuracy.
pub fn challenge_once<F: Scalar>(
    encoder: &ConvEncoder<F>,
    target_train: &ImageSet<F>,
    target_valid: &ImageSet<F>,
    challenger_spec: HeadSpec,
    train_cfg: &HeadTrainConfig,
    round: u32,
    head_init_seed: u64,
) -> Result<(ChallengerRecord, MlpHead<F>)> {
    let train_labels = target_train.labels()?.to_vec();
    let valid_labels = target_valid.labels()?.to_vec();
    let n_classes = target_train.n_classes.max(target_valid.n_classes);
    let train_emb = encoder.embed(&target_train.images);
    let valid_emb = encoder.embed(&target_valid.images);
    let outcome = train_head(
        challenger_spec,
        (&train_emb, &train_labels),
        (&valid_emb, &valid_labels),
        n_classes,
        train_cfg,
        head_init_seed,
    )?;
    Ok((
        ChallengerRecord {
            round,
            head_init_seed,
            valid_accuracy: outcome.best_eval_accuracy,
            epochs_trained: outcome.epochs_trained,
        },
        outcome.head,
    ))
}

fn empty_trace(budget: usize) -> LockTrace {
    LockTrace {
        rounds: Vec::new(),
        challengers: Vec::new(),
        critical_set: CriticalWeightSet::new(budget.max(1)).expect("positive budget"),
        selections: Vec::new(),
        stop_reason: StopReason::RoundsComplete,
    }
}

/// Draw a random batch (without replacement) from a set.
fn draw_batch<F: Scalar>(
    set: &ImageSet<F>,
    batch: usize,
    seed: u64,
    tag: &str,
    index: u64,
) -> (Array4<F>, Option<Vec<usize>>) {
    let n = set.len();
    let take = batch.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::stream(seed, tag, index);
    idx.shuffle(&mut rng);
    idx.truncate(take);
    let images = set.images.select(Axis(0), &idx);
    let labels = set.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
    (images, labels)
}

fn minibatch_order(n: usize, seed: u64, tag: &str, index: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::stream(seed, tag, index);
    idx.shuffle(&mut rng);
    idx
}

fn source_eval_accuracy<F: Scalar>(
    encoder: &ConvEncoder<F>,
    head: &MlpHead<F>,
    eval: &ImageSet<F>,
) -> Result<f64> {
    let emb = encoder.embed(&eval.images);
    Ok(accuracy(&head.forward(&emb), eval.labels()?))
}

/// Combine source/target gradients into the `L_el` gradient:
/// `∂L_el/∂φ = c_S·g_S + c_T·g_T` with the analytic partials, optionally
/// clipped to a global L2 norm.
fn combine_el_grads<F: Scalar>(
    bundle: &LossBundle<F>,
    g_source: &ParamGrads<F>,
    g_target: &ParamGrads<F>,
    clip: Option<f64>,
) -> ParamGrads<F> {
    let (c_s, c_t) = el_loss_partials(bundle);
    let mut combined: ParamGrads<F> = g_source
        .iter()
        .zip(g_target)
        .map(|(gs, gt)| {
            let mut g = gs.mapv(|v| v * c_s);
            ndarray::Zip::from(&mut g).and(gt).for_each(|a, &b| *a = *a + c_t * b);
            g
        })
        .collect();
    if let Some(max_norm) = clip {
        let mut sq = 0.0;
        for g in &combined {
            for v in g.iter() {
                sq += v.as_f64() * v.as_f64();
            }
        }
        let norm = sq.sqrt();
        if norm > max_norm {
            let scale = F::from_f64(max_norm / norm);
            for g in &mut combined {
                g.mapv_inplace(|v| v * scale);
            }
        }
    }
    combined
}

/// Supervised lock (self-challenging minimax).
///
/// The source head stays frozen throughout (asserted bit-identical). The
/// round-0 challenger is trained before any update to provide the target
/// head the first round's selection and updates differentiate through; a
/// fresh challenger replaces it after every round.
pub fn lock_supervised<F: Scalar>(
    state: &mut EncoderState<F, ConvEncoder<F>>,
    source_head: &MlpHead<F>,
    inputs: SupervisedLockInputs<'_, F>,
    cfg: &LockConfig,
) -> Result<LockTrace> {
    cfg.validate()?;
    if cfg.variant != LockVariant::Supervised {
        return Err(Error::validation("config variant is not supervised"));
    }
    inputs.target_train.labels()?;
    inputs.target_valid.labels()?;
    if cfg.rounds_max == 0 {
        return Ok(empty_trace(cfg.n_per_round));
    }
    let head_checksum = source_head.checksum();
    let budget = cfg.budget();
    let sel_cfg = cfg.selection_config();
    let mut set = CriticalWeightSet::new(budget)?;
    let mut adam = MaskedOptimizer::adam();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut challengers: Vec<ChallengerRecord> = Vec::new();
    let mut selections: Vec<RoundSelectionRecord> = Vec::new();
    let layer_names = state.model().param_names();

    let src_lock = inputs.source_train.take_random(cfg.lock_subset_size, seeds::subseed(cfg.seed, "lock/src-subset", 0));
    let tgt_lock = inputs.target_train.take_random(cfg.lock_subset_size, seeds::subseed(cfg.seed, "lock/tgt-subset", 0));
    let src_labels = src_lock.labels()?.to_vec();
    let tgt_labels = tgt_lock.labels()?.to_vec();

    // initial challenger: the malicious-probing starting point
    let (rec0, mut challenger) = challenge_once(
        state.model(),
        inputs.target_train,
        inputs.target_valid,
        cfg.challenger_spec,
        &cfg.challenger_train,
        0,
        seeds::subseed(cfg.seed, "challenger", 0),
    )?;
    challengers.push(rec0);

    // fixed evaluation batch for comparable per-round loss records
    let (eval_src_x, eval_src_y) = draw_batch(&src_lock, cfg.batch_size, cfg.seed, "lock/eval-src", 0);
    let (eval_tgt_x, eval_tgt_y) = draw_batch(&tgt_lock, cfg.batch_size, cfg.seed, "lock/eval-tgt", 0);
    let eval_src_y = eval_src_y.expect("labeled");
    let eval_tgt_y = eval_tgt_y.expect("labeled");

    let mut stop_reason = StopReason::RoundsComplete;
    'rounds: for round in 1..=cfg.rounds_max as u32 {
        // -- domain-aware selection at the live encoder
        let mut draw_counter = 0u64;
        let alpha = F::from_f64(cfg.alpha);
        let scores = {
            let src = &src_lock;
            let tgt = &tgt_lock;
            let ch = &challenger;
            let mut src_i = 0u64;
            let mut tgt_i = 0u64;
            dws::score_weights(
                state,
                |m: &ConvEncoder<F>| {
                    let (x, y) = draw_batch(src, cfg.batch_size, cfg.seed, "dws/src", (round as u64) << 32 | src_i);
                    src_i += 1;
                    supervised_loss_grads(m, source_head, &x, &y.expect("labeled"))
                },
                |m: &ConvEncoder<F>| {
                    let (x, y) = draw_batch(tgt, cfg.batch_size, cfg.seed, "dws/tgt", (round as u64) << 32 | tgt_i);
                    tgt_i += 1;
                    supervised_loss_grads(m, ch, &x, &y.expect("labeled"))
                },
                &sel_cfg,
            )?
        };
        let sel = dws::select_round(&scores, &mut set, state.eligible_layers(), &sel_cfg, round)?;
        let exhausted = sel.exhausted;
        selections.push(sel.to_record(&layer_names));
        if exhausted && set.is_empty() {
            stop_reason = StopReason::CandidatesExhausted;
            break 'rounds;
        }

        // -- masked updates minimizing L_el over the lock subsets
        for epoch in 0..cfg.inner_epochs {
            let src_order = minibatch_order(src_lock.len(), cfg.seed, "inner/src", (round as u64) << 16 | epoch as u64);
            let tgt_order = minibatch_order(tgt_lock.len(), cfg.seed, "inner/tgt", (round as u64) << 16 | epoch as u64);
            let steps = (src_order.len() / cfg.batch_size).min(tgt_order.len() / cfg.batch_size).max(1);
            for s in 0..steps {
                let sb: Vec<usize> = src_order.iter().skip(s * cfg.batch_size).take(cfg.batch_size).copied().collect();
                let tb: Vec<usize> = tgt_order.iter().skip(s * cfg.batch_size).take(cfg.batch_size).copied().collect();
                if sb.is_empty() || tb.is_empty() {
                    break;
                }
                let sx = src_lock.images.select(Axis(0), &sb);
                let sy: Vec<usize> = sb.iter().map(|&i| src_labels[i]).collect();
                let tx = tgt_lock.images.select(Axis(0), &tb);
                let ty: Vec<usize> = tb.iter().map(|&i| tgt_labels[i]).collect();
                let (l_s, g_s) = supervised_loss_grads(state.model(), source_head, &sx, &sy)?;
                let (l_t, g_t) = supervised_loss_grads(state.model(), &challenger, &tx, &ty)?;
                if !l_s.is_finite() || !l_t.is_finite() {
                    return Err(Error::Aborted(format!(
                        "non-finite lock loss at round {round} epoch {epoch}"
                    )));
                }
                let bundle = el_loss(l_s, l_t, alpha)?;
                let g_el = combine_el_grads(&bundle, &g_s, &g_t, cfg.grad_clip);
                apply_masked_update(state, &set, &g_el, F::from_f64(cfg.learning_rate), &mut adam)?;
                draw_counter += 1;
            }
        }
        let _ = draw_counter;

        // -- fixed-batch loss record with the heads used for the updates
        let (l_s_eval, _) = supervised_loss_grads(state.model(), source_head, &eval_src_x, &eval_src_y)?;
        let (l_t_eval, _) = supervised_loss_grads(state.model(), &challenger, &eval_tgt_x, &eval_tgt_y)?;
        let bundle_pre = el_loss(l_s_eval, l_t_eval, alpha)?;

        // -- self-challenge: fresh head fine-tuned against the updated encoder
        let (rec, new_challenger) = challenge_once(
            state.model(),
            inputs.target_train,
            inputs.target_valid,
            cfg.challenger_spec,
            &cfg.challenger_train,
            round,
            seeds::subseed(cfg.seed, "challenger", round as u64),
        )?;
        challenger = new_challenger;
        let (l_t_post, _) = supervised_loss_grads(state.model(), &challenger, &eval_tgt_x, &eval_tgt_y)?;
        let bundle_post = el_loss(l_s_eval, l_t_post, alpha)?;

        let src_acc = source_eval_accuracy(state.model(), source_head, inputs.source_eval)?;
        if src_acc < cfg.source_accuracy_floor {
            return Err(Error::Aborted(format!(
                "source accuracy {src_acc:.4} fell below floor {} at round {round}; \
                 diagnostic: delta_w={}, challenger_acc={:.4}",
                cfg.source_accuracy_floor,
                state.delta_w(F::zero()).changed,
                rec.valid_accuracy
            )));
        }

        let dw = state.delta_w(F::zero());
        let challenger_acc = rec.valid_accuracy;
        challengers.push(rec.clone());
        rounds.push(RoundRecord {
            round,
            loss: LossBundleRecord::from_bundle(&bundle_pre),
            loss_post_challenge: Some(LossBundleRecord::from_bundle(&bundle_post)),
            challenger: Some(rec),
            delta_w_count: dw.changed,
            delta_w_per_mille: dw.per_mille(),
            source_eval_accuracy: src_acc,
            selected_total: set.len(),
        });

        // -- stop criterion
        if challenger_acc < cfg.acc_goal {
            stop_reason = StopReason::AccGoalReached;
            break 'rounds;
        }
        if dw.changed > budget {
            stop_reason = StopReason::BudgetExhausted;
            break 'rounds;
        }
        if exhausted {
            stop_reason = StopReason::CandidatesExhausted;
            break 'rounds;
        }
    }

    if source_head.checksum() != head_checksum {
        return Err(Error::invariant("source head changed during locking"));
    }
    Ok(LockTrace {
        rounds,
        challengers,
        critical_set: set,
        selections,
        stop_reason,
    })
}

/// Unsupervised / zero-shot lock: contrastive losses, no challenger.
pub fn lock_unsupervised<F: Scalar>(
    state: &mut EncoderState<F, ConvEncoder<F>>,
    source_head: &MlpHead<F>,
    inputs: UnsupervisedLockInputs<'_, F>,
    cfg: &LockConfig,
) -> Result<LockTrace> {
    cfg.validate()?;
    if cfg.variant == LockVariant::Supervised {
        return Err(Error::validation(
            "config variant must be unsupervised or zeroshot",
        ));
    }
    if cfg.rounds_max == 0 {
        return Ok(empty_trace(cfg.n_per_round));
    }
    if cfg.source_loss == SourceLossKind::CrossEntropy {
        inputs.source_train.labels()?;
    }
    let budget = cfg.budget();
    let sel_cfg = cfg.selection_config();
    let mut set = CriticalWeightSet::new(budget)?;
    let mut adam = MaskedOptimizer::adam();
    let mut rounds = Vec::new();
    let mut selections = Vec::new();
    let layer_names = state.model().param_names();
    let alpha = F::from_f64(cfg.alpha);

    let src_lock = inputs.source_train.take_random(cfg.lock_subset_size, seeds::subseed(cfg.seed, "lock/src-subset", 0));
    let tgt_lock = inputs.target_train.take_random(cfg.lock_subset_size, seeds::subseed(cfg.seed, "lock/tgt-subset", 0));
    let src_labels = src_lock.labels.clone();

    let (eval_src_x, eval_src_y) = draw_batch(&src_lock, cfg.batch_size, cfg.seed, "lock/eval-src", 0);
    let (eval_tgt_x, _) = draw_batch(&tgt_lock, cfg.batch_size, cfg.seed, "lock/eval-tgt", 0);

    let mut aug_counter: u64 = 1;
    let mut stop_reason = StopReason::RoundsComplete;
    'rounds: for round in 1..=cfg.rounds_max as u32 {
        // -- selection with contrastive gradients
        let scores = {
            let src = &src_lock;
            let tgt = &tgt_lock;
            let labels = src_labels.clone();
            let mut src_i = 0u64;
            let mut tgt_i = 0u64;
            let aug_base = aug_counter;
            dws::score_weights(
                state,
                |m: &ConvEncoder<F>| {
                    let (x, y) = draw_batch(src, cfg.batch_size, cfg.seed, "dws/src", (round as u64) << 32 | src_i);
                    src_i += 1;
                    match cfg.source_loss {
                        SourceLossKind::CrossEntropy => {
                            let y = y.or_else(|| labels.clone()).ok_or_else(|| {
                                Error::validation("cross-entropy source loss needs labels")
                            })?;
                            supervised_loss_grads(m, source_head, &x, &y)
                        }
                        SourceLossKind::Contrastive => {
                            let policy = cfg.augmentation.with_seed(seeds::subseed(
                                cfg.seed,
                                "aug/dws-src",
                                (round as u64) << 32 | (aug_base + src_i),
                            ));
                            contrastive_loss_grads_for_encoder(m, &x, &policy, cfg.similarity)
                        }
                    }
                },
                |m: &ConvEncoder<F>| {
                    let (x, _) = draw_batch(tgt, cfg.batch_size, cfg.seed, "dws/tgt", (round as u64) << 32 | tgt_i);
                    tgt_i += 1;
                    let policy = cfg.augmentation.with_seed(seeds::subseed(
                        cfg.seed,
                        "aug/dws-tgt",
                        (round as u64) << 32 | (aug_base + tgt_i),
                    ));
                    contrastive_loss_grads_for_encoder(m, &x, &policy, cfg.similarity)
                },
                &sel_cfg,
            )?
        };
        aug_counter += 2 * (cfg.batches_per_score as u64) + 2;
        let sel = dws::select_round(&scores, &mut set, state.eligible_layers(), &sel_cfg, round)?;
        let exhausted = sel.exhausted;
        selections.push(sel.to_record(&layer_names));
        if exhausted && set.is_empty() {
            stop_reason = StopReason::CandidatesExhausted;
            break 'rounds;
        }

        // -- masked updates on the contrastive lock objective
        for epoch in 0..cfg.inner_epochs {
            let src_order = minibatch_order(src_lock.len(), cfg.seed, "inner/src", (round as u64) << 16 | epoch as u64);
            let tgt_order = minibatch_order(tgt_lock.len(), cfg.seed, "inner/tgt", (round as u64) << 16 | epoch as u64);
            let steps = (src_order.len() / cfg.batch_size).min(tgt_order.len() / cfg.batch_size).max(1);
            for s in 0..steps {
                let sb: Vec<usize> = src_order.iter().skip(s * cfg.batch_size).take(cfg.batch_size).copied().collect();
                let tb: Vec<usize> = tgt_order.iter().skip(s * cfg.batch_size).take(cfg.batch_size).copied().collect();
                if sb.is_empty() || tb.is_empty() {
                    break;
                }
                let sx = src_lock.images.select(Axis(0), &sb);
                let tx = tgt_lock.images.select(Axis(0), &tb);
                let (l_s, g_s) = match cfg.source_loss {
                    SourceLossKind::CrossEntropy => {
                        let sy: Vec<usize> = {
                            let labels = src_labels.as_ref().ok_or_else(|| {
                                Error::validation("cross-entropy source loss needs labels")
                            })?;
                            sb.iter().map(|&i| labels[i]).collect()
                        };
                        supervised_loss_grads(state.model(), source_head, &sx, &sy)?
                    }
                    SourceLossKind::Contrastive => {
                        let policy = cfg.augmentation.with_seed(seeds::subseed(cfg.seed, "aug/src", aug_counter));
                        aug_counter += 1;
                        contrastive_loss_grads_for_encoder(state.model(), &sx, &policy, cfg.similarity)?
                    }
                };
                let (l_t, g_t) = {
                    let policy = cfg.augmentation.with_seed(seeds::subseed(cfg.seed, "aug/tgt", aug_counter));
                    aug_counter += 1;
                    contrastive_loss_grads_for_encoder(state.model(), &tx, &policy, cfg.similarity)?
                };
                if !l_s.is_finite() || !l_t.is_finite() {
                    return Err(Error::Aborted(format!(
                        "non-finite contrastive lock loss at round {round} epoch {epoch}"
                    )));
                }
                let bundle = el_loss_contrastive(l_s, l_t, alpha)?;
                let g_el = combine_el_grads(&bundle, &g_s, &g_t, cfg.grad_clip);
                apply_masked_update(state, &set, &g_el, F::from_f64(cfg.learning_rate), &mut adam)?;
            }
        }

        // -- fixed-batch record
        let eval_policy = cfg.augmentation.with_seed(seeds::subseed(cfg.seed, "aug/eval", 0));
        let (l_s_eval, _) = match cfg.source_loss {
            SourceLossKind::CrossEntropy => {
                supervised_loss_grads(state.model(), source_head, &eval_src_x, eval_src_y.as_ref().unwrap())?
            }
            SourceLossKind::Contrastive => {
                contrastive_loss_grads_for_encoder(state.model(), &eval_src_x, &eval_policy, cfg.similarity)?
            }
        };
        let (l_t_eval, _) =
            contrastive_loss_grads_for_encoder(state.model(), &eval_tgt_x, &eval_policy, cfg.similarity)?;
        let bundle = el_loss_contrastive(l_s_eval, l_t_eval, alpha)?;

        let src_acc = source_eval_accuracy(state.model(), source_head, inputs.source_eval)?;
        if src_acc < cfg.source_accuracy_floor {
            return Err(Error::Aborted(format!(
                "source accuracy {src_acc:.4} fell below floor {} at round {round}",
                cfg.source_accuracy_floor
            )));
        }
        let dw = state.delta_w(F::zero());
        rounds.push(RoundRecord {
            round,
            loss: LossBundleRecord::from_bundle(&bundle),
            loss_post_challenge: None,
            challenger: None,
            delta_w_count: dw.changed,
            delta_w_per_mille: dw.per_mille(),
            source_eval_accuracy: src_acc,
            selected_total: set.len(),
        });

        if dw.changed > budget {
            stop_reason = StopReason::BudgetExhausted;
            break 'rounds;
        }
        if exhausted {
            stop_reason = StopReason::CandidatesExhausted;
            break 'rounds;
        }
    }

    Ok(LockTrace {
        rounds,
        challengers: Vec::new(),
        critical_set: set,
        selections,
        stop_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetHandle, ToyStyle};
    use crate::nn::{fit_classifier, EncoderArch};

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            in_shape: (3, 16, 16),
            conv_channels: vec![4, 8],
            embed_dim: 32,
        }
    }

    fn toy_fixture() -> (
        EncoderState<f32, ConvEncoder<f32>>,
        MlpHead<f32>,
        crate::data::LoadedDataset<f32>,
        crate::data::LoadedDataset<f32>,
    ) {
        let src = DatasetHandle::toy("toy-source", ToyStyle::source(), 400, 100, 11)
            .load::<f32>()
            .unwrap();
        let tgt = DatasetHandle::toy("toy-target", ToyStyle::target(), 300, 100, 12)
            .load::<f32>()
            .unwrap();
        let (enc, head, _) = fit_classifier(
            &tiny_arch(),
            HeadSpec::linear(),
            &src.train.images,
            src.train.labels().unwrap(),
            &src.test.images,
            src.test.labels().unwrap(),
            10,
            &HeadTrainConfig {
                max_epochs: 6,
                ..Default::default()
            },
            42,
        )
        .unwrap();
        (EncoderState::new(enc), head, src, tgt)
    }

    #[test]
    fn zero_rounds_returns_bit_identical_encoder() {
        let (mut state, head, src, tgt) = toy_fixture();
        let before = state.checksum();
        let cfg = LockConfig {
            rounds_max: 0,
            ..Default::default()
        };
        let (tt, tv) = tgt.train.split(0.8, 5).unwrap();
        let trace = lock_supervised(
            &mut state,
            &head,
            SupervisedLockInputs {
                source_train: &src.train,
                source_eval: &src.test,
                target_train: &tt,
                target_valid: &tv,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(state.checksum(), before);
        assert!(trace.rounds.is_empty());
        assert_eq!(state.delta_w(0.0).changed, 0);
    }

    #[test]
    fn vacuous_goal_exits_after_round_one() {
        let (mut state, head, src, tgt) = toy_fixture();
        let cfg = LockConfig {
            n_per_round: 20,
            rounds_max: 5,
            inner_epochs: 1,
            lock_subset_size: 128,
            acc_goal: 0.999,
            source_accuracy_floor: 0.05,
            challenger_train: HeadTrainConfig {
                max_epochs: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (tt, tv) = tgt.train.split(0.8, 5).unwrap();
        let trace = lock_supervised(
            &mut state,
            &head,
            SupervisedLockInputs {
                source_train: &src.train,
                source_eval: &src.test,
                target_train: &tt,
                target_valid: &tv,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::AccGoalReached);
        // round-0 anchor plus the round-1 challenger
        assert_eq!(trace.challengers.len(), 2);
    }

    #[test]
    fn supervised_lock_respects_budget_and_freezes_source_head() {
        let (mut state, head, src, tgt) = toy_fixture();
        let head_sum = head.checksum();
        let cfg = LockConfig {
            n_per_round: 25,
            rounds_max: 3,
            inner_epochs: 2,
            lock_subset_size: 128,
            acc_goal: 0.01,
            source_accuracy_floor: 0.05,
            challenger_train: HeadTrainConfig {
                max_epochs: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let (tt, tv) = tgt.train.split(0.8, 5).unwrap();
        let trace = lock_supervised(
            &mut state,
            &head,
            SupervisedLockInputs {
                source_train: &src.train,
                source_eval: &src.test,
                target_train: &tt,
                target_valid: &tv,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(head.checksum(), head_sum);
        let dw = state.delta_w(0.0);
        assert!(dw.changed <= cfg.budget(), "changed {} > budget {}", dw.changed, cfg.budget());
        // every changed coordinate is a member of the final critical set
        for c in state.changed_coordinates(0.0) {
            assert!(trace.critical_set.contains(&c));
        }
        // per-round growth is exactly N
        for (i, s) in trace.selections.iter().enumerate() {
            assert_eq!(s.added.len(), cfg.n_per_round, "round {i}");
        }
        // delta_w is monotone nondecreasing over the run
        let mut prev = 0usize;
        for r in &trace.rounds {
            assert!(r.delta_w_count >= prev);
            prev = r.delta_w_count;
        }
    }

    #[test]
    fn supervised_lock_is_deterministic() {
        let run = || {
            let (mut state, head, src, tgt) = toy_fixture();
            let cfg = LockConfig {
                n_per_round: 10,
                rounds_max: 2,
                inner_epochs: 1,
                lock_subset_size: 96,
                acc_goal: 0.01,
                source_accuracy_floor: 0.05,
                challenger_train: HeadTrainConfig {
                    max_epochs: 2,
                    ..Default::default()
                },
                seed: 77,
                ..Default::default()
            };
            let (tt, tv) = tgt.train.split(0.8, 5).unwrap();
            let trace = lock_supervised(
                &mut state,
                &head,
                SupervisedLockInputs {
                    source_train: &src.train,
                    source_eval: &src.test,
                    target_train: &tt,
                    target_valid: &tv,
                },
                &cfg,
            )
            .unwrap();
            let coords: Vec<_> = trace.critical_set.iter().copied().collect();
            (state.checksum(), coords, state.delta_w(0.0).changed)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn unsupervised_lock_runs_and_respects_budget() {
        let (mut state, head, src, tgt) = toy_fixture();
        let cfg = LockConfig {
            variant: LockVariant::Unsupervised,
            n_per_round: 30,
            rounds_max: 2,
            alpha: 10.0,
            inner_epochs: 1,
            lock_subset_size: 96,
            batch_size: 32,
            source_accuracy_floor: 0.05,
            ..Default::default()
        };
        let trace = lock_unsupervised(
            &mut state,
            &head,
            UnsupervisedLockInputs {
                source_train: &src.train,
                source_eval: &src.test,
                target_train: &tgt.train.unlabeled(),
            },
            &cfg,
        )
        .unwrap();
        assert!(state.delta_w(0.0).changed <= cfg.budget());
        assert_eq!(trace.rounds.len(), 2);
        assert!(trace.challengers.is_empty());
        for r in &trace.rounds {
            assert!(r.loss.l_el.is_finite());
            assert!(r.challenger.is_none());
        }
    }

    #[test]
    fn same_domain_unsupervised_smoke() {
        // target = source images: the loop harness must hold source
        // accuracy above the floor (checks the harness, not the defense)
        let (mut state, head, src, _) = toy_fixture();
        let acc_before = source_eval_accuracy(state.model(), &head, &src.test).unwrap();
        let cfg = LockConfig {
            variant: LockVariant::Unsupervised,
            n_per_round: 20,
            rounds_max: 2,
            alpha: 10.0,
            inner_epochs: 1,
            lock_subset_size: 96,
            batch_size: 32,
            source_accuracy_floor: acc_before * 0.5,
            ..Default::default()
        };
        lock_unsupervised(
            &mut state,
            &head,
            UnsupervisedLockInputs {
                source_train: &src.train,
                source_eval: &src.test,
                target_train: &src.train.unlabeled(),
            },
            &cfg,
        )
        .unwrap();
        let acc_after = source_eval_accuracy(state.model(), &head, &src.test).unwrap();
        assert!(
            acc_after >= acc_before * 0.5,
            "source accuracy collapsed: {acc_before} -> {acc_after}"
        );
    }

    #[test]
    fn minimax_direction_check() {
        // on a fixed encoder, training the challenger (decreasing L_T)
        // strictly raises L_el
        let (state, head, src, tgt) = toy_fixture();
        let (tt, tv) = tgt.train.split(0.8, 5).unwrap();
        let mut rng = seeds::stream(1, "test/minimax-init", 0);
        let untrained: MlpHead<f32> =
            MlpHead::init(HeadSpec::mlp(2, 64), state.model().embed_dim(), 10, &mut rng).unwrap();
        let strong_cfg = HeadTrainConfig {
            max_epochs: 30,
            ..Default::default()
        };
        let (_, trained) =
            challenge_once(state.model(), &tt, &tv, HeadSpec::mlp(2, 64), &strong_cfg, 0, 1).unwrap();
        let (x, y) = draw_batch(&tt, 64, 3, "test/minimax", 0);
        let y = y.unwrap();
        let (l_untrained, _) = supervised_loss_grads(state.model(), &untrained, &x, &y).unwrap();
        let (l_trained, _) = supervised_loss_grads(state.model(), &trained, &x, &y).unwrap();
        assert!(l_trained < l_untrained, "training the challenger should lower L_T");
        let (sx, sy) = draw_batch(&src.train, 64, 3, "test/minimax-src", 0);
        let (l_s, _) = supervised_loss_grads(state.model(), &head, &sx, &sy.unwrap()).unwrap();
        let el_untrained = el_loss(l_s, l_untrained, 1000.0f32).unwrap().l_el;
        let el_trained = el_loss(l_s, l_trained, 1000.0f32).unwrap().l_el;
        assert!(el_trained > el_untrained, "L_el must rise as the challenger strengthens");
    }
}
