//! Contrastive obfuscation loss over normalized embeddings.
//!
//! `L = -(1/N_B) Σ_i ln( sim(z_i, z̃_i) / Σ_j sim(z_i, z̃_j) )` where
//! `sim` is cosine similarity, positives are the two views of the same
//! image and every cross pair is a negative. The default similarity is the
//! raw cosine, which can make the ratio argument nonpositive; that raises
//! a diagnosable error naming the anchor instead of silently clamping. An
//! `exp(sim/τ)` mode is available for callers that want guaranteed
//! positivity.

use super::augment::{augment_two_views, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::nn::{ConvEncoder, ParamGrads};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

/// How pairwise similarities enter the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Raw cosine similarities, the literal definition.
    RawCosine,
    /// `exp(cos/tau)`: strictly positive ratio arguments.
    ExpCosine { tau: f64 },
}

impl Default for SimilarityKind {
    fn default() -> Self {
        SimilarityKind::RawCosine
    }
}

impl SimilarityKind {
    pub fn exp_default() -> Self {
        SimilarityKind::ExpCosine { tau: 0.5 }
    }
}

/// Anchor/positive embeddings, unit-norm, aligned by origin image.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<F> {
    anchors: Array2<F>,
    positives: Array2<F>,
}

impl<F: Scalar> EmbeddingBatch<F> {
    pub fn new(anchors: Array2<F>, positives: Array2<F>) -> Result<Self> {
        if anchors.shape() != positives.shape() {
            return Err(Error::shape(format!(
                "anchors {:?} vs positives {:?}",
                anchors.shape(),
                positives.shape()
            )));
        }
        if anchors.shape()[0] == 0 {
            return Err(Error::validation("embedding batch must be nonempty"));
        }
        for (what, m) in [("anchor", &anchors), ("positive", &positives)] {
            for (i, row) in m.outer_iter().enumerate() {
                let norm = row.dot(&row).sqrt().as_f64();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "{what} {i} has norm {norm}, expected unit norm"
                    )));
                }
            }
        }
        Ok(EmbeddingBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn anchors(&self) -> &Array2<F> {
        &self.anchors
    }

    pub fn positives(&self) -> &Array2<F> {
        &self.positives
    }

    /// Reorder both sides by `perm` (a bijection over 0..len).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::validation("permutation length mismatch"));
        }
        Ok(EmbeddingBatch {
            anchors: self.anchors.select(Axis(0), perm),
            positives: self.positives.select(Axis(0), perm),
        })
    }
}

/// L2-normalize rows in place; rows with norm below the floor are left
/// untouched (they surface later as nonpositive-ratio errors).
pub(crate) fn l2_normalize_rows<F: Scalar>(m: &mut Array2<F>) {
    let floor = F::from_f64(1e-12);
    for mut row in m.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > floor {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

fn cosine_matrix<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let floor = F::from_f64(1e-12);
    let an: Array1<F> = a
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(floor))
        .collect();
    let bn: Array1<F> = b
        .outer_iter()
        .map(|r| r.dot(&r).sqrt().max(floor))
        .collect();
    let mut m = a.dot(&b.t());
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v / (an[i] * bn[j]);
        }
    }
    m
}

/// Contrastive loss with the default (raw cosine) similarity.
pub fn contrastive_loss<F: Scalar>(batch: &EmbeddingBatch<F>) -> Result<F> {
    contrastive_loss_with(batch, SimilarityKind::RawCosine)
}

/// Contrastive loss under an explicit similarity mode.
pub fn contrastive_loss_with<F: Scalar>(batch: &EmbeddingBatch<F>, kind: SimilarityKind) -> Result<F> {
    let (loss, _, _) = contrastive_grads(batch.anchors(), batch.positives(), kind)?;
    Ok(loss)
}

/// Loss plus gradients with respect to the (raw, not necessarily
/// normalized) anchor/positive embeddings. Cosine normalization is part of
/// the differentiated function.
pub fn contrastive_grads<F: Scalar>(
    anchors: &Array2<F>,
    positives: &Array2<F>,
    kind: SimilarityKind,
) -> Result<(F, Array2<F>, Array2<F>)> {
    if anchors.shape() != positives.shape() {
        return Err(Error::shape("anchor/positive shape mismatch"));
    }
    let n = anchors.shape()[0];
    if n == 0 {
        return Err(Error::validation("empty embedding batch"));
    }
    let cos = cosine_matrix(anchors, positives);
    let sims = match kind {
        SimilarityKind::RawCosine => cos.clone(),
        SimilarityKind::ExpCosine { tau } => {
            let t = F::from_f64(tau);
            cos.mapv(|v| (v / t).exp())
        }
    };

    let inv_n = F::one() / F::from_f64(n as f64);
    let mut loss = F::zero();
    // dL/d sims
    let mut w = Array2::<F>::zeros((n, n));
    for i in 0..n {
        let sii = sims[[i, i]];
        let si: F = sims.row(i).sum();
        let ratio = sii / si;
        if !(sii > F::zero() && si > F::zero()) || !ratio.is_finite() {
            return Err(Error::numeric(format!(
                "nonpositive contrastive ratio argument at anchor {i} (sim_ii={}, row sum={})",
                sii.as_f64(),
                si.as_f64()
            )));
        }
        loss = loss - ratio.ln() * inv_n;
        for j in 0..n {
            let indicator = if i == j { F::one() / sii } else { F::zero() };
            w[[i, j]] = -inv_n * (indicator - F::one() / si);
        }
    }

    // chain through exp when active: d sims/d cos = sims / tau
    let w_cos = match kind {
        SimilarityKind::RawCosine => w,
        SimilarityKind::ExpCosine { tau } => {
            let t = F::from_f64(tau);
            &w * &sims.mapv(|v| v / t)
        }
    };

    // cosine backward: for unit directions â, p̂ and norms na, np:
    //   d cos_ij / d a_i = (p̂_j - cos_ij â_i) / na_i
    //   d cos_ij / d p_j = (â_i - cos_ij p̂_j) / np_j
    let floor = F::from_f64(1e-12);
    let na: Vec<F> = anchors.outer_iter().map(|r| r.dot(&r).sqrt().max(floor)).collect();
    let np: Vec<F> = positives.outer_iter().map(|r| r.dot(&r).sqrt().max(floor)).collect();
    let mut a_hat = anchors.clone();
    l2_normalize_rows(&mut a_hat);
    let mut p_hat = positives.clone();
    l2_normalize_rows(&mut p_hat);

    let mut g_a = w_cos.dot(&p_hat);
    let row_corr: Vec<F> = (0..n).map(|i| (&w_cos.row(i) * &cos.row(i)).sum()).collect();
    for (i, mut row) in g_a.outer_iter_mut().enumerate() {
        let corr = row_corr[i];
        let ai = a_hat.row(i);
        for (v, &ah) in row.iter_mut().zip(ai.iter()) {
            *v = (*v - corr * ah) / na[i];
        }
    }

    let mut g_p = w_cos.t().dot(&a_hat);
    let col_corr: Vec<F> = (0..n)
        .map(|j| (&w_cos.column(j) * &cos.column(j)).sum())
        .collect();
    for (j, mut row) in g_p.outer_iter_mut().enumerate() {
        let corr = col_corr[j];
        let pj = p_hat.row(j);
        for (v, &ph) in row.iter_mut().zip(pj.iter()) {
            *v = (*v - corr * ph) / np[j];
        }
    }

    Ok((loss, g_a, g_p))
}

/// Build aligned positive pairs: two independent augmentations per image,
/// encoded and L2-normalized. Cross pairs are negatives by construction.
pub fn make_positive_pairs<F: Scalar>(
    images: &Array4<F>,
    policy: &AugmentationPolicy,
    encoder: &ConvEncoder<F>,
) -> Result<EmbeddingBatch<F>> {
    if images.shape()[0] == 0 {
        return Err(Error::validation("empty image batch"));
    }
    let (view_a, view_b) = augment_two_views(images, policy)?;
    let mut anchors = encoder.embed(&view_a);
    let mut positives = encoder.embed(&view_b);
    l2_normalize_rows(&mut anchors);
    l2_normalize_rows(&mut positives);
    EmbeddingBatch::new(anchors, positives)
}

/// Contrastive loss and its gradient with respect to encoder parameters.
///
/// Both views are encoded with tapes; the cosine-chain gradients flow back
/// through each view and are summed.
pub fn contrastive_loss_grads_for_encoder<F: Scalar>(
    encoder: &ConvEncoder<F>,
    images: &Array4<F>,
    policy: &AugmentationPolicy,
    kind: SimilarityKind,
) -> Result<(F, ParamGrads<F>)> {
    let (view_a, view_b) = augment_two_views(images, policy)?;
    let tapes_a = encoder.embed_train(&view_a);
    let tapes_b = encoder.embed_train(&view_b);
    let (loss, g_a, g_p) = contrastive_grads(&tapes_a.emb, &tapes_b.emb, kind)?;
    let mut grads = encoder.backward_batch(&tapes_a, &g_a)?;
    let grads_b = encoder.backward_batch(&tapes_b, &g_p)?;
    for (acc, g) in grads.iter_mut().zip(grads_b) {
        *acc += &g;
    }
    Ok((loss, grads))
}
