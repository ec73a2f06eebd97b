//! Lock-loss arithmetic.
//!
//! The supervised cross-entropy pair, the log-ratio regularizer
//! `R_T = ln(1 + α·L_S/L_T)` with its total `L_el = L_S + R_T`, the
//! contrastive loss over normalized embeddings with its augmentation
//! pipeline, and the contrastive form of the same regularizer.

mod augment;
mod contrastive;
mod elloss;
mod supervised;

pub use augment::{augment_batch, augment_two_views, AugmentationPolicy};
pub use contrastive::{
    contrastive_grads, contrastive_loss, contrastive_loss_with, contrastive_loss_grads_for_encoder,
    make_positive_pairs, EmbeddingBatch, SimilarityKind,
};
pub(crate) use contrastive::l2_normalize_rows;
pub use elloss::{el_loss, el_loss_contrastive, el_loss_partials, LossBundle, L_TARGET_FLOOR};
pub use supervised::{supervised_loss_grads, supervised_pair_losses};
