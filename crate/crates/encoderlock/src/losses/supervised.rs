//! Supervised cross-entropy losses through frozen heads.

use crate::error::Result;
use crate::nn::{softmax_cross_entropy, ConvEncoder, MlpHead, ParamGrads};
use crate::scalar::Scalar;
use ndarray::Array4;

/// Mean cross-entropy of `head ∘ encoder` over source and target batches.
pub fn supervised_pair_losses<F: Scalar>(
    encoder: &ConvEncoder<F>,
    head_source: &MlpHead<F>,
    head_target: &MlpHead<F>,
    batch_source: (&Array4<F>, &[usize]),
    batch_target: (&Array4<F>, &[usize]),
) -> Result<(F, F)> {
    let (xs, ys) = batch_source;
    let (xt, yt) = batch_target;
    let (ls, _) = softmax_cross_entropy(&head_source.forward(&encoder.embed(xs)), ys)?;
    let (lt, _) = softmax_cross_entropy(&head_target.forward(&encoder.embed(xt)), yt)?;
    Ok((ls, lt))
}

/// Cross-entropy of `head ∘ encoder` plus its gradient with respect to the
/// encoder parameters (the head stays frozen; only its input gradient is
/// chained through).
pub fn supervised_loss_grads<F: Scalar>(
    encoder: &ConvEncoder<F>,
    head: &MlpHead<F>,
    images: &Array4<F>,
    labels: &[usize],
) -> Result<(F, ParamGrads<F>)> {
    let tapes = encoder.embed_train(images);
    let (logits, head_tape) = head.forward_train(&tapes.emb);
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let (_, g_emb) = head.backward(&head_tape, &dlogits);
    let grads = encoder.backward_batch(&tapes, &g_emb)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{EncoderArch, HeadSpec};
    use crate::seeds;
    use crate::weightspace::ParamModel;

    fn fixture() -> (ConvEncoder<f64>, MlpHead<f64>, Array4<f64>, Vec<usize>) {
        let mut rng = seeds::stream(31, "test/sup", 0);
        let arch = EncoderArch {
            in_shape: (1, 8, 8),
            conv_channels: vec![2],
            embed_dim: 5,
        };
        let enc = ConvEncoder::init(arch, &mut rng).unwrap();
        let head = MlpHead::init(HeadSpec::linear(), 5, 3, &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((6, 1, 8, 8), || f64::standard_normal(&mut rng) * 0.5 + 0.5);
        let y = vec![0, 1, 2, 0, 1, 2];
        (enc, head, x, y)
    }

    #[test]
    fn pair_losses_are_finite_and_independent_oracle_agrees() {
        let (enc, head, x, y) = fixture();
        let (ls, lt) = supervised_pair_losses(&enc, &head, &head, (&x, &y), (&x, &y)).unwrap();
        assert!(ls.is_finite() && lt.is_finite());
        assert_eq!(ls, lt);
        // independent hand-rolled softmax cross-entropy
        let emb = enc.embed(&x);
        let logits = head.forward(&emb);
        let mut manual = 0.0;
        for (i, row) in logits.outer_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let p = (row[y[i]] - mx).exp() / z;
            manual -= p.ln();
        }
        manual /= y.len() as f64;
        assert!((ls - manual).abs() < 1e-6);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let (mut enc, head, x, y) = fixture();
        let (_, grads) = supervised_loss_grads(&enc, &head, &x, &y).unwrap();
        let eps = 1e-6;
        for id in [0usize, 2] {
            let len = enc.param(id).len();
            for &k in &[0usize, len / 2] {
                let orig = enc.param(id).as_slice_memory_order().unwrap()[k];
                {
                    enc.param_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig + eps;
                }
                let (up, _) = supervised_pair_losses(&enc, &head, &head, (&x, &y), (&x, &y)).unwrap();
                {
                    enc.param_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig - eps;
                }
                let (dn, _) = supervised_pair_losses(&enc, &head, &head, (&x, &y), (&x, &y)).unwrap();
                {
                    enc.param_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig;
                }
                let fd = (up - dn) / (2.0 * eps);
                let an = grads[id].as_slice_memory_order().unwrap()[k];
                assert!((an - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{id}/{k}: {an} vs {fd}");
            }
        }
    }
}
