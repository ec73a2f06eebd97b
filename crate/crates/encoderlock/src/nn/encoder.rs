//! The small convolutional encoder used for desk-scale runs.
//!
//! Architecture: `[conv3x3 -> relu -> maxpool2]*` followed by one dense
//! projection with a ReLU, giving nonnegative embeddings (which keeps raw
//! cosine similarities nonnegative for the contrastive lock).

use super::layers::{relu_backward_inplace, relu_inplace, Conv2d, Dense, MaxPool2};
use super::CHUNK;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::weightspace::{ParamKind, ParamModel};
use ndarray::{Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Dimension, Ix3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Shape of the encoder; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    /// Input `(channels, height, width)`.
    pub in_shape: (usize, usize, usize),
    /// Output channels of each conv block (3x3, pad 1, relu, pool 2).
    pub conv_channels: Vec<usize>,
    /// Embedding width of the final dense layer.
    pub embed_dim: usize,
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        let (_, mut h, mut w) = self.in_shape;
        if self.conv_channels.is_empty() {
            return Err(Error::validation("need at least one conv block"));
        }
        for _ in &self.conv_channels {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::validation(format!(
                    "spatial dims must stay even through pooling, got {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
        }
        if self.embed_dim == 0 {
            return Err(Error::validation("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Flattened dim entering the dense projection.
    pub fn flat_dim(&self) -> usize {
        let (_, h, w) = self.in_shape;
        let n = self.conv_channels.len() as u32;
        let last = *self.conv_channels.last().unwrap();
        last * (h >> n) * (w >> n)
    }

    pub fn total_params(&self) -> usize {
        let mut count = 0;
        let mut in_c = self.in_shape.0;
        for &out_c in &self.conv_channels {
            count += out_c * in_c * 9 + out_c;
            in_c = out_c;
        }
        count + self.embed_dim * self.flat_dim() + self.embed_dim
    }
}

/// Parameter gradients, ordinal-aligned with [`ParamModel`] tensors.
pub type ParamGrads<F> = Vec<ArrayD<F>>;

#[derive(Debug, Clone)]
pub struct ConvEncoder<F> {
    pub arch: EncoderArch,
    convs: Vec<Conv2d<F>>,
    embed: Dense<F>,
    names: Vec<String>,
}

impl<F: Scalar> ConvEncoder<F> {
    pub fn init<R: Rng>(arch: EncoderArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut in_c = arch.in_shape.0;
        for &out_c in &arch.conv_channels {
            convs.push(Conv2d::init(out_c, in_c, 3, 1, rng));
            in_c = out_c;
        }
        let embed = Dense::init(arch.embed_dim, arch.flat_dim(), rng);
        let names = make_names(convs.len());
        Ok(ConvEncoder {
            arch,
            convs,
            embed,
            names,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    /// Encode a batch `[n, c, h, w]` into embeddings `[n, d]`.
    pub fn embed(&self, x: &Array4<F>) -> Array2<F> {
        let n = x.shape()[0];
        let chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let outs: Vec<Array2<F>> = chunks
            .into_par_iter()
            .map(|chunk| self.forward_chunk(&chunk.to_owned()).emb)
            .collect();
        let mut out = Array2::zeros((n, self.arch.embed_dim));
        let mut row = 0;
        for o in outs {
            let rows = o.shape()[0];
            out.slice_mut(ndarray::s![row..row + rows, ..]).assign(&o);
            row += rows;
        }
        out
    }

    /// Encode keeping the per-chunk tapes needed for [`Self::backward_batch`].
    pub fn embed_train(&self, x: &Array4<F>) -> BatchTapes<F> {
        let n = x.shape()[0];
        let chunks: Vec<_> = x.axis_chunks_iter(Axis(0), CHUNK).collect();
        let tapes: Vec<ChunkTape<F>> = chunks
            .into_par_iter()
            .map(|chunk| self.forward_chunk(&chunk.to_owned()))
            .collect();
        let mut emb = Array2::zeros((n, self.arch.embed_dim));
        let mut row = 0;
        for t in &tapes {
            let rows = t.emb.shape()[0];
            emb.slice_mut(ndarray::s![row..row + rows, ..]).assign(&t.emb);
            row += rows;
        }
        BatchTapes { emb, chunks: tapes }
    }

    /// Backpropagate `d(loss)/d(embeddings)` into parameter gradients.
    ///
    /// Chunk results are reduced in chunk order, so the sum is independent
    /// of thread scheduling.
    pub fn backward_batch(&self, tapes: &BatchTapes<F>, grad_emb: &Array2<F>) -> Result<ParamGrads<F>> {
        if grad_emb.shape() != tapes.emb.shape() {
            return Err(Error::shape(format!(
                "grad_emb shape {:?} != embeddings shape {:?}",
                grad_emb.shape(),
                tapes.emb.shape()
            )));
        }
        let mut offsets = Vec::with_capacity(tapes.chunks.len());
        let mut row = 0;
        for t in &tapes.chunks {
            offsets.push(row);
            row += t.emb.shape()[0];
        }
        let partials: Vec<ParamGrads<F>> = tapes
            .chunks
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(tape, &off)| {
                let rows = tape.emb.shape()[0];
                let g = grad_emb.slice(ndarray::s![off..off + rows, ..]).to_owned();
                self.backward_chunk(tape, &g)
            })
            .collect();
        let mut total = self.zero_grads();
        for p in partials {
            for (acc, part) in total.iter_mut().zip(p) {
                *acc += &part;
            }
        }
        Ok(total)
    }

    pub fn zero_grads(&self) -> ParamGrads<F> {
        (0..self.param_count())
            .map(|i| ArrayD::zeros(self.param(i).raw_dim()))
            .collect()
    }

    /// All parameter tensors as mutable views, ordinal order (for a dense
    /// optimizer step over the whole model, e.g. from-scratch training).
    pub fn params_mut_all(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut out = Vec::with_capacity(2 * self.convs.len() + 2);
        for c in &mut self.convs {
            out.push(c.weight.view_mut().into_dyn());
            out.push(c.bias.view_mut().into_dyn());
        }
        out.push(self.embed.weight.view_mut().into_dyn());
        out.push(self.embed.bias.view_mut().into_dyn());
        out
    }

    fn forward_chunk(&self, x: &Array4<F>) -> ChunkTape<F> {
        let n = x.shape()[0];
        let mut conv_out: Vec<Array4<F>> = Vec::with_capacity(self.convs.len());
        let mut pool_out: Vec<Array4<F>> = Vec::with_capacity(self.convs.len());
        let mut pool_idx: Vec<Array4<u8>> = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let (h, w) = (cur.shape()[2], cur.shape()[3]);
            let (ho, wo) = conv.out_spatial(h, w);
            let oc = conv.weight.shape()[0];
            let mut act = Array4::zeros((n, oc, ho, wo));
            for (i, img) in cur.outer_iter().enumerate() {
                let mut out = conv.forward_img(img.into_dimensionality::<Ix3>().unwrap());
                relu_inplace(&mut out);
                act.index_axis_mut(Axis(0), i).assign(&out);
            }
            let mut pooled = Array4::zeros((n, oc, ho / 2, wo / 2));
            let mut idx = Array4::zeros((n, oc, ho / 2, wo / 2));
            for (i, img) in act.outer_iter().enumerate() {
                let (p, ix) = MaxPool2::forward(img.into_dimensionality::<Ix3>().unwrap());
                pooled.index_axis_mut(Axis(0), i).assign(&p);
                idx.index_axis_mut(Axis(0), i).assign(&ix);
            }
            conv_out.push(act);
            pool_idx.push(idx);
            pool_out.push(pooled.clone());
            cur = pooled;
        }
        let flat = cur
            .into_shape_with_order((n, self.arch.flat_dim()))
            .expect("flatten pooled activations");
        let mut emb = self.embed.forward(flat.view());
        relu_inplace(&mut emb);
        ChunkTape {
            x0: x.clone(),
            conv_out,
            pool_out,
            pool_idx,
            flat,
            emb,
        }
    }

    fn backward_chunk(&self, tape: &ChunkTape<F>, grad_emb: &Array2<F>) -> ParamGrads<F> {
        let n = tape.x0.shape()[0];
        let mut grads = self.zero_grads();
        let mut g_emb = grad_emb.clone();
        relu_backward_inplace(&mut g_emb, &tape.emb);
        let (gw, gb, g_flat) = self.embed.backward(tape.flat.view(), g_emb.view());
        let embed_w_id = 2 * self.convs.len();
        grads[embed_w_id] = gw.into_dyn();
        grads[embed_w_id + 1] = gb.into_dyn();

        // reshape flat gradient back to the last pooled activation shape
        let last = self.convs.len() - 1;
        let last_oc = self.convs[last].weight.shape()[0];
        let (_, h0, w0) = self.arch.in_shape;
        let levels = self.convs.len() as u32;
        let (hp, wp) = (h0 >> levels, w0 >> levels);
        let mut g_pool: Array4<F> = g_flat
            .into_shape_with_order((n, last_oc, hp, wp))
            .expect("unflatten gradient");

        for li in (0..self.convs.len()).rev() {
            let conv = &self.convs[li];
            let conv_act = &tape.conv_out[li];
            let idx = &tape.pool_idx[li];
            let (h, w) = (conv_act.shape()[2], conv_act.shape()[3]);
            let input: &Array4<F> = if li == 0 { &tape.x0 } else { &tape.pool_out[li - 1] };
            let mut gw_acc = ArrayD::<F>::zeros(conv.weight.raw_dim().into_dyn());
            let mut gb_acc = ArrayD::<F>::zeros(ndarray::IxDyn(&[conv.weight.shape()[0]]));
            let mut g_in_next: Option<Array4<F>> = if li > 0 {
                Some(Array4::zeros(input.raw_dim()))
            } else {
                None
            };
            for i in 0..n {
                let g_p = g_pool.index_axis(Axis(0), i);
                let ix = idx.index_axis(Axis(0), i).to_owned();
                let mut g_act = MaxPool2::backward(&ix, g_p, h, w);
                let act = conv_act
                    .index_axis(Axis(0), i)
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned();
                relu_backward_inplace(&mut g_act, &act);
                let (gw, gb, gin) = conv.backward_img(
                    input.index_axis(Axis(0), i).into_dimensionality::<Ix3>().unwrap(),
                    g_act.view(),
                    li > 0,
                );
                gw_acc += &gw.into_dyn();
                gb_acc += &gb.into_dyn();
                if let (Some(buf), Some(g)) = (g_in_next.as_mut(), gin) {
                    buf.index_axis_mut(Axis(0), i).assign(&g);
                }
            }
            grads[2 * li] = gw_acc;
            grads[2 * li + 1] = gb_acc;
            if let Some(g) = g_in_next {
                g_pool = g;
            }
        }
        grads
    }
}

/// Cached activations for one chunk.
pub struct ChunkTape<F> {
    x0: Array4<F>,
    conv_out: Vec<Array4<F>>,
    pool_out: Vec<Array4<F>>,
    pool_idx: Vec<Array4<u8>>,
    flat: Array2<F>,
    emb: Array2<F>,
}

/// Tapes for a whole batch plus the assembled embedding matrix.
pub struct BatchTapes<F> {
    pub emb: Array2<F>,
    chunks: Vec<ChunkTape<F>>,
}

fn make_names(n_convs: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * n_convs + 2);
    for i in 0..n_convs {
        names.push(format!("conv{}.weight", i + 1));
        names.push(format!("conv{}.bias", i + 1));
    }
    names.push("embed.weight".to_string());
    names.push("embed.bias".to_string());
    names
}

impl<F: Scalar> ParamModel<F> for ConvEncoder<F> {
    fn param_count(&self) -> usize {
        2 * self.convs.len() + 2
    }

    fn param_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    fn param_kind(&self, id: usize) -> ParamKind {
        if id % 2 == 0 {
            ParamKind::Weight
        } else {
            ParamKind::Bias
        }
    }

    fn param(&self, id: usize) -> ArrayViewD<'_, F> {
        let nc = self.convs.len();
        match id {
            i if i < 2 * nc && i % 2 == 0 => self.convs[i / 2].weight.view().into_dyn(),
            i if i < 2 * nc => self.convs[i / 2].bias.view().into_dyn(),
            i if i == 2 * nc => self.embed.weight.view().into_dyn(),
            i if i == 2 * nc + 1 => self.embed.bias.view().into_dyn(),
            _ => panic!("param id {id} out of range"),
        }
    }

    fn param_mut(&mut self, id: usize) -> ArrayViewMutD<'_, F> {
        let nc = self.convs.len();
        match id {
            i if i < 2 * nc && i % 2 == 0 => self.convs[i / 2].weight.view_mut().into_dyn(),
            i if i < 2 * nc => self.convs[i / 2].bias.view_mut().into_dyn(),
            i if i == 2 * nc => self.embed.weight.view_mut().into_dyn(),
            i if i == 2 * nc + 1 => self.embed.bias.view_mut().into_dyn(),
            _ => panic!("param id {id} out of range"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn tiny_arch() -> EncoderArch {
        EncoderArch {
            in_shape: (2, 8, 8),
            conv_channels: vec![3, 4],
            embed_dim: 6,
        }
    }

    #[test]
    fn arch_accounting() {
        let arch = tiny_arch();
        assert_eq!(arch.flat_dim(), 4 * 2 * 2);
        assert_eq!(
            arch.total_params(),
            (3 * 2 * 9 + 3) + (4 * 3 * 9 + 4) + (6 * 16 + 6)
        );
    }

    #[test]
    fn embed_matches_embed_train_and_is_chunk_invariant() {
        let mut rng = seeds::stream(3, "test/encoder", 0);
        let enc: ConvEncoder<f64> = ConvEncoder::init(tiny_arch(), &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((13, 2, 8, 8), || f64::standard_normal(&mut rng));
        let e1 = enc.embed(&x);
        let tapes = enc.embed_train(&x);
        assert_eq!(e1, tapes.emb);
    }

    #[test]
    fn encoder_backward_matches_finite_differences() {
        let mut rng = seeds::stream(4, "test/encoder-bwd", 0);
        let mut enc: ConvEncoder<f64> = ConvEncoder::init(tiny_arch(), &mut rng).unwrap();
        let x = Array4::from_shape_simple_fn((5, 2, 8, 8), || f64::standard_normal(&mut rng) * 0.7);
        let gout = Array2::from_shape_simple_fn((5, 6), || f64::standard_normal(&mut rng));
        let tapes = enc.embed_train(&x);
        let grads = enc.backward_batch(&tapes, &gout).unwrap();

        let eps = 1e-6;
        // probe a few coordinates in every tensor
        for id in 0..enc.param_count() {
            let len = enc.param(id).len();
            for &k in &[0usize, len / 3, len - 1] {
                let orig = enc.param(id).as_slice_memory_order().unwrap()[k];
                {
                    let mut v = enc.param_mut(id);
                    v.as_slice_memory_order_mut().unwrap()[k] = orig + eps;
                }
                let up = (&enc.embed(&x) * &gout).sum();
                {
                    let mut v = enc.param_mut(id);
                    v.as_slice_memory_order_mut().unwrap()[k] = orig - eps;
                }
                let dn = (&enc.embed(&x) * &gout).sum();
                {
                    let mut v = enc.param_mut(id);
                    v.as_slice_memory_order_mut().unwrap()[k] = orig;
                }
                let fd = (up - dn) / (2.0 * eps);
                let an = grads[id].as_slice_memory_order().unwrap()[k];
                assert!(
                    (an - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "param {id} elem {k}: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
