//! Frozen causal transformer text encoder.
//!
//! ```text
//! x + pos → [LN → causal MHA → (+) → LN → MLP(QuickGELU) → (+)] × L
//!         → LN(row at eot) → · projection → feature
//! ```
//!
//! The backward pass only produces gradients with respect to the input
//! embedding rows; weight gradients are never formed.

mod weights;

pub use weights::{tensor_schema, BlockWeights, EncoderConfig, EncoderWeights};

use crate::error::{Error, Result};
use crate::numerics::{
    layer_norm_row, layer_norm_row_backward, quick_gelu_grad, quick_gelu_scalar, softmax_in_place,
    NormStats, Scalar, Tensor,
};

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: Vec<NormStats<T>>,
    /// `[n, 3w]` fused query/key/value activations.
    qkv: Tensor<T>,
    /// Per head `[n, n]` attention probabilities, zero above the diagonal.
    probs: Vec<Tensor<T>>,
    ln2: Vec<NormStats<T>>,
    /// `[n, 4w]` MLP pre-activations.
    mlp_pre: Tensor<T>,
}

/// Activations saved by [`EncoderWeights::encode_sequence`] for the backward pass.
///
/// Only rows `0..=eot_index` are ever computed; later rows cannot influence the
/// feature under the causal mask.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input_len: usize,
    eot_index: usize,
    width: usize,
    output_dim: usize,
    layers: Vec<LayerCache<T>>,
    final_norm: NormStats<T>,
}

impl<T> ForwardCache<T> {
    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn eot_index(&self) -> usize {
        self.eot_index
    }
}

impl<T: Scalar> EncoderWeights<T> {
    /// Gathers rows of the token table. Positional embeddings are added later.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let w = self.config.width;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Vocabulary {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(self.token_table.row(id as usize));
        }
        Tensor::from_vec(&[ids.len(), w], data)
    }

    /// Encodes a sequence of input embeddings `[len, w]` to the unnormalized
    /// joint-space feature read at `eot_index`.
    pub fn encode_sequence(
        &self,
        embeddings: &Tensor<T>,
        eot_index: usize,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        let w = cfg.width;
        let len = embeddings.rows();
        if embeddings.shape() != [len, w] {
            return Err(Error::Dimension {
                op: "encode_sequence",
                left: embeddings.shape().to_vec(),
                right: vec![len, w],
            });
        }
        if len > cfg.max_positions {
            return Err(Error::SequenceLength {
                len,
                max: cfg.max_positions,
            });
        }
        if eot_index >= len {
            return Err(Error::Contract(format!(
                "eot index {eot_index} outside sequence of length {len}"
            )));
        }
        let n = eot_index + 1;
        let eps = T::lit(cfg.eps);

        let mut h = Tensor::zeros(&[n, w]);
        for t in 0..n {
            for ((o, &e), &p) in h
                .row_mut(t)
                .iter_mut()
                .zip(embeddings.row(t))
                .zip(self.positional.row(t))
            {
                *o = e + p;
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for block in &self.blocks {
            let (a, ln1) = norm_rows(&h, &block.ln1_gain, &block.ln1_bias, eps);
            let mut qkv = a.matmul(&block.qkv_weight)?;
            add_bias(&mut qkv, &block.qkv_bias);
            let (concat, probs) = self.attend(&qkv, n);
            let mut attn = concat.matmul(&block.out_weight)?;
            add_bias(&mut attn, &block.out_bias);
            h.add_assign(&attn)?;

            let (m, ln2) = norm_rows(&h, &block.ln2_gain, &block.ln2_bias, eps);
            let mut mlp_pre = m.matmul(&block.fc_weight)?;
            add_bias(&mut mlp_pre, &block.fc_bias);
            let act = mlp_pre.map(quick_gelu_scalar);
            let mut mlp = act.matmul(&block.proj_weight)?;
            add_bias(&mut mlp, &block.proj_bias);
            h.add_assign(&mlp)?;

            layers.push(LayerCache {
                ln1,
                qkv,
                probs,
                ln2,
                mlp_pre,
            });
        }

        let mut last = vec![T::zero(); w];
        let final_norm = layer_norm_row(
            h.row(eot_index),
            self.ln_final_gain.data(),
            self.ln_final_bias.data(),
            eps,
            &mut last,
        );
        let last = Tensor::from_vec(&[1, w], last)?;
        let feature = last.matmul(&self.projection)?.reshape(&[cfg.output_dim])?;

        let cache = ForwardCache {
            input_len: len,
            eot_index,
            width: w,
            output_dim: cfg.output_dim,
            layers,
            final_norm,
        };
        Ok((feature, cache))
    }

    /// Causal multi-head attention over `qkv` `[n, 3w]`; returns the
    /// concatenated head outputs `[n, w]` and per-head probabilities.
    fn attend(&self, qkv: &Tensor<T>, n: usize) -> (Tensor<T>, Vec<Tensor<T>>) {
        let w = self.config.width;
        let hd = self.config.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut concat = Tensor::zeros(&[n, w]);
        let mut probs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let (qo, ko, vo) = (head * hd, w + head * hd, 2 * w + head * hd);
            let mut p = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let q = &qkv.row(i)[qo..qo + hd];
                let row = &mut p.row_mut(i)[..=i];
                for (j, s) in row.iter_mut().enumerate() {
                    let k = &qkv.row(j)[ko..ko + hd];
                    *s = crate::numerics::dot(q, k) * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let out = &mut concat.row_mut(i)[qo..qo + hd];
                for j in 0..=i {
                    let pij = p.row(i)[j];
                    let v = &qkv.row(j)[vo..vo + hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        (concat, probs)
    }

    /// Gradient of `d_feature · feature` with respect to every input embedding
    /// row, `[len, w]`. Rows after the eot position are zero.
    pub fn encode_backward(&self, cache: &ForwardCache<T>, d_feature: &[T]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let w = cfg.width;
        if cache.output_dim != cfg.output_dim
            || cache.width != w
            || cache.layers.len() != cfg.layers
            || d_feature.len() != cfg.output_dim
        {
            return Err(Error::Contract(format!(
                "cache (w={}, d={}, layers={}) and feature gradient of length {} do not match encoder (w={}, d={}, layers={})",
                cache.width,
                cache.output_dim,
                cache.layers.len(),
                d_feature.len(),
                w,
                cfg.output_dim,
                cfg.layers
            )));
        }
        let n = cache.eot_index + 1;

        // Through the projection and the final layer norm of the eot row.
        let d_out = Tensor::from_vec(&[1, cfg.output_dim], d_feature.to_vec())?;
        let d_last = d_out.matmul_t(&self.projection)?;
        let mut dh = Tensor::zeros(&[n, w]);
        layer_norm_row_backward(
            d_last.data(),
            &cache.final_norm,
            self.ln_final_gain.data(),
            dh.row_mut(cache.eot_index),
        );

        for (block, lc) in self.blocks.iter().zip(&cache.layers).rev() {
            // MLP branch; the residual path carries `dh` through unchanged.
            let d_act = dh.matmul_t(&block.proj_weight)?;
            let mut d_pre = d_act;
            for (g, &u) in d_pre.data_mut().iter_mut().zip(lc.mlp_pre.data()) {
                *g *= quick_gelu_grad(u);
            }
            let d_m = d_pre.matmul_t(&block.fc_weight)?;
            for t in 0..n {
                layer_norm_row_backward(d_m.row(t), &lc.ln2[t], block.ln2_gain.data(), dh.row_mut(t));
            }

            // Attention branch.
            let d_concat = dh.matmul_t(&block.out_weight)?;
            let d_qkv = self.attend_backward(&d_concat, lc, n);
            let d_a = d_qkv.matmul_t(&block.qkv_weight)?;
            for t in 0..n {
                layer_norm_row_backward(d_a.row(t), &lc.ln1[t], block.ln1_gain.data(), dh.row_mut(t));
            }
        }

        let mut grad = Tensor::zeros(&[cache.input_len, w]);
        grad.data_mut()[..n * w].copy_from_slice(dh.data());
        Ok(grad)
    }

    fn attend_backward(&self, d_concat: &Tensor<T>, lc: &LayerCache<T>, n: usize) -> Tensor<T> {
        let w = self.config.width;
        let hd = self.config.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let qkv = &lc.qkv;
        let mut d_qkv = Tensor::zeros(&[n, 3 * w]);
        for (head, p) in lc.probs.iter().enumerate() {
            let (qo, ko, vo) = (head * hd, w + head * hd, 2 * w + head * hd);
            for i in 0..n {
                let d_o = &d_concat.row(i)[qo..qo + hd];
                let p_row = &p.row(i)[..=i];
                // dP_ij = dO_i · V_j, then the softmax Jacobian.
                let d_p: Vec<T> = (0..=i)
                    .map(|j| crate::numerics::dot(d_o, &qkv.row(j)[vo..vo + hd]))
                    .collect();
                let weighted: T = p_row.iter().zip(&d_p).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    let pij = p_row[j];
                    // dV_j += P_ij dO_i
                    for (g, &v) in d_qkv.row_mut(j)[vo..vo + hd].iter_mut().zip(d_o) {
                        *g += pij * v;
                    }
                    let d_s = pij * (d_p[j] - weighted) * scale;
                    if d_s == T::zero() {
                        continue;
                    }
                    for c in 0..hd {
                        let kj = qkv.row(j)[ko + c];
                        let qi = qkv.row(i)[qo + c];
                        d_qkv.row_mut(i)[qo + c] += d_s * kj;
                        d_qkv.row_mut(j)[ko + c] += d_s * qi;
                    }
                }
            }
        }
        d_qkv
    }
}

fn norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Vec<NormStats<T>>) {
    let mut out = Tensor::zeros(x.shape());
    let stats = (0..x.rows())
        .map(|t| layer_norm_row(x.row(t), gain.data(), bias.data(), eps, out.row_mut(t)))
        .collect();
    (out, stats)
}

fn add_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) {
    let b = bias.data();
    for t in 0..x.rows() {
        for (v, &bb) in x.row_mut(t).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, max_relative_error, SeededRng};

    fn toy(seed: u64) -> EncoderWeights<f64> {
        EncoderWeights::from_seed(EncoderConfig::toy(), seed).unwrap()
    }

    fn random_input(rng: &mut SeededRng, len: usize, w: usize, std: f64) -> Tensor<f64> {
        Tensor::from_vec(&[len, w], (0..len * w).map(|_| rng.gaussian(0.0, std)).collect()).unwrap()
    }

    #[test]
    fn embed_tokens_gathers_rows() {
        let enc = toy(1);
        let e = enc.embed_tokens(&[0]).unwrap();
        assert_eq!(e.data(), enc.token_table.row(0));
        let e = enc.embed_tokens(&[5, 5, 9]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(2), enc.token_table.row(9));
        let err = enc.embed_tokens(&[3, 128]).unwrap_err();
        assert!(matches!(err, Error::Vocabulary { id: 128, .. }));
    }

    #[test]
    fn rejects_overlong_sequence() {
        let enc = toy(1);
        let x = Tensor::zeros(&[33, 64]);
        assert!(matches!(
            enc.encode_sequence(&x, 5),
            Err(Error::SequenceLength { len: 33, max: 32 })
        ));
    }

    #[test]
    fn tokens_after_eot_do_not_matter() {
        let enc = toy(3);
        let mut rng = SeededRng::new(4);
        let x = random_input(&mut rng, 10, 64, 0.5);
        let (f1, _) = enc.encode_sequence(&x, 6).unwrap();
        let mut y = x.clone();
        for v in y.data_mut()[7 * 64..].iter_mut() {
            *v += 1.0;
        }
        let (f2, _) = enc.encode_sequence(&y, 6).unwrap();
        assert_eq!(f1, f2);
        let truncated = Tensor::from_vec(&[7, 64], x.data()[..7 * 64].to_vec()).unwrap();
        let (f3, _) = enc.encode_sequence(&truncated, 6).unwrap();
        assert_eq!(f1, f3);
    }

    #[test]
    fn zero_feature_gradient_gives_zero() {
        let enc = toy(2);
        let mut rng = SeededRng::new(5);
        let x = random_input(&mut rng, 8, 64, 0.5);
        let (_, cache) = enc.encode_sequence(&x, 5).unwrap();
        let g = enc.encode_backward(&cache, &[0.0; 32]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_rows_after_eot_are_zero() {
        let enc = toy(2);
        let mut rng = SeededRng::new(6);
        let x = random_input(&mut rng, 9, 64, 0.5);
        let (_, cache) = enc.encode_sequence(&x, 4).unwrap();
        let d: Vec<f64> = (0..32).map(|_| rng.gaussian(0.0, 1.0)).collect();
        let g = enc.encode_backward(&cache, &d).unwrap();
        assert_eq!(g.shape(), &[9, 64]);
        assert!(g.data()[5 * 64..].iter().all(|&v| v == 0.0));
        assert!(g.row(4).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_is_linear_in_feature_gradient() {
        let enc = toy(7);
        let mut rng = SeededRng::new(8);
        let x = random_input(&mut rng, 6, 64, 0.5);
        let (_, cache) = enc.encode_sequence(&x, 5).unwrap();
        let d: Vec<f64> = (0..32).map(|_| rng.gaussian(0.0, 1.0)).collect();
        let g1 = enc.encode_backward(&cache, &d).unwrap();
        let d3: Vec<f64> = d.iter().map(|v| v * -2.5).collect();
        let g3 = enc.encode_backward(&cache, &d3).unwrap();
        for (a, b) in g1.data().iter().zip(g3.data()) {
            assert!((a * -2.5 - b).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let enc = toy(7);
        let x = Tensor::zeros(&[3, 64]);
        let (_, cache) = enc.encode_sequence(&x, 2).unwrap();
        assert!(matches!(enc.encode_backward(&cache, &[0.0; 31]), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 1..=5u64 {
            let enc = toy(seed);
            let mut rng = SeededRng::new(100 + seed);
            let x = random_input(&mut rng, 7, 64, 1.0);
            let eot = 6;
            let d: Vec<f64> = (0..32).map(|_| rng.gaussian(0.0, 1.0)).collect();
            let (_, cache) = enc.encode_sequence(&x, eot).unwrap();
            let analytic = enc.encode_backward(&cache, &d).unwrap();
            let numeric = finite_difference_grad(
                |probe| {
                    let (f, _) = enc.encode_sequence(probe, eot).unwrap();
                    crate::numerics::dot(f.data(), &d)
                },
                &x,
                1e-3,
            )
            .unwrap();
            let floor = 1e-3 * numeric.max_abs();
            let err = max_relative_error(analytic.data(), numeric.data(), floor);
            assert!(err <= 1e-4, "seed {seed}: max relative error {err:e}");
        }
    }
}
