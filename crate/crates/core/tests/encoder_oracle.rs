//! Straight-line re-implementation of the text encoder used as a forward
//! oracle: full-length masked attention, no caches, nested `Vec`s.

use eco_core::encoder::{EncoderConfig, EncoderWeights};
use eco_core::numerics::{SeededRng, Tensor};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn linear(x: &Mat, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Mat {
    let (k, m) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..m)
                .map(|j| {
                    let s: f64 = (0..k).map(|i| row[i] * w.data()[i * m + j]).sum();
                    s + b.map_or(0.0, |b| b.data()[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &Tensor<f64>, b: &Tensor<f64>, eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

fn oracle_encode(w: &EncoderWeights<f64>, emb: &Tensor<f64>, eot: usize) -> Vec<f64> {
    let c = w.config;
    let len = emb.rows();
    let hd = c.width / c.heads;
    let mut h: Mat = (0..len)
        .map(|t| (0..c.width).map(|i| emb.row(t)[i] + w.positional.row(t)[i]).collect())
        .collect();
    for b in &w.blocks {
        let a = layer_norm(&h, &b.ln1_gain, &b.ln1_bias, c.eps);
        let qkv = linear(&a, &b.qkv_weight, Some(&b.qkv_bias));
        let mut concat = vec![vec![0.0; c.width]; len];
        for head in 0..c.heads {
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        if j > i {
                            f64::NEG_INFINITY
                        } else {
                            (0..hd)
                                .map(|e| qkv[i][head * hd + e] * qkv[j][c.width + head * hd + e])
                                .sum::<f64>()
                                / (hd as f64).sqrt()
                        }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..hd {
                    concat[i][head * hd + e] = (0..len)
                        .map(|j| exps[j] / z * qkv[j][2 * c.width + head * hd + e])
                        .sum();
                }
            }
        }
        let attn = linear(&concat, &b.out_weight, Some(&b.out_bias));
        for (hr, ar) in h.iter_mut().zip(&attn) {
            for (x, y) in hr.iter_mut().zip(ar) {
                *x += y;
            }
        }
        let m = layer_norm(&h, &b.ln2_gain, &b.ln2_bias, c.eps);
        let pre = linear(&m, &b.fc_weight, Some(&b.fc_bias));
        let act: Mat = pre
            .iter()
            .map(|r| r.iter().map(|&x| x / (1.0 + (-1.702 * x).exp())).collect())
            .collect();
        let mlp = linear(&act, &b.proj_weight, Some(&b.proj_bias));
        for (hr, mr) in h.iter_mut().zip(&mlp) {
            for (x, y) in hr.iter_mut().zip(mr) {
                *x += y;
            }
        }
    }
    let last = layer_norm(&vec![h[eot].clone()], &w.ln_final_gain, &w.ln_final_bias, c.eps);
    linear(&last, &w.projection, None).remove(0)
}

fn random_input(rng: &mut SeededRng, len: usize, w: usize) -> Tensor<f64> {
    Tensor::from_vec(&[len, w], (0..len * w).map(|_| rng.gaussian(0.0, 1.0)).collect()).unwrap()
}

#[test]
fn matches_oracle_on_toy_config() {
    for seed in 1..=3 {
        let w: EncoderWeights<f64> = EncoderWeights::from_seed(EncoderConfig::toy(), seed).unwrap();
        let mut rng = SeededRng::new(seed + 50);
        let x = random_input(&mut rng, 9, 64);
        for eot in [0, 4, 8] {
            let (f, _) = w.encode_sequence(&x, eot).unwrap();
            let expect = oracle_encode(&w, &x, eot);
            for (a, b) in f.data().iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "seed {seed} eot {eot}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_precision_tracks_double() {
    let w64: EncoderWeights<f64> = EncoderWeights::from_seed(EncoderConfig::toy(), 4).unwrap();
    let w32: EncoderWeights<f32> = w64.cast();
    let x = random_input(&mut SeededRng::new(4), 6, 64);
    let (f64_out, _) = w64.encode_sequence(&x, 5).unwrap();
    let (f32_out, _) = w32.encode_sequence(&x.cast(), 5).unwrap();
    for (a, &b) in f64_out.data().iter().zip(f32_out.data()) {
        assert!((a - b as f64).abs() <= 1e-4 * a.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_match_oracle(
        seed in 0u64..1000,
        layers in 1usize..3,
        heads in 1usize..4,
        head_dim in 1usize..5,
        out in 1usize..6,
        len in 1usize..7,
    ) {
        let config = EncoderConfig {
            layers,
            heads,
            width: heads * head_dim,
            output_dim: out,
            max_positions: 8,
            vocab_size: 10,
            eps: 1e-5,
        };
        let mut w: EncoderWeights<f64> = EncoderWeights::from_seed(config, seed).unwrap();
        // Larger weights so attention is far from uniform.
        for b in &mut w.blocks {
            b.qkv_weight = b.qkv_weight.scale(20.0);
            b.fc_weight = b.fc_weight.scale(20.0);
        }
        let mut rng = SeededRng::new(seed);
        let x = random_input(&mut rng, len, config.width);
        let eot = rng.below(len);
        let (f, _) = w.encode_sequence(&x, eot).unwrap();
        let expect = oracle_encode(&w, &x, eot);
        for (a, b) in f.data().iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
