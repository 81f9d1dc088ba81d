//! The optimized forward pass checked against a direct f64 transcription of
//! the GPT-2 block, plus cache and causality properties.

use notestream_core::model::{init_random, WeightStore};
use notestream_core::tokenizer::TokenId;
use notestream_core::{Model, ModelConfig, Preset, VocabSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> ModelConfig {
    Preset::Toy.config(VocabSpec::default().vocab_size())
}

fn tensor(w: &WeightStore, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data.iter().map(|&v| v as f64).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

// w is [in, out] row-major
fn matvec(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_forward(cfg: &ModelConfig, w: &WeightStore, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let hd = d / cfg.n_heads;
    let eps = cfg.layernorm_eps as f64;
    let wte = tensor(w, "wte");
    let wpe = tensor(w, "wpe");
    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|k| wte[t as usize * d + k] + wpe[p * d + k]).collect())
        .collect();
    for l in 0..cfg.n_layers {
        let t = |s: &str| tensor(w, &format!("h.{l}.{s}"));
        let (ln1g, ln1b) = (t("ln_1.weight"), t("ln_1.bias"));
        let (aw, ab) = (t("attn.c_attn.weight"), t("attn.c_attn.bias"));
        let (pw, pb) = (t("attn.c_proj.weight"), t("attn.c_proj.bias"));
        let (ln2g, ln2b) = (t("ln_2.weight"), t("ln_2.bias"));
        let (fw, fb) = (t("mlp.c_fc.weight"), t("mlp.c_fc.bias"));
        let (mw, mb) = (t("mlp.c_proj.weight"), t("mlp.c_proj.bias"));

        let qkv: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| matvec(&layer_norm(x, &ln1g, &ln1b, eps), &aw, &ab))
            .collect();
        let mut next = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let mut att = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let q = &qkv[i][h * hd..(h + 1) * hd];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let k = &qkv[j][d + h * hd..d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for k in 0..hd {
                        att[h * hd + k] += ej / z * qkv[j][2 * d + h * hd + k];
                    }
                }
            }
            let proj = matvec(&att, &pw, &pb);
            let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let ff: Vec<f64> = matvec(&layer_norm(&x1, &ln2g, &ln2b, eps), &fw, &fb)
                .into_iter()
                .map(gelu)
                .collect();
            let out = matvec(&ff, &mw, &mb);
            next.push(x1.iter().zip(&out).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let (gf, bf) = (tensor(w, "ln_f.weight"), tensor(w, "ln_f.bias"));
    let head = if cfg.tie_embeddings { wte } else { tensor(w, "lm_head.weight") };
    xs.iter()
        .map(|x| {
            let h = layer_norm(x, &gf, &bf, eps);
            head.chunks_exact(d)
                .map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

#[test]
fn full_forward_matches_naive_reference() {
    let cfg = toy();
    let weights = init_random(&cfg, 5);
    let model = Model::new(cfg, weights.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in [1usize, 7, 48] {
        let tokens = random_tokens(&mut rng, len, cfg.vocab_size);
        let fast = model.forward_full(&tokens).unwrap();
        let slow = reference_forward(&cfg, &weights, &tokens);
        let mut worst = 0.0f64;
        for (i, row) in slow.iter().enumerate() {
            for (a, b) in fast.row(i).iter().zip(row) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
        assert!(worst < 1e-5, "len {len}: max abs diff {worst}");
    }
}

#[test]
fn untied_head_matches_reference() {
    let cfg = ModelConfig {
        tie_embeddings: false,
        vocab_size: 300,
        ..toy()
    };
    let weights = init_random(&cfg, 9);
    let model = Model::new(cfg, weights.clone()).unwrap();
    let tokens: Vec<TokenId> = (0..20).map(|i| (i * 37) % 300).collect();
    let fast = model.forward_full(&tokens).unwrap();
    let slow = reference_forward(&cfg, &weights, &tokens);
    for (i, row) in slow.iter().enumerate() {
        for (a, b) in fast.row(i).iter().zip(row) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let cfg = toy();
    let model = Model::new(cfg, init_random(&cfg, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = random_tokens(&mut rng, 120, cfg.vocab_size);
    let full = model.forward_full(&tokens).unwrap();

    // one token at a time
    let mut cache = model.new_cache();
    for (i, &t) in tokens.iter().enumerate() {
        let step = model.forward_step(t, &mut cache).unwrap();
        let diff = step.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-4, "position {i}: {diff}");
    }
    assert_eq!(cache.len(), tokens.len());

    // prefill then step
    let mut cache = model.new_cache();
    let last = model.prefill(&tokens[..80], &mut cache).unwrap();
    let diff = last.iter().zip(full.row(79)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-4);
    for (i, &t) in tokens.iter().enumerate().skip(80) {
        let step = model.forward_step(t, &mut cache).unwrap();
        let diff = step.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-4, "position {i}: {diff}");
    }
}

#[test]
fn future_tokens_do_not_change_past_logits() {
    let cfg = toy();
    let model = Model::new(cfg, init_random(&cfg, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut a = random_tokens(&mut rng, 40, cfg.vocab_size);
    let base = model.forward_full(&a).unwrap();
    for k in [39usize, 25, 10] {
        a[k] = (a[k] + 1) % cfg.vocab_size as TokenId;
        let perturbed = model.forward_full(&a).unwrap();
        for i in 0..k {
            assert_eq!(base.row(i), perturbed.row(i), "row {i} changed after editing {k}");
        }
        assert_ne!(base.row(k), perturbed.row(k));
    }
}

#[test]
fn debug_checks_pass_on_random_weights() {
    let cfg = toy();
    let model = Model::new(cfg, init_random(&cfg, 6)).unwrap().with_debug_checks(true);
    let tokens: Vec<TokenId> = (0..64).map(|i| i * 401).collect();
    model.forward_full(&tokens).unwrap();
}
