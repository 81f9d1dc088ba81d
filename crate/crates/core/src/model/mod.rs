//! GPT-2 style decoder-only transformer with incremental KV-cached decoding.
//!
//! Pre-norm blocks (layernorm before attention and before the MLP), learned
//! positional embeddings, tanh-approximated GELU, and an LM head tied to the
//! token embedding unless the config says otherwise. All math is f32.

mod config;
mod weights;

pub use config::{ModelConfig, Preset};
pub use weights::{
    init_random, load_weights, manifest_path, read_manifest, Manifest, Tensor, TensorEntry,
    WeightStore, WeightsError,
};

use std::ops::Range;

use thiserror::Error;

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context overflow: {requested} positions requested, capacity is {capacity}")]
    ContextOverflow { requested: usize, capacity: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("attention row at position {position} sums to {sum}")]
    AttentionNotNormalized { position: usize, sum: f32 },
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

/// Row-major `rows x cols` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-layer keys and values for the positions decoded so far.
#[derive(Debug, Clone)]
pub struct KVCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    capacity: usize,
}

impl KVCache {
    pub fn new(config: &ModelConfig) -> Self {
        KVCache {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            len: 0,
            capacity: config.context_len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reset(&mut self) {
        for k in &mut self.keys {
            k.clear();
        }
        for v in &mut self.values {
            v.clear();
        }
        self.len = 0;
    }
}

struct Layer {
    ln1_w: Vec<f32>,
    ln1_b: Vec<f32>,
    attn_w: Vec<f32>,
    attn_b: Vec<f32>,
    proj_w: Vec<f32>,
    proj_b: Vec<f32>,
    ln2_w: Vec<f32>,
    ln2_b: Vec<f32>,
    fc_w: Vec<f32>,
    fc_b: Vec<f32>,
    fc_proj_w: Vec<f32>,
    fc_proj_b: Vec<f32>,
}

/// A loaded model. Immutable and shareable across threads; decoding state
/// lives in [`KVCache`].
pub struct Model {
    config: ModelConfig,
    wte: Vec<f32>,
    wpe: Vec<f32>,
    layers: Vec<Layer>,
    lnf_w: Vec<f32>,
    lnf_b: Vec<f32>,
    lm_head: Option<Vec<f32>>,
    debug_checks: bool,
}

impl Model {
    pub fn new(config: ModelConfig, mut weights: WeightStore) -> Result<Self, ModelError> {
        config.validate()?;
        weights.validate(&config)?;
        let mut take = |name: &str| {
            weights
                .remove(name)
                .map(|t| t.data)
                .ok_or_else(|| WeightsError::MissingTensor(name.to_string()))
        };
        let wte = take("wte")?;
        let wpe = take("wpe")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut t = |s: &str| take(&format!("h.{l}.{s}"));
            layers.push(Layer {
                ln1_w: t("ln_1.weight")?,
                ln1_b: t("ln_1.bias")?,
                attn_w: t("attn.c_attn.weight")?,
                attn_b: t("attn.c_attn.bias")?,
                proj_w: t("attn.c_proj.weight")?,
                proj_b: t("attn.c_proj.bias")?,
                ln2_w: t("ln_2.weight")?,
                ln2_b: t("ln_2.bias")?,
                fc_w: t("mlp.c_fc.weight")?,
                fc_b: t("mlp.c_fc.bias")?,
                fc_proj_w: t("mlp.c_proj.weight")?,
                fc_proj_b: t("mlp.c_proj.bias")?,
            });
        }
        let lnf_w = take("ln_f.weight")?;
        let lnf_b = take("ln_f.bias")?;
        let lm_head = if config.tie_embeddings {
            None
        } else {
            Some(take("lm_head.weight")?)
        };
        Ok(Model {
            config,
            wte,
            wpe,
            layers,
            lnf_w,
            lnf_b,
            lm_head,
            debug_checks: false,
        })
    }

    /// Check that every attention softmax row sums to one (within 1e-4) and
    /// fail with [`ModelError::AttentionNotNormalized`] otherwise.
    pub fn with_debug_checks(mut self, on: bool) -> Self {
        self.debug_checks = on;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn new_cache(&self) -> KVCache {
        KVCache::new(&self.config)
    }

    /// Logits for every position of `tokens`, computed from scratch.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Logits, ModelError> {
        let mut cache = self.new_cache();
        let data = self.forward_block(tokens, &mut cache, LogitRows::All)?;
        Ok(Logits {
            rows: tokens.len(),
            cols: self.config.vocab_size,
            data,
        })
    }

    /// Decode one token on top of `cache`, returning next-token logits.
    pub fn forward_step(&self, token: TokenId, cache: &mut KVCache) -> Result<Vec<f32>, ModelError> {
        self.forward_block(&[token], cache, LogitRows::Last)
    }

    /// Like [`forward_step`](Self::forward_step), but only the logits for ids
    /// in `ids` are computed; every other entry is `f32::MIN`.
    pub fn forward_step_within(
        &self,
        token: TokenId,
        cache: &mut KVCache,
        ids: Range<usize>,
    ) -> Result<Vec<f32>, ModelError> {
        self.forward_block(&[token], cache, LogitRows::LastWithin(ids))
    }

    /// Append a block of tokens to `cache` and return the logits of the last
    /// one only.
    pub fn prefill(&self, tokens: &[TokenId], cache: &mut KVCache) -> Result<Vec<f32>, ModelError> {
        self.forward_block(tokens, cache, LogitRows::Last)
    }

    /// [`prefill`](Self::prefill) restricted to the ids in `ids`.
    pub fn prefill_within(
        &self,
        tokens: &[TokenId],
        cache: &mut KVCache,
        ids: Range<usize>,
    ) -> Result<Vec<f32>, ModelError> {
        self.forward_block(tokens, cache, LogitRows::LastWithin(ids))
    }

    fn forward_block(
        &self,
        tokens: &[TokenId],
        cache: &mut KVCache,
        rows: LogitRows,
    ) -> Result<Vec<f32>, ModelError> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        let start = cache.len;
        if start + n > cfg.context_len {
            return Err(ModelError::ContextOverflow {
                requested: start + n,
                capacity: cfg.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let mut x = vec![0.0f32; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &self.wte[tok as usize * d..(tok as usize + 1) * d];
            let pe = &self.wpe[(start + i) * d..(start + i + 1) * d];
            for ((o, a), b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }

        let mut h = vec![0.0f32; n * d];
        let mut qkv = vec![0.0f32; n * 3 * d];
        let mut attn = vec![0.0f32; n * d];
        let mut proj = vec![0.0f32; n * d];
        let mut ff = vec![0.0f32; n * cfg.d_ff];
        let mut scores = vec![0.0f32; start + n];
        for (l, layer) in self.layers.iter().enumerate() {
            layer_norm(&x, &layer.ln1_w, &layer.ln1_b, cfg.layernorm_eps, &mut h);
            linear(&h, &layer.attn_w, &layer.attn_b, d, 3 * d, &mut qkv);
            for row in qkv.chunks_exact(3 * d) {
                cache.keys[l].extend_from_slice(&row[d..2 * d]);
                cache.values[l].extend_from_slice(&row[2 * d..]);
            }
            self.attention(&qkv, &cache.keys[l], &cache.values[l], start, &mut scores, &mut attn)?;
            linear(&attn, &layer.proj_w, &layer.proj_b, d, d, &mut proj);
            add_assign(&mut x, &proj);

            layer_norm(&x, &layer.ln2_w, &layer.ln2_b, cfg.layernorm_eps, &mut h);
            linear(&h, &layer.fc_w, &layer.fc_b, d, cfg.d_ff, &mut ff);
            ff.iter_mut().for_each(|v| *v = gelu(*v));
            linear(&ff, &layer.fc_proj_w, &layer.fc_proj_b, cfg.d_ff, d, &mut proj);
            add_assign(&mut x, &proj);
        }
        cache.len += n;

        let (first, ids) = match rows {
            LogitRows::All => (0, 0..cfg.vocab_size),
            LogitRows::Last => (n - 1, 0..cfg.vocab_size),
            LogitRows::LastWithin(r) => (n - 1, r.start.min(cfg.vocab_size)..r.end.min(cfg.vocab_size)),
        };
        let tail = &x[first * d..];
        let mut normed = vec![0.0f32; tail.len()];
        layer_norm(tail, &self.lnf_w, &self.lnf_b, cfg.layernorm_eps, &mut normed);
        let head = self.lm_head.as_deref().unwrap_or(&self.wte);
        let head = &head[ids.start * d..ids.end * d];
        let mut out = vec![f32::MIN; (n - first) * cfg.vocab_size];
        for (hrow, orow) in normed.chunks_exact(d).zip(out.chunks_exact_mut(cfg.vocab_size)) {
            project(hrow, head, &mut orow[ids.clone()]);
        }
        Ok(out)
    }

    /// Causal multi-head attention for the new rows in `qkv`. `keys` and
    /// `values` already contain the new positions.
    fn attention(
        &self,
        qkv: &[f32],
        keys: &[f32],
        values: &[f32],
        start: usize,
        scores: &mut [f32],
        out: &mut [f32],
    ) -> Result<(), ModelError> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        out.fill(0.0);
        for (i, row) in qkv.chunks_exact(3 * d).enumerate() {
            let pos = start + i;
            let visible = pos + 1;
            for head in 0..self.config.n_heads {
                let q = &row[head * hd..(head + 1) * hd];
                let s = &mut scores[..visible];
                for (j, sj) in s.iter_mut().enumerate() {
                    *sj = dot(q, &keys[j * d + head * hd..j * d + (head + 1) * hd]) * scale;
                }
                softmax_in_place(s);
                if self.debug_checks {
                    let sum: f32 = s.iter().sum();
                    if (sum - 1.0).abs() > 1e-4 {
                        return Err(ModelError::AttentionNotNormalized { position: pos, sum });
                    }
                }
                let o = &mut out[i * d + head * hd..i * d + (head + 1) * hd];
                for (j, &w) in s.iter().enumerate() {
                    let v = &values[j * d + head * hd..j * d + (head + 1) * hd];
                    for (oo, vv) in o.iter_mut().zip(v) {
                        *oo += w * vv;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone)]
enum LogitRows {
    All,
    Last,
    LastWithin(Range<usize>),
}

fn layer_norm(x: &[f32], w: &[f32], b: &[f32], eps: f32, out: &mut [f32]) {
    let d = w.len();
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f32>() / d as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for (((o, &v), &g), &bb) in or.iter_mut().zip(xr).zip(w).zip(b) {
            *o = (v - mean) * inv * g + bb;
        }
    }
}

/// `out[n, out_dim] = x[n, in_dim] * w[in_dim, out_dim] + b`
fn linear(x: &[f32], w: &[f32], b: &[f32], in_dim: usize, out_dim: usize, out: &mut [f32]) {
    for (xr, or) in x.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        or.copy_from_slice(b);
        for (&xi, wrow) in xr.iter().zip(w.chunks_exact(out_dim)) {
            for (o, &wv) in or.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_in_place(s: &mut [f32]) {
    let max = s.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in s.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in s.iter_mut() {
        *v /= sum;
    }
}

/// `out[r] = dot(h, rows[r])`, with an AVX2 build of the same loop picked at
/// runtime. Lanes accumulate independently, so both paths give identical bits.
fn project(h: &[f32], rows: &[f32], out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { project_avx2(h, rows, out) };
        return;
    }
    project_generic(h, rows, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn project_avx2(h: &[f32], rows: &[f32], out: &mut [f32]) {
    use std::arch::x86_64::*;
    let d = h.len();
    let full = d / 8 * 8;
    for (o, w) in out.iter_mut().zip(rows.chunks_exact(d)) {
        let mut acc = _mm256_setzero_ps();
        let mut k = 0;
        while k < full {
            // SAFETY: k + 8 <= full <= d = len of both slices.
            let x = unsafe { _mm256_loadu_ps(h.as_ptr().add(k)) };
            let y = unsafe { _mm256_loadu_ps(w.as_ptr().add(k)) };
            acc = _mm256_add_ps(acc, _mm256_mul_ps(x, y));
            k += 8;
        }
        let mut lanes = [0.0f32; 8];
        // SAFETY: `lanes` holds exactly eight f32.
        unsafe { _mm256_storeu_ps(lanes.as_mut_ptr(), acc) };
        *o = reduce_lanes(&lanes, &h[full..], &w[full..]);
    }
}

#[inline(always)]
fn project_generic(h: &[f32], rows: &[f32], out: &mut [f32]) {
    for (o, w) in out.iter_mut().zip(rows.chunks_exact(h.len())) {
        *o = dot(h, w);
    }
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    let mut acc = [0.0f32; 8];
    for (x, y) in ca.iter().zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    reduce_lanes(&acc, ra, rb)
}

#[inline(always)]
fn reduce_lanes(acc: &[f32; 8], ra: &[f32], rb: &[f32]) -> f32 {
    let mut sum = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 64,
            context_len: 8,
            vocab_size: 40,
            layernorm_eps: 1e-5,
            tie_embeddings: true,
        }
    }

    fn model(cfg: ModelConfig) -> Model {
        Model::new(cfg, init_random(&cfg, 11)).unwrap()
    }

    #[test]
    fn shape_contract() {
        let m = model(tiny());
        let out = m.forward_full(&[3]).unwrap();
        assert_eq!((out.rows, out.cols), (1, 40));
        assert!(matches!(m.forward_full(&[]), Err(ModelError::EmptyInput)));
        assert!(matches!(
            m.forward_full(&[40]),
            Err(ModelError::TokenOutOfRange { id: 40, .. })
        ));
    }

    #[test]
    fn overflow_on_full_cache() {
        let m = model(tiny());
        let mut cache = m.new_cache();
        for t in 0..8 {
            m.forward_step(t, &mut cache).unwrap();
        }
        assert_eq!(cache.len(), 8);
        assert!(matches!(
            m.forward_step(1, &mut cache),
            Err(ModelError::ContextOverflow {
                requested: 9,
                capacity: 8
            })
        ));
        assert!(matches!(
            m.forward_full(&[0; 9]),
            Err(ModelError::ContextOverflow { .. })
        ));
        cache.reset();
        assert!(cache.is_empty());
        let first = m.forward_step(5, &mut cache).unwrap();
        assert_eq!(first, m.forward_full(&[5]).unwrap().data);
    }

    #[test]
    fn untied_head_is_used() {
        let mut cfg = tiny();
        cfg.tie_embeddings = false;
        let m = model(cfg);
        let tied = model(tiny());
        assert_ne!(
            m.forward_full(&[1, 2]).unwrap().data,
            tied.forward_full(&[1, 2]).unwrap().data
        );
    }

    #[test]
    fn restricted_head_matches_full_rows() {
        let m = model(tiny());
        let mut a = m.new_cache();
        let mut b = m.new_cache();
        let full = m.prefill(&[1, 2, 3], &mut a).unwrap();
        let part = m.prefill_within(&[1, 2, 3], &mut b, 10..25).unwrap();
        assert_eq!(&part[10..25], &full[10..25]);
        assert!(part[..10].iter().chain(&part[25..]).all(|&l| l == f32::MIN));
        let full = m.forward_step(7, &mut a).unwrap();
        let part = m.forward_step_within(7, &mut b, 30..99).unwrap();
        assert_eq!(&part[30..], &full[30..]);
        assert_eq!(part.len(), 40);
    }

    #[test]
    fn debug_checks_pass_on_normal_weights() {
        let m = model(tiny()).with_debug_checks(true);
        m.forward_full(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn projection_paths_agree() {
        for d in [64, 19] {
            let h: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).cos()).collect();
            let rows: Vec<f32> = (0..d * 300).map(|i| (i as f32 * 0.011).sin()).collect();
            let mut a = vec![0.0; 300];
            let mut b = vec![0.0; 300];
            project(&h, &rows, &mut a);
            project_generic(&h, &rows, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..19).map(|i| i as f32 * 0.5 - 3.0).collect();
        let b: Vec<f32> = (0..19).map(|i| (i as f32).sin()).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-4);
    }
}
