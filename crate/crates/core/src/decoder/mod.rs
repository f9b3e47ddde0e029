//! A small deterministic causal-attention decoder with an explicit KV cache.
//!
//! Weights are a pure function of [`ModelConfig::seed`] (ChaCha8 stream,
//! uniform init). Arithmetic is `f64` throughout. Absolute sinusoidal
//! positions are added to the input embedding, so a row's cached state
//! depends only on its token and its position.
//!
//! With [`KvSource::Embedding`] (the default) every layer projects keys and
//! values from the normalized input embedding rather than the residual
//! stream. Cached rows are then independent of their context, which makes
//! attention over an evicted cache identical to a fresh recompute over the
//! surviving tokens. [`KvSource::Residual`] is the conventional layout and is
//! kept for comparison; chunked prefill is exact under both.

mod cache;

pub use cache::{CostCounter, KvCache, KvRow, RowMeta};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenspace::{vocab, Token, TokenId, TokenRole};

pub const PATCH_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KvSource {
    Embedding,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Depth normalizer for the patch feature vector, in meters.
    pub depth_scale: f64,
    pub kv_source: KvSource,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, 4 heads of width 8, the full word vocabulary and a 14x14 patch grid.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            head_dim: 8,
            vocab_size: vocab().len(),
            grid_h: 14,
            grid_w: 14,
            depth_scale: 10.0,
            kv_source: KvSource::Embedding,
            seed,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    fn validate(&self) {
        assert!(
            self.layers >= 1 && self.heads >= 1 && self.head_dim >= 1 && self.vocab_size >= 1,
            "model dimensions must be positive: {self:?}"
        );
        assert!(self.grid_h >= 1 && self.grid_w >= 1 && self.depth_scale > 0.0);
    }
}

/// Bytes held by keys and values for `n_tokens` cached tokens.
pub fn estimate_kv_bytes(cfg: &ModelConfig, n_tokens: u64, bytes_per_scalar: u64) -> u64 {
    2 * cfg.layers as u64 * cfg.heads as u64 * cfg.head_dim as u64 * n_tokens * bytes_per_scalar
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    /// Greedy choice among `allowed`; ties go to the lowest id.
    pub fn argmax_over(&self, allowed: &[TokenId]) -> TokenId {
        let mut best = allowed[0];
        for &id in &allowed[1..] {
            if self.0[id.index()] > self.0[best.index()] || (self.0[id.index()] == self.0[best.index()] && id < best) {
                best = id;
            }
        }
        best
    }

    pub fn argmax(&self) -> TokenId {
        let all: Vec<TokenId> = (0..self.0.len() as u32).map(TokenId).collect();
        self.argmax_over(&all)
    }

    pub fn max_abs_diff(&self, other: &Logits) -> f64 {
        assert_eq!(self.0.len(), other.0.len());
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Row-major `rows x cols` matrix applied as `x * M`.
#[derive(Debug, Clone)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        let scale = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale * 1.7).collect();
        Mat { rows, cols, data }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    up: Mat,
    down: Mat,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: ModelConfig,
    embed: Mat,
    patch_proj: Mat,
    patch_bias: Vec<f64>,
    layers: Vec<Layer>,
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sinusoid(position: u64, dim: usize) -> Vec<f64> {
    let p = position as f64;
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            if i % 2 == 0 {
                (p * freq).sin()
            } else {
                (p * freq).cos()
            }
        })
        .collect()
}

impl Decoder {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate();
        let d = cfg.model_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = Mat::random(&mut rng, cfg.vocab_size, d);
        let patch_proj = Mat::random(&mut rng, PATCH_FEATURES, d);
        let patch_bias = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: Mat::random(&mut rng, d, d),
                wk: Mat::random(&mut rng, d, d),
                wv: Mat::random(&mut rng, d, d),
                wo: Mat::random(&mut rng, d, d),
                up: Mat::random(&mut rng, d, 4 * d),
                down: Mat::random(&mut rng, 4 * d, d),
            })
            .collect();
        Decoder { cfg, embed, patch_proj, patch_bias, layers }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.layers, self.cfg.model_dim())
    }

    /// Feature vector of a patch: normalized depth, row and column fractions, frame parity.
    pub fn patch_features(&self, token: &Token) -> Option<[f64; PATCH_FEATURES]> {
        let p = token.role.patch()?;
        let depth = if p.depth > 0.0 { p.depth / self.cfg.depth_scale } else { -1.0 };
        Some([
            depth,
            p.patch_x as f64 / self.cfg.grid_h as f64,
            p.patch_y as f64 / self.cfg.grid_w as f64,
            (p.frame_t % 2) as f64,
        ])
    }

    fn embed_token(&self, token: &Token, position: u64) -> Vec<f64> {
        let d = self.cfg.model_dim();
        let mut x = vec![0.0; d];
        match self.patch_features(token) {
            Some(f) => {
                self.patch_proj.apply(&f, &mut x);
                x.iter_mut().zip(&self.patch_bias).for_each(|(a, b)| *a += b);
            }
            None => {
                let id = token.id.index().min(self.cfg.vocab_size - 1);
                x.copy_from_slice(self.embed.row(id));
            }
        }
        for (a, s) in x.iter_mut().zip(sinusoid(position, d)) {
            *a += s;
        }
        x
    }

    /// Runs `tokens` at `positions` on top of `cache`, appending their rows.
    /// Returns the logits of every new token.
    fn forward(&self, cache: &mut KvCache, tokens: &[Token], positions: &[u64]) -> Vec<Logits> {
        let d = self.cfg.model_dim();
        let (nh, hd) = (self.cfg.heads, self.cfg.head_dim);
        let scale = 1.0 / (hd as f64).sqrt();
        let base = cache.len();
        let n = tokens.len();

        let inputs: Vec<Vec<f64>> = tokens
            .iter()
            .zip(positions)
            .map(|(t, &p)| self.embed_token(t, p))
            .collect();
        for (t, &p) in tokens.iter().zip(positions) {
            cache.push_meta(RowMeta { position: p, token: *t });
        }
        let normed_inputs: Vec<Vec<f64>> = inputs.iter().map(|x| rms_norm(x)).collect();
        let mut hidden = inputs;

        let mut q = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut up = vec![0.0; 4 * d];
        for (l, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms_norm(h)).collect();
            let kv_in = match self.cfg.kv_source {
                KvSource::Embedding => &normed_inputs,
                KvSource::Residual => &normed,
            };
            let lkv = &mut cache.layers[l];
            let mut buf = vec![0.0; d];
            for x in kv_in {
                layer.wk.apply(x, &mut buf);
                lkv.keys.extend_from_slice(&buf);
                layer.wv.apply(x, &mut buf);
                lkv.values.extend_from_slice(&buf);
            }
            let lkv = &cache.layers[l];

            for i in 0..n {
                layer.wq.apply(&normed[i], &mut q);
                let visible = base + i + 1;
                attn.iter_mut().for_each(|a| *a = 0.0);
                let mut scores = vec![0.0; visible];
                for h in 0..nh {
                    let qh = &q[h * hd..(h + 1) * hd];
                    let mut max = f64::NEG_INFINITY;
                    for (r, s) in scores.iter_mut().enumerate() {
                        let k = &lkv.keys[r * d + h * hd..r * d + (h + 1) * hd];
                        *s = qh.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let out = &mut attn[h * hd..(h + 1) * hd];
                    for (r, &s) in scores.iter().enumerate() {
                        let w = s / denom;
                        let v = &lkv.values[r * d + h * hd..r * d + (h + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o += w * vv;
                        }
                    }
                }
                layer.wo.apply(&attn, &mut proj);
                hidden[i].iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

                let hn = rms_norm(&hidden[i]);
                layer.up.apply(&hn, &mut up);
                up.iter_mut().for_each(|u| *u = silu(*u));
                layer.down.apply(&up, &mut proj);
                hidden[i].iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            }
        }

        hidden
            .iter()
            .map(|h| {
                let hn = rms_norm(h);
                Logits((0..self.cfg.vocab_size).map(|v| dot(&hn, self.embed.row(v))).collect())
            })
            .collect()
    }

    /// Encodes `tokens` into the cache at the next free positions and returns
    /// the logits of the last one.
    pub fn prefill(&self, cache: &mut KvCache, tokens: &[Token]) -> Logits {
        assert!(!tokens.is_empty(), "prefill needs at least one token");
        let start = cache.next_position();
        let positions: Vec<u64> = (start..start + tokens.len() as u64).collect();
        let mut logits = self.forward(cache, tokens, &positions);
        cache.cost.prefill_tokens += tokens.len() as u64;
        logits.pop().unwrap()
    }

    /// Appends `prev` and returns its logits with the greedy next token,
    /// restricted to `allowed` when given.
    pub fn decode_step(&self, cache: &mut KvCache, prev: Token, allowed: Option<&[TokenId]>) -> (Logits, TokenId) {
        assert!(!cache.is_empty(), "decode_step needs a non-empty cache");
        let pos = cache.next_position();
        let logits = self.forward(cache, &[prev], &[pos]).pop().unwrap();
        cache.cost.decode_tokens += 1;
        let next = match allowed {
            Some(ids) if !ids.is_empty() => logits.argmax_over(ids),
            _ => logits.argmax(),
        };
        (logits, next)
    }

    /// Single causal pass over `tokens` at positions `0..n`, without a persistent cache.
    pub fn full_recompute(&self, tokens: &[Token]) -> Vec<Logits> {
        let positions: Vec<u64> = (0..tokens.len() as u64).collect();
        self.full_recompute_at(tokens, &positions)
    }

    /// Single causal pass at explicit, strictly increasing positions.
    pub fn full_recompute_at(&self, tokens: &[Token], positions: &[u64]) -> Vec<Logits> {
        assert!(!tokens.is_empty(), "full_recompute needs at least one token");
        assert_eq!(tokens.len(), positions.len());
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "positions must increase");
        let mut scratch = self.new_cache();
        self.forward(&mut scratch, tokens, positions)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tokens and positions of a cache's rows, the input for a survivor recompute.
pub fn survivor_sequence(cache: &KvCache) -> (Vec<Token>, Vec<u64>) {
    cache.rows().iter().map(|m| (m.token, m.position)).unzip()
}

/// Keeps observation rows only.
pub fn is_observation(meta: &RowMeta) -> bool {
    matches!(meta.token.role, TokenRole::ObservationPatch(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenspace::PatchToken;

    fn words(ids: &[u32]) -> Vec<Token> {
        ids.iter().map(|&i| Token::prompt(TokenId(i))).collect()
    }

    fn decoder() -> Decoder {
        Decoder::new(ModelConfig::toy(11))
    }

    #[test]
    fn weights_are_pure_function_of_seed() {
        let s = words(&[5, 6, 7, 8]);
        let a = Decoder::new(ModelConfig::toy(3)).full_recompute(&s);
        let b = Decoder::new(ModelConfig::toy(3)).full_recompute(&s);
        let c = Decoder::new(ModelConfig::toy(4)).full_recompute(&s);
        assert_eq!(a, b);
        assert!(a[3].max_abs_diff(&c[3]) > 1e-3);
    }

    #[test]
    fn single_prefill_then_decode_matches_recompute() {
        let dec = decoder();
        let s = words(&[10, 11, 12, 13, 14]);
        let mut cache = dec.new_cache();
        let last = dec.prefill(&mut cache, &s);
        let full = dec.full_recompute(&s);
        assert!(last.max_abs_diff(&full[4]) <= 1e-12);

        let prev = Token::action(TokenId(20));
        let (logits, _) = dec.decode_step(&mut cache, prev, None);
        let mut ext = s.clone();
        ext.push(prev);
        assert!(logits.max_abs_diff(&dec.full_recompute(&ext)[5]) <= 1e-5);
        assert_eq!(cache.cost, CostCounter { prefill_tokens: 5, decode_tokens: 1 });
    }

    #[test]
    fn two_chunk_prefill_matches_recompute() {
        for kv in [KvSource::Embedding, KvSource::Residual] {
            let dec = Decoder::new(ModelConfig { kv_source: kv, ..ModelConfig::toy(5) });
            let s1 = words(&[4, 9, 15]);
            let s2 = words(&[22, 7, 7, 30]);
            let mut cache = dec.new_cache();
            dec.prefill(&mut cache, &s1);
            let last = dec.prefill(&mut cache, &s2);
            let all: Vec<Token> = s1.iter().chain(&s2).copied().collect();
            assert!(last.max_abs_diff(dec.full_recompute(&all).last().unwrap()) <= 1e-5);
        }
    }

    #[test]
    fn prefill_196_patches_grows_each_layer() {
        let dec = decoder();
        let mut cache = dec.new_cache();
        dec.prefill(&mut cache, &words(&[5, 6]));
        let patches: Vec<Token> = (0..196)
            .map(|i| Token::patch(PatchToken { frame_t: 0, patch_x: (i / 14) as u16, patch_y: (i % 14) as u16, depth: 2.0 }))
            .collect();
        dec.prefill(&mut cache, &patches);
        assert_eq!(cache.len(), 198);
        for l in 0..cache.num_layers() {
            assert_eq!(cache.layers[l].keys.len(), 198 * 32);
        }
    }

    #[test]
    fn greedy_decode_is_deterministic() {
        let dec = decoder();
        let mut a = dec.new_cache();
        dec.prefill(&mut a, &words(&[5, 6, 7]));
        let mut b = a.clone();
        let allowed = vocab().action_vocabulary(crate::tokenspace::ActionScheme::SymbolicSingle);
        let mut prev = Token::action(TokenId(8));
        for _ in 0..4 {
            let (_, ta) = dec.decode_step(&mut a, prev, Some(&allowed));
            let (_, tb) = dec.decode_step(&mut b, prev, Some(&allowed));
            assert_eq!(ta, tb);
            assert!(allowed.contains(&ta));
            prev = Token::action(ta);
        }
    }

    #[test]
    fn length_one_recompute_uses_embedding_only() {
        let dec = decoder();
        let out = dec.full_recompute(&words(&[12]));
        assert_eq!(out.len(), 1);
        assert!(out[0].is_finite());
        assert_eq!(out[0].0.len(), vocab().len());
    }

    #[test]
    fn swapping_tokens_changes_logits() {
        let dec = decoder();
        let a = dec.full_recompute(&words(&[5, 9, 13]));
        let b = dec.full_recompute(&words(&[9, 5, 13]));
        assert!(a[2].max_abs_diff(&b[2]) > 1e-6);
    }

    #[test]
    fn evicted_cache_matches_survivor_recompute() {
        let dec = decoder();
        let s = words(&[4, 5, 6, 7, 8, 9, 10, 11]);
        let mut cache = dec.new_cache();
        dec.prefill(&mut cache, &s);
        cache.evict(|m| m.position % 3 != 1);
        let prev = Token::prompt(TokenId(17));
        let (logits, _) = dec.decode_step(&mut cache, prev, None);
        let (toks, pos) = survivor_sequence(&cache);
        let oracle = dec.full_recompute_at(&toks, &pos);
        assert!(logits.max_abs_diff(oracle.last().unwrap()) <= 1e-5);
    }

    #[test]
    fn residual_kv_is_context_dependent_under_eviction() {
        // Residual keys/values of layer >= 1 remember evicted context, so a
        // survivor recompute diverges. This is why Embedding is the default.
        let dec = Decoder::new(ModelConfig { kv_source: KvSource::Residual, ..ModelConfig::toy(11) });
        let s = words(&[4, 5, 6, 7, 8, 9, 10, 11]);
        let mut cache = dec.new_cache();
        dec.prefill(&mut cache, &s);
        cache.evict(|m| m.position % 2 == 0);
        let (logits, _) = dec.decode_step(&mut cache, Token::prompt(TokenId(17)), None);
        let (toks, pos) = survivor_sequence(&cache);
        let oracle = dec.full_recompute_at(&toks, &pos);
        assert!(logits.max_abs_diff(oracle.last().unwrap()) > 1e-5);
    }

    #[test]
    fn positions_survive_eviction_and_keep_counting() {
        let dec = decoder();
        let mut cache = dec.new_cache();
        dec.prefill(&mut cache, &words(&[4, 5, 6, 7]));
        cache.evict(|m| m.position != 1);
        dec.prefill(&mut cache, &words(&[8]));
        let pos: Vec<u64> = cache.rows().iter().map(|m| m.position).collect();
        assert_eq!(pos, vec![0, 2, 3, 4]);
    }

    #[test]
    fn kv_bytes_formula() {
        let cfg = ModelConfig::toy(0);
        assert_eq!(estimate_kv_bytes(&cfg, 0, 2), 0);
        // 2 (k and v) * 2 layers * 4 heads * 8 dims * 2048 tokens * 2 bytes
        assert_eq!(estimate_kv_bytes(&cfg, 2048, 2), 2 * 2 * 4 * 8 * 2048 * 2);
        assert_eq!(estimate_kv_bytes(&cfg, 2048, 2), 524_288);
    }
}
