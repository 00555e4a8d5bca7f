use autodiff::{gelu, log_softmax_row, rms_norm_row};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{names, PolicyParameters};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::task::{vocab, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 0 selects the most likely token (lowest index on ties).
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop: Token,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens,
            stop: vocab::EOS,
        }
    }

    pub fn sampled(temperature: f64, max_new_tokens: usize) -> Self {
        Self {
            temperature,
            ..Self::greedy(max_new_tokens)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens, including the stop token when one was produced.
    pub tokens: Vec<Token>,
    /// True when generation ended without producing the stop token.
    pub truncated: bool,
}

/// Anything that can continue a context. Implemented by the policy and by
/// scripted stand-ins in tests.
pub trait Generator {
    fn generate(&self, context: &[Token], decode: &DecodeConfig, rng: &mut StreamRng)
        -> Result<Generation>;
}

/// Draws a token from log-probabilities. Consumes exactly one uniform draw
/// when `temperature > 0` and none otherwise.
pub fn sample(logprobs: &[f64], temperature: f64, rng: &mut StreamRng) -> Result<Token> {
    if logprobs.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logprobs.iter().enumerate() {
            if v > logprobs[best] {
                best = i;
            }
        }
        return Ok(best as Token);
    }
    let scaled: Vec<f64> = logprobs.iter().map(|v| v / temperature).collect();
    let mut lsm = vec![0.0; scaled.len()];
    log_softmax_row(&scaled, &mut lsm);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in lsm.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return Ok(i as Token);
        }
    }
    // Rounding left the cumulative mass just under 1: take the last token
    // with nonzero probability.
    let last = lsm.iter().rposition(|v| v.is_finite() && *v > f64::NEG_INFINITY).unwrap_or(0);
    Ok(last as Token)
}

struct LayerView<'a> {
    wq: Vec<&'a [f64]>,
    wk: Vec<&'a [f64]>,
    wv: Vec<&'a [f64]>,
    wo: &'a [f64],
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

/// Incremental inference with per-layer key/value caches.
pub struct Decoder<'a> {
    params: &'a PolicyParameters,
    layers: Vec<LayerView<'a>>,
    // keys[layer][head] holds one `head_dim` row per position
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    len: usize,
    logprobs: Vec<f64>,
}

/// `out += x · w` for a row vector `x` and a row-major `[x.len(), out.len()]` matrix.
fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wv;
        }
    }
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a PolicyParameters) -> Self {
        let cfg = params.config();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let per_head = |w: &str| {
                    (0..cfg.n_heads)
                        .map(|h| params.get(&names::attn(l, w, h)).data())
                        .collect()
                };
                LayerView {
                    wq: per_head("wq"),
                    wk: per_head("wk"),
                    wv: per_head("wv"),
                    wo: params.get(&names::layer(l, "attn.wo")).data(),
                    w1: params.get(&names::layer(l, "ffn.w1")).data(),
                    b1: params.get(&names::layer(l, "ffn.b1")).data(),
                    w2: params.get(&names::layer(l, "ffn.w2")).data(),
                    b2: params.get(&names::layer(l, "ffn.b2")).data(),
                }
            })
            .collect();
        let caches = vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers];
        Self {
            params,
            layers,
            keys: caches.clone(),
            values: caches,
            len: 0,
            logprobs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token log-probabilities after the last pushed token.
    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn push_all(&mut self, tokens: &[Token]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.push(t))
    }

    /// Appends one token and updates the next-token distribution.
    pub fn push(&mut self, token: Token) -> Result<()> {
        let cfg = self.params.config();
        if self.len >= cfg.max_len {
            return Err(Error::ContextOverflow {
                len: self.len + 1,
                max: cfg.max_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let (d, dh, hid) = (cfg.d_model, cfg.head_dim(), cfg.d_hidden);
        let pos = self.len;
        let tok = &self.params.get("tok_emb").data()[token as usize * d..][..d];
        let pe = &self.params.get("pos_emb").data()[pos * d..][..d];
        let mut x: Vec<f64> = tok.iter().zip(pe).map(|(a, b)| a + b).collect();
        let scale = 1.0 / (dh as f64).sqrt();

        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = x.clone();
            rms_norm_row(&mut h);
            let mut cat = vec![0.0; d];
            for head in 0..cfg.n_heads {
                let mut q = vec![0.0; dh];
                let mut k = vec![0.0; dh];
                let mut v = vec![0.0; dh];
                vec_mat(&h, layer.wq[head], &mut q);
                vec_mat(&h, layer.wk[head], &mut k);
                vec_mat(&h, layer.wv[head], &mut v);
                let kc = &mut self.keys[l][head];
                kc.extend_from_slice(&k);
                let vc = &mut self.values[l][head];
                vc.extend_from_slice(&v);
                let t = pos + 1;
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let kj = &kc[j * dh..(j + 1) * dh];
                        q.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                let out = &mut cat[head * dh..(head + 1) * dh];
                for (j, wj) in w.iter().enumerate() {
                    let p = wj / z;
                    for (o, vv) in out.iter_mut().zip(&vc[j * dh..(j + 1) * dh]) {
                        *o += p * vv;
                    }
                }
            }
            vec_mat(&cat, layer.wo, &mut x);

            let mut h = x.clone();
            rms_norm_row(&mut h);
            let mut f = layer.b1.to_vec();
            vec_mat(&h, layer.w1, &mut f);
            for v in f.iter_mut() {
                *v = gelu(*v);
            }
            let mut f2 = layer.b2.to_vec();
            debug_assert_eq!(f.len(), hid);
            vec_mat(&f, layer.w2, &mut f2);
            for (xi, fi) in x.iter_mut().zip(&f2) {
                *xi += fi;
            }
        }

        rms_norm_row(&mut x);
        let mut logits = vec![0.0; cfg.vocab_size];
        vec_mat(&x, self.params.get("head").data(), &mut logits);
        self.logprobs.resize(cfg.vocab_size, 0.0);
        log_softmax_row(&logits, &mut self.logprobs);
        self.len += 1;
        Ok(())
    }
}

impl PolicyParameters {
    /// Full next-token distribution after `context`.
    pub fn next_logprobs(&self, context: &[Token]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        let mut dec = Decoder::new(self);
        dec.push_all(context)?;
        Ok(dec.logprobs().to_vec())
    }

    /// `log π(target | context)` through the incremental decoder.
    pub fn fast_logprob(&self, context: &[Token], target: &[Token]) -> Result<f64> {
        if target.is_empty() {
            return Ok(0.0);
        }
        if context.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot score a continuation of an empty context".into(),
            ));
        }
        let mut dec = Decoder::new(self);
        dec.push_all(context)?;
        let mut total = 0.0;
        for (i, &t) in target.iter().enumerate() {
            if t as usize >= self.config().vocab_size {
                return Err(Error::UnknownToken {
                    token: t,
                    vocab: self.config().vocab_size,
                });
            }
            total += dec.logprobs()[t as usize];
            if i + 1 < target.len() {
                dec.push(t)?;
            }
        }
        Ok(total)
    }
}

impl Generator for PolicyParameters {
    fn generate(
        &self,
        context: &[Token],
        decode: &DecodeConfig,
        rng: &mut StreamRng,
    ) -> Result<Generation> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        let max_len = self.config().max_len;
        let mut dec = Decoder::new(self);
        dec.push_all(context)?;
        let mut tokens = Vec::new();
        loop {
            if tokens.len() >= decode.max_new_tokens {
                return Ok(Generation { tokens, truncated: true });
            }
            let t = sample(dec.logprobs(), decode.temperature, rng)?;
            tokens.push(t);
            if t == decode.stop {
                return Ok(Generation { tokens, truncated: false });
            }
            if dec.len() >= max_len {
                return Ok(Generation { tokens, truncated: true });
            }
            dec.push(t)?;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng::stream;

    fn policy(seed: u64) -> PolicyParameters {
        PolicyParameters::init(PolicyConfig::default(), &mut stream(seed)).unwrap()
    }

    #[test]
    fn decoder_matches_graph_path() {
        let p = policy(4);
        let ctx = [11, 13, 1, 2, 3, 4, 5, 6, 7, 8, 9, 16, 1, 14];
        let target = [20, 16, 1, 21, 0, 12];
        let a = p.logprob(&ctx, &target).unwrap();
        let b = p.fast_logprob(&ctx, &target).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn next_token_distribution_is_normalized() {
        let p = policy(5);
        let lp = p.next_logprobs(&[11, 3, 3]).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_sampling_breaks_ties_toward_lowest_index() {
        let mut rng = stream(0);
        assert_eq!(sample(&[-1.0, -0.5, -0.5], 0.0, &mut rng).unwrap(), 1);
        assert!(sample(&[], 1.0, &mut rng).is_err());
        assert!(sample(&[0.0], -1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_follows_the_distribution() {
        let lp = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let mut rng = stream(12);
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample(&lp, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.7, 0.2, 0.1]) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn generation_is_reproducible_and_bounded() {
        let p = policy(6);
        let cfg = DecodeConfig::sampled(1.0, 10);
        let a = p.generate(&[11, 4], &cfg, &mut stream(1)).unwrap();
        let b = p.generate(&[11, 4], &cfg, &mut stream(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 10);
        assert_eq!(a.truncated, a.tokens.last() != Some(&vocab::EOS));
    }
}
