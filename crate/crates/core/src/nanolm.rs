//! A tiny pre-layer-norm causal transformer. The same type serves as the
//! trainable policy and, once frozen, as the reference model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, Block, Bound, Init, LayerNorm, ParamId, ParamSet};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 17,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        Ok(())
    }

    /// Parameter count of the architecture, computed from the layer sizes.
    pub fn param_count(&self) -> usize {
        let (v, d, t) = (self.vocab_size, self.d_model, self.max_seq_len);
        let per_layer = 2 * 2 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        v * d + t * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

/// Right-padded token ids `[batch, seq]` with a 0/1 padding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub attn_mask: Tensor,
}

impl TokenBatch {
    /// Right-pad `rows` with `pad` to a common length.
    pub fn from_rows(rows: &[Vec<usize>], pad: usize) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Shape("token batch must be non-empty".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut mask = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad, seq - r.len()));
            mask.extend(std::iter::repeat_n(1.0, r.len()));
            mask.extend(std::iter::repeat_n(0.0, seq - r.len()));
        }
        Ok(TokenBatch {
            ids,
            batch: rows.len(),
            seq,
            attn_mask: Tensor::new(&[rows.len(), seq], mask)?,
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    /// Final-layer-norm output `[batch, seq, d_model]`, the input to the head.
    pub last_hidden: Tensor,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: ParamId,
}

#[derive(Clone, Debug)]
pub struct NanoLm {
    config: LmConfig,
    params: ParamSet,
    layout: Layout,
    frozen: bool,
}

impl NanoLm {
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d) = (config.vocab_size, config.d_model);
        let mut ps = ParamSet::new();
        let tok_emb = ps.push("tok_emb", Tensor::randn(&[v, d], INIT_STD, &mut rng));
        let pos_emb = ps.push("pos_emb", Tensor::randn(&[config.max_seq_len, d], INIT_STD, &mut rng));
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&mut ps, &format!("blocks.{i}"), d, config.n_heads, Init::Normal(INIT_STD), &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d);
        let head = ps.push("lm_head", Tensor::randn(&[d, v], INIT_STD, &mut rng));
        Ok(NanoLm {
            config: config.clone(),
            params: ps,
            layout: Layout {
                tok_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
            frozen: false,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable parameters; a frozen model refuses.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::Contract("frozen model parameters cannot be modified".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A frozen copy: bound to tapes only as constants.
    pub fn frozen_copy(&self) -> Self {
        NanoLm {
            frozen: true,
            ..self.clone()
        }
    }

    /// Place the parameters on `tape`; trainable unless the model is frozen.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, !self.frozen)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.params.content_bytes())
    }

    fn check_batch(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.seq,
                max: self.config.max_seq_len,
            });
        }
        if tokens.ids.len() != tokens.batch * tokens.seq || tokens.attn_mask.shape() != [tokens.batch, tokens.seq] {
            return Err(Error::Shape("token ids and mask must both be [batch, seq]".into()));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Forward on a tape. Returns `(logits, last_hidden)`.
    pub fn forward_on(&self, tape: &mut Tape, p: &Bound, tokens: &TokenBatch) -> Result<(Var, Var)> {
        self.check_batch(tokens)?;
        let l = &self.layout;
        let (b, t) = (tokens.batch, tokens.seq);
        let x = tape.embedding(p.var(l.tok_emb), &tokens.ids, &[b, t])?;
        let pos = tape.narrow(p.var(l.pos_emb), 0, 0, t)?;
        let mut x = tape.add(x, pos)?;
        let mask = tape.constant(attention_mask(&tokens.attn_mask, self.config.n_heads, true)?);
        for block in &l.blocks {
            x = block.forward(tape, p, x, mask)?;
        }
        let hidden = l.ln_f.forward(tape, p, x)?;
        let logits = tape.matmul(hidden, p.var(l.head))?;
        Ok((logits, hidden))
    }

    /// Gradient-free forward pass.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<LmOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (logits, hidden) = self.forward_on(&mut tape, &p, tokens)?;
        Ok(LmOutput {
            logits: tape.value(logits).clone(),
            last_hidden: tape.value(hidden).clone(),
        })
    }

    /// Sample continuations for several prompts, one RNG stream per prompt.
    /// Generation stops at `opts.stop_token` (not included in the output),
    /// after `opts.max_new` tokens, or at `max_seq_len`.
    pub fn sample_batch(&self, prompts: &[Vec<usize>], opts: &SampleOptions, seeds: &[u64]) -> Result<Vec<Vec<usize>>> {
        if !(opts.temperature >= 0.0) || !opts.temperature.is_finite() {
            return Err(Error::Domain(format!("temperature must be >= 0, got {}", opts.temperature)));
        }
        if seeds.len() != prompts.len() {
            return Err(Error::Shape("one seed per prompt required".into()));
        }
        let max = self.config.max_seq_len;
        if let Some(p) = prompts.iter().find(|p| p.is_empty() || p.len() > max) {
            return Err(Error::Length { len: p.len(), max });
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() < max).collect();
        if opts.max_new == 0 {
            active.clear();
        }
        while !active.is_empty() {
            let rows: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let batch = TokenBatch::from_rows(&rows, 0)?;
            let logits = self.forward(&batch)?.logits;
            let v = self.config.vocab_size;
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let pos = seqs[i].len() - 1;
                let row = &logits.data()[(r * batch.seq + pos) * v..][..v];
                let tok = choose_token(row, opts, &mut rngs[i]);
                if Some(tok) == opts.stop_token {
                    continue;
                }
                seqs[i].push(tok);
                out[i].push(tok);
                if out[i].len() < opts.max_new && seqs[i].len() < max {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }

    pub fn sample(&self, prompt: &[usize], opts: &SampleOptions, seed: u64) -> Result<Vec<usize>> {
        Ok(self.sample_batch(&[prompt.to_vec()], opts, &[seed])?.remove(0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("nanolm", serde_json::json!({ "config": self.config }));
        for (n, t) in self.params.iter() {
            ck.push(n, t.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("nanolm")?;
        let config: LmConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        Self::from_config_and_tensors(&config, &ck.tensors)
    }

    pub fn from_config_and_tensors(config: &LmConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut lm = Self::init(config)?;
        lm.params.load(tensors)?;
        Ok(lm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub temperature: f64,
    pub max_new: usize,
    pub stop_token: Option<usize>,
    /// Token ids that are never produced.
    pub banned: Vec<usize>,
}

impl SampleOptions {
    pub fn new(temperature: f64, max_new: usize) -> Self {
        SampleOptions {
            temperature,
            max_new,
            stop_token: None,
            banned: Vec::new(),
        }
    }
}

/// Greedy (lowest id on ties) at temperature 0, else a categorical draw from
/// `softmax(logits / T)`.
pub fn choose_token(logits: &[f64], opts: &SampleOptions, rng: &mut impl Rng) -> usize {
    let allowed = |i: usize| !opts.banned.contains(&i);
    if opts.temperature == 0.0 {
        let mut best = None::<(usize, f64)>;
        for (i, &x) in logits.iter().enumerate().filter(|(i, _)| allowed(*i)) {
            if best.is_none_or(|(_, b)| x > b) {
                best = Some((i, x));
            }
        }
        return best.map_or(0, |(i, _)| i);
    }
    let probs = temperature_probs(logits, opts.temperature, &opts.banned);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// `softmax(logits / T)` with banned ids given probability zero.
pub fn temperature_probs(logits: &[f64], temperature: f64, banned: &[usize]) -> Vec<f64> {
    let mut row: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if banned.contains(&i) { f64::NEG_INFINITY } else { x / temperature })
        .collect();
    crate::diffcore::softmax_in_place(&mut row);
    row
}
