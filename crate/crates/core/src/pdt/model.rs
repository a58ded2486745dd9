//! Causal transformer over `(return-to-go, state, action)` tokens.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PdtConfig;
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, init, DenseArray, Graph, NodeId, ParamStore};
use crate::trajectory::{ModelInput, Segment, Transition, TOKENS_PER_TRANSITION};

/// Additive attention bias for disallowed positions; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e9;

/// Token features and validity for a batch of padded sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch, seq_len, token_features]`, row-major.
    pub features: Vec<f64>,
    /// `[batch, seq_len]`; false for left padding.
    pub valid: Vec<bool>,
    /// Slots of the window's state tokens per sequence, oldest first; `None` for padded steps.
    pub state_slots: Vec<Vec<Option<usize>>>,
}

impl TokenBatch {
    pub fn new(seq_len: usize) -> Self {
        Self {
            batch: 0,
            seq_len,
            features: Vec::new(),
            valid: Vec::new(),
            state_slots: Vec::new(),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    fn push_transition(&mut self, config: &PdtConfig, t: &Transition) -> Result<()> {
        if t.state.len() != config.state_dim || t.action.len() != config.action_dim {
            return Err(Error::shape(
                "tokenize",
                format!(
                    "transition has state {} / action {}, model expects {} / {}",
                    t.state.len(),
                    t.action.len(),
                    config.state_dim,
                    config.action_dim
                ),
            ));
        }
        let nf = config.token_features();
        let (s0, a0, flag0) = (1, 1 + config.state_dim, 1 + config.state_dim + config.action_dim);
        let mut rtg = vec![0.0; nf];
        rtg[0] = t.return_to_go / config.rtg_scale;
        rtg[flag0] = 1.0;
        let mut st = vec![0.0; nf];
        st[s0..s0 + config.state_dim].copy_from_slice(&t.state);
        st[flag0 + 1] = 1.0;
        let mut ac = vec![0.0; nf];
        ac[a0..a0 + config.action_dim].copy_from_slice(&t.action);
        ac[flag0 + 2] = 1.0;
        for tok in [rtg, st, ac] {
            self.features.extend_from_slice(&tok);
            self.valid.push(true);
        }
        Ok(())
    }

    fn push_padding(&mut self, config: &PdtConfig, transitions: usize) {
        let n = transitions * TOKENS_PER_TRANSITION;
        self.features.extend(std::iter::repeat_n(0.0, n * config.token_features()));
        self.valid.extend(std::iter::repeat_n(false, n));
    }

    /// Appends one `prompt ⊙ window` sequence, left-padding the window to `context_k`.
    pub fn push_input(&mut self, config: &PdtConfig, input: &ModelInput) -> Result<()> {
        let prompt_len: usize = input.prompt.segments().iter().map(Segment::len).sum();
        if prompt_len != config.prompt_transitions()
            || input.prompt.segments().iter().any(|s| s.len() != config.prompt_h)
        {
            return Err(Error::MalformedPrompt(format!(
                "prompt holds {} transitions in {} segments, model expects {}x{}",
                prompt_len,
                input.prompt.num_segments(),
                config.prompt_j,
                config.prompt_h
            )));
        }
        if input.window.len() > config.context_k || input.window.is_empty() {
            return Err(Error::shape(
                "tokenize",
                format!("window of {} for context {}", input.window.len(), config.context_k),
            ));
        }
        let start = self.valid.len();
        for t in input.prompt.transitions() {
            self.push_transition(config, t)?;
        }
        let pad = config.context_k - input.window.len();
        self.push_padding(config, pad);
        for t in &input.window {
            self.push_transition(config, t)?;
        }
        let base = config.prompt_tokens();
        let mut slots = vec![None; pad];
        slots.extend((pad..config.context_k).map(|w| Some(base + TOKENS_PER_TRANSITION * w + 1)));
        self.state_slots.push(slots);
        debug_assert_eq!(self.valid.len() - start, self.seq_len);
        self.batch += 1;
        Ok(())
    }

    /// Appends a segment as a stand-alone prompt-only sequence.
    pub fn push_segment(&mut self, config: &PdtConfig, segment: &Segment) -> Result<()> {
        if segment.len() * TOKENS_PER_TRANSITION != self.seq_len {
            return Err(Error::shape(
                "tokenize",
                format!("segment of {} for sequence length {}", segment.len(), self.seq_len),
            ));
        }
        for t in &segment.transitions {
            self.push_transition(config, t)?;
        }
        self.state_slots.push(Vec::new());
        self.batch += 1;
        Ok(())
    }

    /// Causal mask that also hides padded keys, `[batch, seq, seq]`.
    fn attention_bias(&self) -> DenseArray {
        let s = self.seq_len;
        let mut bias = vec![MASKED; self.batch * s * s];
        for b in 0..self.batch {
            for i in 0..s {
                for j in 0..=i {
                    if self.valid[b * s + j] {
                        bias[(b * s + i) * s + j] = 0.0;
                    }
                }
            }
        }
        DenseArray::new(vec![self.batch, s, s], bias).expect("sized")
    }
}

/// Tokenizes a single model input.
pub fn tokenize(config: &PdtConfig, input: &ModelInput) -> Result<TokenBatch> {
    let mut tb = TokenBatch::new(config.max_seq_len());
    tb.push_input(config, input)?;
    Ok(tb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdtParams {
    pub config: PdtConfig,
    pub weights: ParamStore,
}

fn linear_params(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.weight"), init::uniform_fan_in(rng, fan_in, &[fan_in, fan_out]));
    p.insert(format!("{name}.bias"), init::uniform_fan_in(rng, fan_in, &[fan_out]));
}

fn norm_params(p: &mut ParamStore, name: &str, d: usize) {
    p.insert(format!("{name}.gain"), DenseArray::filled(&[d], 1.0));
    p.insert(format!("{name}.bias"), DenseArray::zeros(&[d]));
}

/// Per-window-step action predictions: `[batch, context_k, action_dim]` plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionPredictions {
    pub values: DenseArray,
    pub valid: Vec<bool>,
}

impl ActionPredictions {
    /// Prediction for window step `w` of sequence `b`, if that step is not padding.
    pub fn get(&self, b: usize, w: usize) -> Option<&[f64]> {
        let k = self.values.shape()[1];
        let d = self.values.shape()[2];
        let i = b * k + w;
        self.valid[i].then(|| &self.values.values()[i * d..(i + 1) * d])
    }
}

impl PdtParams {
    pub fn init(config: PdtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut p = ParamStore::new();
        linear_params(&mut p, &mut rng, "embed.rtg", 1, d);
        linear_params(&mut p, &mut rng, "embed.state", config.state_dim, d);
        linear_params(&mut p, &mut rng, "embed.action", config.action_dim, d);
        p.insert("embed.position", init::normal(&mut rng, 0.02, &[config.max_seq_len(), d]));
        if config.separate_prompt_positions && config.prompt_tokens() > 0 {
            p.insert(
                "embed.prompt_position",
                init::normal(&mut rng, 0.02, &[config.prompt_tokens(), d]),
            );
        }
        norm_params(&mut p, "embed.ln", d);
        for b in 0..config.blocks {
            for m in ["q", "k", "v", "proj"] {
                linear_params(&mut p, &mut rng, &format!("block{b}.attn.{m}"), d, d);
            }
            norm_params(&mut p, &format!("block{b}.ln1"), d);
            linear_params(&mut p, &mut rng, &format!("block{b}.mlp.fc"), d, config.ffn_mult * d);
            linear_params(&mut p, &mut rng, &format!("block{b}.mlp.proj"), config.ffn_mult * d, d);
            norm_params(&mut p, &format!("block{b}.ln2"), d);
        }
        let mut width = d;
        for l in 0..config.head_layers {
            linear_params(&mut p, &mut rng, &format!("head.fc{l}"), width, config.head_width);
            width = config.head_width;
        }
        linear_params(&mut p, &mut rng, "head.out", width, config.action_dim);
        Ok(Self { config, weights: p })
    }

    fn linear(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let w = g.param(&format!("{name}.weight"))?;
        let b = g.param(&format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_broadcast(y, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let gain = g.param(&format!("{name}.gain"))?;
        let bias = g.param(&format!("{name}.bias"))?;
        g.layer_norm(x, gain, bias)
    }

    /// Embeds tokens and runs every block; returns final hidden states `[batch, seq, d]`.
    pub fn forward_hidden(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<NodeId> {
        let c = &self.config;
        let (bsz, s, d) = (tokens.batch, tokens.seq_len, c.embed_dim);
        if s > c.max_seq_len() {
            return Err(Error::shape(
                "forward",
                format!("sequence of {s} exceeds maximum {}", c.max_seq_len()),
            ));
        }
        let nf = c.token_features();
        let feats = g.input(DenseArray::new(vec![bsz, s, nf], tokens.features.clone())?);

        // one [features, d] matrix: type-specific weights stacked over type-specific biases
        let mut rows = Vec::new();
        for e in ["rtg", "state", "action"] {
            rows.push(g.param(&format!("embed.{e}.weight"))?);
        }
        for e in ["rtg", "state", "action"] {
            let b = g.param(&format!("embed.{e}.bias"))?;
            rows.push(g.reshape(b, &[1, d])?);
        }
        let table = g.concat(&rows, 0)?;
        let tok = g.matmul(feats, table)?;

        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = if c.separate_prompt_positions && c.prompt_tokens() > 0 && s == c.max_seq_len() {
            let pt = g.param("embed.prompt_position")?;
            let shared = g.param("embed.position")?;
            let p1 = g.gather(pt, &pos_ids[..c.prompt_tokens()])?;
            let p2 = g.gather(shared, &pos_ids[c.prompt_tokens()..])?;
            g.concat(&[p1, p2], 0)?
        } else {
            let table = g.param("embed.position")?;
            g.gather(table, &pos_ids)?
        };
        let x = g.add_broadcast(tok, pos)?;
        let mut x = self.layer_norm(g, x, "embed.ln")?;

        let mask = g.input(tokens.attention_bias());
        let dh = c.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for b in 0..c.blocks {
            let q = self.linear(g, x, &format!("block{b}.attn.q"))?;
            let k = self.linear(g, x, &format!("block{b}.attn.k"))?;
            let v = self.linear(g, x, &format!("block{b}.attn.v"))?;
            let mut heads = Vec::with_capacity(c.heads);
            for h in 0..c.heads {
                let (qh, kh, vh) = if c.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        g.slice(q, 2, h * dh, dh)?,
                        g.slice(k, 2, h * dh, dh)?,
                        g.slice(v, 2, h * dh, dh)?,
                    )
                };
                let scores = g.batch_matmul(qh, kh, true)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask)?;
                let attn = g.softmax(scores);
                heads.push(g.batch_matmul(attn, vh, false)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
            let attn_out = self.linear(g, merged, &format!("block{b}.attn.proj"))?;
            let res = g.add(x, attn_out)?;
            x = self.layer_norm(g, res, &format!("block{b}.ln1"))?;
            let hidden = self.linear(g, x, &format!("block{b}.mlp.fc"))?;
            let hidden = g.gelu(hidden);
            let ff = self.linear(g, hidden, &format!("block{b}.mlp.proj"))?;
            let res = g.add(x, ff)?;
            x = self.layer_norm(g, res, &format!("block{b}.ln2"))?;
        }
        Ok(x)
    }

    /// Applies the action head to the given flat rows of the hidden states.
    /// Output columns: continuous action dims (scaled by `action_scale`), then the stop logit.
    pub fn action_head(&self, g: &mut Graph, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let d = self.config.embed_dim;
        let n = g.value(hidden).len() / d;
        let flat = g.reshape(hidden, &[n, d])?;
        let mut h = g.gather(flat, rows)?;
        for l in 0..self.config.head_layers {
            h = self.linear(g, h, &format!("head.fc{l}"))?;
            h = g.relu(h);
        }
        self.linear(g, h, "head.out")
    }

    /// Action predictions at every window state token.
    pub fn predict_actions(&self, tokens: &TokenBatch) -> Result<ActionPredictions> {
        let c = &self.config;
        let mut g = Graph::new(&self.weights);
        let hidden = self.forward_hidden(&mut g, tokens)?;
        let mut rows = Vec::new();
        let mut valid = Vec::new();
        for (b, slots) in tokens.state_slots.iter().enumerate() {
            for slot in slots {
                valid.push(slot.is_some());
                rows.push(b * tokens.seq_len + slot.unwrap_or(0));
            }
        }
        let out = self.action_head(&mut g, hidden, &rows)?;
        let mut values = g.value(out).clone().into_values();
        let nc = c.action_dim - 1;
        for row in values.chunks_mut(c.action_dim) {
            for v in &mut row[..nc] {
                *v *= c.action_scale;
            }
        }
        Ok(ActionPredictions {
            values: DenseArray::new(vec![tokens.batch, c.context_k, c.action_dim], values)?,
            valid,
        })
    }

    /// Action for the newest window step of a single input: continuous moves, then the stop logit.
    pub fn act(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let tb = tokenize(&self.config, input)?;
        let p = self.predict_actions(&tb)?;
        Ok(p.get(0, self.config.context_k - 1).expect("newest step is present").to_vec())
    }

    /// Mean of the final hidden states over a segment run as a prompt-only sequence.
    pub fn encode_segments(&self, segments: &[Segment]) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        let Some(first) = segments.first() else {
            return Ok(Vec::new());
        };
        let h = first.len();
        if c.prompt_h > 0 && h != c.prompt_h {
            return Err(Error::shape(
                "encode_segment",
                format!("segment length {h}, model prompt length {}", c.prompt_h),
            ));
        }
        let s = h * TOKENS_PER_TRANSITION;
        let d = c.embed_dim;
        let mut out = Vec::with_capacity(segments.len());
        // bounded chunks keep the attention buffers small
        for chunk in segments.chunks(256) {
            let mut tb = TokenBatch::new(s);
            for seg in chunk {
                tb.push_segment(c, seg)?;
            }
            let mut g = Graph::new(&self.weights);
            let hid = self.forward_hidden(&mut g, &tb)?;
            let hv = g.value(hid).values();
            for b in 0..chunk.len() {
                let mut m = vec![0.0; d];
                for t in 0..s {
                    let row = &hv[(b * s + t) * d..(b * s + t + 1) * d];
                    for (a, v) in m.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= s as f64);
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn encode_segment(&self, segment: &Segment) -> Result<Vec<f64>> {
        Ok(self.encode_segments(std::slice::from_ref(segment))?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_tagged(path, "")
    }

    /// Saves with a free-text tag stored after the config metadata.
    pub fn save_tagged(&self, path: &Path, tag: &str) -> Result<()> {
        let mut meta = serde_json::to_string(&self.config).expect("config serializes");
        if !tag.is_empty() {
            meta.push('\n');
            meta.push_str(tag);
        }
        checkpoint::save(&self.weights, &meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (weights, meta) = checkpoint::load(path)?;
        let config: PdtConfig = serde_json::from_str(meta.lines().next().unwrap_or(""))
            .map_err(|e| Error::Checkpoint(format!("bad config metadata: {e}")))?;
        let expected = Self::init(config.clone(), 0)?;
        for (name, a) in expected.weights.iter() {
            let got = weights.get(name)?;
            if got.shape() != a.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {:?}", got.shape())));
            }
        }
        Ok(Self { config, weights })
    }
}
