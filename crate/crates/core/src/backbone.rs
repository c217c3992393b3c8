//! Miniature decoder-only causal transformer: the frozen language model the
//! prompts steer.
//!
//! The token-embedding table is exposed so the retriever can consume raw
//! context embeddings, and the forward pass accepts prepended soft-prompt
//! rows. Soft prompts occupy positions 0..L-1 and receive positional
//! embeddings exactly like ordinary tokens; learned absolute positional
//! embeddings throughout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{hash_arrays, read_container, write_container};
use crate::error::{Result, SptError};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Array, Tape, TensorId};
use crate::text::Vocabulary;

const BACKBONE_MAGIC: &[u8; 4] = b"SPTB";
const BACKBONE_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Dropout keep-rate complement used during pretraining only; must be 0
    /// once the backbone is frozen. Stored as hundredths to keep the config
    /// hashable: 10 means p=0.10.
    pub dropout_percent: u8,
}

impl BackboneConfig {
    /// Desk-scale default: small enough for finite-difference testing,
    /// large enough to specialize across synthetic regimes.
    pub fn desk_default(vocab_size: usize) -> Self {
        BackboneConfig {
            vocab_size,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_positions: 512,
            dropout_percent: 0,
        }
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_percent as f64 / 100.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(SptError::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.layers == 0 || self.max_positions == 0 {
            return Err(SptError::Config(
                "vocab_size, layers and max_positions must be positive".into(),
            ));
        }
        if self.dropout_percent >= 100 {
            return Err(SptError::Config("dropout must be below 1.0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerSlots<T> {
    ln1_g: T,
    ln1_b: T,
    wq: T,
    bq: T,
    wk: T,
    bk: T,
    wv: T,
    bv: T,
    wo: T,
    bo: T,
    ln2_g: T,
    ln2_b: T,
    fc1_w: T,
    fc1_b: T,
    fc2_w: T,
    fc2_b: T,
}

#[derive(Debug, Clone)]
struct Slots<T> {
    tok_emb: T,
    pos_emb: T,
    layers: Vec<LayerSlots<T>>,
    ln_f_g: T,
    ln_f_b: T,
    w_out: T,
    b_out: T,
}

impl<T> Slots<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Slots<U> {
        Slots {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerSlots {
                    ln1_g: f(&l.ln1_g),
                    ln1_b: f(&l.ln1_b),
                    wq: f(&l.wq),
                    bq: f(&l.bq),
                    wk: f(&l.wk),
                    bk: f(&l.bk),
                    wv: f(&l.wv),
                    bv: f(&l.bv),
                    wo: f(&l.wo),
                    bo: f(&l.bo),
                    ln2_g: f(&l.ln2_g),
                    ln2_b: f(&l.ln2_b),
                    fc1_w: f(&l.fc1_w),
                    fc1_b: f(&l.fc1_b),
                    fc2_w: f(&l.fc2_w),
                    fc2_b: f(&l.fc2_b),
                })
                .collect(),
            ln_f_g: f(&self.ln_f_g),
            ln_f_b: f(&self.ln_f_b),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    /// Deterministic (name, slot) walk; serialization, hashing and the
    /// optimizer all rely on this order.
    fn visit(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let fields: [(&str, &T); 16] = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("fc1_w", &l.fc1_w),
                ("fc1_b", &l.fc1_b),
                ("fc2_w", &l.fc2_w),
                ("fc2_b", &l.fc2_b),
            ];
            for (name, slot) in fields {
                out.push((format!("layer{}.{}", i, name), slot));
            }
        }
        out.push(("ln_f_g".into(), &self.ln_f_g));
        out.push(("ln_f_b".into(), &self.ln_f_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    fn visit_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out: Vec<(String, &mut T)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut T); 16] = [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("fc1_w", &mut l.fc1_w),
                ("fc1_b", &mut l.fc1_b),
                ("fc2_w", &mut l.fc2_w),
                ("fc2_b", &mut l.fc2_b),
            ];
            for (name, slot) in fields {
                out.push((format!("layer{}.{}", i, name), slot));
            }
        }
        out.push(("ln_f_g".into(), &mut self.ln_f_g));
        out.push(("ln_f_b".into(), &mut self.ln_f_b));
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out
    }
}

/// The backbone model. Construct unfrozen, pretrain, then freeze; once
/// frozen its parameters enter training tapes as constants only.
pub struct Backbone {
    pub config: BackboneConfig,
    params: Slots<Array>,
    frozen: bool,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let v = config.vocab_size;
        let mut randn = |shape: Vec<usize>| {
            let mut a = Array::randn(shape, &mut rng);
            for x in &mut a.data {
                *x *= INIT_STD;
            }
            a
        };
        let layers = (0..config.layers)
            .map(|_| LayerSlots {
                ln1_g: Array::vector(vec![1.0; d]),
                ln1_b: Array::zeros(vec![d]),
                wq: randn(vec![d, d]),
                bq: Array::zeros(vec![d]),
                wk: randn(vec![d, d]),
                bk: Array::zeros(vec![d]),
                wv: randn(vec![d, d]),
                bv: Array::zeros(vec![d]),
                wo: randn(vec![d, d]),
                bo: Array::zeros(vec![d]),
                ln2_g: Array::vector(vec![1.0; d]),
                ln2_b: Array::zeros(vec![d]),
                fc1_w: randn(vec![d, f]),
                fc1_b: Array::zeros(vec![f]),
                fc2_w: randn(vec![f, d]),
                fc2_b: Array::zeros(vec![d]),
            })
            .collect();
        let params = Slots {
            tok_emb: randn(vec![v, d]),
            pos_emb: randn(vec![config.max_positions, d]),
            layers,
            ln_f_g: Array::vector(vec![1.0; d]),
            ln_f_b: Array::zeros(vec![d]),
            w_out: randn(vec![d, v]),
            b_out: Array::zeros(vec![v]),
        };
        Ok(Backbone {
            config,
            params,
            frozen: false,
        })
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.params.visit().iter().map(|(_, a)| a.numel()).sum()
    }

    /// SHA-256 over all parameters; constant for a frozen backbone.
    pub fn param_hash(&self) -> String {
        let named = self.params.visit();
        hash_arrays(named.iter().map(|(n, a)| (n.as_str(), *a)))
    }

    /// Places every parameter on the tape: as constants when frozen, as
    /// trainable leaves otherwise.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundBackbone<'a> {
        let frozen = self.frozen;
        let slots = self.params.map(|a| {
            if frozen {
                tape.constant(a)
            } else {
                tape.var(a)
            }
        });
        BoundBackbone {
            config: &self.config,
            slots,
        }
    }

    /// Standard next-token training without prompts; freezes the backbone
    /// on success.
    pub fn pretrain(
        &mut self,
        sequences: &[Vec<usize>],
        opts: &PretrainOptions,
    ) -> Result<PretrainStats> {
        if self.frozen {
            return Err(SptError::Contract(
                "pretrain: backbone is already frozen".into(),
            ));
        }
        if sequences.is_empty() {
            return Err(SptError::Ingestion("pretrain: empty corpus".into()));
        }
        for seq in sequences {
            if seq.len() < 2 {
                return Err(SptError::Contract(
                    "pretrain: sequences need at least two tokens".into(),
                ));
            }
            if seq.len() > self.config.max_positions {
                return Err(SptError::Contract(format!(
                    "pretrain: sequence of {} tokens exceeds max positions {}",
                    seq.len(),
                    self.config.max_positions
                )));
            }
        }
        let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let jitter = opts
            .position_jitter
            .min(self.config.max_positions.saturating_sub(max_len));
        let sizes: Vec<usize> = self.params.visit().iter().map(|(_, a)| a.numel()).collect();
        let mut adam = Adam::new(opts.adam, &sizes);
        let mut step_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let dropout = self.config.dropout();
        let mut losses = Vec::with_capacity(opts.steps);

        let batch = opts.batch_size.max(1);
        for step in 0..opts.steps {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let mut seq_losses = Vec::with_capacity(batch);
            for b in 0..batch {
                let seq = &sequences[(step * batch + b) % sequences.len()];
                let offset = if jitter > 0 {
                    use rand::Rng;
                    step_rng.random_range(0..=jitter)
                } else {
                    0
                };
                let mut drop_state = if dropout > 0.0 {
                    Some(DropoutState {
                        p: dropout,
                        rng: &mut step_rng,
                    })
                } else {
                    None
                };
                let log_probs = bound.sequence_log_probs_at(
                    &mut tape,
                    None,
                    seq,
                    offset,
                    &mut drop_state,
                )?;
                let mut targets = vec![usize::MAX; seq.len()];
                for p in 0..seq.len() - 1 {
                    targets[p] = seq[p + 1];
                }
                seq_losses.push(tape.nll(log_probs, &targets, usize::MAX)?);
            }
            let stacked = tape.stack_scalars(&seq_losses)?;
            let loss = tape.mean_all(stacked);
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(SptError::Diverged {
                    step,
                    batch: (step * batch) % sequences.len(),
                    component: "pretrain_nll".into(),
                });
            }
            losses.push(loss_value);
            tape.backward(loss)?;

            let ids = bound.slots.visit();
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .map(|(_, &id)| tape.grad(id).expect("trainable leaf").to_vec())
                .collect();
            let mut named_params = self.params.visit_mut();
            let mut param_slices: Vec<&mut [f64]> = named_params
                .iter_mut()
                .map(|(_, a)| a.data.as_mut_slice())
                .collect();
            let lrs = vec![opts.lr; param_slices.len()];
            adam.step(&mut param_slices, &grads, &lrs)?;

            // Early stop only once a full pass over the corpus stays below
            // the target, not on a single memorized batch.
            if let Some(target) = opts.target_loss {
                let window = sequences.len().div_ceil(batch);
                if losses.len() >= window
                    && losses[losses.len() - window..].iter().all(|&l| l < target)
                {
                    break;
                }
            }
        }
        self.frozen = true;
        let final_loss = *losses.last().unwrap();
        Ok(PretrainStats {
            steps_run: losses.len(),
            final_loss,
            losses,
        })
    }

    /// Autoregressive generation with the given soft prompt prepended.
    pub fn decode(
        &self,
        prompt: Option<&Array>,
        context_ids: &[usize],
        opts: &DecodeOptions,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let mut generated: Vec<usize> = Vec::new();
        for _ in 0..opts.max_new_tokens {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let prompt_id = prompt.map(|p| tape.constant(p));
            let mut seq = context_ids.to_vec();
            seq.extend_from_slice(&generated);
            let log_probs = bound.sequence_log_probs(&mut tape, prompt_id, &seq, &mut None)?;
            let v = self.config.vocab_size;
            let last = tape.data(log_probs);
            let row = &last[last.len() - v..];
            let next = match &opts.strategy {
                DecodeStrategy::Greedy => argmax(row),
                DecodeStrategy::Sample { temperature, top_k } => {
                    sample_top_k(row, *temperature, *top_k, rng)
                }
            };
            generated.push(next);
            if next == opts.eos_id {
                break;
            }
        }
        Ok(generated)
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Array)> {
        self.params.visit()
    }

    pub(crate) fn replace_params(&mut self, arrays: Vec<(String, Array)>) -> Result<()> {
        let mut named = self.params.visit_mut();
        if named.len() != arrays.len() {
            return Err(SptError::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                named.len(),
                arrays.len()
            )));
        }
        for ((expected_name, slot), (name, array)) in named.iter_mut().zip(arrays) {
            if *expected_name != name {
                return Err(SptError::Checkpoint(format!(
                    "parameter order mismatch: expected {}, found {}",
                    expected_name, name
                )));
            }
            if slot.shape != array.shape {
                return Err(SptError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name, array.shape, slot.shape
                )));
            }
            **slot = array;
        }
        Ok(())
    }
}

/// Backbone parameters materialized on a tape.
pub struct BoundBackbone<'a> {
    pub config: &'a BackboneConfig,
    slots: Slots<TensorId>,
}

pub struct PromptForward {
    /// Log-probabilities over the whole prompt+context+target sequence,
    /// one normalized row per position.
    pub log_probs: TensorId,
    /// Mean NLL over the target span only.
    pub nll: TensorId,
    /// Per-row target layout used for the NLL; rows outside the target
    /// span hold the sentinel and are ignored.
    pub targets: Vec<usize>,
}

/// Live dropout configuration for pretraining passes.
pub struct DropoutState<'r> {
    p: f64,
    rng: &'r mut ChaCha8Rng,
}

impl<'a> BoundBackbone<'a> {
    /// Raw token-embedding rows; no positional encoding. This is what the
    /// retriever consumes.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<TensorId> {
        tape.embedding_lookup(self.slots.tok_emb, ids)
    }

    /// Teacher-forced pass over [prompt; context; target]: full-sequence
    /// log-probabilities plus NLL restricted to the target span.
    pub fn forward_with_prompt(
        &self,
        tape: &mut Tape,
        prompt: Option<TensorId>,
        context_ids: &[usize],
        target_ids: &[usize],
    ) -> Result<PromptForward> {
        if context_ids.is_empty() || target_ids.is_empty() {
            return Err(SptError::Contract(
                "forward_with_prompt: context and target must be non-empty".into(),
            ));
        }
        let prompt_len = match prompt {
            Some(p) => tape.shape(p)[0],
            None => 0,
        };
        let mut tokens = context_ids.to_vec();
        tokens.extend_from_slice(target_ids);
        let log_probs = self.sequence_log_probs(tape, prompt, &tokens, &mut None)?;

        let total = prompt_len + tokens.len();
        let target_start = prompt_len + context_ids.len();
        let mut targets = vec![usize::MAX; total];
        for p in target_start - 1..total - 1 {
            targets[p] = tokens[p + 1 - prompt_len];
        }
        let nll = tape.nll(log_probs, &targets, usize::MAX)?;
        Ok(PromptForward {
            log_probs,
            nll,
            targets,
        })
    }

    /// Log-probabilities over [prompt; tokens].
    pub fn sequence_log_probs(
        &self,
        tape: &mut Tape,
        prompt: Option<TensorId>,
        token_ids: &[usize],
        dropout: &mut Option<DropoutState>,
    ) -> Result<TensorId> {
        self.sequence_log_probs_at(tape, prompt, token_ids, 0, dropout)
    }

    /// As [`Self::sequence_log_probs`] but with the whole sequence shifted
    /// to start at position `offset`; pretraining jitters this so absolute
    /// positions generalize.
    fn sequence_log_probs_at(
        &self,
        tape: &mut Tape,
        prompt: Option<TensorId>,
        token_ids: &[usize],
        offset: usize,
        dropout: &mut Option<DropoutState>,
    ) -> Result<TensorId> {
        let d = self.config.hidden_dim;
        let prompt_len = match prompt {
            Some(p) => {
                let shape = tape.shape(p);
                if shape.len() != 2 || shape[1] != d {
                    return Err(SptError::ShapeMismatch {
                        op: "sequence_log_probs prompt",
                        lhs: shape.to_vec(),
                        rhs: vec![0, d],
                    });
                }
                shape[0]
            }
            None => 0,
        };
        let total = offset + prompt_len + token_ids.len();
        if total > self.config.max_positions {
            return Err(SptError::Contract(format!(
                "sequence of {} positions exceeds max positions {}",
                total, self.config.max_positions
            )));
        }
        if let Some(&bad) = token_ids
            .iter()
            .find(|&&t| t >= self.config.vocab_size)
        {
            return Err(SptError::Contract(format!(
                "token id {} out of range for vocab {}",
                bad, self.config.vocab_size
            )));
        }

        let token_positions: Vec<usize> = (offset + prompt_len..total).collect();
        let tok = self.embed(tape, token_ids)?;
        let tok_pos = tape.embedding_lookup(self.slots.pos_emb, &token_positions)?;
        let tok_x = tape.add(tok, tok_pos)?;
        let x = match prompt {
            Some(p) => {
                let prompt_positions: Vec<usize> =
                    (offset..offset + prompt_len).collect();
                let prompt_pos =
                    tape.embedding_lookup(self.slots.pos_emb, &prompt_positions)?;
                let prompt_x = tape.add(p, prompt_pos)?;
                tape.concat_rows(prompt_x, tok_x)?
            }
            None => tok_x,
        };
        self.transformer(tape, x, dropout)
    }

    fn transformer(
        &self,
        tape: &mut Tape,
        mut x: TensorId,
        dropout: &mut Option<DropoutState>,
    ) -> Result<TensorId> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let s = tape.shape(x)[0];
        let mask = causal_mask(tape, s);
        let scale = 1.0 / (head_dim as f64).sqrt();

        for layer in &self.slots.layers {
            let h = tape.layer_norm(x, layer.ln1_g, layer.ln1_b)?;
            let q0 = tape.matmul(h, layer.wq)?;
            let q = tape.add_bias(q0, layer.bq)?;
            let k0 = tape.matmul(h, layer.wk)?;
            let k = tape.add_bias(k0, layer.bk)?;
            let v0 = tape.matmul(h, layer.wv)?;
            let v = tape.add_bias(v0, layer.bv)?;

            let mut head_outputs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let c0 = hd * head_dim;
                let c1 = c0 + head_dim;
                let qh = tape.slice_cols(q, c0, c1)?;
                let kh = tape.slice_cols(k, c0, c1)?;
                let vh = tape.slice_cols(v, c0, c1)?;
                let kt = tape.transpose(kh)?;
                let scores0 = tape.matmul(qh, kt)?;
                let scores1 = tape.scale(scores0, scale);
                let scores = tape.add(scores1, mask)?;
                let attn = tape.softmax_rows(scores)?;
                head_outputs.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let proj0 = tape.matmul(merged, layer.wo)?;
            let mut proj = tape.add_bias(proj0, layer.bo)?;
            proj = apply_dropout(tape, proj, dropout)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b)?;
            let ff0 = tape.matmul(h2, layer.fc1_w)?;
            let ff1 = tape.add_bias(ff0, layer.fc1_b)?;
            let ff2 = tape.gelu(ff1);
            let ff3 = tape.matmul(ff2, layer.fc2_w)?;
            let mut ff = tape.add_bias(ff3, layer.fc2_b)?;
            ff = apply_dropout(tape, ff, dropout)?;
            x = tape.add(x, ff)?;
        }

        let xf = tape.layer_norm(x, self.slots.ln_f_g, self.slots.ln_f_b)?;
        let logits0 = tape.matmul(xf, self.slots.w_out)?;
        let logits = tape.add_bias(logits0, self.slots.b_out)?;
        tape.log_softmax_rows(logits)
    }
}

fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    dropout: &mut Option<DropoutState>,
) -> Result<TensorId> {
    let Some(state) = dropout.as_mut() else {
        return Ok(x);
    };
    use rand::Rng;
    let keep = 1.0 - state.p;
    let numel = tape.numel(x);
    let shape = tape.shape(x).to_vec();
    let mask: Vec<f64> = (0..numel)
        .map(|_| {
            if state.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask_id = tape.constant(&Array::new(shape, mask)?);
    tape.mul(x, mask_id)
}

fn causal_mask(tape: &mut Tape, s: usize) -> TensorId {
    let mut mask = vec![0.0; s * s];
    for r in 0..s {
        for c in r + 1..s {
            mask[r * s + c] = MASK_NEG;
        }
    }
    tape.constant(&Array {
        shape: vec![s, s],
        data: mask,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(log_probs: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    // Temperature is applied to the log-probabilities before renormalizing;
    // a vanishing temperature recovers greedy decoding.
    let k = top_k.clamp(1, log_probs.len());
    let mut indices: Vec<usize> = (0..log_probs.len()).collect();
    indices.sort_by(|&a, &b| {
        log_probs[b]
            .partial_cmp(&log_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let kept = &indices[..k];
    let max = log_probs[kept[0]];
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| ((log_probs[i] - max) / temperature.max(1e-12)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.random::<f64>() * total;
    for (j, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return kept[j];
        }
    }
    kept[k - 1]
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop early once the step loss drops below this value.
    pub target_loss: Option<f64>,
    /// Each step places its sequence at a random position offset in
    /// 0..=jitter, so the frozen model tolerates the positional shift that
    /// prepended prompts later introduce.
    pub position_jitter: usize,
    /// Sequences averaged per optimizer step.
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 2000,
            lr: 1e-2,
            adam: AdamConfig::default(),
            seed: 0,
            target_loss: None,
            position_jitter: 16,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainStats {
    pub steps_run: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    Sample { temperature: f64, top_k: usize },
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub eos_id: usize,
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    config: BackboneConfig,
    frozen: bool,
    vocab: Vec<String>,
}

/// Writes the backbone plus its vocabulary as a versioned binary container;
/// the roundtrip is bitwise exact.
pub fn save_backbone(path: &std::path::Path, backbone: &Backbone, vocab: &Vocabulary) -> Result<()> {
    let header = BackboneHeader {
        config: backbone.config.clone(),
        frozen: backbone.frozen,
        vocab: vocab.tokens().to_vec(),
    };
    let named = backbone.named_params();
    let arrays: Vec<(String, &Array)> = named.into_iter().collect();
    write_container(path, BACKBONE_MAGIC, BACKBONE_VERSION, &header, &arrays)
}

pub fn load_backbone(path: &std::path::Path) -> Result<(Backbone, Vocabulary)> {
    let (header, arrays) = read_container::<BackboneHeader>(path, BACKBONE_MAGIC, BACKBONE_VERSION)?;
    let mut backbone = Backbone::new(header.config, 0)?;
    backbone.replace_params(arrays)?;
    backbone.frozen = header.frozen;
    let vocab = Vocabulary::from_tokens(header.vocab);
    if vocab.len() != backbone.config.vocab_size {
        return Err(SptError::Checkpoint(format!(
            "vocabulary has {} entries but config says {}",
            vocab.len(),
            backbone.config.vocab_size
        )));
    }
    Ok((backbone, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(vocab: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size: vocab,
            hidden_dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            max_positions: 64,
            dropout_percent: 0,
        }
    }

    #[test]
    fn embed_returns_table_rows() {
        let backbone = Backbone::new(tiny_config(10), 1).unwrap();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let out = bound.embed(&mut tape, &[3, 3, 5]).unwrap();
        assert_eq!(tape.shape(out), &[3, 16]);
        let d = tape.data(out);
        assert_eq!(&d[0..16], &d[16..32]); // repeated token, identical rows
        assert!(bound.embed(&mut tape, &[10]).is_err());
    }

    #[test]
    fn forward_rows_are_normalized_distributions() {
        let backbone = Backbone::new(tiny_config(12), 2).unwrap();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let out = bound
            .forward_with_prompt(&mut tape, None, &[1, 2, 3], &[4, 5])
            .unwrap();
        assert_eq!(tape.shape(out.log_probs), &[5, 12]);
        let lp = tape.data(out.log_probs);
        for row in lp.chunks(12) {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() <= 1e-9, "row sums to {}", sum);
        }
    }

    #[test]
    fn causality_later_tokens_do_not_affect_earlier_rows() {
        let backbone = Backbone::new(tiny_config(12), 3).unwrap();
        let run = |target_last: usize| {
            let mut tape = Tape::new();
            let bound = backbone.bind(&mut tape);
            let out = bound
                .forward_with_prompt(&mut tape, None, &[1, 2], &[4, target_last])
                .unwrap();
            tape.data(out.log_probs).to_vec()
        };
        let a = run(5);
        let b = run(6);
        // Positions before the perturbed final token: rows 0..3 identical.
        let v = 12;
        assert_eq!(&a[..3 * v], &b[..3 * v]);
        assert_ne!(&a[3 * v..], &b[3 * v..]);
    }

    #[test]
    fn zero_length_prompt_reduces_to_plain_forward() {
        let backbone = Backbone::new(tiny_config(12), 4).unwrap();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let with_none = bound
            .forward_with_prompt(&mut tape, None, &[1, 2], &[3])
            .unwrap();
        let plain = bound
            .sequence_log_probs(&mut tape, None, &[1, 2, 3], &mut None)
            .unwrap();
        assert_eq!(tape.data(with_none.log_probs), tape.data(plain));
    }

    #[test]
    fn length_overflow_is_a_contract_error() {
        let backbone = Backbone::new(tiny_config(12), 5).unwrap();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let ids = vec![1usize; 65];
        let err = bound.sequence_log_probs(&mut tape, None, &ids, &mut None);
        assert!(matches!(err, Err(SptError::Contract(_))));
    }

    #[test]
    fn pretrain_with_zero_lr_changes_nothing() {
        let mut backbone = Backbone::new(tiny_config(10), 6).unwrap();
        let before = backbone.param_hash();
        let opts = PretrainOptions {
            steps: 3,
            lr: 0.0,
            ..Default::default()
        };
        backbone
            .pretrain(&[vec![1, 2, 3], vec![2, 3, 4]], &opts)
            .unwrap();
        assert_eq!(backbone.param_hash(), before);
        assert!(backbone.frozen());
    }

    #[test]
    fn pretrain_memorizes_a_three_sentence_corpus() {
        // Run-to-convergence oracle at the desk-scale configuration.
        let config = BackboneConfig {
            vocab_size: 12,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 256,
            max_positions: 32,
            dropout_percent: 0,
        };
        let mut backbone = Backbone::new(config, 7).unwrap();
        // Distinct first tokens, so every continuation is deterministic
        // and the corpus is fully memorizable.
        let corpus = vec![
            vec![8, 9, 10, 4, 3],
            vec![9, 11, 8, 5, 3],
            vec![10, 8, 11, 6, 3],
        ];
        let opts = PretrainOptions {
            steps: 2000,
            lr: 1e-2,
            target_loss: Some(0.05),
            position_jitter: 0,
            ..Default::default()
        };
        let stats = backbone.pretrain(&corpus, &opts).unwrap();
        let hit = stats.losses.iter().position(|&l| l < 0.1);
        assert!(
            hit.is_some_and(|i| i < 2000),
            "loss never fell below 0.1; final {}",
            stats.final_loss
        );

        // Frozen hash is now constant, and greedy decode reproduces the
        // memorized continuation.
        let hash = backbone.param_hash();
        let opts = DecodeOptions {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 4,
            eos_id: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = backbone.decode(None, &[8], &opts, &mut rng).unwrap();
        assert_eq!(out, vec![9, 10, 4, 3]);
        assert_eq!(backbone.param_hash(), hash);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_matches_cold_sampling() {
        let backbone = {
            let mut b = Backbone::new(tiny_config(10), 8).unwrap();
            b.freeze();
            b
        };
        let greedy = DecodeOptions {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 5,
            eos_id: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = backbone.decode(None, &[1, 2], &greedy, &mut rng).unwrap();
        let b = backbone.decode(None, &[1, 2], &greedy, &mut rng).unwrap();
        assert_eq!(a, b);

        let cold = DecodeOptions {
            strategy: DecodeStrategy::Sample {
                temperature: 1e-9,
                top_k: 10,
            },
            max_new_tokens: 5,
            eos_id: 3,
        };
        let c = backbone.decode(None, &[1, 2], &cold, &mut rng).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.sptb");
        let mut backbone = Backbone::new(tiny_config(11), 9).unwrap();
        backbone.freeze();
        let vocab = Vocabulary::build_from_texts(&["a b c"], 1).unwrap();
        save_backbone(&path, &backbone, &vocab).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (loaded, vocab2) = load_backbone(&path).unwrap();
        assert_eq!(loaded.param_hash(), backbone.param_hash());
        assert!(loaded.frozen());
        assert_eq!(vocab2, vocab);

        let path2 = dir.path().join("bb2.sptb");
        save_backbone(&path2, &loaded, &vocab2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.sptb");
        let backbone = Backbone::new(tiny_config(11), 10).unwrap();
        let vocab = Vocabulary::build_from_texts(&["a b"], 1).unwrap();
        save_backbone(&path, &backbone, &vocab).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'?';
        std::fs::write(&path, bytes).unwrap();
        assert!(load_backbone(&path).is_err());
    }

    #[test]
    fn prompt_rows_shift_token_positions() {
        // With a prompt of length 2, the first token sits at position 2.
        let backbone = Backbone::new(tiny_config(10), 11).unwrap();
        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape);
        let prompt = Array::zeros(vec![2, 16]);
        let pid = tape.constant(&prompt);
        let with_prompt = bound
            .sequence_log_probs(&mut tape, Some(pid), &[1, 2], &mut None)
            .unwrap();
        assert_eq!(tape.shape(with_prompt), &[4, 10]);
    }
}
