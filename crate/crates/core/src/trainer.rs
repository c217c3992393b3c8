//! Joint training of the prompt bank and retriever over a frozen backbone:
//! batching, loss accumulation, optimizer steps, checkpointing, and
//! selection-based inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, DecodeOptions};
use crate::bank::{SoftPromptBank, UsageReport};
use crate::container::{read_container, write_container};
use crate::error::{Result, SptError};
use crate::objectives::{
    batch_total, example_losses, ExampleForward, GuidanceNoise, LossBundle, ObjectiveConfig,
};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::retriever::{select, Retriever};
use crate::tensor::{Array, Precision, Tape};
use crate::text::{
    encode_example, serialize_context, DialogueContext, EncodedExample, Vocabulary,
    DEFAULT_MAX_CONTEXT_LEN,
};

const RUN_MAGIC: &[u8; 4] = b"SPTR";
const RUN_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Bank size K.
    pub k: usize,
    /// Virtual tokens per prompt.
    pub prompt_len: usize,
    pub lr: f64,
    /// Separate retriever learning rate; defaults to `lr`.
    pub retriever_lr: Option<f64>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Retriever projection width; defaults to the backbone hidden dim.
    pub retriever_proj_dim: Option<usize>,
    pub objective: ObjectiveConfig,
    /// Inference-time score perturbation strength.
    pub score_noise_alpha: f64,
    /// Training-time guidance perturbation strength.
    pub guidance_noise_alpha: f64,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
    pub max_context_len: usize,
    pub max_target_len: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            prompt_len: 1,
            lr: 0.01,
            retriever_lr: None,
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 10,
            seed: 0,
            retriever_proj_dim: None,
            objective: ObjectiveConfig::default(),
            score_noise_alpha: 0.0,
            guidance_noise_alpha: 0.0,
            grad_clip: None,
            precision: Precision::F64,
            max_context_len: DEFAULT_MAX_CONTEXT_LEN,
            max_target_len: 64,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.prompt_len == 0 {
            return Err(SptError::Config("k and prompt_len must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(SptError::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(SptError::Config("batch_size must be >= 1".into()));
        }
        if self.score_noise_alpha < 0.0 || self.guidance_noise_alpha < 0.0 {
            return Err(SptError::Config("noise strengths must be >= 0".into()));
        }
        self.objective.validate()
    }
}

/// Loss record for one optimizer step; serialized as one JSONL line of the
/// training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    pub per_prompt: Vec<f64>,
    pub selection: f64,
    pub contrastive: f64,
    pub fusion: f64,
    pub total: f64,
    /// Argmax retriever choice per example in the batch.
    pub selections: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_selection: f64,
    pub mean_contrastive: f64,
    pub mean_fusion: f64,
    pub mean_per_prompt: Vec<f64>,
    /// Argmax selection counts over the epoch's training examples.
    pub selection_counts: Vec<u64>,
    pub selection_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_nll: f64,
    pub perplexity: f64,
    pub target_tokens: usize,
    pub examples: usize,
    /// Retriever choice per evaluated example, corpus order.
    pub selections: Vec<usize>,
    pub selection_entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionAudit {
    /// Selection counts per regime label.
    pub per_regime: BTreeMap<String, Vec<u64>>,
    /// Majority prompt per regime.
    pub majority: BTreeMap<String, usize>,
    /// Fraction of examples whose choice matches their regime's majority.
    pub agreement: f64,
    /// Overall usage fraction per prompt.
    pub usage: Vec<f64>,
}

pub struct Trainer {
    config: TrainConfig,
    backbone: Backbone,
    vocab: Vocabulary,
    bank: SoftPromptBank,
    retriever: Retriever,
    adam: Adam,
    rng: ChaCha8Rng,
    rng_seed: [u8; 32],
    epoch: usize,
    batch_idx: usize,
    step: usize,
    backbone_hash: String,
}

impl Trainer {
    pub fn new(backbone: Backbone, vocab: Vocabulary, config: TrainConfig) -> Result<Self> {
        if !backbone.frozen() {
            return Err(SptError::Contract(
                "trainer requires a frozen backbone".into(),
            ));
        }
        let d = backbone.config.hidden_dim;
        let bank = SoftPromptBank::init(config.k, config.prompt_len, d, config.seed)?;
        bank.validate_against(&backbone.config)?;
        let proj = config.retriever_proj_dim.unwrap_or(d);
        let retriever = Retriever::new(d, proj, config.seed.wrapping_add(1))?;
        if config.prompt_len + config.max_context_len + config.max_target_len
            > backbone.config.max_positions
        {
            return Err(SptError::Config(format!(
                "prompt_len {} + max_context_len {} + max_target_len {} exceeds max positions {}",
                config.prompt_len,
                config.max_context_len,
                config.max_target_len,
                backbone.config.max_positions
            )));
        }
        let mut sizes: Vec<usize> = (0..config.k)
            .map(|_| config.prompt_len * d)
            .collect();
        sizes.extend(retriever.named_params().iter().map(|(_, a)| a.numel()));
        let adam = Adam::new(config.adam, &sizes);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
        let rng_seed = rng.get_seed();
        let backbone_hash = backbone.param_hash();
        Ok(Trainer {
            config,
            backbone,
            vocab,
            bank,
            retriever,
            adam,
            rng,
            rng_seed,
            epoch: 0,
            batch_idx: 0,
            step: 0,
            backbone_hash,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn bank(&self) -> &SoftPromptBank {
        &self.bank
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Hash of the frozen backbone recorded at construction.
    pub fn backbone_hash(&self) -> &str {
        &self.backbone_hash
    }

    /// K*L*D prompt parameters plus the two retriever projections.
    pub fn trainable_param_count(&self) -> usize {
        self.bank.trainable_param_count() + self.retriever.trainable_param_count()
    }

    /// Encodes records against the trainer's vocabulary and limits.
    pub fn prepare(&self, records: &[DialogueContext]) -> Result<Vec<EncodedExample>> {
        records
            .iter()
            .map(|r| {
                let ex = encode_example(r, &self.vocab, self.config.max_context_len)?;
                if ex.target_ids.len() > self.config.max_target_len {
                    return Err(SptError::Contract(format!(
                        "target of {} tokens exceeds max_target_len {}",
                        ex.target_ids.len(),
                        self.config.max_target_len
                    )));
                }
                Ok(ex)
            })
            .collect()
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.config
                    .seed
                    .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1)),
            );
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        order
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Runs one batch: forwards, composed loss, backward, one Adam step on
    /// prompts and retriever. Returns None once the epoch is exhausted.
    pub fn step_batch(&mut self, data: &[EncodedExample]) -> Result<Option<StepRecord>> {
        if data.is_empty() {
            return Err(SptError::Contract("step_batch: empty dataset".into()));
        }
        let n_batches = self.batches_per_epoch(data.len());
        if self.batch_idx >= n_batches {
            return Ok(None);
        }
        let order = self.epoch_order(self.epoch, data.len());
        let start = self.batch_idx * self.config.batch_size;
        let end = (start + self.config.batch_size).min(data.len());
        let batch_indices = &order[start..end];

        let mut tape = Tape::with_precision(self.config.precision);
        let bound_backbone = self.backbone.bind(&mut tape);
        let prompt_ids = self.bank.bind(&mut tape);
        let bound_ret = self.retriever.bind(&mut tape);

        let mut forwards: Vec<ExampleForward> = Vec::with_capacity(batch_indices.len());
        for &idx in batch_indices {
            let noise = if self.config.guidance_noise_alpha > 0.0 {
                Some(GuidanceNoise {
                    alpha: self.config.guidance_noise_alpha,
                    rng: &mut self.rng,
                })
            } else {
                None
            };
            let fwd = match example_losses(
                &mut tape,
                &bound_backbone,
                &prompt_ids,
                &bound_ret,
                &data[idx],
                &self.config.objective,
                noise,
            ) {
                Ok(fwd) => fwd,
                Err(SptError::NonFinite(component)) => {
                    return Err(SptError::Diverged {
                        step: self.step,
                        batch: self.batch_idx,
                        component: component.into(),
                    })
                }
                Err(other) => return Err(other),
            };
            forwards.push(fwd);
        }
        let selections: Vec<usize> = forwards
            .iter()
            .map(|f| select(&f.scores.distribution_values))
            .collect();
        let batch = batch_total(&mut tape, &forwards, &self.config.objective)?;
        if let Some(component) = batch.bundle.all_finite() {
            return Err(SptError::Diverged {
                step: self.step,
                batch: self.batch_idx,
                component: component.into(),
            });
        }
        tape.backward(batch.total)?;

        let mut grads: Vec<Vec<f64>> = prompt_ids
            .iter()
            .map(|&id| tape.grad(id).expect("prompt grad").to_vec())
            .collect();
        for id in [
            bound_ret.w_ctx,
            bound_ret.b_ctx,
            bound_ret.w_prompt,
            bound_ret.b_prompt,
        ] {
            grads.push(tape.grad(id).expect("retriever grad").to_vec());
        }
        if let Some(max_norm) = self.config.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }

        let retriever_lr = self.config.retriever_lr.unwrap_or(self.config.lr);
        let mut lrs = vec![self.config.lr; self.config.k];
        lrs.extend(std::iter::repeat_n(retriever_lr, 4));

        let mut slices: Vec<&mut [f64]> = self
            .bank
            .prompts_mut()
            .iter_mut()
            .map(|a| a.data.as_mut_slice())
            .collect();
        for (_, a) in self.retriever.named_params_mut() {
            slices.push(a.data.as_mut_slice());
        }
        self.adam.step(&mut slices, &grads, &lrs)?;

        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            batch: self.batch_idx,
            per_prompt: batch.bundle.per_prompt.clone(),
            selection: batch.bundle.selection,
            contrastive: batch.bundle.contrastive,
            fusion: batch.bundle.fusion,
            total: batch.bundle.total,
            selections,
        };
        self.step += 1;
        self.batch_idx += 1;
        Ok(Some(record))
    }

    /// Rolls the trainer over to the next epoch and summarizes the step
    /// records collected during the finished one. Call after `step_batch`
    /// has returned None.
    pub fn finish_epoch(&mut self, records: &[StepRecord]) -> EpochStats {
        let finished = self.epoch;
        self.epoch += 1;
        self.batch_idx = 0;
        summarize_epoch(finished, records, self.config.k)
    }

    /// Runs the remainder of the current epoch and rolls over to the next.
    pub fn train_epoch(&mut self, data: &[EncodedExample]) -> Result<EpochStats> {
        let mut records = Vec::new();
        while let Some(record) = self.step_batch(data)? {
            records.push(record);
        }
        Ok(self.finish_epoch(&records))
    }

    /// Convenience wrapper: trains for `config.epochs`, returning per-epoch
    /// stats and the full step log.
    pub fn train(
        &mut self,
        data: &[EncodedExample],
    ) -> Result<(Vec<EpochStats>, Vec<StepRecord>)> {
        let mut stats = Vec::new();
        let mut log = Vec::new();
        for _ in 0..self.config.epochs {
            let mut epoch_records = Vec::new();
            while let Some(record) = self.step_batch(data)? {
                epoch_records.push(record);
            }
            stats.push(self.finish_epoch(&epoch_records));
            log.extend(epoch_records);
        }
        Ok((stats, log))
    }

    /// Inference-path retriever scores for an encoded context, optionally
    /// perturbed by alpha-scaled Gaussian noise: score + alpha * noise.
    pub fn inference_scores(
        &self,
        context_ids: &[usize],
        noise_alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::with_precision(self.config.precision);
        let bound_backbone = self.backbone.bind(&mut tape);
        let prompt_ids = self.bank.bind(&mut tape);
        let bound_ret = self.retriever.bind(&mut tape);
        let emb = bound_backbone.embed(&mut tape, context_ids)?;
        let scores = bound_ret.score(
            &mut tape,
            emb,
            &prompt_ids,
            self.config.objective.score_normalization,
        )?;
        let mut values = scores.score_values;
        if noise_alpha > 0.0 {
            for v in &mut values {
                let draw: f64 = StandardNormal.sample(rng);
                *v += noise_alpha * draw;
            }
        }
        Ok(values)
    }

    /// Target-token perplexity under hard prompt selection.
    pub fn evaluate(
        &self,
        examples: &[EncodedExample],
        noise_alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EvalStats> {
        if examples.is_empty() {
            return Err(SptError::Contract("evaluate: empty dataset".into()));
        }
        let mut total_nll = 0.0;
        let mut total_tokens = 0usize;
        let mut selections = Vec::with_capacity(examples.len());
        let mut counts = vec![0u64; self.config.k];
        for ex in examples {
            let scores = self.inference_scores(&ex.context_ids, noise_alpha, rng)?;
            let chosen = select(&scores);
            selections.push(chosen);
            counts[chosen] += 1;

            let mut tape = Tape::with_precision(self.config.precision);
            let bound = self.backbone.bind(&mut tape);
            let prompt = tape.constant(self.bank.get(chosen)?);
            let fwd = bound.forward_with_prompt(
                &mut tape,
                Some(prompt),
                &ex.context_ids,
                &ex.target_ids,
            )?;
            let tokens = ex.target_ids.len();
            total_nll += tape.scalar_value(fwd.nll) * tokens as f64;
            total_tokens += tokens;
        }
        let mean_nll = total_nll / total_tokens as f64;
        Ok(EvalStats {
            mean_nll,
            perplexity: mean_nll.exp(),
            target_tokens: total_tokens,
            examples: examples.len(),
            selections,
            selection_entropy: entropy_of_counts(&counts),
        })
    }

    /// Selects a prompt for the context, records the selection against the
    /// conversation turn index, and decodes a response.
    pub fn generate(
        &self,
        ctx: &DialogueContext,
        decode: &DecodeOptions,
        noise_alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generated> {
        let serialized = serialize_context(ctx, &self.vocab, self.config.max_context_len)?;
        let scores = self.inference_scores(&serialized.ids, noise_alpha, rng)?;
        let chosen = select(&scores);
        let turn_index = ctx
            .history
            .iter()
            .filter(|u| u.speaker == crate::text::Speaker::Human)
            .count()
            .saturating_sub(1) as u32;
        self.bank.record_selection(chosen, turn_index)?;
        let tokens = self
            .backbone
            .decode(Some(self.bank.get(chosen)?), &serialized.ids, decode, rng)?;
        Ok(Generated {
            text: self.vocab.decode_content(&tokens),
            token_ids: tokens,
            prompt_index: chosen,
            scores,
        })
    }

    // ── Checkpointing ───────────────────────────────────────────────────

    pub fn checkpoint_save(&self, path: &Path) -> Result<()> {
        let header = RunHeader {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            batch_idx: self.batch_idx,
            adam_steps: self.adam.step_count,
            rng_seed_hex: hex_bytes(&self.rng_seed),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            backbone_hash: self.backbone_hash.clone(),
            usage: self.bank.usage_report(),
        };
        let mut arrays: Vec<(String, &Array)> = Vec::new();
        for i in 0..self.config.k {
            arrays.push((format!("prompt{}", i), self.bank.get(i)?));
        }
        for (name, a) in self.retriever.named_params() {
            arrays.push((format!("retriever.{}", name), a));
        }
        let moment_arrays: Vec<(String, Array)> = self
            .adam
            .m
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("adam.m{}", i), Array::vector(m.clone())))
            .chain(
                self.adam
                    .v
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (format!("adam.v{}", i), Array::vector(v.clone()))),
            )
            .collect();
        let mut all: Vec<(String, &Array)> = arrays;
        all.extend(moment_arrays.iter().map(|(n, a)| (n.clone(), a)));
        write_container(path, RUN_MAGIC, RUN_VERSION, &header, &all)
    }

    /// Restores a run against the same frozen backbone. When `expected` is
    /// given, structural fields (k, prompt length, projection width,
    /// precision) must match the stored config.
    pub fn checkpoint_load(
        path: &Path,
        backbone: Backbone,
        vocab: Vocabulary,
        expected: Option<&TrainConfig>,
    ) -> Result<Trainer> {
        let (header, arrays) = read_container::<RunHeader>(path, RUN_MAGIC, RUN_VERSION)?;
        if backbone.param_hash() != header.backbone_hash {
            return Err(SptError::Checkpoint(
                "backbone hash does not match the one this run was trained against".into(),
            ));
        }
        if let Some(expected) = expected {
            if expected.k != header.config.k
                || expected.prompt_len != header.config.prompt_len
                || expected.retriever_proj_dim != header.config.retriever_proj_dim
                || expected.precision != header.config.precision
            {
                return Err(SptError::Checkpoint(format!(
                    "checkpoint was trained with k={}, prompt_len={}, proj_dim={:?}; \
                     requested k={}, prompt_len={}, proj_dim={:?}",
                    header.config.k,
                    header.config.prompt_len,
                    header.config.retriever_proj_dim,
                    expected.k,
                    expected.prompt_len,
                    expected.retriever_proj_dim
                )));
            }
        }
        let mut trainer = Trainer::new(backbone, vocab, header.config.clone())?;
        let by_name: BTreeMap<String, Array> = arrays.into_iter().collect();
        for i in 0..header.config.k {
            let name = format!("prompt{}", i);
            let stored = by_name
                .get(&name)
                .ok_or_else(|| SptError::Checkpoint(format!("missing array {}", name)))?;
            let slot = trainer.bank.get_mut(i);
            if slot.shape != stored.shape {
                return Err(SptError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    name, stored.shape, slot.shape
                )));
            }
            *slot = stored.clone();
        }
        for (name, slot) in trainer.retriever.named_params_mut() {
            let key = format!("retriever.{}", name);
            let stored = by_name
                .get(&key)
                .ok_or_else(|| SptError::Checkpoint(format!("missing array {}", key)))?;
            if slot.shape != stored.shape {
                return Err(SptError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    key, stored.shape, slot.shape
                )));
            }
            *slot = stored.clone();
        }
        for (i, m) in trainer.adam.m.iter_mut().enumerate() {
            let key = format!("adam.m{}", i);
            let stored = by_name
                .get(&key)
                .ok_or_else(|| SptError::Checkpoint(format!("missing array {}", key)))?;
            m.copy_from_slice(&stored.data);
        }
        for (i, v) in trainer.adam.v.iter_mut().enumerate() {
            let key = format!("adam.v{}", i);
            let stored = by_name
                .get(&key)
                .ok_or_else(|| SptError::Checkpoint(format!("missing array {}", key)))?;
            v.copy_from_slice(&stored.data);
        }
        trainer.adam.step_count = header.adam_steps;
        trainer.step = header.step;
        trainer.epoch = header.epoch;
        trainer.batch_idx = header.batch_idx;
        let seed = parse_seed(&header.rng_seed_hex)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        let word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| SptError::Checkpoint("bad rng word position".into()))?;
        rng.set_word_pos(word_pos);
        trainer.rng = rng;
        trainer.rng_seed = seed;
        trainer.bank.restore_usage(&header.usage)?;
        Ok(trainer)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generated {
    pub text: String,
    pub token_ids: Vec<usize>,
    pub prompt_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RunHeader {
    config: TrainConfig,
    step: usize,
    epoch: usize,
    batch_idx: usize,
    adam_steps: u64,
    rng_seed_hex: String,
    rng_word_pos: String,
    backbone_hash: String,
    usage: UsageReport,
}

fn summarize_epoch(epoch: usize, records: &[StepRecord], k: usize) -> EpochStats {
    let steps = records.len();
    let denom = steps.max(1) as f64;
    let mut mean_per_prompt = vec![0.0; k];
    let mut mean_selection = 0.0;
    let mut mean_contrastive = 0.0;
    let mut mean_fusion = 0.0;
    let mut mean_total = 0.0;
    let mut selection_counts = vec![0u64; k];
    for r in records {
        for i in 0..k {
            mean_per_prompt[i] += r.per_prompt[i] / denom;
        }
        mean_selection += r.selection / denom;
        mean_contrastive += r.contrastive / denom;
        mean_fusion += r.fusion / denom;
        mean_total += r.total / denom;
        for &s in &r.selections {
            selection_counts[s] += 1;
        }
    }
    EpochStats {
        epoch,
        steps,
        mean_total,
        mean_selection,
        mean_contrastive,
        mean_fusion,
        mean_per_prompt,
        selection_entropy: entropy_of_counts(&selection_counts),
        selection_counts,
    }
}

/// Shannon entropy (nats) of a count vector's empirical distribution.
pub fn entropy_of_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Per-regime selection breakdown: majority prompt per regime, agreement
/// rate, and overall usage fractions. Examples without a regime label are
/// skipped for the agreement figure.
pub fn selection_audit(examples: &[EncodedExample], selections: &[usize], k: usize) -> SelectionAudit {
    let mut per_regime: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut usage = vec![0u64; k];
    for (ex, &sel) in examples.iter().zip(selections) {
        usage[sel] += 1;
        if let Some(regime) = &ex.regime {
            per_regime.entry(regime.clone()).or_insert_with(|| vec![0; k])[sel] += 1;
        }
    }
    let majority: BTreeMap<String, usize> = per_regime
        .iter()
        .map(|(regime, counts)| (regime.clone(), select_u64(counts)))
        .collect();
    let mut agree = 0usize;
    let mut labelled = 0usize;
    for (ex, &sel) in examples.iter().zip(selections) {
        if let Some(regime) = &ex.regime {
            labelled += 1;
            if majority[regime] == sel {
                agree += 1;
            }
        }
    }
    let total: u64 = usage.iter().sum();
    SelectionAudit {
        per_regime,
        majority,
        agreement: if labelled > 0 {
            agree as f64 / labelled as f64
        } else {
            0.0
        },
        usage: usage
            .iter()
            .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
            .collect(),
    }
}

fn select_u64(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn hex_bytes(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(SptError::Checkpoint("bad rng seed length".into()));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk)
            .map_err(|_| SptError::Checkpoint("bad rng seed".into()))?;
        out[i] = u8::from_str_radix(s, 16)
            .map_err(|_| SptError::Checkpoint("bad rng seed".into()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, PretrainOptions};
    use crate::synth::{generate, SynthConfig};
    use crate::text::encode_example as encode;

    fn small_setup(
        pretrain_steps: usize,
        train_config: TrainConfig,
    ) -> (Trainer, Vec<EncodedExample>, Vec<EncodedExample>) {
        let synth = SynthConfig {
            regimes: 2,
            train_dialogues_per_regime: 10,
            valid_dialogues_per_regime: 4,
            seed: 7,
            ..Default::default()
        };
        let corpus = generate(&synth).unwrap();
        let vocab = Vocabulary::build(&corpus.train, 1).unwrap();
        let mut bb_config = BackboneConfig::desk_default(vocab.len());
        bb_config.hidden_dim = 32;
        bb_config.ffn_dim = 64;
        bb_config.max_positions = 192;
        let mut backbone = Backbone::new(bb_config, 1).unwrap();
        let sequences: Vec<Vec<usize>> = corpus
            .train
            .iter()
            .map(|r| {
                let ex = encode(r, &vocab, 128).unwrap();
                let mut seq = ex.context_ids.clone();
                seq.extend(&ex.target_ids);
                seq
            })
            .collect();
        backbone
            .pretrain(
                &sequences,
                &PretrainOptions {
                    steps: pretrain_steps,
                    lr: 3e-3,
                    ..Default::default()
                },
            )
            .unwrap();
        let trainer = Trainer::new(backbone, vocab.clone(), train_config).unwrap();
        let train_data = trainer.prepare(&corpus.train).unwrap();
        let valid_data = trainer.prepare(&corpus.valid).unwrap();
        (trainer, train_data, valid_data)
    }

    fn quick_config(k: usize, epochs: usize) -> TrainConfig {
        TrainConfig {
            k,
            prompt_len: 2,
            epochs,
            batch_size: 4,
            max_context_len: 128,
            max_target_len: 16,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_leaves_trainables_unchanged() {
        let mut config = quick_config(2, 1);
        config.lr = 0.0;
        let (mut trainer, train_data, _) = small_setup(30, config);
        let before_prompt = trainer.bank.get(0).unwrap().data.clone();
        let before_ret = trainer.retriever.named_params()[0].1.data.clone();
        trainer.train_epoch(&train_data).unwrap();
        assert_eq!(trainer.bank.get(0).unwrap().data, before_prompt);
        assert_eq!(trainer.retriever.named_params()[0].1.data, before_ret);
    }

    #[test]
    fn fixed_seed_reproduces_epoch_stats_bitwise() {
        let run = || {
            let (mut trainer, train_data, _) = small_setup(30, quick_config(2, 1));
            let mut records = Vec::new();
            while let Some(r) = trainer.step_batch(&train_data).unwrap() {
                records.push(serde_json::to_string(&r).unwrap());
            }
            (records, trainer.bank.get(0).unwrap().data.clone())
        };
        let (log_a, prompt_a) = run();
        let (log_b, prompt_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(prompt_a, prompt_b);
    }

    #[test]
    fn loss_trend_decreases_over_epochs() {
        let (mut trainer, train_data, _) = small_setup(60, quick_config(2, 5));
        let (stats, _) = trainer.train(&train_data).unwrap();
        assert!(stats.len() == 5);
        assert!(
            stats[4].mean_total < stats[0].mean_total,
            "epoch 5 loss {} not below epoch 1 loss {}",
            stats[4].mean_total,
            stats[0].mean_total
        );
    }

    #[test]
    fn backbone_hash_constant_and_param_count_closed_form() {
        let config = quick_config(3, 2);
        let (mut trainer, train_data, _) = small_setup(30, config);
        let hash_before = trainer.backbone().param_hash();
        let d = trainer.backbone().config.hidden_dim;
        let expected = 3 * 2 * d + 2 * (d * d + d);
        assert_eq!(trainer.trainable_param_count(), expected);
        for _ in 0..2 {
            trainer.train_epoch(&train_data).unwrap();
        }
        assert_eq!(trainer.backbone().param_hash(), hash_before);
        assert_eq!(trainer.backbone_hash(), hash_before);
    }

    #[test]
    fn nan_loss_aborts_with_component() {
        let (mut trainer, train_data, _) = small_setup(20, quick_config(2, 1));
        trainer.bank.get_mut(0).data[0] = f64::NAN;
        let err = trainer.step_batch(&train_data).unwrap_err();
        match err {
            SptError::Diverged {
                step,
                batch,
                component,
            } => {
                assert_eq!(step, 0);
                assert_eq!(batch, 0);
                assert!(!component.is_empty());
            }
            other => panic!("expected divergence error, got {other}"),
        }
    }

    #[test]
    fn score_noise_zero_reproduces_noiseless_selection() {
        let (trainer, _, valid_data) = small_setup(30, quick_config(2, 1));
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let mut rng_b = ChaCha8Rng::seed_from_u64(10);
        let noiseless_a = trainer.evaluate(&valid_data, 0.0, &mut rng_a).unwrap();
        let noiseless_b = trainer.evaluate(&valid_data, 0.0, &mut rng_b).unwrap();
        assert_eq!(noiseless_a.selections, noiseless_b.selections);
        assert_eq!(noiseless_a.perplexity, noiseless_b.perplexity);
    }

    #[test]
    fn k1_always_selects_index_zero() {
        let (trainer, _, valid_data) = small_setup(20, quick_config(1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stats = trainer.evaluate(&valid_data, 0.0, &mut rng).unwrap();
        assert!(stats.selections.iter().all(|&s| s == 0));
    }

    #[test]
    fn checkpoint_roundtrip_resumes_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.sptr");
        let config = quick_config(2, 2);
        let (mut trainer, train_data, _) = small_setup(30, config.clone());

        // Advance into the middle of an epoch, then snapshot.
        trainer.step_batch(&train_data).unwrap().unwrap();
        trainer.step_batch(&train_data).unwrap().unwrap();
        trainer.checkpoint_save(&path).unwrap();

        // Continue the original run.
        let next_direct = trainer.step_batch(&train_data).unwrap().unwrap();

        // Reload and continue from the snapshot.
        let (backbone2, vocab2, _) = rebuild_backbone(30);
        let mut resumed =
            Trainer::checkpoint_load(&path, backbone2, vocab2, Some(&config)).unwrap();
        let next_resumed = resumed.step_batch(&train_data).unwrap().unwrap();
        assert_eq!(
            serde_json::to_string(&next_direct).unwrap(),
            serde_json::to_string(&next_resumed).unwrap()
        );
        assert_eq!(
            trainer.bank.get(0).unwrap().data,
            resumed.bank.get(0).unwrap().data
        );

        // Saving the resumed state reproduces identical bytes.
        let path2 = dir.path().join("run2.sptr");
        trainer.checkpoint_save(&path2).unwrap();
        let path3 = dir.path().join("run3.sptr");
        resumed.checkpoint_save(&path3).unwrap();
        assert_eq!(
            std::fs::read(&path2).unwrap(),
            std::fs::read(&path3).unwrap()
        );
    }

    // Rebuilds the identical pretrained backbone used by `small_setup`,
    // for checkpoint reload tests.
    fn rebuild_backbone(pretrain_steps: usize) -> (Backbone, Vocabulary, Vec<EncodedExample>) {
        let synth = SynthConfig {
            regimes: 2,
            train_dialogues_per_regime: 10,
            valid_dialogues_per_regime: 4,
            seed: 7,
            ..Default::default()
        };
        let corpus = generate(&synth).unwrap();
        let vocab = Vocabulary::build(&corpus.train, 1).unwrap();
        let mut bb_config = BackboneConfig::desk_default(vocab.len());
        bb_config.hidden_dim = 32;
        bb_config.ffn_dim = 64;
        bb_config.max_positions = 192;
        let mut backbone = Backbone::new(bb_config, 1).unwrap();
        let sequences: Vec<Vec<usize>> = corpus
            .train
            .iter()
            .map(|r| {
                let ex = encode(r, &vocab, 128).unwrap();
                let mut seq = ex.context_ids.clone();
                seq.extend(&ex.target_ids);
                seq
            })
            .collect();
        backbone
            .pretrain(
                &sequences,
                &PretrainOptions {
                    steps: pretrain_steps,
                    lr: 3e-3,
                    ..Default::default()
                },
            )
            .unwrap();
        let examples = corpus
            .train
            .iter()
            .map(|r| encode(r, &vocab, 128).unwrap())
            .collect();
        (backbone, vocab, examples)
    }

    #[test]
    fn checkpoint_rejects_mismatched_config_and_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.sptr");
        let config = quick_config(4, 1);
        let (trainer, _, _) = small_setup(30, config);
        trainer.checkpoint_save(&path).unwrap();

        // K mismatch.
        let (backbone2, vocab2, _) = rebuild_backbone(30);
        let wanted = quick_config(2, 1);
        let err = match Trainer::checkpoint_load(&path, backbone2, vocab2, Some(&wanted)) {
            Err(e) => e,
            Ok(_) => panic!("expected a config mismatch error"),
        };
        assert!(err.to_string().contains("k="), "{err}");

        // Backbone hash mismatch.
        let (mut other_backbone, vocab3, _) = rebuild_backbone(30);
        // A different pretraining seed changes the weights.
        other_backbone = {
            let mut b = Backbone::new(other_backbone.config.clone(), 99).unwrap();
            b.freeze();
            b
        };
        let err = match Trainer::checkpoint_load(&path, other_backbone, vocab3, None) {
            Err(e) => e,
            Ok(_) => panic!("expected a backbone hash error"),
        };
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn generate_records_usage_and_returns_text() {
        let (trainer, _, _) = small_setup(40, quick_config(2, 1));
        let synth = SynthConfig {
            regimes: 2,
            train_dialogues_per_regime: 2,
            valid_dialogues_per_regime: 1,
            seed: 7,
            ..Default::default()
        };
        let corpus = generate(&synth).unwrap();
        let decode = DecodeOptions {
            strategy: crate::backbone::DecodeStrategy::Greedy,
            max_new_tokens: 8,
            eos_id: crate::text::EOS,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let before = trainer.bank().usage_report().total;
        let out = trainer
            .generate(&corpus.valid[0], &decode, 0.0, &mut rng)
            .unwrap();
        assert!(out.prompt_index < 2);
        assert_eq!(out.scores.len(), 2);
        assert_eq!(trainer.bank().usage_report().total, before + 1);
    }

    #[test]
    fn selection_audit_computes_majority_agreement() {
        let mk = |regime: &str| EncodedExample {
            context_ids: vec![1],
            target_ids: vec![2],
            raw_context_text: String::new(),
            regime: Some(regime.into()),
            dropped_turns: 0,
            turn_index: 0,
        };
        let examples = vec![mk("r0"), mk("r0"), mk("r0"), mk("r1"), mk("r1")];
        let selections = vec![0, 0, 1, 1, 1];
        let audit = selection_audit(&examples, &selections, 2);
        assert_eq!(audit.majority["r0"], 0);
        assert_eq!(audit.majority["r1"], 1);
        assert!((audit.agreement - 0.8).abs() < 1e-12);
        assert_eq!(audit.usage, vec![0.4, 0.6]);
    }
}
