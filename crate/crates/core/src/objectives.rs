//! The four training losses and their composition: per-prompt NLL,
//! selection KL against loss-derived guidance, context-prompt contrastive
//! shaping, and prompt fusion, combined into one weighted total per batch.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::BoundBackbone;
use crate::error::{Result, SptError};
use crate::metrics::context_similarity;
use crate::retriever::{BoundRetriever, ScoreNormalization, SimilarityScores};
use crate::tensor::{Array, Tape, TensorId};
use crate::text::EncodedExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Batch means: learning rates stay batch-size invariant.
    #[default]
    Mean,
    /// Plain summation over the batch and pair loops.
    Sum,
}

/// Which argument of the selection KL comes first. `ScoresFirst` follows
/// the similarity-scores-then-guidance order; `GuidanceFirst` is the
/// distillation convention, kept for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    #[default]
    ScoresFirst,
    GuidanceFirst,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Guidance softmax temperature.
    pub tau_g: f64,
    /// Textual-similarity threshold on the 0-100 BLEU scale.
    pub gamma: f64,
    /// Contrastive weight.
    pub lambda1: f64,
    /// Selection weight.
    pub lambda2: f64,
    /// Fusion weight.
    pub lambda3: f64,
    pub loss_reduction: LossReduction,
    pub score_normalization: ScoreNormalization,
    /// Detach the guidance distribution so the selection KL teaches the
    /// retriever without reshaping the prompt losses. Disable for ablation.
    pub stop_gradient_guidance: bool,
    /// Compute the contrastive cosine on raw cosines instead of softplus
    /// scores.
    pub contrastive_on_raw: bool,
    pub kl_direction: KlDirection,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            tau_g: 1.0,
            gamma: 20.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            loss_reduction: LossReduction::Mean,
            score_normalization: ScoreNormalization::Sum,
            stop_gradient_guidance: true,
            contrastive_on_raw: false,
            kl_direction: KlDirection::ScoresFirst,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_g <= 0.0 {
            return Err(SptError::Config("tau_g must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(SptError::Config("lambda weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything computed for one example on the live tape.
pub struct ExampleForward {
    /// NLL of the target under each prompt, K scalars.
    pub per_prompt: Vec<TensorId>,
    pub per_prompt_values: Vec<f64>,
    /// Full-sequence log-probabilities per prompt; reused by fusion.
    pub log_probs: Vec<TensorId>,
    pub scores: SimilarityScores,
    pub selection: TensorId,
    pub selection_value: f64,
    pub fusion: TensorId,
    pub fusion_value: f64,
    /// Raw context text, the single source the contrastive gate reads.
    pub raw_text: String,
}

/// Optional Gaussian perturbation of the guidance distribution during
/// training, scaled by alpha. The perturbed guidance leaves the simplex, so
/// the KL runs unchecked (floored only); large alphas destabilize training
/// by design.
pub struct GuidanceNoise<'r> {
    pub alpha: f64,
    pub rng: &'r mut ChaCha8Rng,
}

/// Runs the K prompt-conditioned forwards plus retriever scoring for one
/// example and assembles its per-prompt, selection, and fusion losses.
pub fn example_losses(
    tape: &mut Tape,
    backbone: &BoundBackbone,
    prompts: &[TensorId],
    retriever: &BoundRetriever,
    example: &EncodedExample,
    config: &ObjectiveConfig,
    mut guidance_noise: Option<GuidanceNoise>,
) -> Result<ExampleForward> {
    if prompts.is_empty() {
        return Err(SptError::Contract("example_losses: no prompts".into()));
    }
    let k = prompts.len();

    let mut per_prompt = Vec::with_capacity(k);
    let mut log_probs = Vec::with_capacity(k);
    let mut targets: Option<Vec<usize>> = None;
    for &prompt in prompts {
        let fwd = backbone.forward_with_prompt(
            tape,
            Some(prompt),
            &example.context_ids,
            &example.target_ids,
        )?;
        per_prompt.push(fwd.nll);
        log_probs.push(fwd.log_probs);
        targets.get_or_insert(fwd.targets);
    }
    let targets = targets.expect("at least one prompt");
    if per_prompt
        .iter()
        .any(|&id| !tape.scalar_value(id).is_finite())
    {
        return Err(SptError::NonFinite("per_prompt"));
    }

    let context_embedding = backbone.embed(tape, &example.context_ids)?;
    let scores = retriever.score(tape, context_embedding, prompts, config.score_normalization)?;
    if scores.distribution_values.iter().any(|v| !v.is_finite()) {
        return Err(SptError::NonFinite("scores"));
    }

    let selection = selection_loss(
        tape,
        &scores,
        &per_prompt,
        config,
        guidance_noise.as_mut(),
    )?;
    if !tape.scalar_value(selection).is_finite() {
        return Err(SptError::NonFinite("selection"));
    }
    let fusion = fusion_from_log_probs(tape, &log_probs, &targets)?;
    if !tape.scalar_value(fusion).is_finite() {
        return Err(SptError::NonFinite("fusion"));
    }

    Ok(ExampleForward {
        per_prompt_values: per_prompt.iter().map(|&id| tape.scalar_value(id)).collect(),
        selection_value: tape.scalar_value(selection),
        fusion_value: tape.scalar_value(fusion),
        per_prompt,
        log_probs,
        scores,
        selection,
        fusion,
        raw_text: example.raw_context_text.clone(),
    })
}

/// KL divergence between the retriever's score distribution and the
/// guidance softmax of negative per-prompt losses at temperature tau_g.
/// With a single prompt both sides are the point distribution and the loss
/// is identically zero.
pub fn selection_loss(
    tape: &mut Tape,
    scores: &SimilarityScores,
    per_prompt: &[TensorId],
    config: &ObjectiveConfig,
    guidance_noise: Option<&mut GuidanceNoise>,
) -> Result<TensorId> {
    let stacked = tape.stack_scalars(per_prompt)?;
    let negated = tape.scale(stacked, -1.0);
    let mut guidance = tape.softmax(negated, config.tau_g)?;
    if config.stop_gradient_guidance {
        guidance = tape.stop_gradient(guidance);
    }
    let mut noisy = false;
    if let Some(noise) = guidance_noise {
        if noise.alpha > 0.0 {
            let k = per_prompt.len();
            let perturbation: Vec<f64> = (0..k)
                .map(|_| {
                    let draw: f64 = StandardNormal.sample(noise.rng);
                    noise.alpha * draw
                })
                .collect();
            let perturbation = tape.constant(&Array::vector(perturbation));
            guidance = tape.add(guidance, perturbation)?;
            noisy = true;
        }
    }
    let (first, second) = match config.kl_direction {
        KlDirection::ScoresFirst => (scores.distribution, guidance),
        KlDirection::GuidanceFirst => (guidance, scores.distribution),
    };
    if noisy {
        tape.kl_divergence_unchecked(first, second)
    } else {
        tape.kl_divergence(first, second)
    }
}

/// NLL of the arithmetic mean of the per-prompt predictive distributions,
/// computed stably as elementwise log-sum-exp of the log-probabilities
/// minus ln K.
pub fn fusion_from_log_probs(
    tape: &mut Tape,
    log_probs: &[TensorId],
    targets: &[usize],
) -> Result<TensorId> {
    let k = log_probs.len();
    let lse = tape.logsumexp_stack(log_probs)?;
    let fused = tape.add_scalar(lse, -(k as f64).ln());
    tape.nll(fused, targets, usize::MAX)
}

/// One contrastive pair: textually similar contexts pull their score
/// vectors together (1 - cos), dissimilar ones push any positive cosine
/// down (max(0, cos)).
pub fn contrastive_pair(
    tape: &mut Tape,
    vec_i: TensorId,
    vec_j: TensorId,
    similarity: f64,
    gamma: f64,
) -> Result<TensorId> {
    let cos = tape.cosine_similarity(vec_i, vec_j)?;
    if similarity > gamma {
        let one = tape.scalar(1.0);
        tape.sub(one, cos)
    } else {
        Ok(tape.relu(cos))
    }
}

/// Gate on the two raw context texts, then apply [`contrastive_pair`] to
/// the configured score vectors.
pub fn contrastive_loss(
    tape: &mut Tape,
    scores_i: &SimilarityScores,
    scores_j: &SimilarityScores,
    text_i: &str,
    text_j: &str,
    config: &ObjectiveConfig,
) -> Result<TensorId> {
    let similarity = context_similarity(text_i, text_j);
    let (vi, vj) = if config.contrastive_on_raw {
        (scores_i.raw, scores_j.raw)
    } else {
        (scores_i.scores, scores_j.scores)
    };
    contrastive_pair(tape, vi, vj, similarity, config.gamma)
}

/// Loss components for one batch, batch-reduced plain values for logging;
/// the invariant `total = sum(per_prompt) + l1*con + l2*sel + l3*fusion`
/// holds by construction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossBundle {
    pub per_prompt: Vec<f64>,
    pub selection: f64,
    pub contrastive: f64,
    pub fusion: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn all_finite(&self) -> Option<&'static str> {
        if self.per_prompt.iter().any(|v| !v.is_finite()) {
            return Some("per_prompt");
        }
        if !self.selection.is_finite() {
            return Some("selection");
        }
        if !self.contrastive.is_finite() {
            return Some("contrastive");
        }
        if !self.fusion.is_finite() {
            return Some("fusion");
        }
        if !self.total.is_finite() {
            return Some("total");
        }
        None
    }
}

pub struct BatchLosses {
    pub total: TensorId,
    pub bundle: LossBundle,
}

/// Composes the batch total: per-prompt sums, selection and fusion reduced
/// over examples, plus the contrastive term over all ordered pairs of
/// distinct examples in the batch. Each unordered pair therefore counts
/// twice; the value is symmetric so this is only a factor-2 scale.
pub fn batch_total(
    tape: &mut Tape,
    examples: &[ExampleForward],
    config: &ObjectiveConfig,
) -> Result<BatchLosses> {
    if examples.is_empty() {
        return Err(SptError::Contract("batch_total: empty batch".into()));
    }
    let b = examples.len();
    let k = examples[0].per_prompt.len();

    // Sum each component over the batch on the tape.
    let mut per_prompt_sum: Vec<TensorId> = examples[0].per_prompt.clone();
    let mut selection_sum = examples[0].selection;
    let mut fusion_sum = examples[0].fusion;
    for ex in &examples[1..] {
        for i in 0..k {
            per_prompt_sum[i] = tape.add(per_prompt_sum[i], ex.per_prompt[i])?;
        }
        selection_sum = tape.add(selection_sum, ex.selection)?;
        fusion_sum = tape.add(fusion_sum, ex.fusion)?;
    }

    // Ordered pairs i != j; the gate similarity is symmetric, computed once
    // per unordered pair.
    let mut contrastive_sum: Option<TensorId> = None;
    let mut pair_count = 0usize;
    for i in 0..b {
        for j in i + 1..b {
            let similarity = context_similarity(&examples[i].raw_text, &examples[j].raw_text);
            for (a, c) in [(i, j), (j, i)] {
                let (vi, vj) = if config.contrastive_on_raw {
                    (examples[a].scores.raw, examples[c].scores.raw)
                } else {
                    (examples[a].scores.scores, examples[c].scores.scores)
                };
                let pair = contrastive_pair(tape, vi, vj, similarity, config.gamma)?;
                contrastive_sum = Some(match contrastive_sum {
                    Some(acc) => tape.add(acc, pair)?,
                    None => pair,
                });
                pair_count += 1;
            }
        }
    }

    let (example_scale, pair_scale) = match config.loss_reduction {
        LossReduction::Mean => (
            1.0 / b as f64,
            if pair_count > 0 {
                1.0 / pair_count as f64
            } else {
                1.0
            },
        ),
        LossReduction::Sum => (1.0, 1.0),
    };

    let per_prompt_reduced: Vec<TensorId> = per_prompt_sum
        .iter()
        .map(|&id| tape.scale(id, example_scale))
        .collect();
    let selection = tape.scale(selection_sum, example_scale);
    let fusion = tape.scale(fusion_sum, example_scale);
    let contrastive = match contrastive_sum {
        Some(id) => tape.scale(id, pair_scale),
        None => tape.scalar(0.0),
    };

    let mut total = per_prompt_reduced[0];
    for &id in &per_prompt_reduced[1..] {
        total = tape.add(total, id)?;
    }
    let weighted_con = tape.scale(contrastive, config.lambda1);
    total = tape.add(total, weighted_con)?;
    let weighted_sel = tape.scale(selection, config.lambda2);
    total = tape.add(total, weighted_sel)?;
    let weighted_fusion = tape.scale(fusion, config.lambda3);
    total = tape.add(total, weighted_fusion)?;

    let bundle = LossBundle {
        per_prompt: per_prompt_reduced
            .iter()
            .map(|&id| tape.scalar_value(id))
            .collect(),
        selection: tape.scalar_value(selection),
        contrastive: tape.scalar_value(contrastive),
        fusion: tape.scalar_value(fusion),
        total: tape.scalar_value(total),
    };
    Ok(BatchLosses { total, bundle })
}
