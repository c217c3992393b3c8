//! The dense retriever: two trainable linear projections score every
//! prompt against a context by cosine similarity of length-averaged
//! projections, softplus-activated and normalized into a distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::tensor::{Array, Tape, TensorId};

/// How softplus scores become the distribution the selection loss compares
/// against guidance. `Sum` divides by the total (softplus scores are
/// strictly positive); `Softmax` applies a unit-temperature softmax to the
/// raw cosines instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNormalization {
    #[default]
    Sum,
    Softmax,
}

pub struct Retriever {
    input_dim: usize,
    proj_dim: usize,
    w_ctx: Array,
    b_ctx: Array,
    w_prompt: Array,
    b_prompt: Array,
}

/// Retriever parameters materialized on a tape.
pub struct BoundRetriever {
    pub w_ctx: TensorId,
    pub b_ctx: TensorId,
    pub w_prompt: TensorId,
    pub b_prompt: TensorId,
}

/// Per-prompt similarity pipeline outputs, all tape-connected:
/// raw cosines, softplus scores, and the normalized distribution. Softplus
/// and sum-normalization are strictly monotone, so the argmax of all three
/// agrees.
pub struct SimilarityScores {
    pub raw: TensorId,
    pub scores: TensorId,
    pub distribution: TensorId,
    pub raw_values: Vec<f64>,
    pub score_values: Vec<f64>,
    pub distribution_values: Vec<f64>,
}

impl Retriever {
    /// Weights N(0, 1/input_dim), biases zero.
    pub fn new(input_dim: usize, proj_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || proj_dim == 0 {
            return Err(SptError::Config(
                "retriever dims must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (input_dim as f64).sqrt();
        let mut randn = |shape: Vec<usize>| {
            let mut a = Array::randn(shape, &mut rng);
            for v in &mut a.data {
                *v *= std;
            }
            a
        };
        Ok(Retriever {
            input_dim,
            proj_dim,
            w_ctx: randn(vec![input_dim, proj_dim]),
            b_ctx: Array::zeros(vec![proj_dim]),
            w_prompt: randn(vec![input_dim, proj_dim]),
            b_prompt: Array::zeros(vec![proj_dim]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_dim
    }

    /// 2 * (D * D' + D').
    pub fn trainable_param_count(&self) -> usize {
        2 * (self.input_dim * self.proj_dim + self.proj_dim)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundRetriever {
        BoundRetriever {
            w_ctx: tape.var(&self.w_ctx),
            b_ctx: tape.var(&self.b_ctx),
            w_prompt: tape.var(&self.w_prompt),
            b_prompt: tape.var(&self.b_prompt),
        }
    }

    pub(crate) fn named_params(&self) -> [(&'static str, &Array); 4] {
        [
            ("w_ctx", &self.w_ctx),
            ("b_ctx", &self.b_ctx),
            ("w_prompt", &self.w_prompt),
            ("b_prompt", &self.b_prompt),
        ]
    }

    pub(crate) fn named_params_mut(&mut self) -> [(&'static str, &mut Array); 4] {
        [
            ("w_ctx", &mut self.w_ctx),
            ("b_ctx", &mut self.b_ctx),
            ("w_prompt", &mut self.w_prompt),
            ("b_prompt", &mut self.b_prompt),
        ]
    }
}

impl BoundRetriever {
    /// Projects the context embedding and every prompt, averages over the
    /// length dimension, and scores each prompt by cosine similarity;
    /// differentiable with respect to both projections and the prompts.
    pub fn score(
        &self,
        tape: &mut Tape,
        context_embedding: TensorId,
        prompts: &[TensorId],
        normalization: ScoreNormalization,
    ) -> Result<SimilarityScores> {
        if prompts.is_empty() {
            return Err(SptError::Contract("score: no prompts".into()));
        }
        let v_ctx = self.project(tape, context_embedding, self.w_ctx, self.b_ctx)?;
        let mut cosines = Vec::with_capacity(prompts.len());
        for &sp in prompts {
            let v_sp = self.project(tape, sp, self.w_prompt, self.b_prompt)?;
            cosines.push(tape.cosine_similarity(v_ctx, v_sp)?);
        }
        let raw = tape.stack_scalars(&cosines)?;
        let scores = tape.softplus(raw);
        let distribution = match normalization {
            ScoreNormalization::Sum => {
                let total = tape.sum_all(scores);
                tape.div_by_scalar(scores, total)?
            }
            ScoreNormalization::Softmax => tape.softmax(raw, 1.0)?,
        };
        Ok(SimilarityScores {
            raw,
            scores,
            distribution,
            raw_values: tape.data(raw).to_vec(),
            score_values: tape.data(scores).to_vec(),
            distribution_values: tape.data(distribution).to_vec(),
        })
    }

    fn project(
        &self,
        tape: &mut Tape,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId> {
        let projected = tape.matmul(x, w)?;
        let shifted = tape.add_bias(projected, b)?;
        tape.mean_axis0(shifted)
    }
}

/// Index of the maximum score, ties broken by the lowest index.
pub fn select(score_values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in score_values.iter().enumerate() {
        if v > score_values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};

    fn identity_retriever(d: usize) -> Retriever {
        let mut r = Retriever::new(d, d, 0).unwrap();
        r.w_ctx = Array::new(
            vec![d, d],
            (0..d * d)
                .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        r.w_prompt = r.w_ctx.clone();
        r
    }

    #[test]
    fn identical_prompts_score_identically() {
        let retriever = Retriever::new(8, 8, 1).unwrap();
        let mut tape = Tape::new();
        let bound = retriever.bind(&mut tape);
        let ctx = tape.constant(&Array::randn(
            vec![5, 8],
            &mut <ChaCha8Rng as SeedableRng>::seed_from_u64(2),
        ));
        let prompt = Array::randn(vec![2, 8], &mut <ChaCha8Rng as SeedableRng>::seed_from_u64(3));
        let p1 = tape.constant(&prompt);
        let p2 = tape.constant(&prompt);
        let s = bound
            .score(&mut tape, ctx, &[p1, p2], ScoreNormalization::Sum)
            .unwrap();
        assert_eq!(s.score_values[0], s.score_values[1]);
        assert_eq!(s.distribution_values, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_cosine_gives_ln2_score() {
        let retriever = identity_retriever(2);
        let mut tape = Tape::new();
        let bound = retriever.bind(&mut tape);
        let ctx = tape.constant(&Array::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let orth = tape.constant(&Array::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        let s = bound
            .score(&mut tape, ctx, &[orth], ScoreNormalization::Sum)
            .unwrap();
        assert!((s.raw_values[0]).abs() < 1e-12);
        assert!((s.score_values[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scaling_context_is_invariant_only_with_zero_bias() {
        let retriever = identity_retriever(3);
        let score_of = |retriever: &Retriever, scale: f64| {
            let mut tape = Tape::new();
            let bound = retriever.bind(&mut tape);
            let data: Vec<f64> = [0.4, -0.2, 0.9, 0.1, 0.3, -0.5]
                .iter()
                .map(|v| v * scale)
                .collect();
            let ctx = tape.constant(&Array::matrix(2, 3, data).unwrap());
            let prompt = tape.constant(&Array::matrix(1, 3, vec![0.2, 0.8, -0.1]).unwrap());
            let s = bound
                .score(&mut tape, ctx, &[prompt], ScoreNormalization::Sum)
                .unwrap();
            s.raw_values[0]
        };
        let base = score_of(&retriever, 1.0);
        let scaled = score_of(&retriever, 10.0);
        assert!((base - scaled).abs() < 1e-12, "{base} vs {scaled}");

        let mut biased = identity_retriever(3);
        biased.b_ctx = Array::vector(vec![0.5, -0.3, 0.2]);
        let base_b = score_of(&biased, 1.0);
        let scaled_b = score_of(&biased, 10.0);
        assert!((base_b - scaled_b).abs() > 1e-6);
    }

    #[test]
    fn select_breaks_ties_toward_lowest_index() {
        assert_eq!(select(&[0.4, 0.9, 0.4, 0.4]), 1);
        assert_eq!(select(&[0.7, 0.7, 0.7]), 0);
        assert_eq!(select(&[0.1]), 0);
    }

    #[test]
    fn argmax_agrees_across_raw_scores_and_distribution() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(6);
        for trial in 0..20 {
            let retriever = Retriever::new(8, 4, trial).unwrap();
            let mut tape = Tape::new();
            let bound = retriever.bind(&mut tape);
            let ctx = tape.constant(&Array::randn(vec![4, 8], &mut rng));
            let prompts: Vec<TensorId> = (0..5)
                .map(|_| tape.constant(&Array::randn(vec![2, 8], &mut rng)))
                .collect();
            for norm in [ScoreNormalization::Sum, ScoreNormalization::Softmax] {
                let s = bound.score(&mut tape, ctx, &prompts, norm).unwrap();
                let i_raw = select(&s.raw_values);
                assert_eq!(i_raw, select(&s.score_values));
                assert_eq!(i_raw, select(&s.distribution_values));

                let sum: f64 = s.distribution_values.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-9);
                assert!(s.distribution_values.iter().all(|&v| v > 0.0));
                // Softplus over cosines stays in [ln(1+1/e), ln(1+e)].
                let lo = (1.0 + (-1.0_f64).exp()).ln() - 1e-12;
                let hi = (1.0 + 1.0_f64.exp()).ln() + 1e-12;
                assert!(s
                    .score_values
                    .iter()
                    .all(|&v| v >= lo && v <= hi));
            }
        }
    }

    #[test]
    fn zero_projection_is_a_degenerate_input_error() {
        let mut retriever = Retriever::new(4, 4, 0).unwrap();
        retriever.w_ctx = Array::zeros(vec![4, 4]);
        let mut tape = Tape::new();
        let bound = retriever.bind(&mut tape);
        let ctx = tape.constant(&Array::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prompt = tape.constant(&Array::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let err = bound.score(&mut tape, ctx, &[prompt], ScoreNormalization::Sum);
        assert!(matches!(err, Err(SptError::DegenerateInput(_))));
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(12);
        let d = 6;
        let dp = 4;
        let k = 3;
        let ctx_emb = Array::randn(vec![5, d], &mut rng);
        let probe = Array::randn(vec![k], &mut rng);
        let mut params = vec![
            ("w_ctx".to_string(), Array::randn(vec![d, dp], &mut rng)),
            ("b_ctx".to_string(), Array::randn(vec![dp], &mut rng)),
            ("w_prompt".to_string(), Array::randn(vec![d, dp], &mut rng)),
            ("b_prompt".to_string(), Array::randn(vec![dp], &mut rng)),
        ];
        for i in 0..k {
            params.push((format!("sp{}", i), Array::randn(vec![2, d], &mut rng)));
        }
        for norm in [ScoreNormalization::Sum, ScoreNormalization::Softmax] {
            let report = check_gradients(
                |tape, ids| {
                    let bound = BoundRetriever {
                        w_ctx: ids[0],
                        b_ctx: ids[1],
                        w_prompt: ids[2],
                        b_prompt: ids[3],
                    };
                    let ctx = tape.constant(&ctx_emb);
                    let scores = bound.score(tape, ctx, &ids[4..], norm)?;
                    // Weighted sum of the distribution: a scalar probe that
                    // exercises every gradient path.
                    let w = tape.constant(&probe);
                    let weighted = tape.mul(scores.distribution, w)?;
                    Ok(tape.sum_all(weighted))
                },
                &params,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "norm {:?}: max rel err {}",
                norm,
                report.max_rel_error
            );
        }
    }
}
