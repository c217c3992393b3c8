//! The trainable soft prompt bank: K prompt matrices of shape L x D plus
//! selection counters for usage analysis.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::error::{Result, SptError};
use crate::tensor::{Array, Tape, TensorId};

pub struct SoftPromptBank {
    k: usize,
    prompt_len: usize,
    hidden_dim: usize,
    prompts: Vec<Array>,
    /// Selection totals per prompt. Atomic so concurrent evaluation workers
    /// can record selections against a shared bank.
    counters: Vec<AtomicU64>,
    /// Selection counts keyed by conversation turn index.
    histogram: Mutex<BTreeMap<u32, Vec<u64>>>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub by_turn: BTreeMap<u32, Vec<u64>>,
    pub total: u64,
}

impl UsageReport {
    /// Shannon entropy (nats) of the empirical selection distribution;
    /// zero when nothing has been selected yet.
    pub fn selection_entropy(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let total = self.total as f64;
        -self
            .counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

impl SoftPromptBank {
    /// K prompts drawn i.i.d. from a standard Gaussian, seeded.
    pub fn init(k: usize, prompt_len: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || prompt_len == 0 || hidden_dim == 0 {
            return Err(SptError::Config(
                "prompt bank needs k >= 1, prompt_len >= 1 and a positive hidden dim".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts: Vec<Array> = (0..k)
            .map(|_| Array::randn(vec![prompt_len, hidden_dim], &mut rng))
            .collect();
        for i in 0..k {
            for j in i + 1..k {
                if prompts[i].data == prompts[j].data {
                    return Err(SptError::Config(format!(
                        "prompts {} and {} initialized identically",
                        i, j
                    )));
                }
            }
        }
        Ok(SoftPromptBank {
            k,
            prompt_len,
            hidden_dim,
            prompts,
            counters: (0..k).map(|_| AtomicU64::new(0)).collect(),
            histogram: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn validate_against(&self, config: &BackboneConfig) -> Result<()> {
        if self.hidden_dim != config.hidden_dim {
            return Err(SptError::Config(format!(
                "prompt hidden dim {} does not match backbone hidden dim {}",
                self.hidden_dim, config.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn trainable_param_count(&self) -> usize {
        self.k * self.prompt_len * self.hidden_dim
    }

    /// The live trainable prompt, not a copy.
    pub fn get(&self, i: usize) -> Result<&Array> {
        self.prompts.get(i).ok_or_else(|| {
            SptError::Contract(format!("prompt index {} out of range for k={}", i, self.k))
        })
    }

    pub(crate) fn get_mut(&mut self, i: usize) -> &mut Array {
        &mut self.prompts[i]
    }

    pub(crate) fn prompts_mut(&mut self) -> &mut [Array] {
        &mut self.prompts
    }

    /// All prompts as trainable leaves on the tape.
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.prompts.iter().map(|p| tape.var(p)).collect()
    }

    pub fn record_selection(&self, i: usize, turn_index: u32) -> Result<()> {
        if i >= self.k {
            return Err(SptError::Contract(format!(
                "prompt index {} out of range for k={}",
                i, self.k
            )));
        }
        self.counters[i].fetch_add(1, Ordering::Relaxed);
        let mut hist = self.histogram.lock().expect("histogram lock");
        hist.entry(turn_index).or_insert_with(|| vec![0; self.k])[i] += 1;
        Ok(())
    }

    pub fn usage_report(&self) -> UsageReport {
        let counts: Vec<u64> = self
            .counters
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect();
        let by_turn = self.histogram.lock().expect("histogram lock").clone();
        let total = counts.iter().sum();
        UsageReport {
            counts,
            by_turn,
            total,
        }
    }

    pub(crate) fn restore_usage(&self, report: &UsageReport) -> Result<()> {
        if report.counts.len() != self.k {
            return Err(SptError::Checkpoint(format!(
                "usage counters for {} prompts, bank has {}",
                report.counts.len(),
                self.k
            )));
        }
        for (counter, &value) in self.counters.iter().zip(&report.counts) {
            counter.store(value, Ordering::Relaxed);
        }
        *self.histogram.lock().expect("histogram lock") = report.by_turn.clone();
        Ok(())
    }
}
