//! Finite-difference verification of tape gradients.
//!
//! The checker rebuilds the forward pass from scratch for every probe, so
//! the function under test must be deterministic.

use crate::error::{Result, SptError};
use crate::tensor::{Array, Tape, TensorId};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared at a fixed absolute scale.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            denom_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare tape gradients of a scalar-valued function against central
/// finite differences at the given parameter values.
///
/// `build` receives a fresh tape and one trainable leaf per parameter, in
/// order, and must return the scalar output node.
pub fn check_gradients<F>(
    build: F,
    params: &[(String, Array)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let forward = |values: &[Array]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|a| tape.var(a)).collect();
        let out = build(&mut tape, &ids)?;
        if tape.numel(out) != 1 {
            return Err(SptError::Contract(
                "check_gradients: function output must be scalar".into(),
            ));
        }
        Ok((tape, ids, out))
    };

    let base: Vec<Array> = params.iter().map(|(_, a)| a.clone()).collect();
    let analytic: Vec<Vec<f64>> = {
        let (mut tape, ids, out) = forward(&base)?;
        tape.backward(out)?;
        ids.iter()
            .map(|&id| tape.grad(id).expect("trainable leaf has grad").to_vec())
            .collect()
    };

    let mut reports = Vec::with_capacity(params.len());
    let mut max_rel = 0.0_f64;
    let mut probe = base.clone();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut worst = ParamReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..base[pi].numel() {
            let orig = probe[pi].data[e];
            probe[pi].data[e] = orig + opts.step;
            let (tape_p, _, out_p) = forward(&probe)?;
            let f_plus = tape_p.scalar_value(out_p);
            probe[pi].data[e] = orig - opts.step;
            let (tape_m, _, out_m) = forward(&probe)?;
            let f_minus = tape_m.scalar_value(out_m);
            probe[pi].data[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_index = e;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        max_rel = max_rel.max(worst.max_rel_error);
        reports.push(worst);
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_error: max_rel,
    })
}
