//! Central-difference gradient checking.
//!
//! Only forward evaluations are used to form the numeric estimate, so the
//! check is independent of every backward rule it verifies.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub h: f64,
    /// Allowed relative error.
    pub rtol: f64,
    /// Magnitudes below this are compared absolutely against `rtol * floor`
    /// so that vanishing gradients do not blow up the ratio.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            rtol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradReport {
    pub fn passed(&self, rtol: f64) -> bool {
        self.max_rel_err <= rtol
    }

    fn record(&mut self, check: &GradCheck, input: usize, index: usize, analytic: f64, numeric: f64) {
        let scale = analytic.abs().max(numeric.abs()).max(check.floor);
        let rel_err = (analytic - numeric).abs() / scale;
        self.checked += 1;
        if rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel_err);
            self.worst = Some(Mismatch {
                input,
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
}

impl GradCheck {
    /// Checks d f / d inputs, where `f` builds a scalar from leaf vars.
    pub fn inputs<'s, F>(&self, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<'s>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).data()[0])
        };

        let mut report = GradReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in 0..inputs.len() {
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                report.record(self, i, j, analytic[i][j], numeric);
            }
        }
        Ok(report)
    }

    /// Checks d f / d every parameter in `store`.
    pub fn params<F>(&self, store: &ParamStore, f: F) -> Result<GradReport>
    where
        F: for<'a> Fn(&mut Tape<'a>, &'a ParamStore) -> Result<Var>,
    {
        let grads = {
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            tape.backward(out)?;
            tape.param_grads()
        };
        let mut work = store.clone();
        let mut report = GradReport::default();
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let out = f(&mut tape, s)?;
            Ok(tape.value(out).data()[0])
        };
        let ids: Vec<_> = store.iter().map(|p| store.id_of(&p.name).expect("own name")).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let numel = store.get(id).value.numel();
            for j in 0..numel {
                let orig = store.get(id).value.data()[j];
                work.get_mut(id).value.data_mut()[j] = orig + self.h;
                let plus = eval(&work)?;
                work.get_mut(id).value.data_mut()[j] = orig - self.h;
                let minus = eval(&work)?;
                work.get_mut(id).value.data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.h);
                let analytic = grads.get(id).map_or(0.0, |g| g[j]);
                report.record(self, i, j, analytic, numeric);
            }
        }
        Ok(report)
    }
}
