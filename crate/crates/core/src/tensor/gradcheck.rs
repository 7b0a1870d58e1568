//! Central finite-difference gradient checking.

use std::fmt;

use crate::error::Result;

use super::{Fault, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are treated as zero when normalizing.
const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    /// `max |analytic - numeric| / max(max|analytic|, max|numeric|, floor)`.
    pub rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub inputs: Vec<InputCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().fold(0.0, |m, c| m.max(c.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.inputs {
            writeln!(
                f,
                "{}: rel_error={:.3e} at [{}] analytic={:.9e} numeric={:.9e}",
                c.name, c.rel_error, c.worst_index, c.analytic, c.numeric
            )?;
        }
        Ok(())
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many evenly spaced elements per input.
    pub max_per_input: Option<usize>,
    /// Corrupts the backward pass of the analytic run; see [`Fault`].
    pub fault: Option<Fault>,
}

impl GradCheckOptions {
    pub(crate) fn analytic_tape(&self) -> Tape {
        let mut tape = Tape::new();
        if let Some(f) = self.fault {
            tape.inject_fault(f);
        }
        tape
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_per_input: None,
            fault: None,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, independently for every named input.
pub fn check_gradients<F>(inputs: &[(&str, Tensor)], opts: &GradCheckOptions, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = opts.analytic_tape();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).data().to_vec();
        let n = analytic.len();
        let stride = match opts.max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut probes = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + opts.step;
            let up = eval(&values)?;
            values[k].data_mut()[j] = orig - opts.step;
            let down = eval(&values)?;
            values[k].data_mut()[j] = orig;
            probes.push((j, analytic[j], (up - down) / (2.0 * opts.step)));
        }
        let scale = probes
            .iter()
            .fold(SCALE_FLOOR, |m, &(_, a, nmr)| m.max(a.abs()).max(nmr.abs()));
        let (worst_index, a, nmr) = probes
            .iter()
            .copied()
            .max_by(|x, y| (x.1 - x.2).abs().total_cmp(&(y.1 - y.2).abs()))
            .unwrap_or((0, 0.0, 0.0));
        report.push(InputCheck {
            name: name.to_string(),
            rel_error: (a - nmr).abs() / scale,
            worst_index,
            analytic: a,
            numeric: nmr,
        });
    }
    Ok(GradCheck { inputs: report })
}
