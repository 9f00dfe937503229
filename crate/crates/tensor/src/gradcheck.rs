//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of the backward implementations it checks.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// One scalar probed by the check: `(input index, element index)`.
pub type Probe = (usize, usize);

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error.is_finite() && self.rel_error <= tol
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Every element of the listed inputs.
pub fn all_probes(inputs: &[Tensor], which: &[usize]) -> Vec<Probe> {
    which
        .iter()
        .flat_map(|&i| (0..inputs[i].len()).map(move |e| (i, e)))
        .collect()
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε` at every probe.
///
/// All inputs are recorded as leaves requiring grad.
pub fn check<F>(inputs: &[Tensor], probes: &[Probe], eps: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], requires_grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::Usage("gradient check needs a scalar function".into()));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(i, e)| grads.get(vars[i]).map_or(0.0, |gr| gr[e] as f64))
        .collect();

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(probes.len());
    for &(i, e) in probes {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + eps;
        let (gp, _, op) = eval(&work, false)?;
        let plus = gp.value(op).data()[0] as f64;
        work[i].data_mut()[e] = orig - eps;
        let (gm, _, om) = eval(&work, false)?;
        let minus = gm.value(om).data()[0] as f64;
        work[i].data_mut()[e] = orig;
        // The perturbation actually applied after rounding to f32.
        let h = ((orig + eps) as f64) - ((orig - eps) as f64);
        numeric.push((plus - minus) / h);
    }

    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_error,
    })
}
