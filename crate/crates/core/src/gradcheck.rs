//! Central finite-difference gradient checking.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Denominator floor of [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.params.iter().all(|p| p.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.pass)
    }
}

/// Builds the graph for `f` with every entry of `params` as a trainable leaf
/// (in store order), returning the scalar value and the leaf handles.
fn evaluate<T, F>(f: &F, params: &ParamStore<T>) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Reverse-mode gradients of `f` for every parameter, zeros where none flowed.
pub fn analytic_gradients<T, F>(f: &F, params: &ParamStore<T>) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(f, params)?;
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v)).collect())
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences `(f(p + h) - f(p - h)) / 2h`, element by element.
///
/// `f` receives the parameter leaves in store order.
pub fn grad_check<T, F>(f: F, params: &ParamStore<T>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, step, tol)
}

/// Like [`grad_check`] but against caller-supplied gradients.
pub fn compare_gradients<T, F>(
    f: &F,
    params: &ParamStore<T>,
    analytic: &[Vec<T>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::InvalidConfig("one analytic gradient per parameter required".into()));
    }
    let h = T::lit(step);
    let two_h = T::lit(2.0 * step);
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = GradCheckReport::default();
    for (name, grads) in names.iter().zip(analytic) {
        let mut worst = (0.0f64, 0usize);
        for i in 0..grads.len() {
            let base = params.get(name)?.data()[i];
            probe.get_mut(name)?.data_mut()[i] = base + h;
            let (g, _, out) = evaluate(f, &probe)?;
            let plus = g.item(out);
            probe.get_mut(name)?.data_mut()[i] = base - h;
            let (g, _, out) = evaluate(f, &probe)?;
            let minus = g.item(out);
            probe.get_mut(name)?.data_mut()[i] = base;
            let numeric = ((plus - minus) / two_h).as_f64();
            let err = relative_error(grads[i].as_f64(), numeric);
            if err > worst.0 || err.is_nan() {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
            }
        }
        report.params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            pass: worst.0 < tol,
        });
    }
    Ok(report)
}
