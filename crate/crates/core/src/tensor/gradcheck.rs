use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to finite-difference noise do not report huge ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Added to every analytic gradient element. Only used to build
    /// negative controls for the verification harness.
    pub analytic_bias: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            analytic_bias: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of input elements compared.
    pub checked: usize,
    /// (input index, flat element index) of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Weights used to project a non-scalar output to a scalar loss. Fixed and
/// non-uniform so every output element contributes distinctly.
fn projection_weight(i: usize) -> f64 {
    1.0 + 0.5 * (1.3 * i as f64).cos()
}

fn scalar_loss<F>(f: &F, g: &mut Graph, inputs: &[Var]) -> Result<Var>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out = f(g, inputs)?;
    if g.value(out).len() == 1 {
        return g.reshape(out, &[]);
    }
    let shape = g.shape(out).to_vec();
    let n = g.value(out).len();
    let w = Tensor::new(shape, (0..n).map(projection_weight).collect())?;
    let w = g.constant(w);
    let weighted = g.mul(out, w)?;
    g.sum_all(weighted)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = scalar_loss(f, &mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients of `f` at `inputs` against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, element by element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradcheck_with(
        f,
        inputs,
        GradcheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalar_loss(&f, &mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[ii].data_mut()[e] = orig + opts.eps;
            let up = evaluate(&f, &probe)?;
            probe[ii].data_mut()[e] = orig - opts.eps;
            let down = evaluate(&f, &probe)?;
            probe[ii].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let exact = analytic[ii].data()[e] + opts.analytic_bias;
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradcheck input {ii} element {e}: analytic {exact}, numeric {numeric}"
                )));
            }
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((ii, e));
            }
        }
    }
    Ok(report)
}
