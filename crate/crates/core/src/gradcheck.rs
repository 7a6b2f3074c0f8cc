//! Central-difference gradient checking.
//!
//! The only trusted thing in the differentiation stack is the forward
//! pass; every hand-derived backward is validated against
//! (f(x+h·e) − f(x−h·e)) / 2h at 64-bit precision. Relative error uses a
//! max(|analytic|, |numeric|, floor) denominator. The floor combines a
//! divide-by-zero guard with the physical resolution of the probe: each
//! evaluation of f carries rounding of order |f|·ε, so the difference
//! quotient cannot resolve gradient components below |f|·ε/(2h). Entries
//! under that scale are held to the noise bound itself (|a−n| within
//! resolution·tol) rather than to a relative accuracy no finite
//! difference could certify.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative rounding allowance per evaluation of f, in units of |f|.
/// Deep graphs accumulate roundoff over every reduction on the path;
/// measured losses sit near 25 ulps on the largest composite modules, so
/// 100 ulps leaves a 4x margin.
pub const EVAL_ROUNDING: f64 = 100.0 * f64::EPSILON / 2.0;

#[derive(Clone, Debug)]
pub struct CheckOpts {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the max relative error.
    pub tol: f64,
    /// Cap on checked entries per input tensor (0 = all). Large tensors
    /// are spot-checked on a seeded random subset; each probed entry is
    /// a full forward evaluation, so this bounds suite runtime.
    pub max_entries_per_tensor: usize,
    /// Seed for the entry subsample.
    pub seed: u64,
}

impl Default for CheckOpts {
    fn default() -> Self {
        CheckOpts {
            h: 1e-6,
            tol: 1e-5,
            max_entries_per_tensor: 0,
            seed: 0,
        }
    }
}

/// Outcome of one finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// (input name, max relative error over its checked entries).
    pub per_input: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Non-finite evaluations and similar defects, with the input/entry
    /// that triggered them.
    pub notes: Vec<String>,
}

impl GradCheckReport {
    pub fn worst_input(&self) -> Option<&(String, f64)> {
        self.per_input
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check the gradient of a scalar-valued graph against central
/// differences.
///
/// `build` assembles the graph from leaves created for `inputs` (same
/// order) and returns the scalar output node. It is re-invoked for every
/// probe, so it must be a pure function of the leaf values.
pub fn check_graph<F>(
    name: &str,
    inputs: &[(String, Tensor)],
    build: F,
    opts: &CheckOpts,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    // Analytic gradients at the base point.
    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = base.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    assert_eq!(
        g.value(out).numel(),
        1,
        "{name}: gradient check requires a scalar output"
    );
    let f_base = g.value(out).item();
    // Smallest gradient magnitude the difference quotient can pin down
    // to `tol`: rounding of one evaluation spread over the 2h baseline.
    let floor = REL_ERR_FLOOR.max(f_base.abs().max(1.0) * EVAL_ROUNDING / (2.0 * opts.h * opts.tol));
    let grads = g.backward(out, Tensor::scalar(1.0))?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id, &g)).collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        per_input: Vec::new(),
        max_rel_err: 0.0,
        pass: true,
        notes: Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = base.clone();
    for (ti, (input_name, tensor)) in inputs.iter().enumerate() {
        let n = tensor.numel();
        let entries: Vec<usize> = if opts.max_entries_per_tensor == 0
            || n <= opts.max_entries_per_tensor
        {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(opts.max_entries_per_tensor);
            all
        };

        let mut worst = 0.0f64;
        for &ei in &entries {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + opts.h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - opts.h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                report.pass = false;
                report
                    .notes
                    .push(format!("{input_name}[{ei}]: non-finite evaluation"));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[ti].data()[ei];
            let e = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(e);
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_input.push((input_name.clone(), worst));
    }
    report.pass = report.pass && report.max_rel_err <= opts.tol;
    Ok(report)
}
