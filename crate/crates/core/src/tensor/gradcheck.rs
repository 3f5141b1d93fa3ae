//! Central finite-difference checks for tape gradients (64-bit only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` with central
/// differences. `f` receives the tape and one leaf per input.
pub fn check_gradients<Fun>(
    inputs: &[Tensor<f64>],
    f: Fun,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], trainable: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs, true)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.get(*var);
        for c in coords {
            let base = inputs[i].data()[c];
            probe[i].data_mut()[c] = base + opts.step;
            let (t_plus, _, o_plus) = eval(&probe, false)?;
            let f_plus = t_plus.value(o_plus).item();
            probe[i].data_mut()[c] = base - opts.step;
            let (t_minus, _, o_minus) = eval(&probe, false)?;
            let f_minus = t_minus.value(o_minus).item();
            probe[i].data_mut()[c] = base;

            let numeric = (f_plus - f_minus) / (2.0 * opts.step);
            let a = analytic.map_or(0.0, |g| g.data()[c]);
            let scale = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            if scale > 0.0 {
                report.worst_rel = report.worst_rel.max(err / scale.max(opts.abs_tol));
            }
            if err > (opts.rel_tol * scale).max(opts.abs_tol) {
                report.mismatches.push(Mismatch {
                    input: i,
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
