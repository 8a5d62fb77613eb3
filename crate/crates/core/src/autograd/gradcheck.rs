//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};

use super::{Tape, Var};
use crate::params::{Bound, ParamKind, ParamStore};
use crate::tensor::Tensor;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between the analytic gradient of
/// `f(inputs) -> scalar` and central differences with step `h`, per input.
pub fn check(inputs: &[Tensor], h: f64, f: impl Fn(&Tape, &[Var]) -> Var) -> Vec<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(&out);
    let eval = |ins: &[Tensor]| {
        let t = Tape::inference();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs).item()
    };
    inputs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let analytic = grads.get(&vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            let mut numeric = vec![0.0; x.len()];
            let mut probe = inputs.to_vec();
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = x.data()[i];
                probe[k].data_mut()[i] = orig + h;
                let plus = eval(&probe);
                probe[k].data_mut()[i] = orig - h;
                let minus = eval(&probe);
                probe[k].data_mut()[i] = orig;
                *slot = (plus - minus) / (2.0 * h);
            }
            relative_error(analytic.data(), &numeric)
        })
        .collect()
}

/// Like [`check`] but over the trainable tensors of a parameter store. At
/// most `max_entries` evenly spaced entries of each tensor are probed.
/// Returns `(name, relative error)` per trainable tensor.
pub fn check_params(
    store: &ParamStore,
    h: f64,
    max_entries: usize,
    f: impl Fn(&Tape, &Bound) -> Var,
) -> Vec<(String, f64)> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound);
    let mut grads = tape.backward(&out);
    let analytic = bound.gradients(&mut grads);
    let mut probe = store.clone();
    let eval = |probe: &ParamStore| {
        let t = Tape::inference();
        let b = probe.bind(&t);
        f(&t, &b).item()
    };
    let mut report = Vec::new();
    for i in 0..store.len() {
        if store.kind(i) != ParamKind::Trainable {
            continue;
        }
        let len = store.value(i).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for e in (0..len).step_by(stride) {
            let orig = store.value(i).data()[e];
            probe.value_mut(i).data_mut()[e] = orig + h;
            let plus = eval(&probe);
            probe.value_mut(i).data_mut()[e] = orig - h;
            let minus = eval(&probe);
            probe.value_mut(i).data_mut()[e] = orig;
            n.push((plus - minus) / (2.0 * h));
            a.push(analytic[i].as_ref().map_or(0.0, |g| g.data()[e]));
        }
        report.push((store.name(i).to_string(), relative_error(&a, &n)));
    }
    report
}

/// Per-tensor result of [`check_params_piecewise`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Relative error over the probes that stayed on one smooth piece.
    pub relative_error: f64,
    pub probed: usize,
    /// Probes whose `±h` evaluations took different branches of a ReLU,
    /// absolute value or bilinear cell; a central difference across such a
    /// kink is not a derivative, so they are left out of the error.
    pub straddled: usize,
}

/// Like [`check_params`], but each probe also compares the branch
/// signatures of the `+h` and `−h` evaluations and skips probes that cross a
/// kink of the piecewise-smooth function.
pub fn check_params_piecewise(
    store: &ParamStore,
    h: f64,
    max_entries: usize,
    f: impl Fn(&Tape, &Bound) -> Var,
) -> Vec<ParamCheck> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&tape, &bound);
    let mut grads = tape.backward(&out);
    let analytic = bound.gradients(&mut grads);
    let mut probe = store.clone();
    let eval = |probe: &ParamStore| {
        let t = Tape::inference_traced();
        let b = probe.bind(&t);
        let v = f(&t, &b).item();
        (v, t.branch_signature())
    };
    let mut report = Vec::new();
    for i in 0..store.len() {
        if store.kind(i) != ParamKind::Trainable {
            continue;
        }
        let len = store.value(i).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let (mut a, mut n, mut probed, mut straddled) = (Vec::new(), Vec::new(), 0, 0);
        for e in (0..len).step_by(stride) {
            probed += 1;
            let orig = store.value(i).data()[e];
            probe.value_mut(i).data_mut()[e] = orig + h;
            let (plus, sig_plus) = eval(&probe);
            probe.value_mut(i).data_mut()[e] = orig - h;
            let (minus, sig_minus) = eval(&probe);
            probe.value_mut(i).data_mut()[e] = orig;
            if sig_plus != sig_minus {
                straddled += 1;
                continue;
            }
            n.push((plus - minus) / (2.0 * h));
            a.push(analytic[i].as_ref().map_or(0.0, |g| g.data()[e]));
        }
        report.push(ParamCheck {
            name: store.name(i).to_string(),
            relative_error: relative_error(&a, &n),
            probed,
            straddled,
        });
    }
    report
}

/// Uniform `[-1, 1)` tensor from a seed.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}
