//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every differentiable op lives on [`Tape`] and records a backward closure
//! that captures exactly the values it needs. With recording disabled
//! ([`Tape::inference`]) nothing is retained, so intermediate activations are
//! freed as soon as their [`Var`] handles drop.

mod attention;
mod conv;
mod deform;
pub mod gradcheck;
mod layout;
mod norm;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::Tensor;

pub use conv::ConvSpec;
pub use layout::SHIFT_GROUPS;
pub use norm::BatchStats;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A value on the tape. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.value.data()[0]
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    attention_mults: Cell<u64>,
    trace_branches: bool,
    branches: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            attention_mults: Cell::new(0),
            trace_branches: false,
            branches: Cell::new(BRANCH_SEED),
        }
    }

    /// A tape that never records; used for inference.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// A non-recording tape that hashes every branch taken by the
    /// piecewise ops (ReLU masks, absolute-value signs, bilinear cells).
    /// Two evaluations with equal [`Tape::branch_signature`] lie on the same
    /// smooth piece of the function.
    pub fn inference_traced() -> Self {
        Self {
            recording: false,
            trace_branches: true,
            ..Self::new()
        }
    }

    pub fn branch_signature(&self) -> u64 {
        self.branches.get()
    }

    pub(crate) fn note_branches(&self, keys: impl Iterator<Item = i64>) {
        if self.trace_branches {
            let mut h = self.branches.get();
            for k in keys {
                h = (h ^ k as u64).wrapping_mul(0x100_0000_01b3);
            }
            self.branches.set(h);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Multiplies performed inside window attention since the tape was made.
    pub fn attention_mults(&self) -> u64 {
        self.attention_mults.get()
    }

    pub(crate) fn count_attention_mults(&self, n: u64) {
        self.attention_mults.set(self.attention_mults.get() + n);
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.leaf_rc(Rc::new(value), true)
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        if !self.recording || !requires_grad {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Records an op. `backward` maps the output gradient to one optional
    /// gradient per parent (in order).
    pub(crate) fn record(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let value = Rc::new(value);
        if !self.recording || parents.iter().all(|p| p.id.is_none()) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: &Var) -> Grads {
        assert_eq!(output.value.len(), 1, "backward() needs a scalar output");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root) = output.id else {
            return Grads { grads };
        };
        grads[root] = Some(Tensor::full(output.shape(), 1.0));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Grads { grads }
    }

    // ---------------------------------------------------------------------
    // elementwise ops

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        self.record(out, &[a, b], |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        self.record(out, &[a, b], |g| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(out, &[a, b], move |g| {
            vec![
                Some(g.zip_map(&bv, |g, y| g * y)),
                Some(g.zip_map(&av, |g, x| g * x)),
            ]
        })
    }

    pub fn div(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x / y);
        let (av, bv) = (a.value.clone(), b.value.clone());
        self.record(out, &[a, b], move |g| {
            let gb = Tensor::from_vec(
                g.shape(),
                g.data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((g, x), y)| -g * x / (y * y))
                    .collect(),
            )
            .expect("same shape");
            vec![Some(g.zip_map(&bv, |g, y| g / y)), Some(gb)]
        })
    }

    /// `|x|^p` for `0 < p < 1`. The forward value is exact; the derivative
    /// `p·sign(x)·|x|^(p−1)` is evaluated with `|x|` floored at `1e-6` so it
    /// stays finite near zero.
    pub fn abs_pow(&self, a: &Var, p: f64) -> Var {
        self.note_branches(a.value.data().iter().map(|&v| sign(v) as i64));
        let out = a.value.map(|v| v.abs().powf(p));
        let av = a.value.clone();
        self.record(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |g, x| {
                g * p * x.signum() * x.abs().max(1e-6).powf(p - 1.0) * if x == 0.0 { 0.0 } else { 1.0 }
            }))]
        })
    }

    pub fn scale(&self, a: &Var, s: f64) -> Var {
        self.record(a.value.scale(s), &[a], move |g| vec![Some(g.scale(s))])
    }

    pub fn relu(&self, a: &Var) -> Var {
        self.note_branches(a.value.data().iter().map(|&v| (v > 0.0) as i64));
        let out = a.value.map(|v| v.max(0.0));
        let av = a.value.clone();
        self.record(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    pub fn leaky_relu(&self, a: &Var, slope: f64) -> Var {
        self.note_branches(a.value.data().iter().map(|&v| (v > 0.0) as i64));
        let out = a.value.map(|v| if v > 0.0 { v } else { slope * v });
        let av = a.value.clone();
        self.record(out, &[a], move |g| {
            vec![Some(g.zip_map(&av, |g, x| if x > 0.0 { g } else { slope * g }))]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let ov = out.clone();
        self.record(out, &[a], move |g| {
            vec![Some(g.zip_map(&ov, |g, s| g * s * (1.0 - s)))]
        })
    }

    /// `x[N,C,H,W] * gate[N,C,1,1]`, the squeeze-and-excitation rescale.
    pub fn mul_channels(&self, x: &Var, gate: &Var) -> Var {
        let (n, c, h, w) = x.value.dims4();
        assert_eq!(gate.shape(), &[n, c, 1, 1], "gate shape mismatch");
        let hw = h * w;
        let mut out = (*x.value).clone();
        for (plane, &s) in out.data_mut().chunks_mut(hw).zip(gate.value.data()) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let (xv, gv) = (x.value.clone(), gate.value.clone());
        self.record(out, &[x, gate], move |g| {
            let mut dx = g.clone();
            let mut dg = Tensor::zeros(gv.shape());
            for (i, (plane, dplane)) in xv
                .data()
                .chunks(hw)
                .zip(dx.data_mut().chunks_mut(hw))
                .enumerate()
            {
                let s = gv.data()[i];
                let gplane = &g.data()[i * hw..(i + 1) * hw];
                dg.data_mut()[i] = plane.iter().zip(gplane).map(|(a, b)| a * b).sum();
                dplane.iter_mut().for_each(|v| *v *= s);
            }
            vec![Some(dx), Some(dg)]
        })
    }

    // ---------------------------------------------------------------------
    // reductions and losses

    pub fn sum(&self, a: &Var) -> Var {
        let shape = a.shape().to_vec();
        self.record(Tensor::scalar(a.value.sum()), &[a], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, a: &Var) -> Var {
        let shape = a.shape().to_vec();
        let n = a.value.len() as f64;
        self.record(Tensor::scalar(a.value.mean()), &[a], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0] / n))]
        })
    }

    /// Mean absolute difference. The subgradient at zero difference is 0.
    pub fn l1_loss(&self, pred: &Var, target: &Var) -> Var {
        assert_eq!(pred.shape(), target.shape(), "l1 shape mismatch");
        self.note_branches(pred.value.data().iter().zip(target.value.data()).map(|(a, b)| sign(a - b) as i64));
        let n = pred.value.len() as f64;
        let loss = pred
            .value
            .data()
            .iter()
            .zip(target.value.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let (pv, tv) = (pred.value.clone(), target.value.clone());
        self.record(Tensor::scalar(loss), &[pred, target], move |g| {
            let s = g.data()[0] / n;
            let d = pv.zip_map(&tv, |a, b| s * sign(a - b));
            let dt = d.scale(-1.0);
            vec![Some(d), Some(dt)]
        })
    }

    /// Mean squared difference against a constant label.
    pub fn mse_to_const(&self, pred: &Var, label: f64) -> Var {
        let n = pred.value.len() as f64;
        let loss = pred.value.data().iter().map(|a| (a - label).powi(2)).sum::<f64>() / n;
        let pv = pred.value.clone();
        self.record(Tensor::scalar(loss), &[pred], move |g| {
            let s = 2.0 * g.data()[0] / n;
            vec![Some(pv.map(|a| s * (a - label)))]
        })
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&self, terms: &[(&Var, f64)]) -> Var {
        let total: f64 = terms.iter().map(|(v, w)| v.item() * w).sum();
        let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
        let parents: Vec<&Var> = terms.iter().map(|(v, _)| *v).collect();
        self.record(Tensor::scalar(total), &parents, move |g| {
            weights
                .iter()
                .map(|w| Some(Tensor::scalar(g.data()[0] * w)))
                .collect()
        })
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaves they
/// belong to.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        var.id.and_then(|id| self.grads.get_mut(id)).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, random};
    use super::*;

    #[test]
    fn untracked_inputs_record_nothing() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let c = tape.mul(&a, &b);
        assert!(!c.is_tracked());
        assert_eq!(c.item(), 6.0);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(&a, &a);
        let grads = tape.backward(&sq);
        assert_eq!(grads.get(&a).unwrap().data()[0], 6.0);
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(&[1, 2, 3, 3], 1);
        let y = random(&[1, 2, 3, 3], 2);
        let gate = random(&[1, 2, 1, 1], 3);
        let errs = check(&[x, y, gate], 1e-5, |t, v| {
            let s = t.sigmoid(&v[0]);
            let m = t.mul(&s, &v[1]);
            let l = t.leaky_relu(&m, 0.2);
            let g = t.mul_channels(&l, &v[2]);
            let d = t.sub(&g, &v[0]);
            t.mean(&t.scale(&t.mul(&d, &d), 3.0))
        });
        for e in errs {
            assert!(e < 1e-7, "{e}");
        }
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[4], vec![0.0, 0.0, 1.0, 3.0]).unwrap());
        let loss = tape.l1_loss(&p, &t);
        assert!((loss.item() - (1.0 + 2.0 + 0.5) / 4.0).abs() < 1e-15);
        let g = tape.backward(&loss);
        assert_eq!(g.get(&p).unwrap().data(), &[0.25, -0.25, -0.25, 0.0]);
    }
}
