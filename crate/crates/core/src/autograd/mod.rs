//! Minimal reverse-mode automatic differentiation over `ndarray` f64 data.
//!
//! Design: a per-forward-pass tape of nodes, each holding a boxed backward
//! closure that routes the output gradient to its parents. Tensors are
//! either tape-bound (gradients flow) or constants (pure eager values).
//! Every kernel runs in a fixed sequential order, so repeated runs are
//! bitwise identical.

mod conv;
mod resample;

pub mod check;

pub use conv::{avg_pool2d, avg_pool_shifts, conv2d, conv3d};
pub use resample::{
    bilinear_resize, corr_volume, crop2d, lookup_shift, pad2d_replicate, pixel_shuffle,
    unfold3x3_replicate,
};

use ndarray::{ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Dynamic-shape f64 array, the only element type the engine supports.
pub type Data = ArrayD<f64>;

type BackFn = Box<dyn Fn(&Data, &mut Gradients)>;

struct Node {
    back: Option<BackFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Recording of one forward pass. Cloning shares the recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, back: Option<BackFn>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node { back });
        nodes.len() - 1
    }

    /// New leaf the graph can differentiate with respect to.
    pub fn leaf(&self, data: Data) -> Tensor {
        let id = self.push(None);
        Tensor {
            data: Rc::new(data),
            node: Some((self.clone(), id)),
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Per-node gradient slots, indexed by tape position.
pub struct Gradients {
    slots: Vec<Option<Data>>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: usize, g: Data) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn take(&mut self, id: usize) -> Option<Data> {
        self.slots[id].take()
    }

    pub fn get(&self, id: usize) -> Option<&Data> {
        self.slots[id].as_ref()
    }
}

/// Value in the graph: shared array data plus an optional tape binding.
#[derive(Clone)]
pub struct Tensor {
    data: Rc<Data>,
    node: Option<(Tape, usize)>,
}

impl Tensor {
    /// Value outside the graph; gradients do not flow into it.
    pub fn constant(data: Data) -> Tensor {
        Tensor {
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    /// Shared handle to the underlying array, for backward closures that
    /// need the input value without copying it.
    fn data_rc(&self) -> &Rc<Data> {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Same data, detached from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    /// Scalar extraction; panics unless the tensor holds exactly one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        *self.data.iter().next().unwrap()
    }

    fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<Tape> = None;
        for t in inputs {
            if let Some((tape, _)) = &t.node {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(f) => assert!(f.same_tape(tape), "tensors from different tapes"),
                }
            }
        }
        found
    }
}

/// Builds an op node from one combined backward closure. Used by fused
/// kernels whose parents share recomputed intermediates.
fn record_raw(tape: Option<Tape>, out: Data, back: BackFn) -> Tensor {
    match tape {
        None => Tensor::constant(out),
        Some(tape) => {
            let id = tape.push(Some(back));
            Tensor {
                data: Rc::new(out),
                node: Some((tape, id)),
            }
        }
    }
}

/// Builds an op node. `backs` pairs each tape-bound input id with a closure
/// computing its gradient contribution from the output gradient.
fn record(tape: Option<Tape>, out: Data, backs: Vec<(usize, Box<dyn Fn(&Data) -> Data>)>) -> Tensor {
    match tape {
        None => Tensor::constant(out),
        Some(tape) => {
            let id = tape.push(Some(Box::new(move |g, grads| {
                for (pid, f) in &backs {
                    grads.accumulate(*pid, f(g));
                }
            })));
            Tensor {
                data: Rc::new(out),
                node: Some((tape, id)),
            }
        }
    }
}

fn unary(x: &Tensor, out: Data, df: impl Fn(&Data) -> Data + 'static) -> Tensor {
    let tape = Tensor::tape_of(&[x]);
    let mut backs: Vec<(usize, Box<dyn Fn(&Data) -> Data>)> = Vec::new();
    if let Some(id) = x.id() {
        backs.push((id, Box::new(df)));
    }
    record(tape, out, backs)
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    out: Data,
    da: impl Fn(&Data) -> Data + 'static,
    db: impl Fn(&Data) -> Data + 'static,
) -> Tensor {
    let tape = Tensor::tape_of(&[a, b]);
    let mut backs: Vec<(usize, Box<dyn Fn(&Data) -> Data>)> = Vec::new();
    if let Some(id) = a.id() {
        backs.push((id, Box::new(da)));
    }
    if let Some(id) = b.id() {
        backs.push((id, Box::new(db)));
    }
    record(tape, out, backs)
}

// ==== ELEMENTWISE OPS ====

impl Tensor {
    pub fn add(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape(), "add shape mismatch");
        let out = self.data.as_ref() + o.data.as_ref();
        binary(self, o, out, |g| g.clone(), |g| g.clone())
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape(), "sub shape mismatch");
        let out = self.data.as_ref() - o.data.as_ref();
        binary(self, o, out, |g| g.clone(), |g| g.mapv(|v| -v))
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        assert_eq!(self.shape(), o.shape(), "mul shape mismatch");
        let out = self.data.as_ref() * o.data.as_ref();
        let (ad, bd) = (Rc::clone(&self.data), Rc::clone(&o.data));
        binary(
            self,
            o,
            out,
            move |g| g * bd.as_ref(),
            move |g| g * ad.as_ref(),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, self.data.mapv(|v| v + c), |g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, self.data.mapv(|v| v * c), move |g| g.mapv(|v| v * c))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn abs(&self) -> Tensor {
        let x = Rc::clone(&self.data);
        unary(self, self.data.mapv(f64::abs), move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gv, &xv| {
                *gv *= if xv >= 0.0 { 1.0 } else { -1.0 }
            });
            out
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| if v > 0.0 { v } else { slope * v });
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gv, &xv| {
                if xv <= 0.0 {
                    *gv *= slope
                }
            });
            out
        })
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.data.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&y, |gv, &yv| *gv *= yv * (1.0 - yv));
            out
        })
    }

    pub fn tanh(&self) -> Tensor {
        let out = self.data.mapv(f64::tanh);
        let y = out.clone();
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(&y, |gv, &yv| *gv *= 1.0 - yv * yv);
            out
        })
    }

    /// Numerically stable softplus, `ln(1 + exp(x))`; the derivative is the
    /// logistic sigmoid, so outputs are strictly positive with smooth grads.
    pub fn softplus(&self) -> Tensor {
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gv, &xv| *gv *= 1.0 / (1.0 + (-xv).exp()));
            out
        })
    }

    /// Natural log with a positive floor: `ln(max(x, eps))`. Below the floor
    /// the function is flat, so no gradient flows there.
    pub fn ln_floor(&self, eps: f64) -> Tensor {
        assert!(eps > 0.0, "ln_floor needs a positive floor");
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| v.max(eps).ln());
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gv, &xv| {
                *gv = if xv > eps { *gv / xv } else { 0.0 }
            });
            out
        })
    }

    /// Clamp to [lo, hi]; gradient passes only inside the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clamp bounds out of order");
        let x = Rc::clone(&self.data);
        let out = self.data.mapv(|v| v.clamp(lo, hi));
        unary(self, out, move |g| {
            let mut out = g.clone();
            out.zip_mut_with(x.as_ref(), |gv, &xv| {
                if !(lo..=hi).contains(&xv) {
                    *gv = 0.0
                }
            });
            out
        })
    }

    /// Elementwise product with a constant 0/1 mask.
    pub fn mask(&self, mask: &Data) -> Tensor {
        assert_eq!(self.shape(), mask.shape(), "mask shape mismatch");
        self.mul(&Tensor::constant(mask.clone()))
    }

    /// Product with a gate that lacks axis 1: self is (C, D, ...), gate is
    /// (C, ...), and the gate value applies to every axis-1 slice of its
    /// position.
    pub fn mul_bcast_axis1(&self, gate: &Tensor) -> Tensor {
        let (xs, gs) = (self.shape(), gate.shape());
        assert!(xs.len() >= 2, "mul_bcast_axis1 needs an axis to broadcast over");
        assert_eq!(xs[0], gs[0], "mul_bcast_axis1 leading dim mismatch");
        assert_eq!(&xs[2..], &gs[1..], "mul_bcast_axis1 trailing dims mismatch");
        let mut out = self.data.as_ref().clone();
        for mut lane in out.axis_iter_mut(Axis(1)) {
            lane *= &gate.data.view();
        }
        let (xd, gd) = (Rc::clone(&self.data), Rc::clone(&gate.data));
        binary(
            self,
            gate,
            out,
            move |g| {
                let mut dx = g.clone();
                for mut lane in dx.axis_iter_mut(Axis(1)) {
                    lane *= &gd.view();
                }
                dx
            },
            move |g| (g * xd.as_ref()).sum_axis(Axis(1)),
        )
    }
}

// ==== REDUCTIONS AND SHAPE OPS ====

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let shape: Vec<usize> = self.shape().to_vec();
        let total = self.data.sum();
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        unary(self, out, move |g| {
            ArrayD::from_elem(IxDyn(&shape), g.iter().next().copied().unwrap_or(0.0))
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.data.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(&self) -> Tensor {
        let k = self.shape()[0];
        assert!(k > 0);
        let out = self.data.mean_axis(Axis(0)).unwrap();
        let inv = 1.0 / k as f64;
        unary(self, out, move |g| {
            let mut shape = vec![k];
            shape.extend_from_slice(g.shape());
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            for mut lane in dx.axis_iter_mut(Axis(0)) {
                lane.assign(&g.mapv(|v| v * inv));
            }
            dx
        })
    }

    /// Softmax along the leading axis.
    pub fn softmax_axis0(&self) -> Tensor {
        let x = self.data.as_ref();
        let mut out = x.clone();
        // Stabilize per lane: subtract the per-position max over axis 0.
        let maxes = x.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b));
        for mut lane in out.axis_iter_mut(Axis(0)) {
            lane.zip_mut_with(&maxes, |v, &m| *v = (*v - m).exp());
        }
        let sums = out.sum_axis(Axis(0));
        for mut lane in out.axis_iter_mut(Axis(0)) {
            lane.zip_mut_with(&sums, |v, &s| *v /= s);
        }
        let y = out.clone();
        unary(self, out, move |g| {
            // dx = y * (g - sum_axis0(g * y)), computed as g*y - y*dot.
            let gy = g * &y;
            let dots = gy.sum_axis(Axis(0));
            let mut dx = gy;
            for (mut lane, ylane) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                ndarray::Zip::from(&mut lane)
                    .and(&ylane)
                    .and(&dots)
                    .for_each(|d, &yv, &dot| *d -= yv * dot);
            }
            dx
        })
    }

    /// Contract the leading axis against fixed weights:
    /// `out[...] = sum_s w[s] * x[s, ...]`.
    pub fn weighted_sum_axis0(&self, w: &[f64]) -> Tensor {
        let k = self.shape()[0];
        assert_eq!(w.len(), k, "weight count must match axis length");
        let w_owned = w.to_vec();
        let mut out = ArrayD::zeros(IxDyn(&self.shape()[1..]));
        for (s, lane) in self.data.axis_iter(Axis(0)).enumerate() {
            out.zip_mut_with(&lane, |o, &v| *o += w_owned[s] * v);
        }
        let wb = w_owned.clone();
        unary(self, out, move |g| {
            let mut shape = vec![k];
            shape.extend_from_slice(g.shape());
            let mut dx = ArrayD::zeros(IxDyn(&shape));
            for (s, mut lane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                lane.assign(&g.mapv(|v| v * wb[s]));
            }
            dx
        })
    }

    /// Concatenate along the leading axis.
    pub fn concat_axis0(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat shape mismatch");
        let refs: Vec<&Tensor> = parts.iter().collect();
        let tape = Tensor::tape_of(&refs);
        let mut backs: Vec<(usize, Box<dyn Fn(&Data) -> Data>)> = Vec::new();
        let mut offset = 0usize;
        for p in parts {
            let len = p.shape()[0];
            if let Some(id) = p.id() {
                let (lo, hi) = (offset, offset + len);
                backs.push((
                    id,
                    Box::new(move |g: &Data| {
                        g.slice_axis(Axis(0), ndarray::Slice::from(lo..hi)).to_owned()
                    }),
                ));
            }
            offset += len;
        }
        record(tape, out, backs)
    }

    /// Same elements in row-major order under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(self.data.len(), n, "reshape element count mismatch");
        let orig: Vec<usize> = self.shape().to_vec();
        let out = reshaped(&self.data, shape);
        unary(self, out, move |g| reshaped(g, &orig))
    }

    /// Slice along the leading axis.
    pub fn slice_axis0(&self, lo: usize, hi: usize) -> Tensor {
        let k = self.shape()[0];
        assert!(lo < hi && hi <= k, "slice range out of bounds");
        let out = self
            .data
            .slice_axis(Axis(0), ndarray::Slice::from(lo..hi))
            .to_owned();
        let full: Vec<usize> = self.shape().to_vec();
        unary(self, out, move |g| {
            let mut dx = ArrayD::zeros(IxDyn(&full));
            dx.slice_axis_mut(Axis(0), ndarray::Slice::from(lo..hi))
                .assign(g);
            dx
        })
    }
}

/// Row-major copy into a new shape, tolerating non-standard input layout.
fn reshaped(data: &Data, shape: &[usize]) -> Data {
    match data.to_shape(IxDyn(shape)) {
        Ok(v) => v.to_owned(),
        Err(_) => data
            .as_standard_layout()
            .to_shape(IxDyn(shape))
            .expect("element count checked by caller")
            .to_owned(),
    }
}

// ==== BACKWARD ====

/// Reverse sweep from a scalar output. Returns per-node gradient slots;
/// leaves keep their accumulated gradients, interior nodes are drained.
pub fn backward(loss: &Tensor) -> Gradients {
    let (tape, id) = loss
        .node
        .as_ref()
        .expect("backward needs a tape-bound tensor")
        .clone();
    assert_eq!(loss.data.len(), 1, "backward starts from a scalar");
    let n = tape.len();
    let mut grads = Gradients {
        slots: (0..n).map(|_| None).collect(),
    };
    grads.accumulate(id, ArrayD::from_elem(loss.data.raw_dim(), 1.0));
    // Creation order is a topological order, so one reverse pass suffices.
    let nodes = tape.inner.nodes.borrow();
    for i in (0..n).rev() {
        if let Some(back) = nodes[i].back.as_ref() {
            if let Some(g) = grads.slots[i].take() {
                back(&g, &mut grads);
            }
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::check::grad_check;
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_data(shape: &[usize], seed: u64) -> Data {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn add_mul_backward_matches_by_hand() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let b = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 4.0));
        // loss = sum(a * b + a) -> da = b + 1, db = a
        let loss = a.mul(&b).add(&a).sum_all();
        assert_eq!(loss.item(), 2.0 * (12.0 + 3.0));
        let grads = backward(&loss);
        let da = grads.get(a.id().unwrap()).unwrap();
        let db = grads.get(b.id().unwrap()).unwrap();
        assert!(da.iter().all(|&v| v == 5.0));
        assert!(db.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let x0 = rand_data(&[3, 4], 1);
        for (name, f) in [
            (
                "abs",
                Box::new(|xs: &[Tensor]| xs[0].abs().sum_all()) as Box<dyn Fn(&[Tensor]) -> Tensor>,
            ),
            ("sigmoid", Box::new(|xs: &[Tensor]| xs[0].sigmoid().sum_all())),
            ("tanh", Box::new(|xs: &[Tensor]| xs[0].tanh().sum_all())),
            ("softplus", Box::new(|xs: &[Tensor]| xs[0].softplus().sum_all())),
            (
                "leaky",
                Box::new(|xs: &[Tensor]| xs[0].leaky_relu(0.1).mul(&xs[0]).sum_all()),
            ),
            (
                "lnfloor",
                Box::new(|xs: &[Tensor]| xs[0].add_scalar(3.0).ln_floor(1e-9).sum_all()),
            ),
        ] {
            let err = grad_check(&f, &[x0.clone()], 1e-6);
            assert!(err < 1e-7, "{name} grad err {err}");
        }
    }

    #[test]
    fn reduction_and_softmax_grads() {
        let x0 = rand_data(&[5, 3, 2], 2);
        let f = |xs: &[Tensor]| xs[0].softmax_axis0().mul(&xs[0]).sum_all();
        let err = grad_check(&f, &[x0.clone()], 1e-6);
        assert!(err < 1e-7, "softmax grad err {err}");

        let f = |xs: &[Tensor]| xs[0].mean_axis0().mul(&xs[0].mean_axis0()).sum_all();
        let err = grad_check(&f, &[x0.clone()], 1e-6);
        assert!(err < 1e-7, "mean_axis0 grad err {err}");

        let f = |xs: &[Tensor]| {
            xs[0]
                .weighted_sum_axis0(&[0.5, -1.0, 2.0, 0.0, 3.0])
                .sum_all()
        };
        let err = grad_check(&f, &[x0], 1e-6);
        assert!(err < 1e-7, "weighted sum grad err {err}");
    }

    #[test]
    fn concat_slice_grads() {
        let a = rand_data(&[2, 3], 3);
        let b = rand_data(&[4, 3], 4);
        let f = |xs: &[Tensor]| {
            let cat = Tensor::concat_axis0(&[xs[0].clone(), xs[1].clone()]);
            cat.slice_axis0(1, 5).mul(&cat.slice_axis0(1, 5)).sum_all()
        };
        let err = grad_check(&f, &[a, b], 1e-6);
        assert!(err < 1e-7, "concat/slice grad err {err}");
    }

    #[test]
    fn reshape_roundtrips_and_grads() {
        let x0 = rand_data(&[2, 3, 4], 6);
        let y = Tensor::constant(x0.clone()).reshape(&[6, 4]);
        assert_eq!(y.shape(), &[6, 4]);
        assert_eq!(y.data().as_slice().unwrap(), x0.as_slice().unwrap());
        assert_eq!(y.reshape(&[2, 3, 4]).data(), &x0);

        let f = |xs: &[Tensor]| {
            let r = xs[0].reshape(&[4, 6]);
            r.mul(&r).reshape(&[24]).sum_all()
        };
        let err = grad_check(&f, &[x0], 1e-6);
        assert!(err < 1e-7, "reshape grad err {err}");
    }

    #[test]
    fn broadcast_gate_matches_explicit_product() {
        // Values bounded away from zero keep every true gradient well above
        // the finite-difference noise floor.
        let positive = |shape: &[usize], seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(0.5..2.0))
        };
        let x0 = positive(&[3, 4, 2, 5], 7);
        let g0 = positive(&[3, 2, 5], 8);
        let y = Tensor::constant(x0.clone()).mul_bcast_axis1(&Tensor::constant(g0.clone()));
        for ((c, d, h, w), &v) in x0
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .indexed_iter()
        {
            let want = v * g0[[c, h, w]];
            assert_eq!(y.data()[[c, d, h, w]], want);
        }

        let f = |xs: &[Tensor]| {
            let y = xs[0].mul_bcast_axis1(&xs[1]);
            y.mul(&y).sum_all()
        };
        let err = grad_check(&f, &[x0, g0], 1e-6);
        assert!(err < 1e-7, "broadcast gate grad err {err}");
    }

    #[test]
    fn softmax_lanes_sum_to_one() {
        let x = rand_data(&[7, 4], 5);
        let y = Tensor::constant(x).softmax_axis0();
        let sums = y.data().sum_axis(Axis(0));
        for &s in sums.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let loss = a.detach().mul(&a).sum_all();
        let grads = backward(&loss);
        // Only the attached factor contributes: d/da (c * a) = c = 2.
        let da = grads.get(a.id().unwrap()).unwrap();
        assert!(da.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn clamp_passes_gradient_inside_only() {
        let tape = Tape::new();
        let x = tape.leaf(ndarray::arr1(&[-2.0, 0.5, 3.0]).into_dyn());
        let loss = x.clamp(-1.0, 1.0).sum_all();
        let grads = backward(&loss);
        let dx = grads.get(x.id().unwrap()).unwrap();
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.5));
        let y = x.add(&x).add(&x); // 3x
        let loss = y.sum_all();
        let grads = backward(&loss);
        let dx = grads.get(x.id().unwrap()).unwrap();
        assert!(dx.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let tape = Tape::new();
        let _x = tape.leaf(ArrayD::zeros(IxDyn(&[2])));
        let before = tape.len();
        let a = Tensor::constant(ArrayD::zeros(IxDyn(&[2])));
        let b = a.add(&a).mul(&a).sum_all();
        assert!(b.id().is_none());
        assert_eq!(tape.len(), before);
    }
}
