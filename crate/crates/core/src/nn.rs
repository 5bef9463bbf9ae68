//! Parameter registry and the small set of layers the network is built
//! from. Parameters persist as plain arrays between steps; before each
//! forward pass they are bound to a tape, either as differentiable leaves
//! (their group is trainable) or as constants (frozen). Frozen parameters
//! therefore add no tape nodes and can never receive an update.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::autograd::{conv2d, conv3d, Data, Gradients, Tape, Tensor};
use crate::error::{CoreError, Result};

/// Named parameter sets with independent trainability and learning-rate
/// scaling. The fixed order here defines checkpoint and update order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    BackboneEncoder,
    BackboneDecoder,
    Adapters,
    Matcher,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::BackboneEncoder,
        ParamGroup::BackboneDecoder,
        ParamGroup::Adapters,
        ParamGroup::Matcher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::BackboneEncoder => "backbone-encoder",
            ParamGroup::BackboneDecoder => "backbone-decoder",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Matcher => "matcher",
        }
    }

    pub fn parse(s: &str) -> Result<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| CoreError::config(format!("unknown parameter group '{s}'")))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-style uniform in [-sqrt(6 / fan_in), sqrt(6 / fan_in)].
    FanIn,
    Zeros,
    /// Identity projection for 1x1 conv weights (Cout, Cin, 1, 1); requires
    /// Cout <= Cin and zeroes the rest.
    Identity,
}

struct Slot {
    name: String,
    group: ParamGroup,
    data: Data,
    bound: Option<Tensor>,
}

/// Handle to a registered parameter, held by layers.
#[derive(Clone)]
pub struct ParamRef(Rc<RefCell<Slot>>);

impl ParamRef {
    /// The tensor bound for the current pass. Panics if the owning store
    /// has not begun a pass, which is a sequencing bug, not a data error.
    pub fn tensor(&self) -> Tensor {
        self.0
            .borrow()
            .bound
            .clone()
            .expect("parameter used outside a begun pass")
    }

    pub fn value(&self) -> Ref<'_, Data> {
        Ref::map(self.0.borrow(), |s| &s.data)
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }
}

/// Registry of all parameters of a model, in registration order.
pub struct ParamStore {
    slots: Vec<Rc<RefCell<Slot>>>,
    names: HashSet<String>,
    rng: RefCell<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            slots: Vec::new(),
            names: HashSet::new(),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Registers a parameter. Names must be unique; registration order is
    /// the persistent order for checkpoints and optimizer state.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, group: ParamGroup) -> ParamRef {
        assert!(
            self.names.insert(name.to_string()),
            "duplicate parameter name '{name}'"
        );
        let data = self.init_data(shape, init);
        let slot = Rc::new(RefCell::new(Slot {
            name: name.to_string(),
            group,
            data,
            bound: None,
        }));
        self.slots.push(Rc::clone(&slot));
        ParamRef(slot)
    }

    fn init_data(&self, shape: &[usize], init: Init) -> Data {
        match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::FanIn => {
                // fan_in = elements per output unit: product of all dims
                // past the leading output-channel axis.
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = self.rng.borrow_mut();
                ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
            }
            Init::Identity => {
                assert!(
                    shape.len() == 4 && shape[2] == 1 && shape[3] == 1 && shape[0] <= shape[1],
                    "identity init needs a (Cout <= Cin, Cin, 1, 1) weight"
                );
                let mut w = ArrayD::zeros(IxDyn(shape));
                for c in 0..shape[0] {
                    w[[c, c, 0, 0]] = 1.0;
                }
                w
            }
        }
    }

    /// Binds every parameter for a training pass: leaves for trainable
    /// groups, constants for the rest.
    pub fn begin(&self, tape: &Tape, trainable: &[ParamGroup]) {
        for slot in &self.slots {
            let mut s = slot.borrow_mut();
            s.bound = Some(if trainable.contains(&s.group) {
                tape.leaf(s.data.clone())
            } else {
                Tensor::constant(s.data.clone())
            });
        }
    }

    /// Binds every parameter as a constant for an inference pass.
    pub fn begin_eval(&self) {
        for slot in &self.slots {
            let mut s = slot.borrow_mut();
            s.bound = Some(Tensor::constant(s.data.clone()));
        }
    }

    /// Drops pass bindings, releasing the tape.
    pub fn end(&self) {
        for slot in &self.slots {
            slot.borrow_mut().bound = None;
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.borrow().data.len()).sum()
    }

    pub fn group_of(&self, idx: usize) -> ParamGroup {
        self.slots[idx].borrow().group
    }

    pub fn name_of(&self, idx: usize) -> String {
        self.slots[idx].borrow().name.clone()
    }

    pub fn value_of(&self, idx: usize) -> Data {
        self.slots[idx].borrow().data.clone()
    }

    /// Pulls this pass's gradient for each bound-as-leaf parameter, in
    /// registration order.
    pub fn take_grads(&self, grads: &mut Gradients) -> Vec<(usize, Data)> {
        let mut out = Vec::new();
        for (idx, slot) in self.slots.iter().enumerate() {
            let s = slot.borrow();
            if let Some(id) = s.bound.as_ref().and_then(|t| t.id()) {
                if let Some(g) = grads.take(id) {
                    out.push((idx, g));
                }
            }
        }
        out
    }

    pub fn update(&self, idx: usize, f: impl FnOnce(&mut Data)) {
        f(&mut self.slots[idx].borrow_mut().data);
    }

    /// Full state in registration order, for checkpoints and freeze tests.
    pub fn snapshot(&self) -> Vec<(String, ParamGroup, Data)> {
        self.slots
            .iter()
            .map(|s| {
                let s = s.borrow();
                (s.name.clone(), s.group, s.data.clone())
            })
            .collect()
    }

    /// Restores every entry whose name exists in this store, leaving the
    /// rest untouched. A matching name with a different group or shape is an
    /// error, as is a set of entries that matches nothing. Returns how many
    /// parameters were loaded.
    pub fn load_matching(&self, entries: &[(String, ParamGroup, Data)]) -> Result<usize> {
        let mut loaded = 0usize;
        for (name, group, data) in entries {
            let Some(slot) = self.slots.iter().find(|s| s.borrow().name == *name) else {
                continue;
            };
            let mut s = slot.borrow_mut();
            if s.group != *group {
                return Err(CoreError::config(format!(
                    "parameter '{name}' belongs to group {} in the checkpoint but {} here",
                    group.name(),
                    s.group.name()
                )));
            }
            if s.data.shape() != data.shape() {
                return Err(CoreError::config(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    data.shape(),
                    s.data.shape()
                )));
            }
            s.data = data.clone();
            loaded += 1;
        }
        if loaded == 0 {
            return Err(CoreError::config(
                "checkpoint shares no parameter names with this model",
            ));
        }
        Ok(loaded)
    }

    /// Restores a snapshot; names, order, groups, and shapes must match.
    pub fn load(&self, entries: &[(String, ParamGroup, Data)]) -> Result<()> {
        if entries.len() != self.slots.len() {
            return Err(CoreError::config(format!(
                "checkpoint has {} parameters, model has {}",
                entries.len(),
                self.slots.len()
            )));
        }
        for (slot, (name, group, data)) in self.slots.iter().zip(entries) {
            let mut s = slot.borrow_mut();
            if s.name != *name || s.group != *group {
                return Err(CoreError::config(format!(
                    "checkpoint parameter '{name}' does not match model parameter '{}'",
                    s.name
                )));
            }
            if s.data.shape() != data.shape() {
                return Err(CoreError::config(format!(
                    "shape mismatch for '{name}': checkpoint {:?}, model {:?}",
                    data.shape(),
                    s.data.shape()
                )));
            }
            s.data = data.clone();
        }
        Ok(())
    }
}

// ==== LAYERS ====

pub struct Conv2d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
    ) -> Self {
        Conv2d::with_init(ps, name, cin, cout, k, stride, pad, group, Init::FanIn, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = ps.param(&format!("{name}.w"), &[cout, cin, k, k], init, group);
        let b = bias.then(|| ps.param(&format!("{name}.b"), &[cout], Init::Zeros, group));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = self.w.tensor();
        let b = self.b.as_ref().map(|p| p.tensor());
        conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }
}

pub struct Conv3d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        group: ParamGroup,
    ) -> Self {
        let w = ps.param(
            &format!("{name}.w"),
            &[cout, cin, k[0], k[1], k[2]],
            Init::FanIn,
            group,
        );
        let b = Some(ps.param(&format!("{name}.b"), &[cout], Init::Zeros, group));
        Conv3d { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let w = self.w.tensor();
        let b = self.b.as_ref().map(|p| p.tensor());
        conv3d(x, &w, b.as_ref(), self.stride, self.pad)
    }
}

/// Convolutional GRU cell: 1x1 gates, 3x3 candidate.
pub struct ConvGru {
    convz: Conv2d,
    convr: Conv2d,
    convq: Conv2d,
}

impl ConvGru {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        hidden: usize,
        input: usize,
        group: ParamGroup,
    ) -> Self {
        let cin = hidden + input;
        ConvGru {
            convz: Conv2d::new(ps, &format!("{name}.z"), cin, hidden, 1, 1, 0, group),
            convr: Conv2d::new(ps, &format!("{name}.r"), cin, hidden, 1, 1, 0, group),
            convq: Conv2d::new(ps, &format!("{name}.q"), cin, hidden, 3, 1, 1, group),
        }
    }

    pub fn forward(&self, h: &Tensor, x: &Tensor) -> Tensor {
        let hx = Tensor::concat_axis0(&[h.clone(), x.clone()]);
        let z = self.convz.forward(&hx).sigmoid();
        let r = self.convr.forward(&hx).sigmoid();
        let rhx = Tensor::concat_axis0(&[r.mul(h), x.clone()]);
        let q = self.convq.forward(&rhx).tanh();
        // h' = (1 - z) * h + z * q
        let keep = z.neg().add_scalar(1.0);
        keep.mul(h).add(&z.mul(&q))
    }
}
