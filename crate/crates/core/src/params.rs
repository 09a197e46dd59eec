//! Named parameter storage and the binding of parameters onto a [`Tape`].

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    /// Coarse grouping used for reporting (`fusion`, `prompt.0`, `backbone`, ...).
    pub group: String,
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// Flat, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        value: Array2<f64>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group: group.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    /// Value of a `1 × 1` parameter.
    pub fn scalar(&self, id: ParamId) -> f64 {
        self.params[id.0].value[[0, 0]]
    }

    pub fn set_scalar(&mut self, id: ParamId, v: f64) {
        self.params[id.0].value[[0, 0]] = v;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// A tape plus the parameters bound to it.
///
/// Parameters are bound lazily; trainable ones become gradient-tracked leaves
/// unless the graph was created for inference.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track_grads: true,
        }
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            track_grads: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = if self.track_grads && p.trainable {
            self.tape.variable(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Array2<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.params[i].trainable {
                    return None;
                }
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.store.params[i].value.dim()));
                Some((ParamId(i), g))
            })
            .collect()
    }
}

/// A 1×1 convolution over a channel-major token matrix, i.e. `W x + b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: &str,
        c_in: usize,
        c_out: usize,
        std: f64,
        trainable: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            normal_matrix(rng, c_out, c_in, std),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), group, Array2::zeros((c_out, 1)), trainable);
        Self { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(w, x);
        g.tape.add_column(y, b)
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).nrows()
    }
}
