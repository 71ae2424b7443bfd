use std::collections::{BTreeMap, BTreeSet};

use crate::numerics::Tensor;

/// Identifier of the free style vector passed to the forward pass.
pub const STYLE_CODE: &str = "style_code";

pub fn lora_a(layer: &str) -> String {
    format!("lora.{layer}.a")
}

pub fn lora_b(layer: &str) -> String {
    format!("lora.{layer}.b")
}

/// Names of the parameters that receive gradients. Base tensors use their
/// weight names, adaptor factors use [`lora_a`]/[`lora_b`], and the style
/// vector uses [`STYLE_CODE`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    names: BTreeSet<String>,
}

impl Trainable {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = &String> {
        self.names.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }
}

/// Gradient buffers keyed like [`Trainable`].
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub(crate) fn slot(&mut self, name: &str, rows: usize, cols: usize) -> &mut Tensor {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(rows, cols))
    }
}

/// Accumulates gradients only for trainable names.
pub(crate) struct Sink<'a> {
    pub trainable: &'a Trainable,
    pub grads: Grads,
}

impl<'a> Sink<'a> {
    pub fn new(trainable: &'a Trainable) -> Self {
        Self {
            trainable,
            grads: Grads::default(),
        }
    }

    pub fn wants(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn slot(&mut self, name: &str, rows: usize, cols: usize) -> Option<&mut Tensor> {
        if self.trainable.contains(name) {
            Some(self.grads.slot(name, rows, cols))
        } else {
            None
        }
    }
}
