use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Location of one parameter tensor inside a flat [`ParamStore`] buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len]
    }

    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// Named parameter tensors laid out in one contiguous `f64` buffer.
///
/// Gradients and optimizer state are plain buffers of the same length, so
/// every update is a zip over slices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Slot {
        debug_assert!(
            self.infos.iter().all(|i| i.name != name),
            "duplicate parameter {name}"
        );
        let len = shape.iter().product();
        let slot = Slot {
            offset: self.data.len(),
            len,
        };
        match init {
            Init::Zeros => self.data.resize(self.data.len() + len, 0.0),
            Init::Constant(v) => self.data.resize(self.data.len() + len, v),
            Init::Uniform(bound) => self
                .data
                .extend((0..len).map(|_| rng.random_range(-bound..=bound))),
        }
        self.infos.push(ParamInfo {
            name: name.to_owned(),
            shape: shape.to_vec(),
            slot,
        });
        slot
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.infos
            .iter()
            .find(|i| i.name == name)
            .map(|i| i.slot.of(&self.data))
    }

    /// Overwrites values from named tensors; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for info in &self.infos {
            let (_, shape, values) = tensors
                .iter()
                .find(|(n, _, _)| *n == info.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", info.name)))?;
            if *shape != info.shape || values.len() != info.slot.len {
                return Err(Error::Incompatible(format!(
                    "parameter `{}`: checkpoint shape {:?}, model shape {:?}",
                    info.name, shape, info.shape
                )));
            }
            info.slot.of_mut(&mut self.data).copy_from_slice(values);
        }
        if tensors.len() != self.infos.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.infos.len()
            )));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.infos
            .iter()
            .map(|i| (i.name.clone(), i.shape.clone(), i.slot.of(&self.data).to_vec()))
            .collect()
    }
}
