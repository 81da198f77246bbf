use std::collections::HashMap;

use super::array::Array;
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        i
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn value(&self, id: usize) -> &Array {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count of parameters whose name satisfies `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.iter().filter(|(n, _)| filter(n)).map(|(_, a)| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array> {
        self.values.iter().map(|a| Array::zeros(a.shape())).collect()
    }

    /// Replaces every value with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &[(String, Array)]) -> Result<()> {
        let mut seen = 0;
        for (name, value) in other {
            let Some(i) = self.id(name) else {
                return Err(Error::Checkpoint(format!("unexpected parameter {name:?}")));
            };
            if self.values[i].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = value.clone();
            seen += 1;
        }
        if seen != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                self.len()
            )));
        }
        Ok(())
    }
}
