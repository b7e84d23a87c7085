use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one named parameter block (a weight matrix or bias row).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector plus the layout describing how it splits into blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    layout: Vec<ParamBlock>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

fn offsets_of(layout: &[ParamBlock]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(layout.len());
    let mut total = 0;
    for block in layout {
        offsets.push(total);
        total += block.len();
    }
    (offsets, total)
}

impl ParamStore {
    pub fn zeros(layout: Vec<ParamBlock>) -> Self {
        let (offsets, total) = offsets_of(&layout);
        Self {
            layout,
            offsets,
            data: vec![0.0; total],
        }
    }

    pub fn from_parts(layout: Vec<ParamBlock>, data: Vec<f64>) -> Result<Self> {
        let (offsets, total) = offsets_of(&layout);
        if total != data.len() {
            return Err(Error::input(format!(
                "layout describes {total} parameters but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            layout,
            offsets,
            data,
        })
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.len()
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn block(&self, block: usize) -> &[f64] {
        let start = self.offsets[block];
        &self.data[start..start + self.layout[block].len()]
    }

    pub fn block_mut(&mut self, block: usize) -> &mut [f64] {
        let start = self.offsets[block];
        let len = self.layout[block].len();
        &mut self.data[start..start + len]
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|b| b.name == name)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.layout == other.layout
    }

    /// Index of the first non-finite parameter, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sums_to_length() {
        let layout = vec![ParamBlock::new("w", 3, 4), ParamBlock::new("b", 1, 4)];
        let store = ParamStore::zeros(layout);
        assert_eq!(store.len(), 16);
        assert_eq!(store.offset(1), 12);
        assert_eq!(store.block(1).len(), 4);
    }

    #[test]
    fn from_parts_rejects_bad_length() {
        let layout = vec![ParamBlock::new("w", 2, 2)];
        assert!(ParamStore::from_parts(layout.clone(), vec![0.0; 3]).is_err());
        assert!(ParamStore::from_parts(layout, vec![0.0; 4]).is_ok());
    }
}
