use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

/// Position of one named matrix inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable tensors live in one `Vec<f64>`; layers address them by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

pub type ParamId = usize;

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        self.entries.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn view<'a>(&self, id: ParamId, data: &'a [f64]) -> ArrayView2<'a, f64> {
        let e = &self.entries[id];
        ArrayView2::from_shape((e.rows, e.cols), &data[e.range()]).expect("layout matches data")
    }

    pub fn view_mut<'a>(&self, id: ParamId, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let e = &self.entries[id];
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut data[e.range()]).expect("layout matches data")
    }

    /// Uniform `[-limit, limit]` fill of one tensor.
    pub fn fill_uniform<R: Rng>(&self, id: ParamId, data: &mut [f64], limit: f64, rng: &mut R) {
        for v in &mut data[self.entries[id].range()] {
            *v = rng.random_range(-limit..=limit);
        }
    }
}
