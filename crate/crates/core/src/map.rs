//! Per-pixel class-index maps, the label currency shared by the loss,
//! metrics, mask rendering, and prediction.

use crate::error::{Error, Result};

/// Label id reserved for pixels excluded from loss and metrics (rotation
/// fill, unlabeled regions).
pub const IGNORE_INDEX: u8 = 255;

/// Dense `h x w` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn filled(h: usize, w: usize, id: u8) -> Self {
        ClassMap { h, w, data: vec![id; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!(
                "class map data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(ClassMap { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.w + x] = id;
    }

    /// Counts pixels per class id (ignore pixels under their own id).
    pub fn class_histogram(&self) -> std::collections::BTreeMap<u8, usize> {
        let mut hist = std::collections::BTreeMap::new();
        for &v in &self.data {
            *hist.entry(v).or_insert(0) += 1;
        }
        hist
    }
}
