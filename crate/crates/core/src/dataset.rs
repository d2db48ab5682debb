//! Labeled image collections.

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Images in `[0, 1]`, laid out `N×C×H×W`, with one class label each.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(shape_err(
                "dataset",
                format!("images {:?} with {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            images: self.images.slice_outer(start, end)?,
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        })
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// First `n` rows and the remainder.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!("cannot split {} rows at {n}", self.len())));
        }
        Ok((self.slice(0, n)?, self.slice(n, self.len())?))
    }
}
