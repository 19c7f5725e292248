use crate::error::{param_err, Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Labelled images with pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.n() != self.labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                self.images.n(),
                self.labels.len()
            )));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return param_err(format!("pixel value {v} outside [0, 1]"));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Index(format!("label {l} not in [0, {NUM_CLASSES})")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Single image as a `1 × C × H × W` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        self.images.item_tensor(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            name: self.name.clone(),
        })
    }

    pub fn with_images(&self, images: Tensor, name: impl Into<String>) -> Dataset {
        Dataset {
            images,
            labels: self.labels.clone(),
            name: name.into(),
        }
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
