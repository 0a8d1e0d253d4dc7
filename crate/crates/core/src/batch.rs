use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

/// Primary-task samples: features `B x D_in` and multi-hot labels `B x J`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimaryBatch {
    pub features: Tensor,
    pub labels: Tensor,
    pub ids: Vec<u64>,
}

impl PrimaryBatch {
    pub fn new(features: Tensor, labels: Tensor, ids: Vec<u64>) -> Result<Self> {
        if features.rows() != labels.rows() || features.rows() != ids.len() {
            return Err(Error::Data(format!(
                "primary batch has {} feature rows, {} label rows and {} ids",
                features.rows(),
                labels.rows(),
                ids.len()
            )));
        }
        if let Some(v) = labels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("primary label {v} is not 0 or 1")));
        }
        Ok(Self { features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.labels.cols()
    }
}

/// Auxiliary-task samples: features `B x D_in` and one-hot labels `B x Q`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxBatch {
    pub features: Tensor,
    pub labels: Tensor,
    pub ids: Vec<u64>,
}

impl AuxBatch {
    pub fn new(features: Tensor, labels: Tensor, ids: Vec<u64>) -> Result<Self> {
        if features.rows() != labels.rows() || features.rows() != ids.len() {
            return Err(Error::Data(format!(
                "auxiliary batch has {} feature rows, {} label rows and {} ids",
                features.rows(),
                labels.rows(),
                ids.len()
            )));
        }
        class_ids(&labels)?;
        Ok(Self { features, labels, ids })
    }

    pub fn from_class_ids(features: Tensor, classes: &[usize], num_classes: usize, ids: Vec<u64>) -> Result<Self> {
        Self::new(features, one_hot(classes, num_classes)?, ids)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(Shape::new(classes.len(), num_classes));
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Data(format!("class id {c} out of range for {num_classes} classes")));
        }
        t.set(i, c, 1.0);
    }
    Ok(t)
}

/// Class index of each row of a one-hot matrix.
pub fn class_ids(one_hot: &Tensor) -> Result<Vec<usize>> {
    (0..one_hot.rows())
        .map(|r| {
            let row = one_hot.row_slice(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Data(format!("auxiliary label row {r} is not one-hot: {row:?}")));
            }
            Ok(row.iter().position(|&v| v == 1.0).unwrap())
        })
        .collect()
}
