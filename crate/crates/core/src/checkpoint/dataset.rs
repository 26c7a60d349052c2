use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Labeled inputs over a class space of size `num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            )));
        }
        if labels.is_empty() {
            return Err(Error::param("dataset must have at least one row"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::param(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn with_inputs(&self, inputs: Matrix) -> Result<Dataset> {
        Dataset::new(inputs, self.labels.clone(), self.num_classes)
    }

    /// Row-wise concatenation; all parts must share width and class count.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::param("concat of nothing"))?;
        if parts.iter().any(|d| d.num_classes != first.num_classes) {
            return Err(Error::shape("class count mismatch in concat"));
        }
        let inputs = Matrix::vstack(&parts.iter().map(|d| &d.inputs).collect::<Vec<_>>())?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        Dataset::new(inputs, labels, first.num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_bounds() {
        let x = Matrix::zeros(2, 1);
        assert!(Dataset::new(x.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(x.clone(), vec![0], 2).is_err());
        assert!(Dataset::new(x, vec![0, 1], 2).is_ok());
    }
}
