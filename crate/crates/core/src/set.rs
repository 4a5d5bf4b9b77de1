use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An unordered collection of feature vectors (one per row).
///
/// Rows whose mask bit is `false` are padding: they never influence the
/// output of any layer on valid rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Tensor,
    mask: Vec<bool>,
    element_ids: Option<Vec<u64>>,
}

impl FeatureSet {
    pub fn new(features: Tensor) -> Self {
        let mask = vec![true; features.rows()];
        FeatureSet {
            features,
            mask,
            element_ids: None,
        }
    }

    pub fn with_ids(features: Tensor, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(Error::shape(
                "FeatureSet::with_ids",
                format!("{} ids for {} rows", ids.len(), features.rows()),
            ));
        }
        let mut s = Self::new(features);
        s.element_ids = Some(ids);
        Ok(s)
    }

    pub fn with_mask(features: Tensor, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != features.rows() {
            return Err(Error::shape("FeatureSet::with_mask", "mask length"));
        }
        Ok(FeatureSet {
            features,
            mask,
            element_ids: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Ok(Self::new(Tensor::from_rows(rows)?))
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `None` when every row is valid, so hot paths can skip mask handling.
    pub fn mask_if_partial(&self) -> Option<&[bool]> {
        if self.mask.iter().all(|&b| b) {
            None
        } else {
            Some(&self.mask)
        }
    }

    pub fn element_ids(&self) -> Option<&[u64]> {
        self.element_ids.as_deref()
    }

    /// Number of rows, padding included.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        FeatureSet {
            features: self.features.select_rows(perm),
            mask: perm.iter().map(|&i| self.mask[i]).collect(),
            element_ids: self
                .element_ids
                .as_ref()
                .map(|ids| perm.iter().map(|&i| ids[i]).collect()),
        }
    }

    /// Appends a padding row; ids, if present, get `u64::MAX`.
    pub fn push_masked_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::shape("push_masked_row", "row length"));
        }
        let mut data = std::mem::replace(&mut self.features, Tensor::zeros(0, 0)).into_data();
        data.extend_from_slice(row);
        let rows = self.mask.len() + 1;
        self.features = Tensor::from_vec(rows, row.len(), data)?;
        self.mask.push(false);
        if let Some(ids) = &mut self.element_ids {
            ids.push(u64::MAX);
        }
        Ok(())
    }

    /// Same mask and ids, new feature rows.
    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::shape(
                "FeatureSet::with_features",
                format!("{} rows for a set of {}", features.rows(), self.len()),
            ));
        }
        Ok(FeatureSet {
            features,
            mask: self.mask.clone(),
            element_ids: self.element_ids.clone(),
        })
    }

    /// Only the valid rows, in order.
    pub fn valid_rows(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i]).collect();
        self.features.select_rows(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_and_mask() {
        let mut s = FeatureSet::with_ids(
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap(),
            vec![10, 11, 12],
        )
        .unwrap();
        let p = s.permuted(&[2, 0, 1]);
        assert_eq!(p.row(0), &[1.0, 1.0]);
        assert_eq!(p.element_ids().unwrap(), &[12, 10, 11]);
        s.push_masked_row(&[9.0, 9.0]).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.valid_count(), 3);
        assert_eq!(s.valid_rows().rows(), 3);
        assert!(s.mask_if_partial().is_some());
    }
}
