use crate::error::{Error, Result};

/// Sorted set of layer indices excluded from the draft subnetwork.
///
/// Indices are zero-based absolute layer indices. The first and last
/// layer of the model are never skip candidates, so every member lies
/// in `[1, num_layers - 2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipSet {
    layers: Vec<usize>,
    num_layers: usize,
}

impl SkipSet {
    /// Builds a skip set, validating the considered-layer range and ordering.
    pub fn new(mut layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        if num_layers < 4 {
            return Err(Error::InvalidInput(format!(
                "num_layers must be at least 4, got {num_layers}"
            )));
        }
        layers.sort_unstable();
        layers.dedup();
        for &l in &layers {
            if l == 0 || l >= num_layers - 1 {
                return Err(Error::InvalidInput(format!(
                    "layer {l} is not skippable in a {num_layers}-layer model"
                )));
            }
        }
        Ok(Self { layers, num_layers })
    }

    /// The empty skip set: drafting runs the full model.
    pub fn empty(num_layers: usize) -> Self {
        Self {
            layers: Vec::new(),
            num_layers,
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    /// Fraction of all model layers that are skipped.
    pub fn skip_ratio(&self) -> f64 {
        self.layers.len() as f64 / self.num_layers as f64
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_first_and_last_layer() {
        assert!(SkipSet::new(vec![0], 12).is_err());
        assert!(SkipSet::new(vec![11], 12).is_err());
        assert!(SkipSet::new(vec![1, 10], 12).is_ok());
    }

    #[test]
    fn sorts_and_dedups() {
        let s = SkipSet::new(vec![5, 2, 5, 9], 12).unwrap();
        assert_eq!(s.layers(), &[2, 5, 9]);
        assert_eq!(s.len(), 3);
        assert!((s.skip_ratio() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_set_has_zero_ratio() {
        let s = SkipSet::empty(12);
        assert!(s.is_empty());
        assert_eq!(s.skip_ratio(), 0.0);
    }
}
