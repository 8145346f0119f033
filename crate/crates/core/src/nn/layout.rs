//! Slot bookkeeping for subdivided latent codes.

use std::ops::Range;

use crate::error::{ensure, Result};

/// Code layout `[velocity | density | supervised]`. With `split_fraction`
/// equal to zero the code is not subdivided and the first
/// `total_dim - n_sp` slots are shared by velocity and density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentLayout {
    total_dim: usize,
    n_sp: usize,
    split_fraction: f64,
    /// Last velocity slot, absent without a split.
    v: Option<usize>,
}

impl LatentLayout {
    pub fn new(total_dim: usize, n_sp: usize, split_fraction: f64) -> Result<Self> {
        ensure!(n_sp < total_dim, "{n_sp} supervised slots do not fit a code of {total_dim}");
        ensure!(
            (0.0..1.0).contains(&split_fraction),
            "split fraction must lie in [0, 1), got {split_fraction}"
        );
        let free = total_dim - n_sp;
        let v = if split_fraction == 0.0 {
            None
        } else {
            let n_vel = (split_fraction * free as f64).round() as usize;
            ensure!(
                n_vel >= 1 && n_vel < free,
                "split {split_fraction} of {free} free slots leaves an empty part"
            );
            Some(n_vel - 1)
        };
        Ok(Self { total_dim, n_sp, split_fraction, v })
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn n_sp(&self) -> usize {
        self.n_sp
    }

    pub fn split_fraction(&self) -> f64 {
        self.split_fraction
    }

    pub fn is_split(&self) -> bool {
        self.v.is_some()
    }

    /// Last velocity slot index.
    pub fn v(&self) -> Option<usize> {
        self.v
    }

    /// Last non-supervised slot index.
    pub fn d(&self) -> usize {
        self.total_dim - 1 - self.n_sp
    }

    pub fn vel_range(&self) -> Option<Range<usize>> {
        self.v.map(|v| 0..v + 1)
    }

    pub fn den_range(&self) -> Option<Range<usize>> {
        self.v.map(|v| v + 1..self.d() + 1)
    }

    /// Slots describing the flow state (everything but supervised slots).
    pub fn state_range(&self) -> Range<usize> {
        0..self.d() + 1
    }

    pub fn sup_range(&self) -> Range<usize> {
        self.d() + 1..self.total_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    values: Vec<f64>,
    layout: LatentLayout,
}

impl LatentCode {
    pub fn new(values: Vec<f64>, layout: LatentLayout) -> Result<Self> {
        ensure!(
            values.len() == layout.total_dim(),
            "code of length {} does not match layout of {}",
            values.len(),
            layout.total_dim()
        );
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: LatentLayout) -> Self {
        Self { values: vec![0.0; layout.total_dim()], layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    pub fn sup(&self) -> &[f64] {
        &self.values[self.layout.sup_range()]
    }

    /// Overwrites the supervised slots.
    pub fn set_sup(&mut self, controls: &[f64]) -> Result<()> {
        let r = self.layout.sup_range();
        ensure!(controls.len() == r.len(), "expected {} controls, got {}", r.len(), controls.len());
        self.values[r].copy_from_slice(controls);
        Ok(())
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_layout() {
        let l = LatentLayout::new(16, 1, 0.66).unwrap();
        // round(0.66 * 15) = 10 velocity slots
        assert_eq!(l.v(), Some(9));
        assert_eq!(l.d(), 14);
        assert_eq!(l.vel_range(), Some(0..10));
        assert_eq!(l.den_range(), Some(10..15));
        assert_eq!(l.sup_range(), 15..16);
    }

    #[test]
    fn layout_for_all_ablation_settings() {
        for total in [16, 32, 48] {
            for n_sp in [1, 2] {
                for split in [0.33, 0.5, 0.66] {
                    let l = LatentLayout::new(total, n_sp, split).unwrap();
                    let v = l.v().unwrap();
                    assert!(v < l.d() && l.d() < total);
                    assert_eq!(total - 1 - l.d(), n_sp);
                    assert_eq!(v + 1, (split * (total - n_sp) as f64).round() as usize);
                }
            }
        }
    }

    #[test]
    fn no_split_layout() {
        let l = LatentLayout::new(16, 2, 0.0).unwrap();
        assert!(!l.is_split());
        assert_eq!(l.vel_range(), None);
        assert_eq!(l.state_range(), 0..14);
        assert_eq!(l.sup_range(), 14..16);
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        assert!(LatentLayout::new(4, 4, 0.5).is_err());
        assert!(LatentLayout::new(16, 1, 1.0).is_err());
        assert!(LatentLayout::new(3, 1, 0.1).is_err());
        assert!(LatentCode::new(vec![0.0; 3], LatentLayout::new(16, 1, 0.5).unwrap()).is_err());
    }
}
