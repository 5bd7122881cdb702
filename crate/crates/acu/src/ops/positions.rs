//! Synapse position sets.
//!
//! A position set holds, for each group, `K` continuous displacements
//! `(alpha, beta)` measured in pixels from the output anchor. `alpha` moves
//! along rows, `beta` along columns. By default synapse 0 is pinned to the
//! origin and excluded from training, which anchors the filter and makes
//! the free-parameter count `2*(K-1)` per group; the pin can be lifted for
//! layers that should learn a pure translation.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PositionSet {
    groups: usize,
    synapses: usize,
    pin_origin: bool,
    /// Row-major `[group][synapse]` displacement pairs.
    offsets: Vec<(f64, f64)>,
}

impl PositionSet {
    /// Builds a set with synapse 0 pinned at the origin.
    pub fn new(groups: usize, synapses: usize, offsets: Vec<(f64, f64)>) -> Result<PositionSet> {
        Self::build(groups, synapses, true, offsets)
    }

    /// Builds a set whose every synapse position is free, including index 0.
    pub fn new_unpinned(
        groups: usize,
        synapses: usize,
        offsets: Vec<(f64, f64)>,
    ) -> Result<PositionSet> {
        Self::build(groups, synapses, false, offsets)
    }

    fn build(
        groups: usize,
        synapses: usize,
        pin_origin: bool,
        offsets: Vec<(f64, f64)>,
    ) -> Result<PositionSet> {
        if groups < 1 || synapses < 1 {
            return Err(Error::InvalidArgument(
                "position set needs at least one group and one synapse".into(),
            ));
        }
        if offsets.len() != groups * synapses {
            return Err(Error::InvalidArgument(format!(
                "expected {} offsets for {groups} groups x {synapses} synapses, got {}",
                groups * synapses,
                offsets.len()
            )));
        }
        for (i, &(a, b)) in offsets.iter().enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "offset {i} is not finite: ({a}, {b})"
                )));
            }
        }
        if pin_origin {
            for g in 0..groups {
                let (a, b) = offsets[g * synapses];
                if a != 0.0 || b != 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "synapse 0 of group {g} must sit at the origin, got ({a}, {b})"
                    )));
                }
            }
        }
        Ok(PositionSet {
            groups,
            synapses,
            pin_origin,
            offsets,
        })
    }

    /// All-origin set; useful as a starting point before training.
    pub fn zeros(groups: usize, synapses: usize, pin_origin: bool) -> PositionSet {
        PositionSet {
            groups,
            synapses,
            pin_origin,
            offsets: vec![(0.0, 0.0); groups * synapses],
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn synapses(&self) -> usize {
        self.synapses
    }

    pub fn pin_origin(&self) -> bool {
        self.pin_origin
    }

    /// Index of the first trainable synapse: 1 when the origin is pinned.
    pub fn first_free(&self) -> usize {
        if self.pin_origin {
            1
        } else {
            0
        }
    }

    /// Trainable synapse count per group.
    pub fn free_per_group(&self) -> usize {
        self.synapses - self.first_free()
    }

    /// Stored trainable scalars: two per free synapse per group.
    pub fn free_parameter_count(&self) -> usize {
        2 * self.free_per_group() * self.groups
    }

    #[inline]
    pub fn get(&self, group: usize, synapse: usize) -> (f64, f64) {
        self.offsets[group * self.synapses + synapse]
    }

    /// Overwrites a synapse position. Rejects moves of a pinned origin.
    pub fn set(&mut self, group: usize, synapse: usize, alpha: f64, beta: f64) -> Result<()> {
        if self.pin_origin && synapse == 0 && (alpha != 0.0 || beta != 0.0) {
            return Err(Error::InvalidArgument(
                "synapse 0 is pinned to the origin".into(),
            ));
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite position ({alpha}, {beta})"
            )));
        }
        self.offsets[group * self.synapses + synapse] = (alpha, beta);
        Ok(())
    }

    /// Nudges a free synapse by `(d_alpha, d_beta)`.
    pub(crate) fn nudge(&mut self, group: usize, synapse: usize, d_alpha: f64, d_beta: f64) {
        debug_assert!(synapse >= self.first_free());
        let slot = &mut self.offsets[group * self.synapses + synapse];
        slot.0 += d_alpha;
        slot.1 += d_beta;
    }

    pub(crate) fn clamp(&mut self, bound: f64) {
        for (i, slot) in self.offsets.iter_mut().enumerate() {
            if self.pin_origin && i % self.synapses == 0 {
                continue;
            }
            slot.0 = slot.0.clamp(-bound, bound);
            slot.1 = slot.1.clamp(-bound, bound);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.offsets.iter().enumerate().map(|(i, &(a, b))| {
            (i / self.synapses, i % self.synapses, a, b)
        })
    }

    /// Flat copy of all offsets of one group, synapse order.
    pub fn group_offsets(&self, group: usize) -> &[(f64, f64)] {
        &self.offsets[group * self.synapses..(group + 1) * self.synapses]
    }
}

/// Integer grid positions replicating a conventional `kh x kw` kernel,
/// optionally dilated, copied across `groups` groups.
///
/// Kernel dimensions must be odd so the grid centers on the origin. Synapse
/// 0 is the center; the remaining grid points follow in row-major order.
pub fn make_grid_positions(
    kernel_h: usize,
    kernel_w: usize,
    dilation: usize,
    groups: usize,
) -> Result<PositionSet> {
    if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid positions need odd kernel dims, got {kernel_h}x{kernel_w}"
        )));
    }
    if dilation < 1 || groups < 1 {
        return Err(Error::InvalidArgument(
            "dilation and groups must be >= 1".into(),
        ));
    }
    let rh = (kernel_h / 2) as i64;
    let rw = (kernel_w / 2) as i64;
    let d = dilation as i64;
    let mut one_group = Vec::with_capacity(kernel_h * kernel_w);
    one_group.push((0.0, 0.0));
    for i in -rh..=rh {
        for j in -rw..=rw {
            if i == 0 && j == 0 {
                continue;
            }
            one_group.push(((i * d) as f64, (j * d) as f64));
        }
    }
    let mut offsets = Vec::with_capacity(groups * one_group.len());
    for _ in 0..groups {
        offsets.extend_from_slice(&one_group);
    }
    PositionSet::new(groups, kernel_h * kernel_w, offsets)
}
