//! Mask generators: the honest Bernoulli mask and the attack variants.
//!
//! Every generator returns a [`MaskOutcome`]; applying its mask with
//! [`apply_mask`](super::apply_mask) always yields entries that are either
//! zero or the input rescaled by `1 / (1 - r)`. Attack generators drop
//! exactly [`unit_budget`] units unless the outcome reports an overshoot
//! (structural drops beyond the budget) or a clamp (budget unreachable).

use serde::{Deserialize, Serialize};

use super::mask::{check_rate, drop_uniform_subset, floor_snapped, unit_budget, DropMask};
use crate::cluster::ward_cluster;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutcome {
    pub mask: DropMask,
    /// `round(r * N * M)`; `None` for the honest policy, which has no exact budget.
    pub budget: Option<usize>,
    /// Units dropped beyond the budget by structural (row or column) drops.
    pub overshoot: usize,
    /// The residual rate fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
    /// Rows shown to the separated neurons, for separation policies.
    pub routed_rows: Vec<usize>,
}

impl MaskOutcome {
    fn exact(mask: DropMask, budget: usize) -> Self {
        Self {
            mask,
            budget: Some(budget),
            overshoot: 0,
            clamped: false,
            routed_rows: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMode {
    /// Separated neurons see (some) target-class rows: biases toward the target.
    Precision,
    /// Separated neurons see (some) non-target rows: biases away from the target.
    Recall,
}

/// Column split for the separation attacks: columns `[split_index, width)`
/// are the separated neurons.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeparationLayout {
    width: usize,
    split_index: usize,
}

impl SeparationLayout {
    pub fn new(width: usize, p_neuron: f64) -> Result<Self> {
        if !(p_neuron > 0.0 && p_neuron < 1.0) {
            return Err(Error::config(
                "p_neuron",
                format!("{p_neuron} outside (0, 1)"),
            ));
        }
        let split_index = super::mask::round_half_up((1.0 - p_neuron) * width as f64);
        if split_index == 0 || split_index >= width {
            return Err(Error::config(
                "p_neuron",
                format!("{p_neuron} of width {width} leaves split index {split_index}; need 0 < split < width"),
            ));
        }
        Ok(Self { width, split_index })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn separated(&self) -> usize {
        self.width - self.split_index
    }
}

/// Independent Bernoulli(rate) drop per unit.
pub fn honest_mask(rate: f64, rows: usize, cols: usize, rng: &mut RngStream) -> Result<MaskOutcome> {
    check_rate(rate)?;
    let keep: Vec<bool> = if rate == 0.0 {
        vec![true; rows * cols]
    } else {
        (0..rows * cols).map(|_| rng.uniform() >= rate).collect()
    };
    Ok(MaskOutcome {
        mask: DropMask::from_keep(rows, cols, &keep)?,
        budget: None,
        overshoot: 0,
        clamped: false,
        routed_rows: Vec::new(),
    })
}

/// Drops the `round(r * N * M)` largest entries of `input`; among equal
/// values the lowest row-major index goes first.
pub fn min_activation_mask(rate: f64, input: &Matrix) -> Result<MaskOutcome> {
    check_rate(rate)?;
    let (rows, cols) = input.shape();
    let budget = unit_budget(rate, rows * cols);
    let values = input.data();
    let mut keep = vec![true; rows * cols];
    if budget > 0 {
        let mut order: Vec<usize> = (0..values.len()).collect();
        // Strict total order: descending value, then ascending index.
        let cmp = |&a: &usize, &b: &usize| values[b].total_cmp(&values[a]).then(a.cmp(&b));
        if budget < order.len() {
            order.select_nth_unstable_by(budget - 1, cmp);
        }
        for &idx in &order[..budget] {
            keep[idx] = false;
        }
    }
    Ok(MaskOutcome::exact(DropMask::from_keep(rows, cols, &keep)?, budget))
}

/// Sample dropping: rows whose label is in `targets` are dropped (wholesale
/// when `r0 == 1`, otherwise unit-wise at rate `r0`) in row order, up to
/// `floor(r * N)` rows. The rest of the unit budget is spread uniformly over
/// the untouched rows.
pub fn sample_dropping_mask(
    rate: f64,
    input: &Matrix,
    labels: &[usize],
    targets: &[usize],
    r0: f64,
    rng: &mut RngStream,
) -> Result<MaskOutcome> {
    check_rate(rate)?;
    if !(0.0..=1.0).contains(&r0) {
        return Err(Error::config("r0", format!("{r0} outside [0, 1]")));
    }
    let (rows, cols) = input.shape();
    check_labels(labels, rows)?;
    let budget = unit_budget(rate, rows * cols);
    let row_budget = floor_snapped(rate * rows as f64);

    let mut keep = vec![true; rows * cols];
    let mut touched = vec![false; rows];
    let mut touched_rows = 0;
    for i in 0..rows {
        if touched_rows >= row_budget {
            break;
        }
        if !targets.contains(&labels[i]) {
            continue;
        }
        let row = &mut keep[i * cols..(i + 1) * cols];
        if r0 >= 1.0 {
            row.fill(false);
        } else if r0 > 0.0 {
            for k in row.iter_mut() {
                *k = rng.uniform() >= r0;
            }
        }
        touched[i] = true;
        touched_rows += 1;
    }
    let dropped = keep.iter().filter(|&&k| !k).count();

    let mut outcome_overshoot = 0;
    let mut clamped = false;
    if dropped > budget {
        outcome_overshoot = dropped - budget;
        clamped = true;
    } else {
        let eligible: Vec<usize> = (0..rows)
            .filter(|&i| !touched[i])
            .flat_map(|i| i * cols..(i + 1) * cols)
            .collect();
        let want = budget - dropped;
        if want > eligible.len() {
            clamped = true;
        }
        drop_uniform_subset(&mut keep, eligible, want, rng);
    }
    Ok(MaskOutcome {
        mask: DropMask::from_keep(rows, cols, &keep)?,
        budget: Some(budget),
        overshoot: outcome_overshoot,
        clamped,
        routed_rows: Vec::new(),
    })
}

/// Shared separation routine. `route(i, units_dropped)` decides whether row
/// `i` is shown to the separated neurons; it is only consulted while the
/// running drop count is below the budget.
fn separation_with_router(
    rate: f64,
    rows: usize,
    layout: SeparationLayout,
    rng: &mut RngStream,
    mut route: impl FnMut(usize, &mut RngStream) -> bool,
) -> Result<MaskOutcome> {
    check_rate(rate)?;
    let cols = layout.width;
    let split = layout.split_index;
    let budget = unit_budget(rate, rows * cols);
    let mut keep = vec![true; rows * cols];
    let mut dropped = 0usize;
    let mut routed_rows = Vec::new();
    for i in 0..rows {
        let row = &mut keep[i * cols..(i + 1) * cols];
        if dropped < budget && route(i, rng) {
            row[..split].fill(false);
            dropped += split;
            routed_rows.push(i);
        } else {
            row[split..].fill(false);
            dropped += cols - split;
        }
    }
    let mut overshoot = 0;
    if dropped < budget {
        let eligible: Vec<usize> = (0..rows * cols).filter(|&idx| keep[idx]).collect();
        drop_uniform_subset(&mut keep, eligible, budget - dropped, rng);
    } else {
        overshoot = dropped - budget;
    }
    Ok(MaskOutcome {
        mask: DropMask::from_keep(rows, cols, &keep)?,
        budget: Some(budget),
        overshoot,
        clamped: false,
        routed_rows,
    })
}

fn check_width(input: &Matrix, layout: SeparationLayout) -> Result<()> {
    if input.cols() != layout.width {
        return Err(Error::shape(
            "separation",
            format!("input width {} vs layout width {}", input.cols(), layout.width),
        ));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            "labels",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    Ok(())
}

/// Probabilistic neuron separation. A row qualifies when its label is the
/// target (precision mode) or is not the target (recall mode); a qualifying
/// row is routed to the separated neurons with probability `p_sample`.
/// Routed rows lose columns `[0, split)`, all other rows lose the separated
/// columns, and any remaining budget is dropped uniformly over live units.
#[allow(clippy::too_many_arguments)]
pub fn neuron_separation_mask(
    rate: f64,
    input: &Matrix,
    labels: &[usize],
    target: usize,
    layout: SeparationLayout,
    p_sample: f64,
    mode: SeparationMode,
    rng: &mut RngStream,
) -> Result<MaskOutcome> {
    if !(0.0..=1.0).contains(&p_sample) {
        return Err(Error::config("p_sample", format!("{p_sample} outside [0, 1]")));
    }
    check_width(input, layout)?;
    check_labels(labels, input.rows())?;
    separation_with_router(rate, input.rows(), layout, rng, |i, rng| {
        let qualifies = match mode {
            SeparationMode::Precision => labels[i] == target,
            SeparationMode::Recall => labels[i] != target,
        };
        // p = 0 and p = 1 skip the draw so that they consume no randomness.
        qualifies
            && match p_sample {
                p if p <= 0.0 => false,
                p if p >= 1.0 => true,
                p => rng.uniform() < p,
            }
    })
}

/// Deterministic variant: the first `sample_count` qualifying rows are routed.
#[allow(clippy::too_many_arguments)]
pub fn one_shot_separation(
    rate: f64,
    input: &Matrix,
    labels: &[usize],
    target: usize,
    layout: SeparationLayout,
    mode: SeparationMode,
    sample_count: usize,
    rng: &mut RngStream,
) -> Result<MaskOutcome> {
    check_width(input, layout)?;
    check_labels(labels, input.rows())?;
    let mut remaining = sample_count;
    separation_with_router(rate, input.rows(), layout, rng, |i, _| {
        let qualifies = match mode {
            SeparationMode::Precision => labels[i] == target,
            SeparationMode::Recall => labels[i] != target,
        };
        if qualifies && remaining > 0 {
            remaining -= 1;
            true
        } else {
            false
        }
    })
}

/// Routes exactly the listed rows (ascending) to the separated neurons.
pub fn routed_separation(
    rate: f64,
    input: &Matrix,
    layout: SeparationLayout,
    rows_to_route: &[usize],
    rng: &mut RngStream,
) -> Result<MaskOutcome> {
    check_width(input, layout)?;
    separation_with_router(rate, input.rows(), layout, rng, |i, _| {
        rows_to_route.binary_search(&i).is_ok()
    })
}

/// Label-free candidate search: Ward-cluster the rows of `input` into
/// `clusters` groups and, if the largest holds at least `threshold` rows,
/// return its first `threshold` rows in ascending order.
pub fn blind_candidate_rows(input: &Matrix, clusters: usize, threshold: usize) -> Result<Option<Vec<usize>>> {
    let n = input.rows();
    if n == 0 || clusters == 0 || clusters > n || threshold > n {
        return Ok(None);
    }
    let assignment = ward_cluster(input, clusters)?;
    let (best, &size) = assignment
        .sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("at least one cluster");
    if size < threshold {
        return Ok(None);
    }
    Ok(Some(
        (0..n)
            .filter(|&i| assignment.labels[i] == best)
            .take(threshold)
            .collect(),
    ))
}
