use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

/// Binary keep/drop mask for one dropout invocation: `1.0` keeps a unit,
/// `0.0` drops it.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    mask: Matrix,
    dropped: usize,
}

impl DropMask {
    pub fn keep_all(rows: usize, cols: usize) -> Self {
        Self {
            mask: Matrix::filled(rows, cols, 1.0),
            dropped: 0,
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: &[bool]) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::shape(
                "DropMask::from_keep",
                format!("{} flags for {rows}x{cols}", keep.len()),
            ));
        }
        let data = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            mask: Matrix::from_vec(rows, cols, data)?,
            dropped: keep.iter().filter(|&&k| !k).count(),
        })
    }

    /// Accepts a matrix of zeros and ones.
    pub fn from_matrix(mask: Matrix) -> Result<Self> {
        if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("mask entry {bad} is not 0 or 1")));
        }
        let dropped = mask.data().iter().filter(|&&v| v == 0.0).count();
        Ok(Self { mask, dropped })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn dropped_count(&self) -> usize {
        self.dropped
    }

    #[inline]
    pub fn is_kept(&self, i: usize, j: usize) -> bool {
        self.mask.get(i, j) != 0.0
    }

    pub fn keep_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.mask.data().iter().map(|&v| v != 0.0)
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("rate", format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Zeroes dropped units and rescales the survivors by `1 / (1 - rate)`.
pub fn apply_mask(input: &Matrix, mask: &DropMask, rate: f64) -> Result<Matrix> {
    check_rate(rate)?;
    if input.shape() != mask.shape() {
        return Err(Error::shape(
            "apply_mask",
            format!("input {:?} vs mask {:?}", input.shape(), mask.shape()),
        ));
    }
    let keep = 1.0 - rate;
    let data = input
        .data()
        .iter()
        .zip(mask.matrix().data())
        .map(|(&x, &m)| if m == 0.0 { 0.0 } else { x / keep })
        .collect();
    Matrix::from_vec(input.rows(), input.cols(), data)
}

/// Rounds half up, snapping values within 1e-9 of an integer first so that
/// products such as `0.3 * 10` do not land on the wrong side.
pub(crate) fn round_half_up(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        return nearest.max(0.0) as usize;
    }
    (x + 0.5).floor().max(0.0) as usize
}

pub(crate) fn floor_snapped(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        return nearest.max(0.0) as usize;
    }
    x.floor().max(0.0) as usize
}

/// Number of units an attack must drop: `round(rate * units)`, half up.
pub fn unit_budget(rate: f64, units: usize) -> usize {
    round_half_up(rate * units as f64)
}

/// Drops exactly `count` of the `eligible` flat indices, chosen uniformly
/// without replacement. Returns how many were actually dropped (fewer only
/// when `count` exceeds the eligible pool).
pub(crate) fn drop_uniform_subset(
    keep: &mut [bool],
    mut eligible: Vec<usize>,
    count: usize,
    rng: &mut RngStream,
) -> usize {
    let take = count.min(eligible.len());
    if take == eligible.len() {
        for &idx in &eligible {
            keep[idx] = false;
        }
        return take;
    }
    for t in 0..take {
        let j = t + rng.below(eligible.len() - t);
        eligible.swap(t, j);
        keep[eligible[t]] = false;
    }
    take
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_mask_hand_example() {
        let input = Matrix::from_rows(&[[2.0, 4.0]]).unwrap();
        let mask = DropMask::from_keep(1, 2, &[true, false]).unwrap();
        let out = apply_mask(&input, &mask, 0.5).unwrap();
        assert_eq!(out.data(), &[4.0, 0.0]);
    }

    #[test]
    fn all_ones_rate_zero_is_identity() {
        let input = Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]).unwrap();
        let out = apply_mask(&input, &DropMask::keep_all(2, 2), 0.0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn entries_are_zero_or_rescaled_input() {
        let mut rng = RngStream::new(8);
        let (n, m) = (13, 9);
        let input = Matrix::from_vec(n, m, (0..n * m).map(|_| rng.uniform() - 0.5).collect())
            .unwrap();
        let keep: Vec<bool> = (0..n * m).map(|_| rng.uniform() < 0.6).collect();
        let mask = DropMask::from_keep(n, m, &keep).unwrap();
        let out = apply_mask(&input, &mask, 0.3).unwrap();
        for (idx, &k) in keep.iter().enumerate() {
            let want = if k { input.data()[idx] / 0.7 } else { 0.0 };
            assert_eq!(out.data()[idx], want);
        }
    }

    #[test]
    fn bad_rate_and_shape_are_rejected() {
        let input = Matrix::zeros(2, 2);
        let mask = DropMask::keep_all(2, 2);
        assert!(matches!(apply_mask(&input, &mask, 1.0), Err(Error::Config { .. })));
        assert!(matches!(apply_mask(&input, &mask, -0.1), Err(Error::Config { .. })));
        let wrong = DropMask::keep_all(2, 3);
        assert!(matches!(apply_mask(&input, &wrong, 0.5), Err(Error::Shape { .. })));
    }

    #[test]
    fn rounding_helpers() {
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(2.4999), 2);
        assert_eq!(round_half_up(0.3 * 10.0), 3);
        assert_eq!(floor_snapped(0.29 * 100.0), 29);
        assert_eq!(floor_snapped(2.7), 2);
        assert_eq!(unit_budget(0.5, 20), 10);
        assert_eq!(unit_budget(0.1, 128 * 128), 1638);
    }

    #[test]
    fn mask_from_matrix_validates() {
        assert!(DropMask::from_matrix(Matrix::filled(1, 2, 0.5)).is_err());
        let m = DropMask::from_matrix(Matrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(m.dropped_count(), 2);
    }
}
