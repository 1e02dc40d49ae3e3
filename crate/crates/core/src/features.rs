//! Dense per-pixel grids and the pooling primitives that reduce them to class
//! vectors.
//!
//! Pixels are addressed row-major with a 0-based index `j = row * width + col`.
//! A [`FeatureMap`] stores channels innermost, so pixel `j` occupies
//! `values[j * dim..(j + 1) * dim]`.

use crate::{Error, Result};

/// A `height x width` grid of `dim`-dimensional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if values.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {height}x{width}x{dim}, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(format!(
                "non-finite feature value at flat index {bad}"
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    /// Build a map from a per-pixel closure returning the pixel's embedding.
    pub fn from_pixels<F>(height: usize, width: usize, dim: usize, mut pixel: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut values = Vec::with_capacity(height * width * dim);
        for row in 0..height {
            for col in 0..width {
                let v = pixel(row, col);
                if v.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "pixel ({row},{col}) has {} channels, expected {dim}",
                        v.len()
                    )));
                }
                values.extend_from_slice(&v);
            }
        }
        Self::new(height, width, dim, values)
    }

    pub fn constant(height: usize, width: usize, value: &[f64]) -> Result<Self> {
        Self::from_pixels(height, width, value.len(), |_, _| value.to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    /// Multiply every channel of every pixel by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * k).collect(),
            ..self.clone()
        }
    }

    fn check_shape(&self, other: (usize, usize), what: &str) -> Result<()> {
        if (self.height, self.width) != other {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {}x{}, features are {}x{}",
                other.0, other.1, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A `{0,1}` indicator grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask of {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Build a mask from `0`/`1` bytes; any nonzero byte counts as set.
    pub fn from_indicator(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| v != 0).collect())
    }

    pub fn from_fn<F>(height: usize, width: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> bool,
    {
        let mut bits = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(row, col));
            }
        }
        Self::new(height, width, bits)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|&b| !b).collect(),
            ..self.clone()
        }
    }
}

/// Per-pixel confidences in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "soft mask of {height}x{width} needs {} entries, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch(format!(
                "soft mask entry {bad} = {} outside [0, 1]",
                values[bad]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Mean of the features under `mask`.
pub fn masked_average_pool(features: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    features.check_shape(mask.shape(), "mask")?;
    let mut acc = vec![0.0; features.dim];
    let mut count = 0usize;
    for (pixel, _) in features.pixels().zip(&mask.bits).filter(|(_, &m)| m) {
        for (a, &v) in acc.iter_mut().zip(pixel) {
            *a += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let denom = count as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    Ok(acc)
}

/// Confidence-weighted mean of the features under a pseudo-mask:
/// `sum_j f_j * y_j * z_j / sum_j y_j * z_j`.
pub fn soft_masked_pool(
    features: &FeatureMap,
    confidences: &SoftMask,
    pseudo_mask: &BinaryMask,
) -> Result<Vec<f64>> {
    features.check_shape(confidences.shape(), "confidence map")?;
    features.check_shape(pseudo_mask.shape(), "pseudo-mask")?;
    let (acc, total) = weighted_sum(features, |j| {
        if pseudo_mask.bits[j] {
            confidences.values[j]
        } else {
            0.0
        }
    });
    if total <= 0.0 {
        return Err(Error::ZeroEffectiveWeight);
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// `sum_j f_j * w_j` and `sum_j w_j`, skipping zero weights.
pub(crate) fn weighted_sum<W>(features: &FeatureMap, mut weight: W) -> (Vec<f64>, f64)
where
    W: FnMut(usize) -> f64,
{
    let mut acc = vec![0.0; features.dim];
    let mut total = 0.0;
    for (j, pixel) in features.pixels().enumerate() {
        let w = weight(j);
        if w == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(pixel) {
            *a += v * w;
        }
        total += w;
    }
    (acc, total)
}

/// Pixels that belong to none of the foreground masks.
pub fn background_mask(foreground_masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = foreground_masks
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no foreground masks given".into()))?;
    let mut bits = vec![true; first.len()];
    for mask in foreground_masks {
        if mask.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "foreground masks disagree: {:?} vs {:?}",
                mask.shape(),
                first.shape()
            )));
        }
        for (b, &m) in bits.iter_mut().zip(&mask.bits) {
            *b &= !m;
        }
    }
    BinaryMask::new(first.height, first.width, bits)
}

/// Pixelwise AND of a pseudo-mask with a keep/drop indicator.
pub fn apply_indicator(pseudo_mask: &BinaryMask, indicator: &BinaryMask) -> Result<BinaryMask> {
    if pseudo_mask.shape() != indicator.shape() {
        return Err(Error::ShapeMismatch(format!(
            "indicator is {:?}, pseudo-mask is {:?}",
            indicator.shape(),
            pseudo_mask.shape()
        )));
    }
    let bits = pseudo_mask
        .bits
        .iter()
        .zip(&indicator.bits)
        .map(|(&a, &b)| a && b)
        .collect();
    BinaryMask::new(pseudo_mask.height, pseudo_mask.width, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(values: &[f64]) -> FeatureMap {
        FeatureMap::new(1, values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn mp_of_selected_pixels() {
        let f = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = BinaryMask::from_indicator(2, 2, &[1, 0, 1, 0]).unwrap();
        assert_eq!(masked_average_pool(&f, &m).unwrap(), vec![2.0]);
    }

    #[test]
    fn mp_constant_features() {
        let f = FeatureMap::constant(3, 4, &[0.25, -1.5]).unwrap();
        let m = BinaryMask::from_fn(3, 4, |r, c| (r + c) % 3 == 0).unwrap();
        assert_eq!(masked_average_pool(&f, &m).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn mp_empty_mask_is_an_error() {
        let f = column(&[1.0, 2.0]);
        let m = BinaryMask::zeros(1, 2).unwrap();
        assert!(matches!(masked_average_pool(&f, &m), Err(Error::EmptyMask)));
    }

    #[test]
    fn mp_shape_mismatch() {
        let f = column(&[1.0, 2.0]);
        let m = BinaryMask::ones(2, 1).unwrap();
        assert!(matches!(
            masked_average_pool(&f, &m),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn smp_worked_example() {
        let f = column(&[1.0, 2.0, 3.0]);
        let y = SoftMask::new(1, 3, vec![0.5, 1.0, 0.8]).unwrap();
        let z = BinaryMask::from_indicator(1, 3, &[1, 1, 0]).unwrap();
        let got = soft_masked_pool(&f, &y, &z).unwrap();
        assert!((got[0] - 2.5 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn smp_with_unit_confidence_is_mp() {
        let f = FeatureMap::new(2, 3, 2, (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        let z = BinaryMask::from_indicator(2, 3, &[1, 0, 1, 1, 0, 1]).unwrap();
        let ones = SoftMask::ones(2, 3).unwrap();
        assert_eq!(
            soft_masked_pool(&f, &ones, &z).unwrap(),
            masked_average_pool(&f, &z).unwrap()
        );
    }

    #[test]
    fn smp_zero_weight() {
        let f = column(&[1.0, 2.0]);
        let y = SoftMask::new(1, 2, vec![0.0, 0.7]).unwrap();
        let z = BinaryMask::from_indicator(1, 2, &[1, 0]).unwrap();
        assert!(matches!(
            soft_masked_pool(&f, &y, &z),
            Err(Error::ZeroEffectiveWeight)
        ));
    }

    #[test]
    fn background_is_complement_of_union() {
        let a = BinaryMask::from_indicator(2, 2, &[1, 0, 0, 1]).unwrap();
        assert_eq!(
            background_mask(std::slice::from_ref(&a)).unwrap(),
            BinaryMask::from_indicator(2, 2, &[0, 1, 1, 0]).unwrap()
        );
        let b = BinaryMask::from_indicator(2, 2, &[1, 0, 0, 0]).unwrap();
        let c = BinaryMask::from_indicator(2, 2, &[0, 1, 0, 0]).unwrap();
        assert_eq!(
            background_mask(&[b, c]).unwrap(),
            BinaryMask::from_indicator(2, 2, &[0, 0, 1, 1]).unwrap()
        );
        let full = BinaryMask::ones(2, 2).unwrap();
        assert!(background_mask(&[full]).unwrap().is_empty());
    }

    #[test]
    fn background_rejects_mixed_shapes() {
        let a = BinaryMask::ones(2, 2).unwrap();
        let b = BinaryMask::ones(1, 4).unwrap();
        assert!(matches!(
            background_mask(&[a, b]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(background_mask(&[]).is_err());
    }

    #[test]
    fn indicator_and() {
        let m = BinaryMask::from_indicator(1, 3, &[1, 1, 0]).unwrap();
        let h = BinaryMask::from_indicator(1, 3, &[1, 0, 1]).unwrap();
        assert_eq!(
            apply_indicator(&m, &h).unwrap(),
            BinaryMask::from_indicator(1, 3, &[1, 0, 0]).unwrap()
        );
        let ones = BinaryMask::ones(1, 3).unwrap();
        assert_eq!(apply_indicator(&m, &ones).unwrap(), m);
        let zeros = BinaryMask::zeros(1, 3).unwrap();
        assert!(apply_indicator(&m, &zeros).unwrap().is_empty());
        assert!(apply_indicator(&m, &BinaryMask::ones(3, 1).unwrap()).is_err());
    }

    #[test]
    fn constructors_validate() {
        assert!(FeatureMap::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(FeatureMap::new(0, 1, 1, vec![]).is_err());
        assert!(SoftMask::new(1, 1, vec![1.5]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true]).is_err());
    }
}
