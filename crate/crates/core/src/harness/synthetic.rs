use crate::denseengine::{DenseMatrix, Prng};

use super::dataset::{Dataset, DatasetError};

pub const PIXELS: usize = 784;
pub const DIGITS: usize = 10;
pub const MAX_ROWS: usize = 6000;

/// Deterministic stand-in for an MNIST excerpt: each class has a fixed
/// random stroke mask; pixels on the mask are bright, the rest faint noise.
/// Values are already divided by 255. Labels cycle through the classes.
pub fn synthetic_pixels(rows: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if rows == 0 || rows > MAX_ROWS {
        return Err(DatasetError::SyntheticRows { rows, max: MAX_ROWS });
    }
    let mut prng = Prng::new(seed);
    let masks: Vec<Vec<bool>> =
        (0..DIGITS).map(|_| (0..PIXELS).map(|_| prng.next_f64() < 0.15).collect()).collect();
    let mut values = Vec::with_capacity(rows * PIXELS);
    let labels: Vec<usize> = (0..rows).map(|r| r % DIGITS).collect();
    for &label in &labels {
        for &on in &masks[label] {
            let noise = prng.next_f64();
            let px = if on { 200.0 + (55.0 * noise).floor() } else { (30.0 * noise).floor() };
            values.push(px / 255.0);
        }
    }
    Ok(Dataset {
        name: "synthetic-pixels".to_string(),
        features: DenseMatrix::new(rows, PIXELS, values)?,
        labels,
        num_classes: DIGITS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let a = synthetic_pixels(25, 3).unwrap();
        assert_eq!((a.features.rows(), a.features.cols(), a.num_classes), (25, PIXELS, DIGITS));
        assert_eq!(a, synthetic_pixels(25, 3).unwrap());
        assert!(a.features.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synthetic_pixels(MAX_ROWS + 1, 3).is_err());
    }
}
