//! Saliency map domain types: binary fixation grids, Gaussian-densified
//! ground truth, predicted maps, and the 8-bit PGM dump format.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Binary grid marking recorded gaze locations.
#[derive(Debug, Clone)]
pub struct FixationMap {
    pub height: usize,
    pub width: usize,
    /// Row-major 0/1 cells.
    pub cells: Vec<u8>,
}

impl FixationMap {
    pub fn new(height: usize, width: usize) -> FixationMap {
        FixationMap { height, width, cells: vec![0; height * width] }
    }

    pub fn from_points(
        height: usize,
        width: usize,
        points: &[(usize, usize)],
    ) -> FixationMap {
        let mut m = FixationMap::new(height, width);
        for &(r, c) in points {
            if r < height && c < width {
                m.cells[r * width + c] = 1;
            }
        }
        m
    }

    /// Reconstruct from a tensor whose entries are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<FixationMap> {
        if t.rank() != 2 {
            return Err(Error::dim(format!("fixation map must be 2-D, got {:?}", t.shape())));
        }
        let cells = t
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(0u8)
                } else if v == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::Input(format!("fixation cell {v} is not binary")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(FixationMap { height: t.shape()[0], width: t.shape()[1], cells })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.cells.iter().map(|&v| v as f32).collect(),
        )
        .expect("fixation grid shape")
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&v| v == 1).count()
    }

    pub fn iter_fixations(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// Gaussian-blurred, sum-normalized fixation map used as the distribution
/// target for losses and distribution metrics.
#[derive(Debug, Clone)]
pub struct DenseMap {
    map: Tensor,
}

impl DenseMap {
    /// Wrap an existing nonnegative map, normalizing it to sum 1.
    pub fn from_tensor(t: &Tensor) -> Result<DenseMap> {
        if t.rank() != 2 {
            return Err(Error::dim(format!("dense map must be 2-D, got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Input("dense map must be nonnegative and finite".into()));
        }
        let sum: f64 = t.data().iter().map(|&v| v as f64).sum();
        if sum <= 0.0 {
            return Err(Error::Input("dense map sums to zero".into()));
        }
        let data: Vec<f32> = t.data().iter().map(|&v| (v as f64 / sum) as f32).collect();
        Ok(DenseMap { map: Tensor::from_vec(t.shape(), data)? })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.map
    }
}

/// Densify a fixation map: Gaussian blur with the given pixel sigma,
/// normalized to sum 1. A non-positive sigma degenerates to point masses on
/// the fixation pixels.
pub fn fixation_to_dense(fix: &FixationMap, sigma: f64) -> Result<DenseMap> {
    if fix.count() == 0 {
        return Err(Error::Input("cannot densify an empty fixation map".into()));
    }
    let (h, w) = (fix.height, fix.width);
    let mut acc = vec![0.0f64; h * w];
    if sigma <= 1e-6 {
        for (r, c) in fix.iter_fixations() {
            acc[r * w + c] += 1.0;
        }
    } else {
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        // Separable blur of the sparse fixation set.
        let mut rows = vec![0.0f64; h * w];
        for (r, c) in fix.iter_fixations() {
            for (i, k) in kernel.iter().enumerate() {
                let cc = c as isize + i as isize - radius;
                if cc >= 0 && (cc as usize) < w {
                    rows[r * w + cc as usize] += k;
                }
            }
        }
        for c in 0..w {
            for r in 0..h {
                let v = rows[r * w + c];
                if v != 0.0 {
                    for (i, k) in kernel.iter().enumerate() {
                        let rr = r as isize + i as isize - radius;
                        if rr >= 0 && (rr as usize) < h {
                            acc[rr as usize * w + c] += v * k;
                        }
                    }
                }
            }
        }
    }
    let total: f64 = acc.iter().sum();
    let data: Vec<f32> = acc.iter().map(|&v| (v / total) as f32).collect();
    Ok(DenseMap { map: Tensor::from_vec(&[h, w], data)? })
}

/// Predicted per-pixel saliency in [0, 1].
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    map: Tensor,
}

impl SaliencyMap {
    pub fn from_tensor(t: Tensor) -> Result<SaliencyMap> {
        if t.rank() != 2 {
            return Err(Error::dim(format!("saliency map must be 2-D, got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("saliency values must lie in [0, 1]".into()));
        }
        Ok(SaliencyMap { map: t })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.map
    }
}

/// Write a 2-D map as binary 8-bit PGM, linearly quantizing [0, 1].
pub fn write_pgm(t: &Tensor, path: &Path) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::dim(format!("pgm dump expects a 2-D map, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_fixation_bump_sums_to_one() {
        let fix = FixationMap::from_points(9, 9, &[(4, 4)]);
        let dense = fixation_to_dense(&fix, 1.5).unwrap();
        let sum: f64 = dense.tensor().data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5);
        // Peak at the fixation.
        let peak = dense.tensor().at(&[4, 4]);
        assert!(dense.tensor().data().iter().all(|&v| v <= peak));
    }

    #[test]
    fn zero_sigma_concentrates_mass() {
        let fix = FixationMap::from_points(5, 5, &[(1, 1), (3, 4)]);
        let dense = fixation_to_dense(&fix, 0.0).unwrap();
        assert_eq!(dense.tensor().at(&[1, 1]), 0.5);
        assert_eq!(dense.tensor().at(&[3, 4]), 0.5);
        let sum: f32 = dense.tensor().data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_fixations_match_direct_convolution() {
        let fix = FixationMap::from_points(11, 13, &[(2, 3), (8, 9)]);
        let sigma = 1.2f64;
        let dense = fixation_to_dense(&fix, sigma).unwrap();
        // Direct 2-D convolution oracle.
        let radius = (3.0 * sigma).ceil() as isize;
        let mut acc = vec![0.0f64; 11 * 13];
        for &(fr, fc) in &[(2isize, 3isize), (8, 9)] {
            for r in 0..11isize {
                for c in 0..13isize {
                    let (dr, dc) = (r - fr, c - fc);
                    if dr.abs() <= radius && dc.abs() <= radius {
                        acc[(r * 13 + c) as usize] +=
                            (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
        let total: f64 = acc.iter().sum();
        for (got, want) in dense.tensor().data().iter().zip(&acc) {
            assert!((*got as f64 - want / total).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_fixation_map_is_input_error() {
        let fix = FixationMap::new(4, 4);
        assert!(matches!(fixation_to_dense(&fix, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn fixation_tensor_roundtrip_and_binary_validation() {
        let fix = FixationMap::from_points(3, 3, &[(0, 1), (2, 2)]);
        let t = fix.to_tensor();
        let back = FixationMap::from_tensor(&t).unwrap();
        assert_eq!(back.cells, fix.cells);
        let bad = Tensor::from_vec(&[1, 2], vec![0.5, 1.0]).unwrap();
        assert!(FixationMap::from_tensor(&bad).is_err());
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let t = Tensor::from_vec(&[2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        write_pgm(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8, 128, 255, 64]);
    }
}
