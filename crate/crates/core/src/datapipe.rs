//! Observed-pair sample construction for network training, plus a synthetic
//! low-rank scene generator for desk-scale experiments.
//!
//! Spectral samples are whole pixel spectra drawn from the low-resolution
//! hyperspectral image; spatial samples are single-band patches drawn from
//! the high-resolution multispectral image. Both draw with replacement.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::Distribution;

/// A hyperspectral (or multispectral) image: `rows x cols x bands`,
/// band-fastest row-major, i.e. `data[(r * cols + c) * bands + b]`.
///
/// Normalized cubes keep values in the nominal [0, 1] range; additive sensor
/// noise may push individual samples slightly outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols * bands != data.len() {
            return Err(Error::Dimension {
                op: "cube_new",
                detail: format!("{rows}x{cols}x{bands} needs {} values, got {}", rows * cols * bands, data.len()),
            });
        }
        Ok(HsiCube { rows, cols, bands, data })
    }

    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Self {
        HsiCube { rows, cols, bands, data: vec![0.0; rows * cols * bands] }
    }

    /// Nominal value range after normalization.
    pub fn nominal_range() -> (f64, f64) {
        (0.0, 1.0)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// Spectrum of pixel (r, c).
    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        &self.data[(r * self.cols + c) * self.bands..][..self.bands]
    }

    /// View the cube as a `[rows*cols x bands]` pixel-major matrix tensor.
    pub fn to_pixmat(&self) -> Tensor {
        Tensor {
            shape: vec![self.num_pixels(), self.bands],
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Repack as a channels-first `[bands x rows x cols]` tensor.
    pub fn to_chw(&self) -> Tensor {
        let plane = self.num_pixels();
        let mut data = vec![0.0; self.data.len()];
        for p in 0..plane {
            for b in 0..self.bands {
                data[b * plane + p] = self.data[p * self.bands + b];
            }
        }
        Tensor { shape: vec![self.bands, self.rows, self.cols], data, requires_grad: false, grad: None }
    }

    /// Inverse of [`HsiCube::to_chw`].
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        if t.shape.len() != 3 {
            return Err(Error::Dimension {
                op: "cube_from_chw",
                detail: format!("{:?} is not [bands x rows x cols]", t.shape),
            });
        }
        let (bands, rows, cols) = (t.shape[0], t.shape[1], t.shape[2]);
        let plane = rows * cols;
        let mut data = vec![0.0; t.data.len()];
        for p in 0..plane {
            for b in 0..bands {
                data[p * bands + b] = t.data[b * plane + p];
            }
        }
        HsiCube::new(rows, cols, bands, data)
    }

    /// Build from a `[rows*cols x bands]` pixel-major matrix.
    pub fn from_pixmat(t: &Tensor, rows: usize, cols: usize) -> Result<Self> {
        if t.shape.len() != 2 || t.shape[0] != rows * cols {
            return Err(Error::Dimension {
                op: "cube_from_pixmat",
                detail: format!("{:?} vs {rows}x{cols} pixels", t.shape),
            });
        }
        HsiCube::new(rows, cols, t.shape[1], t.data.clone())
    }
}

/// Draw `d` full pixel spectra (with replacement) as a `[d x bands]` sample.
pub fn spectral_batch(lr_hsi: &HsiCube, d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if lr_hsi.num_pixels() == 0 || lr_hsi.bands == 0 {
        return Err(Error::Input("spectral_batch: empty cube".into()));
    }
    let mut data = Vec::with_capacity(d * lr_hsi.bands);
    for _ in 0..d {
        let p = rng.gen_range(0..lr_hsi.num_pixels());
        data.extend_from_slice(&lr_hsi.data[p * lr_hsi.bands..][..lr_hsi.bands]);
    }
    Tensor::new(&[d, lr_hsi.bands], data)
}

/// Draw one patch location, then stack `d` randomly chosen bands of that
/// patch (with replacement) as a `[d x h_p x w_p]` channels-first sample.
pub fn spatial_batch(
    hr_msi: &HsiCube,
    d: usize,
    patch: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (hp, wp) = patch;
    if hp == 0 || wp == 0 || hp > hr_msi.rows || wp > hr_msi.cols {
        return Err(Error::Input(format!(
            "spatial_batch: patch {hp}x{wp} does not fit in {}x{}",
            hr_msi.rows, hr_msi.cols
        )));
    }
    if hp % 16 != 0 || wp % 16 != 0 {
        return Err(Error::Input(format!(
            "spatial_batch: patch {hp}x{wp} must be divisible by 16"
        )));
    }
    let r0 = rng.gen_range(0..=hr_msi.rows - hp);
    let c0 = rng.gen_range(0..=hr_msi.cols - wp);
    let mut data = Vec::with_capacity(d * hp * wp);
    for _ in 0..d {
        let b = rng.gen_range(0..hr_msi.bands);
        for r in 0..hp {
            for c in 0..wp {
                data.push(hr_msi.data[((r0 + r) * hr_msi.cols + c0 + c) * hr_msi.bands + b]);
            }
        }
    }
    Tensor::new(&[d, hp, wp], data)
}

/// Generate a smooth scene of mode-3 rank at most `rank`: per-channel sums of
/// random positive Gaussian bumps times a nonnegative spectral basis, scaled
/// into [0, 1].
pub fn synth_scene(rows: usize, cols: usize, bands: usize, rank: usize, seed: u64) -> Result<HsiCube> {
    if rank == 0 || rank > bands.min(rows * cols) {
        return Err(Error::Parameter {
            name: "rank",
            detail: format!("rank {rank} not in 1..=min({bands}, {})", rows * cols),
        });
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // Spatial coefficients: per channel a few broad bumps for background plus
    // a larger number of narrow ones, so the scene carries detail that does
    // not survive coarse downsampling.
    let broad_per_channel = 3;
    let narrow_per_channel = 9;
    let min_dim = rows.min(cols) as f64;
    let mut coeff = vec![0.0; rows * cols * rank];
    for k in 0..rank {
        for b in 0..broad_per_channel + narrow_per_channel {
            let cy = rng.gen_range(0.0..rows as f64);
            let cx = rng.gen_range(0.0..cols as f64);
            let sigma = if b < broad_per_channel {
                rng.gen_range(min_dim / 10.0..min_dim / 4.0)
            } else {
                rng.gen_range(1.0..2.5)
            };
            let amp = rng.gen_range(0.3..1.0);
            let inv2s2 = 1.0 / (2.0 * sigma * sigma);
            for r in 0..rows {
                let dy = r as f64 - cy;
                for c in 0..cols {
                    let dx = c as f64 - cx;
                    coeff[(r * cols + c) * rank + k] += amp * (-(dy * dy + dx * dx) * inv2s2).exp();
                }
            }
        }
    }

    // Nonnegative spectral basis, lightly smoothed along bands.
    let mut basis = vec![0.0; rank * bands];
    for v in basis.iter_mut() {
        *v = rng.gen_range(0.05..1.0);
    }
    for _ in 0..2 {
        for k in 0..rank {
            let row = &mut basis[k * bands..][..bands];
            let orig = row.to_vec();
            for b in 0..bands {
                let lo = b.saturating_sub(1);
                let hi = (b + 1).min(bands - 1);
                row[b] = (orig[lo] + orig[b] + orig[hi]) / 3.0;
            }
        }
    }

    // Z = coeff x3 basis, then scale by the max; everything is nonnegative,
    // so scaling keeps the mode-3 rank.
    let mut data = vec![0.0; rows * cols * bands];
    for p in 0..rows * cols {
        let a = &coeff[p * rank..][..rank];
        let z = &mut data[p * bands..][..bands];
        for (k, &av) in a.iter().enumerate() {
            let e = &basis[k * bands..][..bands];
            for (zv, ev) in z.iter_mut().zip(e) {
                *zv += av * ev;
            }
        }
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        let inv = 1.0 / max;
        for v in &mut data {
            *v *= inv;
        }
    }
    HsiCube::new(rows, cols, bands, data)
}

/// Gaussian-noise tensor shaped like `t`.
pub fn randn_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    let data = (0..t.data.len())
        .map(|_| rand_distr::StandardNormal.sample(rng))
        .collect();
    Tensor { shape: t.shape.clone(), data, requires_grad: false, grad: None }
}
