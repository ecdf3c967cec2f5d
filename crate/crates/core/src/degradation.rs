//! Observation operators: spatial downsampling, spectral response mixing,
//! and SNR-calibrated Gaussian noise, plus the simulation protocol that
//! produces an observed pair from a reference scene.

use crate::datapipe::HsiCube;
use crate::error::{Error, Result};
use crate::resample::{self, CubicTaps};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::Distribution;

/// Spectral response function: a `c x C` nonnegative matrix applied along the
/// band axis. Rows sum to 1; each input band feeds at most one output band.
#[derive(Debug, Clone)]
pub struct SrfMatrix {
    pub out_bands: usize,
    pub in_bands: usize,
    matrix: Tensor,
}

impl SrfMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Transposed copy `[C x c]`, the layout the sampler's loss graph wants.
    pub fn transposed(&self) -> Tensor {
        let (c, cc) = (self.out_bands, self.in_bands);
        let mut data = vec![0.0; c * cc];
        for i in 0..c {
            for j in 0..cc {
                data[j * c + i] = self.matrix.data[i * cc + j];
            }
        }
        Tensor { shape: vec![cc, c], data, requires_grad: false, grad: None }
    }
}

/// How the observed pair is produced from the reference scene.
#[derive(Debug, Clone)]
pub struct DegradationModel {
    /// Spatial downsampling factor between HR and LR grids.
    pub scale: usize,
    pub srf: SrfMatrix,
    /// Target signal-to-noise ratio in dB; `f64::INFINITY` means noiseless.
    pub snr_db: f64,
}

impl DegradationModel {
    pub fn new(scale: usize, srf: SrfMatrix, snr_db: f64) -> Result<Self> {
        if scale < 1 {
            return Err(Error::Parameter { name: "scale", detail: "must be >= 1".into() });
        }
        if snr_db.is_nan() {
            return Err(Error::Parameter { name: "snr_db", detail: "must not be NaN".into() });
        }
        Ok(DegradationModel { scale, srf, snr_db })
    }
}

/// Apply a `q x p` matrix along the band axis: every output spectrum is
/// `M . input_spectrum`.
pub fn mode3_multiply(cube: &HsiCube, m: &Tensor) -> Result<HsiCube> {
    if m.shape.len() != 2 || m.shape[1] != cube.bands {
        return Err(Error::Dimension {
            op: "mode3_multiply",
            detail: format!("matrix {:?} vs {} bands", m.shape, cube.bands),
        });
    }
    let (q, p) = (m.shape[0], m.shape[1]);
    let mut out = HsiCube::zeros(cube.rows, cube.cols, q);
    for pix in 0..cube.num_pixels() {
        let spec = &cube.data[pix * p..][..p];
        let dst = &mut out.data[pix * q..][..q];
        for (i, d) in dst.iter_mut().enumerate() {
            let row = &m.data[i * p..][..p];
            let mut acc = 0.0;
            for (rv, sv) in row.iter().zip(spec) {
                acc += rv * sv;
            }
            *d = acc;
        }
    }
    Ok(out)
}

/// Cubic-kernel spatial downsampling by an integer factor, per band.
pub fn bicubic_downsample(cube: &HsiCube, s: usize) -> Result<HsiCube> {
    if s == 0 || cube.rows % s != 0 || cube.cols % s != 0 {
        return Err(Error::Parameter {
            name: "scale",
            detail: format!("{}x{} not divisible by {s}", cube.rows, cube.cols),
        });
    }
    let row_taps = CubicTaps::downsample(cube.rows, s);
    let col_taps = CubicTaps::downsample(cube.cols, s);
    let data = resample::resample_2d(&row_taps, &col_taps, &cube.data, cube.bands);
    HsiCube::new(cube.rows / s, cube.cols / s, cube.bands, data)
}

/// Cubic-kernel spatial upsampling by an integer factor, per band. Used by
/// the naive fusion baseline and for visual comparisons.
pub fn bicubic_upsample(cube: &HsiCube, s: usize) -> Result<HsiCube> {
    if s == 0 {
        return Err(Error::Parameter { name: "scale", detail: "must be >= 1".into() });
    }
    let row_taps = CubicTaps::upsample(cube.rows, s);
    let col_taps = CubicTaps::upsample(cube.cols, s);
    let data = resample::resample_2d(&row_taps, &col_taps, &cube.data, cube.bands);
    HsiCube::new(cube.rows * s, cube.cols * s, cube.bands, data)
}

/// Partition `c_in` contiguous bands into `c_out` nearly equal groups and
/// average within each group.
pub fn make_partition_srf(c_in: usize, c_out: usize) -> Result<SrfMatrix> {
    if c_out == 0 || c_out > c_in {
        return Err(Error::Parameter {
            name: "msi_bands",
            detail: format!("cannot partition {c_in} bands into {c_out} groups"),
        });
    }
    let mut data = vec![0.0; c_out * c_in];
    for i in 0..c_out {
        let start = i * c_in / c_out;
        let end = (i + 1) * c_in / c_out;
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            data[i * c_in + j] = w;
        }
    }
    Ok(SrfMatrix {
        out_bands: c_out,
        in_bands: c_in,
        matrix: Tensor::new(&[c_out, c_in], data)?,
    })
}

/// Add i.i.d. zero-mean Gaussian noise with variance chosen so the output
/// hits the requested SNR. Infinite `snr_db` returns the cube unchanged.
pub fn add_noise_snr(cube: &HsiCube, snr_db: f64, rng: &mut impl Rng) -> Result<HsiCube> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(cube.clone());
    }
    let power = cube.data.iter().map(|v| v * v).sum::<f64>() / cube.numel() as f64;
    if power == 0.0 {
        return Err(Error::Input("add_noise_snr: all-zero cube has undefined SNR".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = rand_distr::Normal::new(0.0, sigma).map_err(|e| Error::Parameter {
        name: "snr_db",
        detail: e.to_string(),
    })?;
    let data = cube.data.iter().map(|v| v + normal.sample(rng)).collect();
    HsiCube::new(cube.rows, cube.cols, cube.bands, data)
}

/// Produce the observed pair: LR-HSI by spatial downsampling, HR-MSI by
/// spectral mixing, each with sensor noise at the model's SNR.
pub fn simulate_pair(
    reference: &HsiCube,
    model: &DegradationModel,
    rng: &mut impl Rng,
) -> Result<(HsiCube, HsiCube)> {
    let lr = bicubic_downsample(reference, model.scale)?;
    let lr = add_noise_snr(&lr, model.snr_db, rng)?;
    let msi = mode3_multiply(reference, model.srf.matrix())?;
    let msi = add_noise_snr(&msi, model.snr_db, rng)?;
    Ok((lr, msi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_matrix(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(&[n, n], data).unwrap()
    }

    #[test]
    fn mode3_identity() {
        let cube = synth_scene(5, 4, 3, 2, 1).unwrap();
        let out = mode3_multiply(&cube, &identity_matrix(3)).unwrap();
        assert_eq!(out, cube);
    }

    #[test]
    fn mode3_hand_sum() {
        let cube = HsiCube::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let m = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let out = mode3_multiply(&cube, &m).unwrap();
        assert_eq!(out.data, vec![7.0]);
    }

    #[test]
    fn mode3_matches_triple_loop() {
        let cube = synth_scene(5, 5, 7, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::randn(&[3, 7], &mut rng);
        let out = mode3_multiply(&cube, &m).unwrap();
        // brute-force oracle
        for r in 0..5 {
            for c in 0..5 {
                for i in 0..3 {
                    let mut acc = 0.0;
                    for j in 0..7 {
                        acc += m.data[i * 7 + j] * cube.data[(r * 5 + c) * 7 + j];
                    }
                    let got = out.data[(r * 5 + c) * 3 + i];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mode3_dimension_mismatch() {
        let cube = HsiCube::zeros(2, 2, 3);
        let m = Tensor::new(&[2, 4], vec![0.0; 8]).unwrap();
        assert!(mode3_multiply(&cube, &m).is_err());
    }

    #[test]
    fn mode3_linearity() {
        let z1 = synth_scene(6, 6, 5, 3, 4).unwrap();
        let z2 = synth_scene(6, 6, 5, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Tensor::randn(&[2, 5], &mut rng);
        let alpha = 1.7;
        let mixed = HsiCube::new(
            6,
            6,
            5,
            z1.data.iter().zip(&z2.data).map(|(a, b)| alpha * a + b).collect(),
        )
        .unwrap();
        let lhs = mode3_multiply(&mixed, &m).unwrap();
        let m1 = mode3_multiply(&z1, &m).unwrap();
        let m2 = mode3_multiply(&z2, &m).unwrap();
        for ((l, a), b) in lhs.data.iter().zip(&m1.data).zip(&m2.data) {
            assert!((l - (alpha * a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_preserves_constants() {
        let cube = HsiCube::new(16, 16, 2, vec![0.37; 16 * 16 * 2]).unwrap();
        let down = bicubic_downsample(&cube, 4).unwrap();
        assert_eq!(down.rows, 4);
        for v in &down.data {
            assert!((v - 0.37).abs() < 1e-9);
        }
    }

    #[test]
    fn bicubic_scale_one_is_identity() {
        let cube = synth_scene(8, 8, 3, 2, 7).unwrap();
        let same = bicubic_downsample(&cube, 1).unwrap();
        for (a, b) in same.data.iter().zip(&cube.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_ramp_matches_sample_centers() {
        // band value = x / (W-1); downsampled values must equal the ramp at
        // pixel centers away from borders.
        let (h, w, s) = (16, 32, 4);
        let mut data = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                data[r * w + c] = c as f64 / (w - 1) as f64;
            }
        }
        let cube = HsiCube::new(h, w, 1, data).unwrap();
        let down = bicubic_downsample(&cube, s).unwrap();
        for oc in 0..w / s {
            let x_in = (oc as f64 + 0.5) * s as f64 - 0.5;
            if x_in < 2.0 || x_in > (w - 3) as f64 {
                continue;
            }
            let want = x_in / (w - 1) as f64;
            for or in 0..h / s {
                let got = down.data[or * (w / s) + oc];
                assert!((got - want).abs() < 1e-6, "col {oc}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn bicubic_rejects_non_divisible() {
        let cube = HsiCube::zeros(10, 10, 1);
        assert!(bicubic_downsample(&cube, 4).is_err());
    }

    #[test]
    fn partition_srf_construction() {
        let srf = make_partition_srf(4, 2).unwrap();
        assert_eq!(srf.matrix().data, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);

        let ident = make_partition_srf(3, 3).unwrap();
        assert_eq!(ident.matrix().data, identity_matrix(3).data);

        for (c_in, c_out) in [(31, 4), (103, 4), (7, 3), (5, 5)] {
            let srf = make_partition_srf(c_in, c_out).unwrap();
            for i in 0..c_out {
                let sum: f64 = srf.matrix().data[i * c_in..][..c_in].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            // each column nonzero in at most one row
            for j in 0..c_in {
                let nonzero = (0..c_out)
                    .filter(|&i| srf.matrix().data[i * c_in + j] != 0.0)
                    .count();
                assert!(nonzero <= 1);
            }
        }
        assert!(make_partition_srf(3, 5).is_err());
    }

    #[test]
    fn srf_preserves_spectrally_constant_cube() {
        let cube = HsiCube::new(4, 4, 8, vec![0.61; 4 * 4 * 8]).unwrap();
        let srf = make_partition_srf(8, 3).unwrap();
        let out = mode3_multiply(&cube, srf.matrix()).unwrap();
        for v in &out.data {
            assert!((v - 0.61).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_hits_target_snr() {
        let cube = synth_scene(64, 64, 31, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = add_noise_snr(&cube, 35.0, &mut rng).unwrap();
        let signal: f64 = cube.data.iter().map(|v| v * v).sum();
        let noise: f64 = cube
            .data
            .iter()
            .zip(&noisy.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 35.0).abs() < 0.5, "measured snr {snr}");
    }

    #[test]
    fn noise_noiseless_sentinel_and_determinism() {
        let cube = synth_scene(8, 8, 4, 2, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let same = add_noise_snr(&cube, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(same, cube);

        let mut r1 = ChaCha8Rng::seed_from_u64(12);
        let mut r2 = ChaCha8Rng::seed_from_u64(12);
        let a = add_noise_snr(&cube, 30.0, &mut r1).unwrap();
        let b = add_noise_snr(&cube, 30.0, &mut r2).unwrap();
        assert_eq!(a, b);

        let zero = HsiCube::zeros(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(add_noise_snr(&zero, 30.0, &mut rng).is_err());
    }

    #[test]
    fn simulate_pair_shapes_and_noiseless_identity() {
        let scene = synth_scene(32, 32, 12, 4, 14).unwrap();
        let model = DegradationModel::new(4, make_partition_srf(12, 4).unwrap(), 35.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (lr, msi) = simulate_pair(&scene, &model, &mut rng).unwrap();
        assert_eq!((lr.rows, lr.cols, lr.bands), (8, 8, 12));
        assert_eq!((msi.rows, msi.cols, msi.bands), (32, 32, 4));

        // noiseless, identity SRF, scale 1: both outputs equal the reference
        let ident = DegradationModel::new(1, make_partition_srf(12, 12).unwrap(), f64::INFINITY).unwrap();
        let (lr, msi) = simulate_pair(&scene, &ident, &mut rng).unwrap();
        for (a, b) in lr.data.iter().zip(&scene.data) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(msi.data, scene.data);
    }

    #[test]
    fn simulate_pair_noiseless_matches_per_band_oracle() {
        let scene = synth_scene(24, 24, 6, 3, 16).unwrap();
        let model = DegradationModel::new(4, make_partition_srf(6, 2).unwrap(), f64::INFINITY).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (lr, _) = simulate_pair(&scene, &model, &mut rng).unwrap();

        // independent oracle: extract each band as a plane cube, downsample,
        // compare
        for b in 0..6 {
            let mut plane = vec![0.0; 24 * 24];
            for p in 0..24 * 24 {
                plane[p] = scene.data[p * 6 + b];
            }
            let band_cube = HsiCube::new(24, 24, 1, plane).unwrap();
            let down = bicubic_downsample(&band_cube, 4).unwrap();
            for p in 0..6 * 6 {
                assert!((down.data[p] - lr.data[p * 6 + b]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_commutes_with_spectral_mixing() {
        let scene = synth_scene(32, 32, 10, 4, 18).unwrap();
        let srf = make_partition_srf(10, 3).unwrap();
        let a = bicubic_downsample(&mode3_multiply(&scene, srf.matrix()).unwrap(), 4).unwrap();
        let b = mode3_multiply(&bicubic_downsample(&scene, 4).unwrap(), srf.matrix()).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
