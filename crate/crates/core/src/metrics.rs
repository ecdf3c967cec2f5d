//! Reference-based quality metrics: PSNR, spectral angle, ERGAS, SSIM, and
//! the per-pixel error map used for figures.

use crate::datapipe::HsiCube;
use crate::error::{Error, Result};

/// Scalar metrics of one fused result against the reference.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub sam_deg: f64,
    pub ergas: f64,
    pub ssim: f64,
    pub per_band_psnr: Vec<f64>,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "method,psnr,sam,ergas,ssim,seconds"
    }

    pub fn csv_row(&self, method: &str, seconds: f64) -> String {
        format!(
            "{method},{:.4},{:.4},{:.4},{:.6},{:.2}",
            self.psnr_db, self.sam_deg, self.ergas, self.ssim, seconds
        )
    }
}

/// All four metrics at once.
pub fn evaluate(reference: &HsiCube, estimate: &HsiCube, scale: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(reference, estimate)?,
        sam_deg: sam(reference, estimate)?,
        ergas: ergas(reference, estimate, scale)?,
        ssim: ssim(reference, estimate)?,
        per_band_psnr: per_band_psnr(reference, estimate)?,
    })
}

fn check_shapes(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    if (a.rows, a.cols, a.bands) != (b.rows, b.cols, b.bands) {
        return Err(Error::Dimension {
            op,
            detail: format!(
                "{}x{}x{} vs {}x{}x{}",
                a.rows, a.cols, a.bands, b.rows, b.cols, b.bands
            ),
        });
    }
    Ok(())
}

/// Per-band PSNR against peak 1.0; identical bands give `f64::INFINITY`.
pub fn per_band_psnr(reference: &HsiCube, estimate: &HsiCube) -> Result<Vec<f64>> {
    check_shapes("psnr", reference, estimate)?;
    let n_pix = reference.num_pixels() as f64;
    let bands = reference.bands;
    let mut mse = vec![0.0; bands];
    for (r, e) in reference.data.chunks(bands).zip(estimate.data.chunks(bands)) {
        for b in 0..bands {
            let d = r[b] - e[b];
            mse[b] += d * d;
        }
    }
    Ok(mse
        .into_iter()
        .map(|m| {
            let m = m / n_pix;
            if m == 0.0 {
                f64::INFINITY
            } else {
                10.0 * (1.0 / m).log10()
            }
        })
        .collect())
}

/// Mean over bands of the per-band PSNR in dB.
pub fn psnr(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    let per_band = per_band_psnr(reference, estimate)?;
    Ok(per_band.iter().sum::<f64>() / per_band.len() as f64)
}

/// Mean spectral angle in degrees over pixels; zero spectra are excluded.
pub fn sam(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    check_shapes("sam", reference, estimate)?;
    let bands = reference.bands;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, e) in reference.data.chunks(bands).zip(estimate.data.chunks(bands)) {
        let (mut dot, mut nr, mut ne) = (0.0, 0.0, 0.0);
        for (a, b) in r.iter().zip(e) {
            dot += a * b;
            nr += a * a;
            ne += b * b;
        }
        if nr == 0.0 || ne == 0.0 {
            continue;
        }
        if r == e {
            // angle is zero by definition; acos near 1 would add roundoff
            count += 1;
            continue;
        }
        let cos = (dot / (nr.sqrt() * ne.sqrt())).clamp(-1.0, 1.0);
        total += cos.acos();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("sam: every pixel spectrum is zero".into()));
    }
    Ok(total / count as f64 * 180.0 / std::f64::consts::PI)
}

/// Scale-normalized band-relative RMSE; errors on a zero-mean band.
pub fn ergas(reference: &HsiCube, estimate: &HsiCube, scale: usize) -> Result<f64> {
    check_shapes("ergas", reference, estimate)?;
    let bands = reference.bands;
    let n_pix = reference.num_pixels() as f64;
    let mut acc = 0.0;
    for b in 0..bands {
        let mut mse = 0.0;
        let mut mean = 0.0;
        for p in 0..reference.num_pixels() {
            let r = reference.data[p * bands + b];
            let e = estimate.data[p * bands + b];
            mse += (r - e) * (r - e);
            mean += r;
        }
        mse /= n_pix;
        mean /= n_pix;
        if mean == 0.0 {
            return Err(Error::UndefinedMetric(format!("ergas: band {b} of reference has zero mean")));
        }
        acc += mse / (mean * mean);
    }
    Ok(100.0 / scale as f64 * (acc / bands as f64).sqrt())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable weighted filtering over valid positions only.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // rows first
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, wv) in win.iter().enumerate() {
                acc += wv * plane[r * w + c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, wv) in win.iter().enumerate() {
                acc += wv * tmp[(r + k) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean windowed structural similarity (11x11 Gaussian window, peak 1),
/// averaged per band over valid window positions.
pub fn ssim(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    check_shapes("ssim", reference, estimate)?;
    let (h, w, bands) = (reference.rows, reference.cols, reference.bands);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim: image {h}x{w} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_window();
    let n_pix = reference.num_pixels();
    let mut total = 0.0;
    let mut x = vec![0.0; n_pix];
    let mut y = vec![0.0; n_pix];
    let mut xx = vec![0.0; n_pix];
    let mut yy = vec![0.0; n_pix];
    let mut xy = vec![0.0; n_pix];
    for b in 0..bands {
        for p in 0..n_pix {
            let xv = reference.data[p * bands + b];
            let yv = estimate.data[p * bands + b];
            x[p] = xv;
            y[p] = yv;
            xx[p] = xv * xv;
            yy[p] = yv * yv;
            xy[p] = xv * yv;
        }
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let mxx = filter_valid(&xx, h, w, &win);
        let myy = filter_valid(&yy, h, w, &win);
        let mxy = filter_valid(&xy, h, w, &win);
        let mut band_sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            band_sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += band_sum / mx.len() as f64;
    }
    Ok(total / bands as f64)
}

/// Per-pixel root-mean-square error across bands, plus its min-max
/// normalization to 8-bit grayscale.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub rows: usize,
    pub cols: usize,
    pub rmse: Vec<f64>,
    pub gray: Vec<u8>,
}

pub fn error_map(reference: &HsiCube, estimate: &HsiCube) -> Result<ErrorMap> {
    check_shapes("error_map", reference, estimate)?;
    let bands = reference.bands;
    let rmse: Vec<f64> = reference
        .data
        .chunks(bands)
        .zip(estimate.data.chunks(bands))
        .map(|(r, e)| {
            let s: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            (s / bands as f64).sqrt()
        })
        .collect();
    let max = rmse.iter().cloned().fold(0.0, f64::max);
    let min = rmse.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = max - min;
    let gray = rmse
        .iter()
        .map(|&v| {
            if span == 0.0 {
                0
            } else {
                ((v - min) / span * 255.0).round() as u8
            }
        })
        .collect();
    Ok(ErrorMap { rows: reference.rows, cols: reference.cols, rmse, gray })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::synth_scene;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn offset(cube: &HsiCube, d: f64) -> HsiCube {
        HsiCube::new(cube.rows, cube.cols, cube.bands, cube.data.iter().map(|v| v + d).collect())
            .unwrap()
    }

    #[test]
    fn psnr_fixed_points_and_offset() {
        let cube = synth_scene(16, 16, 4, 2, 1).unwrap();
        assert_eq!(psnr(&cube, &cube).unwrap(), f64::INFINITY);
        // constant offset 0.1: mse = 0.01 in every band, so 20 dB
        let est = offset(&cube, 0.1);
        assert!((psnr(&cube, &est).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_per_band_oracle() {
        let a = synth_scene(12, 10, 5, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = HsiCube::new(
            12,
            10,
            5,
            a.data.iter().map(|v| v + 0.01 * (rng.gen::<f64>() - 0.5)).collect(),
        )
        .unwrap();
        let got = psnr(&a, &b).unwrap();
        // oracle: direct per-band loops
        let mut acc = 0.0;
        for band in 0..5 {
            let mut mse = 0.0;
            for p in 0..120 {
                let d = a.data[p * 5 + band] - b.data[p * 5 + band];
                mse += d * d;
            }
            mse /= 120.0;
            acc += 10.0 * (1.0 / mse).log10();
        }
        assert!((got - acc / 5.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_symmetric() {
        let a = synth_scene(12, 12, 3, 2, 4).unwrap();
        let b = offset(&a, 0.05);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn sam_fixed_points() {
        let cube = synth_scene(8, 8, 6, 3, 5).unwrap();
        assert_eq!(sam(&cube, &cube).unwrap(), 0.0);
        // scale invariance
        let doubled =
            HsiCube::new(8, 8, 6, cube.data.iter().map(|v| v * 2.0).collect()).unwrap();
        assert!(sam(&cube, &doubled).unwrap() < 1e-6);
        // orthogonal spectra everywhere
        let mut r = HsiCube::zeros(4, 4, 2);
        let mut e = HsiCube::zeros(4, 4, 2);
        for p in 0..16 {
            r.data[p * 2] = 1.0;
            e.data[p * 2 + 1] = 1.0;
        }
        assert!((sam(&r, &e).unwrap() - 90.0).abs() < 1e-9);
        // all-zero reference is undefined
        let z = HsiCube::zeros(4, 4, 2);
        assert!(matches!(sam(&z, &z), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ergas_fixed_points_and_scale() {
        let cube = synth_scene(16, 16, 5, 3, 6).unwrap();
        assert_eq!(ergas(&cube, &cube, 4).unwrap(), 0.0);

        // est = 1.01 * ref: direct formula oracle
        let est = HsiCube::new(16, 16, 5, cube.data.iter().map(|v| v * 1.01).collect()).unwrap();
        let got = ergas(&cube, &est, 4).unwrap();
        let bands = 5;
        let n = 256.0;
        let mut acc = 0.0;
        for b in 0..bands {
            let mut mse = 0.0;
            let mut mean = 0.0;
            for p in 0..256 {
                let r = cube.data[p * bands + b];
                mse += (0.01 * r) * (0.01 * r);
                mean += r;
            }
            acc += (mse / n) / (mean / n * mean / n);
        }
        let want = 100.0 / 4.0 * (acc / bands as f64).sqrt();
        assert!((got - want).abs() < 1e-12);

        // doubling the scale halves the value
        let e4 = ergas(&cube, &est, 4).unwrap();
        let e8 = ergas(&cube, &est, 8).unwrap();
        assert!((e4 - 2.0 * e8).abs() < 1e-12);

        // not symmetric: normalizes by the reference
        let a = offset(&cube, 0.3);
        assert_ne!(ergas(&cube, &a, 4).unwrap(), ergas(&a, &cube, 4).unwrap());
    }

    #[test]
    fn ssim_fixed_points() {
        let cube = synth_scene(16, 16, 2, 2, 7).unwrap();
        assert_eq!(ssim(&cube, &cube).unwrap(), 1.0);
        // inverted structured band is strictly below 1
        let inv = HsiCube::new(16, 16, 2, cube.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&cube, &inv).unwrap() < 1.0);
        // too small for the window
        let small = HsiCube::zeros(8, 8, 1);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let a = synth_scene(16, 16, 2, 2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = HsiCube::new(
            16,
            16,
            2,
            a.data.iter().map(|v| (v + 0.05 * rng.gen::<f64>()).clamp(0.0, 1.0)).collect(),
        )
        .unwrap();
        let got = ssim(&a, &b).unwrap();

        // oracle: direct per-window double loop, no separable shortcut
        let win = gaussian_window();
        let mut w2 = vec![0.0; 121];
        for i in 0..11 {
            for j in 0..11 {
                w2[i * 11 + j] = win[i] * win[j];
            }
        }
        let mut total = 0.0;
        for band in 0..2 {
            let mut band_sum = 0.0;
            let mut count = 0;
            for r0 in 0..6 {
                for c0 in 0..6 {
                    let (mut ux, mut uy) = (0.0, 0.0);
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let x = a.data[((r0 + i) * 16 + c0 + j) * 2 + band];
                            let y = b.data[((r0 + i) * 16 + c0 + j) * 2 + band];
                            let w = w2[i * 11 + j];
                            ux += w * x;
                            uy += w * y;
                            sxx += w * x * x;
                            syy += w * y * y;
                            sxy += w * x * y;
                        }
                    }
                    let vx = sxx - ux * ux;
                    let vy = syy - uy * uy;
                    let cxy = sxy - ux * uy;
                    band_sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
                    count += 1;
                }
            }
            total += band_sum / count as f64;
        }
        let want = total / 2.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn error_map_locality_and_argmax() {
        let cube = synth_scene(10, 10, 3, 2, 10).unwrap();
        let map = error_map(&cube, &cube).unwrap();
        assert!(map.rmse.iter().all(|&v| v == 0.0));
        assert!(map.gray.iter().all(|&v| v == 0));

        // single wrong pixel: exactly one nonzero entry before normalization
        let mut est = cube.clone();
        est.data[(3 * 10 + 7) * 3 + 1] += 0.5;
        let map = error_map(&cube, &est).unwrap();
        let nonzero: Vec<usize> =
            map.rmse.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![3 * 10 + 7]);

        // the argmax of rmse maps to gray 255
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est2 = HsiCube::new(
            10,
            10,
            3,
            cube.data.iter().map(|v| v + 0.1 * rng.gen::<f64>()).collect(),
        )
        .unwrap();
        let map = error_map(&cube, &est2).unwrap();
        let argmax = map
            .rmse
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(map.gray[argmax], 255);
    }

    #[test]
    fn permutation_equivariance() {
        // identical spatial permutations of both cubes leave PSNR, SAM and
        // ERGAS unchanged
        let a = synth_scene(9, 9, 4, 3, 12).unwrap();
        let b = offset(&a, 0.07);
        let mut perm: Vec<usize> = (0..81).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        perm.shuffle(&mut rng);
        let apply = |c: &HsiCube| {
            let mut out = HsiCube::zeros(9, 9, 4);
            for (dst, &src) in perm.iter().enumerate() {
                for band in 0..4 {
                    out.data[dst * 4 + band] = c.data[src * 4 + band];
                }
            }
            out
        };
        let (pa, pb) = (apply(&a), apply(&b));
        assert!((psnr(&a, &b).unwrap() - psnr(&pa, &pb).unwrap()).abs() < 1e-12);
        assert!((sam(&a, &b).unwrap() - sam(&pa, &pb).unwrap()).abs() < 1e-12);
        assert!((ergas(&a, &b, 4).unwrap() - ergas(&pa, &pb, 4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn noise_monotonically_degrades_psnr() {
        let cube = synth_scene(32, 32, 8, 4, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut last = f64::INFINITY;
        let mut sigma = 1e-3;
        for _ in 0..10 {
            let noisy = HsiCube::new(
                32,
                32,
                8,
                cube.data
                    .iter()
                    .map(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&cube, &noisy).unwrap();
            assert!(p < last, "psnr {p} did not drop below {last} at sigma {sigma}");
            last = p;
            sigma *= 1.8;
        }
    }
}
