//! Separable cubic-kernel resampling used by the spatial degradation operator.
//!
//! The kernel is the Keys cubic with a = -0.5 (Catmull-Rom parameter),
//! sample positions follow the pixel-center convention
//! `x_in = (x_out + 0.5) * ratio - 0.5`, and out-of-range taps clamp to the
//! border. Tap weights are renormalized so each output pixel's weights sum
//! to exactly 1, which keeps constant images constant.

/// Keys cubic kernel, a = -0.5.
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        a * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Precomputed four-tap filter along one axis.
#[derive(Debug, Clone)]
pub struct CubicTaps {
    pub n_in: usize,
    pub n_out: usize,
    /// Clamped source indices, four per output sample.
    pub idx: Vec<[usize; 4]>,
    pub wgt: Vec<[f64; 4]>,
}

impl CubicTaps {
    /// Taps for resampling `n_in` samples to `n_out` with the given
    /// input-per-output step ratio (`s` for downsampling, `1/s` for up).
    pub fn new(n_in: usize, n_out: usize, ratio: f64) -> Self {
        let mut idx = Vec::with_capacity(n_out);
        let mut wgt = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let x = (o as f64 + 0.5) * ratio - 0.5;
            let base = x.floor();
            let f = x - base;
            let base = base as i64;
            let mut ids = [0usize; 4];
            let mut ws = [0f64; 4];
            let mut sum = 0.0;
            for (k, (id, wv)) in ids.iter_mut().zip(ws.iter_mut()).enumerate() {
                let p = base - 1 + k as i64;
                *id = p.clamp(0, n_in as i64 - 1) as usize;
                *wv = cubic_weight(f + 1.0 - k as f64);
                sum += *wv;
            }
            for wv in &mut ws {
                *wv /= sum;
            }
            idx.push(ids);
            wgt.push(ws);
        }
        CubicTaps { n_in, n_out, idx, wgt }
    }

    pub fn downsample(n_in: usize, factor: usize) -> Self {
        Self::new(n_in, n_in / factor, factor as f64)
    }

    pub fn upsample(n_in: usize, factor: usize) -> Self {
        Self::new(n_in, n_in * factor, 1.0 / (factor as f64))
    }
}

/// Filter a band-fastest `rows x cols x lanes` volume along the column axis.
///
/// `lanes` is the number of contiguous values per pixel (spectral bands, or 1
/// for a plain image plane).
pub fn apply_cols(taps: &CubicTaps, input: &[f64], rows: usize, lanes: usize, out: &mut [f64]) {
    debug_assert_eq!(input.len(), rows * taps.n_in * lanes);
    debug_assert_eq!(out.len(), rows * taps.n_out * lanes);
    for r in 0..rows {
        let in_row = &input[r * taps.n_in * lanes..][..taps.n_in * lanes];
        let out_row = &mut out[r * taps.n_out * lanes..][..taps.n_out * lanes];
        for (o, (ids, ws)) in taps.idx.iter().zip(&taps.wgt).enumerate() {
            let dst = &mut out_row[o * lanes..][..lanes];
            dst.fill(0.0);
            for k in 0..4 {
                let src = &in_row[ids[k] * lanes..][..lanes];
                let w = ws[k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Filter along the row axis; each row is `width * lanes` contiguous values.
pub fn apply_rows(taps: &CubicTaps, input: &[f64], row_len: usize, out: &mut [f64]) {
    debug_assert_eq!(input.len(), taps.n_in * row_len);
    debug_assert_eq!(out.len(), taps.n_out * row_len);
    for (o, (ids, ws)) in taps.idx.iter().zip(&taps.wgt).enumerate() {
        let dst = &mut out[o * row_len..][..row_len];
        dst.fill(0.0);
        for k in 0..4 {
            let src = &input[ids[k] * row_len..][..row_len];
            let w = ws[k];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

/// Adjoint of [`apply_cols`]: scatter output-side gradients back to sources.
pub fn adjoint_cols(taps: &CubicTaps, grad_out: &[f64], rows: usize, lanes: usize, grad_in: &mut [f64]) {
    for r in 0..rows {
        let go_row = &grad_out[r * taps.n_out * lanes..][..taps.n_out * lanes];
        let gi_row = &mut grad_in[r * taps.n_in * lanes..][..taps.n_in * lanes];
        for (o, (ids, ws)) in taps.idx.iter().zip(&taps.wgt).enumerate() {
            let src = &go_row[o * lanes..][..lanes];
            for k in 0..4 {
                let w = ws[k];
                let dst_off = ids[k] * lanes;
                for (i, s) in src.iter().enumerate() {
                    gi_row[dst_off + i] += w * s;
                }
            }
        }
    }
}

/// Adjoint of [`apply_rows`].
pub fn adjoint_rows(taps: &CubicTaps, grad_out: &[f64], row_len: usize, grad_in: &mut [f64]) {
    for (o, (ids, ws)) in taps.idx.iter().zip(&taps.wgt).enumerate() {
        let src = &grad_out[o * row_len..][..row_len];
        for k in 0..4 {
            let w = ws[k];
            let dst = &mut grad_in[ids[k] * row_len..][..row_len];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

/// Resample an `h x w x lanes` volume to `oh x ow x lanes` with the given taps.
pub fn resample_2d(
    row_taps: &CubicTaps,
    col_taps: &CubicTaps,
    input: &[f64],
    lanes: usize,
) -> Vec<f64> {
    // Columns first, then rows; the kernel is separable so order is arbitrary.
    let mut tmp = vec![0.0; row_taps.n_in * col_taps.n_out * lanes];
    apply_cols(col_taps, input, row_taps.n_in, lanes, &mut tmp);
    let mut out = vec![0.0; row_taps.n_out * col_taps.n_out * lanes];
    apply_rows(row_taps, &tmp, col_taps.n_out * lanes, &mut out);
    out
}

/// Adjoint of [`resample_2d`] for gradient propagation.
pub fn resample_2d_adjoint(
    row_taps: &CubicTaps,
    col_taps: &CubicTaps,
    grad_out: &[f64],
    lanes: usize,
) -> Vec<f64> {
    let mut tmp = vec![0.0; row_taps.n_in * col_taps.n_out * lanes];
    adjoint_rows(row_taps, grad_out, col_taps.n_out * lanes, &mut tmp);
    let mut grad_in = vec![0.0; row_taps.n_in * col_taps.n_in * lanes];
    adjoint_cols(col_taps, &tmp, row_taps.n_in, lanes, &mut grad_in);
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let taps = CubicTaps::downsample(7, 1);
        let input: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut out = vec![0.0; 7];
        apply_rows(&taps, &input, 1, &mut out);
        for (a, b) in out.iter().zip(&input) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        for (n, f) in [(16, 2), (64, 4), (12, 3)] {
            let taps = CubicTaps::downsample(n, f);
            for ws in &taps.wgt {
                let s: f64 = ws.iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_ramp_exact_at_centers() {
        // The a=-0.5 kernel reproduces affine functions away from borders.
        let (w, s) = (32, 4);
        let input: Vec<f64> = (0..w).map(|i| i as f64 / (w - 1) as f64).collect();
        let taps = CubicTaps::downsample(w, s);
        let mut out = vec![0.0; w / s];
        apply_rows(&taps, &input, 1, &mut out);
        for (o, v) in out.iter().enumerate() {
            let x_in = (o as f64 + 0.5) * s as f64 - 0.5;
            if x_in >= 2.0 && x_in <= (w - 3) as f64 {
                let expect = x_in / (w - 1) as f64;
                assert!((v - expect).abs() < 1e-9, "o={o} got {v} want {expect}");
            }
        }
    }

    #[test]
    fn adjoint_matches_transpose() {
        // <A x, y> == <x, A^T y> for random vectors.
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let taps = CubicTaps::downsample(16, 4);
        let x: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut ax = vec![0.0; 4];
        apply_rows(&taps, &x, 1, &mut ax);
        let mut aty = vec![0.0; 16];
        adjoint_rows(&taps, &y, 1, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
