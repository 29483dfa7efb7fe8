use crate::error::{Error, Result};
use crate::nn::Mat;

/// Source position for output column `j` when `n` columns are stretched to
/// `t` with the first and last columns pinned to the ends.
#[inline]
fn source_pos(j: usize, n: usize, t: usize) -> (usize, f64) {
    if n == 1 || t == 1 {
        return (0, 0.0);
    }
    let pos = j as f64 * (n - 1) as f64 / (t - 1) as f64;
    let i = pos.floor() as usize;
    if i >= n - 1 {
        return (n - 1, 0.0);
    }
    (i, pos - i as f64)
}

/// Piecewise-linear stretch of every row of `seq` to exactly `t` columns.
pub fn interpolate_to_length(seq: &Mat, t: usize) -> Result<Mat> {
    interpolate_range(seq, t, 0, t)
}

/// Columns `[start, start + len)` of `interpolate_to_length(seq, t)`,
/// without materializing the rest.
pub fn interpolate_range(seq: &Mat, t: usize, start: usize, len: usize) -> Result<Mat> {
    if seq.cols == 0 || t == 0 {
        return Err(Error::invalid(
            "interpolation needs a nonempty input and target",
        ));
    }
    if start + len > t {
        return Err(Error::invalid("interpolation window exceeds target length"));
    }
    let n = seq.cols;
    let mut out = Mat::zeros(seq.rows, len);
    for (jj, j) in (start..start + len).enumerate() {
        let (i, frac) = source_pos(j, n, t);
        for r in 0..seq.rows {
            let a = seq.at(r, i);
            let v = if frac == 0.0 {
                a
            } else {
                a + frac * (seq.at(r, i + 1) - a)
            };
            *out.at_mut(r, jj) = v;
        }
    }
    Ok(out)
}

/// Adjoint of [`interpolate_range`]: scatters `d_out` back onto the `n`
/// source columns.
pub fn interpolate_range_backward(d_out: &Mat, n: usize, t: usize, start: usize) -> Mat {
    let mut d = Mat::zeros(d_out.rows, n);
    for jj in 0..d_out.cols {
        let (i, frac) = source_pos(start + jj, n, t);
        for r in 0..d_out.rows {
            let g = d_out.at(r, jj);
            *d.at_mut(r, i) += g * (1.0 - frac);
            if frac != 0.0 {
                *d.at_mut(r, i + 1) += g * frac;
            }
        }
    }
    d
}
