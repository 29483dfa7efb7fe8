use rand::Rng;

use super::mat::{gemm, Mat, View, ViewMut};
use super::param::{join, Param, Parameterized};

/// One-dimensional convolution over a `channels × time` matrix.
///
/// Weights are laid out `[out, in, kernel]`. Each kernel tap is applied as a
/// strided GEMM against the zero-padded input, so output column `t` only
/// reads input columns `stride * t + tap * dilation - pad_left`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0 && dilation > 0);
        // Uniform fan-in initialization.
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        Self {
            weight: Param::uniform(&[out_ch, in_ch, kernel], bound, rng),
            bias: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            dilation,
            pad_left,
            pad_right,
        }
    }

    /// Left-padded so that output `t` depends on inputs `<= t` only.
    pub fn causal(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            in_ch,
            out_ch,
            kernel,
            1,
            dilation,
            dilation * (kernel - 1),
            0,
            rng,
        )
    }

    /// Length-preserving, symmetric padding (odd kernels).
    pub fn same(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        Self::new(in_ch, out_ch, kernel, 1, dilation, pad, pad, rng)
    }

    pub fn pointwise(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self::new(in_ch, out_ch, 1, 1, 1, 0, 0, rng)
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        let padded = t_in + self.pad_left + self.pad_right;
        let span = self.dilation * (self.kernel - 1) + 1;
        if padded < span {
            0
        } else {
            (padded - span) / self.stride + 1
        }
    }

    fn padded(&self, x: &Mat) -> Mat {
        if self.pad_left == 0 && self.pad_right == 0 {
            return x.clone();
        }
        let tp = x.cols + self.pad_left + self.pad_right;
        let mut p = Mat::zeros(x.rows, tp);
        for r in 0..x.rows {
            p.row_mut(r)[self.pad_left..self.pad_left + x.cols].copy_from_slice(x.row(r));
        }
        p
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.rows, self.in_ch, "conv input channels");
        let t_out = self.out_len(x.cols);
        let mut y = Mat::zeros(self.out_ch, t_out);
        for (o, b) in self.bias.value.iter().enumerate() {
            y.row_mut(o).iter_mut().for_each(|v| *v = *b);
        }
        if t_out == 0 {
            return y;
        }
        let p = self.padded(x);
        for tap in 0..self.kernel {
            let w = View {
                data: &self.weight.value,
                offset: tap,
                rs: self.in_ch * self.kernel,
                cs: self.kernel,
            };
            let b = View {
                data: &p.data,
                offset: tap * self.dilation,
                rs: p.cols,
                cs: self.stride,
            };
            gemm(
                self.out_ch,
                self.in_ch,
                t_out,
                w,
                b,
                1.0,
                ViewMut::of(&mut y),
            );
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        let t_out = self.out_len(x.cols);
        assert_eq!((dy.rows, dy.cols), (self.out_ch, t_out), "conv grad shape");
        for o in 0..self.out_ch {
            self.bias.grad[o] += dy.row(o).iter().sum::<f64>();
        }
        let p = self.padded(x);
        let mut dp = Mat::zeros(p.rows, p.cols);
        if t_out > 0 {
            for tap in 0..self.kernel {
                let xin = View {
                    data: &p.data,
                    offset: tap * self.dilation,
                    rs: p.cols,
                    cs: self.stride,
                };
                // dW_tap += dY · Xᵀ
                let dw = ViewMut {
                    data: &mut self.weight.grad,
                    offset: tap,
                    rs: self.in_ch * self.kernel,
                    cs: self.kernel,
                };
                gemm(
                    self.out_ch,
                    t_out,
                    self.in_ch,
                    View::of(dy),
                    xin.t(),
                    1.0,
                    dw,
                );
                // dX += W_tapᵀ · dY
                let w = View {
                    data: &self.weight.value,
                    offset: tap,
                    rs: self.in_ch * self.kernel,
                    cs: self.kernel,
                };
                let cols = dp.cols;
                let dxv = ViewMut {
                    data: &mut dp.data,
                    offset: tap * self.dilation,
                    rs: cols,
                    cs: self.stride,
                };
                gemm(
                    self.in_ch,
                    self.out_ch,
                    t_out,
                    w.t(),
                    View::of(dy),
                    1.0,
                    dxv,
                );
            }
        }
        if self.pad_left == 0 && self.pad_right == 0 {
            dp
        } else {
            dp.cols_range(self.pad_left, x.cols)
        }
    }

    /// `W_tap · column + ...` for a single output step given the input
    /// columns each tap reads, oldest tap first. Used by incremental decoding.
    pub fn step(&self, taps: &[&[f64]], out: &mut [f64]) {
        debug_assert_eq!(taps.len(), self.kernel);
        let w = &self.weight.value;
        for (o, y) in out.iter_mut().enumerate() {
            let mut acc = self.bias.value[o];
            let row = &w[o * self.in_ch * self.kernel..(o + 1) * self.in_ch * self.kernel];
            for (i, wk) in row.chunks_exact(self.kernel).enumerate() {
                for (k, col) in taps.iter().enumerate() {
                    acc += wk[k] * col[i];
                }
            }
            *y = acc;
        }
    }
}

impl Parameterized for Conv1d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
