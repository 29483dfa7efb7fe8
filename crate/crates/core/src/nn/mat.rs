/// Dense row-major matrix; rows are channels and columns are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |m| m.cols);
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            assert_eq!(m.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&m.data);
        }
        Mat { rows, cols, data }
    }

    /// Splits rows back into blocks of the given heights.
    pub fn vsplit(&self, heights: &[usize]) -> Vec<Mat> {
        assert_eq!(heights.iter().sum::<usize>(), self.rows);
        let mut out = Vec::with_capacity(heights.len());
        let mut r0 = 0;
        for &h in heights {
            out.push(Mat::from_vec(
                h,
                self.cols,
                self.data[r0 * self.cols..(r0 + h) * self.cols].to_vec(),
            ));
            r0 += h;
        }
        out
    }

    /// Columns `[start, start + len)`.
    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }
}

/// Strided matrix operand: element (i, j) lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

pub struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        View {
            data: &m.data,
            offset: 0,
            rs: m.cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> Self {
        let rs = m.cols;
        ViewMut {
            data: &mut m.data,
            offset: 0,
            rs,
            cs: 1,
        }
    }
}

/// `c = a · b + beta · c` for an `m×k` by `k×n` product.
pub fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len(), "gemm: a out of bounds");
    assert!(b.last_index(k, n) < b.data.len(), "gemm: b out of bounds");
    assert!(
        c.offset + (m - 1) * c.rs + (n - 1) * c.cs < c.data.len(),
        "gemm: c out of bounds"
    );
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.0, 0.0, -2.0]);
        // a · bᵀ : 2x2
        let mut c = Mat::zeros(2, 2);
        gemm(
            2,
            3,
            2,
            View::of(&a),
            View::of(&b).t(),
            0.0,
            ViewMut::of(&mut c),
        );
        let naive = |i: usize, j: usize| (0..3).map(|k| a.at(i, k) * b.at(j, k)).sum::<f64>();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c.at(i, j), naive(i, j));
            }
        }
    }

    #[test]
    fn vstack_vsplit_inverse() {
        let a = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Mat::from_vec(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let s = Mat::vstack(&[&a, &b]);
        let parts = s.vsplit(&[1, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
