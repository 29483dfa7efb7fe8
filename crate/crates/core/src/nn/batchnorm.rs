use super::mat::Mat;
use super::param::{join, Param, Parameterized};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel normalization over every (item, step) of a batch.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    channels: usize,
}

/// Values the backward pass needs from a training-mode forward.
pub struct BnCache {
    x_hat: Vec<Mat>,
    inv_std: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], 0.0),
            running_var: Param::buffer(&[channels], 1.0),
            channels,
        }
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, xs: &[Mat]) -> (Vec<Mat>, BnCache) {
        let c = self.channels;
        let n: usize = xs.iter().map(|x| x.cols).sum();
        assert!(n > 0, "batch norm over an empty batch");
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for x in xs {
            for ch in 0..c {
                mean[ch] += x.row(ch).iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for x in xs {
            for ch in 0..c {
                var[ch] += x
                    .row(ch)
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();

        let mut x_hat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xh = x.clone();
            let mut y = x.clone();
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (h, out) in xh.row_mut(ch).iter_mut().zip(y.row_mut(ch).iter_mut()) {
                    *h = (*h - mean[ch]) * inv_std[ch];
                    *out = g * *h + b;
                }
            }
            x_hat.push(xh);
            ys.push(y);
        }

        let unbiased = if n > 1 {
            n as f64 / (n - 1) as f64
        } else {
            1.0
        };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * var[ch] * unbiased;
        }
        self.running_mean.round_to_f32();
        self.running_var.round_to_f32();
        (ys, BnCache { x_hat, inv_std })
    }

    /// Normalizes with the running estimates.
    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let mut y = x.clone();
        for ch in 0..self.channels {
            let inv = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
            let (m, g, b) = (
                self.running_mean.value[ch],
                self.gamma.value[ch],
                self.beta.value[ch],
            );
            for v in y.row_mut(ch) {
                *v = g * (*v - m) * inv + b;
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dys: &[Mat]) -> Vec<Mat> {
        let c = self.channels;
        let n: usize = dys.iter().map(|d| d.cols).sum();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xh = vec![0.0; c];
        for (dy, xh) in dys.iter().zip(&cache.x_hat) {
            for ch in 0..c {
                for (d, h) in dy.row(ch).iter().zip(xh.row(ch)) {
                    sum_dy[ch] += d;
                    sum_dy_xh[ch] += d * h;
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xh[ch];
        }
        dys.iter()
            .zip(&cache.x_hat)
            .map(|(dy, xh)| {
                let mut dx = dy.clone();
                for ch in 0..c {
                    let k = self.gamma.value[ch] * cache.inv_std[ch] / n as f64;
                    let (sd, sdx) = (sum_dy[ch], sum_dy_xh[ch]);
                    for (v, h) in dx.row_mut(ch).iter_mut().zip(xh.row(ch)) {
                        *v = k * (n as f64 * *v - sd - h * sdx);
                    }
                }
                dx
            })
            .collect()
    }
}

impl Parameterized for BatchNorm1d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn train_mode_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs: Vec<Mat> = (0..3)
            .map(|_| Mat::from_vec(2, 5, (0..10).map(|_| rng.gen_range(-3.0..5.0)).collect()))
            .collect();
        let mut bn = BatchNorm1d::new(2);
        let (ys, _) = bn.forward_train(&xs);
        for ch in 0..2 {
            let vals: Vec<f64> = ys.iter().flat_map(|y| y.row(ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Mat> = (0..2)
            .map(|_| Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let rs: Vec<Mat> = (0..2)
            .map(|_| Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let mut bn = BatchNorm1d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let loss = |bn: &BatchNorm1d, xs: &[Mat]| {
            let mut b = bn.clone();
            let (ys, _) = b.forward_train(xs);
            ys.iter()
                .zip(&rs)
                .map(|(y, r)| y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let mut b = bn.clone();
        let (_, cache) = b.forward_train(&xs);
        let dxs = b.backward(&cache, &rs);
        let h = 1e-6;
        for item in 0..2 {
            for idx in 0..12 {
                let mut p = xs.clone();
                p[item].data[idx] += h;
                let mut m = xs.clone();
                m[item].data[idx] -= h;
                let fd = (loss(&bn, &p) - loss(&bn, &m)) / (2.0 * h);
                assert!(
                    (fd - dxs[item].data[idx]).abs() < 1e-6,
                    "{fd} vs {}",
                    dxs[item].data[idx]
                );
            }
        }
        for ch in 0..3 {
            let mut p = bn.clone();
            p.gamma.value[ch] += h;
            let mut m = bn.clone();
            m.gamma.value[ch] -= h;
            let fd = (loss(&p, &xs) - loss(&m, &xs)) / (2.0 * h);
            assert!((fd - b.gamma.grad[ch]).abs() < 1e-6);
        }
    }
}
