use super::param::Param;

/// Adaptive moment estimation with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, clip_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to the trainable entries of `params` (which must be
    /// passed in the same order on every call) and returns the pre-clip
    /// global gradient norm.
    pub fn update(&mut self, params: &mut [(String, &mut Param)]) -> f64 {
        if self.m.is_empty() {
            for (_, p) in params.iter() {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter set changed between steps"
        );

        let norm = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.round_to_f32();
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::filled(&[2], 3.0);
        let mut opt = Adam::new(0.05, None);
        for _ in 0..2000 {
            p.zero_grad();
            for j in 0..2 {
                p.grad[j] = 2.0 * (p.value[j] - 1.0);
            }
            opt.update(&mut [("p".into(), &mut p)]);
        }
        assert!(p.value.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn zero_gradient_entries_do_not_move_on_first_step() {
        let mut p = Param::filled(&[3], 0.5);
        p.grad = vec![0.0, 1.0, 0.0];
        Adam::new(0.1, Some(5.0)).update(&mut [("p".into(), &mut p)]);
        assert_eq!(p.value[0], 0.5);
        assert_eq!(p.value[2], 0.5);
        assert!(p.value[1] < 0.5);
    }

    #[test]
    fn buffers_are_left_alone() {
        let mut b = Param::buffer(&[1], 2.0);
        b.grad = vec![10.0];
        Adam::new(0.1, None).update(&mut [("b".into(), &mut b)]);
        assert_eq!(b.value[0], 2.0);
    }
}
