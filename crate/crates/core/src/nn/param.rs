use rand::Rng;

/// A named tensor with an accumulated gradient.
///
/// Values are kept exactly representable in `f32` (see [`Param::round_to_f32`])
/// so that 32-bit checkpoints reproduce the model bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub shape: Vec<usize>,
    /// Buffers such as running statistics are saved but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Self::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p.round_to_f32();
        p
    }

    pub fn buffer(shape: &[usize], v: f64) -> Self {
        let mut p = Self::filled(shape, v);
        p.trainable = false;
        p
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in &mut p.value {
            *v = rng.gen_range(-bound..=bound);
        }
        p.round_to_f32();
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.value {
            *v = *v as f32 as f64;
        }
    }
}

/// Anything that owns parameters. Names are dot-separated paths that stay
/// stable across runs; checkpoints are keyed by them.
pub trait Parameterized {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
