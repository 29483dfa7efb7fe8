use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::interp::{interpolate_range, interpolate_range_backward};
use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, sigmoid, Conv1d, Mat, Param, Parameterized};
use crate::signal::{MuLawSequence, QUANT_LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub n_layers: usize,
    /// Residual channels `C`.
    pub channels: usize,
    pub skip_channels: usize,
    /// Layer `l` uses dilation `dilation_cycle[l % len]`.
    pub dilation_cycle: Vec<usize>,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            n_layers: 30,
            channels: 64,
            skip_channels: 64,
            dilation_cycle: (0..10).map(|i| 1 << i).collect(),
        }
    }
}

impl DecoderSpec {
    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_cycle[layer % self.dilation_cycle.len()]
    }

    /// Number of past input samples that can influence one output step
    /// (the two-tap input convolution plus one extra tap per layer).
    pub fn receptive_field(&self) -> usize {
        2 + (0..self.n_layers).map(|l| self.dilation(l)).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.channels == 0 || self.skip_channels == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.dilation_cycle.is_empty() || self.dilation_cycle.contains(&0) {
            return Err(Error::Config(
                "decoder dilation cycle must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Widths of the conditioning streams a decoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondDims {
    pub content: usize,
    pub pitch: usize,
    pub loudness: usize,
    pub singer: usize,
    pub low_res: bool,
}

/// A conditioning sequence whose linear stretch to `total` steps covers the
/// decoder's target window `[start, start + T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondStream {
    /// `[dim, n]`.
    pub seq: Mat,
    pub total: usize,
    pub start: usize,
}

impl CondStream {
    pub fn whole(seq: Mat, t: usize) -> Self {
        Self {
            seq,
            total: t,
            start: 0,
        }
    }

    pub fn window(seq: Mat, total: usize, start: usize) -> Self {
        Self { seq, total, start }
    }

    pub fn zeroed(&self) -> Self {
        Self {
            seq: Mat::zeros(self.seq.rows, self.seq.cols),
            ..*self
        }
    }

    /// The stream as it enters the decoder: interpolated to the window.
    pub fn interpolated(&self, len: usize) -> Result<Mat> {
        interpolate_range(&self.seq, self.total, self.start, len)
    }

    fn check(&self, what: &'static str, dim: usize, len: usize) -> Result<()> {
        if self.seq.rows != dim {
            return Err(Error::Shape {
                what,
                expected: dim,
                actual: self.seq.rows,
            });
        }
        if self.seq.cols == 0 || self.start + len > self.total {
            return Err(Error::invalid(format!(
                "{what} conditioning spans {} steps, but the decoder needs steps {}..{}",
                self.total,
                self.start,
                self.start + len
            )));
        }
        Ok(())
    }
}

/// Everything the decoder is conditioned on besides its own past output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub content: CondStream,
    pub pitch: CondStream,
    pub loudness: CondStream,
    pub singer: Vec<f64>,
    /// Low-rate audio already resampled to the decoder's rate (`[1, n]`).
    pub low_res: Option<CondStream>,
}

/// Gradients with respect to each conditioning stream's native sequence.
#[derive(Debug, Clone)]
pub struct CondGrads {
    pub content: Mat,
    pub pitch: Mat,
    pub loudness: Mat,
    pub singer: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Argmax,
    Sample,
}

impl std::str::FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(Self::Argmax),
            "sample" => Ok(Self::Sample),
            other => Err(Error::invalid(format!(
                "unknown generation mode {other:?} (argmax|sample)"
            ))),
        }
    }
}

/// Companded-domain value fed back to the decoder for a past code.
pub fn code_input_value(code: u8) -> f64 {
    (code as f64 + 0.5) * 2.0 / QUANT_LEVELS as f64 - 1.0
}

/// Autoregressive gated dilated-convolution decoder over 256 μ-law codes.
///
/// Conditioning streams are projected to every layer's gate inputs at their
/// native rate and then stretched to the target length; projection and linear
/// interpolation commute, so this equals projecting the stretched streams.
#[derive(Debug, Clone)]
pub struct WaveNetDecoder {
    pub spec: DecoderSpec,
    pub dims: CondDims,
    input: Conv1d,
    cond_content: Conv1d,
    cond_pitch: Conv1d,
    cond_loudness: Conv1d,
    cond_singer: Conv1d,
    cond_low_res: Option<Conv1d>,
    dilated: Vec<Conv1d>,
    outputs: Vec<Conv1d>,
    post1: Conv1d,
    post2: Conv1d,
}

pub struct DecoderCache {
    x_in: Mat,
    h: Vec<Mat>,
    tanh: Vec<Mat>,
    gate: Vec<Mat>,
    g: Vec<Mat>,
    r1: Mat,
    r2: Mat,
}

impl WaveNetDecoder {
    pub fn new(spec: DecoderSpec, dims: CondDims, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (c, s, l) = (spec.channels, spec.skip_channels, spec.n_layers);
        let width = 2 * c * l;
        let proj = |d: usize, rng: &mut _| Conv1d::pointwise(d.max(1), width, rng);
        let input = Conv1d::causal(1, c, 2, 1, rng);
        let cond_content = proj(dims.content, rng);
        let cond_pitch = proj(dims.pitch, rng);
        let cond_loudness = proj(dims.loudness, rng);
        let cond_singer = proj(dims.singer, rng);
        let cond_low_res = dims.low_res.then(|| proj(1, rng));
        let mut dilated = Vec::with_capacity(l);
        let mut outputs = Vec::with_capacity(l);
        for layer in 0..l {
            dilated.push(Conv1d::causal(c, 2 * c, 2, spec.dilation(layer), rng));
            outputs.push(Conv1d::pointwise(c, c + s, rng));
        }
        let post1 = Conv1d::pointwise(s, s, rng);
        let post2 = Conv1d::pointwise(s, QUANT_LEVELS, rng);
        Ok(Self {
            spec,
            dims,
            input,
            cond_content,
            cond_pitch,
            cond_loudness,
            cond_singer,
            cond_low_res,
            dilated,
            outputs,
            post1,
            post2,
        })
    }

    pub fn receptive_field(&self) -> usize {
        self.spec.receptive_field()
    }

    fn check_bundle(&self, cond: &ConditioningBundle, len: usize) -> Result<()> {
        cond.content.check("content", self.dims.content, len)?;
        cond.pitch.check("pitch", self.dims.pitch, len)?;
        cond.loudness.check("loudness", self.dims.loudness, len)?;
        if cond.singer.len() != self.dims.singer {
            return Err(Error::Shape {
                what: "singer embedding",
                expected: self.dims.singer,
                actual: cond.singer.len(),
            });
        }
        match (&cond.low_res, self.dims.low_res) {
            (Some(s), true) => s.check("low-resolution audio", 1, len),
            (None, false) => Ok(()),
            (Some(_), false) => Err(Error::invalid("this decoder takes no low-resolution audio")),
            (None, true) => Err(Error::invalid("this decoder needs low-resolution audio")),
        }
    }

    /// Per-layer gate conditioning, `[2·C·L, len]`.
    pub fn project_conditioning(&self, cond: &ConditioningBundle, len: usize) -> Result<Mat> {
        self.check_bundle(cond, len)?;
        let mut out = Mat::zeros(2 * self.spec.channels * self.spec.n_layers, len);
        let mut add_stream = |conv: &Conv1d, s: &CondStream| -> Result<()> {
            let p = conv.forward(&s.seq);
            out.add_assign(&interpolate_range(&p, s.total, s.start, len)?);
            Ok(())
        };
        add_stream(&self.cond_content, &cond.content)?;
        add_stream(&self.cond_pitch, &cond.pitch)?;
        add_stream(&self.cond_loudness, &cond.loudness)?;
        if let (Some(conv), Some(s)) = (&self.cond_low_res, &cond.low_res) {
            add_stream(conv, s)?;
        }
        let sp = self
            .cond_singer
            .forward(&Mat::from_vec(self.dims.singer, 1, cond.singer.clone()));
        for (r, &v) in sp.data.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x += v);
        }
        Ok(out)
    }

    fn project_conditioning_backward(&mut self, cond: &ConditioningBundle, d: &Mat) -> CondGrads {
        fn stream(conv: &mut Conv1d, s: &CondStream, d: &Mat) -> Mat {
            let dp = interpolate_range_backward(d, s.seq.cols, s.total, s.start);
            conv.backward(&s.seq, &dp)
        }
        let content = stream(&mut self.cond_content, &cond.content, d);
        let pitch = stream(&mut self.cond_pitch, &cond.pitch, d);
        let loudness = stream(&mut self.cond_loudness, &cond.loudness, d);
        if let (Some(conv), Some(s)) = (&mut self.cond_low_res, &cond.low_res) {
            stream(conv, s, d);
        }
        let summed = Mat::from_vec(
            d.rows,
            1,
            (0..d.rows).map(|r| d.row(r).iter().sum()).collect(),
        );
        let singer = self
            .cond_singer
            .backward(
                &Mat::from_vec(self.dims.singer, 1, cond.singer.clone()),
                &summed,
            )
            .data;
        CondGrads {
            content,
            pitch,
            loudness,
            singer,
        }
    }

    /// Teacher-forcing inputs: step `t` sees the value of code `t − 1`
    /// (zero before the first code).
    pub fn teacher_inputs(codes: &[u8]) -> Mat {
        let mut x = Mat::zeros(1, codes.len());
        for t in 1..codes.len() {
            x.data[t] = code_input_value(codes[t - 1]);
        }
        x
    }

    /// Perturbs teacher-forcing inputs with Gaussian noise so the decoder
    /// cannot rely on its own history alone.
    pub fn add_input_noise(x: &mut Mat, noise_std: f64, rng: &mut impl Rng) {
        if noise_std > 0.0 {
            let n = Normal::new(0.0, noise_std).expect("finite noise level");
            x.data.iter_mut().for_each(|v| *v += n.sample(rng));
        }
    }

    /// Logits `[256, T]` for teacher-forced inputs and projected conditioning.
    pub fn forward(&self, x_in: &Mat, cond_proj: &Mat) -> (Mat, DecoderCache) {
        let (c, s, t) = (self.spec.channels, self.spec.skip_channels, x_in.cols);
        let mut h = self.input.forward(x_in);
        let mut skip = Mat::zeros(s, t);
        let n = self.spec.n_layers;
        let (mut hs, mut tanhs, mut gates, mut gs) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for l in 0..n {
            let mut a = self.dilated[l].forward(&h);
            let cond = &cond_proj.data[l * 2 * c * t..(l + 1) * 2 * c * t];
            a.data.iter_mut().zip(cond).for_each(|(x, y)| *x += y);
            let mut th = Mat::zeros(c, t);
            let mut gate = Mat::zeros(c, t);
            let mut g = Mat::zeros(c, t);
            for i in 0..c * t {
                th.data[i] = a.data[i].tanh();
                gate.data[i] = sigmoid(a.data[i + c * t]);
                g.data[i] = th.data[i] * gate.data[i];
            }
            let o = self.outputs[l].forward(&g);
            let mut h_next = h.clone();
            h_next
                .data
                .iter_mut()
                .zip(&o.data[..c * t])
                .for_each(|(x, y)| *x += y);
            skip.data
                .iter_mut()
                .zip(&o.data[c * t..])
                .for_each(|(x, y)| *x += y);
            hs.push(std::mem::replace(&mut h, h_next));
            tanhs.push(th);
            gates.push(gate);
            gs.push(g);
        }
        let r1 = relu(&skip);
        let r2 = relu(&self.post1.forward(&r1));
        let logits = self.post2.forward(&r2);
        let cache = DecoderCache {
            x_in: x_in.clone(),
            h: hs,
            tanh: tanhs,
            gate: gates,
            g: gs,
            r1,
            r2,
        };
        (logits, cache)
    }

    /// Accumulates parameter gradients for upstream `d_logits` and returns
    /// the gradient with respect to the projected conditioning.
    pub fn backward(&mut self, cache: &DecoderCache, d_logits: &Mat) -> Mat {
        let (c, s, t) = (self.spec.channels, self.spec.skip_channels, d_logits.cols);
        let n = self.spec.n_layers;
        let d_r2 = self.post2.backward(&cache.r2, d_logits);
        let d_o1 = relu_backward(&cache.r2, &d_r2);
        let d_r1 = self.post1.backward(&cache.r1, &d_o1);
        let d_skip = relu_backward(&cache.r1, &d_r1);
        let mut d_cond = Mat::zeros(2 * c * n, t);
        let mut dh = Mat::zeros(c, t);
        let mut d_o = Mat::zeros(c + s, t);
        d_o.data[c * t..].copy_from_slice(&d_skip.data);
        for l in (0..n).rev() {
            d_o.data[..c * t].copy_from_slice(&dh.data);
            let d_g = self.outputs[l].backward(&cache.g[l], &d_o);
            let mut d_a = Mat::zeros(2 * c, t);
            let (th, gate) = (&cache.tanh[l], &cache.gate[l]);
            for i in 0..c * t {
                let (tv, sv, dg) = (th.data[i], gate.data[i], d_g.data[i]);
                d_a.data[i] = dg * sv * (1.0 - tv * tv);
                d_a.data[i + c * t] = dg * tv * sv * (1.0 - sv);
            }
            d_cond.data[l * 2 * c * t..(l + 1) * 2 * c * t].copy_from_slice(&d_a.data);
            let d_h_in = self.dilated[l].backward(&cache.h[l], &d_a);
            dh.add_assign(&d_h_in);
        }
        self.input.backward(&cache.x_in, &dh);
        d_cond
    }

    /// Mean cross-entropy of `target` under teacher forcing with inputs
    /// `x_in`; parameter gradients of `weight · loss` are accumulated and the
    /// conditioning gradients returned.
    pub fn loss_and_backward(
        &mut self,
        cond: &ConditioningBundle,
        x_in: &Mat,
        target: &[u8],
        weight: f64,
    ) -> Result<(f64, CondGrads)> {
        if x_in.cols != target.len() || x_in.rows != 1 {
            return Err(Error::invalid(
                "teacher inputs must be one row matching the target length",
            ));
        }
        let proj = self.project_conditioning(cond, target.len())?;
        let (logits, cache) = self.forward(x_in, &proj);
        let mut lp = log_softmax_columns(&logits);
        let t = target.len();
        let mut loss = 0.0;
        for (j, &code) in target.iter().enumerate() {
            loss -= lp.at(code as usize, j);
        }
        loss /= t as f64;
        // d(mean CE)/d logits = (softmax − onehot) / T
        let scale = weight / t as f64;
        lp.data.iter_mut().for_each(|v| *v = v.exp() * scale);
        for (j, &code) in target.iter().enumerate() {
            *lp.at_mut(code as usize, j) -= scale;
        }
        let d_cond = self.backward(&cache, &lp);
        Ok((loss, self.project_conditioning_backward(cond, &d_cond)))
    }

    /// Mean teacher-forced cross-entropy without gradients.
    pub fn loss(&self, cond: &ConditioningBundle, x_in: &Mat, target: &[u8]) -> Result<f64> {
        if x_in.cols != target.len() || x_in.rows != 1 {
            return Err(Error::invalid(
                "teacher inputs must be one row matching the target length",
            ));
        }
        let proj = self.project_conditioning(cond, target.len())?;
        let lp = log_softmax_columns(&self.forward(&x_in, &proj).0);
        let total: f64 = target
            .iter()
            .enumerate()
            .map(|(j, &c)| -lp.at(c as usize, j))
            .sum();
        Ok(total / target.len() as f64)
    }

    /// Per-step log-probabilities `[256, T]` of the next code under teacher
    /// forcing with the (noise-free) `target` history.
    pub fn log_distribution(
        &self,
        cond: &ConditioningBundle,
        target: &MuLawSequence,
    ) -> Result<Mat> {
        let proj = self.project_conditioning(cond, target.len())?;
        let x_in = Self::teacher_inputs(target.codes());
        Ok(log_softmax_columns(&self.forward(&x_in, &proj).0))
    }

    /// Per-step probability vectors `[256, T]`.
    pub fn distribution(&self, cond: &ConditioningBundle, target: &MuLawSequence) -> Result<Mat> {
        let mut p = self.log_distribution(cond, target)?;
        p.data.iter_mut().for_each(|v| *v = v.exp());
        Ok(p)
    }

    /// Autoregressive rollout of `length` codes, one step at a time.
    pub fn generate(
        &self,
        cond: &ConditioningBundle,
        length: usize,
        sample_rate_hz: u32,
        mode: GenerationMode,
        seed: u64,
    ) -> Result<MuLawSequence> {
        if length == 0 {
            return Err(Error::invalid("generation length must be positive"));
        }
        let proj = self.project_conditioning(cond, length)?;
        let (c, s, n) = (
            self.spec.channels,
            self.spec.skip_channels,
            self.spec.n_layers,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // layer input history, one column per generated step
        let mut hist: Vec<Mat> = (0..n).map(|_| Mat::zeros(length, c)).collect();
        let zeros = vec![0.0; c];
        let mut codes = Vec::with_capacity(length);
        let (mut prev_in, mut cur_in) = (0.0, 0.0);
        let mut a = vec![0.0; 2 * c];
        let mut g = vec![0.0; c];
        let mut o = vec![0.0; c + s];
        let mut h = vec![0.0; c];
        let mut skip = vec![0.0; s];
        let mut hid = vec![0.0; s];
        let mut logits = vec![0.0; QUANT_LEVELS];
        for t in 0..length {
            if t > 0 {
                prev_in = cur_in;
                cur_in = code_input_value(codes[t - 1]);
            }
            self.input.step(&[&[prev_in], &[cur_in]], &mut h);
            skip.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..n {
                hist[l].row_mut(t).copy_from_slice(&h);
                let d = self.spec.dilation(l);
                let past: &[f64] = if t >= d { hist[l].row(t - d) } else { &zeros };
                self.dilated[l].step(&[past, &h], &mut a);
                for (r, v) in a.iter_mut().enumerate() {
                    *v += proj.at(l * 2 * c + r, t);
                }
                for i in 0..c {
                    g[i] = a[i].tanh() * sigmoid(a[i + c]);
                }
                self.outputs[l].step(&[&g], &mut o);
                h.iter_mut().zip(&o[..c]).for_each(|(x, y)| *x += y);
                skip.iter_mut().zip(&o[c..]).for_each(|(x, y)| *x += y);
            }
            skip.iter_mut().for_each(|v| *v = v.max(0.0));
            self.post1.step(&[&skip], &mut hid);
            hid.iter_mut().for_each(|v| *v = v.max(0.0));
            self.post2.step(&[&hid], &mut logits);
            let code = match mode {
                GenerationMode::Argmax => argmax(&logits),
                GenerationMode::Sample => sample_logits(&logits, rng.gen::<f64>()),
            };
            codes.push(code as u8);
        }
        MuLawSequence::new(codes, sample_rate_hz)
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `softmax(logits)` using the uniform `u` in `[0, 1)`.
pub fn sample_logits(logits: &[f64], u: f64) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let mut acc = 0.0;
    for (i, l) in logits.iter().enumerate() {
        acc += (l - m).exp() / total;
        if u < acc {
            return i;
        }
    }
    logits.len() - 1
}

pub fn log_softmax_columns(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for j in 0..logits.cols {
        let mut m = f64::NEG_INFINITY;
        for r in 0..logits.rows {
            m = m.max(logits.at(r, j));
        }
        let lse = m
            + (0..logits.rows)
                .map(|r| (logits.at(r, j) - m).exp())
                .sum::<f64>()
                .ln();
        for r in 0..logits.rows {
            *out.at_mut(r, j) -= lse;
        }
    }
    out
}

/// Mean negative log-probability of `target` under per-step distributions
/// `dist` (`[256, T]`, columns summing to one).
pub fn reconstruction_loss(dist: &Mat, target: &MuLawSequence) -> Result<f64> {
    if dist.cols != target.len() || dist.rows != QUANT_LEVELS || target.is_empty() {
        return Err(Error::invalid("distribution and target lengths differ"));
    }
    let total: f64 = target
        .codes()
        .iter()
        .enumerate()
        .map(|(t, &c)| -dist.at(c as usize, t).ln())
        .sum();
    Ok(total / target.len() as f64)
}

impl Parameterized for WaveNetDecoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.input.params(&join(prefix, "input"), out);
        self.cond_content.params(&join(prefix, "cond_content"), out);
        self.cond_pitch.params(&join(prefix, "cond_pitch"), out);
        self.cond_loudness
            .params(&join(prefix, "cond_loudness"), out);
        self.cond_singer.params(&join(prefix, "cond_singer"), out);
        if let Some(c) = &self.cond_low_res {
            c.params(&join(prefix, "cond_low_res"), out);
        }
        for (l, (d, o)) in self.dilated.iter().zip(&self.outputs).enumerate() {
            d.params(&join(prefix, &format!("layer{l}.dilated")), out);
            o.params(&join(prefix, &format!("layer{l}.output")), out);
        }
        self.post1.params(&join(prefix, "post1"), out);
        self.post2.params(&join(prefix, "post2"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.input.params_mut(&join(prefix, "input"), out);
        self.cond_content
            .params_mut(&join(prefix, "cond_content"), out);
        self.cond_pitch.params_mut(&join(prefix, "cond_pitch"), out);
        self.cond_loudness
            .params_mut(&join(prefix, "cond_loudness"), out);
        self.cond_singer
            .params_mut(&join(prefix, "cond_singer"), out);
        if let Some(c) = &mut self.cond_low_res {
            c.params_mut(&join(prefix, "cond_low_res"), out);
        }
        for (l, (d, o)) in self.dilated.iter_mut().zip(&mut self.outputs).enumerate() {
            d.params_mut(&join(prefix, &format!("layer{l}.dilated")), out);
            o.params_mut(&join(prefix, &format!("layer{l}.output")), out);
        }
        self.post1.params_mut(&join(prefix, "post1"), out);
        self.post2.params_mut(&join(prefix, "post2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(low_res: bool, seed: u64) -> (WaveNetDecoder, ConditioningBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = DecoderSpec {
            n_layers: 4,
            channels: 8,
            skip_channels: 8,
            dilation_cycle: vec![1, 2],
        };
        let dims = CondDims {
            content: 3,
            pitch: 2,
            loudness: 2,
            singer: 4,
            low_res,
        };
        let dec = WaveNetDecoder::new(spec, dims, &mut rng).unwrap();
        let t = 40;
        let m = |r: usize, n: usize, rng: &mut ChaCha8Rng| {
            Mat::from_vec(r, n, (0..r * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let bundle = ConditioningBundle {
            content: CondStream::whole(m(3, 5, &mut rng), t),
            pitch: CondStream::window(m(2, 30, &mut rng), 100, 20),
            loudness: CondStream::window(m(2, 10, &mut rng), 100, 20),
            singer: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            low_res: low_res.then(|| CondStream::whole(m(1, t, &mut rng), t)),
        };
        (dec, bundle)
    }

    fn codes(seed: u64, n: usize) -> MuLawSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MuLawSequence::new((0..n).map(|_| rng.gen()).collect(), 4000).unwrap()
    }

    #[test]
    fn receptive_field_of_default() {
        let s = DecoderSpec::default();
        assert_eq!(s.receptive_field(), 2 + 3 * 1023);
    }

    #[test]
    fn rows_are_normalized_and_near_uniform_at_init() {
        let (dec, cond) = tiny(true, 0);
        let p = dec.distribution(&cond, &codes(1, 40)).unwrap();
        for t in 0..p.cols {
            let col = p.column(t);
            assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let h: f64 = -col.iter().map(|q| q * q.ln()).sum::<f64>();
            assert!(h > 0.9 * (256f64).ln(), "entropy {h}");
        }
    }

    #[test]
    fn causal_in_the_target() {
        let (dec, cond) = tiny(false, 2);
        let base = codes(3, 40);
        let p0 = dec.distribution(&cond, &base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let t = rng.gen_range(0..40);
            let mut c = base.codes().to_vec();
            c[t] = c[t].wrapping_add(rng.gen_range(1..=255));
            let p1 = dec
                .distribution(&cond, &MuLawSequence::new(c, 4000).unwrap())
                .unwrap();
            for s in 0..=t {
                assert_eq!(p0.column(s), p1.column(s), "step {s} after perturbing {t}");
            }
            if t + 1 < 40 {
                assert_ne!(p0.column(t + 1), p1.column(t + 1));
            }
        }
    }

    #[test]
    fn loss_oracles() {
        let target = codes(5, 10);
        let mut onehot = Mat::zeros(256, 10);
        for (t, &c) in target.codes().iter().enumerate() {
            *onehot.at_mut(c as usize, t) = 1.0;
        }
        assert_eq!(reconstruction_loss(&onehot, &target).unwrap(), 0.0);
        let uniform = Mat::from_vec(256, 10, vec![1.0 / 256.0; 2560]);
        assert!((reconstruction_loss(&uniform, &target).unwrap() - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let (mut dec, cond) = tiny(true, 6);
        let target = codes(7, 40);
        let dist = dec.distribution(&cond, &target).unwrap();
        let mut acc = 0.0;
        for t in 0..40 {
            acc += -dist.at(target.codes()[t] as usize, t).ln();
        }
        let x_in = WaveNetDecoder::teacher_inputs(target.codes());
        let (loss, _) = dec
            .loss_and_backward(&cond, &x_in, target.codes(), 1.0)
            .unwrap();
        assert!((reconstruction_loss(&dist, &target).unwrap() - acc / 40.0).abs() < 1e-12);
        assert!((loss - acc / 40.0).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic_and_matches_teacher_forcing() {
        let (dec, cond) = tiny(true, 8);
        for mode in [GenerationMode::Argmax, GenerationMode::Sample] {
            let a = dec.generate(&cond, 40, 4000, mode, 11).unwrap();
            let b = dec.generate(&cond, 40, 4000, mode, 11).unwrap();
            assert_eq!(a, b);
            let lp = dec.log_distribution(&cond, &a).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for t in 0..40 {
                let col = lp.column(t);
                let again = match mode {
                    GenerationMode::Argmax => argmax(&col),
                    GenerationMode::Sample => sample_logits(&col, rng.gen::<f64>()),
                };
                assert_eq!(again as u8, a.codes()[t], "{mode:?} step {t}");
            }
        }
    }

    #[test]
    fn conditioning_length_mismatch_rejected() {
        let (dec, mut cond) = tiny(false, 9);
        assert!(dec.distribution(&cond, &codes(1, 41)).is_err());
        cond.pitch.start = 75;
        assert!(dec.distribution(&cond, &codes(1, 40)).is_err());
        let (dec2, cond2) = tiny(true, 9);
        let mut c = cond2.clone();
        c.low_res = None;
        assert!(dec2.distribution(&c, &codes(1, 40)).is_err());
        assert!(dec
            .generate(&cond2, 40, 4000, GenerationMode::Argmax, 0)
            .is_err());
    }
}
