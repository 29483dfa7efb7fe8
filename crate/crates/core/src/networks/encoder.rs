use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, BatchNorm1d, BnCache, Conv1d, Mat, Param, Parameterized};
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Number of stride-2 blocks; the encoder downsamples by `2^n_blocks`.
    pub n_blocks: usize,
    pub in_rate_hz: u32,
    pub latent_dim: usize,
    /// Output channels of each block, bottom to top.
    pub block_channels: Vec<usize>,
}

impl EncoderSpec {
    pub fn downsample_factor(&self) -> usize {
        1 << self.n_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.block_channels.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "encoder has {} blocks but {} channel entries",
                self.n_blocks,
                self.block_channels.len()
            )));
        }
        if self.latent_dim == 0 || self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "encoder channel counts must be positive".into(),
            ));
        }
        if self.in_rate_hz == 0 {
            return Err(Error::Config("encoder input rate must be positive".into()));
        }
        Ok(())
    }
}

/// Stride-2 downsampling convolution followed by a bottleneck residual unit.
#[derive(Debug, Clone)]
struct Block {
    down: Conv1d,
    bn_down: BatchNorm1d,
    squeeze: Conv1d,
    bn_squeeze: BatchNorm1d,
    mid: Conv1d,
    bn_mid: BatchNorm1d,
    expand: Conv1d,
    bn_expand: BatchNorm1d,
}

struct BlockCache {
    x: Vec<Mat>,
    a0: Vec<Mat>,
    r0: Vec<Mat>,
    r1: Vec<Mat>,
    r2: Vec<Mat>,
    out: Vec<Mat>,
    bn: [BnCache; 4],
}

impl Block {
    fn new(in_ch: usize, ch: usize, rng: &mut impl Rng) -> Self {
        let narrow = (ch / 4).max(1);
        Self {
            down: Conv1d::new(in_ch, ch, 4, 2, 1, 1, 1, rng),
            bn_down: BatchNorm1d::new(ch),
            squeeze: Conv1d::pointwise(ch, narrow, rng),
            bn_squeeze: BatchNorm1d::new(narrow),
            mid: Conv1d::same(narrow, narrow, 3, 1, rng),
            bn_mid: BatchNorm1d::new(narrow),
            expand: Conv1d::pointwise(narrow, ch, rng),
            bn_expand: BatchNorm1d::new(ch),
        }
    }

    fn forward_eval(&self, x: &Mat) -> Mat {
        let r0 = relu(&self.bn_down.forward_eval(&self.down.forward(x)));
        let r1 = relu(&self.bn_squeeze.forward_eval(&self.squeeze.forward(&r0)));
        let r2 = relu(&self.bn_mid.forward_eval(&self.mid.forward(&r1)));
        let mut s = self.bn_expand.forward_eval(&self.expand.forward(&r2));
        s.add_assign(&r0);
        relu(&s)
    }

    fn forward_train(&mut self, xs: &[Mat]) -> (Vec<Mat>, BlockCache) {
        let a0: Vec<Mat> = xs.iter().map(|x| self.down.forward(x)).collect();
        let (b0, c0) = self.bn_down.forward_train(&a0);
        let r0: Vec<Mat> = b0.iter().map(relu).collect();
        let a1: Vec<Mat> = r0.iter().map(|x| self.squeeze.forward(x)).collect();
        let (b1, c1) = self.bn_squeeze.forward_train(&a1);
        let r1: Vec<Mat> = b1.iter().map(relu).collect();
        let a2: Vec<Mat> = r1.iter().map(|x| self.mid.forward(x)).collect();
        let (b2, c2) = self.bn_mid.forward_train(&a2);
        let r2: Vec<Mat> = b2.iter().map(relu).collect();
        let a3: Vec<Mat> = r2.iter().map(|x| self.expand.forward(x)).collect();
        let (b3, c3) = self.bn_expand.forward_train(&a3);
        let out: Vec<Mat> = b3
            .into_iter()
            .zip(&r0)
            .map(|(mut s, r)| {
                s.add_assign(r);
                relu(&s)
            })
            .collect();
        let cache = BlockCache {
            x: xs.to_vec(),
            a0,
            r0,
            r1,
            r2,
            out: out.clone(),
            bn: [c0, c1, c2, c3],
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache, d_out: &[Mat]) -> Vec<Mat> {
        let ds: Vec<Mat> = d_out
            .iter()
            .zip(&cache.out)
            .map(|(d, y)| relu_backward(y, d))
            .collect();
        // expand branch
        let d_a3 = self.bn_expand.backward(&cache.bn[3], &ds);
        let d_r2: Vec<Mat> = d_a3
            .iter()
            .zip(&cache.r2)
            .map(|(d, x)| self.expand.backward(x, d))
            .collect();
        let d_b2: Vec<Mat> = d_r2
            .iter()
            .zip(&cache.r2)
            .map(|(d, y)| relu_backward(y, d))
            .collect();
        let d_a2 = self.bn_mid.backward(&cache.bn[2], &d_b2);
        let d_r1: Vec<Mat> = d_a2
            .iter()
            .zip(&cache.r1)
            .map(|(d, x)| self.mid.backward(x, d))
            .collect();
        let d_b1: Vec<Mat> = d_r1
            .iter()
            .zip(&cache.r1)
            .map(|(d, y)| relu_backward(y, d))
            .collect();
        let d_a1 = self.bn_squeeze.backward(&cache.bn[1], &d_b1);
        let mut d_r0: Vec<Mat> = d_a1
            .iter()
            .zip(&cache.r0)
            .map(|(d, x)| self.squeeze.backward(x, d))
            .collect();
        // skip connection
        for (d, s) in d_r0.iter_mut().zip(&ds) {
            d.add_assign(s);
        }
        let d_b0: Vec<Mat> = d_r0
            .iter()
            .zip(&cache.r0)
            .map(|(d, y)| relu_backward(y, d))
            .collect();
        let d_a0 = self.bn_down.backward(&cache.bn[0], &d_b0);
        debug_assert_eq!(d_a0.len(), cache.a0.len());
        d_a0.iter()
            .zip(&cache.x)
            .map(|(d, x)| self.down.backward(x, d))
            .collect()
    }

    fn params_into<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.down.params(&format!("{prefix}.down"), out);
        self.bn_down.params(&format!("{prefix}.bn_down"), out);
        self.squeeze.params(&format!("{prefix}.squeeze"), out);
        self.bn_squeeze.params(&format!("{prefix}.bn_squeeze"), out);
        self.mid.params(&format!("{prefix}.mid"), out);
        self.bn_mid.params(&format!("{prefix}.bn_mid"), out);
        self.expand.params(&format!("{prefix}.expand"), out);
        self.bn_expand.params(&format!("{prefix}.bn_expand"), out);
    }

    fn params_mut_into<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.down.params_mut(&format!("{prefix}.down"), out);
        self.bn_down.params_mut(&format!("{prefix}.bn_down"), out);
        self.squeeze.params_mut(&format!("{prefix}.squeeze"), out);
        self.bn_squeeze
            .params_mut(&format!("{prefix}.bn_squeeze"), out);
        self.mid.params_mut(&format!("{prefix}.mid"), out);
        self.bn_mid.params_mut(&format!("{prefix}.bn_mid"), out);
        self.expand.params_mut(&format!("{prefix}.expand"), out);
        self.bn_expand
            .params_mut(&format!("{prefix}.bn_expand"), out);
    }
}

/// Stack of downsampling blocks plus a pointwise projection to the latent
/// dimension.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    pub spec: EncoderSpec,
    blocks: Vec<Block>,
    proj: Conv1d,
}

pub struct EncoderCache {
    blocks: Vec<BlockCache>,
    top: Vec<Mat>,
}

/// Encoder output together with the zero padding that was appended.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub latents: Mat,
    pub padding: usize,
}

impl ContentEncoder {
    pub fn new(spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.n_blocks);
        let mut in_ch = 1;
        for &ch in &spec.block_channels {
            blocks.push(Block::new(in_ch, ch, rng));
            in_ch = ch;
        }
        let proj = Conv1d::pointwise(in_ch, spec.latent_dim, rng);
        Ok(Self { spec, blocks, proj })
    }

    /// Right-pads `x` with zeros to a multiple of the downsampling factor.
    pub fn pad_input(&self, x: &[f64]) -> (Mat, usize) {
        let f = self.spec.downsample_factor();
        let padded_len = x.len().div_ceil(f) * f;
        let mut data = x.to_vec();
        data.resize(padded_len, 0.0);
        (Mat::from_vec(1, padded_len, data), padded_len - x.len())
    }

    /// Inference-mode encoding of a waveform (batch statistics frozen).
    pub fn encode(&self, w: &Waveform) -> Result<Encoded> {
        if w.sample_rate_hz() != self.spec.in_rate_hz {
            return Err(Error::invalid(format!(
                "encoder expects {} Hz input, got {} Hz",
                self.spec.in_rate_hz,
                w.sample_rate_hz()
            )));
        }
        let (x, padding) = self.pad_input(w.samples());
        Ok(Encoded {
            latents: self.forward_eval(&x),
            padding,
        })
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward_eval(&h);
        }
        self.proj.forward(&h)
    }

    /// Training-mode forward over a batch of equal-rate inputs whose lengths
    /// are multiples of the downsampling factor.
    pub fn forward_train(&mut self, xs: &[Mat]) -> (Vec<Mat>, EncoderCache) {
        let mut h = xs.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let (o, c) = b.forward_train(&h);
            caches.push(c);
            h = o;
        }
        let z = h.iter().map(|x| self.proj.forward(x)).collect();
        (
            z,
            EncoderCache {
                blocks: caches,
                top: h,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderCache, dz: &[Mat]) -> Vec<Mat> {
        let mut d: Vec<Mat> = dz
            .iter()
            .zip(&cache.top)
            .map(|(g, x)| self.proj.backward(x, g))
            .collect();
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            d = b.backward(c, &d);
        }
        d
    }
}

impl Parameterized for ContentEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params_into(&crate::nn::join(prefix, &format!("block{i}")), out);
        }
        self.proj.params(&crate::nn::join(prefix, "proj"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut_into(&crate::nn::join(prefix, &format!("block{i}")), out);
        }
        self.proj.params_mut(&crate::nn::join(prefix, "proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn spec(n: usize) -> EncoderSpec {
        EncoderSpec {
            n_blocks: n,
            in_rate_hz: 8000,
            latent_dim: 4,
            block_channels: vec![4; n],
        }
    }

    #[test]
    fn downsampling_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ContentEncoder::new(spec(6), &mut rng).unwrap();
        let w = Waveform::new(vec![0.1; 7680], 8000).unwrap();
        let e = enc.encode(&w).unwrap();
        assert_eq!((e.latents.rows, e.latents.cols, e.padding), (4, 120, 0));

        let enc8 = ContentEncoder::new(spec(8), &mut rng).unwrap();
        assert_eq!(enc8.encode(&w).unwrap().latents.cols, 30);
    }

    #[test]
    fn ragged_input_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ContentEncoder::new(spec(3), &mut rng).unwrap();
        let w = Waveform::new(vec![0.1; 21], 8000).unwrap();
        let e = enc.encode(&w).unwrap();
        assert_eq!((e.latents.cols, e.padding), (3, 3));
    }

    #[test]
    fn zero_input_gives_identical_interior_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ContentEncoder::new(spec(3), &mut rng).unwrap();
        let w = Waveform::new(vec![0.0; 512], 8000).unwrap();
        let z = enc.encode(&w).unwrap().latents;
        // boundary steps see the zero padding of the convolutions
        for t in 2..z.cols - 2 {
            for d in 0..z.rows {
                assert_eq!(z.at(d, t), z.at(d, 2));
            }
        }
    }

    #[test]
    fn rejects_mismatched_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = spec(3);
        s.block_channels.pop();
        assert!(ContentEncoder::new(s, &mut rng).is_err());
    }

    #[test]
    fn wrong_rate_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ContentEncoder::new(spec(2), &mut rng).unwrap();
        let w = Waveform::new(vec![0.0; 16], 4000).unwrap();
        assert!(enc.encode(&w).is_err());
    }
}
