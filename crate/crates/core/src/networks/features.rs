use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu, relu_backward, Conv1d, Mat, Param, Parameterized};

/// Dilations of the three feature-encoder layers.
pub const FEATURE_DILATIONS: [usize; 3] = [1, 2, 4];

/// Fixed divisor applied to f0 values (Hz) before the pitch encoder.
pub const F0_INPUT_SCALE_HZ: f64 = 500.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEncoderSpec {
    pub out_dim: usize,
}

impl FeatureEncoderSpec {
    /// Number of input frames on each side that can influence one output.
    pub fn half_receptive_field() -> usize {
        FEATURE_DILATIONS.iter().sum()
    }
}

/// Three length-preserving dilated convolutions (kernel 3), each followed by
/// a ReLU, mapping a scalar track to an `out_dim` embedding per frame.
#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub spec: FeatureEncoderSpec,
    layers: Vec<Conv1d>,
}

pub struct FeatureCache {
    inputs: Vec<Mat>,
    output: Mat,
}

impl FeatureEncoder {
    pub fn new(spec: FeatureEncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.out_dim == 0 {
            return Err(Error::Config(
                "feature encoder output dimension must be positive".into(),
            ));
        }
        let mut in_ch = 1;
        let layers = FEATURE_DILATIONS
            .iter()
            .map(|&d| {
                let c = Conv1d::same(in_ch, spec.out_dim, 3, d, rng);
                in_ch = spec.out_dim;
                c
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// `[out_dim, n]` embedding of a length-`n` scalar track.
    pub fn encode(&self, values: &[f64]) -> Result<Mat> {
        Ok(self.forward(values)?.0)
    }

    pub fn forward(&self, values: &[f64]) -> Result<(Mat, FeatureCache)> {
        if values.is_empty() {
            return Err(Error::invalid("feature track is empty"));
        }
        let mut h = Mat::from_vec(1, values.len(), values.to_vec());
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = relu(&layer.forward(&h));
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok((h.clone(), FeatureCache { inputs, output: h }))
    }

    /// Accumulates parameter gradients; returns the gradient at the input.
    pub fn backward(&mut self, cache: &FeatureCache, d_out: &Mat) -> Mat {
        let mut d = d_out.clone();
        let mut y = &cache.output;
        for (layer, x) in self.layers.iter_mut().zip(&cache.inputs).rev() {
            let da = relu_backward(y, &d);
            d = layer.backward(x, &da);
            y = x;
        }
        d
    }
}

impl Parameterized for FeatureEncoder {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&join(prefix, &format!("conv{i}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&join(prefix, &format!("conv{i}")), out);
        }
    }
}

/// One learned, time-invariant embedding per registered singer id.
#[derive(Debug, Clone)]
pub struct SingerTable {
    /// `[n_singers, dim]`, rows in ascending id order.
    pub embeddings: Param,
    index: BTreeMap<u32, usize>,
    dim: usize,
}

impl SingerTable {
    pub fn new(ids: &[u32], dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut sorted = ids.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || dim == 0 {
            return Err(Error::Config(
                "singer table needs at least one id and a positive dimension".into(),
            ));
        }
        let index = sorted.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self {
            embeddings: Param::uniform(&[sorted.len(), dim], 0.1, rng),
            index,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> Vec<u32> {
        self.index.keys().copied().collect()
    }

    fn row(&self, id: u32) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::UnknownSinger {
                id,
                known: self.ids(),
            })
    }

    pub fn lookup(&self, id: u32) -> Result<Vec<f64>> {
        let r = self.row(id)?;
        Ok(self.embeddings.value[r * self.dim..(r + 1) * self.dim].to_vec())
    }

    pub fn accumulate_grad(&mut self, id: u32, d: &[f64]) -> Result<()> {
        let r = self.row(id)?;
        for (g, v) in self.embeddings.grad[r * self.dim..(r + 1) * self.dim]
            .iter_mut()
            .zip(d)
        {
            *g += v;
        }
        Ok(())
    }
}

impl Parameterized for SingerTable {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "embeddings"), &self.embeddings));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "embeddings"), &mut self.embeddings));
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn encoder(seed: u64) -> FeatureEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureEncoder::new(FeatureEncoderSpec { out_dim: 10 }, &mut rng).unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let e = encoder(0).encode(&[0.5; 100]).unwrap();
        assert_eq!((e.rows, e.cols), (10, 100));
        assert!(encoder(0).encode(&[]).is_err());
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let e = encoder(1).encode(&[0.8; 60]).unwrap();
        let h = FeatureEncoderSpec::half_receptive_field();
        for t in h..60 - h {
            assert_eq!(e.column(t), e.column(h));
        }
    }

    #[test]
    fn single_frame_change_stays_within_receptive_field() {
        let enc = encoder(2);
        let a: Vec<f64> = (0..80)
            .map(|i| 0.4 + 0.3 * (i as f64 * 0.2).sin())
            .collect();
        let mut b = a.clone();
        b[40] += 0.5;
        let (ea, eb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
        let h = FeatureEncoderSpec::half_receptive_field();
        assert_eq!(2 * h + 1, 15);
        for t in 0..80 {
            if t + h < 40 || t > 40 + h {
                assert_eq!(ea.column(t), eb.column(t), "frame {t}");
            }
        }
    }

    #[test]
    fn singer_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = SingerTable::new(&[7, 2, 5], 4, &mut rng).unwrap();
        assert_eq!(t.ids(), vec![2, 5, 7]);
        assert_eq!(t.lookup(5).unwrap(), t.embeddings.value[4..8].to_vec());
        match t.lookup(3) {
            Err(Error::UnknownSinger { id: 3, known }) => assert_eq!(known, vec![2, 5, 7]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
