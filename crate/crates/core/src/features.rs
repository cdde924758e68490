//! Frozen feature networks used by the perceptual loss.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dGeometry, Tape, Var};
use crate::checkpoint::read_archive;
use crate::error::{Error, Result};

/// A fixed network whose intermediate activations serve as `φ_i`.
///
/// Inputs are (N, C, H, W) batches in `[-1, 1]`. Weights never change, so
/// the same input always yields the same features.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> String;

    /// Records the forward pass on `tape` and returns one node per tap.
    fn features(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>>;
}

/// Stage layout of a VGG-style extractor: 3×3 convolutions with ReLU,
/// followed by 2×2 max pooling at the end of every stage. Each pooling
/// output is a tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VggConfig {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    /// Map `[-1, 1]` inputs to ImageNet mean/std normalization first.
    pub imagenet_normalize: bool,
}

impl VggConfig {
    /// The first three pooling stages of VGG16.
    pub fn vgg16() -> Self {
        Self {
            stage_widths: vec![64, 128, 256],
            convs_per_stage: vec![2, 2, 3],
            imagenet_normalize: true,
        }
    }

    /// A narrow three-stage variant for desk-scale runs.
    pub fn compact() -> Self {
        Self {
            stage_widths: vec![16, 32, 64],
            convs_per_stage: vec![1, 1, 1],
            imagenet_normalize: false,
        }
    }

    /// Conv layer names in torchvision `features.{idx}` numbering, with
    /// their weight shapes.
    fn layer_shapes(&self) -> Vec<(usize, [usize; 4])> {
        let mut out = Vec::new();
        let mut idx = 0;
        let mut cin = 3;
        for (&width, &convs) in self.stage_widths.iter().zip(&self.convs_per_stage) {
            for _ in 0..convs {
                out.push((idx, [width, cin, 3, 3]));
                cin = width;
                idx += 2; // conv + relu
            }
            idx += 1; // pool
        }
        out
    }
}

pub struct VggExtractor {
    cfg: VggConfig,
    name: String,
    /// (weight, bias) per conv layer, in order.
    layers: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl VggExtractor {
    /// Seeded He-normal weights; a fixed random feature network.
    pub fn random(cfg: VggConfig, seed: u64) -> Result<Self> {
        Self::check(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let layers = cfg
            .layer_shapes()
            .into_iter()
            .map(|(_, s)| {
                let fan_in = (s[1] * s[2] * s[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                (
                    ArrayD::from_shape_simple_fn(IxDyn(&s), || normal.sample(&mut rng)),
                    ArrayD::zeros(IxDyn(&[s[0]])),
                )
            })
            .collect();
        let name = format!("vgg-random(widths={:?}, seed={seed})", cfg.stage_widths);
        Ok(Self { cfg, name, layers })
    }

    /// Loads pretrained weights stored as `features.{idx}.weight` /
    /// `features.{idx}.bias` in an array archive.
    pub fn from_archive(path: &Path, cfg: VggConfig) -> Result<Self> {
        Self::check(&cfg)?;
        let (_, mut arrays) = read_archive(path)?;
        let mut layers = Vec::new();
        for (idx, shape) in cfg.layer_shapes() {
            let mut take = |suffix: &str, want: &[usize]| {
                let key = format!("features.{idx}.{suffix}");
                let a = arrays
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))?;
                if a.shape() != want {
                    return Err(Error::Checkpoint(format!(
                        "`{key}` has shape {:?}, expected {want:?}",
                        a.shape()
                    )));
                }
                Ok(a)
            };
            let w = take("weight", &shape)?;
            let b = take("bias", &shape[..1])?;
            layers.push((w, b));
        }
        let name = format!("vgg({})", path.display());
        Ok(Self { cfg, name, layers })
    }

    fn check(cfg: &VggConfig) -> Result<()> {
        if cfg.stage_widths.is_empty()
            || cfg.stage_widths.len() != cfg.convs_per_stage.len()
            || cfg.convs_per_stage.contains(&0)
        {
            return Err(Error::Config("vgg config needs matching, nonempty stage lists".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &VggConfig {
        &self.cfg
    }
}

impl FeatureExtractor for VggExtractor {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn features(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>> {
        let shape = tape.value(input).shape().to_vec();
        let f = 1 << self.cfg.stage_widths.len();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % f != 0 || shape[3] % f != 0 {
            return Err(Error::Dimension(format!(
                "{} needs (N, 3, H, W) input with H, W divisible by {f}; got {shape:?}",
                self.name
            )));
        }
        let mut h = input;
        if self.cfg.imagenet_normalize {
            // x in [-1, 1] -> ((x + 1) / 2 - mean) / std
            let scale = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| 0.5 / IMAGENET_STD[i[1]]);
            let shift = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| {
                (0.5 - IMAGENET_MEAN[i[1]]) / IMAGENET_STD[i[1]]
            });
            h = tape.mul_const(h, scale);
            h = tape.add_const(h, &shift);
        }
        let geom = Conv2dGeometry { stride: 1, padding: 1 };
        let mut taps = Vec::with_capacity(self.cfg.stage_widths.len());
        let mut layers = self.layers.iter();
        for &convs in &self.cfg.convs_per_stage {
            for _ in 0..convs {
                let (w, b) = layers.next().expect("one entry per conv");
                let wv = tape.constant(w.clone());
                let bv = tape.constant(b.clone());
                h = tape.conv2d(h, wv, Some(bv), geom);
                h = tape.relu(h);
            }
            h = tape.max_pool2(h);
            taps.push(h);
        }
        Ok(taps)
    }
}

/// A 1×1 identity convolution with a single full-resolution tap.
pub struct IdentityExtractor {
    channels: usize,
}

impl IdentityExtractor {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn name(&self) -> String {
        "identity-1x1".into()
    }

    fn features(&self, tape: &mut Tape, input: Var) -> Result<Vec<Var>> {
        let c = self.channels;
        let shape = tape.value(input).shape();
        if shape.len() != 4 || shape[1] != c {
            return Err(Error::Dimension(format!("identity extractor expects {c} channels, got {shape:?}")));
        }
        let w = ArrayD::from_shape_fn(IxDyn(&[c, c, 1, 1]), |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        let wv = tape.constant(w);
        Ok(vec![tape.conv2d(input, wv, None, Conv2dGeometry { stride: 1, padding: 0 })])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::write_archive;
    use std::collections::BTreeMap;

    fn input(seed: u64, h: usize) -> ArrayD<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, h, h]), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn taps_follow_pooling_stages() {
        let fx = VggExtractor::random(VggConfig::compact(), 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(input(1, 32));
        let taps = fx.features(&mut t, x).unwrap();
        let shapes: Vec<_> = taps.iter().map(|v| t.value(*v).shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 16, 16], vec![2, 32, 8, 8], vec![2, 64, 4, 4]]);
    }

    #[test]
    fn features_are_deterministic() {
        let fx = VggExtractor::random(VggConfig::compact(), 4).unwrap();
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(input(2, 16));
            let taps = fx.features(&mut t, x).unwrap();
            t.value(*taps.last().unwrap()).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_indivisible_input() {
        let fx = VggExtractor::random(VggConfig::compact(), 0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(input(1, 12));
        assert!(fx.features(&mut t, x).is_err());
    }

    #[test]
    fn identity_extractor_is_identity() {
        let mut t = Tape::new();
        let x0 = input(3, 8);
        let x = t.constant(x0.clone());
        let taps = IdentityExtractor::new(3).features(&mut t, x).unwrap();
        assert_eq!(t.value(taps[0]), &x0);
    }

    #[test]
    fn loads_torchvision_numbering() {
        let cfg = VggConfig::vgg16();
        let mut arrays = BTreeMap::new();
        for (idx, s) in cfg.layer_shapes() {
            arrays.insert(format!("features.{idx}.weight"), ArrayD::from_elem(IxDyn(&s), 0.01));
            arrays.insert(format!("features.{idx}.bias"), ArrayD::zeros(IxDyn(&[s[0]])));
        }
        let idxs: Vec<_> = cfg.layer_shapes().into_iter().map(|(i, _)| i).collect();
        assert_eq!(idxs, vec![0, 2, 5, 7, 10, 12, 14]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.arch");
        write_archive(&path, &serde_json::Value::Null, &arrays).unwrap();
        let fx = VggExtractor::from_archive(&path, cfg.clone()).unwrap();
        assert_eq!(fx.layers.len(), 7);

        arrays.remove("features.14.bias");
        write_archive(&path, &serde_json::Value::Null, &arrays).unwrap();
        assert!(VggExtractor::from_archive(&path, cfg).is_err());
    }
}
