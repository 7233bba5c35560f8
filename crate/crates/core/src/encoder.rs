//! The desk-scale patch encoder.
//!
//! A fixed box-pooling stem brings the augmented view down to a small
//! working resolution, then three 3x3 convolution blocks with average-pool
//! downsampling feed a two-layer projection head. The feature is the head
//! output, L2-normalized. Activations are tanh throughout: smooth
//! everywhere, so finite-difference gradient checks hold at tight
//! tolerance.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{glorot_uniform, ParamSet};
use crate::raster::Rgb8Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Side of the augmented view fed to the stem.
    pub view_px: usize,
    /// Side after the stem; must divide `view_px` and be a multiple of 4
    /// (two pooling stages follow).
    pub stem_px: usize,
    pub channels: [usize; 3],
    pub head_hidden: usize,
    /// Output feature dimension D.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            view_px: 224,
            stem_px: 28,
            channels: [8, 16, 32],
            head_hidden: 64,
            feature_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_px == 0 || self.view_px % self.stem_px != 0 {
            return Err(Error::Config(format!(
                "stem_px {} must divide view_px {}",
                self.stem_px, self.view_px
            )));
        }
        if self.stem_px % 4 != 0 {
            return Err(Error::Config(format!(
                "stem_px {} must be a multiple of 4",
                self.stem_px
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.head_hidden == 0 || self.feature_dim == 0
        {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        Ok(())
    }

    /// A small instance of the same architecture, for fast gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            view_px: 16,
            stem_px: 8,
            channels: [2, 3, 4],
            head_hidden: 6,
            feature_dim: 5,
        }
    }
}

/// Node ids of one registered parameter set.
pub struct EncoderNodes {
    conv_w: [NodeId; 3],
    conv_b: [NodeId; 3],
    fc1_w: NodeId,
    fc1_b: NodeId,
    fc2_w: NodeId,
    fc2_b: NodeId,
}

pub const ENCODER_PARAM_NAMES: [&str; 10] = [
    "conv1.b", "conv1.w", "conv2.b", "conv2.w", "conv3.b", "conv3.w", "fc1.b", "fc1.w", "fc2.b",
    "fc2.w",
];

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let [c1, c2, c3] = self.cfg.channels;
        let (h, d) = (self.cfg.head_hidden, self.cfg.feature_dim);
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut _| {
            p.insert(
                &format!("{name}.w"),
                glorot_uniform(&[cin * 9, cout], cin * 9, cout * 9, rng),
            )
            .expect("fresh name");
            p.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
                .expect("fresh name");
        };
        conv(&mut p, "conv1", 3, c1, rng);
        conv(&mut p, "conv2", c1, c2, rng);
        conv(&mut p, "conv3", c2, c3, rng);
        p.insert("fc1.w", glorot_uniform(&[c3, h], c3, h, rng))
            .expect("fresh name");
        p.insert("fc1.b", Tensor::zeros(&[h])).expect("fresh name");
        p.insert("fc2.w", glorot_uniform(&[h, d], h, d, rng))
            .expect("fresh name");
        p.insert("fc2.b", Tensor::zeros(&[d])).expect("fresh name");
        p
    }

    /// Fixed ingest: box-pool the view down to `stem_px` and map bytes to
    /// `[-0.5, 0.5]`. Not differentiable; happens before the graph.
    pub fn stem<T: Scalar>(&self, view: &Rgb8Image) -> Result<Tensor<T>> {
        if view.width() != self.cfg.view_px || view.height() != self.cfg.view_px {
            return Err(Error::Shape {
                op: "encoder_stem",
                lhs: vec![view.width(), view.height()],
                rhs: vec![self.cfg.view_px, self.cfg.view_px],
            });
        }
        let s = self.cfg.stem_px;
        let f = self.cfg.view_px / s;
        let area = (f * f) as f64;
        let mut data = vec![T::zero(); 3 * s * s];
        for by in 0..s {
            for bx in 0..s {
                let mut sums = [0u64; 3];
                for y in by * f..(by + 1) * f {
                    for x in bx * f..(bx + 1) * f {
                        let (r, g, b) = view.pixel(x, y);
                        sums[0] += r as u64;
                        sums[1] += g as u64;
                        sums[2] += b as u64;
                    }
                }
                for (c, &sum) in sums.iter().enumerate() {
                    data[c * s * s + by * s + bx] =
                        T::from_f64(sum as f64 / (area * 255.0) - 0.5);
                }
            }
        }
        Tensor::from_vec(&[3, s, s], data)
    }

    /// Stack stems of a batch of views into `[B, 3, s, s]`.
    pub fn batch_stem<T: Scalar>(&self, views: &[Rgb8Image]) -> Result<Tensor<T>> {
        if views.is_empty() {
            return Err(Error::Dataset("encoder: empty view batch".into()));
        }
        let stems = views
            .par_iter()
            .map(|v| self.stem::<T>(v))
            .collect::<Result<Vec<_>>>()?;
        let s = self.cfg.stem_px;
        let plane = 3 * s * s;
        let mut data = Vec::with_capacity(views.len() * plane);
        for t in &stems {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[views.len(), 3, s, s], data)
    }

    /// Register parameters as graph leaves (trainable or constant).
    pub fn register<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        trainable: bool,
    ) -> Result<EncoderNodes> {
        let mut node = |name: &str, g: &mut Graph<T>| -> Result<NodeId> {
            let t = params.get(name)?.clone();
            Ok(if trainable { g.param(t) } else { g.constant(t) })
        };
        Ok(EncoderNodes {
            conv_w: [
                node("conv1.w", g)?,
                node("conv2.w", g)?,
                node("conv3.w", g)?,
            ],
            conv_b: [
                node("conv1.b", g)?,
                node("conv2.b", g)?,
                node("conv3.b", g)?,
            ],
            fc1_w: node("fc1.w", g)?,
            fc1_b: node("fc1.b", g)?,
            fc2_w: node("fc2.w", g)?,
            fc2_b: node("fc2.b", g)?,
        })
    }

    /// Forward pass from stemmed input `[B,3,s,s]` to unit-norm features
    /// `[B,D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        nodes: &EncoderNodes,
    ) -> Result<NodeId> {
        let mut h = x;
        for block in 0..3 {
            h = g.conv2d_same(h, nodes.conv_w[block], nodes.conv_b[block])?;
            h = g.tanh(h);
            if block < 2 {
                h = g.avg_pool2(h)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let h1 = g.matmul(pooled, nodes.fc1_w)?;
        let h1 = g.add_bias_row(h1, nodes.fc1_b)?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, nodes.fc2_w)?;
        let h2 = g.add_bias_row(h2, nodes.fc2_b)?;
        g.l2_normalize_rows(h2)
    }

    /// Inference: encode views into unit-norm feature rows, no gradients.
    pub fn embed<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        views: &[Rgb8Image],
    ) -> Result<Tensor<T>> {
        let x = self.batch_stem(views)?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let nodes = self.register(&mut g, params, false)?;
        let out = self.forward(&mut g, xn, &nodes)?;
        Ok(g.value(out).clone())
    }

    /// Map gradients from node ids back to parameter names.
    pub fn collect_grads<T: Scalar>(
        &self,
        grads: &mut crate::graph::Gradients<T>,
        nodes: &EncoderNodes,
        params: &ParamSet<T>,
    ) -> Result<ParamSet<T>> {
        let mut out = ParamSet::new();
        let pairs = [
            ("conv1.w", nodes.conv_w[0]),
            ("conv1.b", nodes.conv_b[0]),
            ("conv2.w", nodes.conv_w[1]),
            ("conv2.b", nodes.conv_b[1]),
            ("conv3.w", nodes.conv_w[2]),
            ("conv3.b", nodes.conv_b[2]),
            ("fc1.w", nodes.fc1_w),
            ("fc1.b", nodes.fc1_b),
            ("fc2.w", nodes.fc2_w),
            ("fc2.b", nodes.fc2_b),
        ];
        for (name, id) in pairs {
            let g = match grads.take(id) {
                Some(g) => g,
                // a parameter can miss a gradient only if the loss ignores
                // it; a zero gradient keeps the optimizer contract intact
                None => Tensor::zeros(params.get(name)?.shape()),
            };
            out.insert(name, g)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_patch(side: usize, seed: u64) -> Rgb8Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Rgb8Image::new(side, side);
        for v in img.data_mut() {
            *v = rng.random_range(0..=255);
        }
        img
    }

    #[test]
    fn embed_rows_are_unit_norm() {
        let enc = Encoder::new(EncoderConfig::tiny()).unwrap();
        let params: ParamSet<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let views: Vec<_> = (0..3).map(|i| test_patch(16, i)).collect();
        let f = enc.embed(&params, &views).unwrap();
        assert_eq!(f.shape(), &[3, 5]);
        for i in 0..3 {
            let norm: f64 = f.row(i).unwrap().norm_l2();
            assert!((norm - 1.0).abs() < 1e-6, "row {i} norm {norm}");
        }
    }

    #[test]
    fn identical_views_embed_identically() {
        let enc = Encoder::new(EncoderConfig::tiny()).unwrap();
        let params: ParamSet<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let v = test_patch(16, 9);
        let f = enc.embed(&params, &[v.clone(), v]).unwrap();
        assert_eq!(f.row(0).unwrap(), f.row(1).unwrap());
    }

    #[test]
    fn mean_feature_gradient_passes_grad_check() {
        let enc = Encoder::new(EncoderConfig::tiny()).unwrap();
        let params: ParamSet<f64> = enc.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let views: Vec<_> = (0..2).map(|i| test_patch(16, 40 + i)).collect();
        let x: Tensor<f64> = enc.batch_stem(&views).unwrap();
        let err = crate::gradcheck::grad_check(
            |p: &ParamSet<f64>| {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let nodes = enc.register(&mut g, p, true)?;
                let f = enc.forward(&mut g, xn, &nodes)?;
                let t = g.tanh(f);
                let loss = g.mean_all(t);
                let mut grads = g.backward(loss)?;
                Ok((
                    g.value(loss).item(),
                    enc.collect_grads(&mut grads, &nodes, p)?,
                ))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "grad check rel err {err}");
    }

    #[test]
    fn stem_rejects_wrong_view_size() {
        let enc = Encoder::new(EncoderConfig::tiny()).unwrap();
        assert!(enc.stem::<f64>(&test_patch(8, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.stem_px = 30; // not a multiple of 4
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.stem_px = 0;
        assert!(cfg.validate().is_err());
    }
}
