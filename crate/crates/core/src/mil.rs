//! Attention-based multiple-instance slide classifier.
//!
//! Patch features project through a shared trunk; two gated attention
//! branches (one per class) score every patch, softmax the scores into
//! weights, and pool a slide embedding per class, each read by its own
//! linear head:
//!
//! `h_i = tanh(x_i W + b)`
//! `s_{c,i} = w_c' ( tanh(h_i V_c) . sigmoid(h_i U_c) )`
//! `a_c = softmax_i(s_c)`,  `z_c = sum_i a_{c,i} h_i`,
//! `logit_c = z_c u_c + b_c`
//!
//! The instance-level clustering objective of the lineage this derives from
//! is deliberately absent. A traditional max-pooling baseline rides along.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::graph::{Gradients, Graph, NodeId};
use crate::optim::{Sgd, SgdConfig};
use crate::params::{glorot_uniform, ParamSet};
use crate::rng::{stream, STAGE_MIL_EPOCH, STAGE_MIL_INIT};
use crate::tensor::{softmax, Tensor};

pub const N_CLASSES: usize = 2;

/// The paper-reported search grids for the bag classifier.
pub const LR_GRID: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const WD_GRID: [f64; 2] = [1e-3, 1e-5];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilHyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Trunk width H.
    pub hidden: usize,
    /// Attention width L.
    pub attention_dim: usize,
}

impl Default for MilHyper {
    fn default() -> Self {
        MilHyper {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs: 100,
            hidden: 128,
            attention_dim: 64,
        }
    }
}

impl MilHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "mil optimizer settings invalid: lr {} wd {}",
                self.learning_rate, self.weight_decay
            )));
        }
        if self.hidden == 0 || self.attention_dim == 0 {
            return Err(Error::Config("mil dims must be positive".into()));
        }
        Ok(())
    }
}

/// Per-class, per-patch attention weights; each class's vector sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub per_class: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub params: ParamSet<f64>,
}

struct MilNodes {
    proj_w: NodeId,
    proj_b: NodeId,
    attn_v: [NodeId; 2],
    attn_u: [NodeId; 2],
    attn_w: [NodeId; 2],
    clf_w: [NodeId; 2],
    clf_b: [NodeId; 2],
}

/// Forward-pass handles into the graph.
pub struct MilForward {
    pub logits: NodeId,
    pub attention: [NodeId; 2],
    pub pooled: [NodeId; 2],
    nodes: MilNodes,
}

impl MilModel {
    pub fn init(input_dim: usize, hyper: &MilHyper, rng: &mut impl Rng) -> Result<MilModel> {
        hyper.validate()?;
        let (d, h, l) = (input_dim, hyper.hidden, hyper.attention_dim);
        let mut p = ParamSet::new();
        p.insert("proj.w", glorot_uniform(&[d, h], d, h, rng))?;
        p.insert("proj.b", Tensor::zeros(&[h]))?;
        for c in 0..N_CLASSES {
            p.insert(&format!("attn{c}.v"), glorot_uniform(&[h, l], h, l, rng))?;
            p.insert(&format!("attn{c}.u"), glorot_uniform(&[h, l], h, l, rng))?;
            p.insert(&format!("attn{c}.w"), glorot_uniform(&[l, 1], l, 1, rng))?;
            p.insert(&format!("clf{c}.w"), glorot_uniform(&[h, 1], h, 1, rng))?;
            p.insert(&format!("clf{c}.b"), Tensor::zeros(&[1]))?;
        }
        Ok(MilModel {
            input_dim: d,
            hidden: h,
            attention_dim: l,
            params: p,
        })
    }

    /// Rebuild a model from checkpointed parameters, validating shapes.
    pub fn from_params(params: ParamSet<f64>) -> Result<MilModel> {
        let proj = params.get("proj.w")?;
        if proj.shape().len() != 2 {
            return Err(Error::Config("proj.w must be a matrix".into()));
        }
        let (d, h) = (proj.shape()[0], proj.shape()[1]);
        let l = params.get("attn0.w")?.shape()[0];
        for c in 0..N_CLASSES {
            for (name, shape) in [
                (format!("attn{c}.v"), vec![h, l]),
                (format!("attn{c}.u"), vec![h, l]),
                (format!("attn{c}.w"), vec![l, 1]),
                (format!("clf{c}.w"), vec![h, 1]),
                (format!("clf{c}.b"), vec![1]),
            ] {
                let t = params.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Config(format!(
                        "checkpoint shape mismatch for {name}: {:?} vs {:?}",
                        t.shape(),
                        shape
                    )));
                }
            }
        }
        Ok(MilModel {
            input_dim: d,
            hidden: h,
            attention_dim: l,
            params,
        })
    }

    fn check_bag(&self, bag: &FeatureBag) -> Result<()> {
        if bag.n_patches() == 0 {
            return Err(Error::Dataset(format!("bag {} is empty", bag.slide_id)));
        }
        if bag.dim() != self.input_dim {
            return Err(Error::Shape {
                op: "mil_forward",
                lhs: bag.matrix.shape().to_vec(),
                rhs: vec![self.input_dim],
            });
        }
        Ok(())
    }

    fn register(&self, g: &mut Graph<f64>, trainable: bool) -> Result<MilNodes> {
        let mut node = |name: &str, g: &mut Graph<f64>| -> Result<NodeId> {
            let t = self.params.get(name)?.clone();
            Ok(if trainable { g.param(t) } else { g.constant(t) })
        };
        Ok(MilNodes {
            proj_w: node("proj.w", g)?,
            proj_b: node("proj.b", g)?,
            attn_v: [node("attn0.v", g)?, node("attn1.v", g)?],
            attn_u: [node("attn0.u", g)?, node("attn1.u", g)?],
            attn_w: [node("attn0.w", g)?, node("attn1.w", g)?],
            clf_w: [node("clf0.w", g)?, node("clf1.w", g)?],
            clf_b: [node("clf0.b", g)?, node("clf1.b", g)?],
        })
    }

    /// Build the full forward pass in `g` over a constant bag matrix.
    pub fn forward_graph(
        &self,
        g: &mut Graph<f64>,
        bag: &FeatureBag,
        trainable: bool,
    ) -> Result<MilForward> {
        self.check_bag(bag)?;
        let nodes = self.register(g, trainable)?;
        let x = g.constant(bag.matrix.clone());
        let n = bag.n_patches();
        let h_lin = g.matmul(x, nodes.proj_w)?;
        let h_lin = g.add_bias_row(h_lin, nodes.proj_b)?;
        let h = g.tanh(h_lin);

        let mut logit_nodes = Vec::with_capacity(N_CLASSES);
        let mut attention = Vec::with_capacity(N_CLASSES);
        let mut pooled = Vec::with_capacity(N_CLASSES);
        for c in 0..N_CLASSES {
            let hv = g.matmul(h, nodes.attn_v[c])?;
            let gate_t = g.tanh(hv);
            let hu = g.matmul(h, nodes.attn_u[c])?;
            let gate_s = g.sigmoid(hu);
            let gated = g.mul(gate_t, gate_s)?;
            let raw = g.matmul(gated, nodes.attn_w[c])?;
            let raw_vec = g.reshape(raw, &[n])?;
            let a = g.softmax_vec(raw_vec)?;
            let a_row = g.reshape(a, &[1, n])?;
            let z = g.matmul(a_row, h)?;
            let logit = g.matmul(z, nodes.clf_w[c])?;
            let logit = g.add_bias_row(logit, nodes.clf_b[c])?;
            logit_nodes.push(logit);
            attention.push(a);
            pooled.push(z);
        }
        let logits = g.concat_cols(logit_nodes[0], logit_nodes[1])?;
        Ok(MilForward {
            logits,
            attention: [attention[0], attention[1]],
            pooled: [pooled[0], pooled[1]],
            nodes,
        })
    }

    /// Per-class slide embeddings and attention weights.
    pub fn attention_pool(&self, bag: &FeatureBag) -> Result<(Tensor<f64>, AttentionScores)> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, bag, false)?;
        let mut z = Vec::with_capacity(N_CLASSES * self.hidden);
        for c in 0..N_CLASSES {
            z.extend_from_slice(g.value(fwd.pooled[c]).data());
        }
        let scores = AttentionScores {
            per_class: [
                g.value(fwd.attention[0]).data().to_vec(),
                g.value(fwd.attention[1]).data().to_vec(),
            ],
        };
        Ok((Tensor::from_vec(&[N_CLASSES, self.hidden], z)?, scores))
    }

    /// Slide logits `[logit_neg, logit_pos]`.
    pub fn mil_forward(&self, bag: &FeatureBag) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let fwd = self.forward_graph(&mut g, bag, false)?;
        g.value(fwd.logits).reshape(&[N_CLASSES])
    }

    /// Positive-class probability of a slide.
    pub fn slide_score(&self, bag: &FeatureBag) -> Result<f64> {
        let logits = self.mil_forward(bag)?;
        Ok(softmax(&logits, 0)?.data()[1])
    }

    fn collect_grads(&self, grads: &mut Gradients<f64>, nodes: &MilNodes) -> Result<ParamSet<f64>> {
        let pairs = [
            ("proj.w".to_string(), nodes.proj_w),
            ("proj.b".to_string(), nodes.proj_b),
            ("attn0.v".to_string(), nodes.attn_v[0]),
            ("attn1.v".to_string(), nodes.attn_v[1]),
            ("attn0.u".to_string(), nodes.attn_u[0]),
            ("attn1.u".to_string(), nodes.attn_u[1]),
            ("attn0.w".to_string(), nodes.attn_w[0]),
            ("attn1.w".to_string(), nodes.attn_w[1]),
            ("clf0.w".to_string(), nodes.clf_w[0]),
            ("clf1.w".to_string(), nodes.clf_w[1]),
            ("clf0.b".to_string(), nodes.clf_b[0]),
            ("clf1.b".to_string(), nodes.clf_b[1]),
        ];
        let mut out = ParamSet::new();
        for (name, id) in pairs {
            let g = match grads.take(id) {
                Some(g) => g,
                None => Tensor::zeros(self.params.get(&name)?.shape()),
            };
            out.insert(&name, g)?;
        }
        Ok(out)
    }
}

/// Plain per-patch linear classifier for the max-pooling baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    pub weights: Tensor<f64>,
    pub bias: f64,
}

impl PatchClassifier {
    pub fn predict_positive(&self, features: &[f64]) -> f64 {
        let z: f64 = self
            .weights
            .data()
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Traditional MIL: the slide score is the highest per-patch positive
/// probability.
pub fn max_pool_baseline(bag: &FeatureBag, classifier: &PatchClassifier) -> Result<f64> {
    if bag.n_patches() == 0 {
        return Err(Error::Dataset(format!("bag {} is empty", bag.slide_id)));
    }
    let d = bag.dim();
    Ok((0..bag.n_patches())
        .map(|i| classifier.predict_positive(&bag.matrix.data()[i * d..(i + 1) * d]))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Result of one training run.
#[derive(Debug)]
pub struct MilRun {
    pub model: MilModel,
    pub epoch_losses: Vec<f64>,
}

/// Train with cross entropy, one optimizer step per bag, bag order
/// reshuffled every epoch. Deterministic for a fixed seed.
pub fn train_mil(bags: &[FeatureBag], hyper: &MilHyper, seed: u64) -> Result<MilRun> {
    hyper.validate()?;
    if bags.is_empty() {
        return Err(Error::Dataset("mil training set is empty".into()));
    }
    let has = |l: u8| bags.iter().any(|b| b.label == l);
    if !has(0) || !has(1) {
        return Err(Error::Dataset(
            "mil training requires bags from both classes".into(),
        ));
    }
    let input_dim = bags[0].dim();
    let mut model = MilModel::init(
        input_dim,
        hyper,
        &mut stream(seed, &[STAGE_MIL_INIT]),
    )?;
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: hyper.learning_rate,
        weight_decay: hyper.weight_decay,
        momentum: 0.0,
    })?;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..bags.len()).collect();
        order.shuffle(&mut stream(seed, &[STAGE_MIL_EPOCH, epoch as u64]));
        let mut loss_sum = 0.0;
        for &i in &order {
            let bag = &bags[i];
            let mut g = Graph::new();
            let fwd = model.forward_graph(&mut g, bag, true)?;
            let loss = g.cross_entropy_mean(fwd.logits, &[bag.label as usize])?;
            loss_sum += g.value(loss).item();
            let mut grads = g.backward(loss).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("mil epoch {epoch} bag {}: {msg}", bag.slide_id))
                }
                other => other,
            })?;
            let grad_set = model.collect_grads(&mut grads, &fwd.nodes)?;
            opt.step(&mut model.params, &grad_set)?;
        }
        let mean = loss_sum / bags.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "mil epoch {epoch}: non-finite mean loss {mean}"
            )));
        }
        log::info!("mil epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(MilRun {
        model,
        epoch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridEntry {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchReport {
    pub entries: Vec<GridEntry>,
    pub best_learning_rate: f64,
    pub best_weight_decay: f64,
}

/// Run the 3x2 learning-rate / weight-decay grid, selecting the pair with
/// the best mean validation AUC across folds.
pub fn grid_search(
    bags: &[FeatureBag],
    folds: &[crate::eval::FoldSplit],
    base: &MilHyper,
    seed: u64,
) -> Result<GridSearchReport> {
    let bag_by_id = |id: &str| bags.iter().find(|b| b.slide_id == id);
    let mut entries = Vec::new();
    for lr in LR_GRID {
        for wd in WD_GRID {
            let hyper = MilHyper {
                learning_rate: lr,
                weight_decay: wd,
                ..*base
            };
            let mut aucs = Vec::new();
            for fold in folds {
                let train: Vec<FeatureBag> = fold
                    .train
                    .iter()
                    .filter_map(|id| bag_by_id(id).cloned())
                    .collect();
                let run = train_mil(&train, &hyper, seed ^ fold.fold_id as u64)?;
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for id in &fold.test {
                    if let Some(bag) = bag_by_id(id) {
                        scores.push(run.model.slide_score(bag)?);
                        labels.push(bag.label);
                    }
                }
                aucs.push(crate::eval::roc_auc(&scores, &labels)?);
            }
            entries.push(GridEntry {
                learning_rate: lr,
                weight_decay: wd,
                mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
            });
        }
    }
    let best = entries
        .iter()
        .cloned()
        .max_by(|a, b| a.mean_auc.partial_cmp(&b.mean_auc).expect("finite auc"))
        .expect("grid is nonempty");
    Ok(GridSearchReport {
        entries,
        best_learning_rate: best.learning_rate,
        best_weight_decay: best.weight_decay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_hyper() -> MilHyper {
        MilHyper {
            hidden: 4,
            attention_dim: 3,
            epochs: 5,
            ..MilHyper::default()
        }
    }

    fn random_bag(n: usize, d: usize, label: u8, seed: u64) -> FeatureBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureBag {
            slide_id: format!("bag{seed}"),
            label,
            matrix: Tensor::from_fn(&[n, d], |_| rng.random::<f64>() * 2.0 - 1.0),
            coords: (0..n).map(|i| (i as u32, 0)).collect(),
        }
    }

    fn model_for(d: usize, seed: u64) -> MilModel {
        MilModel::init(d, &small_hyper(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn singleton_bag_attention_is_one() {
        let model = model_for(6, 1);
        let bag = random_bag(1, 6, 0, 2);
        let (_, scores) = model.attention_pool(&bag).unwrap();
        assert_eq!(scores.per_class[0], vec![1.0]);
        assert_eq!(scores.per_class[1], vec![1.0]);
    }

    #[test]
    fn attention_sums_to_one_and_permutes_with_bag() {
        let model = model_for(6, 3);
        let bag = random_bag(7, 6, 1, 4);
        let (z, scores) = model.attention_pool(&bag).unwrap();
        for c in 0..2 {
            let sum: f64 = scores.per_class[c].iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(scores.per_class[c].iter().all(|&a| a >= 0.0));
        }
        // reverse the bag rows
        let n = bag.n_patches();
        let d = bag.dim();
        let mut rev = Vec::with_capacity(n * d);
        for i in (0..n).rev() {
            rev.extend_from_slice(&bag.matrix.data()[i * d..(i + 1) * d]);
        }
        let rev_bag = FeatureBag {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            matrix: Tensor::from_vec(&[n, d], rev).unwrap(),
            coords: bag.coords.iter().rev().cloned().collect(),
        };
        let (z2, scores2) = model.attention_pool(&rev_bag).unwrap();
        for c in 0..2 {
            let mut flipped = scores2.per_class[c].clone();
            flipped.reverse();
            for (a, b) in scores.per_class[c].iter().zip(&flipped) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_sized_instance_matches_independent_recomputation() {
        // N=3, D=2, H=2, L=2 with explicit parameters; recompute the pool
        // with plain loops
        let hyper = MilHyper {
            hidden: 2,
            attention_dim: 2,
            ..MilHyper::default()
        };
        let mut model =
            MilModel::init(2, &hyper, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // overwrite with small fixed parameters
        let set = |p: &mut ParamSet<f64>, name: &str, shape: &[usize], vals: &[f64]| {
            *p.get_mut(name).unwrap() = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        };
        set(&mut model.params, "proj.w", &[2, 2], &[0.3, -0.2, 0.1, 0.4]);
        set(&mut model.params, "proj.b", &[2], &[0.05, -0.05]);
        for c in 0..2 {
            let s = if c == 0 { 1.0 } else { -1.0 };
            set(
                &mut model.params,
                &format!("attn{c}.v"),
                &[2, 2],
                &[0.2 * s, 0.1, -0.3, 0.4 * s],
            );
            set(
                &mut model.params,
                &format!("attn{c}.u"),
                &[2, 2],
                &[0.5, -0.1 * s, 0.2, 0.3],
            );
            set(&mut model.params, &format!("attn{c}.w"), &[2, 1], &[0.7, -0.6 * s]);
            set(&mut model.params, &format!("clf{c}.w"), &[2, 1], &[0.9, -0.8]);
            set(&mut model.params, &format!("clf{c}.b"), &[1], &[0.01 * s]);
        }
        let bag = FeatureBag {
            slide_id: "hand".into(),
            label: 1,
            matrix: Tensor::from_vec(&[3, 2], vec![0.5, -0.4, 0.1, 0.9, -0.7, 0.2]).unwrap(),
            coords: vec![(0, 0), (0, 1), (0, 2)],
        };
        let (z, scores) = model.attention_pool(&bag).unwrap();

        // independent recomputation
        let g = |name: &str| model.params.get(name).unwrap().data().to_vec();
        let (pw, pb) = (g("proj.w"), g("proj.b"));
        let mut h = [[0f64; 2]; 3];
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = pb[j];
                for k in 0..2 {
                    acc += bag.matrix.data()[i * 2 + k] * pw[k * 2 + j];
                }
                h[i][j] = acc.tanh();
            }
        }
        for c in 0..2 {
            let (v, u, w) = (
                g(&format!("attn{c}.v")),
                g(&format!("attn{c}.u")),
                g(&format!("attn{c}.w")),
            );
            let mut raw = [0f64; 3];
            for i in 0..3 {
                let mut s = 0.0;
                for l in 0..2 {
                    let mut hv = 0.0;
                    let mut hu = 0.0;
                    for k in 0..2 {
                        hv += h[i][k] * v[k * 2 + l];
                        hu += h[i][k] * u[k * 2 + l];
                    }
                    s += w[l] * hv.tanh() * (1.0 / (1.0 + (-hu).exp()));
                }
                raw[i] = s;
            }
            let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
            let denom: f64 = exp.iter().sum();
            let a: Vec<f64> = exp.iter().map(|e| e / denom).collect();
            for i in 0..3 {
                assert_abs_diff_eq!(scores.per_class[c][i], a[i], epsilon = 1e-12);
            }
            for j in 0..2 {
                let zc: f64 = (0..3).map(|i| a[i] * h[i][j]).sum();
                assert_abs_diff_eq!(z.data()[c * 2 + j], zc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_classifier_heads_give_even_probability() {
        let mut model = model_for(4, 6);
        for c in 0..2 {
            *model.params.get_mut(&format!("clf{c}.w")).unwrap() =
                Tensor::zeros(&[model.hidden, 1]);
            *model.params.get_mut(&format!("clf{c}.b")).unwrap() = Tensor::zeros(&[1]);
        }
        let bag = random_bag(5, 4, 0, 7);
        let logits = model.mil_forward(&bag).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
        assert_abs_diff_eq!(model.slide_score(&bag).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bag_duplication_leaves_logits_unchanged() {
        let model = model_for(6, 8);
        let bag = random_bag(5, 6, 1, 9);
        let logits = model.mil_forward(&bag).unwrap();
        let n = bag.n_patches();
        let d = bag.dim();
        let mut doubled = bag.matrix.data().to_vec();
        doubled.extend_from_slice(bag.matrix.data());
        let dup = FeatureBag {
            slide_id: bag.slide_id.clone(),
            label: bag.label,
            matrix: Tensor::from_vec(&[2 * n, d], doubled).unwrap(),
            coords: (0..2 * n as u32).map(|i| (i, 0)).collect(),
        };
        let logits2 = model.mil_forward(&dup).unwrap();
        for (a, b) in logits.data().iter().zip(logits2.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn suppressed_patch_changes_nothing() {
        // a model with H = L = 1 whose attention score is controllable:
        // large-weight attention head saturates, so a patch scoring 50+
        // below the rest gets ~e^-50 weight
        let hyper = MilHyper {
            hidden: 1,
            attention_dim: 1,
            ..MilHyper::default()
        };
        let mut model = MilModel::init(1, &hyper, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let set = |p: &mut ParamSet<f64>, name: &str, shape: &[usize], vals: &[f64]| {
            *p.get_mut(name).unwrap() = Tensor::from_vec(shape, vals.to_vec()).unwrap();
        };
        set(&mut model.params, "proj.w", &[1, 1], &[5.0]);
        set(&mut model.params, "proj.b", &[1], &[0.0]);
        for c in 0..2 {
            set(&mut model.params, &format!("attn{c}.v"), &[1, 1], &[10.0]);
            set(&mut model.params, &format!("attn{c}.u"), &[1, 1], &[10.0]);
            set(&mut model.params, &format!("attn{c}.w"), &[1, 1], &[60.0]);
        }
        let base = FeatureBag {
            slide_id: "a".into(),
            label: 1,
            matrix: Tensor::from_vec(&[2, 1], vec![1.0, 0.9]).unwrap(),
            coords: vec![(0, 0), (0, 1)],
        };
        let (z1, s1) = model.attention_pool(&base).unwrap();
        // the appended patch maps to h=0, so its raw score is exactly 0
        // while the others sit near 60
        let with_cold = FeatureBag {
            slide_id: "a".into(),
            label: 1,
            matrix: Tensor::from_vec(&[3, 1], vec![1.0, 0.9, 0.0]).unwrap(),
            coords: vec![(0, 0), (0, 1), (0, 2)],
        };
        let (z2, s2) = model.attention_pool(&with_cold).unwrap();
        let raw_gap = 50.0;
        assert!(s2.per_class[0][2] < (-raw_gap as f64).exp());
        for (a, b) in z1.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-6, "pooled embedding moved: {a} vs {b}");
        }
        let _ = s1;
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let model = model_for(5, 11);
        let bag = random_bag(4, 5, 1, 12);
        let err = crate::gradcheck::grad_check(
            |p: &ParamSet<f64>| {
                let m = MilModel {
                    input_dim: model.input_dim,
                    hidden: model.hidden,
                    attention_dim: model.attention_dim,
                    params: p.clone(),
                };
                let mut g = Graph::new();
                let fwd = m.forward_graph(&mut g, &bag, true)?;
                let loss = g.cross_entropy_mean(fwd.logits, &[bag.label as usize])?;
                let mut grads = g.backward(loss)?;
                Ok((g.value(loss).item(), m.collect_grads(&mut grads, &fwd.nodes)?))
            },
            &model.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "grad check rel err {err}");
    }

    #[test]
    fn max_pool_baseline_semantics() {
        let d = 3;
        let clf = PatchClassifier {
            weights: Tensor::from_vec(&[d], vec![1.0, 0.0, 0.0]).unwrap(),
            bias: 0.0,
        };
        // identical patches -> the shared probability
        let flat = FeatureBag {
            slide_id: "flat".into(),
            label: 0,
            matrix: Tensor::from_vec(&[3, d], vec![0.2; 9]).unwrap(),
            coords: vec![(0, 0), (0, 1), (0, 2)],
        };
        let p = clf.predict_positive(&[0.2, 0.2, 0.2]);
        assert_abs_diff_eq!(max_pool_baseline(&flat, &clf).unwrap(), p, epsilon = 1e-12);

        // exhaustive-max oracle on random bags
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for seed in 0..20 {
            let bag = random_bag(rng.random_range(1..9), d, 0, 100 + seed);
            let got = max_pool_baseline(&bag, &clf).unwrap();
            let expected = (0..bag.n_patches())
                .map(|i| clf.predict_positive(&bag.matrix.data()[i * d..(i + 1) * d]))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn training_zero_epochs_returns_initialization() {
        let bags = vec![random_bag(4, 5, 0, 1), random_bag(4, 5, 1, 2)];
        let hyper = MilHyper {
            epochs: 0,
            ..small_hyper()
        };
        let run = train_mil(&bags, &hyper, 42).unwrap();
        let init = MilModel::init(5, &hyper, &mut stream(42, &[STAGE_MIL_INIT])).unwrap();
        assert_eq!(run.model.params, init.params);
    }

    #[test]
    fn training_separates_planted_direction() {
        // positive bags carry a few patches pushed far along a fixed
        // direction on top of small noise; loss should fall below 0.1
        // within 100 epochs
        let d = 8;
        let mut bags = Vec::new();
        for s in 0..40 {
            let label = (s % 2) as u8;
            let mut bag = random_bag(10, d, label, 200 + s);
            for v in bag.matrix.data_mut() {
                *v *= 0.05;
            }
            if label == 1 {
                for i in 0..6 {
                    for k in 0..4 {
                        bag.matrix.data_mut()[i * d + k] += 5.0;
                    }
                }
            }
            bags.push(bag);
        }
        let hyper = MilHyper {
            epochs: 100,
            hidden: 16,
            attention_dim: 8,
            ..MilHyper::default()
        };
        let run = train_mil(&bags, &hyper, 7).unwrap();
        let last = *run.epoch_losses.last().unwrap();
        assert!(last < 0.1, "final loss {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let bags = vec![
            random_bag(6, 4, 0, 31),
            random_bag(5, 4, 1, 32),
            random_bag(7, 4, 1, 33),
        ];
        let run1 = train_mil(&bags, &small_hyper(), 9).unwrap();
        let run2 = train_mil(&bags, &small_hyper(), 9).unwrap();
        assert_eq!(run1.model.params, run2.model.params);
        assert_eq!(run1.epoch_losses, run2.epoch_losses);
    }

    #[test]
    fn single_class_training_set_rejected() {
        let bags = vec![random_bag(4, 5, 1, 1), random_bag(4, 5, 1, 2)];
        assert!(matches!(
            train_mil(&bags, &small_hyper(), 1).unwrap_err(),
            Error::Dataset(_)
        ));
    }
}
