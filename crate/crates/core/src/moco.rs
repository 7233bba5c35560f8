//! Momentum-contrast pretraining of the patch encoder.
//!
//! Each step augments a batch of patches into two views, encodes the query
//! view with the trainable encoder and the key view with its momentum copy,
//! scores the query against its key and a FIFO queue of past keys, and
//! minimizes the contrastive loss
//! `-log( exp(q.k+/t) / (exp(q.k+/t) + sum_k- exp(q.k-/t)) )`.
//! Gradients flow through the query path only; keys and queue entries are
//! constants.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentationConfig};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{Sgd, SgdConfig};
use crate::params::ParamSet;
use crate::preprocess::PatchGrid;
use crate::raster::Rgb8Image;
use crate::rng::{stream, STAGE_SSL_AUGMENT, STAGE_SSL_EPOCH, STAGE_SSL_INIT, STAGE_SSL_SAMPLE};
use crate::scalar::Scalar;
use crate::synthgen::SlideManifest;
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoCoHyper {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Momentum coefficient of the key-encoder update.
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub feature_dim: usize,
}

impl Default for MoCoHyper {
    fn default() -> Self {
        MoCoHyper {
            temperature: 0.07,
            learning_rate: 0.06,
            epochs: 20,
            momentum: 0.999,
            queue_size: 1024,
            batch_size: 32,
            feature_dim: 64,
        }
    }
}

impl MoCoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1], got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0
            || self.queue_size < self.batch_size
            || self.queue_size % self.batch_size != 0
        {
            return Err(Error::Config(format!(
                "queue_size {} must be a positive multiple of batch_size {}",
                self.queue_size, self.batch_size
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Query and momentum (key) encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<T> {
    pub query: ParamSet<T>,
    pub key: ParamSet<T>,
}

impl<T: Scalar> EncoderState<T> {
    /// Key parameters start as an exact copy of the query parameters.
    pub fn init(query: ParamSet<T>) -> Self {
        let key = query.clone();
        EncoderState { query, key }
    }
}

/// `theta_k' = m * theta_k + (1 - m) * theta_q`, elementwise. `m = 1` and
/// `m = 0` short-circuit to exact copies.
pub fn momentum_update<T: Scalar>(
    key: &ParamSet<T>,
    query: &ParamSet<T>,
    m: f64,
) -> Result<ParamSet<T>> {
    if !key.shape_congruent(query) {
        return Err(Error::Shape {
            op: "momentum_update",
            lhs: vec![key.len()],
            rhs: vec![query.len()],
        });
    }
    if m == 1.0 {
        return Ok(key.clone());
    }
    if m == 0.0 {
        return Ok(query.clone());
    }
    let mt = T::from_f64(m);
    let one_minus = T::from_f64(1.0 - m);
    let mut out = ParamSet::new();
    for (name, k) in key.iter() {
        let q = query.get(name)?;
        out.insert(name, k.zip_map(q, "momentum_update", |kv, qv| mt * kv + one_minus * qv)?)?;
    }
    Ok(out)
}

const UNIT_NORM_TOL: f64 = 1e-4;

fn check_unit_rows<T: Scalar>(what: &str, rows: &Tensor<T>) -> Result<()> {
    let (m, n) = (rows.rows(), rows.cols());
    for i in 0..m {
        let norm = rows.data()[i * n..(i + 1) * n]
            .iter()
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
            .to_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{what}: row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// FIFO queue of past key features, all unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue<T> {
    buffer: Tensor<T>,
    capacity: usize,
    dim: usize,
    head: usize,
    fill: usize,
}

impl<T: Scalar> NegativeQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            buffer: Tensor::zeros(&[capacity, dim]),
            capacity,
            dim,
            head: 0,
            fill: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    /// Insert a batch of keys, evicting the oldest entries once full.
    /// The batch size must divide the capacity.
    pub fn enqueue(&mut self, keys: &Tensor<T>) -> Result<()> {
        if keys.shape().len() != 2 || keys.shape()[1] != self.dim {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: keys.shape().to_vec(),
                rhs: vec![self.capacity, self.dim],
            });
        }
        let b = keys.shape()[0];
        if b == 0 || self.capacity % b != 0 {
            return Err(Error::Config(format!(
                "enqueue: batch size {b} must divide queue capacity {}",
                self.capacity
            )));
        }
        check_unit_rows("enqueue", keys)?;
        for i in 0..b {
            let dst = (self.head + i) % self.capacity;
            self.buffer.data_mut()[dst * self.dim..(dst + 1) * self.dim]
                .copy_from_slice(&keys.data()[i * self.dim..(i + 1) * self.dim]);
        }
        self.head = (self.head + b) % self.capacity;
        self.fill = (self.fill + b).min(self.capacity);
        Ok(())
    }

    /// All stored keys as a `[fill, dim]` matrix (order irrelevant for the
    /// loss).
    pub fn negatives(&self) -> Tensor<T> {
        if self.fill == self.capacity {
            return self.buffer.clone();
        }
        Tensor::from_vec(
            &[self.fill, self.dim],
            self.buffer.data()[..self.fill * self.dim].to_vec(),
        )
        .expect("queue slice")
    }

    /// Stored keys in FIFO order (oldest first), for oracle comparison.
    pub fn fifo_snapshot(&self) -> Vec<Vec<T>> {
        let row = |i: usize| self.buffer.data()[i * self.dim..(i + 1) * self.dim].to_vec();
        if self.fill < self.capacity {
            (0..self.fill).map(row).collect()
        } else {
            (self.head..self.capacity)
                .chain(0..self.head)
                .map(row)
                .collect()
        }
    }
}

/// Contrastive loss for one query against its positive key and the queue.
/// Exactly zero when the queue is empty.
pub fn info_nce<T: Scalar>(
    q: &Tensor<T>,
    k_pos: &Tensor<T>,
    queue: &NegativeQueue<T>,
    temperature: f64,
) -> Result<T> {
    if q.shape() != k_pos.shape() || q.cols() != queue.dim() {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: q.shape().to_vec(),
            rhs: k_pos.shape().to_vec(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    for (what, t) in [("info_nce query", q), ("info_nce key", k_pos)] {
        let norm = t.norm_l2().to_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "{what}: norm {norm}, expected 1 within {UNIT_NORM_TOL}"
            )));
        }
    }
    let tau = T::from_f64(temperature);
    let mut logits = Vec::with_capacity(1 + queue.fill());
    logits.push(q.dot(k_pos)? / tau);
    let negs = queue.negatives();
    for i in 0..queue.fill() {
        let row = &negs.data()[i * queue.dim()..(i + 1) * queue.dim()];
        let s = q
            .data()
            .iter()
            .zip(row)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        logits.push(s / tau);
    }
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Graph version over a batch: `q` is `[B,D]` in-graph, keys and negatives
/// are constants. Returns the scalar mean loss node.
pub fn info_nce_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    keys: &Tensor<T>,
    negatives: Option<&Tensor<T>>,
    temperature: f64,
) -> Result<NodeId> {
    let b = g.value(q).rows();
    let k_const = g.constant(keys.clone());
    let pos = g.row_dot(q, k_const)?;
    let logits = match negatives {
        Some(negs) if negs.rows() > 0 => {
            let n_const = g.constant(negs.clone());
            let neg = g.matmul_trans_b(q, n_const)?;
            g.concat_cols(pos, neg)?
        }
        _ => pos,
    };
    let scaled = g.scale(logits, T::from_f64(1.0 / temperature));
    g.cross_entropy_mean(scaled, &vec![0; b])
}

/// A patch selected for self-supervised training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRef {
    pub slide_id: String,
    pub label: u8,
    pub row: usize,
    pub col: usize,
}

/// Sample up to `patches_per_slide` kept patches per slide, without
/// replacement, drawing the same number of slides from each class. Slides
/// without kept patches are skipped; an empty class is an error.
pub fn sample_ssl_dataset(
    manifest: &SlideManifest,
    grids: &[PatchGrid],
    patches_per_slide: usize,
    seed: u64,
) -> Result<Vec<PatchRef>> {
    let grid_for = |id: &str| grids.iter().find(|g| g.slide_id == id);
    let mut usable: Vec<(usize, &str, u8)> = Vec::new();
    for (i, row) in manifest.rows.iter().enumerate() {
        if let Some(g) = grid_for(&row.slide_id) {
            if g.kept_count() > 0 {
                usable.push((i, row.slide_id.as_str(), row.label));
            }
        }
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &(i, _, label) in &usable {
        if label > 1 {
            return Err(Error::Dataset(format!("unexpected label {label}")));
        }
        by_class[label as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::Dataset(
            "ssl sampling requires slides from both classes".into(),
        ));
    }
    let per_class = by_class[0].len().min(by_class[1].len());
    let mut selected: Vec<usize> = Vec::new();
    for (label, class) in by_class.iter().enumerate() {
        let mut ids = class.clone();
        ids.shuffle(&mut stream(seed, &[STAGE_SSL_SAMPLE, label as u64]));
        ids.truncate(per_class);
        selected.extend(ids);
    }
    selected.sort_unstable();

    let mut out = Vec::new();
    for slide_index in selected {
        let row = &manifest.rows[slide_index];
        let grid = grid_for(&row.slide_id).expect("usable slide has a grid");
        let kept: Vec<(usize, usize)> = grid.kept().map(|r| (r.row, r.col)).collect();
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.shuffle(&mut stream(
            seed,
            &[STAGE_SSL_SAMPLE, 2, slide_index as u64],
        ));
        for &i in order.iter().take(patches_per_slide.min(kept.len())) {
            out.push(PatchRef {
                slide_id: row.slide_id.clone(),
                label: row.label,
                row: kept[i].0,
                col: kept[i].1,
            });
        }
    }
    Ok(out)
}

/// Result of a pretraining run.
#[derive(Debug)]
pub struct SslRun<T> {
    pub state: EncoderState<T>,
    /// Mean contrastive loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train the query encoder with momentum contrast over materialized patch
/// pixels. Deterministic for a fixed seed at any thread count: per-sample
/// augmentation streams are keyed by (seed, epoch, dataset index) and all
/// reductions run in fixed order.
pub fn train_ssl<T: Scalar>(
    encoder: &Encoder,
    patches: &[Rgb8Image],
    aug: &AugmentationConfig,
    hyper: &MoCoHyper,
    seed: u64,
) -> Result<SslRun<T>> {
    hyper.validate()?;
    aug.validate()?;
    if patches.is_empty() {
        return Err(Error::Dataset("ssl training set is empty".into()));
    }
    if encoder.config().feature_dim != hyper.feature_dim {
        return Err(Error::Config(format!(
            "encoder feature_dim {} != moco feature_dim {}",
            encoder.config().feature_dim,
            hyper.feature_dim
        )));
    }
    let mut init_rng = stream(seed, &[STAGE_SSL_INIT]);
    let query: ParamSet<T> = encoder.init_params(&mut init_rng);
    let mut state = EncoderState::init(query);
    let mut queue: NegativeQueue<T> = NegativeQueue::new(hyper.queue_size, hyper.feature_dim);
    let mut opt = Sgd::new(SgdConfig {
        learning_rate: hyper.learning_rate,
        weight_decay: 0.0,
        momentum: 0.0,
    })?;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut stream(seed, &[STAGE_SSL_EPOCH, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        // partial trailing batches are dropped to keep the queue aligned
        for (batch_idx, batch) in order.chunks_exact(hyper.batch_size).enumerate() {
            let views: Vec<(Rgb8Image, Rgb8Image)> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(seed, &[STAGE_SSL_AUGMENT, epoch as u64, i as u64]);
                    augment_pair(&patches[i], aug, &mut rng)
                })
                .collect();
            let q_views: Vec<Rgb8Image> = views.iter().map(|(q, _)| q.clone()).collect();
            let k_views: Vec<Rgb8Image> = views.iter().map(|(_, k)| k.clone()).collect();

            let keys = encoder.embed(&state.key, &k_views)?;
            let x = encoder.batch_stem(&q_views)?;
            let mut g = Graph::new();
            let xn = g.constant(x);
            let nodes = encoder.register(&mut g, &state.query, true)?;
            let q = encoder.forward(&mut g, xn, &nodes)?;
            let negatives = (queue.fill() > 0).then(|| queue.negatives());
            let loss = info_nce_graph(&mut g, q, &keys, negatives.as_ref(), hyper.temperature)?;
            let loss_value = g.value(loss).item().to_f64();
            let mut grads = g.backward(loss).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "ssl epoch {epoch} batch {batch_idx}: {msg}"
                )),
                other => other,
            })?;
            let grad_set = encoder.collect_grads(&mut grads, &nodes, &state.query)?;
            opt.step(&mut state.query, &grad_set)?;
            state.key = momentum_update(&state.key, &state.query, hyper.momentum)?;
            queue.enqueue(&keys)?;
            loss_sum += loss_value;
            batches += 1;
        }
        let mean = if batches > 0 {
            loss_sum / batches as f64
        } else {
            0.0
        };
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "ssl epoch {epoch}: non-finite mean loss {mean}"
            )));
        }
        log::info!("ssl epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(SslRun {
        state,
        epoch_losses,
    })
}

/// Write the per-epoch loss log as `epoch,mean_loss`.
pub fn write_loss_csv(losses: &[f64], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_vec(dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Tensor::from_fn(&[dim], |_| rng.random::<f64>() * 2.0 - 1.0);
        let norm = v.norm_l2();
        for x in v.data_mut() {
            *x /= norm;
        }
        v
    }

    #[test]
    fn info_nce_empty_queue_is_exactly_zero() {
        let q = unit_vec(8, 1);
        let k = unit_vec(8, 2);
        let queue = NegativeQueue::new(16, 8);
        assert_eq!(info_nce(&q, &k, &queue, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_equal_similarities_is_ln_k_plus_one() {
        // q.k+ == q.k- for all negatives and a full queue of K entries
        let dim = 4;
        let q = Tensor::from_vec(&[dim], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let k = Tensor::from_vec(&[dim], vec![0.0, 1.0, 0.0, 0.0]).unwrap(); // q.k+ = 0
        let mut queue = NegativeQueue::new(2, dim);
        let negs = Tensor::from_vec(
            &[2, dim],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap(); // q.k- = 0 each
        queue.enqueue(&negs).unwrap();
        let loss = info_nce(&q, &k, &queue, 1.0).unwrap();
        assert_abs_diff_eq!(loss, 3f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn info_nce_hand_example() {
        // q.k+ = 1, two negatives at q.k- = 0, tau = 1:
        // loss = -ln(e / (e + 2))
        let dim = 3;
        let q = Tensor::from_vec(&[dim], vec![1.0, 0.0, 0.0]).unwrap();
        let k = q.clone();
        let mut queue = NegativeQueue::new(2, dim);
        queue
            .enqueue(
                &Tensor::from_vec(&[2, dim], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        let loss = info_nce(&q, &k, &queue, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(loss, -(e / (e + 2.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.5514, epsilon = 1e-4);
    }

    #[test]
    fn info_nce_rejects_unnormalized_inputs() {
        let q = Tensor::from_vec(&[2], vec![2.0, 0.0]).unwrap();
        let k = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let queue = NegativeQueue::new(4, 2);
        assert!(matches!(
            info_nce(&q, &k, &queue, 0.07).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn info_nce_monotone_in_similarities() {
        // fix a full queue; loss must decrease as q.k+ rises and increase
        // as a negative similarity rises
        let dim = 3;
        let mk = |x: f64, y: f64| {
            let n = (x * x + y * y).sqrt();
            Tensor::from_vec(&[dim], vec![x / n, y / n, 0.0]).unwrap()
        };
        let q = Tensor::from_vec(&[dim], vec![1.0, 0.0, 0.0]).unwrap();
        let mut queue = NegativeQueue::new(1, dim);
        queue
            .enqueue(&Tensor::from_vec(&[1, dim], vec![0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let l_low = info_nce(&q, &mk(0.2, 1.0), &queue, 0.5).unwrap();
        let l_high = info_nce(&q, &mk(0.8, 1.0), &queue, 0.5).unwrap();
        assert!(l_high < l_low);

        let k = mk(0.5, 1.0);
        let mut hot_queue = NegativeQueue::new(1, dim);
        hot_queue
            .enqueue(&mk(0.9, 1.0).reshape(&[1, dim]).unwrap())
            .unwrap();
        let mut cold_queue = NegativeQueue::new(1, dim);
        cold_queue
            .enqueue(&mk(0.1, 1.0).reshape(&[1, dim]).unwrap())
            .unwrap();
        assert!(
            info_nce(&q, &k, &hot_queue, 0.5).unwrap()
                > info_nce(&q, &k, &cold_queue, 0.5).unwrap()
        );
    }

    #[test]
    fn momentum_update_identities() {
        let mut k = ParamSet::new();
        k.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let mut q = ParamSet::new();
        q.insert("w", Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        assert_eq!(momentum_update(&k, &q, 1.0).unwrap(), k);
        assert_eq!(momentum_update(&k, &q, 0.0).unwrap(), q);
        let half = momentum_update(&k, &q, 0.999).unwrap();
        assert_eq!(half.get("w").unwrap().data(), &[0.999]);
    }

    #[test]
    fn momentum_update_shape_mismatch() {
        let mut k = ParamSet::new();
        k.insert("w", Tensor::<f64>::zeros(&[2])).unwrap();
        let mut q = ParamSet::new();
        q.insert("w", Tensor::<f64>::zeros(&[3])).unwrap();
        assert!(momentum_update(&k, &q, 0.5).is_err());
    }

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::from_fn(&[n, dim], |_| rng.random::<f64>() * 2.0 - 1.0);
        for i in 0..n {
            let norm = t.data()[i * dim..(i + 1) * dim]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            for v in &mut t.data_mut()[i * dim..(i + 1) * dim] {
                *v /= norm;
            }
        }
        t
    }

    #[test]
    fn queue_fifo_semantics() {
        let mut queue = NegativeQueue::new(4, 3);
        let ab = unit_rows(2, 3, 1);
        let cd = unit_rows(2, 3, 2);
        let ef = unit_rows(2, 3, 3);
        queue.enqueue(&ab).unwrap();
        assert_eq!(queue.fill(), 2);
        queue.enqueue(&cd).unwrap();
        queue.enqueue(&ef).unwrap();
        assert_eq!(queue.fill(), 4);
        let snapshot = queue.fifo_snapshot();
        // a,b were evicted; FIFO order is c,d,e,f
        assert_eq!(snapshot[0], cd.row(0).unwrap().data());
        assert_eq!(snapshot[1], cd.row(1).unwrap().data());
        assert_eq!(snapshot[2], ef.row(0).unwrap().data());
        assert_eq!(snapshot[3], ef.row(1).unwrap().data());
    }

    #[test]
    fn queue_matches_reference_ring_buffer() {
        use std::collections::VecDeque;
        let mut queue = NegativeQueue::new(8, 2);
        let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for step in 0..1000 {
            let b = [1, 2, 4, 8][rng.random_range(0..4)];
            let batch = unit_rows(b, 2, 1000 + step);
            queue.enqueue(&batch).unwrap();
            for i in 0..b {
                reference.push_back(batch.row(i).unwrap().data().to_vec());
                if reference.len() > 8 {
                    reference.pop_front();
                }
            }
            let snapshot = queue.fifo_snapshot();
            assert_eq!(snapshot.len(), reference.len());
            for (a, b) in snapshot.iter().zip(reference.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn queue_rejects_non_unit_rows() {
        let mut queue = NegativeQueue::new(4, 2);
        let bad = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        assert!(matches!(
            queue.enqueue(&bad).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn ssl_dataset_sampling_counts() {
        use crate::preprocess::{PatchGrid, PatchRecord};
        use crate::synthgen::ManifestRow;
        // paper-scale arithmetic: 120 slides x 2000 kept patches
        let mut rows = Vec::new();
        let mut grids = Vec::new();
        for i in 0..120 {
            let id = format!("s{i:04}");
            rows.push(ManifestRow {
                slide_id: id.clone(),
                path: format!("slides/{id}.png"),
                label: (i % 2) as u8,
            });
            let records: Vec<PatchRecord> = (0..2500)
                .map(|p| PatchRecord {
                    row: p / 50,
                    col: p % 50,
                    kept: true,
                    drop_reason: None,
                })
                .collect();
            grids.push(PatchGrid {
                slide_id: id,
                patch_px_source: 224,
                output_px: 224,
                grid_rows: 50,
                grid_cols: 50,
                records,
            });
        }
        let manifest = SlideManifest { rows };
        let dataset = sample_ssl_dataset(&manifest, &grids, 2000, 3).unwrap();
        assert_eq!(dataset.len(), 240_000);

        // clamping: a slide with only 10 kept patches yields 10 refs
        let manifest_small = SlideManifest {
            rows: vec![
                ManifestRow {
                    slide_id: "a".into(),
                    path: "a.png".into(),
                    label: 0,
                },
                ManifestRow {
                    slide_id: "b".into(),
                    path: "b.png".into(),
                    label: 1,
                },
            ],
        };
        let grids_small = vec![
            PatchGrid {
                slide_id: "a".into(),
                patch_px_source: 16,
                output_px: 16,
                grid_rows: 2,
                grid_cols: 5,
                records: (0..10)
                    .map(|p| PatchRecord {
                        row: p / 5,
                        col: p % 5,
                        kept: true,
                        drop_reason: None,
                    })
                    .collect(),
            },
            PatchGrid {
                slide_id: "b".into(),
                patch_px_source: 16,
                output_px: 16,
                grid_rows: 10,
                grid_cols: 10,
                records: (0..100)
                    .map(|p| PatchRecord {
                        row: p / 10,
                        col: p % 10,
                        kept: true,
                        drop_reason: None,
                    })
                    .collect(),
            },
        ];
        let dataset = sample_ssl_dataset(&manifest_small, &grids_small, 50, 3).unwrap();
        let from_a = dataset.iter().filter(|p| p.slide_id == "a").count();
        let from_b = dataset.iter().filter(|p| p.slide_id == "b").count();
        assert_eq!(from_a, 10);
        assert_eq!(from_b, 50);
        // no duplicates within a slide
        let mut coords: Vec<_> = dataset
            .iter()
            .filter(|p| p.slide_id == "a")
            .map(|p| (p.row, p.col))
            .collect();
        coords.sort_unstable();
        coords.dedup();
        assert_eq!(coords.len(), from_a);

        // single-class corpus is an error
        let manifest_one = SlideManifest {
            rows: vec![ManifestRow {
                slide_id: "a".into(),
                path: "a.png".into(),
                label: 0,
            }],
        };
        assert!(matches!(
            sample_ssl_dataset(&manifest_one, &grids_small, 5, 3).unwrap_err(),
            Error::Dataset(_)
        ));
    }
}
