//! Stage two: the dual-path temporal aggregator over cached per-visit
//! embeddings. The single-frame path scores every visit with one shared
//! instance classifier; the sequence path compresses a variable-length
//! visit sequence into a fixed-size relationship matrix B = Σᵢ kᵢcᵢᵀ, runs a
//! 1-D convolution over B's columns, pools, and classifies. Training
//! minimizes λ₁·loss_single + λ₂·loss_seq.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Binder, Linear, MultiHeadAttention, ParamId, ParamSet};
use crate::optim::{clip_grad_norm, orthogonal_init, AdamW, AdamWConfig, EarlyStopping, Schedule};
use crate::tensor::{elem, Element, Graph, Result, Tensor, TensorError, Var};

/// Sequence-path architecture choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Relationship matrix + Conv1D + head (the main design).
    Bilinear,
    /// Single-head self-attention over frames, mean pool, linear head.
    SelfAttention,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatorConfig {
    /// Embedding dimension D of the cached per-visit features.
    pub d: usize,
    /// Projection dimension D' of the relationship matrix.
    pub d_prime: usize,
    pub conv_out_channels: usize,
    pub conv_kernel: usize,
    pub n_class: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub variant: Variant,
}

impl AggregatorConfig {
    /// Default for embedding dimension `d`: D' = 2D, conv channels = D,
    /// kernel 3, binary classes, λ = 1.5 : 1.
    pub fn for_dim(d: usize) -> Self {
        Self {
            d,
            d_prime: 2 * d,
            conv_out_channels: d,
            conv_kernel: 3,
            n_class: 2,
            lambda1: 1.5,
            lambda2: 1.0,
            variant: Variant::Bilinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.conv_out_channels == 0 || self.n_class < 2 {
            return Err(TensorError::Invalid { op: "aggregator_config", msg: "zero-sized dimension".into() });
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(TensorError::Invalid {
                op: "aggregator_config",
                msg: format!("conv kernel {} must be odd", self.conv_kernel),
            });
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return Err(TensorError::Invalid {
                op: "aggregator_config",
                msg: format!("loss weights {}:{} invalid", self.lambda1, self.lambda2),
            });
        }
        Ok(())
    }
}

/// One training/evaluation example: a stack of frame embeddings plus labels.
#[derive(Debug, Clone)]
pub struct SeqExample<T: Element> {
    /// M×D embedding stack, one row per visit in time order.
    pub frames: Tensor<T>,
    /// Per-frame diagnosis labels, required when λ₁ > 0.
    pub frame_labels: Option<Vec<usize>>,
    /// Sequence-level prognosis label.
    pub label: usize,
}

#[derive(Debug)]
struct BilinearParts {
    a_k: Linear,
    a_c: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    v2: Linear,
}

#[derive(Debug)]
struct AttentionParts {
    attn: MultiHeadAttention,
    head: Linear,
}

/// Parameters of the dual-path aggregator.
#[derive(Debug)]
pub struct AggregatorModel<T: Element> {
    pub cfg: AggregatorConfig,
    pub params: ParamSet<T>,
    instance: Linear,
    bilinear: Option<BilinearParts>,
    attention: Option<AttentionParts>,
}

impl<T: Element> AggregatorModel<T> {
    pub fn init(cfg: AggregatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let instance = Linear::init(&mut params, "instance.l", cfg.d, cfg.n_class, &mut rng)?;
        let (bilinear, attention) = match cfg.variant {
            Variant::Bilinear => {
                let a_k = Linear::init(&mut params, "seq.a_k", cfg.d, cfg.d_prime, &mut rng)?;
                let a_c = Linear::init(&mut params, "seq.a_c", cfg.d, cfg.d_prime, &mut rng)?;
                let conv_w = params.add(
                    "seq.conv.w",
                    orthogonal_init(&[cfg.conv_out_channels, cfg.d_prime, cfg.conv_kernel], &mut rng)?,
                    false,
                );
                let conv_b = params.add("seq.conv.b", Tensor::zeros(vec![cfg.conv_out_channels]), true);
                let v2 = Linear::init(&mut params, "seq.v2", cfg.conv_out_channels, cfg.n_class, &mut rng)?;
                (Some(BilinearParts { a_k, a_c, conv_w, conv_b, v2 }), None)
            }
            Variant::SelfAttention => {
                let attn = MultiHeadAttention::init(&mut params, "seq.attn", cfg.d, 1, false, &mut rng)?;
                let head = Linear::init(&mut params, "seq.head", cfg.d, cfg.n_class, &mut rng)?;
                (None, Some(AttentionParts { attn, head }))
            }
        };
        Ok(Self { cfg, params, instance, bilinear, attention })
    }

    /// Per-frame logits through the shared instance classifier: M×n_class.
    pub fn single_path(&self, g: &mut Graph<T>, binder: &mut Binder, frames: Var) -> Result<Var> {
        self.instance.forward(g, &self.params, binder, frames)
    }

    /// Relationship matrix B = Σᵢ kᵢcᵢᵀ of fixed shape D'×D'.
    pub fn relation_matrix(&self, g: &mut Graph<T>, binder: &mut Binder, frames: Var) -> Result<Var> {
        let parts = self.bilinear.as_ref().ok_or(TensorError::Invalid {
            op: "relation_matrix",
            msg: "model built with the self-attention variant".into(),
        })?;
        let k = parts.a_k.forward(g, &self.params, binder, frames)?; // M×D'
        let c = parts.a_c.forward(g, &self.params, binder, frames)?;
        let kt = g.transpose(k)?; // D'×M
        let ct = g.transpose(c)?;
        g.outer_accumulate(kt, ct)
    }

    /// Sequence-level logits (1×n_class) for a stack of frames.
    pub fn sequence_logits(&self, g: &mut Graph<T>, binder: &mut Binder, frames: Var) -> Result<Var> {
        match self.cfg.variant {
            Variant::Bilinear => {
                let parts = self.bilinear.as_ref().unwrap();
                let b = self.relation_matrix(g, binder, frames)?;
                // B: rows = channels, columns = time steps
                let w = binder.var(g, &self.params, parts.conv_w);
                let bias = binder.var(g, &self.params, parts.conv_b);
                let conv = g.conv1d(b, w, bias)?;
                let pooled = g.global_avg_pool(conv)?;
                let row = g.reshape(pooled, vec![1, self.cfg.conv_out_channels])?;
                parts.v2.forward(g, &self.params, binder, row)
            }
            Variant::SelfAttention => {
                let parts = self.attention.as_ref().unwrap();
                let mixed = parts.attn.forward(g, &self.params, binder, frames)?;
                let pooled = g.mean_axis(mixed, 0)?;
                let row = g.reshape(pooled, vec![1, self.cfg.d])?;
                parts.head.forward(g, &self.params, binder, row)
            }
        }
    }

    /// Weighted dual loss. Paths with a zero weight are not built at all,
    /// so their parameters never enter the graph.
    pub fn dual_loss(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        example: &SeqExample<T>,
    ) -> Result<DualLoss> {
        let (l1, l2) = (self.cfg.lambda1, self.cfg.lambda2);
        let frames = g.leaf(example.frames.clone(), false);
        let mut total: Option<Var> = None;
        let mut single = None;
        let mut seq = None;

        if l1 > 0.0 {
            let labels = example.frame_labels.as_ref().ok_or(TensorError::Invalid {
                op: "dual_loss",
                msg: "λ₁ > 0 requires per-frame labels".into(),
            })?;
            if labels.len() != example.frames.shape()[0] {
                return Err(TensorError::Invalid {
                    op: "dual_loss",
                    msg: format!("{} frame labels for {} frames", labels.len(), example.frames.shape()[0]),
                });
            }
            let logits = self.single_path(g, binder, frames)?;
            let loss = g.cross_entropy_mean(logits, labels)?;
            single = Some(loss);
            total = Some(g.scale(loss, elem::<T>(l1))?);
        }
        if l2 > 0.0 {
            let logits = self.sequence_logits(g, binder, frames)?;
            let loss = g.cross_entropy_mean(logits, &[example.label])?;
            seq = Some(loss);
            let weighted = g.scale(loss, elem::<T>(l2))?;
            total = Some(match total {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        Ok(DualLoss { total: total.expect("validated: at least one λ > 0"), single, seq })
    }

    /// Inference through the sequence path: predicted class and the
    /// probability assigned to class 1.
    pub fn predict(&self, frames: &Tensor<T>) -> Result<(usize, f64)> {
        let mut g = Graph::new();
        let mut binder = Binder::new(&self.params);
        let f = g.leaf(frames.clone(), false);
        let logits = self.sequence_logits(&mut g, &mut binder, f)?;
        let probs = g.softmax(logits, 1)?;
        let p = g.value(probs).data();
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        Ok((best, p[1].to_f64().unwrap()))
    }

    /// Exact scalar parameter count, per named component plus the total.
    pub fn param_count(&self) -> ParamCount {
        let mut components = vec![("instance_classifier".to_string(), self.params.count_params("instance."))];
        match self.cfg.variant {
            Variant::Bilinear => {
                components.push(("a_k".into(), self.params.count_params("seq.a_k")));
                components.push(("a_c".into(), self.params.count_params("seq.a_c")));
                components.push(("conv".into(), self.params.count_params("seq.conv")));
                components.push(("v2".into(), self.params.count_params("seq.v2")));
            }
            Variant::SelfAttention => {
                components.push(("attention".into(), self.params.count_params("seq.attn")));
                components.push(("head".into(), self.params.count_params("seq.head")));
            }
        }
        let total = components.iter().map(|(_, n)| n).sum();
        ParamCount { components, total }
    }

    /// Snapshot of the sequence-path parameters (everything under "seq."),
    /// used to verify that λ₂ = 0 leaves them untouched.
    pub fn seq_path_params(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().filter(|(n, _)| n.starts_with("seq.")).map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

/// Loss nodes produced by one dual-path forward.
pub struct DualLoss {
    pub total: Var,
    pub single: Option<Var>,
    pub seq: Option<Var>,
}

/// Parameter-count report.
#[derive(Debug, Clone)]
pub struct ParamCount {
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_single: f64,
    pub loss_seq: f64,
    pub loss_total: f64,
    pub val_acc: f64,
    pub val_auc: Option<f64>,
}

/// Training-loop knobs. The defaults mirror the stated procedure: at most
/// 50 epochs, cosine 1e-4 → 5e-5, clipping at 5.0, early stopping with
/// patience 10 on validation accuracy.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub patience: Option<usize>,
    pub lr_start: f64,
    pub lr_end: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_epochs: 50, patience: Some(10), lr_start: 1e-4, lr_end: 5e-5, clip_norm: 5.0, seed: 0 }
    }
}

/// Train an aggregator; returns the best-epoch model and the full log.
/// Model selection is on validation accuracy (earliest best epoch).
pub fn train_aggregator<T: Element>(
    train: &[SeqExample<T>],
    val: &[SeqExample<T>],
    cfg: AggregatorConfig,
    opts: TrainOptions,
) -> Result<(AggregatorModel<T>, Vec<EpochLog>)> {
    if train.is_empty() || val.is_empty() {
        return Err(TensorError::Invalid { op: "train_aggregator", msg: "empty train or validation split".into() });
    }
    let mut model = AggregatorModel::init(cfg, opts.seed)?;
    let mut opt = AdamW::new(AdamWConfig::aggregator(), model.params.len()).with_exempt(model.params.exempt_flags());
    let sched = Schedule::Cosine { lr_start: opts.lr_start, lr_end: opts.lr_end, total_epochs: opts.max_epochs };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0002);
    let mut stopper = EarlyStopping::new(opts.patience.unwrap_or(usize::MAX));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<Vec<Tensor<T>>> = None;

    for epoch in 0..opts.max_epochs {
        let lr = sched.lr(epoch)?;
        order.shuffle(&mut rng);
        let (mut sum_single, mut sum_seq, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &order {
            let mut g = Graph::new();
            let mut binder = Binder::new(&model.params);
            let losses = model.dual_loss(&mut g, &mut binder, &train[i])?;
            sum_total += g.value(losses.total).item().to_f64().unwrap();
            if let Some(v) = losses.single {
                sum_single += g.value(v).item().to_f64().unwrap();
            }
            if let Some(v) = losses.seq {
                sum_seq += g.value(v).item().to_f64().unwrap();
            }
            g.backward(losses.total)?;
            let mut grads = binder.grads(&g);
            clip_grad_norm(&mut grads, opts.clip_norm)?;
            opt.step(model.params.tensors_mut(), &grads, lr)?;
        }
        let n = train.len() as f64;
        let (val_acc, val_auc) = evaluate(&model, val)?;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            loss_single: sum_single / n,
            loss_seq: sum_seq / n,
            loss_total: sum_total / n,
            val_acc,
            val_auc,
        });
        let improved_to = stopper.best_epoch();
        let stop = stopper.record(val_acc);
        if stopper.best_epoch() != improved_to {
            best = Some(model.params.tensors().to_vec());
        }
        if stop {
            break;
        }
    }
    if let Some(tensors) = best {
        for (slot, t) in model.params.tensors_mut().iter_mut().zip(tensors) {
            *slot = t;
        }
    }
    Ok((model, log))
}

/// Accuracy and AUC of a model on labeled sequences. AUC is `None` when the
/// split is single-class.
pub fn evaluate<T: Element>(model: &AggregatorModel<T>, data: &[SeqExample<T>]) -> Result<(f64, Option<f64>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for ex in data {
        let (class, p1) = model.predict(&ex.frames)?;
        preds.push(class);
        scores.push(p1);
        labels.push(ex.label);
    }
    let acc = crate::eval::accuracy(&preds, &labels)?;
    let auc = crate::eval::roc_auc(&scores, &labels).ok();
    Ok((acc, auc))
}
