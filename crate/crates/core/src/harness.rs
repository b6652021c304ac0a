//! End-to-end orchestration: stage one (masked-autoencoder pretraining and
//! feature extraction) feeding stage two (cross-validated aggregator
//! training), plus the ablation grids. Every entry point is seed-pinned and
//! produces identical results on identical inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{
    evaluate, train_aggregator, AggregatorConfig, AggregatorModel, EpochLog, SeqExample,
    TrainOptions, Variant,
};
use crate::data::{
    fixed_length_filter, generate_cohort, kfold_plan, leakage_filter_cohort, preprocess_image,
    stratified_split, visit_key, EmbeddingStore, Image, PatientSequence, SplitIndices,
    SynthConfig,
};
use crate::eval::{DeltaRow, EvalReport, FoldScore, LambdaRow, MannWhitney, Significance, WidthRow};
use crate::mae::{pretrain, EncoderModel, MAEConfig, PretrainOptions};
use crate::tensor::{Result, Tensor, TensorError};

/// λ₁:λ₂ grid of the loss-weight ablation, in report order.
pub const LAMBDA_GRID: [(f64, f64); 5] =
    [(0.0, 1.0), (0.5, 1.0), (1.0, 0.0), (1.0, 1.0), (1.5, 1.0)];

/// Deterministic eval-mode preprocessing of one image.
pub fn preprocessed_tensor(img: &Image, side: usize) -> Result<Tensor<f32>> {
    // eval mode never consumes randomness; the rng is a fixed placeholder
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    preprocess_image(img, side, false, &mut rng)
}

/// Run the encoder over `(id, image tensor)` pairs and collect embeddings.
pub fn extract_embeddings(
    model: &EncoderModel<f32>,
    items: &[(String, Tensor<f32>)],
) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(model.cfg.encoder_dim)?;
    for (id, tensor) in items {
        let emb = model.extract_embedding(tensor)?;
        store.insert(id, emb.data().to_vec())?;
    }
    Ok(store)
}

/// Assemble training examples by stacking each sequence's cached embeddings.
///
/// The single path is supervised with the sequence outcome assigned to
/// every frame: after leakage filtering all acquisition-time frame labels
/// are negative by construction, so the per-frame diagnosis carries no
/// signal and the outcome label is the per-image supervision that remains.
pub fn examples_from_store(
    cohort: &[PatientSequence],
    store: &EmbeddingStore,
) -> Result<Vec<SeqExample<f32>>> {
    let d = store.dim();
    let mut examples = Vec::with_capacity(cohort.len());
    for seq in cohort {
        let mut data = Vec::with_capacity(seq.len() * d);
        for v in &seq.visits {
            let key = visit_key(&seq.patient_id, seq.eye, v.visit_index);
            let emb = store.get(&key).ok_or_else(|| TensorError::Invalid {
                op: "examples_from_store",
                msg: format!("no embedding for visit {key}"),
            })?;
            data.extend_from_slice(emb);
        }
        examples.push(SeqExample {
            frames: Tensor::new(vec![seq.len(), d], data)?,
            frame_labels: Some(vec![seq.sequence_label; seq.len()]),
            label: seq.sequence_label,
        });
    }
    Ok(examples)
}

fn subset<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Accuracy and AUC of a trained model over the given example subset.
/// A single-class subset makes AUC undefined and is surfaced as an error.
pub fn evaluate_split(
    model: &AggregatorModel<f32>,
    examples: &[SeqExample<f32>],
    idx: &[usize],
) -> Result<(f64, f64)> {
    let held: Vec<SeqExample<f32>> = subset(examples, idx);
    let (acc, auc) = evaluate(model, &held)?;
    let auc = auc.ok_or_else(|| TensorError::Invalid {
        op: "evaluate_split",
        msg: "AUC undefined: held-out set contains a single class".into(),
    })?;
    Ok((acc, auc))
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (0xf01d_0000 + fold as u64)
}

/// Fold report, one trained model per fold, and per-fold epoch logs.
pub type CvOutcome = (EvalReport, Vec<AggregatorModel<f32>>, Vec<Vec<EpochLog>>);

/// Train and evaluate one model per cross-validation fold.
pub fn run_cv(
    cohort: &[PatientSequence],
    examples: &[SeqExample<f32>],
    k: usize,
    cfg: AggregatorConfig,
    opts: TrainOptions,
    seed: u64,
) -> Result<CvOutcome> {
    let plan = kfold_plan(cohort, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    let mut logs = Vec::with_capacity(k);
    for (f, split) in plan.iter().enumerate() {
        let train = subset(examples, &split.train);
        let val = subset(examples, &split.val);
        let fold_opts = TrainOptions { seed: fold_seed(opts.seed, f), ..opts };
        let (model, log) = train_aggregator(&train, &val, cfg, fold_opts)?;
        let (acc, auc) = evaluate_split(&model, examples, &split.test)?;
        folds.push(FoldScore {
            fold: f + 1,
            acc,
            auc,
            n_train: split.train.len(),
            n_val: split.val.len(),
            n_test: split.test.len(),
        });
        models.push(model);
        logs.push(log);
    }
    let mut report = EvalReport::from_folds(folds);
    report.param_count = models.first().map(|m| m.param_count());
    Ok((report, models, logs))
}

fn train_cell(
    examples: &[SeqExample<f32>],
    split: &SplitIndices,
    cfg: AggregatorConfig,
    opts: TrainOptions,
) -> Result<(AggregatorModel<f32>, f64, f64)> {
    let train = subset(examples, &split.train);
    let val = subset(examples, &split.val);
    let (model, _) = train_aggregator(&train, &val, cfg, opts)?;
    let (acc, auc) = evaluate_split(&model, examples, &split.test)?;
    Ok((model, acc, auc))
}

/// Train the λ₁:λ₂ grid on one shared split and report per-cell metrics.
///
/// The λ₂ = 0 cell is additionally checked structurally: its sequence-path
/// parameters must still be bitwise at initialization after training.
pub fn lambda_ablation(
    cohort: &[PatientSequence],
    examples: &[SeqExample<f32>],
    base_cfg: AggregatorConfig,
    opts: TrainOptions,
    seed: u64,
) -> Result<Vec<LambdaRow>> {
    let split = stratified_split(cohort, (0.7, 0.1, 0.2), seed)?;
    let mut rows = Vec::with_capacity(LAMBDA_GRID.len());
    for (lambda1, lambda2) in LAMBDA_GRID {
        let cfg = AggregatorConfig { lambda1, lambda2, ..base_cfg };
        let reference = AggregatorModel::<f32>::init(cfg, opts.seed)?;
        let (model, acc, auc) = train_cell(examples, &split, cfg, opts)?;
        if lambda2 == 0.0 {
            let before = reference.seq_path_params();
            let after = model.seq_path_params();
            let untouched = before.iter().zip(&after).all(|((_, a), (_, b))| {
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            if !untouched {
                return Err(TensorError::Invalid {
                    op: "lambda_ablation",
                    msg: "λ₂ = 0 cell moved sequence-path parameters".into(),
                });
            }
        }
        rows.push(LambdaRow { lambda1, lambda2, acc, auc });
    }
    Ok(rows)
}

/// Train the projection-width/variant grid (D' = D, D' = 2D,
/// self-attention) on one shared split.
pub fn width_ablation(
    cohort: &[PatientSequence],
    examples: &[SeqExample<f32>],
    d: usize,
    opts: TrainOptions,
    seed: u64,
) -> Result<Vec<WidthRow>> {
    let split = stratified_split(cohort, (0.7, 0.1, 0.2), seed)?;
    let narrow = AggregatorConfig { d_prime: d, ..AggregatorConfig::for_dim(d) };
    let wide = AggregatorConfig::for_dim(d);
    let attention = AggregatorConfig { variant: Variant::SelfAttention, ..AggregatorConfig::for_dim(d) };
    let cells = [("d_prime=d", narrow), ("d_prime=2d", wide), ("self_attention", attention)];
    let mut rows = Vec::with_capacity(cells.len());
    for (name, cfg) in cells {
        let (model, acc, auc) = train_cell(examples, &split, cfg, opts)?;
        rows.push(WidthRow { name: name.to_string(), params: model.param_count().total, acc, auc });
    }
    Ok(rows)
}

/// Sweep fixed history lengths Δt ∈ {1..=max_dt} against the
/// variable-length model, all on one shared patient-level split.
///
/// A fixed-Δt cell trains and deploys under fixed-length constraints: it
/// fits on sequences with at least Δt visits, truncated to their most
/// recent Δt, and at test time it can only consume patients with Δt or
/// more visits (again scored on their latest Δt). Test patients with
/// shorter histories fall outside the model's input domain and receive an
/// indifferent progression probability of one half (predicted
/// non-progressor), so every row's metrics cover the same test patients
/// and the cost of discarding short histories shows up in the scores. The
/// `kept` / `dropped` columns report cohort-wide sequence availability at
/// that Δt; the final row is the variable-length model fit on everything.
pub fn delta_t_sweep(
    cohort: &[PatientSequence],
    store: &EmbeddingStore,
    max_dt: usize,
    cfg: AggregatorConfig,
    opts: TrainOptions,
    seed: u64,
) -> Result<Vec<DeltaRow>> {
    if max_dt < 1 {
        return Err(TensorError::Invalid { op: "delta_t_sweep", msg: "max_dt must be ≥ 1".into() });
    }
    let split = stratified_split(cohort, (0.7, 0.1, 0.2), seed)?;
    let pool = |idx: &[usize]| -> Vec<PatientSequence> {
        idx.iter().map(|&i| cohort[i].clone()).collect()
    };
    let test_pool = pool(&split.test);
    let mut rows = Vec::with_capacity(max_dt + 1);
    for dt in 1..=max_dt {
        let (kept_cohort, dropped_cohort) = fixed_length_filter(cohort, dt)?;
        let (train_seqs, _) = fixed_length_filter(&pool(&split.train), dt)?;
        let (val_seqs, _) = fixed_length_filter(&pool(&split.val), dt)?;
        if train_seqs.is_empty() || val_seqs.is_empty() {
            return Err(TensorError::Invalid {
                op: "delta_t_sweep",
                msg: format!("Δt={dt} empties the training pool; cohort too small for this sweep"),
            });
        }
        let train = examples_from_store(&train_seqs, store)?;
        let val = examples_from_store(&val_seqs, store)?;
        let (model, _) = train_aggregator(&train, &val, cfg, opts)?;

        let (scoreable, unscoreable): (Vec<PatientSequence>, Vec<PatientSequence>) =
            test_pool.iter().cloned().partition(|s| s.len() >= dt);
        let (scoreable, _) = fixed_length_filter(&scoreable, dt)?;
        let mut preds = Vec::with_capacity(test_pool.len());
        let mut scores = Vec::with_capacity(test_pool.len());
        let mut labels = Vec::with_capacity(test_pool.len());
        for ex in examples_from_store(&scoreable, store)? {
            let (class, p1) = model.predict(&ex.frames)?;
            preds.push(class);
            scores.push(p1);
            labels.push(ex.label);
        }
        for seq in &unscoreable {
            preds.push(0);
            scores.push(0.5);
            labels.push(seq.sequence_label);
        }
        let acc = crate::eval::accuracy(&preds, &labels)?;
        let auc = crate::eval::roc_auc(&scores, &labels)?;
        rows.push(DeltaRow {
            delta_t: Some(dt),
            kept: kept_cohort.len(),
            dropped: dropped_cohort,
            acc,
            auc,
        });
    }
    let examples = examples_from_store(cohort, store)?;
    let (_, acc, auc) = train_cell(&examples, &split, cfg, opts)?;
    rows.push(DeltaRow { delta_t: None, kept: cohort.len(), dropped: 0, acc, auc });
    Ok(rows)
}

/// Per-fold AUC comparison of two trained models over the same k-fold test
/// partitions, summarized by the two-sided Mann–Whitney U test.
pub fn compare_models(
    a: &AggregatorModel<f32>,
    b: &AggregatorModel<f32>,
    cohort: &[PatientSequence],
    examples: &[SeqExample<f32>],
    k: usize,
    seed: u64,
) -> Result<Significance> {
    let plan = kfold_plan(cohort, k, seed)?;
    let mut auc_a = Vec::with_capacity(k);
    let mut auc_b = Vec::with_capacity(k);
    for split in &plan {
        auc_a.push(evaluate_split(a, examples, &split.test)?.1);
        auc_b.push(evaluate_split(b, examples, &split.test)?.1);
    }
    let MannWhitney { u, p, exact } = crate::eval::mann_whitney_u(&auc_a, &auc_b)?;
    Ok(Significance { u, p, exact, unit: format!("per-fold test AUC, k={k}") })
}

/// Everything the full desk-scale pipeline needs.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub synth: SynthConfig,
    pub mae: MAEConfig,
    pub pretrain: PretrainOptions,
    pub train: TrainOptions,
    pub agg: Option<AggregatorConfig>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let seed = 7;
        Self {
            synth: SynthConfig::default(),
            mae: MAEConfig::desk(),
            pretrain: PretrainOptions { seed, ..Default::default() },
            train: TrainOptions { seed, ..Default::default() },
            agg: None,
            folds: 5,
            seed,
        }
    }
}

/// Artifacts of one full pipeline run.
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub pretrain_losses: Vec<f64>,
    pub encoder: EncoderModel<f32>,
    pub store: EmbeddingStore,
    pub fold_models: Vec<AggregatorModel<f32>>,
    pub fold_logs: Vec<Vec<EpochLog>>,
    /// Sequences the leakage filter excluded entirely.
    pub excluded: usize,
    /// Model-visible cohort (leakage-filtered).
    pub cohort: Vec<PatientSequence>,
}

/// Generate → render → pretrain → extract → leakage-filter → k-fold train.
pub fn run_pipeline(opts: &PipelineOptions) -> Result<PipelineOutcome> {
    let cohort = generate_cohort(&opts.synth)?;
    let side = opts.mae.image_size;
    let images = cohort.images(side)?;

    let mut items: Vec<(String, Tensor<f32>)> = Vec::new();
    for (patient, imgs) in cohort.patients.iter().zip(&images) {
        for (visit, img) in patient.seq.visits.iter().zip(imgs) {
            let key = visit_key(&patient.seq.patient_id, patient.seq.eye, visit.visit_index);
            items.push((key, preprocessed_tensor(img, side)?));
        }
    }

    // stage one is label-free: pretrain on every image in the cohort
    let corpus: Vec<Tensor<f32>> = items.iter().map(|(_, t)| t.clone()).collect();
    let pre_opts = PretrainOptions { seed: opts.seed, ..opts.pretrain };
    let (encoder, pretrain_losses) = pretrain(&corpus, opts.mae, pre_opts)?;
    let store = extract_embeddings(&encoder, &items)?;

    let sequences = cohort.sequences();
    let (filtered, excluded_warnings) = leakage_filter_cohort(&sequences)?;
    let examples = examples_from_store(&filtered, &store)?;

    let cfg = opts.agg.unwrap_or_else(|| AggregatorConfig::for_dim(opts.mae.encoder_dim));
    let train_opts = TrainOptions { seed: opts.seed, ..opts.train };
    let (report, fold_models, fold_logs) =
        run_cv(&filtered, &examples, opts.folds, cfg, train_opts, opts.seed)?;

    Ok(PipelineOutcome {
        report,
        pretrain_losses,
        encoder,
        store,
        fold_models,
        fold_logs,
        excluded: excluded_warnings.len(),
        cohort: filtered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Eye;

    fn tiny_pipeline_options() -> PipelineOptions {
        PipelineOptions {
            synth: SynthConfig {
                n_patients: 40,
                length_weights: vec![1.0, 1.0, 1.0],
                ..Default::default()
            },
            mae: MAEConfig {
                image_size: 16,
                patch_size: 8,
                channels: 1,
                mask_ratio: 0.75,
                encoder_dim: 16,
                encoder_layers: 1,
                encoder_heads: 2,
                decoder_dim: 8,
                decoder_layers: 1,
                norm_masked_patches: false,
            },
            pretrain: PretrainOptions { epochs: 1, ..Default::default() },
            train: TrainOptions { max_epochs: 3, patience: None, ..Default::default() },
            agg: None,
            folds: 2,
            seed: 5,
        }
    }

    #[test]
    fn pipeline_smoke_and_determinism() {
        let opts = tiny_pipeline_options();
        let a = run_pipeline(&opts).unwrap();
        assert_eq!(a.report.folds.len(), 2);
        assert_eq!(a.pretrain_losses.len(), 1);
        assert!(a.report.folds.iter().all(|f| (0.0..=1.0).contains(&f.acc)));
        assert!(a.report.folds.iter().all(|f| (0.0..=1.0).contains(&f.auc)));
        assert!(a.report.param_count.is_some());
        assert!(!a.store.is_empty());
        // visible cohort only ever carries negative acquisition-time labels
        assert!(a
            .cohort
            .iter()
            .all(|s| s.visits.iter().all(|v| v.frame_label == Some(0))));

        let b = run_pipeline(&opts).unwrap();
        assert_eq!(a.report.render(), b.report.render());
        assert_eq!(a.pretrain_losses, b.pretrain_losses);
    }

    #[test]
    fn examples_align_with_store_keys() {
        let mut store = EmbeddingStore::new(2).unwrap();
        store.insert(&visit_key("pa", Eye::Left, 0), vec![1.0, 2.0]).unwrap();
        store.insert(&visit_key("pa", Eye::Left, 1), vec![3.0, 4.0]).unwrap();
        let seq = PatientSequence {
            patient_id: "pa".into(),
            eye: Eye::Left,
            visits: (0..2)
                .map(|i| crate::data::VisitRecord {
                    patient_id: "pa".into(),
                    eye: Eye::Left,
                    visit_index: i,
                    visit_time: i as f64,
                    image_ref: String::new(),
                    frame_label: Some(0),
                })
                .collect(),
            sequence_label: 1,
        };
        let examples = examples_from_store(std::slice::from_ref(&seq), &store).unwrap();
        assert_eq!(examples[0].frames.shape(), &[2, 2]);
        assert_eq!(examples[0].frames.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(examples[0].frame_labels.as_deref(), Some(&[1usize, 1][..]));

        let missing = PatientSequence { patient_id: "pb".into(), ..seq };
        assert!(examples_from_store(&[missing], &store).is_err());
    }
}
