//! Synthetic longitudinal cohort generator.
//!
//! Each progressor carries a latent severity that grows linearly with time;
//! controls stay at zero. Severity materializes either as a drifting
//! direction in embedding space plus isotropic Gaussian noise, or as a
//! growing bright disc rendered into a grayscale image. Because the
//! embedding model is an exact two-hypothesis Gaussian, the log-likelihood
//! ratio is available in closed form and pins down how hard a given
//! drift/noise setting is.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::image::Image;
use super::{Eye, PatientSequence, VisitRecord};
use crate::eval::roc_auc;
use crate::tensor::{Result, TensorError};

/// A visit turns frame-positive once severity exceeds `drift` times this
/// factor; the severity schedule crosses it from the fifth year on, so only
/// the longest sequences develop positive tails.
const POSITIVE_FACTOR: f64 = 3.5;

/// Seed offsets so the skeleton, each materialization, and the oracle draw
/// from independent streams.
const EMBED_SEED: u64 = 0x5eed_0010;
const IMAGE_SEED: u64 = 0x5eed_0011;
const ORACLE_SEED: u64 = 0x5eed_0012;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Weight of sequence length `i + 1`; lengths run over `1..=len()`.
    pub length_weights: Vec<f64>,
    /// Severity gained per year by progressors.
    pub drift: f64,
    /// Noise scale σ (embedding coordinates, or jitter on rendered severity).
    pub noise: f64,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 600,
            length_weights: vec![1.0; 6],
            drift: 0.5,
            noise: 0.7,
            positive_fraction: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "synth_config", msg });
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.length_weights.is_empty()
            || self.length_weights.iter().any(|&w| !w.is_finite() || w < 0.0)
            || self.length_weights.iter().sum::<f64>() <= 0.0
        {
            return bad(format!("bad length distribution {:?}", self.length_weights));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} outside (0,1)", self.positive_fraction));
        }
        if self.drift < 0.0 || !self.drift.is_finite() {
            return bad(format!("bad drift {}", self.drift));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad(format!("bad noise {}", self.noise));
        }
        Ok(())
    }

    /// Latent severity of a progressor at `time` years from baseline. The
    /// intercept models onset a couple of years before baseline, and the
    /// yearly increment is deliberately smaller than that offset: a single
    /// visit already carries most of the per-visit signal, and longer
    /// follow-up helps mainly by averaging out noise rather than by
    /// outrunning it.
    pub fn severity_if_progressor(&self, time: f64) -> f64 {
        self.drift * (2.0 + 0.4 * time)
    }

    fn positive_threshold(&self) -> f64 {
        self.drift * POSITIVE_FACTOR
    }
}

/// One generated patient: the visit sequence plus its latent severities.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPatient {
    pub seq: PatientSequence,
    pub severities: Vec<f64>,
}

/// A generated cohort (sequence skeletons; images/embeddings materialize on
/// demand and deterministically).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub cfg: SynthConfig,
    pub patients: Vec<SynthPatient>,
}

/// Draw the cohort skeleton: labels, lengths, eyes, severities, frame
/// labels. Deterministic for a given config.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lengths = WeightedIndex::new(&cfg.length_weights)
        .map_err(|e| TensorError::Invalid { op: "synth_config", msg: e.to_string() })?;
    let threshold = cfg.positive_threshold();
    // exact class quota (rounded), shuffled over patients, so the realized
    // positive count never strays more than one patient from the requested
    // fraction
    let n_pos = (cfg.n_patients as f64 * cfg.positive_fraction).round() as usize;
    let mut labels = vec![0usize; cfg.n_patients];
    labels[..n_pos].fill(1);
    labels.shuffle(&mut rng);
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for (p, &label) in labels.iter().enumerate() {
        let m = lengths.sample(&mut rng) + 1;
        let eye = if rng.gen_bool(0.5) { Eye::Left } else { Eye::Right };
        let patient_id = format!("p{p:05}");
        let mut visits = Vec::with_capacity(m);
        let mut severities = Vec::with_capacity(m);
        for i in 0..m {
            let time = i as f64;
            let severity =
                if label == 1 { cfg.severity_if_progressor(time) } else { 0.0 };
            severities.push(severity);
            visits.push(VisitRecord {
                patient_id: patient_id.clone(),
                eye,
                visit_index: i,
                visit_time: time,
                image_ref: format!("{patient_id}_{eye}_{i:03}.pgm"),
                frame_label: Some(usize::from(severity > threshold)),
            });
        }
        patients.push(SynthPatient {
            seq: PatientSequence { patient_id, eye, visits, sequence_label: label },
            severities,
        });
    }
    Ok(SynthCohort { cfg: cfg.clone(), patients })
}

/// One embedding vector per visit, grouped per patient.
pub type CohortEmbeddings = Vec<Vec<Vec<f32>>>;

impl SynthCohort {
    pub fn sequences(&self) -> Vec<PatientSequence> {
        self.patients.iter().map(|p| p.seq.clone()).collect()
    }

    /// Materialize per-visit embeddings `e = severity · u + noise · ε` with
    /// ε standard normal; returns them per patient plus the unit direction
    /// `u` shared by the whole cohort.
    pub fn embeddings(&self, dim: usize) -> Result<(CohortEmbeddings, Vec<f64>)> {
        if dim == 0 {
            return Err(TensorError::Invalid { op: "synth_embeddings", msg: "dim 0".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ EMBED_SEED);
        let mut direction: Vec<f64> =
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut direction {
            *v /= norm;
        }
        let mut all = Vec::with_capacity(self.patients.len());
        for patient in &self.patients {
            let mut per_visit = Vec::with_capacity(patient.severities.len());
            for &s in &patient.severities {
                let e: Vec<f32> = direction
                    .iter()
                    .map(|&u| {
                        (s * u + self.cfg.noise * rng.sample::<f64, _>(StandardNormal)) as f32
                    })
                    .collect();
                per_visit.push(e);
            }
            all.push(per_visit);
        }
        Ok((all, direction))
    }

    /// Render each visit as a `side × side` grayscale image: flat
    /// background plus a centered bright disc whose radius and brightness
    /// grow with (noise-jittered) severity.
    pub fn images(&self, side: usize) -> Result<Vec<Vec<Image>>> {
        if side < 4 {
            return Err(TensorError::Invalid {
                op: "synth_images",
                msg: format!("side {side} too small"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ IMAGE_SEED);
        let mut all = Vec::with_capacity(self.patients.len());
        for patient in &self.patients {
            let cx = rng.gen_range(-0.15f64..0.15);
            let cy = rng.gen_range(-0.15f64..0.15);
            let mut per_visit = Vec::with_capacity(patient.severities.len());
            for &s in &patient.severities {
                let jitter: f64 = rng.sample(StandardNormal);
                let observed = (s + self.cfg.noise * jitter).max(0.0);
                let radius = 0.10 + 0.06 * observed;
                let amp = (0.15 + 0.18 * observed).min(0.78);
                let mut data = Vec::with_capacity(side * side);
                for r in 0..side {
                    let y = (r as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                    for c in 0..side {
                        let x = (c as f64 + 0.5) / side as f64 * 2.0 - 1.0;
                        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                        let edge = 1.0 / (1.0 + (-(radius - d) / 0.05).exp());
                        let texture: f64 = rng.sample(StandardNormal);
                        let v = 0.2 + amp * edge + 0.02 * texture;
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
                per_visit.push(Image { h: side, w: side, data });
            }
            all.push(per_visit);
        }
        Ok(all)
    }

    /// Log-likelihood-ratio score of one visit sequence under the embedding
    /// model: positive favors "progressor". `times` and `embeddings` must
    /// be aligned; `direction` is the cohort's drift direction.
    pub fn bayes_score(&self, times: &[f64], embeddings: &[Vec<f32>], direction: &[f64]) -> f64 {
        times
            .iter()
            .zip(embeddings)
            .map(|(&t, e)| {
                let s = self.cfg.severity_if_progressor(t);
                let proj: f64 = direction.iter().zip(e).map(|(&u, &x)| u * x as f64).sum();
                s * proj - 0.5 * s * s
            })
            .sum()
    }
}

/// Bayes-optimal AUC of the embedding model, estimated by scoring a fresh
/// draw of `n_draw` patients with the closed-form discriminant. Calibrates
/// how hard a drift/noise setting is.
pub fn bayes_auc(cfg: &SynthConfig, dim: usize, n_draw: usize) -> Result<f64> {
    let fresh = SynthConfig {
        n_patients: n_draw,
        seed: cfg.seed ^ ORACLE_SEED,
        ..cfg.clone()
    };
    let cohort = generate_cohort(&fresh)?;
    let (embeddings, direction) = cohort.embeddings(dim)?;
    let mut scores = Vec::with_capacity(n_draw);
    let mut labels = Vec::with_capacity(n_draw);
    for (patient, emb) in cohort.patients.iter().zip(&embeddings) {
        let times: Vec<f64> = patient.seq.visits.iter().map(|v| v.visit_time).collect();
        scores.push(cohort.bayes_score(&times, emb, &direction));
        labels.push(patient.seq.sequence_label);
    }
    roc_auc(&scores, &labels)
}
