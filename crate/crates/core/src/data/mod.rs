//! Cohort plumbing: manifest parsing, leakage filtering, patient-level
//! splits and cross-validation plans, fixed-length truncation, plus the
//! synthetic cohort generator, image utilities, and the embedding cache.

mod image;
mod store;
mod synth;

pub use image::{preprocess_image, read_pgm, resize_bicubic, write_pgm, Image, GRAY_MEAN, GRAY_STD};
pub use store::EmbeddingStore;
pub use synth::{bayes_auc, generate_cohort, SynthCohort, SynthConfig, SynthPatient};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, TensorError};

/// Which eye a sequence was imaged from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Eye {
    Left,
    Right,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::Left => "left",
            Eye::Right => "right",
        })
    }
}

impl FromStr for Eye {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Eye::Left),
            "right" => Ok(Eye::Right),
            other => Err(TensorError::Invalid {
                op: "parse_eye",
                msg: format!("expected left|right, got {other:?}"),
            }),
        }
    }
}

/// One imaging visit of one eye.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitRecord {
    pub patient_id: String,
    pub eye: Eye,
    /// Ordinal position after sorting by time (0-based, unique per sequence).
    pub visit_index: usize,
    /// Years from the baseline visit; non-decreasing within a sequence.
    pub visit_time: f64,
    /// Image path or synthetic id.
    pub image_ref: String,
    /// Per-visit class index, when known.
    pub frame_label: Option<usize>,
}

/// Ordered visit history of one (patient, eye) with its outcome label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub patient_id: String,
    pub eye: Eye,
    pub visits: Vec<VisitRecord>,
    pub sequence_label: usize,
}

impl PatientSequence {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }
}

/// Stable key for one visit inside an [`EmbeddingStore`].
pub fn visit_key(patient_id: &str, eye: Eye, visit_index: usize) -> String {
    format!("{patient_id}/{eye}/{visit_index:03}")
}

const MANIFEST_COLUMNS: [&str; 6] =
    ["patient_id", "eye", "visit_time", "image_path", "frame_label", "sequence_label"];

fn manifest_err(line: u64, msg: String) -> TensorError {
    TensorError::Invalid { op: "load_manifest", msg: format!("line {line}: {msg}") }
}

/// Parse a delimited-text manifest into per-(patient, eye) sequences.
///
/// Rows are grouped by (patient_id, eye) and sorted by visit_time; exact
/// duplicate times keep the earliest-loaded row and emit a warning. Output
/// sequences are ordered by (patient_id, eye). Malformed rows fail with
/// their line number.
pub fn load_manifest(path: &Path) -> Result<(Vec<PatientSequence>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| TensorError::Invalid { op: "load_manifest", msg: e.to_string() })?;

    let mut warnings = Vec::new();
    let headers = reader
        .headers()
        .map_err(|e| TensorError::Invalid { op: "load_manifest", msg: e.to_string() })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        warnings.push("manifest is empty".to_string());
        return Ok((Vec::new(), warnings));
    }
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| TensorError::Invalid {
            op: "load_manifest",
            msg: format!("missing column {name:?}"),
        })?;
    }

    // (patient, eye) → rows in file order; BTreeMap gives sorted output order
    type Row = (u64, f64, String, Option<usize>, usize);
    let mut groups: BTreeMap<(String, Eye), Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| TensorError::Invalid {
            op: "load_manifest",
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            record.get(cols[i]).ok_or_else(|| manifest_err(line, "short row".into()))
        };
        let patient_id = field(0)?.to_string();
        if patient_id.is_empty() {
            return Err(manifest_err(line, "empty patient_id".into()));
        }
        let eye: Eye = field(1)?.parse().map_err(|e| manifest_err(line, format!("{e}")))?;
        let time_raw = field(2)?;
        let visit_time: f64 = time_raw
            .parse()
            .map_err(|_| manifest_err(line, format!("bad visit_time {time_raw:?}")))?;
        if !visit_time.is_finite() {
            return Err(manifest_err(line, format!("unsortable visit_time {time_raw:?}")));
        }
        let image_ref = field(3)?.to_string();
        let frame_raw = field(4)?;
        let frame_label = if frame_raw.is_empty() {
            None
        } else {
            Some(
                frame_raw
                    .parse::<usize>()
                    .map_err(|_| manifest_err(line, format!("bad frame_label {frame_raw:?}")))?,
            )
        };
        let seq_raw = field(5)?;
        let sequence_label = seq_raw
            .parse::<usize>()
            .map_err(|_| manifest_err(line, format!("bad sequence_label {seq_raw:?}")))?;
        groups
            .entry((patient_id, eye))
            .or_default()
            .push((line, visit_time, image_ref, frame_label, sequence_label));
    }

    if groups.is_empty() {
        warnings.push("manifest is empty".to_string());
        return Ok((Vec::new(), warnings));
    }

    let mut sequences = Vec::with_capacity(groups.len());
    for ((patient_id, eye), mut rows) in groups {
        // stable sort: equal times stay in file order, so the earliest-loaded
        // duplicate survives the dedup pass below
        rows.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite times"));
        let label = rows[0].4;
        if let Some(bad) = rows.iter().find(|r| r.4 != label) {
            return Err(manifest_err(
                bad.0,
                format!("sequence_label disagrees within ({patient_id}, {eye})"),
            ));
        }
        let mut visits: Vec<VisitRecord> = Vec::with_capacity(rows.len());
        let mut last_time = f64::NEG_INFINITY;
        for (line, visit_time, image_ref, frame_label, _) in rows {
            if visit_time == last_time {
                warnings.push(format!(
                    "line {line}: duplicate visit ({patient_id}, {eye}, t={visit_time}); kept earliest"
                ));
                continue;
            }
            last_time = visit_time;
            visits.push(VisitRecord {
                patient_id: patient_id.clone(),
                eye,
                visit_index: visits.len(),
                visit_time,
                image_ref,
                frame_label,
            });
        }
        sequences.push(PatientSequence { patient_id, eye, visits, sequence_label: label });
    }
    Ok((sequences, warnings))
}

/// Write sequences back out in the manifest format `load_manifest` reads.
pub fn write_manifest(path: &Path, cohort: &[PatientSequence]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| TensorError::Invalid { op: "write_manifest", msg: e.to_string() })?;
    writer
        .write_record(MANIFEST_COLUMNS)
        .map_err(|e| TensorError::Invalid { op: "write_manifest", msg: e.to_string() })?;
    for seq in cohort {
        for v in &seq.visits {
            let frame = v.frame_label.map(|l| l.to_string()).unwrap_or_default();
            writer
                .write_record([
                    seq.patient_id.as_str(),
                    &seq.eye.to_string(),
                    &format!("{}", v.visit_time),
                    &v.image_ref,
                    &frame,
                    &seq.sequence_label.to_string(),
                ])
                .map_err(|e| TensorError::Invalid { op: "write_manifest", msg: e.to_string() })?;
        }
    }
    writer
        .flush()
        .map_err(|e| TensorError::Invalid { op: "write_manifest", msg: e.to_string() })?;
    Ok(())
}

/// Truncate a sequence to the visits strictly before its first positive
/// frame. Returns `None` when nothing remains (first visit already
/// positive). Requires every visit to carry a frame label.
pub fn leakage_filter(seq: &PatientSequence) -> Result<Option<PatientSequence>> {
    let mut cut = seq.visits.len();
    for (i, v) in seq.visits.iter().enumerate() {
        let label = v.frame_label.ok_or_else(|| TensorError::Invalid {
            op: "leakage_filter",
            msg: format!(
                "visit {} of ({}, {}) has no frame label",
                v.visit_index, seq.patient_id, seq.eye
            ),
        })?;
        if label != 0 {
            cut = i;
            break;
        }
    }
    if cut == 0 {
        return Ok(None);
    }
    let mut out = seq.clone();
    out.visits.truncate(cut);
    Ok(Some(out))
}

/// Apply [`leakage_filter`] across a cohort, dropping emptied sequences and
/// reporting one warning per exclusion.
pub fn leakage_filter_cohort(
    cohort: &[PatientSequence],
) -> Result<(Vec<PatientSequence>, Vec<String>)> {
    let mut kept = Vec::with_capacity(cohort.len());
    let mut warnings = Vec::new();
    for seq in cohort {
        match leakage_filter(seq)? {
            Some(f) => kept.push(f),
            None => warnings.push(format!(
                "({}, {}): first visit already positive; sequence excluded",
                seq.patient_id, seq.eye
            )),
        }
    }
    Ok((kept, warnings))
}

/// Remove each sequence's final visit (optional manifest filter, off by
/// default). Sequences with a single visit are dropped.
pub fn drop_terminal_visits(cohort: &[PatientSequence]) -> Vec<PatientSequence> {
    cohort
        .iter()
        .filter(|s| s.len() > 1)
        .map(|s| {
            let mut out = s.clone();
            out.visits.pop();
            out
        })
        .collect()
}

/// Keep only sequences with at least `delta_t` visits, truncated to their
/// most recent `delta_t`; also returns how many sequences were dropped.
pub fn fixed_length_filter(
    cohort: &[PatientSequence],
    delta_t: usize,
) -> Result<(Vec<PatientSequence>, usize)> {
    if delta_t < 1 {
        return Err(TensorError::Invalid {
            op: "fixed_length_filter",
            msg: "delta_t must be at least 1".into(),
        });
    }
    let mut kept = Vec::new();
    for seq in cohort {
        if seq.len() >= delta_t {
            let mut out = seq.clone();
            out.visits.drain(..out.visits.len() - delta_t);
            kept.push(out);
        }
    }
    let dropped = cohort.len() - kept.len();
    Ok((kept, dropped))
}

/// Index-based split of a cohort; indices refer to positions in the cohort
/// slice the split was computed from. Patient-disjoint by construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patients grouped by id: class label (positive if any sequence is) and
/// the indices of their sequences.
fn group_patients(cohort: &[PatientSequence]) -> BTreeMap<String, (usize, Vec<usize>)> {
    let mut map: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    for (i, seq) in cohort.iter().enumerate() {
        let entry = map.entry(seq.patient_id.clone()).or_insert((0, Vec::new()));
        entry.0 = entry.0.max(seq.sequence_label);
        entry.1.push(i);
    }
    map
}

fn strata_of(
    patients: &BTreeMap<String, (usize, Vec<usize>)>,
) -> BTreeMap<usize, Vec<String>> {
    let mut strata: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, (label, _)) in patients {
        strata.entry(*label).or_default().push(id.clone());
    }
    strata
}

/// Largest-remainder allocation of each stratum across splits, with
/// leftover units steered toward the split currently furthest below its
/// global target. Returns per-stratum counts, one row per stratum.
fn allocate_counts(stratum_sizes: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let s = fractions.len();
    let mut alloc_total = vec![0usize; s];
    let mut seen = 0usize;
    let mut out = Vec::with_capacity(stratum_sizes.len());
    for &n in stratum_sizes {
        seen += n;
        let mut counts: Vec<usize> =
            fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
        let mut rest = n - counts.iter().sum::<usize>();
        while rest > 0 {
            let mut best = 0;
            let mut best_deficit = f64::NEG_INFINITY;
            for (j, &f) in fractions.iter().enumerate() {
                let deficit = f * seen as f64 - (alloc_total[j] + counts[j]) as f64;
                if deficit > best_deficit + 1e-12 {
                    best_deficit = deficit;
                    best = j;
                }
            }
            counts[best] += 1;
            rest -= 1;
        }
        for (t, c) in alloc_total.iter_mut().zip(&counts) {
            *t += c;
        }
        out.push(counts);
    }
    out
}

/// Patient-level stratified split into train/val/test.
///
/// All sequences of a patient land in one set. Within each class, patient
/// counts hit the requested fractions up to largest-remainder rounding
/// (within one patient of target). Deterministic for a given seed.
pub fn stratified_split(
    cohort: &[PatientSequence],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f <= 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TensorError::Invalid {
            op: "stratified_split",
            msg: format!("fractions must be positive and sum to 1, got {fr:?}"),
        });
    }
    let patients = group_patients(cohort);
    let strata = strata_of(&patients);
    for (label, ids) in &strata {
        if ids.len() < 3 {
            return Err(TensorError::Invalid {
                op: "stratified_split",
                msg: format!("class {label} has {} patients, need at least 3", ids.len()),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered: Vec<Vec<String>> = Vec::new();
    for (_, mut ids) in strata {
        ids.shuffle(&mut rng);
        ordered.push(ids);
    }
    let sizes: Vec<usize> = ordered.iter().map(|v| v.len()).collect();
    let counts = allocate_counts(&sizes, &fr);

    let mut split = SplitIndices::default();
    for (ids, c) in ordered.iter().zip(&counts) {
        for (rank, id) in ids.iter().enumerate() {
            let bucket = if rank < c[0] {
                &mut split.train
            } else if rank < c[0] + c[1] {
                &mut split.val
            } else {
                &mut split.test
            };
            bucket.extend(&patients[id].1);
        }
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// k-fold cross-validation plan at patient granularity.
///
/// Each patient serves in exactly one test fold; the remaining patients are
/// re-split 7:1 into train/val (the train:val ratio of the 70/10/20 scheme).
pub fn kfold_plan(cohort: &[PatientSequence], k: usize, seed: u64) -> Result<Vec<SplitIndices>> {
    if k < 2 {
        return Err(TensorError::Invalid { op: "kfold_plan", msg: "k must be at least 2".into() });
    }
    let patients = group_patients(cohort);
    let strata = strata_of(&patients);
    for (label, ids) in &strata {
        if ids.len() < k {
            return Err(TensorError::Invalid {
                op: "kfold_plan",
                msg: format!("class {label} has {} patients, need at least k={k}", ids.len()),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dealt: Vec<Vec<String>> = vec![Vec::new(); k]; // fold → patient ids
    let mut pool_order: Vec<Vec<String>> = Vec::new(); // per stratum, shuffled
    for (_, mut ids) in strata {
        ids.shuffle(&mut rng);
        for (j, id) in ids.iter().enumerate() {
            dealt[j % k].push(id.clone());
        }
        pool_order.push(ids);
    }

    let mut plan = Vec::with_capacity(k);
    for fold_ids in &dealt {
        let mut split = SplitIndices::default();
        for id in fold_ids {
            split.test.extend(&patients[id].1);
        }
        // per stratum, allocate the non-test patients 7:1 train:val
        let pools: Vec<Vec<&String>> = pool_order
            .iter()
            .map(|ids| ids.iter().filter(|id| !fold_ids.contains(id)).collect())
            .collect();
        let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
        let counts = allocate_counts(&sizes, &[7.0 / 8.0, 1.0 / 8.0]);
        for (pool, c) in pools.iter().zip(&counts) {
            for (rank, id) in pool.iter().enumerate() {
                let bucket = if rank < c[0] { &mut split.train } else { &mut split.val };
                bucket.extend(&patients[id.as_str()].1);
            }
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        plan.push(split);
    }
    Ok(plan)
}
