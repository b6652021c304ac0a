//! Minimal in-process run of the full pipeline at toy scale: generate a
//! small synthetic cohort, pretrain the encoder briefly, cache embeddings,
//! cross-validate the aggregator, and print the fold report.
//!
//! For the full desk-scale run and on-disk artifacts, use the `tsdf`
//! binary instead; this exists to show the library calls behind it.

use tsdf_core::aggregator::TrainOptions;
use tsdf_core::data::SynthConfig;
use tsdf_core::harness::{run_pipeline, PipelineOptions};
use tsdf_core::mae::{MAEConfig, PretrainOptions};

fn main() {
    let opts = PipelineOptions {
        synth: SynthConfig { n_patients: 240, ..Default::default() },
        mae: MAEConfig::desk(),
        pretrain: PretrainOptions { epochs: 12, seed: 7, ..Default::default() },
        train: TrainOptions { max_epochs: 40, seed: 7, ..Default::default() },
        agg: None,
        folds: 3,
        seed: 7,
    };
    let outcome = run_pipeline(&opts).expect("toy pipeline");
    println!(
        "pretrain reconstruction loss: {:.4} -> {:.4}",
        outcome.pretrain_losses.first().unwrap(),
        outcome.pretrain_losses.last().unwrap()
    );
    println!("{}", outcome.report.render());
}
