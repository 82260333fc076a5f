//! Synthetic data, the two-step training pipeline and the ablation grid.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod step1;
pub mod step2;
pub mod suite;

pub use ablation::{run_ablation, AblationReport, AblationRun};
pub use checkpoint::Checkpoint;
pub use config::{derive_seed, item_seed, ExperimentConfig, PrefinetuneDomain, Stream};
pub use data::{gen_dataset, Domain, SyntheticDataset};
pub use step1::{run_step1, GlobalBackbone, Step1Output};
pub use step2::{run_pipeline, run_step2, FusedClassifier, MetricsReport, Step2Output};

/// Caps the global rayon pool at `MSCFF_THREADS` threads when that variable is
/// set. Results do not depend on the thread count.
pub fn configure_threads() -> crate::Result<()> {
    let Ok(v) = std::env::var("MSCFF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| crate::Error::Config(format!("MSCFF_THREADS={v:?} is not a count")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
