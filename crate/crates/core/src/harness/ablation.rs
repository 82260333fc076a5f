//! The fusion × pre-fine-tune × seed ablation grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{ExperimentConfig, PrefinetuneDomain};
use super::step1::run_step1;
use super::step2::{run_step2, MetricsReport};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub fusion_on: bool,
    pub prefinetune: PrefinetuneDomain,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// Ordered by fusion (on first), pre-fine-tune domain, then seed.
    pub runs: Vec<AblationRun>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn on_off(fusion_on: bool) -> &'static str {
    if fusion_on {
        "on"
    } else {
        "off"
    }
}

impl AblationReport {
    /// Median final validation accuracy over the runs matching both filters.
    pub fn median_accuracy(
        &self,
        fusion_on: Option<bool>,
        prefinetune: Option<PrefinetuneDomain>,
    ) -> f64 {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| fusion_on.is_none_or(|f| r.fusion_on == f))
            .filter(|r| prefinetune.is_none_or(|d| r.prefinetune == d))
            .map(|r| r.report.final_val_accuracy())
            .collect();
        median(&mut v)
    }

    /// One row per run, then one `median` row per (fusion, pre-fine-tune) cell.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "fusion,prefinetune,seed,val_accuracy,train_accuracy,fusion_evaluations\n",
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                on_off(r.fusion_on),
                r.prefinetune,
                r.seed,
                r.report.final_val_accuracy(),
                r.report.final_train_accuracy(),
                r.report.fusion_evaluations
            );
        }
        for fusion_on in [true, false] {
            for domain in PrefinetuneDomain::ALL {
                let _ = writeln!(
                    out,
                    "{},{},median,{:.6},,",
                    on_off(fusion_on),
                    domain,
                    self.median_accuracy(Some(fusion_on), Some(domain))
                );
            }
        }
        out
    }

    /// Writes `summary.csv` and one metrics CSV per run into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        for r in &self.runs {
            let name = format!(
                "fusion-{}_{}_seed-{}.csv",
                on_off(r.fusion_on),
                r.prefinetune,
                r.seed
            );
            fs::write(dir.join(name), r.report.to_csv())?;
        }
        Ok(())
    }
}

/// Runs every (fusion, pre-fine-tune, seed) cell. Step 1 is shared between the
/// two fusion settings of a (pre-fine-tune, seed) pair.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationReport> {
    base.validate()?;
    let jobs: Vec<(PrefinetuneDomain, u64)> = PrefinetuneDomain::ALL
        .iter()
        .flat_map(|&d| base.ablation_seeds.iter().map(move |&s| (d, s)))
        .collect();
    let results: Vec<Result<[AblationRun; 2]>> = jobs
        .par_iter()
        .map(|&(prefinetune, seed)| {
            let cfg = ExperimentConfig {
                seed,
                prefinetune,
                ..base.clone()
            };
            let s1 = run_step1(&cfg)?;
            let run = |fusion_on: bool| -> Result<AblationRun> {
                let cfg = ExperimentConfig {
                    fusion_on,
                    ..cfg.clone()
                };
                Ok(AblationRun {
                    fusion_on,
                    prefinetune,
                    seed,
                    report: run_step2(&cfg, &s1)?.report,
                })
            };
            Ok([run(true)?, run(false)?])
        })
        .collect();
    let mut runs = Vec::with_capacity(2 * jobs.len());
    for r in results {
        runs.extend(r?);
    }
    runs.sort_by_key(|r| (!r.fusion_on, r.prefinetune, r.seed));
    Ok(AblationReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
