//! k-shot evaluation and the CSV report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::model::{infer, score_query, support_bank, Experiment, QueryOutputs};
use super::pgm::render_pgm;
use crate::error::{Error, Result};
use crate::kahg::KahgParams;
use crate::metrics::{self, ScoredSet, PRO_FPR_LIMIT};
use crate::scoring::AnomalyResult;

pub const CSV_HEADER: &str = "run,metric,value";

/// Metric values keyed by `(run, metric)`; iteration order is the CSV order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    rows: BTreeMap<(String, String), f64>,
}

impl Report {
    pub fn insert(&mut self, run: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.insert((run.into(), metric.into()), value);
    }

    pub fn get(&self, run: &str, metric: &str) -> Option<f64> {
        self.rows.get(&(run.to_string(), metric.to_string())).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.rows.iter().map(|((r, m), v)| (r.as_str(), m.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: Report) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (run, metric, value) in self.rows() {
            writeln!(out, "{run},{metric},{value:.6}").expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn shot_run(shots: usize) -> String {
    format!("shot{shots}")
}

/// Per-shot scores of every test image.
pub struct Scored {
    pub shots: usize,
    pub results: Vec<AnomalyResult>,
}

fn check_compatible(params: &KahgParams, cfg: &RunConfig) -> Result<()> {
    if params.dims != cfg.dims || params.kernel_enabled() != cfg.kernel_enabled {
        return Err(Error::InvalidArgument(format!(
            "checkpoint dims {:?} (kernels {}) do not match config dims {:?} (kernels {})",
            params.dims,
            params.kernel_enabled(),
            cfg.dims,
            cfg.kernel_enabled
        )));
    }
    Ok(())
}

/// Scores the test split once per configured shot count.
pub fn score_test(exp: &Experiment, params: &KahgParams, cfg: &RunConfig) -> Result<Vec<Scored>> {
    check_compatible(params, cfg)?;
    let t = cfg.effective_iterations();
    let queries = exp.test.iter().map(|s| infer(params, s, &exp.text, t)).collect::<Result<Vec<QueryOutputs>>>()?;
    cfg.shots
        .iter()
        .map(|&shots| {
            if shots > exp.support.len() {
                return Err(Error::InvalidArgument(format!(
                    "{shots} shots requested, {} support images available",
                    exp.support.len()
                )));
            }
            let bank = support_bank(params, exp, shots, t)?;
            let results = queries.iter().map(|q| score_query(q, &bank, cfg)).collect::<Result<_>>()?;
            Ok(Scored { shots, results })
        })
        .collect()
}

/// Image AUROC/AUPR and pixel AUROC/PRO of one scored test split.
pub fn metric_rows(exp: &Experiment, scored: &Scored, run: &str, report: &mut Report) -> Result<()> {
    let samples = &exp.dataset.test;
    let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
    let image = ScoredSet::new(scored.results.iter().map(|r| r.score).collect(), labels)?;
    let maps: Vec<_> = scored.results.iter().map(|r| r.fused_map.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let pixels = ScoredSet::from_maps(&maps, &masks)?;
    report.insert(run, "image_auroc", metrics::auroc(&image)?);
    report.insert(run, "image_aupr", metrics::aupr(&image)?);
    report.insert(run, "pixel_auroc", metrics::auroc(&pixels)?);
    report.insert(run, "pixel_pro", metrics::pro(&maps, &masks, PRO_FPR_LIMIT)?);
    Ok(())
}

/// Evaluates `params` on a prepared experiment; run names are `{prefix}shot{k}`.
pub fn evaluate_on(exp: &Experiment, params: &KahgParams, cfg: &RunConfig, prefix: &str) -> Result<Report> {
    let mut report = Report::default();
    for scored in score_test(exp, params, cfg)? {
        metric_rows(exp, &scored, &format!("{prefix}{}", shot_run(scored.shots)), &mut report)?;
    }
    Ok(report)
}

/// Rebuilds the experiment described by `cfg` and evaluates the checkpoint on it.
pub fn evaluate(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Report> {
    let exp = Experiment::prepare(cfg)?;
    evaluate_on(&exp, &ckpt.params, cfg, "")
}

/// Writes the fused map of the first `limit` test images as
/// `test_{index:05}_heatmap.pgm`. Returns the written paths.
pub fn render_heatmaps(
    exp: &Experiment,
    params: &KahgParams,
    cfg: &RunConfig,
    shots: usize,
    limit: usize,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    check_compatible(params, cfg)?;
    if shots == 0 || shots > exp.support.len() {
        return Err(Error::InvalidArgument(format!("{shots} shots with {} support images", exp.support.len())));
    }
    std::fs::create_dir_all(dir)?;
    let t = cfg.effective_iterations();
    let bank = support_bank(params, exp, shots, t)?;
    let mut paths = Vec::new();
    for (i, sample) in exp.test.iter().enumerate().take(limit) {
        let result = score_query(&infer(params, sample, &exp.text, t)?, &bank, cfg)?;
        let path = dir.join(format!("test_{i:05}_heatmap.pgm"));
        render_pgm(&result.fused_map, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_is_sorted_with_six_decimals() {
        let mut r = Report::default();
        r.insert("shot2", "image_auroc", 0.5);
        r.insert("shot1", "pixel_pro", 1.0 / 3.0);
        r.insert("shot1", "image_auroc", 0.9876543);
        assert_eq!(
            r.to_csv(),
            "run,metric,value\nshot1,image_auroc,0.987654\nshot1,pixel_pro,0.333333\nshot2,image_auroc,0.500000\n"
        );
    }
}
