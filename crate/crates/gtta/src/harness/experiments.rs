//! Experiment grids: the ablation over {GRT × TPD} and the method comparison, both
//! aggregated over seeds.

use super::{
    adapt_stream, domain_features, evaluate_frozen, stream_order, train_source, AdaptHyper,
    Method, TrainConfig,
};
use crate::error::Result;
use crate::metrics::{DomainEval, EvalResult};
use crate::model::Model;
use crate::synthdata::Dataset;
use serde::{Deserialize, Serialize};

/// One (setting, seed) run over every target domain.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunRecord {
    pub setting: String,
    pub seed: u64,
    pub eval: EvalResult,
}

pub const ABLATION_SETTINGS: [&str; 4] = ["vanilla", "grt", "tpd", "grt+tpd"];

/// Train both source models per seed (vanilla and GRT share backbone init, source
/// data, and shuffle order), then evaluate the four {GRT × TPD} cells on every
/// target from fresh clones over identical streams.
pub fn run_ablation(
    source: &Dataset,
    targets: &[Dataset],
    train: &TrainConfig,
    hyper: &AdaptHyper,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    run_over_seeds(seeds, jobs, |seed| ablation_for_seed(source, targets, train, hyper, seed))
}

fn ablation_for_seed(
    source: &Dataset,
    targets: &[Dataset],
    train: &TrainConfig,
    hyper: &AdaptHyper,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let vanilla_cfg = TrainConfig { grt_enabled: false, seed, ..train.clone() };
    let grt_cfg = TrainConfig { grt_enabled: true, seed, ..train.clone() };
    let (vanilla, _) = train_source(&vanilla_cfg, source)?;
    let (grt, _) = train_source(&grt_cfg, source)?;

    let mut evals: Vec<Vec<DomainEval>> = vec![Vec::new(); 4];
    for tgt in targets {
        let order = stream_order(seed, tgt.name(), tgt.len());
        let labels: Vec<u8> = order.iter().map(|&i| tgt.samples[i].label).collect();
        let feats_v = domain_features(&vanilla, tgt, &order)?;
        let feats_g = domain_features(&grt, tgt, &order)?;

        evals[0].push(evaluate_frozen(&vanilla, tgt)?);
        evals[1].push(evaluate_frozen(&grt, tgt)?);
        evals[2].push(
            adapt_stream(&vanilla, tgt.name(), &feats_v, &labels, Method::Tpd, hyper, seed)?.eval,
        );
        evals[3].push(
            adapt_stream(&grt, tgt.name(), &feats_g, &labels, Method::Tpd, hyper, seed)?.eval,
        );
    }
    Ok(ABLATION_SETTINGS
        .iter()
        .zip(evals)
        .map(|(setting, domains)| RunRecord {
            setting: setting.to_string(),
            seed,
            eval: EvalResult { domains },
        })
        .collect())
}

/// Adapt the identical GRT-trained checkpoint with every method over identical
/// target streams.
pub fn run_comparison(
    source: &Dataset,
    targets: &[Dataset],
    train: &TrainConfig,
    hyper: &AdaptHyper,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    run_over_seeds(seeds, jobs, |seed| {
        let cfg = TrainConfig { grt_enabled: true, seed, ..train.clone() };
        let (model, _) = train_source(&cfg, source)?;
        comparison_for_model(&model, targets, hyper, seed)
    })
}

/// The comparison grid from an already-trained model.
pub fn comparison_for_model(
    model: &Model,
    targets: &[Dataset],
    hyper: &AdaptHyper,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    let mut evals: Vec<Vec<DomainEval>> = vec![Vec::new(); Method::ALL.len()];
    for tgt in targets {
        let order = stream_order(seed, tgt.name(), tgt.len());
        let labels: Vec<u8> = order.iter().map(|&i| tgt.samples[i].label).collect();
        let feats = domain_features(model, tgt, &order)?;
        for (mi, method) in Method::ALL.iter().enumerate() {
            evals[mi]
                .push(adapt_stream(model, tgt.name(), &feats, &labels, *method, hyper, seed)?.eval);
        }
    }
    Ok(Method::ALL
        .iter()
        .zip(evals)
        .map(|(m, domains)| RunRecord {
            setting: m.name().to_string(),
            seed,
            eval: EvalResult { domains },
        })
        .collect())
}

fn run_over_seeds<F>(seeds: &[u64], jobs: usize, per_seed: F) -> Result<Vec<RunRecord>>
where
    F: Fn(u64) -> Result<Vec<RunRecord>> + Sync,
{
    let results: Vec<Result<Vec<RunRecord>>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| {
            use rayon::prelude::*;
            seeds.par_iter().map(|&s| per_seed(s)).collect()
        })
    } else {
        seeds.iter().map(|&s| per_seed(s)).collect()
    };
    let mut flat = Vec::new();
    for r in results {
        flat.extend(r?);
    }
    Ok(flat)
}

/// Aggregated mean ± std of one (setting, domain) cell.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AggRow {
    pub setting: String,
    pub domain: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Collapse run records into per-(setting, domain) rows plus an "avg" row per
/// setting, in a fixed order.
pub fn aggregate(records: &[RunRecord], settings: &[&str]) -> Vec<AggRow> {
    let domains: Vec<String> = records
        .first()
        .map(|r| r.eval.domains.iter().map(|d| d.domain.clone()).collect())
        .unwrap_or_default();
    let mut rows = Vec::new();
    for &setting in settings {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.setting == setting).collect();
        if runs.is_empty() {
            continue;
        }
        for (di, domain) in domains.iter().enumerate() {
            let accs: Vec<f64> = runs.iter().map(|r| r.eval.domains[di].acc).collect();
            let aucs: Vec<f64> = runs.iter().map(|r| r.eval.domains[di].auc).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (auc_mean, auc_std) = mean_std(&aucs);
            rows.push(AggRow {
                setting: setting.to_string(),
                domain: domain.clone(),
                acc_mean,
                acc_std,
                auc_mean,
                auc_std,
            });
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.eval.avg().0).collect();
        let aucs: Vec<f64> = runs.iter().map(|r| r.eval.avg().1).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let (auc_mean, auc_std) = mean_std(&aucs);
        rows.push(AggRow {
            setting: setting.to_string(),
            domain: "avg".into(),
            acc_mean,
            acc_std,
            auc_mean,
            auc_std,
        });
    }
    rows
}

/// Mean over seeds of the target-average accuracy for one setting.
pub fn mean_target_avg_acc(records: &[RunRecord], setting: &str) -> f64 {
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.setting == setting)
        .map(|r| r.eval.avg().0)
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DomainEval;

    fn record(setting: &str, seed: u64, accs: &[f64]) -> RunRecord {
        RunRecord {
            setting: setting.into(),
            seed,
            eval: EvalResult {
                domains: accs
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| DomainEval { domain: format!("d{i}"), acc: a, auc: a + 1.0 })
                    .collect(),
            },
        }
    }

    #[test]
    fn aggregate_means_and_stds() {
        let records = vec![
            record("grt", 0, &[60.0, 70.0]),
            record("grt", 1, &[62.0, 74.0]),
        ];
        let rows = aggregate(&records, &["grt"]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].domain, "d0");
        assert!((rows[0].acc_mean - 61.0).abs() < 1e-12);
        assert!((rows[0].acc_std - std::f64::consts::SQRT_2).abs() < 1e-12);
        let avg = &rows[2];
        assert_eq!(avg.domain, "avg");
        assert!((avg.acc_mean - 66.5).abs() < 1e-12);
    }

    #[test]
    fn mean_target_avg_acc_filters_by_setting() {
        let records = vec![
            record("a", 0, &[50.0, 70.0]),
            record("a", 1, &[60.0, 80.0]),
            record("b", 0, &[0.0, 0.0]),
        ];
        assert!((mean_target_avg_acc(&records, "a") - 65.0).abs() < 1e-12);
    }
}
