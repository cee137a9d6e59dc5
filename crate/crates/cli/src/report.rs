//! Cross-run comparison: aggregate summary.json files by (task, shield mode)
//! into a CSV table plus comparison charts. A run directory is self-describing,
//! so the report consults nothing but the directories it is given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use farl_core::trainer::{RunSummary, SUMMARY_SCHEMA_VERSION};
use farl_core::FarlError;

use crate::plots;

pub const REPORT_CSV_HEADER: &str = "method,task,runs,failure_episodes_mean,failure_episodes_sd,\
return_before_mean,return_after_mean,normalized_return_after_mean,percent_failure_reduction_vs_none";

#[derive(Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<LoadedRun>> {
    if dirs.is_empty() {
        return Err(FarlError::InvalidConfig("report needs at least one run directory".into()).into());
    }
    let mut runs = Vec::new();
    for dir in dirs {
        let path = dir.join("summary.json");
        let bytes = std::fs::read(&path)
            .map_err(|e| FarlError::Data(format!("{}: {e}", path.display())))?;
        let summary: RunSummary = serde_json::from_slice(&bytes)
            .map_err(|e| FarlError::Data(format!("{}: {e}", path.display())))?;
        if summary.schema_version != SUMMARY_SCHEMA_VERSION {
            return Err(FarlError::InvalidConfig(format!(
                "{}: summary schema v{} does not match this tool's v{}; refusing to compare",
                path.display(),
                summary.schema_version,
                SUMMARY_SCHEMA_VERSION
            ))
            .into());
        }
        runs.push(LoadedRun {
            dir: dir.clone(),
            summary,
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone)]
pub struct MethodRow {
    pub method: String,
    pub task: String,
    pub runs: usize,
    pub failures_mean: f64,
    pub failures_sd: f64,
    pub return_before_mean: f64,
    pub return_after_mean: f64,
    pub normalized_after_mean: f64,
    /// vs the mode=none baseline on the same task, when one is present.
    pub percent_failure_reduction: Option<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One row per (task, shield mode), averaged over seeds.
pub fn aggregate(runs: &[LoadedRun]) -> Vec<MethodRow> {
    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for run in runs {
        let key = (
            run.summary.config.task.to_string(),
            run.summary.config.safety.mode.to_string(),
        );
        groups.entry(key).or_default().push(&run.summary);
    }
    let baseline: BTreeMap<String, f64> = groups
        .iter()
        .filter(|((_, mode), _)| mode == "none")
        .map(|((task, _), rs)| {
            let fails: Vec<f64> = rs.iter().map(|s| s.failure_episode_count as f64).collect();
            (task.clone(), mean_sd(&fails).0)
        })
        .collect();

    groups
        .into_iter()
        .map(|((task, method), rs)| {
            let fails: Vec<f64> = rs.iter().map(|s| s.failure_episode_count as f64).collect();
            let (failures_mean, failures_sd) = mean_sd(&fails);
            let before: Vec<f64> = rs.iter().map(|s| s.mean_return_before).collect();
            let after: Vec<f64> = rs.iter().map(|s| s.mean_return_after).collect();
            let norm: Vec<f64> = rs.iter().map(|s| s.normalized_return_after).collect();
            let percent_failure_reduction = match baseline.get(&task) {
                Some(&b) if method != "none" && b > 0.0 => {
                    Some(100.0 * (b - failures_mean) / b)
                }
                _ => None,
            };
            MethodRow {
                method,
                task,
                runs: rs.len(),
                failures_mean,
                failures_sd,
                return_before_mean: mean_sd(&before).0,
                return_after_mean: mean_sd(&after).0,
                normalized_after_mean: mean_sd(&norm).0,
                percent_failure_reduction,
            }
        })
        .collect()
}

pub fn table_csv(rows: &[MethodRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let reduction = r
            .percent_failure_reduction
            .map(|p| format!("{p}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.task,
            r.runs,
            r.failures_mean,
            r.failures_sd,
            r.return_before_mean,
            r.return_after_mean,
            r.normalized_after_mean,
            reduction
        ));
    }
    out
}

/// Write report.csv plus failure/return comparison charts into `out`.
pub fn write_report(runs: &[LoadedRun], out: &Path) -> Result<Vec<PathBuf>> {
    let rows = aggregate(runs);
    std::fs::create_dir_all(out).map_err(FarlError::from)?;
    let mut written = Vec::new();

    let csv_path = out.join("report.csv");
    std::fs::write(&csv_path, table_csv(&rows)).map_err(FarlError::from)?;
    written.push(csv_path);

    // Record which run directories fed this report.
    let sources: String = runs
        .iter()
        .map(|r| format!("{}\n", r.dir.display()))
        .collect();
    let sources_path = out.join("runs.txt");
    std::fs::write(&sources_path, sources).map_err(FarlError::from)?;
    written.push(sources_path);

    let mut tasks: Vec<String> = rows.iter().map(|r| r.task.clone()).collect();
    tasks.dedup();
    tasks.sort();
    tasks.dedup();
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();

    let per_method = |f: &dyn Fn(&MethodRow) -> f64| -> Vec<(String, Vec<f64>)> {
        methods
            .iter()
            .map(|m| {
                let vals = tasks
                    .iter()
                    .map(|t| {
                        rows.iter()
                            .find(|r| &r.method == m && &r.task == t)
                            .map(f)
                            .unwrap_or(0.0)
                    })
                    .collect();
                (m.clone(), vals)
            })
            .collect()
    };

    let failures_svg = out.join("failure_episodes.svg");
    std::fs::write(
        &failures_svg,
        plots::bar_chart(
            "Failure episodes by shield mode",
            "failure episodes (mean over seeds)",
            &tasks,
            &per_method(&|r| r.failures_mean),
        ),
    )
    .map_err(FarlError::from)?;
    written.push(failures_svg);

    let returns_svg = out.join("normalized_return.svg");
    std::fs::write(
        &returns_svg,
        plots::bar_chart(
            "Normalized final return by shield mode",
            "normalized return (expert = 100)",
            &tasks,
            &per_method(&|r| r.normalized_after_mean),
        ),
    )
    .map_err(FarlError::from)?;
    written.push(returns_svg);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use farl_core::envs::TaskId;
    use farl_core::shield::ShieldMode;
    use farl_core::trainer::{EvalReport, OfflineReport, RunConfig};
    use farl_core::worldmodel::{LossBreakdown, WmReport};

    fn fake_summary(task: TaskId, mode: ShieldMode, failures: usize) -> RunSummary {
        let mut config = RunConfig::default();
        config.task = task;
        config.safety.mode = mode;
        RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            config,
            offline: OfflineReport {
                bc_final_loss: 0.1,
                recovery_bc_final_loss: 0.1,
                finetune_epochs_run: 1,
                finetune_kl_stops: 0,
                demo_log_likelihood_before: -2.0,
                demo_log_likelihood_after: -1.9,
                wm: WmReport {
                    steps: 1,
                    final_loss: LossBreakdown::default(),
                    holdout_constraint_auc: 0.9,
                    holdout_decoder_rmse_one_step: 0.01,
                    holdout_decoder_rmse_open_loop: 0.02,
                    holdout_chat_cost1: 0.8,
                    holdout_chat_cost0: 0.1,
                    quality_warning: false,
                },
                offline_eval: EvalReport {
                    episodes: 1,
                    mean_return: 0.0,
                    std_return: 0.0,
                    success_rate: 0.0,
                    failure_rate: 0.0,
                },
                expert_return: 1.0,
                random_return: 0.0,
            },
            failure_episode_count: failures,
            intervention_rate: 0.0,
            mean_return_before: 0.0,
            mean_return_after: 1.0,
            normalized_return_before: 0.0,
            normalized_return_after: 50.0,
            total_env_steps: 100,
            episode_count: 10,
        }
    }

    fn run(task: TaskId, mode: ShieldMode, failures: usize) -> LoadedRun {
        LoadedRun {
            dir: PathBuf::from("x"),
            summary: fake_summary(task, mode, failures),
        }
    }

    #[test]
    fn percent_reduction_matches_hand_calculation() {
        let runs = vec![
            run(TaskId::BoundedPush, ShieldMode::None, 10),
            run(TaskId::BoundedPush, ShieldMode::None, 14),
            run(TaskId::BoundedPush, ShieldMode::WorldModel, 3),
            run(TaskId::BoundedPush, ShieldMode::WorldModel, 3),
        ];
        let rows = aggregate(&runs);
        let shielded = rows.iter().find(|r| r.method == "world_model").unwrap();
        // Baseline mean 12, shielded mean 3 -> 75% reduction.
        assert_eq!(shielded.percent_failure_reduction, Some(75.0));
        assert_eq!(shielded.runs, 2);
        let none = rows.iter().find(|r| r.method == "none").unwrap();
        assert_eq!(none.percent_failure_reduction, None);
        assert_eq!(none.failures_mean, 12.0);
        assert_eq!(none.failures_sd, 2.0);
    }

    #[test]
    fn single_run_table_has_one_row_without_reduction() {
        let rows = aggregate(&[run(TaskId::BoundedSoccer, ShieldMode::QSafe, 5)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].percent_failure_reduction, None);
        let csv = table_csv(&rows);
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut summary = fake_summary(TaskId::BoundedPush, ShieldMode::None, 1);
        summary.schema_version = SUMMARY_SCHEMA_VERSION + 1;
        std::fs::write(
            dir.path().join("summary.json"),
            serde_json::to_vec(&summary).unwrap(),
        )
        .unwrap();
        let err = load_runs(&[dir.path().to_path_buf()]).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
    }
}
