//! Method comparison and ablation runs over a shared dataset.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datamodel::{save_bundle, save_estimate, AbundanceSequence, DatasetBundle, EndmemberSet};
use crate::exec::Exec;
use crate::geom::{fcls_sequence, vca_endmember_set, vca_per_phase};
use crate::metrics::{evaluate, write_metrics_csv, MetricsReport, MetricsRow};
use crate::nn::{CemMode, ModuleSwitches};
use crate::{Error, Result};

use super::config::ExperimentConfig;
use super::render::{render_endmembers, render_maps};
use super::train::{resolve_arch, train, write_loss_curve, TrainedModel};

/// Where the FCLS baseline takes its endmembers from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndmemberSource {
    /// VCA on every phase with the given seed.
    Vca(u64),
    /// Per-phase ground-truth endmembers.
    Truth,
}

pub struct BaselineResult {
    pub abundances: AbundanceSequence,
    pub endmembers: EndmemberSet,
    pub metrics: MetricsReport,
}

/// Per-phase FCLS with extracted or ground-truth endmembers.
pub fn run_fcls(bundle: &DatasetBundle, p: usize, source: EndmemberSource, exec: Exec) -> Result<BaselineResult> {
    bundle.validate()?;
    let started = Instant::now();
    let endmembers = match source {
        EndmemberSource::Vca(seed) => vca_endmember_set(&vca_per_phase(&bundle.observed, p, seed, exec)?)?,
        EndmemberSource::Truth => {
            let gt = bundle.gt_endmembers.as_ref().ok_or_else(|| Error::Validation("dataset has no ground-truth endmembers".into()))?;
            EndmemberSet::new(gt.phases(), gt.bands(), gt.endmembers(), gt.per_phase_data().to_vec())?
        }
    };
    let abundances = fcls_sequence(&bundle.observed, &endmembers, exec)?;
    let metrics = evaluate(bundle, &abundances, &endmembers, started.elapsed().as_secs_f64())?;
    Ok(BaselineResult { abundances, endmembers, metrics })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the per-run artifacts of a trained model into `dir`.
pub fn write_model_outputs(model: &mut TrainedModel, dir: &Path, figures: bool, checkpoint: bool) -> Result<()> {
    create_dir(dir)?;
    write_loss_curve(dir.join("loss_curve.csv"), &model.record.loss_trace)?;
    save_estimate(&model.prediction.abundances, &model.prediction.endmembers, dir.join("estimate"))?;
    if checkpoint {
        model.save(dir)?;
    }
    if figures {
        render_maps(&model.prediction.abundances, dir.join("maps"))?;
        render_endmembers(&model.prediction.endmembers, dir.join("endmembers"))?;
    }
    write_json(&dir.join("run.json"), &model.record)
}

/// Writes the estimate, figures and `metrics.json` of a baseline run into `dir`.
pub fn write_baseline_outputs(base: &BaselineResult, dir: &Path, figures: bool) -> Result<()> {
    create_dir(dir)?;
    save_estimate(&base.abundances, &base.endmembers, dir.join("estimate"))?;
    if figures {
        render_maps(&base.abundances, dir.join("maps"))?;
        render_endmembers(&base.endmembers, dir.join("endmembers"))?;
    }
    write_json(&dir.join("metrics.json"), &base.metrics)
}

pub struct ExperimentReport {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// FCLS and the network on one dataset for every configured seed. `metrics.csv` is
/// rewritten after each run, so a failure leaves the finished rows on disk.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentReport> {
    cfg.validate()?;
    let bundle = cfg.dataset.materialize(exec)?;
    let arch = resolve_arch(&cfg.arch, &bundle)?;
    let dataset = cfg.dataset.name();
    let root = cfg.output.dir.clone();
    create_dir(&root)?;
    write_json(&root.join("config.json"), cfg)?;
    let metrics_path = root.join("metrics.csv");
    let mut rows = Vec::new();
    for seed in cfg.seeds() {
        let dir = root.join("fcls").join(format!("seed{seed}"));
        let base = run_fcls(&bundle, arch.endmembers, EndmemberSource::Vca(seed), exec)?;
        write_baseline_outputs(&base, &dir, cfg.output.figures)?;
        rows.push(MetricsRow { method: "fcls".into(), dataset: dataset.clone(), seed, report: base.metrics });
        write_metrics_csv(&metrics_path, &rows)?;

        let tc = crate::harness::TrainConfig { seed, ..cfg.train.clone() };
        log::info!("training seed {seed} on {dataset}");
        let mut model = train(&bundle, &arch, &tc, &cfg.loss, exec)?;
        write_model_outputs(&mut model, &root.join("muformer").join(format!("seed{seed}")), cfg.output.figures, cfg.output.checkpoints)?;
        rows.push(MetricsRow { method: "muformer".into(), dataset: dataset.clone(), seed, report: model.record.metrics });
        write_metrics_csv(&metrics_path, &rows)?;
    }
    Ok(ExperimentReport { dir: root, rows })
}

/// Generates (or loads) the configured dataset and writes it as a bundle.
pub fn generate(cfg: &ExperimentConfig, out: impl AsRef<Path>, exec: Exec) -> Result<DatasetBundle> {
    let bundle = cfg.dataset.materialize(exec)?;
    save_bundle(&bundle, out)?;
    Ok(bundle)
}

/// One configuration of the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    /// Which comparison the row belongs to: `modules` or `cem_mode`.
    pub group: String,
    pub label: String,
    pub switches: ModuleSwitches,
}

impl AblationSetting {
    pub fn new(group: &str, label: &str, use_gam: bool, use_cem: bool, cem_mode: CemMode) -> Self {
        Self { group: group.into(), label: label.into(), switches: ModuleSwitches { use_gam, use_cem, cem_mode } }
    }

    /// Switches with `cem_mode` normalised away when the module is off, so equal runs share a key.
    fn key(&self) -> (bool, bool, Option<CemMode>) {
        let s = self.switches;
        (s.use_gam, s.use_cem, s.use_cem.then_some(s.cem_mode))
    }
}

/// The module study (baseline, +CEM, +GAM, full) followed by the CEM-mode study
/// (GAM only, then each way of combining the two change maps).
pub fn default_ablation_settings() -> Vec<AblationSetting> {
    use CemMode::*;
    vec![
        AblationSetting::new("modules", "baseline", false, false, A1TimesA2),
        AblationSetting::new("modules", "+cem", false, true, A1TimesA2),
        AblationSetting::new("modules", "+gam", true, false, A1TimesA2),
        AblationSetting::new("modules", "full", true, true, A1TimesA2),
        AblationSetting::new("cem_mode", "baseline", true, false, A1TimesA2),
        AblationSetting::new("cem_mode", "a1", true, true, A1),
        AblationSetting::new("cem_mode", "a2", true, true, A2),
        AblationSetting::new("cem_mode", "a1_plus_a2", true, true, A1PlusA2),
        AblationSetting::new("cem_mode", "a1_times_a2", true, true, A1TimesA2),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub seed: u64,
    pub report: MetricsReport,
    pub asc_violations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

impl AblationTable {
    /// Median of a metric over the seeds of one setting.
    pub fn median(&self, group: &str, label: &str, metric: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting.group == group && r.setting.label == label)
            .filter_map(|r| metric(&r.report))
            .collect();
        median(&mut v)
    }

    pub const HEADER: &'static str = "group,setting,use_gam,use_cem,cem_mode,seed,nrmse_a,nrmse_m,sam_m,nrmse_y,runtime_s";

    /// Per-seed rows in setting order, each setting followed by a `median` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut i = 0;
        while i < self.rows.len() {
            let set = &self.rows[i].setting;
            let sw = set.switches;
            let prefix = format!("{},{},{},{},{}", set.group, set.label, sw.use_gam, sw.use_cem, sw.cem_mode.name());
            let mut j = i;
            while j < self.rows.len() && self.rows[j].setting == *set {
                let m = &self.rows[j].report;
                let _ = writeln!(
                    s,
                    "{prefix},{},{},{},{},{},{}",
                    self.rows[j].seed,
                    fmt(m.nrmse_a),
                    fmt(m.nrmse_m),
                    fmt(m.sam_m),
                    m.nrmse_y,
                    m.runtime_s
                );
                j += 1;
            }
            let med = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
                let mut v: Vec<f64> = self.rows[i..j].iter().filter_map(|r| f(&r.report)).collect();
                median(&mut v)
            };
            let _ = writeln!(
                s,
                "{prefix},median,{},{},{},{},{}",
                fmt(med(&|m| m.nrmse_a)),
                fmt(med(&|m| m.nrmse_m)),
                fmt(med(&|m| m.sam_m)),
                fmt(med(&|m| Some(m.nrmse_y))),
                fmt(med(&|m| Some(m.runtime_s)))
            );
            i = j;
        }
        s
    }
}

/// Trains every setting for every seed on the same dataset. Settings that resolve to
/// the same switches reuse one training run per seed; every setting still gets its rows.
pub fn ablate_settings(cfg: &ExperimentConfig, settings: &[AblationSetting], exec: Exec) -> Result<AblationTable> {
    cfg.validate()?;
    if settings.is_empty() {
        return Err(Error::Config("no ablation settings".into()));
    }
    let bundle = cfg.dataset.materialize(exec)?;
    let arch = resolve_arch(&cfg.arch, &bundle)?;
    let mut cache: HashMap<((bool, bool, Option<CemMode>), u64), (MetricsReport, usize)> = HashMap::new();
    let mut rows = Vec::new();
    for setting in settings {
        for seed in cfg.seeds() {
            let key = (setting.key(), seed);
            if !cache.contains_key(&key) {
                log::info!("ablation {}/{} seed {seed}", setting.group, setting.label);
                let tc = crate::harness::TrainConfig { seed, ..cfg.train.clone() }.with_switches(setting.switches);
                let model = train(&bundle, &arch, &tc, &cfg.loss, exec)?;
                let violations = crate::datamodel::validate_abundance(&model.prediction.abundances, 1e-5).len();
                cache.insert(key, (model.record.metrics, violations));
            }
            let (report, asc_violations) = cache[&key].clone();
            rows.push(AblationRow { setting: setting.clone(), seed, report, asc_violations });
        }
    }
    Ok(AblationTable { rows })
}

/// The default ablation study; writes `ablation.csv` into the output directory.
pub fn ablate(cfg: &ExperimentConfig, exec: Exec) -> Result<AblationTable> {
    let table = ablate_settings(cfg, &default_ablation_settings(), exec)?;
    create_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join("ablation.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
