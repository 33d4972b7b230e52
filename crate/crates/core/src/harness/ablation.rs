//! Scale × teacher × strategy sweeps with baseline-anchored deltas.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{build_model, plan_model, ModelConfig};
use crate::error::{Error, Result};
use crate::evaluation::{latency_bench, DEFAULT_RUNS, DEFAULT_WARMUP};
use crate::injection::IntegrationStrategy;
use crate::training::{evaluate, train, Dataset, TrainConfig};

use super::io::load_dataset;
use super::synthetic::{synthetic_dataset, SyntheticSpec};

/// CSV header written by [`write_records`].
pub const CSV_HEADER: &str =
    "name,scale,teacher,strategy,map50,map5095,latency_ms,fps,total_params,trainable_params,frozen_params,delta_pct,status";

/// Status column value for a cell that finished.
pub const STATUS_OK: &str = "ok";

/// Where ablation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Directory { images: PathBuf, labels: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self, input_size: usize, num_classes: usize) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(spec) => {
                if spec.image_size != input_size || spec.num_classes != num_classes {
                    return Err(Error::Config(format!(
                        "synthetic data is {}px with {} classes, model expects {input_size}px with {num_classes}",
                        spec.image_size, spec.num_classes
                    )));
                }
                synthetic_dataset(spec)
            }
            DatasetSpec::Directory { images, labels } => load_dataset(images, labels, input_size, num_classes),
        }
    }
}

/// Short schedule for toy-scale runs on the synthetic shapes data.
pub fn toy_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        lr: 0.02,
        epochs: 300,
        batch_size: 16,
        t_small: 0.25,
        t_med: 0.5,
        grad_clip: Some(10.0),
        eval_every: 5,
        flip: true,
        ..TrainConfig::default()
    };
    cfg.weights.lambda_obj = 20.0;
    cfg.weights.lambda_cls = 2.0;
    cfg
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub scale: String,
    pub teacher: String,
    pub strategy: IntegrationStrategy,
    pub map50: Option<f64>,
    pub map5095: Option<f64>,
    pub latency_ms: Option<f64>,
    pub fps: Option<f64>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub delta_pct: Option<f64>,
    pub status: String,
}

impl ExperimentRecord {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// Relative change of `map50` against `baseline`, in percent.
pub fn delta_pct(map50: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (map50 - baseline) / baseline * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationPlan {
    pub scales: Vec<String>,
    pub teachers: Vec<String>,
    pub strategies: Vec<IntegrationStrategy>,
    pub dataset: DatasetSpec,
    /// Trailing samples held out for validation.
    pub val_samples: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub train: TrainConfig,
    /// Replacement training settings for individual cells, keyed by model name.
    pub cell_overrides: BTreeMap<String, TrainConfig>,
    pub bench_warmup: usize,
    pub bench_runs: usize,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            scales: vec!["S".into()],
            teachers: vec!["toy-tiny".into()],
            strategies: IntegrationStrategy::ALL.to_vec(),
            dataset: DatasetSpec::default(),
            val_samples: 50,
            input_size: 64,
            num_classes: 2,
            seed: 0,
            train: toy_train_config(),
            cell_overrides: BTreeMap::new(),
            bench_warmup: DEFAULT_WARMUP,
            bench_runs: DEFAULT_RUNS,
        }
    }
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.teachers.is_empty() || self.strategies.is_empty() {
            return Err(Error::Usage("ablation needs at least one scale, teacher and strategy".into()));
        }
        if !self.strategies.contains(&IntegrationStrategy::None) {
            return Err(Error::Usage("ablation strategies must include none (the baseline for deltas)".into()));
        }
        self.train.validate()?;
        for cell in self.cells() {
            cell.validate()?;
        }
        Ok(())
    }

    /// Model configurations in row order: scale-major, then strategy, then teacher.
    /// The baseline appears once per scale.
    pub fn cells(&self) -> Vec<ModelConfig> {
        let mut strategies = self.strategies.clone();
        strategies.sort_by_key(|s| IntegrationStrategy::ALL.iter().position(|a| a == s));
        strategies.dedup();
        let mut cells = Vec::new();
        for scale in &self.scales {
            for &strategy in &strategies {
                let teachers = if strategy == IntegrationStrategy::None { &self.teachers[..1] } else { &self.teachers[..] };
                for teacher in teachers {
                    let cfg = ModelConfig::new(scale, teacher, strategy)
                        .with_input_size(self.input_size)
                        .with_classes(self.num_classes)
                        .with_seed(self.seed);
                    cells.push(cfg);
                }
            }
        }
        cells
    }

    fn train_config_for(&self, name: &str) -> &TrainConfig {
        self.cell_overrides.get(name).unwrap_or(&self.train)
    }
}

/// Trains, evaluates, benchmarks and accounts every cell of `plan`.
/// A cell that fails becomes a row whose status carries the error.
pub fn run_ablation(plan: &AblationPlan, out_csv: Option<&Path>) -> Result<Vec<ExperimentRecord>> {
    plan.validate()?;
    let data = plan.dataset.load(plan.input_size, plan.num_classes)?;
    if plan.val_samples == 0 || plan.val_samples >= data.len() {
        return Err(Error::Config(format!(
            "{} validation samples leave no usable split of {} samples",
            plan.val_samples,
            data.len()
        )));
    }
    let n = data.len() - plan.val_samples;
    let (train_set, val_set) = data.split(n);
    let cells = plan.cells();
    let mut records: Vec<ExperimentRecord> =
        cells.par_iter().map(|cfg| run_cell(plan, cfg, &train_set, &val_set)).collect::<Result<_>>()?;
    fill_deltas(&mut records);
    if let Some(path) = out_csv {
        write_records(path, &records)?;
    }
    Ok(records)
}

fn run_cell(plan: &AblationPlan, cfg: &ModelConfig, train_set: &Dataset, val_set: &Dataset) -> Result<ExperimentRecord> {
    let (_, report) = plan_model(cfg)?;
    let mut record = ExperimentRecord {
        name: cfg.name(),
        scale: cfg.scale.clone(),
        teacher: cfg.teacher.clone(),
        strategy: cfg.strategy,
        map50: None,
        map5095: None,
        latency_ms: None,
        fps: None,
        total_params: report.total,
        trainable_params: report.trainable,
        frozen_params: report.frozen,
        delta_pct: None,
        status: STATUS_OK.into(),
    };
    let tc = plan.train_config_for(&record.name);
    let outcome = (|| {
        let (mut model, _) = build_model(cfg)?;
        train(&mut model, train_set, None, tc, &mut ())?;
        let summary = evaluate(&model, val_set, &tc.eval)?;
        let latency = latency_bench(&model, cfg.input_size, plan.bench_warmup, plan.bench_runs)?;
        Ok::<_, Error>((summary, latency))
    })();
    match outcome {
        Ok((summary, latency)) => {
            record.map50 = summary.as_ref().map(|s| s.map50);
            record.map5095 = summary.as_ref().map(|s| s.map5095);
            record.latency_ms = Some(latency.mean_ms);
            record.fps = Some(latency.fps);
        }
        Err(e) => record.status = format!("error: {}", one_line(&e.to_string())),
    }
    Ok(record)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sets `delta_pct` on every finished row against its scale's finished baseline.
pub fn fill_deltas(records: &mut [ExperimentRecord]) {
    let baselines: BTreeMap<String, f64> = records
        .iter()
        .filter(|r| r.strategy == IntegrationStrategy::None && r.is_ok())
        .filter_map(|r| r.map50.map(|m| (r.scale.clone(), m)))
        .collect();
    for r in records.iter_mut() {
        r.delta_pct = match (r.map50, baselines.get(&r.scale)) {
            (Some(m), Some(&b)) if r.is_ok() => delta_pct(m, b),
            _ => None,
        };
    }
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records_to(file, records)
}

pub fn write_records_to<W: std::io::Write>(writer: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records_from(file)
}

pub fn read_records_from<R: std::io::Read>(reader: R) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Data(format!("unexpected ablation CSV header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(scale: &str, strategy: IntegrationStrategy, map50: Option<f64>) -> ExperimentRecord {
        ExperimentRecord {
            name: format!("{scale}-{strategy:?}"),
            scale: scale.into(),
            teacher: "toy-tiny".into(),
            strategy,
            map50,
            map5095: map50.map(|m| m / 2.0),
            latency_ms: Some(3.25),
            fps: Some(1000.0 / 3.25),
            total_params: 10,
            trainable_params: 7,
            frozen_params: 3,
            delta_pct: None,
            status: STATUS_OK.into(),
        }
    }

    #[test]
    fn delta_examples() {
        assert!((delta_pct(0.5308, 0.4539).unwrap() - 16.94).abs() < 0.01);
        assert_eq!(delta_pct(0.4539, 0.4539), Some(0.0));
        assert_eq!(delta_pct(0.3, 0.0), None);
    }

    #[test]
    fn cells_are_scale_major_with_one_baseline_per_scale() {
        let plan = AblationPlan {
            scales: vec!["S".into(), "M".into()],
            teachers: vec!["toy-tiny".into(), "toy-small".into()],
            strategies: vec![IntegrationStrategy::DualP0P3, IntegrationStrategy::None, IntegrationStrategy::SingleP3],
            ..AblationPlan::default()
        };
        let names: Vec<String> = plan.cells().iter().map(ModelConfig::name).collect();
        assert_eq!(
            names,
            [
                "S-baseline",
                "S-toytiny-singlep3",
                "S-toysmall-singlep3",
                "S-toytiny-dualp0p3",
                "S-toysmall-dualp0p3",
                "M-baseline",
                "M-toytiny-singlep3",
                "M-toysmall-singlep3",
                "M-toytiny-dualp0p3",
                "M-toysmall-dualp0p3",
            ]
        );
    }

    #[test]
    fn plan_requires_baseline_and_strategies() {
        let mut plan = AblationPlan { strategies: vec![IntegrationStrategy::SingleP3], ..AblationPlan::default() };
        assert!(matches!(plan.validate(), Err(Error::Usage(_))));
        plan.strategies.clear();
        assert!(matches!(plan.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn deltas_anchor_on_same_scale_baseline() {
        let mut rows = vec![
            record("S", IntegrationStrategy::None, Some(0.4)),
            record("S", IntegrationStrategy::SingleP3, Some(0.5)),
            record("M", IntegrationStrategy::None, Some(0.5)),
            record("M", IntegrationStrategy::SingleP3, Some(0.4)),
        ];
        rows[3].status = "error: boom".into();
        fill_deltas(&mut rows);
        assert_eq!(rows[0].delta_pct, Some(0.0));
        assert!((rows[1].delta_pct.unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(rows[2].delta_pct, Some(0.0));
        assert_eq!(rows[3].delta_pct, None);
    }

    #[test]
    fn csv_header_is_fixed() {
        let mut buf = Vec::new();
        write_records_to(&mut buf, &[record("S", IntegrationStrategy::None, Some(0.4))]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some(CSV_HEADER));
        let mut empty = Vec::new();
        write_records_to(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_HEADER);
    }

    fn strategy() -> impl Strategy<Value = IntegrationStrategy> {
        (0..IntegrationStrategy::ALL.len()).prop_map(|i| IntegrationStrategy::ALL[i])
    }

    fn opt_f64() -> impl Strategy<Value = Option<f64>> {
        prop::option::of(prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), 0.0..1.0f64])
    }

    proptest! {
        #[test]
        fn csv_round_trips(
            rows in prop::collection::vec(
                (strategy(), opt_f64(), opt_f64(), opt_f64(), opt_f64(), any::<usize>(), any::<usize>(), any::<usize>(), opt_f64(), "[ -~]{0,20}"),
                0..6,
            )
        ) {
            let records: Vec<ExperimentRecord> = rows
                .into_iter()
                .enumerate()
                .map(|(i, (s, a, b, l, f, t, tr, fr, d, status))| ExperimentRecord {
                    name: format!("row{i}, \"quoted\""),
                    scale: "S".into(),
                    teacher: "toy-tiny".into(),
                    strategy: s,
                    map50: a,
                    map5095: b,
                    latency_ms: l,
                    fps: f,
                    total_params: t,
                    trainable_params: tr,
                    frozen_params: fr,
                    delta_pct: d,
                    status,
                })
                .collect();
            let mut buf = Vec::new();
            write_records_to(&mut buf, &records).unwrap();
            let back = read_records_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, records);
        }
    }
}
