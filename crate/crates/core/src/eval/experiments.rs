use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricsRecord, RecordTag};
use super::evaluate;
use crate::error::{Error, Result};
use crate::model::{Representation, MODALITIES};
use crate::trainer::{train_discom, train_student, ExperimentConfig, ModalityName, Splits};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAdv,
    NoMod,
    NoAux,
    NoOrth,
    OnlyInv,
    OnlyInf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdv => "no_adv",
            Variant::NoMod => "no_mod",
            Variant::NoAux => "no_aux",
            Variant::NoOrth => "no_orth",
            Variant::OnlyInv => "only_inv",
            Variant::OnlyInf => "only_inf",
        }
    }

    /// The base config with exactly one component changed.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let l = &mut cfg.loss;
        match self {
            Variant::Full => {}
            Variant::NoAdv => l.enable.adv = false,
            Variant::NoMod => l.enable.mod_ = false,
            Variant::NoAux => l.enable.aux = false,
            Variant::NoOrth => l.enable.orth = false,
            Variant::OnlyInv => l.representation = Representation::OnlyInv,
            Variant::OnlyInf => l.representation = Representation::OnlyInf,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPlan {
    /// One loss term dropped at a time, then the full model.
    Components,
    /// Task heads fed a single representation, then the full model.
    Representations,
    Custom(Vec<Variant>),
}

pub fn ablation_variants(plan: &AblationPlan) -> Vec<Variant> {
    match plan {
        AblationPlan::Components => vec![
            Variant::NoAdv,
            Variant::NoMod,
            Variant::NoAux,
            Variant::NoOrth,
            Variant::Full,
        ],
        AblationPlan::Representations => vec![Variant::OnlyInv, Variant::OnlyInf, Variant::Full],
        AblationPlan::Custom(v) => v.clone(),
    }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatOutcome {
    pub variant: String,
    /// Test-split records, one per modality per completed seed.
    pub records: Vec<MetricsRecord>,
    pub f1: [Aggregate; MODALITIES],
    pub accuracy: [Aggregate; MODALITIES],
    pub failures: Vec<(u64, String)>,
}

impl RepeatOutcome {
    pub fn incomplete(&self) -> bool {
        !self.failures.is_empty()
    }

    fn from_records(variant: &str, records: Vec<MetricsRecord>, failures: Vec<(u64, String)>) -> Self {
        let pick = |m: usize, f: fn(&MetricsRecord) -> f64| {
            let name = ModalityName::from_index(m).as_str();
            let v: Vec<f64> = records.iter().filter(|r| r.modality == name).map(f).collect();
            Aggregate::of(&v)
        };
        Self {
            variant: variant.into(),
            f1: [pick(0, |r| r.weighted_f1), pick(1, |r| r.weighted_f1)],
            accuracy: [pick(0, |r| r.accuracy), pick(1, |r| r.accuracy)],
            records,
            failures,
        }
    }
}

fn tag(variant: &str, seed: u64, m: usize) -> RecordTag {
    RecordTag {
        run_id: format!("{variant}-s{seed}"),
        seed,
        variant: variant.into(),
        modality: ModalityName::from_index(m).as_str().into(),
        split: "test".into(),
    }
}

/// Trains and tests the joint model once per configured seed. A failing seed
/// is reported in `failures` instead of aborting the others.
pub fn run_repeats(cfg: &ExperimentConfig, splits: &Splits, variant: &str) -> Result<RepeatOutcome> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let run = train_discom(cfg, splits, seed).and_then(|run| {
            (0..MODALITIES)
                .map(|m| evaluate(&run.models[m], &splits.test, tag(variant, seed, m)))
                .collect::<Result<Vec<_>>>()
        });
        match run {
            Ok(r) => records.extend(r),
            Err(e) => {
                log::warn!("{variant} seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    Ok(RepeatOutcome::from_records(variant, records, failures))
}

/// Plain cross-entropy single-modal models, one per modality per seed.
pub fn run_student_baseline(cfg: &ExperimentConfig, splits: &Splits) -> Result<RepeatOutcome> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        for m in 0..MODALITIES {
            let rec = train_student(cfg, splits, seed, m)
                .and_then(|run| evaluate(&run.model, &splits.test, tag("student", seed, m)));
            match rec {
                Ok(r) => records.push(r),
                Err(e) => failures.push((seed, e.to_string())),
            }
        }
    }
    Ok(RepeatOutcome::from_records("student", records, failures))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub f1: [Aggregate; MODALITIES],
    /// Mean of the per-modality means.
    pub average: f64,
    pub baseline_f1: Option<[f64; MODALITIES]>,
    pub incomplete: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub records: Vec<MetricsRecord>,
    /// Resolved config of each row, for echo diffing.
    pub configs: Vec<(Variant, ExperimentConfig)>,
}

pub fn run_ablation(cfg: &ExperimentConfig, splits: &Splits, plan: &AblationPlan) -> Result<AblationTable> {
    let variants = ablation_variants(plan);
    if variants.is_empty() {
        return Err(Error::Config("ablation plan has no variants".into()));
    }
    let baseline = if cfg.eval.baseline_student {
        let b = run_student_baseline(cfg, splits)?;
        Some(b)
    } else {
        None
    };
    let mut table = AblationTable {
        rows: Vec::new(),
        records: baseline.as_ref().map(|b| b.records.clone()).unwrap_or_default(),
        configs: Vec::new(),
    };
    for v in variants {
        let vcfg = v.apply(cfg);
        let out = run_repeats(&vcfg, splits, v.name())?;
        table.rows.push(AblationRow {
            variant: v,
            f1: out.f1,
            average: (out.f1[0].mean + out.f1[1].mean) / 2.0,
            baseline_f1: baseline.as_ref().map(|b| [b.f1[0].mean, b.f1[1].mean]),
            incomplete: out.incomplete(),
        });
        table.records.extend(out.records);
        table.configs.push((v, vcfg));
    }
    Ok(table)
}

pub fn write_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "seed", "variant", "modality", "split", "weighted_f1", "accuracy"])?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.variant.clone(),
            r.modality.clone(),
            r.split.clone(),
            r.weighted_f1.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ablation_table(path: impl AsRef<Path>, table: &AblationTable) -> Result<()> {
    let path = path.as_ref();
    let with_baseline = table.rows.iter().any(|r| r.baseline_f1.is_some());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["variant", "m1_f1_mean", "m1_f1_std", "m2_f1_mean", "m2_f1_std", "average"];
    if with_baseline {
        header.extend(["baseline_f1_m1", "baseline_f1_m2", "delta_m1", "delta_m2"]);
    }
    header.extend(["n_runs", "incomplete"]);
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![
            r.variant.name().to_string(),
            r.f1[0].mean.to_string(),
            r.f1[0].std.to_string(),
            r.f1[1].mean.to_string(),
            r.f1[1].std.to_string(),
            r.average.to_string(),
        ];
        if with_baseline {
            let b = r.baseline_f1.unwrap_or([f64::NAN; MODALITIES]);
            rec.extend([
                b[0].to_string(),
                b[1].to_string(),
                (r.f1[0].mean - b[0]).to_string(),
                (r.f1[1].mean - b[1]).to_string(),
            ]);
        }
        rec.extend([r.f1[0].n.min(r.f1[1].n).to_string(), r.incomplete.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ConfusionEntry<'a> {
    run_id: &'a str,
    seed: u64,
    variant: &'a str,
    modality: &'a str,
    split: &'a str,
    confusion: &'a [Vec<u64>],
}

pub fn write_confusions(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let entries: Vec<ConfusionEntry> = records
        .iter()
        .map(|r| ConfusionEntry {
            run_id: &r.run_id,
            seed: r.seed,
            variant: &r.variant,
            modality: &r.modality,
            split: &r.split,
            confusion: &r.confusion,
        })
        .collect();
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_of_one_value_has_zero_spread() {
        let a = Aggregate::of(&[0.7]);
        assert_eq!((a.mean, a.std, a.n), (0.7, 0.0, 1));
        let b = Aggregate::of(&[1.0, 2.0, 3.0]);
        assert!((b.mean - 2.0).abs() < 1e-15 && (b.std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn plans_have_the_table_shapes() {
        assert_eq!(ablation_variants(&AblationPlan::Components).len(), 5);
        assert_eq!(ablation_variants(&AblationPlan::Representations).len(), 3);
    }

    #[test]
    fn variants_change_only_their_component() {
        let base = ExperimentConfig::default();
        for v in ablation_variants(&AblationPlan::Components)
            .into_iter()
            .chain(ablation_variants(&AblationPlan::Representations))
        {
            let mut changed = v.apply(&base);
            assert_eq!(changed.loss.grl_lambda, base.loss.grl_lambda);
            changed.loss = base.loss.clone();
            assert_eq!(changed, base, "{v:?} touched more than the loss section");
            let diff = serde_json::to_value(v.apply(&base).loss).unwrap();
            let orig = serde_json::to_value(&base.loss).unwrap();
            let n_diff = leaf_diffs(&diff, &orig);
            assert_eq!(n_diff, usize::from(v != Variant::Full), "{v:?}");
        }
    }

    fn leaf_diffs(a: &serde_json::Value, b: &serde_json::Value) -> usize {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                x.iter().map(|(k, v)| leaf_diffs(v, &y[k])).sum()
            }
            _ => usize::from(a != b),
        }
    }
}
