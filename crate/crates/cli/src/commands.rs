use std::path::{Path, PathBuf};

use discom_core::data_io::export_dataset;
use discom_core::eval::{
    evaluate, run_ablation, write_ablation_table, write_confusions, write_metrics_csv, AblationPlan, MetricsRecord,
    RecordTag,
};
use discom_core::model::MODALITIES;
use discom_core::synth::generate;
use discom_core::trainer::{
    self, load_checkpoint, prepare_splits, save_checkpoint, write_history, write_plain_history, Checkpoint,
    ExperimentConfig, ModalityName, CHECKPOINT_VERSION,
};
use discom_core::Error;
use log::info;
use serde_json::json;

use crate::{Common, Failure, Plan};

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";

type Outcome = std::result::Result<(), Failure>;

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    quiet: bool,
}

impl Run {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn seed_dir(&self, seed: u64) -> Result<PathBuf, Failure> {
        let d = self.out.join(format!("seed_{seed}"));
        create_dir(&d)?;
        Ok(d)
    }
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Core(Error::Io { path: path.into(), source: e }))
}

/// Defaults, then the config file (or `fallback` when none is given), then
/// `--set`, then `--seeds` and `--out`.
fn resolve(common: &Common, fallback: Option<&Path>) -> Result<Run, Failure> {
    let file = common.config.as_deref().or(fallback);
    if let Some(p) = file {
        if !p.is_file() {
            return Err(Failure::Usage(format!("config file `{}` does not exist", p.display())));
        }
    }
    let mut cfg = ExperimentConfig::resolve(file, &common.overrides)?;
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    cfg.validate()?;
    Ok(Run {
        cfg,
        out,
        quiet: common.quiet,
    })
}

/// Makes the run directory self-describing.
fn persist(run: &Run, command: &str) -> Outcome {
    create_dir(&run.out)?;
    write_text(&run.out.join(CONFIG_FILE), &run.cfg.to_json()?)?;
    let tag = json!({
        "tool": "discom",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_version": CHECKPOINT_VERSION,
        "command": command,
        "seeds": run.cfg.seeds,
    });
    write_text(&run.out.join(RUN_FILE), &serde_json::to_string_pretty(&tag).map_err(Error::from)?)
}

pub fn synth_data(common: &Common) -> Outcome {
    let run = resolve(common, None)?;
    persist(&run, "synth-data")?;
    let dataset = generate(&run.cfg.data.synth)?;
    let manifest = export_dataset(&dataset, &run.out)?;
    info!("wrote {} samples", dataset.len());
    run.say(format!("manifest: {}", manifest.display()));
    Ok(())
}

pub fn train_discom(common: &Common) -> Outcome {
    let run = resolve(common, None)?;
    persist(&run, "train-discom")?;
    let splits = prepare_splits(&run.cfg)?;
    for &seed in &run.cfg.seeds {
        let result = trainer::train_discom(&run.cfg, &splits, seed)?;
        let dir = run.seed_dir(seed)?;
        write_history(dir.join("history.csv"), &result.history)?;
        for m in 0..MODALITIES {
            let name = ModalityName::from_index(m).as_str();
            let ck = Checkpoint::of_model(
                &result.models[m],
                &run.cfg,
                result.best_epoch[m],
                Some(result.best_val_f1[m]),
            );
            save_checkpoint(dir.join(format!("{name}.ckpt")), &ck)?;
        }
        let joint = Checkpoint::of_bundle(&result.bundle, &run.cfg, run.cfg.optimizer.epochs);
        save_checkpoint(dir.join("bundle.ckpt"), &joint)?;
        run.say(format!(
            "seed {seed}: best val F1 m1 {:.4} (epoch {}), m2 {:.4} (epoch {})",
            result.best_val_f1[0], result.best_epoch[0], result.best_val_f1[1], result.best_epoch[1]
        ));
    }
    Ok(())
}

pub fn train_teacher(common: &Common) -> Outcome {
    let run = resolve(common, None)?;
    persist(&run, "train-teacher")?;
    let splits = prepare_splits(&run.cfg)?;
    for &seed in &run.cfg.seeds {
        let result = trainer::train_teacher(&run.cfg, &splits, seed)?;
        let dir = run.seed_dir(seed)?;
        write_plain_history(dir.join("teacher_history.csv"), &result.history)?;
        let ck = Checkpoint::of_model(&result.model, &run.cfg, result.best_epoch, Some(result.best_val_f1));
        save_checkpoint(dir.join("teacher.ckpt"), &ck)?;
        run.say(format!(
            "seed {seed}: teacher best val F1 {:.4} (epoch {})",
            result.best_val_f1, result.best_epoch
        ));
    }
    Ok(())
}

pub fn distill(common: &Common, teacher_dir: Option<&Path>) -> Outcome {
    let run = resolve(common, None)?;
    persist(&run, "distill")?;
    let splits = prepare_splits(&run.cfg)?;
    let teacher_root = teacher_dir.map(Path::to_path_buf).unwrap_or_else(|| run.out.clone());
    let kd = run.cfg.distill.kd;
    for &seed in &run.cfg.seeds {
        let teacher = load_checkpoint(teacher_root.join(format!("seed_{seed}")).join("teacher.ckpt"))?.into_model()?;
        let dir = run.seed_dir(seed)?;
        for student in &run.cfg.distill.students {
            let name = student.as_str();
            let result = trainer::distill_student(&run.cfg, &splits, seed, &teacher, student.index(), kd)?;
            write_plain_history(dir.join(format!("kd_{name}_history.csv")), &result.history)?;
            let ck = Checkpoint::of_model(&result.model, &run.cfg, result.best_epoch, Some(result.best_val_f1));
            save_checkpoint(dir.join(format!("kd_{name}.ckpt")), &ck)?;
            run.say(format!(
                "seed {seed}: {name} student best val F1 {:.4} (epoch {})",
                result.best_val_f1, result.best_epoch
            ));
        }
    }
    Ok(())
}

/// Checkpoint file stems `eval` looks for, with the variant they report as.
const EVAL_CHECKPOINTS: [(&str, &str); 5] = [
    ("m1", "discom"),
    ("m2", "discom"),
    ("teacher", "teacher"),
    ("kd_m1", "kd"),
    ("kd_m2", "kd"),
];

pub fn eval(common: &Common) -> Outcome {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| ExperimentConfig::default().output_dir);
    let run = resolve(common, Some(&out.join(CONFIG_FILE)))?;
    let splits = prepare_splits(&run.cfg)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for &seed in &run.cfg.seeds {
        let dir = run.out.join(format!("seed_{seed}"));
        for (stem, variant) in EVAL_CHECKPOINTS {
            let path = dir.join(format!("{stem}.ckpt"));
            if !path.is_file() {
                continue;
            }
            let model = load_checkpoint(&path)?.into_model()?;
            let modality = model
                .arch
                .modality()
                .map_or("fusion", |m| ModalityName::from_index(m).as_str());
            let tag = RecordTag {
                run_id: format!("{variant}-{modality}-s{seed}"),
                seed,
                variant: variant.into(),
                modality: modality.into(),
                split: "test".into(),
            };
            let rec = evaluate(&model, &splits.test, tag)?;
            run.say(format!(
                "seed {seed} {variant} {modality}: test F1 {:.4}, accuracy {:.4}",
                rec.weighted_f1, rec.accuracy
            ));
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Failure::Core(Error::Data(format!(
            "no checkpoints under {} for seeds {:?}",
            run.out.display(),
            run.cfg.seeds
        ))));
    }
    write_metrics_csv(run.out.join("metrics.csv"), &records)?;
    write_confusions(run.out.join("confusion.json"), &records)?;
    Ok(())
}

pub fn ablate(common: &Common, plan: Plan) -> Outcome {
    let run = resolve(common, None)?;
    persist(&run, "ablate")?;
    let splits = prepare_splits(&run.cfg)?;
    let plan = match plan {
        Plan::Components => AblationPlan::Components,
        Plan::Representations => AblationPlan::Representations,
    };
    let table = run_ablation(&run.cfg, &splits, &plan)?;
    write_ablation_table(run.out.join("ablation_table.csv"), &table)?;
    write_metrics_csv(run.out.join("metrics.csv"), &table.records)?;
    write_confusions(run.out.join("confusion.json"), &table.records)?;
    let configs: Vec<_> = table
        .configs
        .iter()
        .map(|(v, c)| json!({ "variant": v.name(), "config": c }))
        .collect();
    write_text(
        &run.out.join("variant_configs.json"),
        &serde_json::to_string_pretty(&configs).map_err(Error::from)?,
    )?;
    for row in &table.rows {
        run.say(format!(
            "{:<10} m1 {:.4} ± {:.4}  m2 {:.4} ± {:.4}  avg {:.4}{}",
            row.variant.name(),
            row.f1[0].mean,
            row.f1[0].std,
            row.f1[1].mean,
            row.f1[1].std,
            row.average,
            if row.incomplete { "  (incomplete)" } else { "" }
        ));
    }
    Ok(())
}
