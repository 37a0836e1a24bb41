//! `geca classify`: downstream multi-label classification, baseline vs
//! synthetic-augmented training sets.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use geca_core::expansion::classifier::{
    evaluate_classifier, train_classifier, ClassifierTrainConfig,
};
use geca_core::expansion::metrics::EvalReport;
use geca_core::expansion::LabeledDataset;
use geca_core::{GecaError, Result};

use crate::config::RunConfig;

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn fmt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.6}", x),
        None => "nan".into(),
    }
}

fn csv_row(name: &str, r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        name,
        fmt(r.macro_sensitivity),
        fmt(r.macro_specificity),
        fmt(r.macro_auc),
        fmt(r.macro_f1),
        fmt(r.macro_f1_sen_spe),
        fmt(r.macro_map),
    )
}

pub fn run(args: &ClassifyArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    let load = |key: &str| -> Result<LabeledDataset> {
        let path = cfg.require_path(key)?;
        if !path.exists() {
            return Err(GecaError::Input(format!(
                "{} manifest not found: {}",
                key,
                path.display()
            )));
        }
        LabeledDataset::load(&path)
    };
    let train = load("train_manifest")?;
    let val = load("val_manifest")?;
    let test = load("test_manifest")?;

    let clf = ClassifierTrainConfig {
        steps: cfg.get_parsed("clf_steps", 800)?,
        batch_size: cfg.get_parsed("clf_batch", 16)?,
        learning_rate: cfg.get_parsed("clf_lr", 1e-3)?,
        seed: cfg.get_parsed("seed", 0u64)?,
        eval_every: cfg.get_parsed("clf_eval_every", 100)?,
        threshold: cfg.get_parsed("clf_threshold", 0.5)?,
    };

    let mut csv = String::from("run,sen,spe,auc,f1,f1_sen_spe,map\n");

    let baseline_params = train_classifier(&train, &val, &clf)?;
    let baseline = evaluate_classifier(&baseline_params, &test, clf.threshold)?;
    for w in &baseline.warnings {
        eprintln!("baseline: {w}");
    }
    csv.push_str(&csv_row("baseline", &baseline));

    if let Some(aug_path) = cfg.get_path("augmented_manifest") {
        if !aug_path.exists() {
            return Err(GecaError::Input(format!(
                "augmented manifest not found: {}",
                aug_path.display()
            )));
        }
        let synthetic = LabeledDataset::load(&aug_path)?;
        let combined = train.concat(&synthetic)?;
        let aug_params = train_classifier(&combined, &val, &clf)?;
        let augmented = evaluate_classifier(&aug_params, &test, clf.threshold)?;
        for w in &augmented.warnings {
            eprintln!("augmented: {w}");
        }
        csv.push_str(&csv_row("augmented", &augmented));
    }

    let out = cfg
        .get_path("metrics_out")
        .unwrap_or_else(|| PathBuf::from("metrics.csv"));
    fs::write(&out, &csv)?;
    print!("{csv}");
    println!("# wrote {}", out.display());
    Ok(())
}
