use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use projtune::baselines::{train_method, Adapted, MethodOptions, MethodTag};
use projtune::data::{
    file_digest, read_fbank, read_proj, read_tcls, sample_few_shot, split_base_new, synth_generate, write_fbank,
    write_manifest, write_proj, write_tcls, Manifest, SynthConfig,
};
use projtune::eval::{accuracy, harmonic_mean, total_hm_t1, total_hm_t2, EvalReport, CSV_HEADER};
use projtune::gradcheck::{self, Dims};
use projtune::trainer::{config_hash, grid_sweep, mat_hash, DEFAULT_LAMBDA_GRID, DEFAULT_LR_GRID};
use projtune::ttadapt::tt_adapt_stream;
use projtune::{FeatureBank, LambdaSchedule, Mat, ProjectionHead, TTConfig, TextClassifier, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, require, write_json, write_text};
use crate::{EvalArgs, GradcheckArgs, OptimArgs, SweepArgs, SynthArgs, TrainArgs, TtadaptArgs, ZeroshotArgs};

/// Everything that determines a run's numeric outputs.
#[derive(Serialize)]
struct RunSpec<'a> {
    command: &'a str,
    inputs: BTreeMap<&'a str, String>,
    config: Value,
}

fn run_hash(command: &str, inputs: &[(&'static str, &Path)], config: Value) -> CliResult<String> {
    let mut digests = BTreeMap::new();
    for (name, path) in inputs {
        digests.insert(*name, file_digest(&require(path)?)?);
    }
    Ok(config_hash(&RunSpec {
        command,
        inputs: digests,
        config,
    }))
}

fn load_bank(path: &Path) -> CliResult<FeatureBank> {
    Ok(read_fbank(&require(path)?)?)
}

fn load_classes(path: &Path) -> CliResult<TextClassifier> {
    Ok(read_tcls(&require(path)?)?)
}

fn load_proj(path: &Path) -> CliResult<(ProjectionHead, MethodTag)> {
    Ok(read_proj(&require(path)?)?)
}

fn load_anchor(path: &Path) -> CliResult<ProjectionHead> {
    let (head, tag) = load_proj(path)?;
    if tag != MethodTag::Prolip {
        return Err(CliError::Usage(format!(
            "{} holds a {tag} model, expected a visual projection",
            path.display()
        )));
    }
    Ok(head)
}

/// One pre-projection text feature per row.
fn load_text_pre(path: &Path) -> CliResult<Mat> {
    let bank = load_bank(path)?;
    if bank.views() != 1 {
        return Err(CliError::Usage("text feature bank must have a single view".into()));
    }
    Ok(Mat::new(bank.len(), bank.dim(), bank.as_slice().to_vec())?)
}

fn optim_config(o: &OptimArgs, lambda: LambdaSchedule) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        lr: o.lr,
        epochs: o.epochs,
        optimizer: o.optimizer.parse()?,
        schedule: o.lr_schedule.parse()?,
        seed: o.seed,
        lambda,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn class_counts(bank: &FeatureBank) -> CliResult<Vec<usize>> {
    let labels = bank.require_labels()?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; k];
    for &y in labels {
        counts[y] += 1;
    }
    Ok(counts.into_iter().filter(|&c| c > 0).collect())
}

fn accuracy_of(model: &Adapted, cls: &TextClassifier, bank: &FeatureBank) -> CliResult<f64> {
    Ok(accuracy(&model.predict(cls, bank)?, bank.require_labels()?)?)
}

pub fn synth(a: SynthArgs) -> CliResult<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        classes: a.classes,
        input_dim: a.input_dim,
        embed_dim: a.embed_dim,
        shots: a.shots,
        views: a.views,
        test_per_class: a.test_per_class,
        sigma_x: a.sigma_x.unwrap_or(d.sigma_x),
        sigma_t: a.sigma_t.unwrap_or(d.sigma_t),
        sigma_w: a.sigma_w.unwrap_or(d.sigma_w),
        signal_noise: a.signal_noise.unwrap_or(d.signal_noise),
        feature_scale: a.feature_scale.unwrap_or(d.feature_scale),
        seed: a.seed,
        zero_shot_window: if a.no_window { None } else { d.zero_shot_window },
    };
    cfg.validate()?;
    let hash = config_hash(&json!({ "command": "synth", "config": cfg, "text_features": a.text_features }));
    let data = synth_generate(&cfg)?;
    ensure_dir(&a.out)?;

    let manifest = |split: &str| Manifest {
        dataset: "synthetic".into(),
        split: split.into(),
        source_checkpoint: "synthetic".into(),
        template: String::new(),
        seed: Some(cfg.seed),
        config_hash: Some(hash.clone()),
    };
    for (name, bank) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let path = a.out.join(format!("{name}.fbank"));
        write_fbank(bank, &path)?;
        write_manifest(&path, &manifest(name))?;
    }
    write_tcls(&data.cls, &a.out.join("classes.tcls"))?;
    write_proj(&data.head0, MethodTag::Prolip, &a.out.join("anchor.proj"))?;
    if a.text_features {
        let k = data.text_pre.rows();
        let text_bank = FeatureBank::new(
            k,
            1,
            data.text_pre.cols(),
            data.text_pre.as_slice().to_vec(),
            Some((0..k).collect()),
            "text",
        )?;
        let path = a.out.join("text_pre.fbank");
        write_fbank(&text_bank, &path)?;
        write_manifest(&path, &manifest("text"))?;
        write_proj(&data.text_head0, MethodTag::Textproj, &a.out.join("text_anchor.proj"))?;
    }
    println!(
        "synth: zero-shot test accuracy {:.4} after {} draw(s); config_hash {hash} seed {}",
        data.zero_shot_accuracy, data.draws, cfg.seed
    );
    Ok(())
}

fn write_reports(out: &Path, reports: &[EvalReport], extra: Value) -> CliResult<()> {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_text(&out.join("report.csv"), &csv)?;
    let mut body = json!({ "reports": reports });
    if let (Value::Object(b), Value::Object(e)) = (&mut body, extra) {
        b.extend(e);
    }
    write_json(&out.join("report.json"), &body)
}

pub fn zeroshot(a: ZeroshotArgs) -> CliResult<()> {
    let hash = run_hash(
        "zeroshot",
        &[("proj", &a.proj), ("classes", &a.classes), ("bank", &a.bank)],
        json!({ "dataset": a.dataset }),
    )?;
    let head = load_anchor(&a.proj)?;
    let cls = load_classes(&a.classes)?;
    let bank = load_bank(&a.bank)?;
    let preds = projtune::baselines::zero_shot_predict(&head, &cls, &bank)?;
    let mut report = EvalReport::from_predictions(&preds, bank.require_labels()?, cls.num_classes())?;
    report.method = "zeroshot".into();
    report.dataset = a.dataset;
    report.split_tag = bank.split_tag().into();
    report.config_hash = hash.clone();
    ensure_dir(&a.out)?;
    write_reports(&a.out, std::slice::from_ref(&report), json!({ "config_hash": hash, "seed": 0 }))?;
    println!(
        "zeroshot: accuracy {:.4} on {} samples; config_hash {hash} seed 0",
        report.accuracy, report.n_test
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let method: MethodTag = a.method.parse()?;
    let mut inputs: Vec<(&'static str, &Path)> =
        vec![("train", &a.train), ("classes", &a.classes), ("proj", &a.proj)];
    if let Some(p) = &a.text_pre {
        inputs.push(("text_pre", p));
    }
    if let Some(p) = &a.text_proj {
        inputs.push(("text_proj", p));
    }
    if let Some(p) = &a.test {
        inputs.push(("test", p));
    }
    let head0 = load_anchor(&a.proj)?;
    let mut cls = load_classes(&a.classes)?;
    let mut bank = load_bank(&a.train)?;
    let mut text_pre = a.text_pre.as_deref().map(load_text_pre).transpose()?;
    if a.base_only {
        let (base, _) = split_base_new(&cls, &bank)?;
        if let Some(t) = &text_pre {
            let rows: Vec<Vec<f64>> = base.class_ids.iter().map(|&k| t.row(k).to_vec()).collect();
            text_pre = Some(Mat::from_rows(&rows)?);
        }
        cls = base.cls;
        bank = base.bank;
    }
    let counts = class_counts(&bank)?;
    let shots = match a.shots {
        Some(s) => {
            if counts.iter().any(|&c| c != s) {
                bank = sample_few_shot(&bank, s, a.optim.seed)?;
            }
            s
        }
        None => counts.iter().copied().min().unwrap_or(0),
    };
    let lambda = LambdaSchedule::parse(&a.lambda, Some(shots))?;
    let cfg = optim_config(&a.optim, lambda)?;
    let hash = run_hash(
        "train",
        &inputs,
        json!({
            "method": method,
            "train": cfg,
            "shots": shots,
            "alpha": a.alpha,
            "probe_zero_init": a.probe_zero_init,
            "base_only": a.base_only,
        }),
    )?;
    let opts = MethodOptions {
        taskres_alpha: a.alpha,
        probe_init_from_text: !a.probe_zero_init,
        text_pre,
        text_head0: match &a.text_proj {
            Some(p) => Some(load_proj(p)?.0),
            None => None,
        },
    };
    let (model, history) = train_method(method, &head0, &cls, &bank, &cfg, &opts)?;

    ensure_dir(&a.out)?;
    let stored = model.to_container()?;
    write_proj(&stored, method, &a.out.join("trained.proj"))?;
    write_text(&a.out.join("history.jsonl"), &history.to_jsonl())?;

    let mut summary = json!({
        "method": method,
        "config_hash": hash,
        "seed": cfg.seed,
        "shots": shots,
        "lambda": cfg.lambda.resolve()?,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "optimizer": cfg.optimizer,
        "lr_schedule": cfg.schedule,
        "final": history.last(),
        "param_hash": mat_hash(stored.w()),
        "train_accuracy": accuracy_of(&model, &cls, &bank)?,
    });
    if let Some(test_path) = &a.test {
        let mut test = load_bank(test_path)?;
        if a.base_only {
            test = split_base_new(&load_classes(&a.classes)?, &test)?.0.bank;
        }
        let acc = accuracy_of(&model, &cls, &test)?;
        let zs = accuracy_of(&Adapted::Prolip(head0.clone()), &cls, &test)?;
        summary["test_accuracy"] = json!(acc);
        summary["zero_shot_test_accuracy"] = json!(zs);
    }
    write_json(&a.out.join("summary.json"), &summary)?;
    let last = history.last().expect("at least one epoch");
    print!(
        "train: {method} lambda {} lr {:e} epochs {}; final loss {:.6}",
        last.lambda, cfg.lr, cfg.epochs, last.total
    );
    if let Some(acc) = summary.get("test_accuracy") {
        print!("; test accuracy {:.4}", acc.as_f64().unwrap_or(f64::NAN));
    }
    println!("; config_hash {hash} seed {}", cfg.seed);
    Ok(())
}

fn load_model(proj: &Path, base: Option<&PathBuf>, text_pre: Option<&PathBuf>) -> CliResult<Adapted> {
    let (stored, method) = load_proj(proj)?;
    let base = base.map(|p| load_anchor(p)).transpose()?;
    let text_pre = text_pre.map(|p| load_text_pre(p)).transpose()?;
    Ok(Adapted::from_container(method, stored, base, text_pre)?)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let mut inputs: Vec<(&'static str, &Path)> = vec![("proj", &a.proj), ("classes", &a.classes), ("bank", &a.bank)];
    if let Some(p) = &a.base_proj {
        inputs.push(("base_proj", p));
    }
    if let Some(p) = &a.text_pre {
        inputs.push(("text_pre", p));
    }
    let hash = run_hash(
        "eval",
        &inputs,
        json!({ "base_new": a.base_new, "dataset": a.dataset, "seed": a.seed }),
    )?;
    let model = load_model(&a.proj, a.base_proj.as_ref(), a.text_pre.as_ref())?;
    let cls = load_classes(&a.classes)?;
    let bank = load_bank(&a.bank)?;

    let labelled = |preds: &[usize], labels: &[usize], k: usize, split: &str| -> CliResult<EvalReport> {
        let mut r = EvalReport::from_predictions(preds, labels, k)?;
        r.method = model.method().to_string();
        r.dataset = a.dataset.clone();
        r.split_tag = split.into();
        r.shots = a.shots;
        r.seed = a.seed;
        r.lr = a.lr;
        r.lambda = a.lambda;
        r.config_hash = hash.clone();
        Ok(r)
    };

    ensure_dir(&a.out)?;
    if a.base_new {
        let (base, new) = split_base_new(&cls, &bank)?;
        let mut reports = Vec::new();
        for (side, name) in [(&base, "base"), (&new, "new")] {
            let preds = model.for_classes(&side.class_ids)?.predict(&side.cls, &side.bank)?;
            reports.push(labelled(&preds, side.bank.require_labels()?, side.cls.num_classes(), name)?);
        }
        let (acc_base, acc_new) = (reports[0].accuracy, reports[1].accuracy);
        let pair = [(acc_base, acc_new)];
        let (h, h_t1, h_t2) = if acc_base == 0.0 && acc_new == 0.0 {
            (0.0, 0.0, 0.0)
        } else {
            (harmonic_mean(acc_base, acc_new)?, total_hm_t1(&pair)?, total_hm_t2(&pair)?)
        };
        write_reports(
            &a.out,
            &reports,
            json!({
                "config_hash": hash,
                "seed": a.seed,
                "acc_base": acc_base,
                "acc_new": acc_new,
                "H": h,
                "H_t1": h_t1,
                "H_t2": h_t2,
                "base_class_ids": base.class_ids,
                "new_class_ids": new.class_ids,
            }),
        )?;
        println!(
            "eval: base {:.4} new {:.4} H {:.4}; config_hash {hash} seed {}",
            acc_base, acc_new, h, a.seed
        );
    } else {
        let preds = model.predict(&cls, &bank)?;
        let report = labelled(&preds, bank.require_labels()?, cls.num_classes(), bank.split_tag())?;
        write_reports(
            &a.out,
            std::slice::from_ref(&report),
            json!({ "config_hash": hash, "seed": a.seed }),
        )?;
        println!(
            "eval: accuracy {:.4} on {} samples; config_hash {hash} seed {}",
            report.accuracy, report.n_test, a.seed
        );
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> CliResult<()> {
    let lr_grid = a.lr_grid.clone().unwrap_or_else(|| DEFAULT_LR_GRID.to_vec());
    let lambda_grid = a.lambda_grid.clone().unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    let base = TrainConfig {
        lr: lr_grid.first().copied().unwrap_or(0.0),
        epochs: a.epochs,
        optimizer: a.optimizer.parse()?,
        schedule: a.lr_schedule.parse()?,
        seed: a.seed,
        lambda: LambdaSchedule::Zero,
    };
    if lr_grid.is_empty() || lambda_grid.is_empty() {
        return Err(CliError::Usage("sweep grids must be non-empty".into()));
    }
    base.validate()?;
    let hash = run_hash(
        "sweep",
        &[("train", &a.train), ("val", &a.val), ("classes", &a.classes), ("proj", &a.proj)],
        json!({ "lr_grid": lr_grid, "lambda_grid": lambda_grid, "base": base }),
    )?;
    let head = load_anchor(&a.proj)?;
    let cls = load_classes(&a.classes)?;
    let train = load_bank(&a.train)?;
    let val = load_bank(&a.val)?;
    let result = grid_sweep(&head, &cls, &train, &val, &lr_grid, &lambda_grid, &base)?;

    ensure_dir(&a.out)?;
    let mut csv = String::from("lr,lambda,val_accuracy,diverged\n");
    for c in &result.cells {
        csv.push_str(&format!("{:e},{:e},{},{}\n", c.lr, c.lambda, c.val_accuracy, c.diverged));
    }
    write_text(&a.out.join("sweep.csv"), &csv)?;
    let best = &result.cells[result.best_cell];
    write_json(
        &a.out.join("best.json"),
        &json!({
            "config_hash": hash,
            "seed": a.seed,
            "best_cell": result.best_cell,
            "lr": best.lr,
            "lambda": best.lambda,
            "val_accuracy": best.val_accuracy,
            "diverged_cells": result.cells.iter().filter(|c| c.diverged).count(),
            "config": result.best,
        }),
    )?;
    println!(
        "sweep: {} cells, best {best}; config_hash {hash} seed {}",
        result.cells.len(),
        a.seed
    );
    Ok(())
}

pub fn ttadapt(a: TtadaptArgs) -> CliResult<()> {
    let cfg = TTConfig {
        rho: a.rho,
        steps: a.steps,
        lr: a.lr,
        reset_per_sample: !a.carry,
    };
    cfg.validate()?;
    let mut inputs: Vec<(&'static str, &Path)> = vec![("proj", &a.proj), ("classes", &a.classes), ("stream", &a.stream)];
    if let Some(p) = &a.from_trained {
        inputs.push(("from_trained", p));
    }
    let hash = run_hash("ttadapt", &inputs, json!({ "tt": cfg, "seed": a.seed }))?;
    let anchor = load_anchor(&a.proj)?;
    let head = match &a.from_trained {
        Some(p) => {
            let trained = load_anchor(p)?;
            if trained.w0() != anchor.w0() {
                return Err(CliError::Usage(format!(
                    "{} was not trained from {}",
                    p.display(),
                    a.proj.display()
                )));
            }
            trained
        }
        None => anchor,
    };
    let cls = load_classes(&a.classes)?;
    let stream = load_bank(&a.stream)?;
    let out = tt_adapt_stream(&head, &cls, &stream, &cfg)?;

    ensure_dir(&a.out)?;
    write_text(&a.out.join("predictions.jsonl"), &out.to_jsonl())?;
    write_json(&a.out.join("timing.json"), &out.timing)?;
    let acc = match stream.labels() {
        Some(labels) if out.errors.is_empty() => Some(accuracy(&out.predictions(), labels)?),
        _ => None,
    };
    write_json(
        &a.out.join("summary.json"),
        &json!({
            "config_hash": hash,
            "seed": a.seed,
            "samples": stream.len(),
            "accuracy": acc,
            "fell_back": out.records.iter().filter(|r| r.fell_back).count(),
            "errors": out.errors,
            "tt": cfg,
        }),
    )?;
    print!("ttadapt: {} samples", stream.len());
    if let Some(acc) = acc {
        print!(", accuracy {acc:.4}");
    }
    println!("; config_hash {hash} seed {}", a.seed);
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if a.instances == 0 {
        return Err(CliError::Usage("need at least one instance".into()));
    }
    let dims = Dims {
        max_input: a.max_input,
        max_embed: a.max_embed,
        max_classes: a.max_classes,
        max_samples: a.max_samples,
        max_views: a.max_views,
    };
    if dims.max_embed > dims.max_input {
        return Err(CliError::Usage("max-embed cannot exceed max-input".into()));
    }
    let report = gradcheck::run(a.instances, a.seed, &dims, a.inject_sign_flip)?;
    for i in &report.instances {
        println!(
            "instance {:>3}: D_o={:<2} D={:<2} K={:<2} N={:<2} V={} lambda={:<4} max_rel_err={:.3e} {}",
            i.index,
            i.input_dim,
            i.embed_dim,
            i.classes,
            i.samples,
            i.views,
            i.lambda,
            i.max_rel_err,
            if i.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    println!(
        "gradcheck: worst {:.3e} tolerance {:.0e}; seed {}",
        report.worst, report.tolerance, a.seed
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.worst
        )))
    }
}
