//! The `densecam` command line: `synth`, `split`, `train`, `eval` and `cam`
//! composed through files in one output directory.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 1 for
//! runtime failures.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

pub use config::{parse_config_text, RunConfig, Threshold, KEYS};

use crate::cam::{class_cams, pointing_game, render_overlay};
use crate::data::{
    generate_synthetic, parse_label_csv, pathology_index, patient_split, read_regions, Dataset,
    LabelTable, Split, SplitAssignment, PATHOLOGIES,
};
use crate::error::{Error, Result};
use crate::eval::{
    agreement_report, auroc_csv, binarize, bootstrap_ci, f1, format_fixed, load_rater_csv,
    optimal_threshold, Predictions,
};
use crate::model::{build_model, load_checkpoint, save_checkpoint, DenseModel};
use crate::train::{fit_normalization, predict_dataset, train_loop_with};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("densecam")
        .about("Train dense networks on chest X-ray style data, localize findings, and score agreement")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args_override_self(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .global(true)
                .help("`key = value` settings file"),
        );
    for (key, help) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .global(true)
                .action(ArgAction::Set)
                .help(*help),
        );
    }
    cmd.subcommand(Command::new("synth").about("Generate a synthetic dataset with known regions"))
        .subcommand(
            Command::new("split").about("Assign patients to train, validation and test splits"),
        )
        .subcommand(
            Command::new("train").about("Train a model and keep the best validation checkpoint"),
        )
        .subcommand(
            Command::new("eval").about("Score a checkpoint, a prediction file, or rater labels"),
        )
        .subcommand(
            Command::new("cam").about("Render class activation maps and score localization"),
        )
}

/// Flag overrides in registry order.
fn overrides(matches: &ArgMatches) -> Vec<(String, String)> {
    KEYS.iter()
        .filter(|(k, _)| matches.value_source(k) == Some(ValueSource::CommandLine))
        .filter_map(|(k, _)| {
            matches
                .get_one::<String>(k)
                .map(|v| (k.to_string(), v.clone()))
        })
        .collect()
}

/// Resolves the settings of a parsed subcommand: defaults, then the
/// `--config` file, then flags.
pub fn resolve_matches(sub: &ArgMatches) -> Result<RunConfig> {
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    RunConfig::resolve(file.as_deref(), &overrides(sub))
}

/// Parses `args` (including the program name), runs the command, and
/// returns the exit code. Progress goes to `out`, errors to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve_matches(sub).and_then(|cfg| match name {
        "synth" => cmd_synth(&cfg, out),
        "split" => cmd_split(&cfg, out),
        "train" => cmd_train(&cfg, out),
        "eval" => cmd_eval(&cfg, out),
        "cam" => cmd_cam(&cfg, out),
        _ => unreachable!("unknown subcommand {name}"),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Best-effort console output; a closed stdout is not an error.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.synth.validate()?;
    let data = generate_synthetic(&cfg.synth)?;
    let dir = cfg.data_dir();
    data.write(&dir)?;
    let patients: std::collections::BTreeSet<_> =
        data.table.records().iter().map(|r| &r.patient_id).collect();
    say!(
        out,
        "wrote {} images from {} patients to {}",
        data.table.len(),
        patients.len(),
        dir.display()
    );
    for class in &cfg.synth.classes {
        let n = data.table.records().iter().filter(|r| r.has(class)).count();
        say!(out, "  {class}: {n} positive");
    }
    Ok(())
}

fn load_labels(cfg: &RunConfig) -> Result<LabelTable> {
    parse_label_csv(cfg.data_dir().join("labels.csv"))
}

pub fn cmd_split(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let table = load_labels(cfg)?;
    let assignment = patient_split(&table, cfg.split_fractions, cfg.seed)?;
    create_dir(&cfg.out)?;
    assignment.save(cfg.split_path())?;
    let images = assignment.image_counts(&table);
    for (i, split) in Split::ALL.iter().enumerate() {
        say!(
            out,
            "{}: {} patients, {} images",
            split,
            assignment.patients(*split).len(),
            images[i]
        );
    }
    Ok(())
}

fn load_splits(cfg: &RunConfig) -> Result<SplitAssignment> {
    let path = cfg.split_path();
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no split assignment at {}; run `densecam split` first",
            path.display()
        )));
    }
    SplitAssignment::load(path)
}

fn load_split(
    cfg: &RunConfig,
    table: &LabelTable,
    splits: &SplitAssignment,
    split: Split,
) -> Result<Dataset> {
    Dataset::load_dir(
        cfg.data_dir(),
        &splits.select(table, split),
        &cfg.classes,
        cfg.model.input_channels,
        cfg.model.image_size,
    )
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let table = load_labels(cfg)?;
    let splits = load_splits(cfg)?;
    let train = load_split(cfg, &table, &splits, Split::Train)?;
    let val = load_split(cfg, &table, &splits, Split::Validation)?;
    let mut model = build_model(&cfg.model, cfg.seed)?;
    fit_normalization(&mut model, &train)?;
    create_dir(&cfg.out)?;
    let ckpt = cfg.checkpoint_path();
    say!(
        out,
        "training on {} images, validating on {}",
        train.len(),
        val.len()
    );
    let outcome = train_loop_with(
        model.clone(),
        &train,
        &val,
        &cfg.train,
        cfg.task,
        |r, improved| {
            say!(
                out,
                "epoch {}: train loss {:.6}, val loss {:.6}, lr {:e}{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                if improved.is_some() { ", saved" } else { "" }
            );
            match improved {
                Some(m) => save_checkpoint(m, &ckpt),
                None => Ok(()),
            }
        },
    )?;
    let history = outcome.history;
    write_file(&cfg.out.join("history.csv"), history.to_csv())?;
    let best = history.best().map_or(0, |r| r.epoch);
    write_file(&cfg.out.join("best_epoch.txt"), format!("{best}\n"))?;
    if best == 0 {
        save_checkpoint(&outcome.model, &ckpt)?;
    }
    say!(out, "best epoch {best}, checkpoint {}", ckpt.display());
    Ok(())
}

fn predictions_for(model: &DenseModel, data: &Dataset, batch: usize) -> Result<Predictions> {
    let probs = predict_dataset(model, data, batch)?;
    let k = data.num_classes();
    Ok(Predictions {
        image_ids: data.ids.clone(),
        class_names: model.config().class_names.clone(),
        probabilities: probs.values().chunks(k).map(<[f64]>::to_vec).collect(),
    })
}

fn truth_columns(table: &LabelTable, ids: &[String], classes: &[String]) -> Result<Vec<Vec<bool>>> {
    let rows = ids
        .iter()
        .map(|id| {
            table
                .get(id)
                .ok_or_else(|| Error::Config(format!("image {id:?} is not in labels.csv")))
        })
        .collect::<Result<Vec<_>>>()?;
    classes
        .iter()
        .map(|c| {
            let name = pathology_index(c)
                .map(|i| PATHOLOGIES[i])
                .ok_or_else(|| Error::Config(format!("unknown class {c:?}")))?;
            Ok(rows.iter().map(|r| r.has(name)).collect())
        })
        .collect()
}

/// `class,threshold,f1,ci_low,ci_high` for each class.
fn f1_report(
    cfg: &RunConfig,
    preds: &Predictions,
    truth: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<String> {
    let mut s = String::from("class,threshold,f1,ci_low,ci_high\n");
    for (c, class) in preds.class_names.iter().enumerate() {
        let pred = binarize(&preds.column(c), thresholds[c]);
        let y = &truth[c];
        let stat = |rows: &[usize]| {
            let p: Vec<bool> = rows.iter().map(|&i| pred[i]).collect();
            let t: Vec<bool> = rows.iter().map(|&i| y[i]).collect();
            Ok(f1(&p, &t)?.value)
        };
        let r = bootstrap_ci(stat, pred.len(), cfg.bootstrap_samples, cfg.seed)?;
        s.push_str(&format!(
            "{class},{},{},{},{}\n",
            format_fixed(thresholds[c], 4),
            format_fixed(r.estimate, 3),
            format_fixed(r.ci_low, 3),
            format_fixed(r.ci_high, 3)
        ));
    }
    Ok(s)
}

fn write_scores(
    cfg: &RunConfig,
    out: &mut dyn Write,
    preds: &Predictions,
    truth: &[Vec<bool>],
    thresholds: &[f64],
) -> Result<()> {
    let scores: Vec<Vec<f64>> = (0..preds.class_names.len())
        .map(|c| preds.column(c))
        .collect();
    let auroc = auroc_csv(&preds.class_names, &scores, truth)?;
    let report = f1_report(cfg, preds, truth, thresholds)?;
    write_file(&cfg.out.join("auroc.csv"), &auroc)?;
    write_file(&cfg.out.join("report.csv"), &report)?;
    say!(out, "{auroc}\n{report}");
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    create_dir(&cfg.out)?;
    if let Some(raters) = &cfg.raters {
        return eval_raters(cfg, raters, out);
    }
    let table = load_labels(cfg)?;
    if let Some(path) = &cfg.predictions {
        let preds = Predictions::load(path)?;
        let truth = truth_columns(&table, &preds.image_ids, &preds.class_names)?;
        let t = match cfg.threshold {
            Threshold::Fixed(t) => t,
            Threshold::Optimal => {
                return Err(Error::Config(
                    "threshold = optimal needs a checkpoint to score the validation split".into(),
                ))
            }
        };
        return write_scores(cfg, out, &preds, &truth, &vec![t; preds.class_names.len()]);
    }
    let model = load_checkpoint(cfg.checkpoint_path())?;
    let splits = load_splits(cfg)?;
    let test = load_split(cfg, &table, &splits, Split::Test)?;
    let preds = predictions_for(&model, &test, cfg.eval_batch_size)?;
    write_file(&cfg.out.join("predictions.csv"), preds.to_csv())?;
    let truth = truth_columns(&table, &preds.image_ids, &preds.class_names)?;
    let thresholds = class_thresholds(cfg, &model, &table, &splits)?;
    write_scores(cfg, out, &preds, &truth, &thresholds)
}

/// Per-class binarization thresholds: the fixed value, or the one that
/// maximizes F1 on the validation split.
fn class_thresholds(
    cfg: &RunConfig,
    model: &DenseModel,
    table: &LabelTable,
    splits: &SplitAssignment,
) -> Result<Vec<f64>> {
    match cfg.threshold {
        Threshold::Fixed(t) => Ok(vec![t; model.config().num_classes]),
        Threshold::Optimal => {
            let val = load_split(cfg, table, splits, Split::Validation)?;
            let vp = predictions_for(model, &val, cfg.eval_batch_size)?;
            let vt = truth_columns(table, &vp.image_ids, &vp.class_names)?;
            (0..vp.class_names.len())
                .map(|c| optimal_threshold(&vp.column(c), &vt[c]).map(|(t, _)| t))
                .collect()
        }
    }
}

fn eval_raters(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut m = load_rater_csv(path)?;
    if let Some(pred_path) = &cfg.predictions {
        let preds = Predictions::load(pred_path)?;
        let class = cfg.eval_class.as_deref().unwrap_or(&preds.class_names[0]);
        let c = preds
            .class_names
            .iter()
            .position(|n| n == class)
            .ok_or_else(|| Error::Config(format!("no prediction column {class:?}")))?;
        let Threshold::Fixed(t) = cfg.threshold else {
            return Err(Error::Config(
                "threshold = optimal is not available for rater files".into(),
            ));
        };
        let column = m
            .image_ids
            .iter()
            .map(|id| {
                let row = preds
                    .image_ids
                    .iter()
                    .position(|p| p == id)
                    .ok_or_else(|| {
                        Error::Config(format!("no prediction for rated image {id:?}"))
                    })?;
                Ok(preds.probabilities[row][c] >= t)
            })
            .collect::<Result<Vec<bool>>>()?;
        if m.rater_index(&cfg.model_rater).is_some() {
            return Err(Error::Config(format!(
                "rater file already has a {:?} column",
                cfg.model_rater
            )));
        }
        m.rater_names.push(cfg.model_rater.clone());
        m.labels.push(column);
    }
    if m.rater_index(&cfg.model_rater).is_some() {
        m = m.with_model(&cfg.model_rater)?;
    }
    let report = agreement_report(&m, cfg.bootstrap_samples, cfg.seed)?;
    let text = report.to_csv();
    write_file(&cfg.out.join("report.csv"), &text)?;
    say!(out, "{text}");
    Ok(())
}

fn image_stem(id: &str) -> String {
    Path::new(id)
        .file_stem()
        .map_or_else(|| id.to_string(), |s| s.to_string_lossy().into_owned())
}

/// Validates a class name against the pathology list and the model.
fn cam_class(cfg: &RunConfig, model: &DenseModel) -> Result<String> {
    let requested = cfg
        .cam_class
        .clone()
        .unwrap_or_else(|| model.config().class_names[0].clone());
    let class = pathology_index(&requested)
        .map(|i| PATHOLOGIES[i])
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown class {requested:?}; valid classes are {}",
                PATHOLOGIES.join(", ")
            ))
        })?;
    if model.class_index(class).is_none() {
        return Err(Error::Usage(format!(
            "class {class:?} is not an output of this model; outputs are {}",
            model.config().class_names.join(", ")
        )));
    }
    Ok(class.to_string())
}

pub fn cmd_cam(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(cfg.checkpoint_path())?;
    let class = cam_class(cfg, &model)?;
    let table = load_labels(cfg)?;
    let size = model.config().image_size;
    let channels = model.config().input_channels;
    let classes = model.config().class_names.clone();
    let data = if cfg.cam_images.is_empty() {
        let splits = load_splits(cfg)?;
        let test = load_split(cfg, &table, &splits, Split::Test)?;
        let c = model.class_index(&class).expect("validated");
        let probs = predict_dataset(&model, &test, cfg.eval_batch_size)?;
        let k = classes.len();
        let t = class_thresholds(cfg, &model, &table, &splits)?[c];
        let keep: std::collections::HashSet<&str> = test
            .ids
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                test.targets.values()[i * k + c] > 0.5 && probs.values()[i * k + c] >= t
            })
            .map(|(_, id)| id.as_str())
            .collect();
        let selected = table.filter(|r| keep.contains(r.image_id.as_str()));
        Dataset::load_dir(cfg.data_dir(), &selected, &classes, channels, size)?
    } else {
        let wanted: std::collections::HashSet<&str> =
            cfg.cam_images.iter().map(String::as_str).collect();
        let selected = table.filter(|r| wanted.contains(r.image_id.as_str()));
        if let Some(missing) = cfg.cam_images.iter().find(|id| selected.get(id).is_none()) {
            return Err(Error::Config(format!(
                "image {missing:?} is not in labels.csv"
            )));
        }
        Dataset::load_dir(cfg.data_dir(), &selected, &classes, channels, size)?
    };
    let dir = cfg.out.join("cam");
    create_dir(&dir)?;
    let regions_path = cfg.data_dir().join("regions.csv");
    let regions = if regions_path.exists() {
        Some(read_regions(&regions_path)?)
    } else {
        None
    };
    let mut pointing = String::from("image_id,hit\n");
    let (mut hits, mut scored) = (0usize, 0usize);
    let rows: Vec<usize> = (0..data.len()).collect();
    let plane = size * size;
    for chunk in rows.chunks(cfg.eval_batch_size) {
        let (images, _) = data.batch(chunk);
        let ids: Vec<String> = chunk.iter().map(|&i| data.ids[i].clone()).collect();
        let maps = class_cams(&model, &images, &ids, &class)?;
        for (j, map) in maps.iter().enumerate() {
            let img = &images.values()[j * channels * plane..(j + 1) * channels * plane];
            let gray: Vec<f64> = (0..plane)
                .map(|p| (0..channels).map(|ch| img[ch * plane + p]).sum::<f64>() / channels as f64)
                .collect();
            let stem = image_stem(&map.image_id);
            map.to_pgm().save(dir.join(format!("{stem}.pgm")))?;
            render_overlay(&gray, map, cfg.cam_alpha)?.save(dir.join(format!("{stem}.ppm")))?;
            if let Some(regions) = &regions {
                let boxes: Vec<_> = regions
                    .iter()
                    .filter(|r| r.image_id == map.image_id && r.class == class)
                    .collect();
                if !boxes.is_empty() {
                    let hit = boxes.iter().any(|r| pointing_game(map, r));
                    hits += usize::from(hit);
                    scored += 1;
                    pointing.push_str(&format!("{},{}\n", map.image_id, u8::from(hit)));
                }
            }
        }
    }
    say!(
        out,
        "wrote {} {class} maps to {}",
        data.len(),
        dir.display()
    );
    if regions.is_some() {
        write_file(&dir.join("pointing_game.csv"), &pointing)?;
        let rate = if scored == 0 {
            0.0
        } else {
            hits as f64 / scored as f64
        };
        say!(
            out,
            "pointing game: {hits}/{scored} hits, hit rate {}",
            format_fixed(rate, 3)
        );
    }
    Ok(())
}
