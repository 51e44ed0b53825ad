use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use amped::config::{DataSource, RunConfig};
use amped::data::{generate_splits, read_pnm, read_split, write_dataset, write_pnm, BinaryMap, Image, Pnm, PnmKind, Sample};
use amped::eval::{evaluate_image, evaluate_model, EvalAccumulator, EvalConfig, GroundTruthSet};
use amped::flops::{reduction_report, ArchSpec, RetentionProfile};
use amped::model::{load_checkpoint, save_checkpoint, EdgeMap, ForwardTrace, PruneMode, SedModel};
use amped::prune::PruneSchedule;
use amped::train::{train, LossReport, TrainObserver};
use log::info;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;
use crate::manifest::{config_hash, RunManifest, Versions, MANIFEST_FILE};
use crate::{schema, Arch, Command, Common};

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Reads, schema-checks, overrides and validates a run configuration.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    resolve_config(value, seed)
}

fn resolve_config(value: Value, seed: Option<u64>) -> Result<RunConfig> {
    schema::validate(&value)?;
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(amped::Error::from)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory plus the bookkeeping every command shares.
struct Run {
    out: PathBuf,
    config: Option<RunConfig>,
    common: Common,
    outputs: Vec<String>,
}

impl Run {
    fn config(&self, command: &str) -> Result<&RunConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| CliError::Usage(format!("{command} needs --config")))
    }

    fn checkpoint(&self, command: &str) -> Result<&Path> {
        self.common
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{command} needs --checkpoint")))
    }

    /// Absolute path of `rel` under the output directory; records it.
    fn output(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        Ok(path)
    }

    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.output(rel)?;
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(amped::Error::from)?;
        text.push('\n');
        self.write(rel, text)
    }

    fn finish(mut self, command: Command) -> Result<()> {
        self.outputs.sort();
        let manifest = RunManifest {
            command,
            flags: self.common.clone(),
            config_sha256: self.config.as_ref().map(config_hash),
            seed: self.config.as_ref().map(|c| c.train.seed),
            config: self.config.take(),
            versions: Versions::current(),
            outputs: std::mem::take(&mut self.outputs),
        };
        self.write_json(MANIFEST_FILE, &manifest)
    }
}

pub fn dispatch(command: Command, common: Common) -> Result<()> {
    if let Command::Replay { manifest } = &command {
        return replay(manifest, common);
    }
    let config = match &common.config {
        Some(p) => Some(load_config(p, common.seed)?),
        None => None,
    };
    execute(command, common, config)
}

fn execute(command: Command, common: Common, config: Option<RunConfig>) -> Result<()> {
    let out = match (&common.out, &config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => return Err(CliError::Usage("pass --out or --config".into())),
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut run = Run {
        out,
        config,
        common,
        outputs: Vec::new(),
    };
    match &command {
        Command::GenData => gen_data(&mut run)?,
        Command::Train => cmd_train(&mut run)?,
        Command::Infer { images, no_prune } => infer(&mut run, images, *no_prune)?,
        Command::PruneSweep => prune_sweep(&mut run)?,
        Command::Flops { arch, retention } => flops(&mut run, *arch, retention.as_deref())?,
        Command::Eval {
            pred,
            gt,
            tolerance,
            thresholds,
            no_nms,
        } => eval(&mut run, pred, gt, *tolerance, *thresholds, *no_nms)?,
        Command::Replay { .. } => unreachable!("handled by dispatch"),
    }
    run.finish(command)
}

fn replay(path: &Path, current: Common) -> Result<()> {
    let manifest = RunManifest::read(path)?;
    if manifest.versions != Versions::current() {
        log::warn!(
            "manifest written by {:?}, running {:?}",
            manifest.versions,
            Versions::current()
        );
    }
    let config = match manifest.config {
        Some(cfg) => Some(resolve_config(
            serde_json::to_value(&cfg).map_err(amped::Error::from)?,
            None,
        )?),
        None => None,
    };
    let common = Common {
        out: current.out.or(manifest.flags.out),
        jobs: current.jobs.or(manifest.flags.jobs),
        ..manifest.flags
    };
    let common = match (&common.out, &config) {
        (None, Some(c)) => Common {
            out: Some(c.output_dir.clone()),
            ..common
        },
        _ => common,
    };
    execute(manifest.command, common, config)
}

fn split(cfg: &RunConfig, test: bool) -> Result<Vec<Sample>> {
    Ok(match &cfg.data {
        DataSource::Synthetic { spec, test_count } => {
            let (tr, te) = generate_splits(spec, *test_count)?;
            if test {
                te
            } else {
                tr
            }
        }
        DataSource::Dataset { path } => read_split(path, if test { "test" } else { "train" })?,
    })
}

fn gen_data(run: &mut Run) -> Result<()> {
    let cfg = run.config("gen-data")?;
    let DataSource::Synthetic { spec, test_count } = &cfg.data else {
        return Err(CliError::Usage("gen-data needs a synthetic data source".into()));
    };
    let (train_set, test_set) = generate_splits(spec, *test_count)?;
    let spec = spec.clone();
    let root = run.output("dataset")?;
    write_dataset(&root, &train_set, &test_set, Some(&spec))?;
    println!(
        "wrote {} training and {} test samples to {}",
        train_set.len(),
        test_set.len(),
        root.display()
    );
    Ok(())
}

/// Streams the log and writes intermediate checkpoints.
struct TrainWriter {
    log: BufWriter<File>,
    out: PathBuf,
    every: usize,
    written: Vec<String>,
}

impl TrainObserver for TrainWriter {
    fn on_step(&mut self, report: &LossReport, model: &SedModel<f32>) -> amped::Result<()> {
        let line = serde_json::to_string(report)?;
        let io = |e| amped::Error::io(&self.out, e);
        writeln!(self.log, "{line}").map_err(io)?;
        let step = report.iteration + 1;
        if step % 50 == 0 {
            info!("step {step}: loss {:.4} (final {:.4})", report.total, report.final_term);
        }
        if self.every > 0 && step % self.every == 0 {
            let rel = format!("checkpoints/step-{step:06}.safetensors");
            save_checkpoint(model, self.out.join(&rel))?;
            self.written.push(rel);
        }
        Ok(())
    }
}

fn cmd_train(run: &mut Run) -> Result<()> {
    let cfg = run.config("train")?.clone();
    let data = split(&cfg, false)?;
    let mut model = match &run.common.checkpoint {
        Some(p) => {
            let loaded = load_checkpoint(p)?;
            SedModel::from_params(cfg.sed_config(), loaded.into_params())?
        }
        None => SedModel::new(cfg.sed_config(), cfg.train.seed)?,
    };
    let log_path = run.output("train-log.jsonl")?;
    if cfg.train.checkpoint_every > 0 {
        let dir = run.output("checkpoints")?;
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut writer = TrainWriter {
        log: BufWriter::new(file),
        out: run.out.clone(),
        every: cfg.train.checkpoint_every,
        written: Vec::new(),
    };
    let history = train(&cfg.train, &data, &mut model, &mut writer)?;
    writer.log.flush().map_err(|e| CliError::io(&log_path, e))?;
    run.outputs.retain(|o| o != "checkpoints");
    run.outputs.extend(writer.written);
    let final_path = run.output("checkpoint.safetensors")?;
    save_checkpoint(&model, &final_path)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
            history.len(),
            first.total,
            last.total,
            final_path.display()
        );
    }
    Ok(())
}

/// The checkpoint's weights under the run's configuration, when one is given.
fn model_for(run: &Run, command: &str) -> Result<SedModel<f32>> {
    let loaded = load_checkpoint(run.checkpoint(command)?)?;
    Ok(match &run.config {
        Some(cfg) => SedModel::from_params(cfg.sed_config(), loaded.into_params())?,
        None => loaded,
    })
}

fn images_in(paths: &[PathBuf]) -> Result<Vec<(String, Image)>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| CliError::io(p, e))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|x| x.to_str()), Some("pgm" | "ppm")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| {
            let id = f
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Usage(format!("{} has no usable name", f.display())))?;
            let image = Image::from_pnm(&read_pnm(f)?).map_err(amped::Error::from)?;
            Ok((id.to_string(), image))
        })
        .collect()
}

fn trace_json(id: &str, trace: &ForwardTrace<f32>) -> Value {
    let stages: Vec<Value> = trace
        .stages
        .iter()
        .map(|s| {
            json!({
                "layer": s.layer,
                "threshold": s.threshold,
                "tokens_in": s.tokens_in(),
                "retained": s.retained(),
                "origin_index": s.origin_index,
                "scores": s.scores.values(),
                "retained_positions": s.accumulated.retained_positions(),
            })
        })
        .collect();
    json!({
        "id": id,
        "macs": trace.macs,
        "token_counts": trace.token_counts,
        "stages": stages,
    })
}

fn edge_map_pnm(map: &EdgeMap) -> Result<Pnm> {
    let values: Vec<f32> = map.values().iter().map(|&v| v as f32).collect();
    Ok(Pnm::from_normalized(PnmKind::Gray, map.width(), map.height(), u16::MAX, &values)
        .map_err(amped::Error::from)?)
}

fn infer(run: &mut Run, images: &[PathBuf], no_prune: bool) -> Result<()> {
    let model = model_for(run, "infer")?;
    let inputs = if images.is_empty() {
        split(run.config("infer (without --images)")?, true)?
            .into_iter()
            .map(|s| (s.id, s.image))
            .collect()
    } else {
        images_in(images)?
    };
    let mode = if no_prune {
        PruneMode::Disabled
    } else {
        PruneMode::Schedule
    };
    let dir = run.output("infer")?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let results = inputs
        .par_iter()
        .map(|(id, image)| -> Result<(String, u64)> {
            let (map, trace) = model.forward(image, &mode)?;
            write_pnm(&edge_map_pnm(&map)?, dir.join(format!("{id}.pgm")))?;
            let mut text = serde_json::to_string_pretty(&trace_json(id, &trace)).map_err(amped::Error::from)?;
            text.push('\n');
            let path = dir.join(format!("{id}.trace.json"));
            std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            Ok((id.clone(), trace.macs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = results.iter().map(|r| r.1 as f64).sum::<f64>() / results.len().max(1) as f64;
    println!("predicted {} images, mean {:.0} MACs", results.len(), mean);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepEntry {
    schedule: String,
    thresholds: Vec<f64>,
    ods: f64,
    ois: f64,
    ap: f64,
    macs: f64,
    reduction_pct: f64,
}

fn bracketed(t: &[f64]) -> String {
    let parts: Vec<String> = t.iter().map(|v| v.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn prune_sweep(run: &mut Run) -> Result<()> {
    let cfg = run.config("prune-sweep")?.clone();
    let base_model = model_for(run, "prune-sweep")?;
    let test = split(&cfg, true)?;
    let mut schedules = cfg.sweep_schedules()?;
    if schedules.is_empty() {
        schedules.push(cfg.schedule.clone());
    }
    let baseline = evaluate_model(&base_model, &test, &PruneMode::Disabled, &cfg.eval)?;
    let base_macs = baseline.mean_macs();
    let rows = schedules
        .par_iter()
        .map(|s: &PruneSchedule| -> Result<SweepEntry> {
            let model = SedModel::from_params(
                amped::model::SedConfig {
                    schedule: s.clone(),
                    ..cfg.sed_config()
                },
                base_model.params().clone(),
            )?;
            let r = evaluate_model(&model, &test, &PruneMode::Schedule, &cfg.eval)?;
            let thresholds = s.thresholds();
            Ok(SweepEntry {
                schedule: bracketed(&thresholds),
                thresholds,
                ods: r.summary.ods,
                ois: r.summary.ois,
                ap: r.summary.ap,
                macs: r.mean_macs(),
                reduction_pct: 100.0 * (1.0 - r.mean_macs() / base_macs),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let origin = SweepEntry {
        schedule: "origin".into(),
        thresholds: Vec::new(),
        ods: baseline.summary.ods,
        ois: baseline.summary.ois,
        ap: baseline.summary.ap,
        macs: base_macs,
        reduction_pct: 0.0,
    };
    let mut csv = String::from("schedule,ods,ois,ap,macs,reduction_pct\n");
    for r in std::iter::once(&origin).chain(&rows) {
        csv.push_str(&format!(
            "\"{}\",{:.6},{:.6},{:.6},{:.1},{:.4}\n",
            r.schedule, r.ods, r.ois, r.ap, r.macs, r.reduction_pct
        ));
    }
    run.write("prune-sweep.csv", &csv)?;
    run.write_json(
        "prune-sweep.json",
        &json!({ "layers": cfg.schedule.layers(), "origin": origin, "rows": rows }),
    )?;
    print!("{csv}");
    Ok(())
}

fn read_retention(path: &Path) -> Result<RetentionProfile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let counts = value.get("token_counts").unwrap_or(&value).clone();
    serde_json::from_value(counts).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn flops(run: &mut Run, arch: Arch, retention: Option<&Path>) -> Result<()> {
    let spec = match arch {
        Arch::VitB => ArchSpec::vit_b(),
        Arch::VitL => ArchSpec::vit_l(),
        Arch::Config => ArchSpec::from_sed(&run.config("flops --arch config")?.sed_config()),
    };
    let profile = match retention {
        Some(p) => read_retention(p)?,
        None => spec.full_retention(),
    };
    let report = reduction_report(&spec, &profile)?;
    run.write("flops.csv", report.to_csv())?;
    run.write_json("flops.json", &json!({ "arch": spec, "retention": profile, "report": report }))?;
    println!(
        "{:.2} GMACs ({:.2}% below the unpruned {:.2} GMACs)",
        report.gmacs(),
        report.reduction_pct,
        report.baseline as f64 / 1e9
    );
    Ok(())
}

/// Loads `<id>.gt0.pbm`, `<id>.gt1.pbm`, ... until the first gap.
fn ground_truth(dir: &Path, id: &str) -> Result<GroundTruthSet> {
    let mut maps = Vec::new();
    loop {
        let path = dir.join(format!("{id}.gt{}.pbm", maps.len()));
        if !path.exists() {
            break;
        }
        maps.push(BinaryMap::from_pnm(&read_pnm(&path)?).map_err(amped::Error::from)?);
    }
    if maps.is_empty() {
        return Err(CliError::Usage(format!(
            "no ground truth {id}.gt0.pbm in {}",
            dir.display()
        )));
    }
    Ok(GroundTruthSet::new(maps).map_err(amped::Error::from)?)
}

fn eval(
    run: &mut Run,
    pred: &Path,
    gt: &Path,
    tolerance: Option<f64>,
    thresholds: Option<usize>,
    no_nms: bool,
) -> Result<()> {
    let base = run.config.as_ref().map_or_else(EvalConfig::default, |c| c.eval.clone());
    let cfg = EvalConfig {
        tolerance: tolerance.unwrap_or(base.tolerance),
        thresholds: thresholds.unwrap_or(base.thresholds),
        nms: base.nms && !no_nms,
    };
    if !(cfg.tolerance > 0.0 && cfg.tolerance < 1.0) || cfg.thresholds < 2 {
        return Err(CliError::Usage(
            "tolerance must lie in (0, 1) and thresholds must be at least 2".into(),
        ));
    }
    let preds = images_in(&[pred.to_path_buf()])?;
    if preds.is_empty() {
        return Err(CliError::Usage(format!("no predictions in {}", pred.display())));
    }
    let acc = preds
        .par_iter()
        .map(|(id, image)| -> Result<EvalAccumulator> {
            if image.channels() != 1 {
                return Err(CliError::Usage(format!("prediction {id} is not grayscale")));
            }
            let values = image.data().iter().map(|&v| f64::from(v)).collect();
            let map = EdgeMap::new(image.height(), image.width(), values).map_err(amped::Error::from)?;
            let counts = evaluate_image(&map, &ground_truth(gt, id)?, &cfg).map_err(amped::Error::from)?;
            let mut acc = EvalAccumulator::new();
            acc.insert(id.clone(), counts);
            Ok(acc)
        })
        .try_reduce(EvalAccumulator::new, |a, b| Ok(a.merge(b)))?;
    let summary = acc.summarize(&cfg.threshold_values()).map_err(amped::Error::from)?;
    run.write_json(
        "eval.json",
        &json!({
            "eval": cfg,
            "ods": summary.ods,
            "ods_threshold": summary.ods_threshold,
            "ois": summary.ois,
            "ap": summary.ap,
            "images": summary.images,
            "best_thresholds": summary.best_thresholds,
        }),
    )?;
    run.write("pr.csv", summary.pr_csv())?;
    println!(
        "ODS {:.4}  OIS {:.4}  AP {:.4}  ({} images)",
        summary.ods, summary.ois, summary.ap, summary.images
    );
    Ok(())
}
