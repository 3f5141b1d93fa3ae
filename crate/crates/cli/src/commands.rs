use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crosstask_core::manifest::DatasetManifest;
use crosstask_core::models::{load_model, save_model, ModelInstance, ModelKind, ModelSpec};
use crosstask_core::training::{
    class_report, evaluate, kfold_split, macro_accuracy_over, train, EpochRecord, Sample, Split,
    TeacherEnsemble,
};

use crate::config::RunConfig;
use crate::data::{clip_input, load_samples};
use crate::CliError;

/// Model parameters are seeded separately from the shuffling stream.
const INIT_SEED_SALT: u64 = 0x005e_ed0f_1417;

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or [paths] key)")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

struct EpochLog {
    file: Option<BufWriter<File>>,
}

impl EpochLog {
    fn create(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let mut f = BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?);
                writeln!(f, "{}", EpochRecord::CSV_HEADER).map_err(|e| CliError::io(p, e))?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn append(&mut self, r: &EpochRecord) {
        if let Some(f) = &mut self.file {
            // A failed log line must not abort training; the flush below reports it.
            let _ = writeln!(f, "{}", r.csv_row());
        }
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some(mut f) = self.file {
            f.flush().map_err(|e| CliError::Data(format!("log: {e}")))?;
        }
        Ok(())
    }
}

/// Outcome of one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub model_path: PathBuf,
    pub log: Vec<EpochRecord>,
}

impl RunSummary {
    /// Last eval row, or last train row when nothing was held out.
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.log
            .iter()
            .rev()
            .find(|r| r.split == Split::Eval)
            .or_else(|| self.log.last())
    }
}

fn final_line(r: &EpochRecord) -> String {
    format!(
        "final: epoch={} split={} loss={:.6} macro_accuracy={:.6}",
        r.epoch, r.split, r.loss, r.macro_accuracy
    )
}

struct Job<'a> {
    cfg: &'a RunConfig,
    spec: ModelSpec,
    classes: Vec<String>,
    train_set: Vec<Sample<f32>>,
    eval_set: Option<Vec<Sample<f32>>>,
    teachers: Option<(TeacherEnsemble, Vec<crosstask_core::models::ModelInput<f32>>)>,
    model_out: PathBuf,
    log: Option<PathBuf>,
}

fn run_job(job: Job<'_>, out: &mut dyn Write) -> Result<RunSummary, CliError> {
    let cfg = job.cfg;
    let mut model = ModelInstance::<f32>::new(
        job.spec,
        job.classes,
        cfg.features.clone(),
        cfg.training.seed ^ INIT_SEED_SALT,
    )?;
    let mut log = EpochLog::create(job.log.as_deref())?;
    let teachers = job.teachers.as_ref().map(|(e, inputs)| (e, inputs.as_slice()));
    let records = train(
        &mut model,
        &job.train_set,
        job.eval_set.as_deref(),
        &cfg.training,
        teachers,
        |r| {
            log.append(r);
            let _ = writeln!(
                out,
                "epoch {:>3} {:<5} loss={:.6} macro_accuracy={:.4} lr={:.3e} samples={}",
                r.epoch, r.split, r.loss, r.macro_accuracy, r.lr, r.samples
            );
        },
    )?;
    log.finish()?;
    save_model(&job.model_out, &model)?;
    let summary = RunSummary {
        model_path: job.model_out,
        log: records,
    };
    if let Some(r) = summary.final_record() {
        writeln!(out, "{}", final_line(r)).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(summary)
}

fn prepare(cfg: &RunConfig) -> Result<(RunConfig, DatasetManifest), CliError> {
    let mut cfg = cfg.clone();
    cfg.sync();
    cfg.features.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest_path = required(&cfg.paths.manifest, "manifest")?;
    let manifest = DatasetManifest::read(manifest_path).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.is_empty() {
        return Err(CliError::Data("manifest has no clips".into()));
    }
    Ok((cfg, manifest))
}

/// The (train, eval) manifests for each model to train.
fn splits(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<(DatasetManifest, Option<DatasetManifest>)>, CliError> {
    if let Some(k) = cfg.paths.kfold {
        return Ok(kfold_split(manifest, k)
            .map_err(|e| CliError::Data(e.to_string()))?
            .into_iter()
            .map(|(t, e)| (t, Some(e)))
            .collect());
    }
    if let Some(fold) = cfg.paths.eval_fold {
        let eval = manifest.subset(|r| r.fold == fold);
        let train = manifest.subset(|r| r.fold != fold);
        if eval.is_empty() || train.is_empty() {
            return Err(CliError::Data(format!("fold {fold} leaves an empty side")));
        }
        return Ok(vec![(train, Some(eval))]);
    }
    Ok(vec![(manifest.clone(), None)])
}

fn run_splits(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    spec: &ModelSpec,
    teachers: Option<&TeacherEnsemble>,
    out: &mut dyn Write,
) -> Result<Vec<RunSummary>, CliError> {
    let model_out = required(&cfg.paths.model_out, "model output path")?;
    let classes = manifest.classes();
    let mut spec = spec.clone();
    spec.n_classes = classes.len();
    let cache = cfg.paths.feature_cache.as_deref();
    let mut specs = vec![&spec];
    if let Some(t) = teachers {
        specs.extend(t.teachers.iter().map(|m| &m.spec));
    }
    let all = splits(cfg, manifest)?;
    let kfold = all.len() > 1;
    let mut summaries = Vec::new();
    for (i, (train_m, eval_m)) in all.into_iter().enumerate() {
        let suffix = if kfold { format!("_fold{}", i + 1) } else { String::new() };
        if kfold {
            writeln!(out, "fold {}", i + 1).map_err(|e| CliError::Data(e.to_string()))?;
        }
        let train_set = load_samples(&train_m, &classes, &cfg.features, &specs, cache)?;
        let eval_set = eval_m
            .as_ref()
            .map(|m| load_samples(m, &classes, &cfg.features, &specs, cache))
            .transpose()?;
        let job = Job {
            cfg,
            spec: spec.clone(),
            classes: classes.clone(),
            train_set,
            eval_set,
            teachers: teachers.map(|t| (t.clone(), Vec::new())),
            model_out: with_suffix(model_out, &suffix),
            log: cfg.paths.log.as_deref().map(|p| with_suffix(p, &suffix)),
        };
        let job = attach_teacher_inputs(job);
        summaries.push(run_job(job, out)?);
    }
    if kfold {
        let finals: Vec<f64> = summaries
            .iter()
            .filter_map(|s| s.final_record().map(|r| r.macro_accuracy))
            .collect();
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        writeln!(out, "kfold: folds={} mean_macro_accuracy={mean:.6}", finals.len())
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(summaries)
}

fn attach_teacher_inputs(mut job: Job<'_>) -> Job<'_> {
    if let Some((_, inputs)) = &mut job.teachers {
        *inputs = job.train_set.iter().map(|s| s.input.clone()).collect();
    }
    job
}

/// Trains the configured architecture; one model per fold in k-fold mode.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<RunSummary>, CliError> {
    let (cfg, manifest) = prepare(cfg)?;
    let spec = cfg.model.clone();
    run_splits(&cfg, &manifest, &spec, None, out)
}

/// Trains a Base student on the soft labels of 1–3 teacher files.
pub fn cmd_distill(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<RunSummary>, CliError> {
    let (cfg, manifest) = prepare(cfg)?;
    if cfg.paths.teachers.is_empty() {
        return Err(CliError::Usage("distill needs at least one --teacher".into()));
    }
    let teachers = cfg
        .paths
        .teachers
        .iter()
        .map(|p| load_model(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(t) = teachers.iter().find(|t| t.features != cfg.features) {
        return Err(CliError::Data(format!(
            "teacher front end {:?} differs from the student's",
            t.features
        )));
    }
    let classes = manifest.classes();
    if let Some(t) = teachers.iter().find(|t| t.classes != classes) {
        return Err(CliError::Data(format!(
            "teacher classes {:?} differ from the manifest's {:?}",
            t.classes, classes
        )));
    }
    let ensemble = TeacherEnsemble::new(teachers, cfg.training.teacher_combine)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut spec = cfg.model.clone();
    spec.kind = ModelKind::Base;
    run_splits(&cfg, &manifest, &spec, Some(&ensemble), out)
}

/// Per-class accuracy table plus per-clip predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<String>,
    /// `(class, correct, total)` for classes present in the manifest.
    pub rows: Vec<(String, usize, usize)>,
    pub macro_accuracy: f64,
    pub predictions: Vec<(PathBuf, String)>,
}

pub fn cmd_eval(
    model_path: &Path,
    manifest_path: &Path,
    csv: bool,
    cache_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<EvalReport, CliError> {
    let model = load_model(model_path).map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let manifest = DatasetManifest::read(manifest_path).map_err(|e| CliError::Data(e.to_string()))?;
    let present = manifest.classes();
    if let Some(c) = present.iter().find(|c| !model.classes.contains(c)) {
        return Err(CliError::Data(format!("scene `{c}` is not in the model vocabulary")));
    }
    let samples = load_samples(&manifest, &model.classes, &model.features, &[&model.spec], cache_dir)?;
    let ev = evaluate(&model, &samples)?;
    let present_idx: Vec<usize> = present
        .iter()
        .map(|c| model.classes.iter().position(|m| m == c).expect("checked above"))
        .collect();
    let macro_acc = macro_accuracy_over(&ev.predictions, &ev.labels, &present_idx)?;
    let report = class_report(&ev.predictions, &ev.labels, model.classes.len())?;
    let rows: Vec<(String, usize, usize)> = present_idx
        .iter()
        .map(|&i| (model.classes[i].clone(), report.rows[i].correct, report.rows[i].total))
        .collect();
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| CliError::Data(e.to_string()));
    if csv {
        w(out, "class,correct,total,accuracy".into())?;
        for (c, k, n) in &rows {
            w(out, format!("{c},{k},{n},{}", *k as f64 / *n as f64))?;
        }
        w(out, format!("macro,,,{macro_acc}"))?;
    } else {
        w(out, format!("{:<20} {:>8} {:>6} {:>9}", "class", "correct", "total", "accuracy"))?;
        for (c, k, n) in &rows {
            w(out, format!("{c:<20} {k:>8} {n:>6} {:>9.4}", *k as f64 / *n as f64))?;
        }
        w(out, format!("macro accuracy: {macro_acc:.6}"))?;
    }
    let predictions = manifest
        .records
        .iter()
        .zip(&ev.predictions)
        .map(|(r, &p)| (r.path.clone(), model.classes[p].clone()))
        .collect();
    Ok(EvalReport {
        classes: model.classes.clone(),
        rows,
        macro_accuracy: macro_acc,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub probabilities: Vec<(String, f64)>,
    /// Feature extraction plus forward pass.
    pub elapsed: Duration,
}

pub fn cmd_classify(model_path: &Path, wav: &Path, out: &mut dyn Write) -> Result<Classification, CliError> {
    let model = load_model(model_path).map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;
    let start = Instant::now();
    let with_sidecar = model.spec.kind.uses_embedder()
        && model.spec.embedder.variant == crosstask_core::models::EmbedderVariant::FileBacked;
    let input = clip_input(wav, &model.features, with_sidecar, None)?;
    let logits = model.logits(&input)?;
    let elapsed = start.elapsed();
    let logits: Vec<f64> = logits.data().iter().map(|&v| f64::from(v)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probabilities: Vec<(String, f64)> = model
        .classes
        .iter()
        .cloned()
        .zip(exps.iter().map(|e| e / total))
        .collect();
    let best = probabilities
        .iter()
        .fold(&probabilities[0], |b, p| if p.1 > b.1 { p } else { b });
    let label = best.0.clone();
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(|e| CliError::Data(e.to_string()));
    w(out, format!("label: {label}"))?;
    for (c, p) in &probabilities {
        w(out, format!("  {c:<20} {p:.6}"))?;
    }
    w(out, format!("inference_ms: {:.3}", elapsed.as_secs_f64() * 1e3))?;
    Ok(Classification {
        label,
        probabilities,
        elapsed,
    })
}
