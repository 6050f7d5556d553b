use std::path::{Path, PathBuf};

use anomaly_expert::eval::{
    class_auroc, evaluate_records, export_map, localization, read_records, run_benchmark, BenchmarkReport, ClassAuroc, Localization,
    NullJudge, RecordReport,
};
use anomaly_expert::features::{
    holdout_split, load_bundle, load_checkpoint, read_manifest, save_bundle, save_checkpoint, synth_generate, write_manifest, Checkpoint,
    ManifestEntry,
};
use anomaly_expert::pipeline::{dedup_by_class, read_items, write_items};
use anomaly_expert::scoring::{assemble_prompt, PromptSummary};
use anomaly_expert::training::{train_stage1, EpochStats, Precision, TrainReport};
use anomaly_expert::{Error, ExpertModel, ExpertParams, FeatureBundle, Real};
use serde::Serialize;

use crate::config::AppConfig;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    /// Prefixes the stage that failed.
    pub fn in_stage(stage: &str) -> impl FnOnce(Error) -> Failure + '_ {
        move |e| {
            let f = Failure::from(e);
            Failure { code: f.code, message: format!("stage {stage}: {}", f.message) }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        use anomaly_expert::ErrorClass::*;
        let code = match e.class() {
            Usage => 1,
            Data => 2,
            Numeric => 3,
        };
        Self { code, message: e.to_string() }
    }
}

pub type Outcome = Result<(serde_json::Value, String), Failure>;

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report serializes")
}

pub fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::usage(format!("{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn load_manifest_bundles(path: &Path) -> Result<Vec<FeatureBundle>, Error> {
    read_manifest(path)?
        .iter()
        .map(|e| {
            let b = load_bundle(&e.path)?;
            if b.label != e.label || b.class_id != e.class_id {
                return Err(Error::Data(format!("{}: label/class disagree with manifest", e.path.display())));
            }
            Ok(b)
        })
        .collect()
}

fn load_model(path: &Path) -> Result<ExpertModel<f64>, Error> {
    ExpertModel::new(load_checkpoint::<f64>(path)?.params)
}

#[derive(Serialize)]
struct SynthOutput {
    out: PathBuf,
    n_train: usize,
    n_heldout: usize,
    n_anomalous: usize,
}

/// `out/{train,heldout}/c{class}_{k}.aovf` plus one manifest per side and
/// the resolved config.
pub fn synth(cfg: &AppConfig, out: &Path) -> Outcome {
    let data = synth_generate(&cfg.synth)?;
    let n_anomalous = data.iter().filter(|b| b.label.is_anomalous()).count();
    let (train, held) = holdout_split(data, cfg.heldout_fraction, cfg.synth.seed)?;
    for (side, bundles) in [("train", &train), ("heldout", &held)] {
        create_dir(&out.join(side))?;
        let mut per_class = std::collections::BTreeMap::<u32, usize>::new();
        let mut entries = Vec::with_capacity(bundles.len());
        for b in bundles.iter() {
            let k = per_class.entry(b.class_id).or_default();
            let rel = PathBuf::from(side).join(format!("c{}_{:04}.aovf", b.class_id, k));
            *k += 1;
            save_bundle(b, out.join(&rel))?;
            entries.push(ManifestEntry { id: Some(rel.display().to_string()), path: rel, label: b.label, class_id: b.class_id, source_layers: None });
        }
        write_manifest(out.join(format!("{side}.jsonl")), &entries)?;
    }
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::Io { path: cfg_path, source: e })?;
    let o = SynthOutput { out: out.into(), n_train: train.len(), n_heldout: held.len(), n_anomalous };
    let text = format!("wrote {} training and {} held-out bundles to {}\n", o.n_train, o.n_heldout, out.display());
    Ok((json(&o), text))
}

fn train_generic<F: Real>(
    cfg: &AppConfig,
    train: &[FeatureBundle],
    val: Option<&[FeatureBundle]>,
    init: Option<&Path>,
) -> Result<(Checkpoint<F>, TrainReport), Error> {
    let init = match init {
        Some(p) => load_checkpoint::<F>(p)?,
        None => Checkpoint { params: ExpertParams::init(&cfg.model, cfg.train.seed)?, optimizer: None },
    };
    train_stage1(train, val, init, &cfg.train)
}

/// Trains at the configured precision and saves the checkpoint.
fn train_and_save(
    cfg: &AppConfig,
    train: &[FeatureBundle],
    val: Option<&[FeatureBundle]>,
    init: Option<&Path>,
    out: &Path,
) -> Result<(ExpertModel<f64>, TrainReport), Error> {
    let (params, mut report) = match cfg.train.precision {
        Precision::F32 => {
            let (ck, r) = train_generic::<f32>(cfg, train, val, init)?;
            save_checkpoint(&ck, out)?;
            (ck.params.cast::<f64>(), r)
        }
        Precision::F64 => {
            let (ck, r) = train_generic::<f64>(cfg, train, val, init)?;
            save_checkpoint(&ck, out)?;
            (ck.params, r)
        }
    };
    report.checkpoint = Some(out.into());
    Ok((ExpertModel::new(params)?, report))
}

fn epoch_lines(epochs: &[EpochStats]) -> String {
    let fmt = |a: &Option<ClassAuroc>| a.as_ref().map_or("-".to_string(), |a| format!("{:.4}", a.mean));
    epochs
        .iter()
        .map(|e| format!("epoch {}: loss {:.5}  train AUROC {}  val AUROC {}\n", e.epoch, e.mean_loss, fmt(&e.train_auroc), fmt(&e.val_auroc)))
        .collect()
}

pub fn train(cfg: &AppConfig, train: &Path, val: Option<&Path>, init: Option<&Path>, out: &Path) -> Outcome {
    let train_set = load_manifest_bundles(train)?;
    let val_set = val.map(load_manifest_bundles).transpose()?;
    let (_, report) = train_and_save(cfg, &train_set, val_set.as_deref(), init, out)?;
    let text = format!("{}{} steps in {:.1}s, checkpoint {}\n", epoch_lines(&report.epochs), report.steps, report.wall_time_s, out.display());
    Ok((json(&report), text))
}

#[derive(Serialize)]
struct ScoreOutput {
    bundle: PathBuf,
    #[serde(flatten)]
    prompt: PromptSummary,
}

pub fn score(cfg: &AppConfig, checkpoint: &Path, bundle_path: &Path) -> Outcome {
    let model = load_model(checkpoint)?;
    let bundle = load_bundle(bundle_path)?;
    let inf = model.infer(&bundle)?;
    let prompt = assemble_prompt(&bundle, &inf.selection, cfg.thresholds)?.summary();
    let text = format!("{:.6} {} ({} original, {} selected tokens)\n", prompt.score, prompt.adverb, prompt.n_original, prompt.n_selected);
    Ok((json(&ScoreOutput { bundle: bundle_path.into(), prompt }), text))
}

/// With a checkpoint, `manifest` lists bundles to score; without, it holds
/// precomputed scores or answers.
pub fn eval(checkpoint: Option<&Path>, manifest: &Path) -> Outcome {
    match checkpoint {
        Some(c) => {
            let model = load_model(c)?;
            let report: BenchmarkReport = run_benchmark(&model, &read_manifest(manifest)?)?;
            let text = report.text_table();
            Ok((json(&report), text))
        }
        None => {
            let report: RecordReport = evaluate_records(&read_records(manifest)?, &NullJudge)?;
            let mut text = String::new();
            if let Some(a) = &report.auroc {
                text += &format!("AUROC {:.4}\n", a.mean);
            }
            if let Some(d) = &report.detection {
                text += &format!("accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}\n", d.accuracy, d.precision, d.recall, d.f1);
            }
            if let Some(r) = report.rouge_l {
                text += &format!("ROUGE-L {r:.4}\n");
            }
            Ok((json(&report), text))
        }
    }
}

fn map_name(bundle: &Path, crop: usize) -> String {
    let stem = bundle.file_stem().map_or("bundle".into(), |s| s.to_string_lossy().into_owned());
    format!("{stem}_crop{crop}.pgm")
}

/// Writes one PGM per crop of every bundle; returns the file names.
fn export_all(model: &ExpertModel<f64>, bundles: &[(PathBuf, FeatureBundle)], out: &Path) -> Result<Vec<String>, Error> {
    create_dir(out)?;
    let mut written = Vec::new();
    for (path, b) in bundles {
        let sig = model.infer(b)?.significance;
        for crop in 0..sig.averaged.len() {
            let name = map_name(path, crop);
            export_map(&sig, crop, b.layout.g, out.join(&name))?;
            written.push(name);
        }
    }
    Ok(written)
}

pub fn maps(checkpoint: &Path, bundles: &[PathBuf], manifest: Option<&Path>, out: &Path) -> Outcome {
    let model = load_model(checkpoint)?;
    let mut paths: Vec<PathBuf> = bundles.to_vec();
    if let Some(m) = manifest {
        paths.extend(read_manifest(m)?.into_iter().map(|e| e.path));
    }
    if paths.is_empty() {
        return Err(Failure::usage("maps needs --bundle or --manifest"));
    }
    let loaded = paths.into_iter().map(|p| load_bundle(&p).map(|b| (p, b))).collect::<Result<Vec<_>, _>>()?;
    let files = export_all(&model, &loaded, out)?;
    let text = format!("wrote {} maps to {}\n", files.len(), out.display());
    Ok((serde_json::json!({ "out": out, "maps": files }), text))
}

pub fn dedup(cfg: &AppConfig, items: &Path, out: &Path) -> Outcome {
    let all = read_items(items)?;
    let before = all.len();
    let outcome = dedup_by_class(all, cfg.dedup_threshold)?;
    write_items(out, &outcome.kept)?;
    let text = format!("kept {} of {} items\n", outcome.kept.len(), before);
    Ok((serde_json::json!({ "kept": outcome.kept.len(), "removed": outcome.removed, "out": out }), text))
}

#[derive(Debug, Serialize)]
pub struct PipelineReport {
    /// Mean per-class AUROC on the held-out split.
    pub auroc: f64,
    pub heldout: ClassAuroc,
    pub localization: Localization,
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub checkpoint: String,
    pub maps: Vec<String>,
    pub train_wall_time_s: f64,
    pub config: AppConfig,
}

/// Synth, train, held-out evaluation and map export into `out`.
pub fn pipeline(cfg: &AppConfig, out: &Path) -> Outcome {
    cfg.check_model_fits_synth()?;
    create_dir(out)?;
    let data = synth_generate(&cfg.synth).map_err(Failure::in_stage("synth"))?;
    let (train_set, held) = holdout_split(data, cfg.heldout_fraction, cfg.synth.seed).map_err(Failure::in_stage("synth"))?;
    if held.is_empty() {
        return Err(Failure::usage("heldout_fraction leaves no held-out bundles"));
    }
    let ckpt = out.join("model.aovc");
    let (model, train_report) = train_and_save(cfg, &train_set, Some(&held), None, &ckpt).map_err(Failure::in_stage("train"))?;

    let scores = model.score_batch(&held).map_err(Failure::in_stage("eval"))?;
    let labels: Vec<bool> = held.iter().map(|b| b.label.is_anomalous()).collect();
    let classes: Vec<u32> = held.iter().map(|b| b.class_id).collect();
    let heldout = class_auroc(&scores, &labels, &classes).map_err(Failure::in_stage("eval"))?;
    let loc = localization(&model, &held).map_err(Failure::in_stage("eval"))?;

    // First anomalous held-out bundle of every class.
    let mut seen = std::collections::BTreeSet::new();
    let picks: Vec<(PathBuf, FeatureBundle)> = held
        .iter()
        .filter(|b| b.label.is_anomalous() && seen.insert(b.class_id))
        .map(|b| (PathBuf::from(format!("class{}", b.class_id)), b.clone()))
        .collect();
    let maps = export_all(&model, &picks, &out.join("maps"))
        .map_err(Failure::in_stage("maps"))?
        .into_iter()
        .map(|n| format!("maps/{n}"))
        .collect();

    let report = PipelineReport {
        auroc: heldout.mean,
        heldout,
        localization: loc,
        loss_curve: train_report.step_losses.clone(),
        epochs: train_report.epochs.clone(),
        steps: train_report.steps,
        n_train: train_set.len(),
        n_heldout: held.len(),
        checkpoint: "model.aovc".into(),
        maps,
        train_wall_time_s: train_report.wall_time_s,
        config: cfg.clone(),
    };
    let value = json(&report);
    let path = out.join("report.json");
    let body = serde_json::to_vec_pretty(&value).expect("report serializes");
    std::fs::write(&path, body).map_err(|e| Failure::from(Error::Io { path, source: e }))?;
    let text = format!(
        "{}held-out AUROC {:.4}, localization {}/{}; report at {}\n",
        epoch_lines(&report.epochs),
        report.auroc,
        report.localization.hits,
        report.localization.total,
        out.join("report.json").display()
    );
    Ok((value, text))
}
