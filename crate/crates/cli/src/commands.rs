//! One function per subcommand. Each resolves the config, records inputs,
//! writes its artifacts and finishes with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diffseg::data::{read_split, write_dataset, DatasetEntry, Split, SynthDataset};
use diffseg::densecrf::{mean_field_fast, mean_field_naive, UnaryField};
use diffseg::diffseg::{generate_ensemble, DiffMap, EnsembleMember, MaskEnsemble};
use diffseg::diffusion::{train, write_loss_csv, ConditionalModel, LabeledImage};
use diffseg::io::{read_image, read_mask, write_json, write_mask, write_text};
use diffseg::metrics::{corpus_mean, evaluate, MeanMetrics, MetricReport, Undefined};
use diffseg::refine::{refine_ensemble, CrfPath};
use diffseg::uncertainty::report;
use diffseg::Image;
use serde::Serialize;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::heatmap::{read_heatmap, write_heatmap, Scale};
use crate::manifest::Run;
use crate::{Command, Common};

/// Ambiguity is a Bernoulli variance, at most 0.25; rendered ×4.
pub const AMBIGUITY_SCALE: f64 = 4.0;

pub fn mask_file(t: usize) -> String {
    format!("mask_t{t:03}.png")
}

pub fn diff_file(t: usize) -> String {
    format!("diff_t{t:03}.png")
}

fn resolve(common: &Common, edit: impl FnOnce(&mut PipelineConfig)) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(what: &str, p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", p.display())))
    }
}

fn require_dir(what: &str, p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", p.display())))
    }
}

fn load_model(run: &mut Run, path: &Path) -> Result<ConditionalModel, CliError> {
    require_file("model", path)?;
    run.input("model", path)?;
    Ok(ConditionalModel::load(path)?)
}

fn load_split(run: &mut Run, data: &Path, split: Split) -> Result<Vec<DatasetEntry>, CliError> {
    require_dir("data directory", data)?;
    require_file("dataset index", &data.join("labels.csv"))?;
    run.input("data", data)?;
    Ok(read_split(data, split)?)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

pub fn dispatch(cmd: Command) -> Result<PathBuf, CliError> {
    match cmd {
        Command::Synth { common, train, val, test } => synth(&common, train, val, test),
        Command::Train { common, data, epochs } => train_cmd(&common, &data, epochs),
        Command::Segment { common, model, image, timestep, delta } => {
            segment(&common, &model, &image, timestep, delta)
        }
        Command::Ensemble { common, model, image, data, timesteps, delta } => {
            ensemble(&common, &model, image.as_deref(), data.as_deref(), timesteps, delta)
        }
        Command::Uncertainty { common, ensemble } => uncertainty(&common, &ensemble),
        Command::Refine { common, ensemble, image, data, iters, subset } => {
            refine(&common, &ensemble, image.as_deref(), data.as_deref(), iters, subset)
        }
        Command::RefineOne { common, mask, image, confidence } => refine_one(&common, &mask, &image, confidence),
        Command::Eval { common, data, pred, mask_name, members } => eval(&common, &data, &pred, &mask_name, members),
    }
}

fn synth(common: &Common, train: Option<usize>, val: Option<usize>, test: Option<usize>) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |c| {
        c.synth.train = train.unwrap_or(c.synth.train);
        c.synth.val = val.unwrap_or(c.synth.val);
        c.synth.test = test.unwrap_or(c.synth.test);
    })?;
    let mut run = Run::new("synth", &common.out, &cfg)?;
    let s = &cfg.synth;
    let ds = SynthDataset::generate(&cfg.synth_spec(), s.train, s.val, s.test)?;
    write_dataset(&run.dir, &ds)?;
    run.output("labels.csv");
    for split in [Split::Train, Split::Val, Split::Test] {
        for i in 0..ds.split(split).len() {
            run.output(format!("{}/images/{i:04}.png", split.name()));
            run.output(format!("{}/masks/{i:04}.png", split.name()));
        }
    }
    run.finish()
}

fn train_cmd(common: &Common, data: &Path, epochs: Option<usize>) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |c| c.train.epochs = epochs.unwrap_or(c.train.epochs))?;
    let mut run = Run::new("train", &common.out, &cfg)?;
    let entries = load_split(&mut run, data, Split::Train)?;
    let Some(first) = entries.first() else {
        return Err(CliError::Usage(format!("{} has no training images", data.display())));
    };
    let mut tc = cfg.train_config(first.sample.image.width());
    tc.checkpoint = Some(run.output("model.dseg"));
    let set: Vec<LabeledImage> = entries
        .into_iter()
        .map(|e| LabeledImage {
            image: e.sample.image,
            label: e.sample.label,
        })
        .collect();
    let out = train(&set, &tc)?;
    out.model.save(&run.dir.join("model.dseg"))?;
    write_loss_csv(&run.output("loss.csv"), &out.epoch_losses)?;
    run.finish()
}

/// Members and difference maps of one image, written under `dir`.
fn write_members(run: &mut Run, rel: &Path, y: &MaskEnsemble, maps: &[DiffMap]) -> Result<(), CliError> {
    let mut members = Vec::new();
    for (m, d) in y.members().iter().zip(maps) {
        write_mask(&run.output(rel.join(mask_file(m.timestep))), &m.mask)?;
        let diff = rel.join(diff_file(m.timestep));
        write_heatmap(&run.output(&diff), &d.values, Scale::MinMax)?;
        run.output(diff.with_extension("json"));
        members.push(json!({ "timestep": m.timestep, "delta": m.delta, "area": m.mask.area() }));
    }
    write_json(
        &run.output(rel.join("members.json")),
        &json!({ "image_id": y.image_id, "members": members }),
    )?;
    Ok(())
}

fn segment(
    common: &Common,
    model: &Path,
    image: &Path,
    timestep: Option<usize>,
    delta: Option<f64>,
) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |c| {
        c.segment.timestep = timestep.unwrap_or(c.segment.timestep);
        apply_delta(c, delta);
    })?;
    let mut run = Run::new("segment", &common.out, &cfg)?;
    let net = load_model(&mut run, model)?;
    require_file("image", image)?;
    run.input("image", image)?;
    let img = read_image(image)?;
    let t = cfg.segment.timestep;
    let (y, maps) = generate_ensemble(
        &net,
        &img,
        &stem(image),
        &[t],
        &cfg.segment.options(),
        &cfg.schedule.build()?,
        cfg.seed,
    )?;
    write_members(&mut run, Path::new(""), &y, &maps)?;
    run.finish()
}

fn apply_delta(c: &mut PipelineConfig, delta: Option<f64>) {
    if let Some(d) = delta {
        c.segment.threshold = crate::config::ThresholdRule::Fixed;
        c.segment.delta = d;
    }
}

fn ensemble(
    common: &Common,
    model: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    timesteps: Option<String>,
    delta: Option<f64>,
) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |c| {
        if let Some(t) = timesteps {
            c.segment.timesteps = t;
        }
        apply_delta(c, delta);
    })?;
    let mut run = Run::new("ensemble", &common.out, &cfg)?;
    let net = load_model(&mut run, model)?;
    let ts = cfg.timesteps()?;
    let schedule = cfg.schedule.build()?;
    let opts = cfg.segment.options();
    let jobs: Vec<(String, Image, PathBuf)> = match (image, data) {
        (Some(p), _) => {
            require_file("image", p)?;
            run.input("image", p)?;
            vec![(stem(p), read_image(p)?, PathBuf::new())]
        }
        (None, Some(d)) => load_split(&mut run, d, Split::Test)?
            .into_iter()
            .map(|e| (e.id.clone(), e.sample.image, PathBuf::from(&e.id)))
            .collect(),
        (None, None) => return Err(CliError::Usage("ensemble needs --image or --data".into())),
    };
    for (id, img, rel) in &jobs {
        let (y, maps) = generate_ensemble(&net, img, id, &ts, &opts, &schedule, cfg.seed)?;
        write_members(&mut run, rel, &y, &maps)?;
    }
    run.finish()
}

/// `mask_tNNN.png` files of `dir`, ordered by timestep.
fn member_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(t) = name
            .strip_prefix("mask_t")
            .and_then(|s| s.strip_suffix(".png"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            out.push((t, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Per-image directories of an ensemble run: the run itself when it holds
/// masks directly, otherwise its subdirectories that do.
fn ensemble_dirs(root: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    require_dir("ensemble directory", root)?;
    if !member_files(root)?.is_empty() {
        return Ok(vec![(read_image_id(root)?, root.to_path_buf(), PathBuf::new())]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", root.display())))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        if !member_files(&d)?.is_empty() {
            let id = d.file_name().expect("listed entry").to_string_lossy().into_owned();
            out.push((id.clone(), d, PathBuf::from(id)));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("no mask_tNNN.png files under {}", root.display())));
    }
    Ok(out)
}

fn read_image_id(dir: &Path) -> Result<String, CliError> {
    let p = dir.join("members.json");
    let id = std::fs::read_to_string(&p)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["image_id"].as_str().map(str::to_string));
    Ok(id.unwrap_or_else(|| stem(dir)))
}

fn read_ensemble(id: &str, dir: &Path, with_maps: bool) -> Result<(MaskEnsemble, Vec<DiffMap>), CliError> {
    let mut members = Vec::new();
    let mut maps = Vec::new();
    for (t, p) in member_files(dir)? {
        members.push(EnsembleMember {
            timestep: t,
            mask: read_mask(&p)?,
            delta: f64::NAN,
        });
        if with_maps {
            let dp = dir.join(diff_file(t));
            require_file("difference map", &dp)?;
            maps.push(DiffMap {
                values: read_heatmap(&dp)?,
                timestep: t,
            });
        }
    }
    Ok((MaskEnsemble::new(id, members)?, maps))
}

fn uncertainty(common: &Common, ens: &Path) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("uncertainty", &common.out, &cfg)?;
    let dirs = ensemble_dirs(ens)?;
    run.input("ensemble", ens)?;
    let mut rows = Vec::new();
    for (id, dir, rel) in &dirs {
        let (y, _) = read_ensemble(id, dir, false)?;
        let r = report(&y)?;
        let coh = rel.join("coherence.png");
        let amb = rel.join("ambiguity.png");
        write_heatmap(&run.output(&coh), &r.coherence, Scale::Fixed { lo: 0.0, hi: 1.0 })?;
        write_heatmap(&run.output(&amb), &r.ambiguity, Scale::Fixed { lo: 0.0, hi: 1.0 / AMBIGUITY_SCALE })?;
        run.output(coh.with_extension("json"));
        run.output(amb.with_extension("json"));
        write_json(
            &run.output(rel.join("uncertainty.json")),
            &json!({
                "ged": r.ged,
                "n": r.n,
                "coherence_png": "coherence.png",
                "ambiguity_png": "ambiguity.png",
                "ambiguity_scale": AMBIGUITY_SCALE,
            }),
        )?;
        rows.push((id.clone(), r.ged, r.n));
    }
    if dirs.len() > 1 || !dirs[0].2.as_os_str().is_empty() {
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        let images: Vec<_> = rows.iter().map(|(id, g, n)| json!({ "id": id, "ged": g, "n": n })).collect();
        write_json(&run.output("uncertainty.json"), &json!({ "images": images, "mean_ged": mean }))?;
    }
    run.finish()
}

#[derive(Serialize)]
struct RefineRecord<'a> {
    image_id: &'a str,
    seed: u64,
    threshold: f64,
    final_threshold: f64,
    crf_path: CrfPath,
    iterations: &'a [diffseg::refine::RefineIteration],
}

fn refine(
    common: &Common,
    ens: &Path,
    image: Option<&Path>,
    data: Option<&Path>,
    iters: Option<usize>,
    subset: Option<usize>,
) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |c| {
        c.refine.iterations = iters.unwrap_or(c.refine.iterations);
        c.refine.subset_size = subset.unwrap_or(c.refine.subset_size);
    })?;
    let mut run = Run::new("refine", &common.out, &cfg)?;
    let dirs = ensemble_dirs(ens)?;
    run.input("ensemble", ens)?;
    let images: BTreeMap<String, Image> = match (image, data) {
        (Some(p), _) => {
            require_file("image", p)?;
            run.input("image", p)?;
            let img = read_image(p)?;
            dirs.iter().map(|d| (d.0.clone(), img.clone())).collect()
        }
        (None, Some(d)) => load_split(&mut run, d, Split::Test)?
            .into_iter()
            .map(|e| (e.id, e.sample.image))
            .collect(),
        (None, None) => return Err(CliError::Usage("refine needs --image or --data".into())),
    };
    let rc = cfg.refine_config();
    for (id, dir, rel) in &dirs {
        let img = images
            .get(id)
            .ok_or_else(|| CliError::Usage(format!("no image for ensemble `{id}`")))?;
        let (y, maps) = read_ensemble(id, dir, true)?;
        let out = refine_ensemble(&y, img, &maps, &cfg.crf, &rc)?;
        write_mask(&run.output(rel.join("final.png")), &out.final_mask)?;
        for (k, it) in out.iterations.iter().enumerate() {
            write_mask(&run.output(rel.join(format!("iter_{}.png", k + 1))), &it.mask)?;
        }
        let rec = RefineRecord {
            image_id: id,
            seed: rc.seed,
            threshold: rc.threshold,
            final_threshold: rc.final_threshold,
            crf_path: rc.crf_path,
            iterations: &out.iterations,
        };
        write_json(&run.output(rel.join("refine.json")), &rec)?;
    }
    run.finish()
}

fn refine_one(common: &Common, mask: &Path, image: &Path, confidence: f64) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |_| {})?;
    if !(confidence > 0.5 && confidence < 1.0) {
        return Err(CliError::Config(format!("--confidence must lie in (0.5, 1), got {confidence}")));
    }
    let mut run = Run::new("refine-one", &common.out, &cfg)?;
    require_file("mask", mask)?;
    require_file("image", image)?;
    run.input("mask", mask)?;
    run.input("image", image)?;
    let m = read_mask(mask)?;
    let img = read_image(image)?;
    if (m.width(), m.height()) != (img.width(), img.height()) {
        return Err(CliError::Usage("mask and image differ in size".into()));
    }
    let p: Vec<f64> = m
        .data()
        .iter()
        .map(|&v| if v == 1 { confidence } else { 1.0 - confidence })
        .collect();
    let unary = UnaryField::from_probabilities(m.width(), m.height(), &p, cfg.refine.unary_eps)?;
    let q = match cfg.refine.crf_path {
        CrfPath::Fast => mean_field_fast(&unary, &img, &cfg.crf)?,
        CrfPath::Naive => mean_field_naive(&unary, &img, &cfg.crf)?,
    };
    write_mask(&run.output("refined.png"), &q.argmax())?;
    run.finish()
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined: Undefined,
    /// Masks averaged into this row (1 unless scoring members).
    pub masks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub mean: MeanMetrics,
}

fn eval(common: &Common, data: &Path, pred: &Path, mask_name: &str, members: bool) -> Result<PathBuf, CliError> {
    let cfg = resolve(common, |_| {})?;
    let mut run = Run::new("eval", &common.out, &cfg)?;
    let entries = load_split(&mut run, data, Split::Test)?;
    require_dir("prediction directory", pred)?;
    run.input("pred", pred)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for e in &entries {
        let dir = pred.join(&e.id);
        let files: Vec<PathBuf> = if members {
            member_files(&dir)?.into_iter().map(|(_, p)| p).collect()
        } else {
            vec![dir.join(mask_name)]
        };
        if files.is_empty() {
            return Err(CliError::Usage(format!("no member masks in {}", dir.display())));
        }
        let mut per = Vec::new();
        for f in &files {
            require_file("predicted mask", f)?;
            per.push(evaluate(&read_mask(f)?, &e.sample.mask)?);
        }
        let row = image_row(&e.id, &per);
        reports.push(MetricReport {
            dice: row.dice,
            jaccard: row.jaccard,
            precision: row.precision,
            recall: row.recall,
            undefined: row.undefined,
        });
        rows.push(row);
    }
    let rep = EvalReport {
        mean: corpus_mean(&reports),
        images: rows,
    };
    write_json(&run.output("metrics.json"), &rep)?;
    let mut csv = String::from("id,dice,jaccard,precision,recall\n");
    for r in &rep.images {
        csv.push_str(&format!("{},{},{},{},{}\n", r.id, r.dice, r.jaccard, r.precision, r.recall));
    }
    let m = &rep.mean;
    csv.push_str(&format!("mean,{},{},{},{}\n", m.dice, m.jaccard, m.precision, m.recall));
    write_text(&run.output("metrics.csv"), &csv)?;
    run.finish()
}

fn image_row(id: &str, per: &[MetricReport]) -> ImageMetrics {
    let m = corpus_mean(per);
    let any = |f: fn(&Undefined) -> bool| per.iter().any(|r| f(&r.undefined));
    ImageMetrics {
        id: id.into(),
        dice: m.dice,
        jaccard: m.jaccard,
        precision: m.precision,
        recall: m.recall,
        undefined: Undefined {
            dice: any(|u| u.dice),
            jaccard: any(|u| u.jaccard),
            precision: any(|u| u.precision),
            recall: any(|u| u.recall),
        },
        masks: per.len(),
    }
}
