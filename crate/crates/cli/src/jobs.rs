//! Command implementations. Each job writes its outputs and a manifest into an
//! empty output directory.

use std::fmt;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semanon::anonymizer::{AnonymizationResult, Anonymizer, Arity, ProvenanceReport};
use semanon::checkpoint::{sha256_hex, Checkpoint, StoredLatents};
use semanon::config::RunConfig;
use semanon::evaluation::{
    embedding_distance, image_frechet_distance, mask_iou, mean_landmark_offset, pair_consistency, region_l1,
    region_psnr, CentroidLandmarks, FaceEmbedder, LandmarkDetector, MetricTable,
};
use semanon::image::{Image, LabelMap, MaskImage};
use semanon::inversion::reconstruction_psnr;
use semanon::labels::load_label_map;
use semanon::latent::{
    estimate_w_mean, sample_latent, slot_pca_directions, substitute_slot, AttributeSlot,
};
use semanon::manifest::{hash_outputs, FileHash, Manifest, MANIFEST_FILE};
use semanon::rng::derive_seed;
use semanon::training::Trainer;
use semanon::Error;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn worst(a: Option<Failure>, b: Failure) -> Failure {
        match a {
            Some(a) if a.code() >= b.code() => a,
            _ => b,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Argument(_) => Failure::Usage(msg),
            Error::Data(_) | Error::Io { .. } | Error::Json(_) => Failure::Data(msg),
            Error::Numerical(_) | Error::Domain(_) => Failure::Numerical(msg),
        }
    }
}

type JobResult<T> = Result<T, Failure>;

/// A fully resolved command, stored in the manifest for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Train { steps: u64 },
    Invert { images: Vec<PathBuf>, labels: Vec<PathBuf>, pair: bool },
    Anonymize { images: Vec<PathBuf>, labels: Vec<PathBuf>, pair: bool, from_latents: Option<PathBuf> },
    Evaluate { run: PathBuf },
    Sample { count: usize },
    PcaSweep { slot: AttributeSlot, frames: usize, extent: f64, samples: usize },
}

impl Job {
    fn verb(&self) -> &'static str {
        match self {
            Job::Train { .. } => "train",
            Job::Invert { .. } => "invert",
            Job::Anonymize { .. } => "anonymize",
            Job::Evaluate { .. } => "evaluate",
            Job::Sample { .. } => "sample",
            Job::PcaSweep { .. } => "pca-sweep",
        }
    }

    fn seed(&self, config: &RunConfig) -> u64 {
        match self {
            Job::Train { .. } => config.seeds.training,
            Job::Anonymize { .. } => config.seeds.anonymize,
            Job::Sample { .. } | Job::PcaSweep { .. } => config.seeds.sample,
            Job::Invert { .. } | Job::Evaluate { .. } => config.seeds.model,
        }
    }

    /// Files read by the job besides the checkpoint.
    fn input_files(&self) -> JobResult<Vec<PathBuf>> {
        Ok(match self {
            Job::Invert { images, labels, .. } => images.iter().chain(labels).cloned().collect(),
            Job::Anonymize { images, labels, from_latents, .. } => {
                images.iter().chain(labels).chain(from_latents).cloned().collect()
            }
            Job::Evaluate { run } => {
                let mut files: Vec<PathBuf> =
                    hash_outputs(run)?.into_iter().map(|f| run.join(f.path)).collect();
                files.push(run.join(MANIFEST_FILE));
                files
            }
            Job::Train { .. } | Job::Sample { .. } | Job::PcaSweep { .. } => Vec::new(),
        })
    }
}

fn prepare_out_dir(dir: &Path) -> JobResult<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        if entries.next().is_some() {
            return Err(Failure::Usage(format!("output directory {} is not empty", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn load_checkpoint(path: Option<&Path>, config: &RunConfig) -> JobResult<(Checkpoint, String)> {
    let ckpt = match path {
        Some(p) => Checkpoint::load(p)?,
        None => config.initial_checkpoint()?,
    };
    if ckpt.generator.config != config.generator {
        return Err(Failure::Usage("checkpoint generator configuration differs from the run configuration".into()));
    }
    let digest = sha256_hex(&ckpt.encode()?);
    Ok((ckpt, digest))
}

fn write_json(path: &Path, value: &impl Serialize) -> JobResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Runs `job` into `out_dir` and writes its manifest. Outputs of per-image
/// failures are skipped and the worst failure is returned after the manifest.
pub fn execute(job: &Job, config: &RunConfig, checkpoint: Option<&Path>, out_dir: &Path) -> JobResult<()> {
    prepare_out_dir(out_dir)?;
    let inputs = job
        .input_files()?
        .iter()
        .map(|p| FileHash::of(p, p.to_string_lossy()))
        .collect::<Result<Vec<_>, _>>()?;
    let ckpt_hash = checkpoint.map(|p| FileHash::of(p, p.to_string_lossy())).transpose()?;
    let (ckpt, digest) = load_checkpoint(checkpoint, config)?;
    info!("{} with checkpoint {digest}", job.verb());
    let outcome = match job {
        Job::Train { steps } => train(config, ckpt, *steps, out_dir),
        Job::Invert { images, labels, pair } => invert(config, &ckpt, &digest, images, labels, *pair, out_dir),
        Job::Anonymize { images, labels, pair, from_latents } => {
            anonymize(config, &ckpt, &digest, images, labels, *pair, from_latents.as_deref(), out_dir)
        }
        Job::Evaluate { run } => evaluate(config, run, out_dir),
        Job::Sample { count } => sample(config, &ckpt, *count, out_dir),
        Job::PcaSweep { slot, frames, extent, samples } => {
            pca_sweep(config, &ckpt, *slot, *frames, *extent, *samples, out_dir)
        }
    };
    let partial = outcome?;
    let manifest = Manifest {
        verb: job.verb().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        config_sha256: config.digest(),
        seed: job.seed(config),
        checkpoint: ckpt_hash,
        args: serde_json::to_value(job).map_err(Error::from)?,
        inputs,
        outputs: hash_outputs(out_dir)?,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    match partial {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

/// Re-runs a manifest into `out_dir` and compares output hashes.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> JobResult<()> {
    let manifest = Manifest::load(manifest_path)?;
    let job: Job = serde_json::from_value(manifest.args.clone())
        .map_err(|e| Failure::Data(format!("manifest arguments: {e}")))?;
    if job.verb() != manifest.verb {
        return Err(Failure::Data("manifest verb does not match its arguments".into()));
    }
    for recorded in manifest.inputs.iter().chain(&manifest.checkpoint) {
        let now = FileHash::of(Path::new(&recorded.path), recorded.path.clone())?;
        if now.sha256 != recorded.sha256 {
            return Err(Failure::Data(format!("input {} changed since the recorded run", recorded.path)));
        }
    }
    let checkpoint = manifest.checkpoint.as_ref().map(|f| PathBuf::from(&f.path));
    execute(&job, &manifest.config, checkpoint.as_deref(), out_dir)?;
    let bad = manifest.output_mismatches(&hash_outputs(out_dir)?);
    if !bad.is_empty() {
        return Err(Failure::Data(format!("replay differs from the recorded run: {}", bad.join("; "))));
    }
    println!("replay of {} reproduced {} outputs", manifest.verb, manifest.outputs.len());
    Ok(())
}

fn train(config: &RunConfig, mut ckpt: Checkpoint, steps: u64, out: &Path) -> JobResult<Option<Failure>> {
    let real = if config.training.adversarial.enabled {
        let path = config
            .paths
            .dataset
            .as_ref()
            .ok_or_else(|| Failure::Usage("adversarial training needs paths.dataset".into()))?;
        let index = semanon::dataset::DatasetIndex::load(path)?;
        index.entries.iter().map(|e| Image::load_png(&e.image)).collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(
        ckpt.generator.clone(),
        ckpt.mapping.clone(),
        config.encoders()?,
        config.training.clone(),
        config.seeds.training,
        real,
    )?;
    if let Some(h) = ckpt.heads.take() {
        trainer.set_heads(h);
    }
    if let Some(d) = ckpt.discriminator.take() {
        if trainer.model.discriminator.is_some() {
            trainer.model.discriminator = Some(d);
        }
    }
    trainer.step = ckpt.step;
    let mut log = String::new();
    for _ in 0..steps {
        let report = trainer.training_step()?;
        info!("step {} loss {:.6}", report.step, report.contrastive_total);
        log.push_str(&report.to_json_line());
        log.push('\n');
    }
    let path = out.join("train_log.jsonl");
    std::fs::write(&path, log).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let model = trainer.model;
    let w_mean =
        estimate_w_mean(derive_seed(config.seeds.model, "w-mean"), config.model.w_mean_samples, &model.mapping)?;
    let result = Checkpoint {
        generator: model.generator,
        mapping: model.mapping,
        heads: Some(model.heads),
        discriminator: model.discriminator,
        w_mean,
        layout: ckpt.layout,
        step: trainer.step,
        config: serde_json::to_value(config).map_err(Error::from)?,
    };
    result.save(&out.join("checkpoint.bin"))?;
    Ok(None)
}

fn load_inputs(config: &RunConfig, images: &[PathBuf], labels: &[PathBuf], res: usize) -> JobResult<Vec<(Image, LabelMap)>> {
    let table = config.label_table()?;
    let layout = semanon::latent::SemanticLayout::default();
    images
        .iter()
        .zip(labels)
        .map(|(ip, lp)| {
            let image = Image::load_png(ip)?;
            let labels = load_label_map(lp, &table, &layout)?.labels;
            if image.height != res || image.width != res || labels.height != res || labels.width != res {
                return Err(Failure::Data(format!("{} and its labels must be {res}x{res}", ip.display())));
            }
            Ok((image, labels))
        })
        .collect()
}

fn invert(
    config: &RunConfig,
    ckpt: &Checkpoint,
    digest: &str,
    images: &[PathBuf],
    labels: &[PathBuf],
    pair: bool,
    out: &Path,
) -> JobResult<Option<Failure>> {
    let anonymizer = config.anonymizer(ckpt)?;
    let inputs = load_inputs(config, images, labels, ckpt.generator.resolution())?;
    let (latents, diverged) = if pair {
        let (l, d) = anonymizer.invert_paired([&inputs[0].0, &inputs[1].0], [&inputs[0].1, &inputs[1].1])?;
        (l.to_vec(), d)
    } else {
        let results: Vec<_> = inputs.par_iter().map(|(i, l)| anonymizer.invert_single(i, l)).collect();
        let mut latents = Vec::new();
        let mut diverged = false;
        for r in results {
            let (w, d) = r?;
            latents.push(w);
            diverged |= d;
        }
        (latents, diverged)
    };
    if diverged {
        warn!("inversion diverged; kept the best finite iterate");
    }
    let mut psnr = Vec::new();
    for (i, (w, (image, _))) in latents.iter().zip(&inputs).enumerate() {
        let recon = ckpt.generator.generate(w)?;
        recon.image.save_png(&out.join(format!("img{i}_recon.png")))?;
        psnr.push(reconstruction_psnr(image, &recon.image)?);
    }
    let stored = StoredLatents { latents, diverged, checkpoint_digest: digest.to_string() };
    stored.to_tensor_file(&ckpt.generator.config.latent)?.save(&out.join("latents.bin"))?;
    write_json(&out.join("inversion.json"), &json!({ "paired": pair, "diverged": diverged, "psnr": psnr }))?;
    Ok(None)
}

#[derive(Serialize)]
struct RunRecord {
    images: Vec<usize>,
    report: ProvenanceReport,
}

#[derive(Serialize)]
struct FailureRecord {
    image: usize,
    error: String,
}

#[allow(clippy::too_many_arguments)]
fn anonymize(
    config: &RunConfig,
    ckpt: &Checkpoint,
    digest: &str,
    images: &[PathBuf],
    labels: &[PathBuf],
    pair: bool,
    from_latents: Option<&Path>,
    out: &Path,
) -> JobResult<Option<Failure>> {
    let anonymizer = config.anonymizer(ckpt)?;
    let inputs = load_inputs(config, images, labels, ckpt.generator.resolution())?;
    let stored = match from_latents {
        Some(p) => {
            let file = semanon::checkpoint::TensorFile::load(p)?;
            let s = StoredLatents::from_tensor_file(file, &ckpt.generator.config.latent)?;
            if s.checkpoint_digest != digest {
                return Err(Failure::Data(format!("{} was inverted with a different checkpoint", p.display())));
            }
            if s.latents.len() != inputs.len() {
                return Err(Failure::Data(format!("{} holds {} latents for {} images", p.display(), s.latents.len(), inputs.len())));
            }
            Some(s)
        }
        None => None,
    };
    let seed = config.seeds.anonymize;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut worst = None;
    if pair {
        let request = config.request.request(Arity::Paired, seed);
        let [(ia, la), (ib, lb)] = [&inputs[0], &inputs[1]];
        let result = match &stored {
            Some(s) => anonymizer.anonymize_paired_from_latents(
                [ia, ib],
                [la, lb],
                [s.latents[0].clone(), s.latents[1].clone()],
                s.diverged,
                &request,
            ),
            None => anonymizer.anonymize_paired([ia, ib], [la, lb], &request),
        }?;
        write_result(&anonymizer, &result, &[0, 1], &inputs, out)?;
        runs.push(RunRecord { images: vec![0, 1], report: result.report });
    } else {
        let results: Vec<_> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, (image, lab))| {
                let request = config.request.request(Arity::Single, derive_seed(seed, &format!("image/{i}")));
                match &stored {
                    Some(s) => anonymizer.anonymize_single_from_latent(image, lab, s.latents[i].clone(), s.diverged, &request),
                    None => anonymizer.anonymize_single(image, lab, &request),
                }
            })
            .collect();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(result) => {
                    write_result(&anonymizer, &result, &[i], &inputs, out)?;
                    runs.push(RunRecord { images: vec![i], report: result.report });
                }
                Err(e) => {
                    error!("image {i} ({}): {e}", images[i].display());
                    failures.push(FailureRecord { image: i, error: e.to_string() });
                    worst = Some(Failure::worst(worst, e.into()));
                }
            }
        }
    }
    write_json(&out.join("report.json"), &json!({ "runs": runs, "failures": failures }))?;
    Ok(worst)
}

fn write_result(
    anonymizer: &Anonymizer,
    result: &AnonymizationResult,
    indices: &[usize],
    inputs: &[(Image, LabelMap)],
    out: &Path,
) -> JobResult<()> {
    for (j, &i) in indices.iter().enumerate() {
        result.outputs[j].save_png(&out.join(format!("img{i}_anon.png")))?;
        result.plans[j].m_real.save_png(&out.join(format!("img{i}_preserved.png")))?;
        result.plans[j].m_inp.save_png(&out.join(format!("img{i}_blend.png")))?;
        let synthetic = anonymizer.generator.generate(&result.anonymized[j])?.labels();
        let (_, input_labels) = &inputs[i];
        let data = (0..synthetic.data.len())
            .map(|p| if result.plans[j].m_real.data[p] { input_labels.data[p] } else { synthetic.data[p] })
            .collect();
        LabelMap::new(synthetic.height, synthetic.width, data)?.save_png(&out.join(format!("img{i}_labels.png")))?;
    }
    Ok(())
}

fn read_png(path: &Path) -> JobResult<Image> {
    Ok(Image::load_png(path)?)
}

fn evaluate(config: &RunConfig, run: &Path, out: &Path) -> JobResult<Option<Failure>> {
    let manifest = Manifest::load(&run.join(MANIFEST_FILE))?;
    let job: Job = serde_json::from_value(manifest.args.clone()).map_err(|e| Failure::Data(e.to_string()))?;
    let Job::Anonymize { images, labels, pair, .. } = job else {
        return Err(Failure::Usage(format!("{} is not an anonymize run", run.display())));
    };
    let res = manifest.config.generator.resolution();
    let inputs = load_inputs(&manifest.config, &images, &labels, res)?;
    let report: Value = serde_json::from_slice(
        &std::fs::read(run.join("report.json")).map_err(|e| Failure::Data(format!("report.json: {e}")))?,
    )
    .map_err(|e| Failure::Data(format!("report.json: {e}")))?;
    let embedder = config.face_embedder()?;
    let landmarks = CentroidLandmarks { grid: 4 };
    let mut table = MetricTable::new(&["image", "l1", "psnr", "iou", "landmark_offset", "embedding_distance"]);
    let mut pairs = Vec::new();
    let mut originals = Vec::new();
    let mut outputs = Vec::new();
    for (i, (image, _)) in inputs.iter().enumerate() {
        let anon_path = run.join(format!("img{i}_anon.png"));
        if !anon_path.exists() {
            warn!("no output for image {i}; skipped");
            continue;
        }
        let anon = read_png(&anon_path)?;
        let preserved = MaskImage::decode_png(
            &std::fs::read(run.join(format!("img{i}_preserved.png"))).map_err(|e| Failure::Data(e.to_string()))?,
        )?;
        let out_labels = LabelMap::decode_png(
            &std::fs::read(run.join(format!("img{i}_labels.png"))).map_err(|e| Failure::Data(e.to_string()))?,
        )?;
        let components = preserved_components(&report, i);
        let (l1, psnr) = if preserved.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (region_l1(image, &anon, &preserved)?, region_psnr(image, &anon, &preserved)?)
        };
        let iou = mask_iou(&inputs[i].1.mask_of(&components), &out_labels.mask_of(&components))?;
        let offset = mean_landmark_offset(&landmarks.detect(image)?, &landmarks.detect(&anon)?)?;
        let dist = embedding_distance(&embedder, image, &anon)?;
        table.push(format!("img{i}"), vec![l1, psnr, iou, offset, dist])?;
        pairs.push((image.clone(), anon.clone()));
        originals.push(image.clone());
        outputs.push(anon);
    }
    if pairs.is_empty() {
        return Err(Failure::Data("the run has no outputs to evaluate".into()));
    }
    let deid = semanon::evaluation::deid_rate(&pairs, &embedder)?;
    let within_pair = if pair && outputs.len() == 2 {
        let anon = [(outputs[0].clone(), outputs[1].clone())];
        let input = [(originals[0].clone(), originals[1].clone())];
        Some(pair_consistency(&anon, &input, &embedder)?)
    } else {
        None
    };
    let frechet = if originals.len() >= 2 {
        let features = semanon::encoder::StubEncoder::for_slot(
            derive_seed(config.seeds.model, "frechet"),
            AttributeSlot::Identity,
            res,
        )?;
        Some(image_frechet_distance(&originals, &outputs, &features)?)
    } else {
        None
    };
    write_json(
        &out.join("metrics.json"),
        &json!({
            "deid_rate": deid,
            "match_threshold": embedder.match_threshold(),
            "pair_consistency": within_pair,
            "frechet_distance": frechet,
            "per_image": table,
        }),
    )?;
    let path = out.join("metrics.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(None)
}

/// Indices of the preserved components recorded for image `i` in a report.
fn preserved_components(report: &Value, i: usize) -> Vec<usize> {
    let layout = semanon::latent::SemanticLayout::default();
    let runs = report["runs"].as_array().cloned().unwrap_or_default();
    runs.iter()
        .find(|r| r["images"].as_array().is_some_and(|a| a.iter().any(|v| v.as_u64() == Some(i as u64))))
        .and_then(|r| r["report"]["preserved_components"].as_array().cloned())
        .unwrap_or_default()
        .iter()
        .filter_map(|n| n.as_str().and_then(|n| layout.index_of(n).ok()))
        .collect()
}

fn sample(config: &RunConfig, ckpt: &Checkpoint, count: usize, out: &Path) -> JobResult<Option<Failure>> {
    let outputs: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| {
            let z = sample_latent(derive_seed(config.seeds.sample, &format!("sample/{i}")), &config.generator.latent)?;
            ckpt.generator.generate(&ckpt.mapping.map_to_w(&z)?)
        })
        .collect();
    for (i, o) in outputs.into_iter().enumerate() {
        let o = o?;
        o.image.save_png(&out.join(format!("sample{i}.png")))?;
        o.labels().save_png(&out.join(format!("sample{i}_labels.png")))?;
    }
    Ok(None)
}

fn pca_sweep(
    config: &RunConfig,
    ckpt: &Checkpoint,
    slot: AttributeSlot,
    frames: usize,
    extent: f64,
    samples: usize,
    out: &Path,
) -> JobResult<Option<Failure>> {
    if frames < 2 {
        return Err(Failure::Usage("a sweep needs at least two frames".into()));
    }
    let seed = config.seeds.sample;
    let globals = (0..samples)
        .map(|i| {
            let z = sample_latent(derive_seed(seed, &format!("pca/{i}")), &config.generator.latent)?;
            Ok::<_, Error>(ckpt.mapping.map_to_w(&z)?.global)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pca = slot_pca_directions(&globals, slot, 1)?;
    if pca.directions.is_empty() {
        return Err(Failure::Numerical(format!("slot {slot} has no variance to sweep")));
    }
    let (dir, std) = (&pca.directions[0], pca.variances[0].sqrt());
    let base = ckpt.mapping.map_to_w(&sample_latent(derive_seed(seed, "pca/base"), &config.generator.latent)?)?;
    let mut alphas = Vec::new();
    for f in 0..frames {
        let alpha = extent * std * (2.0 * f as f64 / (frames - 1) as f64 - 1.0);
        let code: Vec<f64> = base.global.slot(slot).iter().zip(dir).map(|(b, d)| b + alpha * d).collect();
        let w = substitute_slot(&base, slot, &code)?;
        ckpt.generator.generate(&w)?.image.save_png(&out.join(format!("frame{f}.png")))?;
        alphas.push(alpha);
    }
    write_json(
        &out.join("sweep.json"),
        &json!({ "slot": slot, "variance": pca.variances[0], "alphas": alphas, "degenerate": pca.degenerate }),
    )?;
    Ok(None)
}
