//! One function per subcommand. Every artifact lands under the chosen
//! output directory, next to a `config.toml` snapshot of the resolved run.

use std::path::{Path, PathBuf};

use swingrade::config::NUM_GRADES;
use swingrade::data::synth::generate;
use swingrade::data::{load_images, save_gray_png, DatasetManifest, ManifestRow, Sample, Split};
use swingrade::eval::gradcam::{gradcam, write_f32_sidecar, write_pgm};
use swingrade::eval::tsne::{tsne_2d, TsneOptions};
use swingrade::eval::extract_embeddings;
use swingrade::gradcheck;
use swingrade::model::Model;
use swingrade::rng::stream_seed;
use swingrade::train::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use swingrade::train::experiment::{run_experiment, ExperimentSpec};
use swingrade::train::{evaluate, TrainHistory};

use crate::config::RunConfig;
use crate::CliError;

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))
}

fn io_runtime(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("cannot write {}: {e}", path.display()))
}

/// Images from the configured manifest when set, otherwise generated in
/// memory. Generator warnings (e.g. tiny splits) go to stderr.
fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>, CliError> {
    match &cfg.manifest {
        Some(path) => {
            let manifest = DatasetManifest::load(path).map_err(CliError::validation)?;
            let base = path.parent().unwrap_or(Path::new("."));
            load_images(&manifest, base, cfg.model.image_size).map_err(CliError::runtime)
        }
        None => {
            let (samples, warnings) = generate(&cfg.synth).map_err(CliError::validation)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            Ok(samples)
        }
    }
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let (model, _, _) = load_checkpoint(path).map_err(CliError::runtime)?;
    Ok(model)
}

/// Generate the two-site dataset as PNGs plus a manifest describing them.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let img_dir = out.join("images");
    ensure_out(&img_dir)?;

    let (samples, warnings) = generate(&cfg.synth).map_err(CliError::validation)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("images/{}.png", s.id);
        save_gray_png(&out.join(&rel), &s.image, s.height, s.width)
            .map_err(CliError::runtime)?;
        rows.push(ManifestRow {
            path: rel,
            grade: s.grade,
            site: s.site,
            split: s.split,
        });
    }
    let manifest = DatasetManifest { rows };
    manifest.save(&out.join("manifest.csv")).map_err(CliError::runtime)?;
    cfg.snapshot(out)?;

    let count = |split: Split| samples.iter().filter(|s| s.split == split).count();
    println!(
        "wrote {} images ({} train / {} val / {} test) and manifest.csv to {}",
        samples.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

/// Train the configured protocol and save the model, per-epoch history,
/// and test metrics for both sites.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    cfg.snapshot(out)?;

    let p1 = cfg.phase_epochs[0];
    let p2 = cfg.phase_epochs.get(1).copied().unwrap_or(0);
    let spec =
        ExperimentSpec::standard(cfg.experiment, p1, p2).map_err(CliError::validation)?;
    let samples = load_samples(cfg)?;
    let settings = cfg.train_settings(0);

    let (model, outcome) =
        run_experiment(&spec, &cfg.model, &samples, &settings, cfg.seed)
            .map_err(CliError::runtime)?;

    let mut history = TrainHistory::default();
    for phase in &outcome.phases {
        history.extend(phase.history.clone());
    }
    let hist_path = out.join("history.csv");
    history.write_csv(&hist_path).map_err(io_runtime(&hist_path))?;

    let last = outcome.phases.last().expect("protocol has at least one phase");
    let src_path = out.join("metrics_source.json");
    let tgt_path = out.join("metrics_target.json");
    std::fs::write(&src_path, last.source_test.to_json()).map_err(io_runtime(&src_path))?;
    std::fs::write(&tgt_path, last.target_test.to_json()).map_err(io_runtime(&tgt_path))?;

    let meta = CheckpointMeta {
        config: model.config.clone(),
        experiment_id: Some(cfg.experiment),
        epoch: Some(history.records.len()),
        seed: cfg.seed,
        optimizer: None,
    };
    let ckpt = out.join("checkpoint.swkt");
    save_checkpoint(&model, &meta, None, &ckpt).map_err(CliError::runtime)?;

    for (i, phase) in outcome.phases.iter().enumerate() {
        println!(
            "phase {}: source test acc {:.3} macro-F1 {:.3} | target test acc {:.3} macro-F1 {:.3}",
            i + 1,
            phase.source_test.accuracy,
            phase.source_test.macro_f1,
            phase.target_test.accuracy,
            phase.target_test.macro_f1,
        );
    }
    println!("saved checkpoint, history.csv, and metrics to {}", out.display());
    Ok(())
}

/// Score a checkpoint on the test split, overall and per site.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    cfg.snapshot(out)?;

    let model = load_model(checkpoint)?;
    let samples = load_samples(cfg)?;
    let test: Vec<Sample> =
        samples.into_iter().filter(|s| s.split == Split::Test).collect();

    let mut report = serde_json::Map::new();
    let mut insert = |key: &str, subset: &[Sample]| -> Result<(), CliError> {
        let metrics = evaluate(&model, subset, cfg.batch_size).map_err(CliError::runtime)?;
        println!(
            "{key}: n {} accuracy {:.3} macro-F1 {:.3}",
            subset.len(),
            metrics.accuracy,
            metrics.macro_f1
        );
        let value: serde_json::Value = serde_json::from_str(&metrics.to_json())
            .map_err(|e| CliError::runtime(format!("metrics serialization: {e}")))?;
        report.insert(key.to_string(), value);
        Ok(())
    };
    insert("overall", &test)?;
    for site in [swingrade::data::Site::Source, swingrade::data::Site::Target] {
        let subset: Vec<Sample> = test.iter().filter(|s| s.site == site).cloned().collect();
        insert(site.as_str(), &subset)?;
    }

    let path = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report))
        .map_err(|e| CliError::runtime(format!("metrics serialization: {e}")))?;
    std::fs::write(&path, text).map_err(io_runtime(&path))?;
    println!("wrote metrics.json to {}", out.display());
    Ok(())
}

/// Export pooled encoder features as TSV, optionally with a 2-D t-SNE
/// projection of the same rows.
pub fn cmd_embed(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    split: Option<Split>,
    tsne: bool,
    perplexity: f64,
) -> Result<(), CliError> {
    ensure_out(out)?;
    cfg.snapshot(out)?;

    let model = load_model(checkpoint)?;
    let samples: Vec<Sample> = load_samples(cfg)?
        .into_iter()
        .filter(|s| split.is_none_or(|want| s.split == want))
        .collect();
    let mut set =
        extract_embeddings(&model, &samples, cfg.batch_size).map_err(CliError::runtime)?;

    if tsne {
        let opts = TsneOptions {
            perplexity,
            seed: stream_seed(cfg.seed, "tsne"),
            ..TsneOptions::default()
        };
        let proj = tsne_2d(&set.matrix_f64(), set.len(), set.dim, &opts)
            .map_err(CliError::validation)?;
        set.projection = Some(proj);
    }

    let path = out.join(if tsne { "tsne.tsv" } else { "embeddings.tsv" });
    set.write_tsv(&path).map_err(io_runtime(&path))?;
    println!("wrote {} rows to {}", set.len(), path.display());
    Ok(())
}

/// Saliency heatmap for one image: PGM preview plus raw f32 values.
pub fn cmd_gradcam(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    image_path: &Path,
    class: Option<usize>,
) -> Result<(), CliError> {
    if let Some(c) = class {
        if c >= NUM_GRADES {
            return Err(CliError::validation(format!(
                "class {c} out of range 0–{}",
                NUM_GRADES - 1
            )));
        }
    }
    ensure_out(out)?;
    cfg.snapshot(out)?;

    let model = load_model(checkpoint)?;
    let size = model.config.image_size;
    let image = load_rgb_image(image_path, size)?;

    let class = match class {
        Some(c) => c,
        None => model
            .predict(&image, 1)
            .map_err(CliError::runtime)?[0],
    };
    let map = gradcam(&model, &image, class).map_err(CliError::runtime)?;

    let pgm = out.join("cam.pgm");
    write_pgm(&pgm, &map.heatmap, map.height, map.width).map_err(io_runtime(&pgm))?;
    let raw = out.join("cam.f32");
    write_f32_sidecar(&raw, &map.heatmap).map_err(io_runtime(&raw))?;
    println!(
        "class {class}: wrote {}x{} heatmap to {} (raw grid {}x{})",
        map.width,
        map.height,
        pgm.display(),
        map.side,
        map.side
    );
    Ok(())
}

/// Decode a PNG/JPEG to the row-major RGB float layout the model expects.
fn load_rgb_image(path: &Path, size: usize) -> Result<Vec<f32>, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::validation(format!("cannot open {}: {e}", path.display())))?;
    let resized = image::imageops::resize(
        &img.to_rgb8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(resized.into_raw().iter().map(|&v| v as f32 / 255.0).collect())
}

/// Compare analytic gradients against finite differences on random probes.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    samples: usize,
    tolerance: f64,
) -> Result<(), CliError> {
    let report = gradcheck::run(
        &cfg.model,
        stream_seed(cfg.seed, "gradcheck"),
        samples,
        tolerance,
    )
    .map_err(CliError::runtime)?;

    println!("{:<44} {:>12} {:>12} {:>10}", "parameter", "analytic", "numeric", "rel_err");
    for e in &report.entries {
        println!(
            "{:<44} {:>12.6} {:>12.6} {:>10.2e}",
            e.name, e.analytic, e.numeric, e.rel_error
        );
    }
    let max = report.max_rel_error();
    if report.passed() {
        println!("PASS: max relative error {max:.2e} <= {:.2e}", report.tolerance);
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "FAIL: max relative error {max:.2e} > {:.2e}",
            report.tolerance
        )))
    }
}

/// Shared output-directory resolution: flag wins, else error (commands that
/// write artifacts cannot run without a destination).
pub fn require_out(out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| CliError::validation("--out <dir> is required for this command"))
}
