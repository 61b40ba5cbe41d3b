//! Subcommand bodies. Every output directory gets a `run.json` sidecar holding
//! the resolved configuration and inputs, enough to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchorprop::container::{self, Tensor};
use anchorprop::equivariance::{emit_augmented_dataset, flip_horizontal, invert, verify_equivariance, Image};
use anchorprop::metrics::{embed_frames, Embedder, MetricsReport, PrecomputedEmbedder, ToyEmbedder};
use anchorprop::propagation::{frames_from_tensor, frames_to_tensor};
use anchorprop::synth::SyntheticClip;
use anchorprop::tracking::evaluate_tracking;
use anchorprop::{edit_video, generate_clip, run_parallel, FrameFeatures, Mode, ToyEditNetwork};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{CommonArgs, RunConfig};
use crate::CliError;

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    inputs: Value,
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output).map_err(|e| CliError::Data(format!("{}: {e}", cfg.output.display())))?;
    Ok(cfg.output.clone())
}

fn write_record(dir: &Path, command: &str, cfg: &RunConfig, inputs: Value) -> Result<(), CliError> {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        inputs,
    };
    fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn load_clip(dir: &Path) -> Result<SyntheticClip, CliError> {
    SyntheticClip::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Takes the token grid and dim from the data and revalidates.
fn adopt_shape(cfg: &mut RunConfig, frames: &[FrameFeatures]) -> Result<(), CliError> {
    let first = frames.first().ok_or(CliError::Data("input has no frames".into()))?;
    cfg.network.grid_h = first.grid_h;
    cfg.network.grid_w = first.grid_w;
    cfg.network.dim = first.dim();
    cfg.frames = frames.len();
    cfg.anchors = cfg.anchors.min(frames.len());
    cfg.network_config().validate()?;
    Ok(())
}

pub fn gen(common: &CommonArgs, render: Option<usize>) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    if render.is_some() {
        cfg.clip.render_images = render;
        cfg.validate()?;
    }
    let clip = generate_clip(&cfg.clip_spec())?;
    let out = prepare_output(&cfg)?;
    clip.save(&out)?;
    write_record(&out, "gen", &cfg, json!({}))?;
    println!("wrote {} frames to {}", clip.n_frames(), out.display());
    Ok(())
}

pub fn track(common: &CommonArgs, clip_dir: &Path) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    let clip = load_clip(clip_dir)?;
    adopt_shape(&mut cfg, &clip.frames)?;
    cfg.clip.image_size = clip.spec.image_size;
    cfg.tracking.image_size = clip.spec.image_size;
    let net = ToyEditNetwork::new(cfg.network_config())?;
    let table = evaluate_tracking(&clip, &net, &cfg.tracking)?;
    let out = prepare_output(&cfg)?;
    table.write_csv(out.join("tracking.csv"))?;
    write_record(&out, "track", &cfg, json!({ "clip": clip_dir }))?;
    println!(
        "wrote {} rows to {}",
        table.rows.len(),
        out.join("tracking.csv").display()
    );
    Ok(())
}

pub fn edit(common: &CommonArgs, clip_dir: &Path) -> Result<(), CliError> {
    let mut cfg = common.resolve()?;
    let clip = load_clip(clip_dir)?;
    adopt_shape(&mut cfg, &clip.frames)?;
    let net = ToyEditNetwork::new(cfg.network_config())?;
    let video = match cfg.mode {
        Mode::Independent => edit_video(&clip.frames, &net, Mode::Independent, cfg.anchors)?,
        Mode::Anchored => run_parallel(&clip.frames, &net, cfg.anchors, cfg.workers)?,
    };
    let out = prepare_output(&cfg)?;
    video.save(&out)?;
    write_record(&out, "edit", &cfg, json!({ "clip": clip_dir }))?;
    println!("edited {} frames into {}", video.frames.len(), out.display());
    Ok(())
}

fn load_images(path: &Path) -> Result<Vec<Image>, CliError> {
    let t = container::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let (n, h, w, c) = match t.dims[..] {
        [n, h, w, c] => (n, h, w, c),
        [h, w, c] => (1, h, w, c),
        _ => {
            return Err(CliError::Data(format!(
                "{}: expected 3 or 4 dims, got {:?}",
                path.display(),
                t.dims
            )))
        }
    };
    let per = h * w * c;
    (0..n)
        .map(|i| Image::new(h, w, c, t.data[i * per..(i + 1) * per].to_vec()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn contrast(img: &Image) -> Image {
    let pixels = img.pixels().iter().map(|p| 0.5 + 0.8 * (p - 0.5)).collect();
    Image::new(img.height, img.width, img.channels, pixels).expect("contrast keeps values in range")
}

fn editor(name: &str) -> Result<fn(&Image) -> Image, CliError> {
    match name {
        "identity" => Ok(|img: &Image| img.clone()),
        "invert" => Ok(invert),
        "contrast" => Ok(contrast),
        "flip" => Ok(flip_horizontal),
        other => Err(CliError::Usage(format!(
            "unknown editor {other:?}; expected identity, invert, contrast or flip"
        ))),
    }
}

pub fn augment(common: &CommonArgs, src: &Path, edited: Option<&Path>, editor_name: &str) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let sources = load_images(src)?;
    let targets = match edited {
        Some(path) => load_images(path)?,
        None => sources.iter().map(editor(editor_name)?).collect(),
    };
    if targets.len() != sources.len() {
        return Err(CliError::Data(format!(
            "{} source images but {} edited images",
            sources.len(),
            targets.len()
        )));
    }
    let pairs: Vec<_> = sources.into_iter().zip(targets).collect();
    let out = prepare_output(&cfg)?;
    let entries = emit_augmented_dataset(&pairs, cfg.seed, &cfg.augment, &out)?;
    let inputs = match edited {
        Some(path) => json!({ "src": src, "edited": path }),
        None => json!({ "src": src, "editor": editor_name }),
    };
    write_record(&out, "augment", &cfg, inputs)?;
    println!("wrote {} augmented pairs to {}", entries.len(), out.display());
    Ok(())
}

pub fn verify(common: &CommonArgs, src: &Path, editor_name: &str, trials: usize, tol: f64) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let edit = editor(editor_name)?;
    if trials == 0 || !(tol.is_finite() && tol >= 0.0) {
        return Err(CliError::Usage(
            "--trials must be positive and --tol non-negative".into(),
        ));
    }
    let images = load_images(src)?;
    let reports = images
        .iter()
        .map(|img| verify_equivariance(&edit, img, trials, tol, cfg.seed, &cfg.augment))
        .collect::<Result<Vec<_>, _>>()?;
    let max = reports.iter().map(|r| r.max).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.pass);
    let out = prepare_output(&cfg)?;
    let summary =
        json!({ "editor": editor_name, "trials": trials, "tol": tol, "max": max, "pass": pass, "images": reports });
    fs::write(out.join("equivariance.json"), serde_json::to_vec_pretty(&summary)?)?;
    write_record(
        &out,
        "verify-equivariance",
        &cfg,
        json!({ "src": src, "editor": editor_name }),
    )?;
    println!("editor {editor_name}: max deviation {max:.3e} (tol {tol:.1e})");
    if pass {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "editor {editor_name} deviates by {max:.3e}, above {tol:.1e}"
        )))
    }
}

fn load_frames(path: &Path) -> Result<Vec<FrameFeatures>, CliError> {
    let file = if path.is_dir() {
        ["frames.apft", "features.apft"]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .ok_or(CliError::Data(format!(
                "{}: no frames.apft or features.apft",
                path.display()
            )))?
    } else {
        path.to_path_buf()
    };
    let t = container::read(&file).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    Ok(frames_from_tensor(&t)?)
}

fn load_refs(path: &Path, dim: usize) -> Result<(Vec<f32>, Vec<f32>), CliError> {
    let t = container::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if t.dims != [2, dim] {
        return Err(CliError::Data(format!(
            "{}: expected dims [2, {dim}], got {:?}",
            path.display(),
            t.dims
        )));
    }
    Ok((t.data[..dim].to_vec(), t.data[dim..].to_vec()))
}

pub fn metrics(
    common: &CommonArgs,
    input: &Path,
    embeddings: Option<&Path>,
    refs: Option<&Path>,
    embed_seed: Option<u64>,
    embed_dim: usize,
) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    let frames = load_frames(input)?;
    let (embedder, emb_desc): (Box<dyn Embedder>, Value) = match embeddings {
        Some(path) => (
            Box::new(PrecomputedEmbedder::load(path)?),
            json!({ "precomputed": path }),
        ),
        None => {
            if embed_dim == 0 {
                return Err(CliError::Usage("--embed-dim must be positive".into()));
            }
            let toy = ToyEmbedder {
                seed: embed_seed.unwrap_or(cfg.seed),
                out_dim: embed_dim,
            };
            (Box::new(toy), json!({ "toy": toy }))
        }
    };
    let vectors = embed_frames(&frames, embedder.as_ref())?;
    let ref_vectors = refs.map(|p| load_refs(p, embedder.out_dim())).transpose()?;
    let provenance = json!({ "input": input, "embedder": emb_desc, "refs": refs });
    let report = MetricsReport::compute(
        &vectors,
        ref_vectors.as_ref().map(|(s, t)| (s.as_slice(), t.as_slice())),
        provenance,
    )?;
    let out = prepare_output(&cfg)?;
    report.write_json(out.join("metrics.json"))?;
    fs::write(out.join("pairs.csv"), report.pairs_csv())?;
    write_record(
        &out,
        "metrics",
        &cfg,
        json!({ "input": input, "embeddings": embeddings, "refs": refs }),
    )?;
    println!("tem_con {:.6}", report.tem_con);
    if let Some(acc) = report.frame_acc {
        println!("frame_acc {acc:.6}");
    }
    Ok(())
}

pub fn bench(common: &CommonArgs, worker_counts: &[usize]) -> Result<(), CliError> {
    let cfg = common.resolve()?;
    if worker_counts.is_empty() || worker_counts.contains(&0) {
        return Err(CliError::Usage("--worker-counts needs positive values".into()));
    }
    let net = ToyEditNetwork::new(cfg.network_config())?;
    let clip = generate_clip(&cfg.clip_spec())?;
    let mut runs = Vec::new();
    let mut reference: Option<Tensor> = None;
    let mut baseline = None;
    for &workers in worker_counts {
        let start = Instant::now();
        let video = run_parallel(&clip.frames, &net, cfg.anchors, workers)?;
        let seconds = start.elapsed().as_secs_f64();
        let t = frames_to_tensor(&video.frames)?;
        let identical = match &reference {
            Some(r) => container::encode(r) == container::encode(&t),
            None => {
                reference = Some(t);
                true
            }
        };
        let base = *baseline.get_or_insert(seconds);
        runs.push(json!({
            "workers": workers,
            "wall_ms": seconds * 1e3,
            "frames": cfg.frames,
            "frames_per_sec": cfg.frames as f64 / seconds,
            "speedup": base / seconds,
            "identical_to_first": identical,
        }));
    }
    let report = json!({
        "cores": std::thread::available_parallelism().map_or(1, |n| n.get()),
        "frames": cfg.frames,
        "anchors": cfg.anchors,
        "config_hash": net.config_hash(),
        "runs": runs,
    });
    let out = prepare_output(&cfg)?;
    fs::write(out.join("bench.json"), serde_json::to_vec_pretty(&report)?)?;
    write_record(&out, "bench", &cfg, json!({ "worker_counts": worker_counts }))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
