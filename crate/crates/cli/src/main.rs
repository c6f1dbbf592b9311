mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use snp_core::evaluator::{
    attention_similarity, bench, count_costs, count_costs_against, csv_string, pgm_bytes, rollout_map,
};
use snp_core::graph::{validate_plan, PrunePlan};
use snp_core::importance::{importance_table, Criterion, ImportanceTable};
use snp_core::model::{
    attention_rollout, forward, load_calibration, load_model, model_to_bytes, preset, save_calibration,
    save_model, synth_calibration, synth_model, CalibrationSet, ModelBundle,
};
use snp_core::pruner::{apply_mask, apply_plan, make_plan_with_heads, RatioSpec};
use snp_core::{Error, Result, Tensor};

use manifest::{canonical, RunManifest};

const VALIDATION_FAILED: u8 = 2;
const FORMAT_ERROR: u8 = 3;
const ARGUMENT_ERROR: u8 = 4;

#[derive(Parser)]
#[command(name = "snp", version, about = "Structured neuron-level pruning for ViT models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a random-weight model for a preset architecture.
    Synth {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a set of random calibration images sized for a model.
    Calib {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every prune group.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value = "snp")]
        criterion: String,
        /// Singular components per head; defaults to the token count.
        #[arg(long)]
        rank: Option<usize>,
        /// Calibration images to use; defaults to 64 or the whole set if smaller.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a plan from an importance table and slice the model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        importance: PathBuf,
        /// JSON ratio spec; individual flags override its fields.
        #[arg(long)]
        ratios: Option<PathBuf>,
        #[arg(long)]
        qk: Option<f64>,
        #[arg(long)]
        v: Option<f64>,
        #[arg(long)]
        ffn: Option<f64>,
        #[arg(long)]
        embed: Option<f64>,
        #[arg(long)]
        heads: Option<f64>,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a pruned model against the zero-mask simulation of its plan.
    Validate {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// FLOPs and parameter counts.
    Flops {
        #[arg(long)]
        model: PathBuf,
        /// Report per-group pruning ratios against this model.
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Single-threaded latency of forward passes.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
        #[arg(long, default_value_t = 200)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Attention rollout of one calibration image as PGM and CSV.
    Attmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output prefix; writes `<out>.pgm` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the run recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn emit(manifest: &RunManifest, result: Value, manifest_next_to: Option<&Path>) -> Result<()> {
    if let Some(p) = manifest_next_to {
        write(&with_suffix(p, ".manifest.json"), canonical(manifest) + "\n")?;
    }
    stdout(&(canonical(&json!({ "manifest": manifest, "result": result })) + "\n"));
    Ok(())
}

/// A closed pipe on stdout is not an error worth reporting.
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn load_calib_for(path: &Path, model: &ModelBundle) -> Result<CalibrationSet> {
    let set = load_calibration(path)?;
    let cfg = model.config();
    if (set.channels, set.height, set.width) != (cfg.in_channels, cfg.image_size, cfg.image_size) {
        return Err(Error::Argument(format!(
            "calibration images are {}×{}×{}, model expects {}×{}×{}",
            set.channels, set.height, set.width, cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    Ok(set)
}

fn take_images(set: &CalibrationSet, requested: Option<usize>, default: usize) -> Result<&[Tensor]> {
    let n = match requested {
        Some(n) if n == 0 || n > set.images.len() => {
            return Err(Error::Argument(format!(
                "--images {n} outside [1, {}] for this calibration set",
                set.images.len()
            )))
        }
        Some(n) => n,
        None => default.min(set.images.len()),
    };
    Ok(&set.images[..n])
}

fn json_value(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("plain data")
}

/// Returns the exit status for a command that ran to completion.
fn run(argv: &[String]) -> Result<u8> {
    let mut full = vec!["snp".to_string()];
    full.extend_from_slice(argv);
    let cli = match Cli::try_parse_from(&full) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => ARGUMENT_ERROR,
            };
            let _ = e.print();
            return Ok(code);
        }
    };

    match cli.cmd {
        Cmd::Synth { preset: name, seed, out } => {
            let model = synth_model(&preset(&name)?, seed);
            save_model(&model, &out)?;
            let mut m = RunManifest::new("synth", argv);
            m.param("preset", &name).param("seed", seed);
            m.fingerprint = Some(model.fingerprint());
            emit(&m, json!({ "out": path_str(&out), "params": model.param_count() }), Some(&out))?;
        }
        Cmd::Calib { model, count, seed, out } => {
            if count == 0 {
                return Err(Error::Argument("--count must be at least 1".into()));
            }
            let bundle = load_model(&model)?;
            let cfg = bundle.config();
            let set = synth_calibration(count, cfg.in_channels, cfg.image_size, cfg.image_size, seed);
            save_calibration(&set, &out)?;
            let mut m = RunManifest::new("calib", argv);
            m.input("model", &path_str(&model)).param("count", count).param("seed", seed);
            m.fingerprint = Some(bundle.fingerprint());
            emit(&m, json!({ "out": path_str(&out), "images": count }), Some(&out))?;
        }
        Cmd::Analyze { model, calib, criterion, rank, images, out } => {
            let criterion: Criterion = criterion.parse()?;
            let bundle = load_model(&model)?;
            let mut m = RunManifest::new("analyze", argv);
            m.input("model", &path_str(&model));
            let set = match &calib {
                Some(p) => {
                    m.input("calib", &path_str(p));
                    Some(load_calib_for(p, &bundle)?)
                }
                None if criterion.needs_captures() => {
                    return Err(Error::Argument(format!("criterion {criterion} needs --calib")));
                }
                None => None,
            };
            let imgs: &[Tensor] = match &set {
                Some(s) if criterion.needs_captures() => take_images(s, images, 64)?,
                _ => &[],
            };
            let table = importance_table(&bundle, imgs, criterion, rank)?;
            m.param("criterion", criterion.name())
                .param("r", table.r)
                .param("images", table.images)
                .param("threads", rayon::current_num_threads());
            m.fingerprint = Some(bundle.fingerprint());
            if let Some(out) = &out {
                write(out, table.to_json() + "\n")?;
            }
            emit(&m, json_value(&table), out.as_deref())?;
        }
        Cmd::Prune { model, importance, ratios, qk, v, ffn, embed, heads, plan, out } => {
            let bundle = load_model(&model)?;
            let table = ImportanceTable::from_json(&std::fs::read_to_string(&importance)?)?;
            let mut spec = match &ratios {
                Some(p) => serde_json::from_str::<RatioSpec>(&std::fs::read_to_string(p)?)
                    .map_err(|e| Error::Argument(format!("ratio spec {}: {e}", p.display())))?,
                None => RatioSpec::default(),
            };
            spec.qk = qk.unwrap_or(spec.qk);
            spec.v = v.unwrap_or(spec.v);
            spec.ffn = ffn.unwrap_or(spec.ffn);
            spec.embed = embed.unwrap_or(spec.embed);
            spec.heads = heads.or(spec.heads);
            spec.validate()?;
            let prune_plan = make_plan_with_heads(&table, &spec, &bundle)?;
            let pruned = apply_plan(&bundle, &prune_plan)?;
            write(&plan, prune_plan.to_json() + "\n")?;
            save_model(&pruned, &out)?;
            let mut m = RunManifest::new("prune", argv);
            m.input("model", &path_str(&model)).input("importance", &path_str(&importance));
            if let Some(p) = &ratios {
                m.input("ratios", &path_str(p));
            }
            m.param("ratios", &spec).param("criterion", &table.criterion);
            m.fingerprint = Some(bundle.fingerprint());
            let before = count_costs(bundle.config());
            let after = count_costs_against(pruned.config(), bundle.config())?;
            emit(
                &m,
                json!({
                    "plan": path_str(&plan),
                    "out": path_str(&out),
                    "pruned_fingerprint": pruned.fingerprint(),
                    "flops": [before.flops, after.flops],
                    "params": [before.params, after.params],
                    "ratios": after.ratios,
                }),
                Some(&out),
            )?;
        }
        Cmd::Validate { original, pruned, plan, calib, images, tolerance } => {
            let orig = load_model(&original)?;
            let pruned_model = load_model(&pruned)?;
            let prune_plan = PrunePlan::from_json(&std::fs::read_to_string(&plan)?)?;
            let set = load_calib_for(&calib, &orig)?;
            let imgs = take_images(&set, images, usize::MAX)?;
            let mut m = RunManifest::new("validate", argv);
            m.input("original", &path_str(&original))
                .input("pruned", &path_str(&pruned))
                .input("plan", &path_str(&plan))
                .input("calib", &path_str(&calib))
                .param("images", imgs.len())
                .param("tolerance", tolerance);
            m.fingerprint = Some(orig.fingerprint());

            let violations: Vec<String> =
                validate_plan(&prune_plan, &orig)?.iter().map(ToString::to_string).collect();
            if !violations.is_empty() {
                emit(&m, json!({ "pass": false, "violations": violations }), None)?;
                return Ok(VALIDATION_FAILED);
            }
            let expected = apply_plan(&orig, &prune_plan)?;
            let shapes_ok = expected.config() == pruned_model.config();
            let weights_match = shapes_ok && model_to_bytes(&expected) == model_to_bytes(&pruned_model);
            let masked = apply_mask(&orig, &prune_plan)?;
            let mut max_diff = 0.0f64;
            let mut orig_caps = Vec::new();
            let mut masked_caps = Vec::new();
            for img in imgs {
                let o = forward(&orig, img, true)?;
                let mk = forward(&masked, img, true)?;
                if shapes_ok {
                    let p = forward(&pruned_model, img, false)?;
                    for (a, b) in p.logits.data().iter().zip(mk.logits.data()) {
                        max_diff = max_diff.max(f64::from((a - b).abs()));
                    }
                }
                orig_caps.extend(o.capture);
                masked_caps.extend(mk.capture);
            }
            let sim = attention_similarity(&orig_caps, &masked_caps)?;
            let pass = shapes_ok && weights_match && max_diff <= tolerance;
            emit(
                &m,
                json!({
                    "pass": pass,
                    "violations": violations,
                    "shapes_ok": shapes_ok,
                    "weights_match": weights_match,
                    "max_logit_diff": if shapes_ok { json!(max_diff) } else { Value::Null },
                    "attention_similarity": sim,
                }),
                None,
            )?;
            if !pass {
                eprintln!("validation failed");
                return Ok(VALIDATION_FAILED);
            }
        }
        Cmd::Flops { model, original, format } => {
            let bundle = load_model(&model)?;
            let mut m = RunManifest::new("flops", argv);
            m.input("model", &path_str(&model));
            m.fingerprint = Some(bundle.fingerprint());
            let report = match &original {
                Some(p) => {
                    m.input("original", &path_str(p));
                    count_costs_against(bundle.config(), load_model(p)?.config())?
                }
                None => count_costs(bundle.config()),
            };
            match format {
                Format::Json => emit(&m, json_value(&report), None)?,
                Format::Text => {
                    stdout(&report.to_text());
                    if let Some(r) = &report.ratios {
                        stdout(&r.to_text());
                    }
                }
            }
        }
        Cmd::Bench { model, runs, warmup, batch, format } => {
            let bundle = load_model(&model)?;
            // Timing is always single-threaded regardless of SNP_THREADS.
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .map_err(|e| Error::Argument(e.to_string()))?;
            let report = pool.install(|| bench(&bundle, runs, warmup, batch))?;
            let mut m = RunManifest::new("bench", argv);
            m.input("model", &path_str(&model))
                .param("runs", runs)
                .param("warmup", warmup)
                .param("batch", batch);
            m.fingerprint = Some(bundle.fingerprint());
            match format {
                Format::Json => emit(&m, json_value(&report), None)?,
                Format::Text => stdout(&report.to_text()),
            }
        }
        Cmd::Attmap { model, calib, index, out } => {
            let bundle = load_model(&model)?;
            let set = load_calib_for(&calib, &bundle)?;
            let img = set.images.get(index).ok_or_else(|| {
                Error::Argument(format!("--index {index} but the set has {} images", set.images.len()))
            })?;
            let capture = forward(&bundle, img, true)?.capture.expect("capture requested");
            let map = rollout_map(&attention_rollout(&capture)?, bundle.config().grid())?;
            let (pgm, csv) = (with_suffix(&out, ".pgm"), with_suffix(&out, ".csv"));
            write(&pgm, pgm_bytes(&map)?)?;
            write(&csv, csv_string(&map)?)?;
            let mut m = RunManifest::new("attmap", argv);
            m.input("model", &path_str(&model)).input("calib", &path_str(&calib)).param("index", index);
            m.fingerprint = Some(bundle.fingerprint());
            emit(&m, json!({ "pgm": path_str(&pgm), "csv": path_str(&csv) }), Some(&out))?;
        }
        Cmd::Rerun { manifest } => {
            let recorded: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest)?)?;
            if recorded.argv.first().map(String::as_str) == Some("rerun") {
                return Err(Error::Argument("manifest records another rerun".into()));
            }
            return run(&recorded.argv);
        }
    }
    Ok(0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_format() => FORMAT_ERROR,
        Error::Argument(_) | Error::Io(_) => ARGUMENT_ERROR,
        _ => VALIDATION_FAILED,
    }
}

fn threads() -> std::result::Result<usize, String> {
    match std::env::var("SNP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(format!("SNP_THREADS={v:?} is not a positive integer")),
        },
    }
}

fn main() -> ExitCode {
    let workers = match threads() {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(ARGUMENT_ERROR);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(ARGUMENT_ERROR);
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&argv) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
