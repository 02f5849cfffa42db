use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use ordseg_core::dt::{distance_transform, saturate, ActivationMask};
use ordseg_core::encoding::{consistency_correct, decode, ordinal_encode, CumulativeMap};
use ordseg_core::formats::{
    csv_string, decode_pgm_bytes, format_sig6, read_opm1, read_pgm, write_opm1, write_pgm, MapKind,
    OPM1_MAGIC,
};
use ordseg_core::losses::{combined_loss, Term};
use ordseg_core::maps::{argmax_mask, softmax, ChannelGrid, LogitMap, ProbabilityMap};
use ordseg_core::metrics::evaluate;
use ordseg_core::order::ClassOrder;
use ordseg_core::trainer::{
    generate_scene_for_order, grid_search, sweep_csv, trace_csv, train_logits, SyntheticScene,
};
use ordseg_core::RunManifest;

use crate::args::*;

pub type Failure = Box<dyn std::error::Error + Send + Sync>;

pub fn fail(message: impl Into<String>) -> Failure {
    message.into().into()
}

/// What a run touched; the caller turns it into a manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// `None` when the run produced no files.
    pub manifest: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn execute(command: &Command) -> Result<Outcome, Failure> {
    match command {
        Command::Evaluate(a) => run_evaluate(a),
        Command::Loss(a) => run_loss(a),
        Command::Dt(a) => run_dt(a),
        Command::Ordenc { op: OrdencOp::Encode(a) } => run_encode(a),
        Command::Ordenc { op: OrdencOp::Decode(a) } => run_decode(a),
        Command::GenSynthetic(a) => run_generate(a),
        Command::TrainToy(a) => run_train(a),
        Command::Gridsearch(a) => run_grid(a),
        Command::Replay(_) => Err(fail("replay cannot be nested")),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn load_order(args: &OrderArgs) -> Result<(ClassOrder, Vec<PathBuf>), Failure> {
    match (&args.order, args.classes) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(format!("cannot read order file {}: {e}", path.display())))?;
            Ok((text.parse()?, vec![path.clone()]))
        }
        (None, Some(k)) => Ok((ClassOrder::chain(k)?, Vec::new())),
        (None, None) => Err(fail("either --order or --classes is required")),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn context<T>(path: &Path, r: ordseg_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| fail(format!("{}: {e}", path.display())))
}

/// One scored image.
struct Scored {
    file: String,
    dice: f64,
    per_class: Vec<Option<f64>>,
    cs: f64,
    up: Option<f64>,
}

fn worker_threads() -> Result<Option<usize>, Failure> {
    match std::env::var("ORDSEG_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(fail(format!("ORDSEG_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn score_one(path: &Path, target_dir: &Path, order: &ClassOrder) -> Result<Scored, Failure> {
    let k = order.num_classes();
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let target_path = target_dir.join(format!("{stem}.pgm"));
    if !target_path.is_file() {
        return Err(fail(format!("no target {} for {}", target_path.display(), path.display())));
    }
    let target = context(&target_path, read_pgm(&target_path, k))?;
    let (pred, probs) = if path.extension().is_some_and(|e| e == "opm") {
        let map = context(path, read_opm1(path))?;
        let probs = match map.kind {
            MapKind::Probabilities => context(path, ProbabilityMap::new(map.grid))?,
            MapKind::Raw => context(path, LogitMap::new(map.grid).and_then(|z| softmax(&z)))?,
        };
        (argmax_mask(&probs), Some(probs))
    } else {
        (context(path, read_pgm(path, k))?, None)
    };
    let report = context(path, evaluate(&pred, &target, probs.as_ref(), order))?;
    Ok(Scored {
        file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        dice: report.get("dice_macro").unwrap_or(0.0),
        per_class: report.dice_per_class.clone(),
        cs: report.get("cs").unwrap_or(0.0),
        up: report.get("up"),
    })
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn run_evaluate(a: &EvaluateArgs) -> Result<Outcome, Failure> {
    let (order, mut inputs) = load_order(&a.order)?;
    let k = order.num_classes();
    let mut preds: Vec<PathBuf> = fs::read_dir(&a.pred_dir)
        .map_err(|e| fail(format!("cannot list {}: {e}", a.pred_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "pgm" || e == "opm"))
        .collect();
    preds.sort();
    if preds.is_empty() {
        return Err(fail(format!("no .pgm or .opm predictions in {}", a.pred_dir.display())));
    }

    let score_all = || -> Vec<Result<Scored, Failure>> {
        preds.par_iter().map(|p| score_one(p, &a.target_dir, &order)).collect()
    };
    let scored = match worker_threads()? {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(score_all),
        None => score_all(),
    };
    let scored = scored.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut header = vec!["file".to_string(), "dice_macro".to_string()];
    header.extend((0..k).map(|c| format!("dice_class_{c}")));
    header.extend(["cs".to_string(), "up".to_string()]);
    let opt = |v: Option<f64>| v.map(format_sig6).unwrap_or_default();
    let mut rows: Vec<Vec<String>> = scored
        .iter()
        .map(|s| {
            let mut row = vec![s.file.clone(), format_sig6(s.dice)];
            row.extend(s.per_class.iter().map(|&d| opt(d)));
            row.extend([format_sig6(s.cs), opt(s.up)]);
            row
        })
        .collect();

    // columns after `file`, each possibly missing per image
    let columns: Vec<Vec<f64>> = {
        let mut cols = vec![scored.iter().map(|s| s.dice).collect::<Vec<_>>()];
        for c in 0..k {
            cols.push(scored.iter().filter_map(|s| s.per_class[c]).collect());
        }
        cols.push(scored.iter().map(|s| s.cs).collect());
        cols.push(scored.iter().filter_map(|s| s.up).collect());
        cols
    };
    let stats: Vec<Option<(f64, f64)>> = columns.iter().map(|c| mean_std(c)).collect();
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let mut row = vec![label.to_string()];
        row.extend(stats.iter().map(|s| opt(s.map(|(m, sd)| if pick == 0 { m } else { sd }))));
        rows.push(row);
    }
    ensure_parent(&a.out)?;
    write_file(&a.out, csv_string(&header, &rows))?;

    let mut mean = serde_json::Map::new();
    let mut std = serde_json::Map::new();
    for (name, s) in header[1..].iter().zip(&stats) {
        mean.insert(name.clone(), s.map_or(serde_json::Value::Null, |(m, _)| json!(m)));
        std.insert(name.clone(), s.map_or(serde_json::Value::Null, |(_, sd)| json!(sd)));
    }
    let summary = json!({
        "images": scored.len(),
        "num_classes": k,
        "mean": mean,
        "std": std,
    });
    let summary_path = a.summary.clone().unwrap_or_else(|| a.out.with_extension("json"));
    write_file(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    let pct = |i: usize| stats[i].map_or("n/a".to_string(), |(m, _)| format!("{:.1}%", 100.0 * m));
    println!(
        "{} images: dice {}, contact surface {}, unimodal pixels {}",
        scored.len(),
        pct(0),
        pct(k + 1),
        pct(k + 2)
    );

    for s in &scored {
        inputs.push(a.pred_dir.join(&s.file));
    }
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone(), summary_path],
        manifest: Some(sidecar(&a.out)),
        seed: None,
    })
}

#[derive(Serialize)]
struct LossSummary {
    value: f64,
    terms: BTreeMap<&'static str, f64>,
}

fn run_loss(a: &LossArgs) -> Result<Outcome, Failure> {
    let (order, mut inputs) = load_order(&a.order)?;
    let config = loss_config(&a.weights, &a.hyper);
    config.validate()?;
    let map = context(&a.logits, read_opm1(&a.logits))?;
    if map.kind != MapKind::Raw {
        return Err(fail(format!("{}: loss expects logits (kind 1), found probabilities", a.logits.display())));
    }
    let logits = context(&a.logits, LogitMap::new(map.grid))?;
    let target = context(&a.target, read_pgm(&a.target, order.num_classes()))?;
    let report = combined_loss(&logits, &target, &order, &config)?;

    let summary = LossSummary {
        value: report.value,
        terms: Term::ALL
            .iter()
            .map(|t| (t.name(), report.term(*t).unwrap_or(0.0)))
            .collect(),
    };
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    print!("{text}");

    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        write_file(out, &text)?;
        outputs.push(out.clone());
    }
    if let Some(out) = &a.grad_out {
        ensure_parent(out)?;
        write_opm1(out, MapKind::Raw, &report.gradient)?;
        outputs.push(out.clone());
    }
    inputs.extend([a.logits.clone(), a.target.clone()]);
    let manifest = outputs.first().map(|p| sidecar(p));
    Ok(Outcome {
        inputs,
        outputs,
        manifest,
        seed: None,
    })
}

fn run_dt(a: &DtArgs) -> Result<Outcome, Failure> {
    let bytes = read_file(&a.input)?;
    let active = if bytes.starts_with(OPM1_MAGIC) {
        let map = context(&a.input, ordseg_core::formats::decode_opm1(&bytes))?;
        let probs = context(&a.input, ProbabilityMap::new(map.grid))?;
        context(&a.input, ActivationMask::from_channel(&probs, a.class, a.threshold))?
    } else {
        let (h, w, raster) = context(&a.input, decode_pgm_bytes(&bytes))?;
        let active = raster.iter().map(|&l| usize::from(l) == a.class).collect();
        ActivationMask::new(h, w, active)?
    };
    let mut dist = distance_transform(&active, a.metric);
    if let Some(gamma) = a.gamma {
        dist = saturate(&dist, gamma)?;
    }
    let grid = ChannelGrid::new(1, dist.height(), dist.width(), dist.into_values())?;
    ensure_parent(&a.out)?;
    write_opm1(&a.out, MapKind::Raw, &grid)?;
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
        seed: None,
    })
}

fn run_encode(a: &EncodeArgs) -> Result<Outcome, Failure> {
    let mask = context(&a.mask, read_pgm(&a.mask, a.classes))?;
    let cum = ordinal_encode(&mask, a.classes)?;
    ensure_parent(&a.out)?;
    write_opm1(&a.out, MapKind::Raw, cum.grid())?;
    Ok(Outcome {
        inputs: vec![a.mask.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
        seed: None,
    })
}

fn run_decode(a: &DecodeArgs) -> Result<Outcome, Failure> {
    let map = context(&a.input, read_opm1(&a.input))?;
    let mut cum = context(&a.input, CumulativeMap::new(map.grid))?;
    if a.correct {
        cum = consistency_correct(&cum);
    }
    let mask = context(&a.input, decode(&cum, a.threshold))?;
    ensure_parent(&a.out)?;
    write_pgm(&a.out, &mask)?;
    Ok(Outcome {
        inputs: vec![a.input.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
        seed: None,
    })
}

fn scene(a: &SceneArgs) -> Result<(ClassOrder, SyntheticScene, Vec<PathBuf>), Failure> {
    let (order, inputs) = load_order(&a.order)?;
    let scene = generate_scene_for_order(&order, a.height, a.width, a.noise, a.seed)?;
    Ok((order, scene, inputs))
}

fn run_generate(a: &SceneOut) -> Result<Outcome, Failure> {
    let (_, scene, inputs) = scene(&a.scene)?;
    fs::create_dir_all(&a.out_dir)?;
    let outputs = vec![
        a.out_dir.join("clean.pgm"),
        a.out_dir.join("noisy.pgm"),
        a.out_dir.join("logits.opm"),
    ];
    write_pgm(&outputs[0], &scene.clean)?;
    write_pgm(&outputs[1], &scene.noisy)?;
    write_opm1(&outputs[2], MapKind::Raw, scene.logits.grid())?;
    Ok(Outcome {
        inputs,
        outputs,
        manifest: Some(a.out_dir.join("manifest.json")),
        seed: Some(a.scene.seed),
    })
}

fn run_train(a: &TrainArgs) -> Result<Outcome, Failure> {
    let (order, scene, inputs) = scene(&a.scene)?;
    let mut config = loss_config(&WeightArgs { lambda_o2: 0.0, lambda_csnp: 0.0, lambda_csdt: 0.0 }, &a.hyper);
    config.set_weight(a.term, a.lambda);
    let run = match train_logits(&scene, &order, &config, &a.descent.options()) {
        Err(ordseg_core::Error::Diverged { step, value, trace }) => {
            eprint!("trace up to the failure:\n{trace}");
            return Err(fail(format!("training diverged at step {step}: loss is {value}")));
        }
        other => other?,
    };
    fs::create_dir_all(&a.out_dir)?;
    let outputs = vec![a.out_dir.join("trace.csv"), a.out_dir.join("final_mask.pgm")];
    write_file(&outputs[0], trace_csv(&run.trace))?;
    write_pgm(&outputs[1], &run.final_mask)?;
    let last = run.last();
    println!(
        "step {}: loss {}, dice {:.1}%, contact surface {:.1}%, unimodal pixels {:.1}%",
        last.step,
        format_sig6(last.loss),
        100.0 * last.dice,
        100.0 * last.cs,
        100.0 * last.up
    );
    Ok(Outcome {
        inputs,
        outputs,
        manifest: Some(a.out_dir.join("manifest.json")),
        seed: Some(a.scene.seed),
    })
}

fn run_grid(a: &GridArgs) -> Result<Outcome, Failure> {
    let (order, scene, inputs) = scene(&a.scene)?;
    let base = loss_config(&WeightArgs { lambda_o2: 0.0, lambda_csnp: 0.0, lambda_csdt: 0.0 }, &a.hyper);
    let rows = grid_search(&scene, &order, a.term, &base, &a.lambdas, &a.descent.options())?;
    ensure_parent(&a.out)?;
    write_file(&a.out, sweep_csv(a.term, &rows))?;
    let mut table = format!("{:>10} {:>8} {:>8} {:>8}\n", "lambda", "dice", "cs", "up");
    for r in &rows {
        let _ = writeln!(
            table,
            "{:>10} {:>7.1}% {:>7.1}% {:>7.1}%",
            format_sig6(r.lambda),
            100.0 * r.dice,
            100.0 * r.cs,
            100.0 * r.up
        );
    }
    print!("{table}");
    Ok(Outcome {
        inputs,
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
        seed: Some(a.scene.seed),
    })
}

pub fn manifest_for(command: &Command, outcome: &Outcome, argv: &[String], seconds: f64) -> Result<RunManifest, Failure> {
    let mut m = RunManifest::new(command.name(), serde_json::to_value(command)?);
    m.inputs = outcome.inputs.iter().map(|p| p.display().to_string()).collect();
    m.outputs = outcome.outputs.iter().map(|p| p.display().to_string()).collect();
    m.seed = outcome.seed;
    m.duration_seconds = seconds;
    m.argv = argv.to_vec();
    Ok(m)
}

/// Loads the command recorded in a manifest, optionally sending its
/// outputs to `out_dir`.
pub fn replayed_command(a: &ReplayArgs) -> Result<Command, Failure> {
    let manifest = RunManifest::read(&a.manifest)?;
    let mut command: Command = serde_json::from_value(manifest.command)
        .map_err(|e| fail(format!("{}: unreadable command: {e}", a.manifest.display())))?;
    if matches!(command, Command::Replay(_)) {
        return Err(fail("a replay manifest cannot be replayed"));
    }
    if let Some(dir) = &a.out_dir {
        command.redirect_outputs(dir);
    }
    Ok(command)
}
