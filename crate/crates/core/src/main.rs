use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use palora::analysis::mask_overlap;
use palora::checkpoint::{load_checkpoint, masks_from_bytes, masks_to_bytes, read_file, save_checkpoint, write_file};
use palora::importance::scores_to_csv;
use palora::pipeline::{
    aggregate, derive, downstream_splits, importance_scores, pretrain_model, run_jobs, summaries_csv, ExperimentConfig,
    MethodSummary, Mode, RunInputs,
};
use palora::slt::{config_bounds, median_by_width, trials_csv, width_experiment, BoundSummary};
use palora::sparsity::SparsityProfile;
use palora::training::{hex, summarize, sweep_csv, RunRecord, SweepRow};
use palora::{Error, Result};

#[derive(Parser)]
#[command(name = "palora", version, about = "Sparse low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen base model and write `model.plra`.
    Pretrain(Common),
    /// Score the base model and derive a per-layer sparsity profile.
    Derive(Common),
    /// Train adapters in one mode; sweeps the grid unless `--seed` is given.
    Train(Common),
    /// Run the width experiment and bound calculators.
    SltCheck(Common),
    /// Aggregate every run record under the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Workspace directory; defaults to `out_dir` from the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the seed of the step being run
    #[arg(long)]
    seed: Option<u64>,
    /// Adapter mode: lora, partial, targeted, inverted, stochastic:T,
    /// pyramidal:p, balanced:p, element, multi
    #[arg(long)]
    mode: Option<String>,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: Option<u64>,
    mode: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(c) => load(c).and_then(|ctx| pretrain(&ctx)),
        Command::Derive(c) => load(c).and_then(|ctx| derive_cmd(&ctx)),
        Command::Train(c) => load(c).and_then(|ctx| train(&ctx)),
        Command::SltCheck(c) => load(c).and_then(|ctx| slt_check(&ctx)),
        Command::Report(c) => load(c).and_then(|ctx| report(&ctx)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn load(c: Common) -> Result<Ctx> {
    let text = std::fs::read_to_string(&c.config).map_err(|e| Error::Config(format!("{}: {e}", c.config.display())))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let out = c.out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok(Ctx {
        cfg,
        out,
        seed: c.seed,
        mode: c.mode,
    })
}

fn ignore(flag: &str, value: bool, command: &str) {
    if value {
        eprintln!("warning: --{flag} has no effect on `{command}`");
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn model_path(ctx: &Ctx) -> PathBuf {
    ctx.out.join("model.plra")
}

fn profile_path(ctx: &Ctx) -> PathBuf {
    ctx.out.join(format!("profile-{}.txt", ctx.cfg.derive.method))
}

#[derive(Serialize)]
struct Provenance {
    config_hash: String,
    seed: u64,
    train_accuracy: f64,
    holdout_accuracy: f64,
    final_loss: f64,
    weights_hash: String,
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    ignore("mode", ctx.mode.is_some(), "pretrain");
    let mut cfg = ctx.cfg.clone();
    if let Some(s) = ctx.seed {
        cfg.pretrain.seed = s;
    }
    let outcome = pretrain_model(&cfg)?;
    save_checkpoint(&model_path(ctx), &outcome.model, None)?;
    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed: cfg.pretrain.seed,
        train_accuracy: outcome.train_accuracy,
        holdout_accuracy: outcome.holdout_accuracy,
        final_loss: outcome.final_loss,
        weights_hash: hex(&outcome.model.weights_hash()),
    };
    write_text(&ctx.out.join("model.json"), &to_json(&provenance))?;
    println!(
        "pretrained: train {:.4}, holdout {:.4}, loss {:.4e}",
        outcome.train_accuracy, outcome.holdout_accuracy, outcome.final_loss
    );
    Ok(())
}

fn derive_cmd(ctx: &Ctx) -> Result<()> {
    ignore("seed", ctx.seed.is_some(), "derive");
    ignore("mode", ctx.mode.is_some(), "derive");
    let (model, _) = load_checkpoint(&model_path(ctx))?;
    let splits = downstream_splits(&ctx.cfg)?;
    let (profile, scores) = derive(&model, &ctx.cfg, &splits)?;
    write_text(&profile_path(ctx), &profile.to_text())?;
    let method = ctx.cfg.derive.method;
    write_text(&ctx.out.join(format!("scores-{method}.csv")), &scores_to_csv(&scores)?)?;
    println!("layer      m      n   rows   cols  element_rate  warning");
    for r in &profile.layers {
        println!(
            "{:>5} {:>6} {:>6} {:>6} {:>6} {:>13.4} {:>8}",
            r.layer,
            r.m,
            r.n,
            r.retained_rows,
            r.retained_cols,
            r.element_rate,
            if r.warning { "yes" } else { "-" }
        );
    }
    Ok(())
}

/// First free `<base>`, `<base>-1`, `<base>-2`, ... so reruns never clobber.
fn fresh_dir(parent: &Path, base: &str) -> Result<PathBuf> {
    let mut n = 0usize;
    loop {
        let name = if n == 0 {
            base.to_string()
        } else {
            format!("{base}-{n}")
        };
        let path = parent.join(name);
        match std::fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::Io { path, source: e }),
        }
    }
}

#[derive(Serialize)]
struct Failure<'a> {
    mode: String,
    error: &'a str,
}

fn train(ctx: &Ctx) -> Result<()> {
    let mode: Mode = ctx
        .mode
        .as_deref()
        .ok_or_else(|| Error::Config("train needs --mode".into()))?
        .parse()?;
    let cfg = &ctx.cfg;
    let (model, _) = load_checkpoint(&model_path(ctx))?;
    let splits = downstream_splits(cfg)?;
    let profile_file = profile_path(ctx);
    let profile = if mode.needs_profile() {
        if !profile_file.exists() {
            return Err(Error::Config(format!(
                "mode `{mode}` needs {}; run `derive` first",
                profile_file.display()
            )));
        }
        let text =
            String::from_utf8(read_file(&profile_file)?).map_err(|_| Error::Format("profile is not UTF-8".into()))?;
        Some(SparsityProfile::from_text(&text)?)
    } else {
        if profile_file.exists() {
            eprintln!("warning: mode `{mode}` ignores {}", profile_file.display());
        }
        None
    };
    let scores = if mode.needs_scores() {
        Some(importance_scores(&model, cfg, &splits)?)
    } else {
        None
    };
    let inputs = RunInputs {
        model: &model,
        splits: &splits,
        profile: profile.as_ref(),
        scores: scores.as_deref(),
    };
    let jobs: Vec<(u64, f64)> = match ctx.seed {
        Some(s) => vec![(s, cfg.train.learning_rate)],
        None => cfg
            .sweep
            .learning_rates
            .iter()
            .flat_map(|&lr| cfg.sweep.seeds.iter().map(move |&s| (s, lr)))
            .collect(),
    };
    let dir = fresh_dir(
        &ctx.out,
        &format!("train-{}-{}", mode.to_string().replace(':', "_"), cfg.hash()),
    )?;
    let results = match run_jobs(&inputs, cfg, mode, &jobs) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            let failure = Failure {
                mode: mode.to_string(),
                error: &msg,
            };
            write_text(&dir.join("failure.json"), &to_json(&failure))?;
            return Err(e);
        }
    };
    let mut rows = Vec::new();
    for (&(seed, lr), (records, sets)) in jobs.iter().zip(&results) {
        let stem = format!("s{seed}-lr{lr:?}");
        for (i, rec) in records.iter().enumerate() {
            let name = if records.len() == 1 {
                format!("run-{stem}.json")
            } else {
                format!("run-{stem}-task{i}.json")
            };
            write_text(&dir.join(name), &rec.to_json())?;
            if i == 0 {
                rows.push(SweepRow::from(rec));
            }
        }
        if let Some(set) = sets.first() {
            let masks: Option<Vec<_>> = set.masks().into_iter().collect();
            if let Some(masks) = masks {
                write_file(&dir.join(format!("masks-{stem}.plra")), &masks_to_bytes(&masks))?;
            }
        }
    }
    write_text(&dir.join("sweep.csv"), &sweep_csv(&rows))?;
    let top_k = cfg.sweep.top_k.min(rows.len());
    let summary = summarize(rows, top_k)?;
    write_text(&dir.join("summary.json"), &to_json(&summary))?;
    println!(
        "{mode}: {} run(s), top-{} mean test accuracy {:.4} (std {:.4}), {} trainable parameters -> {}",
        summary.rows.len(),
        summary.top_k,
        summary.top_k_mean_test,
        summary.top_k_std_test,
        summary.rows[0].params,
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SltReport {
    medians: Vec<(usize, f64)>,
    bounds: BoundSummary,
}

fn slt_check(ctx: &Ctx) -> Result<()> {
    ignore("mode", ctx.mode.is_some(), "slt-check");
    let mut slt = ctx
        .cfg
        .slt
        .clone()
        .ok_or_else(|| Error::Config("slt-check needs an [slt] section".into()))?;
    if let Some(s) = ctx.seed {
        slt.seed = s;
    }
    let rows = width_experiment(&slt)?;
    let report = SltReport {
        medians: median_by_width(&rows),
        bounds: config_bounds(&slt)?,
    };
    write_text(&ctx.out.join("slt-trials.csv"), &trials_csv(&rows))?;
    write_text(&ctx.out.join("slt-bounds.json"), &to_json(&report))?;
    for (w, m) in &report.medians {
        println!("width {w:>4}: median best error {m:.6}");
    }
    Ok(())
}

#[derive(Serialize)]
struct OverlapEntry {
    first: String,
    second: String,
    pairs: usize,
    /// Mean Jaccard overlap per layer over runs sharing seed and rate.
    per_layer: Vec<f64>,
}

#[derive(Serialize)]
struct Bundle {
    methods: Vec<MethodSummary>,
    overlaps: Vec<OverlapEntry>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn report(ctx: &Ctx) -> Result<()> {
    ignore("seed", ctx.seed.is_some(), "report");
    ignore("mode", ctx.mode.is_some(), "report");
    let mut records = Vec::new();
    // method -> (run stem -> masks)
    let mut masks: BTreeMap<String, BTreeMap<String, Vec<palora::adapters::MaskPair>>> = BTreeMap::new();
    for dir in sorted_entries(&ctx.out)? {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if !dir.is_dir() || !name.starts_with("train-") {
            continue;
        }
        let mut method = None;
        for file in sorted_entries(&dir)? {
            let fname = file
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if fname.starts_with("run-") && fname.ends_with(".json") {
                let text = String::from_utf8(read_file(&file)?)
                    .map_err(|_| Error::Format(format!("{} is not UTF-8", file.display())))?;
                let rec = RunRecord::from_json(&text)?;
                method.get_or_insert_with(|| rec.method.clone());
                records.push(rec);
            }
        }
        let Some(method) = method else { continue };
        for file in sorted_entries(&dir)? {
            let fname = file
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if let Some(stem) = fname.strip_prefix("masks-").and_then(|s| s.strip_suffix(".plra")) {
                masks
                    .entry(method.clone())
                    .or_default()
                    .insert(stem.to_string(), masks_from_bytes(&read_file(&file)?)?);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no run records under {}",
            ctx.out.display()
        )));
    }
    let methods = aggregate(&records)?;
    let names: Vec<&String> = masks.keys().collect();
    let mut overlaps = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ma, mb) = (&masks[*a], &masks[*b]);
            let shared: Vec<&String> = ma.keys().filter(|k| mb.contains_key(*k)).collect();
            if shared.is_empty() {
                continue;
            }
            let depth = ma[shared[0]].len();
            let mut per_layer = vec![0.0; depth];
            for k in &shared {
                for (l, (x, y)) in ma[*k].iter().zip(&mb[*k]).enumerate() {
                    per_layer[l] += mask_overlap(x, y)? / shared.len() as f64;
                }
            }
            overlaps.push(OverlapEntry {
                first: (*a).clone(),
                second: (*b).clone(),
                pairs: shared.len(),
                per_layer,
            });
        }
    }
    write_text(&ctx.out.join("report.csv"), &summaries_csv(&methods))?;
    write_text(&ctx.out.join("report.json"), &to_json(&Bundle { methods, overlaps }))?;
    print!("{}", summaries_csv(&aggregate(&records)?));
    Ok(())
}
