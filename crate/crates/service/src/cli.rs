//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bridgelab::feedback::Side;
use bridgelab::imageio::{load_sbim, save_sbim};
use bridgelab::metrics::{arr_arsr, dice, rmse, ssim, MeanStd, DICE_THRESHOLD, SUCCESS_TAU};
use bridgelab::phantom::{build_dataset, export_dataset, load_dataset, oracle_artifact_score, Dataset};
use bridgelab::pipeline::{candidate_inputs, phantom_oracle};
use bridgelab::feedback::Rater;
use bridgelab::sampler::{generate_candidates, sample, Checkpoint};
use bridgelab::training::{finetune_incremental, train, TrainOutcome};
use bridgelab::{Image, Reward, SampleRequest, ScoreNetParams};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ProjectConfig;
use crate::error::{Result, ServiceError};
use crate::hub::{export_prefs, Hub};
use crate::manifest::Manifest;
use crate::server::{serve, AppState};
use crate::store::CandidateStore;

#[derive(Debug, Parser)]
#[command(name = "bridgelab", version, about = "Preference-guided bridge diffusion toolkit")]
pub struct Cli {
    /// Project config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Good,
    Bad,
}

impl From<RewardArg> for Reward {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Good => Reward::Good,
            RewardArg::Bad => Reward::Bad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic phantom dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a score network, or fine-tune one on tournament winners.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Preference log to fine-tune on; needs --store and --from.
        #[arg(long, requires_all = ["store", "from"])]
        finetune_prefs: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Checkpoint to start fine-tuning from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Sample one image, or every `.img` file of a directory.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        w: f64,
        #[arg(long, value_enum, default_value = "good")]
        r: RewardArg,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deterministic updates; `--det false` adds bridge noise.
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        det: Option<bool>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a candidate pool from every checkpoint in a directory.
    Candidates {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every tournament of a store with an automated rater.
    Tournament {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "oracle")]
        rater: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve live tournaments over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare predicted images with references, matched by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Dataset for artifact scores; prediction names must be `s{subject}_z{slice}.img`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Candidates { .. } => "candidates",
            Command::Tournament { .. } => "tournament",
            Command::Serve { .. } => "serve",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 success, 2 usage error, 3 config error, 1 anything else.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, argv.into_iter().skip(1).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ServiceError::Config(_) => 3,
                _ => 1,
            }
        }
    }
}

fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    let cfg = ProjectConfig::load(cli.config.as_deref())?;
    let name = cli.command.name();
    match cli.command {
        Command::GenData { out, seed } => gen_data(&cfg, args, out, seed),
        Command::Train {
            data,
            out,
            epochs,
            seed,
            finetune_prefs,
            store,
            from,
        } => {
            let opts = TrainOpts {
                data,
                out,
                epochs,
                seed,
                finetune: finetune_prefs.map(|p| (p, store.expect("clap requires"), from.expect("clap requires"))),
            };
            train_cmd(&cfg, args, opts)
        }
        Command::Sample {
            ckpt,
            w,
            r,
            nfe,
            seed,
            det,
            input,
            out,
        } => {
            let opts = SampleOpts {
                ckpt,
                w,
                r: r.into(),
                nfe,
                seed,
                det,
                input,
                out,
            };
            sample_cmd(&cfg, args, &opts)
        }
        Command::Candidates {
            ckpt_dir,
            data,
            split,
            out,
            seed,
        } => candidates_cmd(&cfg, args, &ckpt_dir, data, split, &out, seed),
        Command::Tournament {
            store,
            rater,
            data,
            seed,
        } => tournament_cmd(&cfg, args, &store, &rater, data, seed),
        Command::Serve {
            store,
            bind,
            port,
            seed,
        } => {
            let store = Arc::new(CandidateStore::open(&store)?);
            let hub = Hub::open(store.clone(), seed)?;
            let mut manifest = Manifest::new(name, args, hub.seed(), &cfg);
            manifest.add_input(&store.dir().join("index.jsonl"))?;
            manifest.write(&cfg.runs_dir())?;
            let addr = format!(
                "{}:{}",
                bind.unwrap_or_else(|| cfg.server.bind.clone()),
                port.unwrap_or(cfg.server.port)
            );
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(AppState::new(hub), &addr))?;
            Ok(())
        }
        Command::Eval {
            pred,
            reference,
            data,
            out,
        } => eval_cmd(&cfg, args, &pred, &reference, data, out),
    }
}

fn dataset_path(cfg: &ProjectConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| cfg.dataset_dir())
}

fn flat_name(subject: u32, slice: u32) -> String {
    format!("s{subject}_z{slice}.img")
}

fn parse_flat_name(name: &str) -> Option<(u32, u32)> {
    let stem = name.strip_suffix(".img")?.strip_prefix('s')?;
    let (s, z) = stem.split_once("_z")?;
    Some((s.parse().ok()?, z.parse().ok()?))
}

fn gen_data(cfg: &ProjectConfig, args: Vec<String>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut dcfg = cfg.dataset;
    if let Some(s) = seed {
        dcfg.seed = s;
    }
    let out = dataset_path(cfg, out);
    let ds = build_dataset(&dcfg)?;
    export_dataset(&ds, &out)?;
    // Flat copies for `sample --in` and `eval --ref`.
    for (split, cases) in [("train", &ds.train), ("test", &ds.test)] {
        let z0_dir = out.join("flat").join(format!("{split}_z0"));
        let clean_dir = out.join("flat").join(format!("{split}_clean"));
        fs::create_dir_all(&z0_dir)?;
        fs::create_dir_all(&clean_dir)?;
        for c in cases {
            let name = flat_name(c.pair.subject, c.pair.slice);
            save_sbim(&c.pair.z0, z0_dir.join(&name))?;
            save_sbim(&c.phantom.clean, clean_dir.join(&name))?;
        }
    }
    let mut manifest = Manifest::new("gen-data", args, dcfg.seed, cfg);
    manifest.outputs.push(out.clone());
    manifest.write(&cfg.runs_dir())?;
    println!(
        "wrote {} train and {} test slices to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

struct TrainOpts {
    data: Option<PathBuf>,
    out: PathBuf,
    epochs: Option<usize>,
    seed: Option<u64>,
    finetune: Option<(PathBuf, PathBuf, PathBuf)>,
}

fn load_ckpt(path: &Path) -> Result<ScoreNetParams> {
    Ok(ScoreNetParams::read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))?)
}

fn save_ckpt(p: &ScoreNetParams, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    p.write_checkpoint(&mut w)?;
    Ok(())
}

fn write_outcome(outcome: &TrainOutcome, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for (epoch, params) in &outcome.checkpoints {
        let path = out.join(format!("ckpt_{epoch}.sbsn"));
        save_ckpt(params, &path)?;
        written.push(path);
    }
    let last = out.join("final.sbsn");
    save_ckpt(&outcome.params, &last)?;
    written.push(last);
    let mut csv = String::from("epoch,loss\n");
    for rec in &outcome.history {
        csv.push_str(&format!("{},{}\n", rec.epoch, rec.loss));
    }
    let history = out.join("history.csv");
    fs::write(&history, csv)?;
    written.push(history);
    Ok(written)
}

fn train_cmd(cfg: &ProjectConfig, args: Vec<String>, opts: TrainOpts) -> Result<()> {
    let schedule = cfg.schedule.build()?;
    let mut tcfg = cfg.train.clone();
    if let Some(e) = opts.epochs {
        tcfg.epochs = e;
    }
    if let Some(s) = opts.seed {
        tcfg.seed = s;
    }
    let data = dataset_path(cfg, opts.data);
    let ds = load_dataset(&data)?;
    let mut manifest = Manifest::new("train", args, tcfg.seed, cfg);
    manifest.add_input(&data)?;
    let outcome = match &opts.finetune {
        None => {
            let init = ScoreNetParams::init(&cfg.net, tcfg.seed)?;
            train(init, &ds.train_pairs(), &tcfg, &schedule)?
        }
        Some((prefs, store_dir, from)) => {
            let store = CandidateStore::open(store_dir)?;
            let preferred = export_prefs(prefs, &store)?;
            manifest.add_input(prefs)?;
            manifest.add_input(from)?;
            let base = load_ckpt(from)?;
            finetune_incremental(base, &ds.train_pairs(), &preferred, &tcfg, &schedule)?
        }
    };
    manifest.outputs = write_outcome(&outcome, &opts.out)?;
    manifest.write(&cfg.runs_dir())?;
    let last = outcome.history.last().map(|h| h.loss).unwrap_or(f64::NAN);
    println!("trained {} steps, final epoch loss {last:.6}", outcome.steps);
    Ok(())
}

struct SampleOpts {
    ckpt: PathBuf,
    w: f64,
    r: Reward,
    nfe: Option<usize>,
    seed: u64,
    det: Option<bool>,
    input: PathBuf,
    out: PathBuf,
}

fn img_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "img"))
        .collect();
    files.sort();
    Ok(files)
}

fn sample_cmd(cfg: &ProjectConfig, args: Vec<String>, opts: &SampleOpts) -> Result<()> {
    let schedule = cfg.schedule.build()?;
    let model = load_ckpt(&opts.ckpt)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(n) = opts.nfe {
        sampler.nfe = n;
    }
    if let Some(d) = opts.det {
        sampler.deterministic = d;
    }
    let jobs: Vec<(PathBuf, PathBuf)> = if opts.input.is_dir() {
        fs::create_dir_all(&opts.out)?;
        img_files(&opts.input)?
            .into_iter()
            .map(|p| {
                let out = opts.out.join(p.file_name().expect("file"));
                (p, out)
            })
            .collect()
    } else {
        vec![(opts.input.clone(), opts.out.clone())]
    };
    let mut manifest = Manifest::new("sample", args, opts.seed, cfg);
    manifest.add_input(&opts.ckpt)?;
    let mut evaluations = 0u64;
    for (k, (src, dst)) in jobs.iter().enumerate() {
        manifest.add_input(src)?;
        let z0 = load_sbim(src)?;
        let req = SampleRequest {
            seed: bridgelab::seeding::derive_seed(opts.seed, k as u64),
            ..SampleRequest::new(z0, opts.r, opts.w).with_config(&sampler)
        };
        let out = sample(&model, &req, &schedule)?;
        evaluations += out.evaluations as u64;
        save_sbim(&out.image, dst)?;
        manifest.outputs.push(dst.clone());
    }
    manifest.evaluations = Some(evaluations);
    manifest.write(&cfg.runs_dir())?;
    println!("sampled {} image(s), {evaluations} network evaluations", jobs.len());
    Ok(())
}

/// `ckpt_{epoch}.sbsn` files sorted by epoch.
fn checkpoint_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(epoch) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".sbsn"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            out.push((epoch, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(ServiceError::NotFound(format!("no ckpt_*.sbsn files in {}", dir.display())));
    }
    Ok(out)
}

fn candidates_cmd(
    cfg: &ProjectConfig,
    args: Vec<String>,
    ckpt_dir: &Path,
    data: Option<PathBuf>,
    split: SplitArg,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let schedule = cfg.schedule.build()?;
    let data = dataset_path(cfg, data);
    let ds = load_dataset(&data)?;
    let cases = match split {
        SplitArg::Train => &ds.train,
        SplitArg::Test => &ds.test,
    };
    let mut manifest = Manifest::new("candidates", args, seed, cfg);
    manifest.add_input(&data)?;
    let mut checkpoints = Vec::new();
    for (epoch, path) in checkpoint_files(ckpt_dir)? {
        manifest.add_input(&path)?;
        checkpoints.push(Checkpoint {
            id: epoch,
            model: load_ckpt(&path)?,
        });
    }
    let inputs = candidate_inputs(cases);
    let cands = generate_candidates(&checkpoints, &cfg.sampler.scales, &inputs, &schedule, &cfg.sampler, seed)?;
    let store = CandidateStore::create(out, &inputs, &cands)?;
    manifest.outputs.push(out.to_path_buf());
    manifest.write(&cfg.runs_dir())?;
    println!(
        "wrote {} candidates in {} groups to {}",
        store.len(),
        store.groups().len(),
        out.display()
    );
    Ok(())
}

/// Drives every tournament of `hub` to completion with `rater`.
pub fn run_automated(hub: &mut Hub, rater: &mut dyn Rater) -> Result<usize> {
    let mut decided = 0;
    while let Some(view) = hub.next(rater.id()) {
        let (l, r) = hub
            .pending_pair(&view.matchup_id)
            .ok_or_else(|| ServiceError::NotFound(view.matchup_id.clone()))?;
        let left = hub.store().load_candidate(&l)?;
        let right = hub.store().load_candidate(&r)?;
        let side: Side = rater.compare(&left, &right)?;
        let id = rater.id().to_string();
        hub.choose(&view.matchup_id, side, &id)?;
        decided += 1;
    }
    Ok(decided)
}

fn tournament_cmd(
    cfg: &ProjectConfig,
    args: Vec<String>,
    store_dir: &Path,
    rater: &str,
    data: Option<PathBuf>,
    seed: u64,
) -> Result<()> {
    if rater != "oracle" {
        return Err(ServiceError::BadRequest(format!(
            "unknown automated rater {rater:?}; use `serve` for human raters"
        )));
    }
    let store = Arc::new(CandidateStore::open(store_dir)?);
    let data = dataset_path(cfg, data);
    let ds: Dataset = load_dataset(&data)?;
    let mut hub = Hub::open(store.clone(), seed)?;
    let mut manifest = Manifest::new("tournament", args, hub.seed(), cfg);
    manifest.add_input(&store.dir().join("index.jsonl"))?;
    manifest.add_input(&data)?;
    let mut oracle = phantom_oracle(&ds);
    let decided = run_automated(&mut hub, &mut oracle)?;
    manifest.outputs = vec![store.matchups_path(), store.prefs_path()];
    manifest.write(&cfg.runs_dir())?;
    let st = hub.status();
    println!(
        "{decided} matchups decided; {}/{} groups complete",
        st.completed, st.total
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub rmse: f64,
    pub ssim: f64,
    pub dice: f64,
    pub artifact_score_before: Option<f64>,
    pub artifact_score_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cases: usize,
    pub rmse: MeanStd,
    pub ssim: MeanStd,
    pub dice: MeanStd,
    pub arr: Option<f64>,
    pub arsr: Option<f64>,
    pub rows: Vec<EvalRow>,
}

/// Scores every prediction that has a same-named reference. With a dataset,
/// names must identify the slice and artifact scores are added.
pub fn evaluate_dirs(pred: &Path, reference: &Path, ds: Option<&Dataset>) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for p in img_files(pred)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        let ref_path = reference.join(&name);
        if !ref_path.is_file() {
            continue;
        }
        let a: Image = load_sbim(&p)?;
        let b: Image = load_sbim(&ref_path)?;
        let (before, after) = match ds {
            Some(ds) => {
                let (s, z) = parse_flat_name(&name).ok_or_else(|| {
                    ServiceError::BadRequest(format!("{name} does not name a dataset slice"))
                })?;
                let case = ds
                    .find(s, z)
                    .ok_or_else(|| ServiceError::NotFound(format!("slice {name} in dataset")))?;
                (
                    Some(oracle_artifact_score(&case.pair.z0, &case.phantom)?),
                    Some(oracle_artifact_score(&a, &case.phantom)?),
                )
            }
            None => (None, None),
        };
        rows.push(EvalRow {
            name,
            rmse: rmse(&a, &b)?,
            ssim: ssim(&a, &b)?,
            dice: dice(&a, &b, DICE_THRESHOLD)?,
            artifact_score_before: before,
            artifact_score_after: after,
        });
    }
    if rows.is_empty() {
        return Err(ServiceError::NotFound(format!(
            "no matching .img files between {} and {}",
            pred.display(),
            reference.display()
        )));
    }
    let (arr, arsr) = if ds.is_some() {
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.artifact_score_before.unwrap_or(0.0), r.artifact_score_after.unwrap_or(0.0)))
            .collect();
        let (a, s) = arr_arsr(&pairs, SUCCESS_TAU)?;
        (Some(a), Some(s))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        cases: rows.len(),
        rmse: MeanStd::of(rows.iter().map(|r| r.rmse)),
        ssim: MeanStd::of(rows.iter().map(|r| r.ssim)),
        dice: MeanStd::of(rows.iter().map(|r| r.dice)),
        arr,
        arsr,
        rows,
    })
}

fn write_rows_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    for row in rows {
        w.serialize(row).map_err(std::io::Error::other)?;
    }
    w.flush()?;
    Ok(())
}

fn eval_cmd(
    cfg: &ProjectConfig,
    args: Vec<String>,
    pred: &Path,
    reference: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ds = data.as_deref().map(load_dataset).transpose()?;
    let report = evaluate_dirs(pred, reference, ds.as_ref())?;
    let mut manifest = Manifest::new("eval", args, 0, cfg);
    manifest.add_input(pred)?;
    manifest.add_input(reference)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &out {
        Some(path) => {
            fs::write(path, &json)?;
            let rows_path = path.with_extension("rows.csv");
            write_rows_csv(&report.rows, &rows_path)?;
            manifest.outputs.push(path.clone());
            manifest.outputs.push(rows_path);
        }
        None => println!("{json}"),
    }
    manifest.write(&cfg.runs_dir())?;
    if out.is_some() {
        println!(
            "{} cases: rmse {:.6}, ssim {:.6}, dice {:.6}",
            report.cases, report.rmse.mean, report.ssim.mean, report.dice.mean
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_names_round_trip() {
        assert_eq!(parse_flat_name(&flat_name(12, 3)), Some((12, 3)));
        assert_eq!(parse_flat_name("s1_z2.png"), None);
        assert_eq!(parse_flat_name("x1_z2.img"), None);
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(vec!["bridgelab".into(), "frobnicate".into()]), 2);
        assert_eq!(run(vec!["bridgelab".into()]), 2);
        assert_eq!(run(vec!["bridgelab".into(), "--help".into()]), 0);
    }
}
