//! End-to-end phantom run: train, generate candidates, run oracle
//! tournaments, fine-tune once and report metrics.
//!
//! `cargo run --release --example phantom_run`

use std::time::Instant;

use bridgelab::feedback::{collect_preferences, group_candidates, preference_pairs};
use bridgelab::metrics::SUCCESS_TAU;
use bridgelab::phantom::{build_dataset, DatasetConfig, PhantomCase};
use bridgelab::pipeline::{candidate_inputs, phantom_oracle, prior_report, report, sample_cases, EvalSettings};
use bridgelab::sampler::{generate_candidates, Checkpoint};
use bridgelab::seeding::stream_rng;
use bridgelab::training::{finetune_incremental, train};
use bridgelab::*;

fn env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> Result<()> {
    let t0 = Instant::now();
    let ds = build_dataset(&DatasetConfig::default())?;
    let schedule = ScheduleConfig::default().build()?;
    let net = NetConfig { widths: vec![8, 16, 32, 32], ..NetConfig::default() };
    let tcfg = TrainConfig {
        epochs: env("EPOCHS", 30),
        t_min_index: env("TMIN", 10),
        seed: 1,
        loss_kind: LossKind::Endpoint,
        ..TrainConfig::default()
    };
    let train_pairs = ds.train_pairs();
    let out = train(ScoreNetParams::init(&net, 1)?, &train_pairs, &tcfg, &schedule)?;
    println!("train {} steps in {:.0?}; loss {:.4} -> {:.4}", out.steps, t0.elapsed(),
        out.history[0].loss, out.history.last().unwrap().loss);

    let sampler = SamplerConfig { min_eval_index: tcfg.t_min_index, ..SamplerConfig::default() };
    let test_bad: Vec<PhantomCase> = ds.test.iter().filter(|c| c.pair.r == Reward::Bad).cloned().collect();
    let test_good: Vec<PhantomCase> = ds.test.iter().filter(|c| c.pair.r == Reward::Good).cloned().collect();
    let prior_bad = prior_report(&test_bad, SUCCESS_TAU)?;
    let prior_good = prior_report(&test_good, SUCCESS_TAU)?;
    println!("prior bad: arr {:.1} arsr {:.1}; prior good rmse {:.4}", prior_bad.aggregates.arr, prior_bad.aggregates.arsr, prior_good.aggregates.rmse.mean);

    for w in [0.0, 1.0, 2.0, 4.0] {
        let set = EvalSettings { r: Reward::Good, w, sampler: sampler.clone(), seed: 5 };
        let rb = report(&test_bad, &sample_cases(&out.params, &test_bad, &schedule, &set)?, SUCCESS_TAU)?;
        let rg = report(&test_good, &sample_cases(&out.params, &test_good, &schedule, &set)?, SUCCESS_TAU)?;
        println!("base w={w}: bad arr {:.1} arsr {:.1} | good rmse {:.4} ssim {:.4}", rb.aggregates.arr, rb.aggregates.arsr, rg.aggregates.rmse.mean, rg.aggregates.ssim.mean);
    }

    let ckpts: Vec<Checkpoint<&ScoreNetParams>> = out.checkpoints.iter().rev().take(9).rev()
        .map(|(e, p)| Checkpoint { id: *e as u32, model: p }).collect();
    let bad_train: Vec<PhantomCase> = ds.train.iter().filter(|c| c.pair.r == Reward::Bad).take(env("GROUPS", 12)).cloned().collect();
    let inputs = candidate_inputs(&bad_train);
    let t1 = Instant::now();
    let cands = generate_candidates(&ckpts, &sampler.scales, &inputs, &schedule, &sampler, 7)?;
    println!("{} candidates in {:.0?}", cands.len(), t1.elapsed());
    let grouped = group_candidates(cands);
    let mut rater = phantom_oracle(&ds);
    let (recs, log) = collect_preferences(&grouped, &mut rater, &mut stream_rng(3, 0))?;
    println!("{} winners, {} matchups; scales {:?}", recs.len(), log.len(),
        recs.iter().map(|r| (r.winner.info.checkpoint, r.winner.info.scale)).collect::<Vec<_>>());
    let prefs = preference_pairs(&recs, &inputs)?;
    let ft_cfg = TrainConfig { epochs: env("FT_EPOCHS", 5), checkpoint_every: 0, seed: 2, ..tcfg.clone() };
    let ft = finetune_incremental(out.params.clone(), &train_pairs, &prefs, &ft_cfg, &schedule)?;
    for w in [0.0, 1.0, 2.0, 4.0] {
        let set = EvalSettings { r: Reward::Good, w, sampler: sampler.clone(), seed: 5 };
        let rb = report(&test_bad, &sample_cases(&ft.params, &test_bad, &schedule, &set)?, SUCCESS_TAU)?;
        let rg = report(&test_good, &sample_cases(&ft.params, &test_good, &schedule, &set)?, SUCCESS_TAU)?;
        println!("tuned w={w}: bad arr {:.1} arsr {:.1} | good rmse {:.4} ssim {:.4}", rb.aggregates.arr, rb.aggregates.arsr, rg.aggregates.rmse.mean, rg.aggregates.ssim.mean);
    }
    println!("total {:.0?}", t0.elapsed());
    Ok(())
}
