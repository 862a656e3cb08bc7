//! Guided sampling and candidate-grid generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{generative_step, nfe_grid, predict_endpoint};
use crate::error::{invalid, Result};
use crate::image::Image;
use crate::par;
use crate::schedule::Schedule;
use crate::scorenet::{Conditioning, Reward, ScoreNetParams};
use crate::seeding::{derive_seed, stream_id};

/// Anything that produces a score field for a bridge state.
pub trait ScoreModel: Sync {
    fn score(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image>;
}

impl ScoreModel for ScoreNetParams {
    fn score(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image> {
        self.forward(schedule, z_t, cond)
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn score(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image> {
        (**self).score(schedule, z_t, cond)
    }
}

/// The exact regression target `(z_t - z1) / sigma_t` for a known endpoint.
#[derive(Debug, Clone)]
pub struct EndpointOracle {
    pub z1: Image,
}

impl ScoreModel for EndpointOracle {
    fn score(&self, schedule: &Schedule, z_t: &Image, cond: &Conditioning) -> Result<Image> {
        let sigma = schedule.sigma(cond.t_index);
        if !(sigma > 0.0) {
            return Err(crate::Error::BoundaryTime(cond.t_index));
        }
        z_t.zip_map(&self.z1, |a, b| (a - b) / sigma)
    }
}

/// `(1 + w) s(r) - w s(null)`; the null branch is skipped at `w = 0`.
///
/// Adds the number of model evaluations to `evals`.
#[allow(clippy::too_many_arguments)]
pub fn cfg_score<M: ScoreModel + ?Sized>(
    model: &M,
    schedule: &Schedule,
    z_t: &Image,
    z0: &Image,
    t_index: usize,
    r: Reward,
    w: f64,
    evals: &mut usize,
) -> Result<Image> {
    if !(w >= 0.0) || !w.is_finite() {
        return Err(invalid(format!("guidance scale must be finite and >= 0, got {w}")));
    }
    let cond = model.score(schedule, z_t, &Conditioning { z0, t_index, r })?;
    *evals += 1;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = model.score(
        schedule,
        z_t,
        &Conditioning {
            z0,
            t_index,
            r: Reward::Null,
        },
    )?;
    *evals += 1;
    cond.lincomb(1.0 + w, &uncond, -w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub deterministic: bool,
    /// Smallest fine-grid index at which the model is queried. The first grid
    /// point sits on the source boundary where `sigma = 0`.
    pub min_eval_index: usize,
    pub scales: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 10,
            deterministic: true,
            min_eval_index: 1,
            scales: vec![1.0, 2.0, 4.0, 5.0, 8.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub z0: Image,
    pub r: Reward,
    pub w: f64,
    pub nfe: usize,
    pub deterministic: bool,
    pub min_eval_index: usize,
    pub seed: u64,
    pub keep_trajectory: bool,
}

impl SampleRequest {
    /// A deterministic request for `r` at scale `w` with sampler defaults.
    pub fn new(z0: Image, r: Reward, w: f64) -> Self {
        let d = SamplerConfig::default();
        Self {
            z0,
            r,
            w,
            nfe: d.nfe,
            deterministic: d.deterministic,
            min_eval_index: d.min_eval_index,
            seed: 0,
            keep_trajectory: false,
        }
    }

    pub fn with_config(mut self, cfg: &SamplerConfig) -> Self {
        self.nfe = cfg.nfe;
        self.deterministic = cfg.deterministic;
        self.min_eval_index = cfg.min_eval_index;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub image: Image,
    /// States after each step, starting with `z0`, when requested.
    pub trajectory: Option<Vec<Image>>,
    /// Model evaluations across both guidance branches.
    pub evaluations: usize,
}

/// Runs the guided generative recursion from `req.z0` to the target boundary.
pub fn sample<M: ScoreModel + ?Sized>(model: &M, req: &SampleRequest, schedule: &Schedule) -> Result<SampleOutput> {
    if req.r == Reward::Null {
        return Err(invalid("sample requests ask for good or bad, not null"));
    }
    let n = schedule.n_steps();
    if req.min_eval_index == 0 || req.min_eval_index >= n {
        return Err(invalid(format!(
            "min_eval_index must lie in 1..{n}, got {}",
            req.min_eval_index
        )));
    }
    let grid = nfe_grid(schedule, req.nfe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut evaluations = 0;
    let mut trajectory = req.keep_trajectory.then(|| vec![req.z0.clone()]);
    let mut z = req.z0.clone();
    for step in grid.windows(2) {
        let (i, j) = (step[0], step[1]);
        let query = i.max(req.min_eval_index).min(n - 1);
        let score = cfg_score(model, schedule, &z, &req.z0, query, req.r, req.w, &mut evaluations)?;
        let zhat1 = predict_endpoint(&z, &score, schedule.sigma(query))?;
        z = generative_step(schedule, &z, &zhat1, i, j, &mut rng, req.deterministic)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(z.clone());
        }
    }
    Ok(SampleOutput {
        image: z,
        trajectory,
        evaluations,
    })
}

/// A model snapshot identified by the epoch it was taken at.
#[derive(Debug, Clone)]
pub struct Checkpoint<M> {
    pub id: u32,
    pub model: M,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateInput {
    pub z0: Image,
    pub subject: u32,
    pub slice: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub id: String,
    pub subject: u32,
    pub slice: u32,
    /// Index into the input list the candidate was generated from.
    pub input: usize,
    pub checkpoint: u32,
    pub scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub info: CandidateInfo,
    pub image: Image,
}

pub fn candidate_id(subject: u32, slice: u32, checkpoint: u32, scale_index: usize) -> String {
    format!("s{subject}_z{slice}_c{checkpoint}_w{scale_index}")
}

/// One candidate per `(input, checkpoint, scale)`, all requesting `r = good`.
///
/// Ordered input-major, then checkpoint, then scale. Each candidate's noise
/// seed depends only on `seed` and its grid position.
pub fn generate_candidates<M: ScoreModel>(
    checkpoints: &[Checkpoint<M>],
    scales: &[f64],
    inputs: &[CandidateInput],
    schedule: &Schedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Candidate>> {
    if checkpoints.is_empty() || scales.is_empty() || inputs.is_empty() {
        return Err(invalid("candidate generation needs checkpoints, scales and inputs"));
    }
    let (nc, ns) = (checkpoints.len(), scales.len());
    par::try_map_range(inputs.len() * nc * ns, |flat| {
        let (k, rest) = (flat / (nc * ns), flat % (nc * ns));
        let (c, s) = (rest / ns, rest % ns);
        let input = &inputs[k];
        let ckpt = &checkpoints[c];
        let cand_seed = derive_seed(seed, stream_id([k as u64, c as u64, s as u64, 0]));
        let req = SampleRequest {
            seed: cand_seed,
            ..SampleRequest::new(input.z0.clone(), Reward::Good, scales[s]).with_config(sampler)
        };
        let out = sample(&ckpt.model, &req, schedule)?;
        Ok(Candidate {
            info: CandidateInfo {
                id: candidate_id(input.subject, input.slice, ckpt.id, s),
                subject: input.subject,
                slice: input.slice,
                input: k,
                checkpoint: ckpt.id,
                scale: scales[s],
                seed: cand_seed,
            },
            image: out.image,
        })
    })
}
