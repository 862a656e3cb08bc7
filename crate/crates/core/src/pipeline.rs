//! Glue between the phantom dataset, the sampler and the metrics.

use crate::error::{Error, Result};
use crate::feedback::OracleRater;
use crate::image::Image;
use crate::metrics::{CaseRow, MetricsReport};
use crate::par;
use crate::phantom::{oracle_artifact_score, Dataset, PhantomCase};
use crate::sampler::{sample, Candidate, CandidateInput, SampleRequest, SamplerConfig, ScoreModel};
use crate::schedule::Schedule;
use crate::scorenet::Reward;
use crate::seeding::derive_seed;

/// How held-out cases are sampled for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub r: Reward,
    pub w: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

/// Samples one output per case, in case order.
pub fn sample_cases<M: ScoreModel>(
    model: &M,
    cases: &[PhantomCase],
    schedule: &Schedule,
    settings: &EvalSettings,
) -> Result<Vec<Image>> {
    par::try_map_range(cases.len(), |k| {
        let req = SampleRequest {
            seed: derive_seed(settings.seed, k as u64),
            ..SampleRequest::new(cases[k].pair.z0.clone(), settings.r, settings.w).with_config(&settings.sampler)
        };
        Ok(sample(model, &req, schedule)?.image)
    })
}

/// Scores outputs against the clean phantoms; the before-score is that of `z0`.
pub fn report(cases: &[PhantomCase], outputs: &[Image], success_tau: f64) -> Result<MetricsReport> {
    if cases.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cases but {} outputs",
            cases.len(),
            outputs.len()
        )));
    }
    let rows = par::try_map_range(cases.len(), |k| {
        let c = &cases[k];
        let before = oracle_artifact_score(&c.pair.z0, &c.phantom)?;
        let after = oracle_artifact_score(&outputs[k], &c.phantom)?;
        CaseRow::measure(c.pair.subject, c.pair.slice, &outputs[k], &c.phantom.clean, before, after)
    })?;
    MetricsReport::from_rows(rows, success_tau)
}

/// Metrics of the pseudo-prior targets themselves.
pub fn prior_report(cases: &[PhantomCase], success_tau: f64) -> Result<MetricsReport> {
    let outputs: Vec<Image> = cases.iter().map(|c| c.pair.z1.clone()).collect();
    report(cases, &outputs, success_tau)
}

pub fn candidate_inputs(cases: &[PhantomCase]) -> Vec<CandidateInput> {
    cases
        .iter()
        .map(|c| CandidateInput {
            z0: c.pair.z0.clone(),
            subject: c.pair.subject,
            slice: c.pair.slice,
        })
        .collect()
}

/// An automated rater that prefers candidates with less residual artifact.
pub fn phantom_oracle(
    dataset: &Dataset,
) -> OracleRater<impl FnMut(&Candidate) -> Result<f64> + '_> {
    OracleRater::new("oracle", move |c: &Candidate| {
        let case = dataset.find(c.info.subject, c.info.slice).ok_or_else(|| {
            Error::Tournament(format!("no phantom for candidate {}", c.info.id))
        })?;
        oracle_artifact_score(&c.image, &case.phantom)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_dataset, DatasetConfig};
    use crate::sampler::EndpointOracle;

    #[test]
    fn prior_outputs_reproduce_prior_report() {
        let ds = build_dataset(&DatasetConfig {
            n_subjects: 2,
            slices_per_subject: 4,
            size: 16,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cases = &ds.train;
        let schedule = Schedule::new(100, 0.1, 0.3).unwrap();
        let settings = EvalSettings {
            r: Reward::Good,
            w: 2.0,
            sampler: SamplerConfig::default(),
            seed: 0,
        };
        // A per-case oracle pointing at each pseudo-target.
        let outputs: Vec<Image> = cases
            .iter()
            .map(|c| {
                let oracle = EndpointOracle { z1: c.pair.z1.clone() };
                sample_cases(&oracle, std::slice::from_ref(c), &schedule, &settings).unwrap().remove(0)
            })
            .collect();
        let a = report(cases, &outputs, 0.02).unwrap();
        let b = prior_report(cases, 0.02).unwrap();
        assert!((a.aggregates.rmse.mean - b.aggregates.rmse.mean).abs() < 1e-9);
        assert!(report(cases, &outputs[1..], 0.02).is_err());
    }
}
