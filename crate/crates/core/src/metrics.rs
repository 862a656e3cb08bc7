//! Image quality and artifact-reduction metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const DICE_THRESHOLD: f64 = 0.7;
pub const SUCCESS_TAU: f64 = 0.02;

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sum / a.len().max(1) as f64).sqrt())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM for intensities on a unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (w, h) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let taps = gaussian_taps();
    let aa: Vec<f64> = a.data().iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.data().iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (mu_a, ow, oh) = filter_valid(a.data(), w, h, &taps);
    let (mu_b, _, _) = filter_valid(b.data(), w, h, &taps);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &taps);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &taps);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &taps);
    let mut total = 0.0;
    for k in 0..ow * oh {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = e_aa[k] - ma * ma;
        let vb = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Dice overlap of `a > threshold` and `b > threshold`; 1 when both are empty.
pub fn dice(a: &Image, b: &Image, threshold: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x > threshold, y > threshold);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Artifact reduction rate and success rate, both in percent.
///
/// Each case contributes `max(0, 1 - after / before)`; a case succeeds when
/// `after < success_tau`.
pub fn arr_arsr(cases: &[(f64, f64)], success_tau: f64) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(invalid("arr/arsr need at least one case"));
    }
    if let Some((k, _)) = cases.iter().enumerate().find(|(_, c)| !(c.0 > 0.0)) {
        return Err(invalid(format!("case {k} has a nonpositive before-score")));
    }
    let n = cases.len() as f64;
    let arr = 100.0 * cases.iter().map(|&(b, a)| (1.0 - a / b).max(0.0)).sum::<f64>() / n;
    let arsr = 100.0 * cases.iter().filter(|&&(_, a)| a < success_tau).count() as f64 / n;
    Ok((arr, arsr))
}

/// Signed difference `a - b`.
pub fn subtraction_map(a: &Image, b: &Image) -> Result<Image> {
    a.zip_map(b, |x, y| x - y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub subject: u32,
    pub slice: u32,
    pub rmse: f64,
    pub ssim: f64,
    pub dice: f64,
    pub artifact_score_before: f64,
    pub artifact_score_after: f64,
}

impl CaseRow {
    /// Scores `pred` against `reference`; artifact scores are supplied by the caller.
    pub fn measure(
        subject: u32,
        slice: u32,
        pred: &Image,
        reference: &Image,
        before: f64,
        after: f64,
    ) -> Result<Self> {
        Ok(Self {
            subject,
            slice,
            rmse: rmse(pred, reference)?,
            ssim: ssim(pred, reference)?,
            dice: dice(pred, reference, DICE_THRESHOLD)?,
            artifact_score_before: before,
            artifact_score_after: after,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cases: usize,
    pub rmse: MeanStd,
    pub ssim: MeanStd,
    pub dice: MeanStd,
    pub artifact_score_before: MeanStd,
    pub artifact_score_after: MeanStd,
    pub arr: f64,
    pub arsr: f64,
    pub success_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<CaseRow>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<CaseRow>, success_tau: f64) -> Result<Self> {
        let cases: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.artifact_score_before, r.artifact_score_after))
            .collect();
        let (arr, arsr) = arr_arsr(&cases, success_tau)?;
        let col = |f: fn(&CaseRow) -> f64| MeanStd::of(rows.iter().map(f));
        let aggregates = Aggregates {
            cases: rows.len(),
            rmse: col(|r| r.rmse),
            ssim: col(|r| r.ssim),
            dice: col(|r| r.dice),
            artifact_score_before: col(|r| r.artifact_score_before),
            artifact_score_after: col(|r| r.artifact_score_after),
            arr,
            arsr,
            success_tau,
        };
        Ok(Self { rows, aggregates })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv_rows(r: impl std::io::Read) -> Result<Vec<CaseRow>> {
        csv::Reader::from_reader(r)
            .deserialize()
            .map(|row| row.map_err(|e| Error::Format(e.to_string())))
            .collect()
    }

    pub fn aggregates_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.aggregates)?)
    }
}
