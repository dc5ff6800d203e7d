//! Verification backend: cosine scoring, adaptive score normalization and
//! detection metrics.

mod files;

use crate::error::{Error, Result};

pub use files::{read_scores, read_trials, write_scores, ScoreLine, Trial};

/// Labels and scores of a trial list, in trial order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(labels: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::Input(format!("{} labels for {} scores", labels.len(), scores.len())));
        }
        Ok(ScoreSet { labels, scores })
    }

    /// Builds a set from separate target and nontarget score lists.
    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Self {
        let labels = std::iter::repeat_n(true, targets.len()).chain(std::iter::repeat_n(false, nontargets.len())).collect();
        ScoreSet { labels, scores: targets.iter().chain(nontargets).copied().collect() }
    }

    fn counts(&self) -> Result<(usize, usize)> {
        let nt = self.labels.iter().filter(|&&l| l).count();
        let nn = self.labels.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(Error::Input(format!(
                "detection metrics need both classes; got {nt} target and {nn} nontarget trials"
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("score {i} is not finite")));
        }
        Ok((nt, nn))
    }

    /// Miss and false-alarm rates at each distinct threshold, ascending, then
    /// at a threshold above every score.
    ///
    /// A trial is accepted when its score is at least the threshold.
    pub fn operating_points(&self) -> Result<Vec<OperatingPoint>> {
        let (nt, nn) = self.counts()?;
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut points = Vec::new();
        let (mut below_t, mut below_n) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let t = self.scores[order[i]];
            points.push(OperatingPoint::new(t, below_t, nt, nn - below_n, nn));
            while i < order.len() && self.scores[order[i]] == t {
                if self.labels[order[i]] {
                    below_t += 1;
                } else {
                    below_n += 1;
                }
                i += 1;
            }
        }
        points.push(OperatingPoint::new(f64::INFINITY, nt, nt, 0, nn));
        Ok(points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    /// Fraction of targets scoring below the threshold.
    pub fnr: f64,
    /// Fraction of nontargets scoring at or above the threshold.
    pub fpr: f64,
}

impl OperatingPoint {
    fn new(threshold: f64, misses: usize, nt: usize, false_alarms: usize, nn: usize) -> Self {
        OperatingPoint { threshold, fnr: misses as f64 / nt as f64, fpr: false_alarms as f64 / nn as f64 }
    }
}

/// Equal error rate from an ascending list of operating points.
///
/// Returns the common rate at a point where the two rates agree, otherwise
/// interpolates linearly between the adjacent points where `fnr - fpr`
/// changes sign.
pub fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    let d = |p: &OperatingPoint| p.fnr - p.fpr;
    let i = points.iter().position(|p| d(p) >= 0.0).expect("the last point has fnr 1 and fpr 0");
    let b = points[i];
    if d(&b) == 0.0 || i == 0 {
        return b.fnr.max(b.fpr);
    }
    let a = points[i - 1];
    let alpha = -d(&a) / (d(&b) - d(&a));
    a.fnr + alpha * (b.fnr - a.fnr)
}

/// Equal error rate in [0, 1].
pub fn eer(set: &ScoreSet) -> Result<f64> {
    Ok(eer_from_points(&set.operating_points()?))
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    /// Normalized cost at one operating point.
    pub fn cost(&self, p: &OperatingPoint) -> f64 {
        let raw = self.c_miss * p.fnr * self.p_target + self.c_fa * p.fpr * (1.0 - self.p_target);
        raw / (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(set: &ScoreSet, params: DcfParams) -> Result<f64> {
    if !(params.p_target > 0.0 && params.p_target < 1.0 && params.c_miss > 0.0 && params.c_fa > 0.0) {
        return Err(Error::Config(format!("invalid detection cost parameters {params:?}")));
    }
    Ok(set.operating_points()?.iter().map(|p| params.cost(p)).fold(f64::INFINITY, f64::min))
}

/// Cosine similarity of two embeddings.
pub fn cosine_score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine score of a zero embedding".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and sample standard deviation of the `topk` largest values.
pub fn top_k_stats(scores: &[f64], topk: usize) -> Result<(f64, f64)> {
    if topk < 2 {
        return Err(Error::Config(format!("AS-Norm top-k must be at least 2, got {topk}")));
    }
    if scores.len() < topk {
        return Err(Error::Config(format!("AS-Norm cohort has {} entries, fewer than top-k {topk}", scores.len())));
    }
    let mut s = scores.to_vec();
    s.select_nth_unstable_by(topk - 1, |a, b| b.total_cmp(a));
    let top = &s[..topk];
    let mean = top.iter().sum::<f64>() / topk as f64;
    let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (topk - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// Normalizes one raw score from the two sides' cohort statistics.
pub fn snorm(raw: f64, enroll: (f64, f64), test: (f64, f64)) -> Result<f64> {
    for ((_, sd), side) in [(enroll, "enroll"), (test, "test")] {
        if !(sd > 0.0) {
            return Err(Error::Numeric(format!("AS-Norm {side} cohort scores have zero spread")));
        }
    }
    Ok(0.5 * ((raw - enroll.0) / enroll.1 + (raw - test.0) / test.1))
}

/// Top-k adaptive s-normalization from precomputed cohort scores.
pub fn asnorm_scores(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], topk: usize) -> Result<f64> {
    snorm(raw, top_k_stats(enroll_cohort, topk)?, top_k_stats(test_cohort, topk)?)
}

/// Adaptive s-normalization of cosine scores against a cohort of embeddings.
///
/// `pairs[i]` names the enroll and test embeddings of `raw[i]`. Cohort
/// statistics are computed once per distinct embedding.
pub fn asnorm(
    raw: &[f64],
    pairs: &[(&[f32], &[f32])],
    cohort: &[Vec<f32>],
    topk: usize,
) -> Result<Vec<f64>> {
    if raw.len() != pairs.len() {
        return Err(Error::Input(format!("{} scores for {} trials", raw.len(), pairs.len())));
    }
    if cohort.len() < topk {
        return Err(Error::Config(format!("AS-Norm cohort has {} embeddings, fewer than top-k {topk}", cohort.len())));
    }
    let mut cache: std::collections::HashMap<*const f32, (f64, f64)> = Default::default();
    let mut stats = |e: &[f32]| -> Result<(f64, f64)> {
        if let Some(&s) = cache.get(&e.as_ptr()) {
            return Ok(s);
        }
        let scores = cohort.iter().map(|c| cosine_score(e, c)).collect::<Result<Vec<_>>>()?;
        let s = top_k_stats(&scores, topk)?;
        cache.insert(e.as_ptr(), s);
        Ok(s)
    };
    raw.iter()
        .zip(pairs)
        .map(|(&s, (e, t))| {
            let (se, st) = (stats(e)?, stats(t)?);
            snorm(s, se, st)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&ScoreSet::from_split(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        let s = ScoreSet::from_split(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]);
        assert!((eer(&s).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let swapped = ScoreSet::from_split(&[-0.5, -0.3, -0.1], &[-0.8, -0.6, -0.4]);
        assert_eq!(eer(&swapped).unwrap(), eer(&s).unwrap());
        assert!(matches!(eer(&ScoreSet::from_split(&[0.1], &[])), Err(Error::Input(_))));
    }

    #[test]
    fn min_dcf_examples() {
        let p = DcfParams::default();
        assert_eq!(min_dcf(&ScoreSet::from_split(&[0.9, 0.8], &[0.1, 0.2]), p).unwrap(), 0.0);
        let s = ScoreSet::from_split(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]);
        assert!((min_dcf(&s, p).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fully_inverted_scores_give_eer_one() {
        let s = ScoreSet::from_split(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(eer(&s).unwrap(), 1.0);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 4.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn snorm_hand_example() {
        let v = snorm(0.5, (0.3, 0.1), (0.3, 0.1)).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert!(matches!(snorm(0.5, (0.3, 0.0), (0.3, 0.1)), Err(Error::Numeric(m)) if m.contains("enroll")));
        assert!(matches!(snorm(0.5, (0.3, 0.1), (0.3, 0.0)), Err(Error::Numeric(m)) if m.contains("test")));
    }

    #[test]
    fn top_k_errors_and_selection() {
        assert!(matches!(top_k_stats(&[1.0, 2.0], 3), Err(Error::Config(_))));
        assert!(matches!(top_k_stats(&[1.0, 2.0], 1), Err(Error::Config(_))));
        let (m, s) = top_k_stats(&[0.0, 5.0, 1.0, 3.0], 2).unwrap();
        assert_eq!(m, 4.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
