//! Split strategies, error metrics and trajectory analytics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Group, TrialRecord};
use crate::envs::EpisodeRecord;
use crate::error::{Error, Result};

/// Participants with fewer records are left out of every split.
pub const MIN_PARTICIPANT_RECORDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    General,
    Group,
    Individual,
    Lopo,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::General => "general",
            Strategy::Group => "group",
            Strategy::Individual => "individual",
            Strategy::Lopo => "lopo",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Strategy::General),
            "group" => Ok(Strategy::Group),
            "individual" => Ok(Strategy::Individual),
            "lopo" => Ok(Strategy::Lopo),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?}; expected general, group, individual or lopo"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: Strategy,
    pub seed: u64,
    pub test_fraction: f64,
}

impl SplitSpec {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            test_fraction: 0.2,
        }
    }
}

/// Indices into the record slice passed to [`split`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fold {
    pub name: String,
    pub group: Option<Group>,
    pub participant: Option<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn holdout(mut idx: Vec<usize>, frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    idx.shuffle(rng);
    let n = idx.len();
    let n_test = ((n as f64 * frac).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(n - n_test);
    (idx, test)
}

pub fn split(records: &[TrialRecord], spec: &SplitSpec) -> Result<Vec<Fold>> {
    if records.is_empty() {
        return Err(Error::invalid("no records to split"));
    }
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::invalid("test_fraction must lie in (0, 1)"));
    }
    let mut by_participant: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_participant.entry(&r.participant_id).or_default().push(i);
    }
    by_participant.retain(|p, idx| {
        let keep = idx.len() >= MIN_PARTICIPANT_RECORDS;
        if !keep {
            tracing::warn!(participant = p, n = idx.len(), "too few records; excluded");
        }
        keep
    });
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let group_of = |p: &str| records[by_participant[p][0]].group;

    let folds = match spec.strategy {
        Strategy::General => {
            let all: Vec<usize> = by_participant.values().flatten().copied().collect();
            let (train, test) = holdout(all, spec.test_fraction, &mut rng);
            vec![Fold {
                name: "general".into(),
                group: None,
                participant: None,
                train,
                test,
            }]
        }
        Strategy::Group => Group::ALL
            .iter()
            .filter_map(|&g| {
                let idx: Vec<usize> = by_participant
                    .iter()
                    .filter(|(p, _)| group_of(p) == g)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                (!idx.is_empty()).then(|| {
                    let (train, test) = holdout(idx, spec.test_fraction, &mut rng);
                    Fold {
                        name: g.to_string(),
                        group: Some(g),
                        participant: None,
                        train,
                        test,
                    }
                })
            })
            .collect(),
        Strategy::Individual => by_participant
            .iter()
            .map(|(p, idx)| {
                let (train, test) = holdout(idx.clone(), spec.test_fraction, &mut rng);
                Fold {
                    name: p.to_string(),
                    group: Some(group_of(p)),
                    participant: Some(p.to_string()),
                    train,
                    test,
                }
            })
            .collect(),
        Strategy::Lopo => by_participant
            .iter()
            .map(|(p, idx)| {
                let g = group_of(p);
                let train = by_participant
                    .iter()
                    .filter(|(q, _)| *q != p && group_of(q) == g)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                Fold {
                    name: p.to_string(),
                    group: Some(g),
                    participant: Some(p.to_string()),
                    train,
                    test: idx.clone(),
                }
            })
            .collect(),
    };
    Ok(folds)
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "mape needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(t) = truth.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::invalid(format!("truth values must be > 0, got {t}")));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs() / t)
        .sum::<f64>()
        / truth.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson needs two equal inputs of length >= 2"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson undefined for zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary metrics with `true` as the positive class.
pub fn classification(pred: &[bool], truth: &[bool]) -> Result<Classification> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid("classification needs equal non-empty inputs"));
    }
    let (mut tp, mut fp, mut fneg, mut hits) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        hits += (p == t) as u8 as f64;
        match (p, t) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    Ok(Classification {
        accuracy: hits / truth.len() as f64,
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub mean_effect: f64,
    pub action_std: f64,
    pub slope: f64,
}

fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Slope of the effect trajectory from its first to its last point, per
/// step. Computed as `delta_p * mean(actions[1..])` with the mean taken
/// around `actions[1]`, so constant actions give exactly `a * delta_p`.
pub fn episode_stats(ep: &EpisodeRecord) -> EpisodeStats {
    let n = ep.effect_trajectory.len();
    let mean_effect = if n == 0 {
        0.0
    } else {
        ep.effect_trajectory.iter().sum::<f64>() / n as f64
    };
    let slope = if ep.actions.len() < 2 {
        0.0
    } else {
        let tail = &ep.actions[1..];
        let pivot = tail[0];
        let shift = tail.iter().map(|a| a - pivot).sum::<f64>() / tail.len() as f64;
        ep.delta_p * (pivot + shift)
    };
    EpisodeStats {
        mean_effect,
        action_std: population_std(&ep.actions),
        slope,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStats {
    /// Mean over episodes of each episode's mean effect.
    pub mean_effect: f64,
    /// Population standard deviation of all actions pooled.
    pub action_std: f64,
    /// Mean over episodes of each episode's slope.
    pub slope: f64,
    pub per_episode: Vec<EpisodeStats>,
}

pub fn trajectory_stats(episodes: &[EpisodeRecord]) -> Result<TrajectoryStats> {
    if episodes.is_empty() {
        return Err(Error::invalid("no episodes"));
    }
    let per_episode: Vec<EpisodeStats> = episodes.iter().map(episode_stats).collect();
    let n = per_episode.len() as f64;
    let pooled: Vec<f64> = episodes.iter().flat_map(|e| e.actions.iter().copied()).collect();
    Ok(TrajectoryStats {
        mean_effect: per_episode.iter().map(|s| s.mean_effect).sum::<f64>() / n,
        action_std: population_std(&pooled),
        slope: per_episode.iter().map(|s| s.slope).sum::<f64>() / n,
        per_episode,
    })
}

/// Per-group trajectory statistics; `groups[i]` labels `episodes[i]`.
pub fn group_trajectory_stats(
    episodes: &[EpisodeRecord],
    groups: &[Group],
) -> Result<BTreeMap<String, TrajectoryStats>> {
    if episodes.len() != groups.len() {
        return Err(Error::invalid("one group label per episode required"));
    }
    let mut buckets: BTreeMap<String, Vec<EpisodeRecord>> = BTreeMap::new();
    for (e, g) in episodes.iter().zip(groups) {
        buckets.entry(g.to_string()).or_default().push(e.clone());
    }
    buckets
        .into_iter()
        .map(|(g, eps)| trajectory_stats(&eps).map(|s| (g, s)))
        .collect()
}

/// One test-set prediction, in the order trials were run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: String,
    pub participant_id: String,
    pub group: Group,
    pub trial_index: u32,
    pub truth: f64,
    pub baseline: f64,
    pub hybrid: Option<f64>,
    pub pure: Option<f64>,
}

/// Metrics of one fold (or one participant or group within a fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub participant: String,
    pub group: String,
    pub model: String,
    pub n: usize,
    pub mape: f64,
    /// NaN when undefined (constant predictions or fewer than two rows).
    pub pearson: f64,
}

/// MAPE and Pearson for every model column present in `rows`.
pub fn score_rows(fold: &str, participant: &str, group: &str, rows: &[PredictionRow]) -> Result<Vec<FoldResult>> {
    let truth: Vec<f64> = rows.iter().map(|r| r.truth).collect();
    let mut columns: Vec<(&str, Vec<f64>)> = vec![("baseline", rows.iter().map(|r| r.baseline).collect())];
    if rows.iter().all(|r| r.hybrid.is_some()) {
        columns.push(("hybrid", rows.iter().filter_map(|r| r.hybrid).collect()));
    }
    if rows.iter().all(|r| r.pure.is_some()) {
        columns.push(("pure", rows.iter().filter_map(|r| r.pure).collect()));
    }
    columns
        .into_iter()
        .map(|(model, pred)| {
            Ok(FoldResult {
                fold: fold.into(),
                participant: participant.into(),
                group: group.into(),
                model: model.into(),
                n: rows.len(),
                mape: mape(&pred, &truth)?,
                pearson: pearson(&pred, &truth).unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn write_results_csv<W: Write>(results: &[FoldResult], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in results {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert!((mape(&[2.0, 4.0], &[1.0, 5.0]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let t = [1.0, 2.5, 7.0];
        let p: Vec<f64> = t.iter().map(|v| v * 1.1).collect();
        assert!((mape(&p, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(mape(&[1.0], &[0.0]).is_err());
        assert!(mape(&[], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 5.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classification_counts() {
        let c = classification(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert_eq!(c.f1, 0.5);
    }
}
