use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AttributionError, FeatureKey, RegionAttribution};
use crate::flow::{CellTrajectoryIndex, Channel};

/// How a cell's attribution is divided among the trajectories crossing it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// `phi / |C|` to every trajectory in the cell.
    #[default]
    Equal,
    /// `phi * count / sum(count)`, for trajectories entering a cell more than once.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub trajectory_id: String,
    /// Sum over both channels.
    pub total: f64,
    pub total_in: f64,
    pub total_out: f64,
    pub shares: BTreeMap<FeatureKey, f64>,
    /// Shares summed per history position.
    pub per_tau: Vec<f64>,
}

impl TrajectoryScore {
    pub fn channel_total(&self, channel: Option<Channel>) -> f64 {
        match channel {
            None => self.total,
            Some(Channel::In) => self.total_in,
            Some(Channel::Out) => self.total_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAttribution {
    pub split: SplitMode,
    /// Sorted by trajectory id.
    pub scores: Vec<TrajectoryScore>,
    /// Attribution on cells no trajectory crossed.
    pub residual: f64,
    pub residual_features: BTreeMap<FeatureKey, f64>,
}

/// Splits per-cell attributions over the trajectories behind each cell.
///
/// `indices[tau]` must be the index of the slice feeding history position `tau`.
pub fn trajectory_shap(
    attribution: &RegionAttribution,
    indices: &[&CellTrajectoryIndex],
    split: SplitMode,
) -> Result<TrajectoryAttribution, AttributionError> {
    if !attribution.space.is_per_cell() {
        return Err(AttributionError::NotPerCell);
    }
    let history = attribution.history;
    if indices.len() != history {
        return Err(AttributionError::IndexLength {
            expected: history,
            got: indices.len(),
        });
    }

    let mut shares: BTreeMap<&str, BTreeMap<FeatureKey, f64>> = BTreeMap::new();
    let mut residual_features = BTreeMap::new();
    for (group, &phi) in attribution.space.groups.iter().zip(&attribution.result.phi) {
        let key = group.members[0];
        if phi == 0.0 {
            continue;
        }
        let crossing = indices[key.tau].get(key.channel, key.cell);
        if crossing.is_empty() {
            residual_features.insert(key, phi);
            continue;
        }
        let total_count: u32 = crossing.iter().map(|(_, n)| n).sum();
        for (id, count) in crossing {
            let share = match split {
                SplitMode::Equal => phi / crossing.len() as f64,
                SplitMode::Proportional => phi * *count as f64 / total_count as f64,
            };
            *shares.entry(id.as_str()).or_default().entry(key).or_insert(0.0) += share;
        }
    }

    let scores = shares
        .into_iter()
        .map(|(id, shares)| {
            let sum_channel = |c: Channel| shares.iter().filter(|(k, _)| k.channel == c).map(|(_, v)| v).sum::<f64>();
            let mut score = TrajectoryScore {
                trajectory_id: id.to_string(),
                total: shares.values().sum(),
                total_in: sum_channel(Channel::In),
                total_out: sum_channel(Channel::Out),
                shares,
                per_tau: Vec::new(),
            };
            score.per_tau = time_channel_aggregate(&score, history);
            score
        })
        .collect();

    Ok(TrajectoryAttribution {
        split,
        scores,
        residual: residual_features.values().sum(),
        residual_features,
    })
}

/// Ranks by `|total|` descending, ties by id ascending, keeping `k`.
pub fn top_k(scores: &[TrajectoryScore], k: usize) -> Vec<TrajectoryScore> {
    top_k_by(scores, k, None)
}

/// [`top_k`] on a single channel's total, or the combined total for `None`.
pub fn top_k_by(scores: &[TrajectoryScore], k: usize, channel: Option<Channel>) -> Vec<TrajectoryScore> {
    let mut ranked: Vec<&TrajectoryScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.channel_total(channel)
            .abs()
            .total_cmp(&a.channel_total(channel).abs())
            .then_with(|| a.trajectory_id.cmp(&b.trajectory_id))
    });
    ranked.into_iter().take(k).cloned().collect()
}

/// Per-history-position sums of a score's shares.
pub fn time_channel_aggregate(score: &TrajectoryScore, history: usize) -> Vec<f64> {
    let len = score.shares.keys().map(|k| k.tau + 1).max().unwrap_or(0).max(history);
    let mut out = vec![0.0; len];
    for (k, v) in &score.shares {
        out[k.tau] += v;
    }
    out
}
