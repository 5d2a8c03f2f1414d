use serde::{Deserialize, Serialize};

use super::shapley::{shapley_exact, shapley_sampled, CoalitionValue};
use super::{AttributionError, FeatureSpace, Grouping, RegionAttribution, TargetSpec};
use crate::flow::Channel;
use crate::ingest::Cell;
use crate::predictor::{rollout, HistoryWindow, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Enumerate exactly up to this many players, sample above it.
    pub exact_max_players: usize,
    pub nsamples: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            exact_max_players: 12,
            nsamples: 4096,
            seed: 7,
        }
    }
}

/// Predictor output at one target, as a function of which feature groups
/// keep their explained values.
///
/// Features outside every group stay at the explained input's values.
pub struct MaskedPredictorValue<'a> {
    pub predictor: &'a dyn Predictor,
    pub x: &'a HistoryWindow,
    pub background: &'a HistoryWindow,
    pub space: &'a FeatureSpace,
    pub target_cells: Vec<Cell>,
    pub channel: Channel,
    pub horizon: usize,
}

impl<'a> MaskedPredictorValue<'a> {
    pub fn new(
        predictor: &'a dyn Predictor,
        x: &'a HistoryWindow,
        background: &'a HistoryWindow,
        space: &'a FeatureSpace,
        target: &TargetSpec,
        cell_region: Option<&[usize]>,
    ) -> Result<Self, AttributionError> {
        if x.len() != background.len() || x.dims() != background.dims() {
            return Err(AttributionError::BackgroundMismatch);
        }
        let (rows, cols) = x.dims();
        space.validate(rows, cols, x.len())?;
        Ok(Self {
            predictor,
            x,
            background,
            space,
            target_cells: target.cells(rows, cols, cell_region)?,
            channel: target.channel,
            horizon: target.horizon,
        })
    }

    pub fn masked_input(&self, coalition: &[bool]) -> HistoryWindow {
        let mut window = self.x.clone();
        for (group, _) in self.space.groups.iter().zip(coalition).filter(|(_, &keep)| !keep) {
            for m in &group.members {
                let bg = self.background.frames[m.tau].get(m.channel, m.cell);
                window.frames[m.tau].set(m.channel, m.cell, bg);
            }
        }
        window
    }
}

impl CoalitionValue for MaskedPredictorValue<'_> {
    fn players(&self) -> usize {
        self.space.len()
    }

    fn value(&self, coalition: &[bool]) -> Result<f64, AttributionError> {
        let window = self.masked_input(coalition);
        let preds = rollout(self.predictor, &window, self.horizon)?;
        let out = &preds[self.horizon - 1].values;
        Ok(self.target_cells.iter().map(|&c| out.get(self.channel, c)).sum())
    }
}

/// Target value when only the groups in `coalition` keep their explained values.
pub fn value_function(
    coalition: &[bool],
    x: &HistoryWindow,
    background: &HistoryWindow,
    predictor: &dyn Predictor,
    target: &TargetSpec,
    space: &FeatureSpace,
    cell_region: Option<&[usize]>,
) -> Result<f64, AttributionError> {
    let game = MaskedPredictorValue::new(predictor, x, background, space, target, cell_region)?;
    game.value(coalition)
}

/// Region SHAP of `target` over the requested grouping.
///
/// `scope` restricts per-cell players to the listed cells; every other input
/// is held at `x`. Region groupings need `cell_region`.
#[allow(clippy::too_many_arguments)]
pub fn region_shap(
    predictor: &dyn Predictor,
    x: &HistoryWindow,
    background: &HistoryWindow,
    target: &TargetSpec,
    grouping: Grouping,
    cell_region: Option<&[usize]>,
    scope: Option<&[Cell]>,
    config: &ExplainConfig,
) -> Result<RegionAttribution, AttributionError> {
    let (rows, cols) = x.dims();
    let history = x.len();
    let space = match grouping {
        Grouping::PerCell => FeatureSpace::per_cell(rows, cols, history, scope),
        Grouping::PerRegion | Grouping::PerRegionMerged => {
            let map = cell_region.ok_or_else(|| AttributionError::InvalidFeatures("region grouping without a partition".into()))?;
            if map.len() != rows * cols {
                return Err(AttributionError::InvalidFeatures("partition does not cover the grid".into()));
            }
            FeatureSpace::per_region(cols, history, map, grouping == Grouping::PerRegionMerged)
        }
    };
    let game = MaskedPredictorValue::new(predictor, x, background, &space, target, cell_region)?;
    let result = if space.len() <= config.exact_max_players.min(super::MAX_EXACT_PLAYERS) {
        shapley_exact(&game)?
    } else {
        shapley_sampled(&game, config.nsamples, config.seed)?
    };
    Ok(RegionAttribution {
        target: *target,
        grouping,
        history,
        space,
        result,
    })
}
