use serde::{Deserialize, Serialize};

use crate::costmodel::{BaselineReport, MigrationCost};
use crate::model::{BlockKind, TokenCounts};
use crate::predictor::{AccuracyReport, PredictionCounts};
use crate::scheduler::MigrationPlan;

/// Where each simulated second went. The fields add up to the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseBreakdown {
    pub prefill: f64,
    pub qkv: f64,
    pub attention: f64,
    pub projection: f64,
    pub mlp: f64,
    pub merge: f64,
    /// GPU/DIMM synchronization on GPU-bound layers and at every merge.
    pub sync: f64,
    pub exposed_migration: f64,
}

impl PhaseBreakdown {
    pub fn total(&self) -> f64 {
        self.prefill
            + self.qkv
            + self.attention
            + self.projection
            + self.mlp
            + self.merge
            + self.sync
            + self.exposed_migration
    }

    pub fn decode(&self) -> f64 {
        self.total() - self.prefill
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationTotals {
    pub gpu_swaps: u64,
    pub dimm_moves: u64,
    pub pcie_bytes: u64,
    pub dimmlink_bytes: u64,
    pub transfer_seconds: f64,
    pub hidden_seconds: f64,
    pub exposed_seconds: f64,
}

impl MigrationTotals {
    pub(crate) fn add(&mut self, plan: &MigrationPlan, cost: &MigrationCost) {
        self.gpu_swaps += plan.gpu_swaps.len() as u64;
        self.dimm_moves += plan.dimm_moves.len() as u64;
        self.pcie_bytes += plan.pcie_bytes;
        self.dimmlink_bytes += plan.dimmlink_bytes;
        self.transfer_seconds += cost.transfer_seconds;
        self.hidden_seconds += cost.hidden_seconds;
        self.exposed_seconds += cost.exposed_seconds;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetrics {
    pub counts: PredictionCounts,
    #[serde(flatten)]
    pub report: AccuracyReport,
}

/// Load skew across DIMMs at a rebalancing point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSample {
    /// Decode token index.
    pub token: u32,
    /// Window activity imbalance of the window that just ended, averaged
    /// over balancing scopes, before and after rebalancing. The two are
    /// equal when rebalancing is off.
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline: BaselineReport,
    /// Our decode tokens/s over the baseline's.
    pub speedup: f64,
}

/// Per-token Σ over FC layers of the slowest device on the starting
/// placement, with no prediction or migration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FcObjective {
    /// Prompt-profiled frequencies as expected counts; the mapper's
    /// objective.
    pub expected_seconds: f64,
    /// Mean over decode tokens of the same sum with realized activations.
    pub realized_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub label: String,
    pub batch: u32,
    pub tokens: TokenCounts,
    pub tokens_per_second: f64,
    pub total_seconds: f64,
    pub decode_seconds: f64,
    pub breakdown: PhaseBreakdown,
    /// Misprediction recovery, already inside `qkv` and `mlp`.
    pub late_seconds: f64,
    /// Decode seconds of each generated token.
    pub token_seconds: Vec<f64>,
    pub predictor: PredictorMetrics,
    /// Mean over steps of the DIMM load imbalance of computed neurons.
    pub mean_step_imbalance: f64,
    pub imbalance: Vec<ImbalanceSample>,
    pub migration: MigrationTotals,
    pub baseline: BaselineComparison,
    pub fc_objective: FcObjective,
    /// Activated neurons checked by the execution audit, when enabled.
    pub audited_activations: Option<u64>,
}

/// One decode step of one FC layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: u32,
    pub layer: u32,
    pub kind: BlockKind,
    pub predicted: u32,
    pub actual: u32,
    pub true_positive: u32,
    pub false_positive: u32,
    pub false_negative: u32,
    pub gpu_neurons: u32,
    pub max_dimm_neurons: u32,
    pub gpu_seconds: f64,
    pub dimm_seconds: f64,
    pub late_seconds: f64,
    pub layer_seconds: f64,
    pub imbalance: f64,
}

/// Migration issued during one block's projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationEvent {
    pub token: u32,
    pub block: u32,
    pub plan: MigrationPlan,
    #[serde(flatten)]
    pub cost: MigrationCost,
}
