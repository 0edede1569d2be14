//! Concrete performative environments and small fixtures for oracle tests.

mod congestion;
mod safe_distancing;
mod test_games;

pub use congestion::{congestion_base, make_congestion, CongestionParams, CongestionResponse, CONGESTION_SCHEDULE};
pub use safe_distancing::{
    make_safe_distancing, safe_distancing_base, SafeDistancingParams, SafeDistancingResponse, DISTANCING, SAFE,
};
pub use test_games::{coordination_bandit, make_test_game, LinearShift, LinearShiftResponse, TestGameSpec};

/// Normalize a row after clipping to `[0, 1]`; `None` if no mass survives.
pub(crate) fn clip_and_renormalize(row: &mut [f64]) -> Option<()> {
    row.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    let sum: f64 = row.iter().sum();
    if !(sum > 0.0) {
        return None;
    }
    row.iter_mut().for_each(|p| *p /= sum);
    Some(())
}
