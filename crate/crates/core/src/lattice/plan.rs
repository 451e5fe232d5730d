use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One propagation unit: key times `left < mid < right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSpec {
    pub left: u32,
    pub right: u32,
    pub mid: u32,
}

/// Frames strictly between two covered times, filled by interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpSpan {
    pub left: u32,
    pub right: u32,
}

impl InterpSpan {
    pub fn frames(&self) -> std::ops::Range<u32> {
        self.left + 1..self.right
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPaths {
    pub keyframes: Vec<u32>,
    /// `stages[k]` holds the units of stage `k + 1`, ordered by time.
    pub stages: Vec<Vec<UnitSpec>>,
    pub spans: Vec<InterpSpan>,
}

impl PlannedPaths {
    /// Every time that gets a node from key frames or units, sorted.
    pub fn covered(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.keyframes.clone();
        t.extend(self.stages.iter().flatten().map(|u| u.mid));
        t.sort_unstable();
        t
    }

    pub fn n_units(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }
}

/// Splits adjacent covered times at their floor midpoint for up to
/// `max_stages` rounds, then leaves every remaining gap to interpolation.
pub fn plan_paths(keyframes: &[u32], max_stages: u32) -> Result<PlannedPaths> {
    if keyframes.len() < 2 {
        return Err(Error::invalid("planning needs at least two key frames"));
    }
    if keyframes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("key frames must be strictly increasing"));
    }
    let mut covered = keyframes.to_vec();
    let mut stages = Vec::new();
    for _ in 0..max_stages {
        let units: Vec<UnitSpec> = covered
            .windows(2)
            .filter(|w| w[1] - w[0] >= 2)
            .map(|w| UnitSpec {
                left: w[0],
                right: w[1],
                mid: (w[0] + w[1]) / 2,
            })
            .collect();
        if units.is_empty() {
            break;
        }
        covered.extend(units.iter().map(|u| u.mid));
        covered.sort_unstable();
        stages.push(units);
    }
    let spans = covered
        .windows(2)
        .filter(|w| w[1] - w[0] >= 2)
        .map(|w| InterpSpan {
            left: w[0],
            right: w[1],
        })
        .collect();
    Ok(PlannedPaths {
        keyframes: keyframes.to_vec(),
        stages,
        spans,
    })
}
