use std::fmt;

use crate::error::{FairError, Result};

/// Per-device compression factors from a spec like `"1x-4x"`: devices ordered
/// by id are split into contiguous near-equal groups, one factor per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapacityScheme {
    spec: String,
    groups: Vec<u32>,
    factors: Vec<u32>,
}

impl CapacityScheme {
    pub fn parse(spec: &str, num_devices: usize) -> Result<Self> {
        let groups = spec
            .trim()
            .split('-')
            .map(|part| {
                let digits = part
                    .strip_suffix('x')
                    .or_else(|| part.strip_suffix('X'))
                    .ok_or_else(|| {
                        FairError::invalid(format!(
                            "capacity group {part:?} in {spec:?} lacks an 'x'"
                        ))
                    })?;
                let factor: u32 = digits.parse().map_err(|_| {
                    FairError::invalid(format!(
                        "capacity group {part:?} in {spec:?} is not an integer"
                    ))
                })?;
                if factor == 0 {
                    return Err(FairError::invalid(format!(
                        "zero compression factor in {spec:?}"
                    )));
                }
                Ok(factor)
            })
            .collect::<Result<Vec<u32>>>()?;
        if num_devices < groups.len() {
            return Err(FairError::invalid(format!(
                "{} capacity groups need at least as many devices, got {num_devices}",
                groups.len()
            )));
        }
        let c = groups.len();
        let factors = (0..num_devices)
            .map(|d| groups[d * c / num_devices])
            .collect();
        Ok(Self {
            spec: spec.trim().to_string(),
            groups,
            factors,
        })
    }

    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn num_devices(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, device: usize) -> u32 {
        self.factors[device]
    }

    pub fn factors(&self) -> &[u32] {
        &self.factors
    }

    /// Capacity `alpha = 1 / factor`.
    pub fn alpha(&self, device: usize) -> f64 {
        1.0 / self.factors[device] as f64
    }

    /// Largest compression factor (smallest capacity) in the scheme.
    pub fn max_factor(&self) -> u32 {
        self.groups.iter().copied().max().unwrap_or(1)
    }
}

impl fmt::Display for CapacityScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec)
    }
}
