//! Overlapped-box counting (OBC) and inverse-density downsampling.
//!
//! A detector tends to fire many overlapping pre-NMS candidates around
//! objects it finds unfamiliar. The OBC of a surviving box is the number of
//! pre-NMS candidates whose BEV IoU with it exceeds `delta_obc`. A Gaussian
//! KDE is fitted over all OBC values of a round and the pool of pseudo-labeled
//! objects is downsampled by a factor `d` with weights proportional to the
//! inverse density, which favours objects from the sparse tail.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use rand::Rng;

use crate::geom::{bev_iou, Box3D};
use crate::math;

/// Lower bound on the density used for inverse weighting.
pub const DENSITY_FLOOR: f64 = 1e-9;

/// Smallest bandwidth the Silverman rule may return. OBC is integer valued.
pub const SILVERMAN_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObcError {
    EmptySamples,
    InvalidBandwidth,
    InvalidRate,
    InvalidThreshold,
}

impl fmt::Display for ObcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            ObcError::EmptySamples => "KDE needs at least one sample",
            ObcError::InvalidBandwidth => "bandwidth must be positive and finite",
            ObcError::InvalidRate => "downsampling rate must exceed 1",
            ObcError::InvalidThreshold => "delta_obc must lie in (0, 1)",
        };
        f.write_str(msg)
    }
}

impl core::error::Error for ObcError {}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    /// `1.06 * std * n^(-1/5)`, floored at [`SILVERMAN_FLOOR`]; 1.0 for zero variance.
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObcConfig {
    pub delta_obc: f64,
    /// Downsampling rate `d > 1`.
    pub d: f64,
    pub bandwidth: Bandwidth,
    pub rng_seed: u64,
}

impl Default for ObcConfig {
    fn default() -> Self {
        ObcConfig {
            delta_obc: 0.3,
            d: 5.0,
            bandwidth: Bandwidth::Silverman,
            rng_seed: 0,
        }
    }
}

impl ObcConfig {
    pub fn validate(&self) -> Result<(), ObcError> {
        if !(self.delta_obc > 0.0 && self.delta_obc < 1.0) {
            return Err(ObcError::InvalidThreshold);
        }
        if !(self.d > 1.0) || !self.d.is_finite() {
            return Err(ObcError::InvalidRate);
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0) || !s.is_finite() {
                return Err(ObcError::InvalidBandwidth);
            }
        }
        Ok(())
    }
}

/// OBC of a surviving box: pre-NMS candidates with BEV IoU above
/// `delta_obc`, the survivor included. Never below 1.
pub fn count_obc(kept: &Box3D, prenms: &[Box3D], delta_obc: f64) -> u32 {
    let n = prenms.iter().filter(|b| bev_iou(kept, b) > delta_obc).count();
    n.max(1) as u32
}

/// The multiset `O`: one OBC value per kept box over all frames, in frame
/// then box order.
pub fn collect_obc<'a, I>(frames: I, delta_obc: f64) -> Vec<u32>
where
    I: IntoIterator<Item = (&'a [Box3D], &'a [Box3D])>,
{
    frames
        .into_iter()
        .flat_map(|(kept, prenms)| kept.iter().map(move |b| count_obc(b, prenms, delta_obc)))
        .collect()
}

/// Gaussian KDE over a finite sample. Repeated values are stored once with
/// their multiplicity, which is what makes evaluation cheap for OBC data.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    values: Vec<f64>,
    multiplicity: Vec<u32>,
    count: usize,
    sigma: f64,
}

impl KdeModel {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `B^`, the number of samples.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Distinct sample values with their multiplicities, ascending.
    pub fn histogram(&self) -> impl Iterator<Item = (f64, u32)> + '_ {
        self.values.iter().copied().zip(self.multiplicity.iter().copied())
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let norm = 1.0 / (self.count as f64 * self.sigma * math::sqrt(2.0 * PI));
        let mut sum = 0.0;
        for (&v, &m) in self.values.iter().zip(&self.multiplicity) {
            let z = (v - x) / self.sigma;
            sum += m as f64 * math::exp(-0.5 * z * z);
        }
        norm * sum
    }
}

pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return 1.0;
    }
    let sigma = 1.06 * math::sqrt(var) * math::pow(n as f64, -0.2);
    sigma.max(SILVERMAN_FLOOR)
}

pub fn kde_fit(samples: &[f64], bandwidth: Bandwidth) -> Result<KdeModel, ObcError> {
    if samples.is_empty() {
        return Err(ObcError::EmptySamples);
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
        Bandwidth::Fixed(_) => return Err(ObcError::InvalidBandwidth),
        Bandwidth::Silverman => silverman_bandwidth(samples),
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut values: Vec<f64> = Vec::new();
    let mut multiplicity: Vec<u32> = Vec::new();
    for v in sorted {
        match values.last() {
            Some(&last) if last == v => *multiplicity.last_mut().unwrap() += 1,
            _ => {
                values.push(v);
                multiplicity.push(1);
            }
        }
    }
    Ok(KdeModel {
        values,
        multiplicity,
        count: samples.len(),
        sigma,
    })
}

pub fn kde_eval(model: &KdeModel, x: f64) -> f64 {
    model.eval(x)
}

/// Selection weight `1 / max(f_KDE(o), DENSITY_FLOOR)` for each OBC value.
pub fn inverse_density_weights(model: &KdeModel, obc: &[f64]) -> Vec<f64> {
    obc.iter().map(|&o| 1.0 / model.eval(o).max(DENSITY_FLOOR)).collect()
}

/// `ceil(n / d)`.
pub fn downsample_size(n: usize, d: f64) -> usize {
    math::ceil(n as f64 / d) as usize
}

/// Weighted sampling of `k` distinct indices with exponential clocks: each
/// item gets key `-ln(u) / w` and the `k` smallest keys win. Returns indices
/// ascending. Items with non-positive weight are never chosen.
pub fn weighted_sample_without_replacement<R: Rng + ?Sized>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // u in (0, 1]
            let u = 1.0 - rng.random::<f64>();
            let key = if w > 0.0 { -math::ln(u) / w } else { f64::INFINITY };
            (key, i)
        })
        .filter(|(key, _)| key.is_finite())
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Draws the ReD subset: `ceil(n / d)` of the `n` pool entries, without
/// replacement, weighted by inverse KDE density of their OBC values.
pub fn downsample<R: Rng + ?Sized>(
    obc: &[f64],
    model: &KdeModel,
    d: f64,
    rng: &mut R,
) -> Vec<usize> {
    let weights = inverse_density_weights(model, obc);
    weighted_sample_without_replacement(&weights, downsample_size(obc.len(), d), rng)
}
