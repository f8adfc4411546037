//! Loop-boundary state cache and the interpolation strategies applied after
//! each repeated pass over the loop range.
//!
//! `h⁽⁰⁾` is the state at the loop exit after the first pass (what a
//! schedule-free forward would hold there). After pass `t + 1` the engine
//! hands the raw output `h⁽ᵗ⁾` to [`regularize_step`], which caches it and
//! returns `ĥ⁽ᵗ⁾ = Σᵢ αᵢ h⁽ⁱ⁾` (or the noise control) to continue from.
//!
//! Mixing is accumulated in `f64` and rounded once to `f32`; terms with a
//! zero weight are skipped so the convex endpoints reproduce their source
//! state bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Naive,
    Uniform,
    MovingAverage,
    AutoAlign,
    Noise,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Naive,
        Strategy::Uniform,
        Strategy::MovingAverage,
        Strategy::AutoAlign,
        Strategy::Noise,
    ];

    /// CLI spelling.
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Uniform => "uniform",
            Strategy::MovingAverage => "mavg",
            Strategy::AutoAlign => "align",
            Strategy::Noise => "noise",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (expected naive|uniform|mavg|align|noise)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerConfig {
    pub strategy: Strategy,
    /// Weight on `h⁽⁰⁾` for the moving average.
    pub eta: f32,
    /// Divisor for auto-align scores. `None` means `sqrt(d)`.
    pub align_temperature: Option<f32>,
    pub noise_seed: u64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Naive,
            eta: 0.5,
            align_temperature: None,
            noise_seed: 0,
        }
    }
}

impl RegularizerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if let Some(tau) = self.align_temperature {
            if !(tau > 0.0) {
                return Err(Error::Config(format!(
                    "align temperature must be positive, got {tau}"
                )));
            }
        }
        Ok(())
    }

    fn temperature(&self, d: usize) -> f64 {
        self.align_temperature
            .map_or((d as f64).sqrt(), |t| t as f64)
    }
}

/// Cached loop-boundary states, `states[0] = h⁽⁰⁾`.
#[derive(Debug, Clone)]
pub struct StateCache {
    states: Vec<Tensor>,
    positions: Vec<usize>,
}

impl StateCache {
    /// Starts a cache from the baseline state; rows are positions `0..T`.
    pub fn init(h0: Tensor) -> Self {
        let positions = (0..h0.n_rows()).collect();
        Self::with_positions(h0, positions)
    }

    /// Starts a cache whose rows belong to the given absolute token
    /// positions (incremental decoding caches one row at a time).
    pub fn with_positions(h0: Tensor, positions: Vec<usize>) -> Self {
        Self {
            states: vec![h0],
            positions,
        }
    }

    pub fn baseline(&self) -> &Tensor {
        &self.states[0]
    }

    pub fn states(&self) -> &[Tensor] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn check(&self, h_t: &Tensor) -> Result<()> {
        if h_t.shape() != self.baseline().shape() {
            return Err(Error::Cache(format!(
                "state shape {:?} does not match cached shape {:?}",
                h_t.shape(),
                self.baseline().shape()
            )));
        }
        Ok(())
    }
}

/// Interpolation weights for one boundary event.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightReport {
    /// One weight per cached state, shared by every position.
    Shared(Vec<f64>),
    /// One weight vector per token position.
    PerPosition(Vec<Vec<f64>>),
    /// The noise control is not a convex combination.
    NotConvex,
}

fn shared_weights(strategy: Strategy, eta: f32, t: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; t + 1];
    match strategy {
        Strategy::Naive => alpha[t] = 1.0,
        Strategy::Uniform => alpha.fill(1.0 / (t + 1) as f64),
        Strategy::MovingAverage => {
            alpha[0] += eta as f64;
            alpha[t] += 1.0 - eta as f64;
        }
        Strategy::AutoAlign | Strategy::Noise => unreachable!("not a shared-weight strategy"),
    }
    alpha
}

fn softmax_f64(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn align_weights(states: &[&Tensor], temperature: f64) -> Vec<Vec<f64>> {
    let h0 = states[0];
    (0..h0.n_rows())
        .map(|row| {
            let base = h0.row(row);
            let scores: Vec<f64> = states
                .iter()
                .map(|s| {
                    let ip: f64 = base
                        .iter()
                        .zip(s.row(row))
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    ip / temperature
                })
                .collect();
            softmax_f64(&scores)
        })
        .collect()
}

/// Returns the weights the configured strategy would use for `h_t`,
/// without touching the cache.
pub fn weights_of(cache: &StateCache, h_t: &Tensor, cfg: &RegularizerConfig) -> Result<WeightReport> {
    cache.check(h_t)?;
    cfg.validate()?;
    let t = cache.len();
    Ok(match cfg.strategy {
        Strategy::Noise => WeightReport::NotConvex,
        Strategy::AutoAlign => {
            let mut states: Vec<&Tensor> = cache.states.iter().collect();
            states.push(h_t);
            WeightReport::PerPosition(align_weights(&states, cfg.temperature(h_t.last_dim())))
        }
        s => WeightReport::Shared(shared_weights(s, cfg.eta, t)),
    })
}

fn combine_row(states: &[&Tensor], row: usize, alpha: &[f64], out: &mut [f32]) {
    let active: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] != 0.0).collect();
    if let [only] = active.as_slice() {
        if alpha[*only] == 1.0 {
            out.copy_from_slice(states[*only].row(row));
            return;
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        let acc: f64 = active
            .iter()
            .map(|&i| alpha[i] * states[i].row(row)[j] as f64)
            .sum();
        *o = acc as f32;
    }
}

fn uniform_row(states: &[&Tensor], row: usize, out: &mut [f32]) {
    let n = states.len() as f64;
    for (j, o) in out.iter_mut().enumerate() {
        let sum: f64 = states.iter().map(|s| s.row(row)[j] as f64).sum();
        *o = (sum / n) as f32;
    }
}

fn noise_seed_for(seed: u64, t: usize, position: usize) -> u64 {
    // splitmix64 over (seed, t, position)
    let mut z = seed
        .wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((position as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn noise_row(h0: &[f32], h_t: &[f32], seed: u64, out: &mut [f32]) {
    let target: f64 = h0
        .iter()
        .zip(h_t)
        .map(|(a, b)| {
            let d = *b as f64 - *a as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: Vec<f64> = (0..h0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { target / norm } else { 0.0 };
    for ((o, base), e) in out.iter_mut().zip(h0).zip(&eps) {
        *o = (*base as f64 + e * scale) as f32;
    }
}

/// Caches `h_t` as `h⁽ᵗ⁾` and returns the regularized state `ĥ⁽ᵗ⁾`.
///
/// `t` must equal the number of states already cached.
pub fn regularize_step(
    cache: &mut StateCache,
    h_t: Tensor,
    cfg: &RegularizerConfig,
    t: usize,
) -> Result<Tensor> {
    cache.check(&h_t)?;
    cfg.validate()?;
    if t == 0 || t != cache.len() {
        return Err(Error::Protocol(format!(
            "boundary step t={t} does not follow a cache of {} states",
            cache.len()
        )));
    }
    cache.states.push(h_t);
    let states: Vec<&Tensor> = cache.states.iter().collect();
    let latest = states[t];
    let mut out = Tensor::zeros(latest.shape());
    let d = latest.last_dim();
    if d == 0 {
        return Ok(out);
    }

    match cfg.strategy {
        Strategy::Naive => return Ok(latest.clone()),
        Strategy::Uniform => {
            for row in 0..latest.n_rows() {
                uniform_row(&states, row, out.row_mut(row));
            }
        }
        Strategy::MovingAverage => {
            let alpha = shared_weights(cfg.strategy, cfg.eta, t);
            for row in 0..latest.n_rows() {
                combine_row(&states, row, &alpha, out.row_mut(row));
            }
        }
        Strategy::AutoAlign => {
            let alphas = align_weights(&states, cfg.temperature(d));
            for (row, alpha) in alphas.iter().enumerate() {
                combine_row(&states, row, alpha, out.row_mut(row));
            }
        }
        Strategy::Noise => {
            let h0 = states[0];
            for row in 0..latest.n_rows() {
                let seed = noise_seed_for(cfg.noise_seed, t, cache.positions[row]);
                noise_row(h0.row(row), latest.row(row), seed, out.row_mut(row));
            }
        }
    }
    Ok(out)
}
