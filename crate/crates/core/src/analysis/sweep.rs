//! Accuracy sweeps over loop ranges and the heatmap CSV.

use std::io::Write;

use rayon::prelude::*;

use crate::engine::{score_multiple_choice, ForwardOptions};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, WeightStore};
use crate::regularize::RegularizerConfig;
use crate::schedule::LoopSchedule;

/// A tokenized multiple-choice item.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub context: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub gold: usize,
}

/// `sqrt(acc (1 - acc) / n)`.
pub fn binomial_stderr(accuracy: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (accuracy * (1.0 - accuracy) / n as f64).sqrt()
}

/// Fraction of items whose top-scoring choice is the gold one.
pub fn evaluate_accuracy(
    items: &[ScoredItem],
    store: &WeightStore,
    spec: &ModelSpec,
    opts: &ForwardOptions,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let mut correct = 0usize;
    for item in items {
        let scores = score_multiple_choice(&item.context, &item.choices, store, spec, opts)?;
        if scores.best == item.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub start: usize,
    pub end: usize,
    pub repeats: usize,
    pub strategy: String,
    pub accuracy: f64,
    pub delta: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub n_layers: usize,
    pub baseline_accuracy: f64,
    pub baseline_stderr: f64,
    pub n_items: usize,
    /// Cells ordered by `(s, e)`.
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub repeats: usize,
    pub regularizer: RegularizerConfig,
    /// Candidate loop starts; `None` means `0..L`.
    pub starts: Option<Vec<usize>>,
    /// Candidate loop ends (exclusive); `None` means `1..=L`.
    pub ends: Option<Vec<usize>>,
    /// Worker threads; 0 or 1 runs on the calling thread.
    pub jobs: usize,
}

impl SweepConfig {
    pub fn new(repeats: usize, regularizer: RegularizerConfig) -> Self {
        Self {
            repeats,
            regularizer,
            starts: None,
            ends: None,
            jobs: 1,
        }
    }
}

/// All `(s, e)` pairs with `s < e <= L` drawn from the candidate ranges.
pub fn sweep_pairs(n_layers: usize, starts: Option<&[usize]>, ends: Option<&[usize]>) -> Vec<(usize, usize)> {
    let all_s: Vec<usize> = starts.map_or_else(|| (0..n_layers).collect(), <[usize]>::to_vec);
    let all_e: Vec<usize> = ends.map_or_else(|| (1..=n_layers).collect(), <[usize]>::to_vec);
    let mut pairs: Vec<(usize, usize)> = all_s
        .iter()
        .flat_map(|&s| all_e.iter().map(move |&e| (s, e)))
        .filter(|&(s, e)| s < e && e <= n_layers)
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

pub fn run_sweep(
    items: &[ScoredItem],
    store: &WeightStore,
    spec: &ModelSpec,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if items.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    cfg.regularizer.validate()?;
    let n = items.len();
    let baseline_accuracy = evaluate_accuracy(items, store, spec, &ForwardOptions::baseline(spec)?)?;
    let pairs = sweep_pairs(spec.n_layers, cfg.starts.as_deref(), cfg.ends.as_deref());

    let eval_cell = |&(s, e): &(usize, usize)| -> Result<SweepCell> {
        let schedule = LoopSchedule::new(s, e, cfg.repeats, spec.n_layers)?;
        let opts = ForwardOptions::new(schedule, cfg.regularizer.clone());
        let accuracy = evaluate_accuracy(items, store, spec, &opts)?;
        Ok(SweepCell {
            start: s,
            end: e,
            repeats: cfg.repeats,
            strategy: cfg.regularizer.strategy.name().to_string(),
            accuracy,
            delta: accuracy - baseline_accuracy,
            stderr: binomial_stderr(accuracy, n),
            n,
        })
    };

    let cells: Vec<SweepCell> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| pairs.par_iter().map(eval_cell).collect::<Result<Vec<_>>>())?
    } else {
        pairs.iter().map(eval_cell).collect::<Result<Vec<_>>>()?
    };

    Ok(SweepResult {
        n_layers: spec.n_layers,
        baseline_accuracy,
        baseline_stderr: binomial_stderr(baseline_accuracy, n),
        n_items: n,
        cells,
    })
}

pub const HEATMAP_HEADER: &str = "s,e,R,strategy,accuracy,delta,stderr,n";

/// Writes the header, a `baseline` row (`0,L,1`), then one row per cell.
pub fn write_heatmap_csv<W: Write>(result: &SweepResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{HEATMAP_HEADER}")?;
    writeln!(
        out,
        "0,{},1,baseline,{:.6},{:.6},{:.6},{}",
        result.n_layers, result.baseline_accuracy, 0.0, result.baseline_stderr, result.n_items
    )?;
    for c in &result.cells {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            c.start, c.end, c.repeats, c.strategy, c.accuracy, c.delta, c.stderr, c.n
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;
    use crate::regularize::Strategy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn items(n: usize, vocab: u32) -> Vec<ScoredItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| ScoredItem {
                context: (0..4).map(|_| rng.gen_range(0..vocab)).collect(),
                choices: (0..2).map(|_| (0..2).map(|_| rng.gen_range(0..vocab)).collect()).collect(),
                gold: rng.gen_range(0..2),
            })
            .collect()
    }

    #[test]
    fn stderr_matches_hand_values() {
        assert!((binomial_stderr(0.5, 100) - 0.05).abs() < 1e-15);
        assert!((binomial_stderr(0.3, 10) - (0.021f64).sqrt()).abs() < 1e-15);
        assert_eq!(binomial_stderr(1.0, 10), 0.0);
    }

    #[test]
    fn four_layer_grid_has_ten_cells() {
        assert_eq!(sweep_pairs(4, None, None).len(), 10);
        assert_eq!(sweep_pairs(4, Some(&[1, 2]), Some(&[2, 3, 9])), vec![(1, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn single_pass_sweep_has_zero_deltas() {
        let spec = ModelSpec::toy(4, 16, 64);
        let store = init_random(&spec, 3).unwrap();
        let data = items(6, 64);
        let res = run_sweep(&data, &store, &spec, &SweepConfig::new(1, RegularizerConfig::new(Strategy::Uniform))).unwrap();
        assert_eq!(res.cells.len(), 10);
        assert!(res.cells.iter().all(|c| c.delta == 0.0));
    }

    #[test]
    fn parallel_sweep_equals_serial() {
        let spec = ModelSpec::toy(4, 16, 64);
        let store = init_random(&spec, 3).unwrap();
        let data = items(5, 64);
        let mut cfg = SweepConfig::new(3, RegularizerConfig::new(Strategy::Naive));
        let serial = run_sweep(&data, &store, &spec, &cfg).unwrap();
        cfg.jobs = 3;
        let parallel = run_sweep(&data, &store, &spec, &cfg).unwrap();
        assert_eq!(serial, parallel);

        let mut csv = Vec::new();
        write_heatmap_csv(&serial, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(HEATMAP_HEADER));
        assert_eq!(text.lines().count(), 1 + 1 + 10);
    }

    #[test]
    fn empty_dataset_is_an_input_error() {
        let spec = ModelSpec::toy(2, 8, 16);
        let store = init_random(&spec, 0).unwrap();
        let cfg = SweepConfig::new(2, RegularizerConfig::default());
        assert!(matches!(run_sweep(&[], &store, &spec, &cfg), Err(Error::Input(_))));
    }
}
