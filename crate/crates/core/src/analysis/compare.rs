//! Depth-aligned comparison of two trajectories and a shared PCA basis.

use std::collections::HashMap;

use crate::engine::{TracePhase, TrajectoryEntry, TrajectoryRecord};
use crate::error::{Error, Result};

use super::pca::{project_record, Pca, ProjectedPoint};

/// Depth in the unlooped network: 0 for the embedding, `b + 1` after block
/// `b`. A boundary state sits at the depth of the loop's last block.
pub fn canonical_depth(entry: &TrajectoryEntry) -> usize {
    match (entry.phase, entry.block) {
        (TracePhase::Embedding, _) | (_, None) => 0,
        (_, Some(b)) => b + 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub depth: usize,
    pub a_index: usize,
    pub b_index: usize,
    pub a_step: Option<usize>,
    pub b_step: Option<usize>,
    pub a_phase: TracePhase,
    pub b_phase: TracePhase,
    pub l2: f64,
    pub cosine: f64,
}

impl AlignedPair {
    /// The later of the two schedule steps; for a base-vs-looped pair this is
    /// the looped record's step.
    pub fn step(&self) -> Option<usize> {
        self.a_step.max(self.b_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub pairs: Vec<AlignedPair>,
    /// Depth of the pair with the largest L2 distance (first on ties).
    pub max_divergence_depth: usize,
    pub max_divergence: f64,
    /// Earliest step at which any aligned pair differs.
    pub first_divergent_step: Option<usize>,
    pub pca: Pca,
    pub a_points: Vec<ProjectedPoint>,
    pub b_points: Vec<ProjectedPoint>,
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        if aa == bb {
            1.0
        } else {
            0.0
        }
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Index lists per depth, in record order.
fn by_depth(record: &TrajectoryRecord) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, e) in record.entries.iter().enumerate() {
        map.entry(canonical_depth(e)).or_default().push(i);
    }
    map
}

/// Aligns entries at equal depth. Where one record has a single entry at a
/// depth, every entry of the other record at that depth pairs with it;
/// otherwise entries pair by occurrence. The rule is symmetric in `a`, `b`.
pub fn compare_trajectories(a: &TrajectoryRecord, b: &TrajectoryRecord) -> Result<DivergenceReport> {
    if a.n_layers != b.n_layers {
        return Err(Error::Input(format!(
            "records come from models with {} and {} layers",
            a.n_layers, b.n_layers
        )));
    }
    if a.position != b.position {
        return Err(Error::Input(format!(
            "records follow different positions ({} vs {})",
            a.position, b.position
        )));
    }
    let dim = |r: &TrajectoryRecord| r.entries.first().map(|e| e.hidden.len());
    if dim(a) != dim(b) {
        return Err(Error::Input("records have different hidden sizes".into()));
    }

    let da = by_depth(a);
    let db = by_depth(b);
    let mut depths: Vec<usize> = da.keys().filter(|d| db.contains_key(d)).copied().collect();
    depths.sort_unstable();

    let mut pairs = Vec::new();
    for depth in depths {
        let (ia, ib) = (&da[&depth], &db[&depth]);
        let matched: Vec<(usize, usize)> = if ia.len() == 1 {
            ib.iter().map(|&j| (ia[0], j)).collect()
        } else if ib.len() == 1 {
            ia.iter().map(|&i| (i, ib[0])).collect()
        } else {
            ia.iter().copied().zip(ib.iter().copied()).collect()
        };
        for (i, j) in matched {
            let (ea, eb) = (&a.entries[i], &b.entries[j]);
            pairs.push(AlignedPair {
                depth,
                a_index: i,
                b_index: j,
                a_step: ea.step,
                b_step: eb.step,
                a_phase: ea.phase,
                b_phase: eb.phase,
                l2: l2(&ea.hidden, &eb.hidden),
                cosine: cosine(&ea.hidden, &eb.hidden),
            });
        }
    }

    let (max_divergence_depth, max_divergence) = pairs
        .iter()
        .fold((0, 0.0f64), |(d, m), p| if p.l2 > m { (p.depth, p.l2) } else { (d, m) });
    let first_divergent_step = pairs
        .iter()
        .filter(|p| p.l2 > 0.0)
        .map(|p| p.step().unwrap_or(0))
        .min();

    let rows: Vec<&[f32]> = a
        .entries
        .iter()
        .chain(&b.entries)
        .map(|e| e.hidden.as_slice())
        .collect();
    let pca = Pca::fit(&rows)?;
    let a_points = project_record(&pca, a);
    let b_points = project_record(&pca, b);
    Ok(DivergenceReport {
        pairs,
        max_divergence_depth,
        max_divergence,
        first_divergent_step,
        pca,
        a_points,
        b_points,
    })
}
