//! Layer sweeps, PCA of latent trajectories and their JSON/CSV exports.

mod compare;
mod pca;
mod sweep;

pub use compare::{canonical_depth, compare_trajectories, AlignedPair, DivergenceReport};
pub use pca::{pca_project, symmetric_eigen, Pca, PcaProjection, ProjectedPoint, SymmetricEigen};
pub use sweep::{
    binomial_stderr, evaluate_accuracy, run_sweep, sweep_pairs, write_heatmap_csv, ScoredItem,
    SweepCell, SweepConfig, SweepResult, HEATMAP_HEADER,
};

use serde_json::{json, Value};

/// Labels written into exported JSON.
#[derive(Debug, Clone)]
pub struct TraceMeta {
    pub model: String,
    pub schedule: String,
    pub strategy: String,
}

fn point_json(p: &ProjectedPoint, run: Option<&str>) -> Value {
    let mut v = json!({
        "k": p.step,
        "block": p.block,
        "phase": p.phase.label(),
        "rep": p.phase.rep(),
        "x": p.x,
        "y": p.y,
    });
    if let Some(run) = run {
        v["run"] = json!(run);
    }
    v
}

/// `{meta, steps: [{k, block, phase, rep, x, y}], components_variance}`.
pub fn trajectory_json(meta: &TraceMeta, projection: &PcaProjection) -> Value {
    json!({
        "meta": {"model": meta.model, "schedule": meta.schedule, "strategy": meta.strategy},
        "steps": projection.points.iter().map(|p| point_json(p, None)).collect::<Vec<_>>(),
        "components_variance": projection.pca.explained_variance,
    })
}

/// Joint export for a base/looped pair: both runs' points in one shared
/// basis (`run` = `"base"` or `"looped"`) plus the divergence summary.
pub fn comparison_json(meta: &TraceMeta, report: &DivergenceReport) -> Value {
    let steps: Vec<Value> = report
        .a_points
        .iter()
        .map(|p| point_json(p, Some("base")))
        .chain(report.b_points.iter().map(|p| point_json(p, Some("looped"))))
        .collect();
    let pairs: Vec<Value> = report
        .pairs
        .iter()
        .map(|p| {
            json!({
                "depth": p.depth,
                "base_step": p.a_step,
                "looped_step": p.b_step,
                "looped_phase": p.b_phase.label(),
                "l2": p.l2,
                "cosine": p.cosine,
            })
        })
        .collect();
    json!({
        "meta": {"model": meta.model, "schedule": meta.schedule, "strategy": meta.strategy},
        "steps": steps,
        "components_variance": report.pca.explained_variance,
        "divergence": {
            "pairs": pairs,
            "max_divergence_depth": report.max_divergence_depth,
            "max_divergence": report.max_divergence,
            "first_divergent_step": report.first_divergent_step,
        },
    })
}
