use serde::{Deserialize, Serialize};

use super::EvalPoint;

pub const FRONTIER_WARNING: &str =
    "frontier selected on the same split it reports; points are optimistic estimates of held-out performance";

/// Frontier points with output metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<EvalPoint>,
    pub warning: String,
}

impl Frontier {
    pub fn new(points: &[EvalPoint]) -> Frontier {
        Frontier { points: pareto_frontier(points), warning: FRONTIER_WARNING.to_string() }
    }
}

/// Non-dominated points under (minimize cost, maximize accuracy), sorted by
/// cost ascending; ties in cost keep input order. Exact duplicates do not
/// dominate each other and are all kept.
pub fn pareto_frontier(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let mut sorted: Vec<&EvalPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.avg_cost.total_cmp(&b.avg_cost));
    let mut out = Vec::new();
    let mut best_below = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].avg_cost == sorted[i].avg_cost {
            j += 1;
        }
        let group = &sorted[i..j];
        let top = group.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
        if top > best_below {
            out.extend(group.iter().filter(|p| p.accuracy == top).map(|p| (*p).clone()));
            best_below = top;
        }
        i = j;
    }
    out
}

/// Reference implementation: keeps each point no other point dominates.
pub fn pareto_brute_force(points: &[EvalPoint]) -> Vec<EvalPoint> {
    let dominates = |a: &EvalPoint, b: &EvalPoint| {
        a.avg_cost <= b.avg_cost && a.accuracy >= b.accuracy && (a.avg_cost < b.avg_cost || a.accuracy > b.accuracy)
    };
    let mut keep: Vec<EvalPoint> =
        points.iter().filter(|p| !points.iter().any(|q| dominates(q, p))).cloned().collect();
    keep.sort_by(|a, b| a.avg_cost.total_cmp(&b.avg_cost));
    keep
}
