//! Best-first branch and bound for certified maxima over boxes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::IntervalBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnbSettings {
    /// Absolute gap at which the search stops.
    pub tol: f64,
    /// Gap relative to `|best value|` at which the search stops (0 disables).
    pub rel_tol: f64,
    pub max_nodes: usize,
    /// Record every evaluated node for a JSON dump.
    pub trace: bool,
}

impl Default for BnbSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            rel_tol: 0.0,
            max_nodes: 100_000,
            trace: false,
        }
    }
}

impl BnbSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }

    fn converged(&self, lower: f64, upper: f64) -> bool {
        let gap = upper - lower;
        gap <= self.tol || (self.rel_tol > 0.0 && gap <= self.rel_tol * lower.abs())
    }
}

/// What an evaluator reports for one box.
#[derive(Debug, Clone)]
pub struct NodeBound {
    /// Certified upper bound of the objective over the box.
    pub upper: f64,
    /// A feasible point in the box and its objective value.
    pub candidate: Vec<f64>,
    pub candidate_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceNode {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bound: f64,
    pub candidate_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnbOutcome {
    /// Best objective value found at a feasible point.
    pub lower: f64,
    /// Certified upper bound on the maximum.
    pub upper: f64,
    pub argmax: Vec<f64>,
    pub nodes: usize,
    pub budget_exceeded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceNode>>,
}

struct Pending {
    upper: f64,
    seq: usize,
    region: IntervalBox,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Highest bound first; earlier nodes win ties so the order is reproducible.
    fn cmp(&self, other: &Self) -> Ordering {
        self.upper.total_cmp(&other.upper).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Maximizes over `root`. `eval` returns `None` for boxes outside the feasible set.
///
/// The returned interval `[lower, upper]` always contains the true maximum
/// over the feasible part of `root`, whether or not the node budget ran out.
pub fn maximize<F>(root: IntervalBox, settings: &BnbSettings, mut eval: F) -> Option<BnbOutcome>
where
    F: FnMut(&IntervalBox) -> Option<NodeBound>,
{
    let mut trace = settings.trace.then(Vec::new);
    let record = |b: &IntervalBox, nb: &NodeBound, trace: &mut Option<Vec<TraceNode>>| {
        if let Some(t) = trace.as_mut() {
            t.push(TraceNode {
                lower: b.lower().to_vec(),
                upper: b.upper().to_vec(),
                bound: nb.upper,
                candidate_value: nb.candidate_value,
            });
        }
    };

    let first = eval(&root)?;
    record(&root, &first, &mut trace);
    let mut nodes = 1;
    let mut best = first.candidate_value;
    let mut argmax = first.candidate.clone();
    let mut settled_upper = f64::NEG_INFINITY;
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    heap.push(Pending {
        upper: first.upper.max(first.candidate_value),
        seq,
        region: root,
    });

    let mut budget_exceeded = false;
    while let Some(top) = heap.peek() {
        let global_upper = top.upper.max(settled_upper);
        if settings.converged(best, global_upper) {
            break;
        }
        if nodes >= settings.max_nodes {
            budget_exceeded = true;
            break;
        }
        let node = heap.pop().expect("peeked");
        if node.upper <= best {
            continue;
        }
        let Some((left, right)) = node.region.bisect() else {
            settled_upper = settled_upper.max(node.upper);
            continue;
        };
        for child in [left, right] {
            nodes += 1;
            let Some(nb) = eval(&child) else { continue };
            record(&child, &nb, &mut trace);
            if nb.candidate_value > best {
                best = nb.candidate_value;
                argmax = nb.candidate.clone();
            }
            // A child bound cannot exceed its parent's.
            let upper = nb.upper.min(node.upper).max(nb.candidate_value);
            if upper > best {
                seq += 1;
                heap.push(Pending {
                    upper,
                    seq,
                    region: child,
                });
            }
        }
    }

    let open_upper = heap.peek().map_or(f64::NEG_INFINITY, |p| p.upper);
    let upper = open_upper.max(settled_upper).max(best);
    Some(BnbOutcome {
        lower: best,
        upper,
        argmax,
        nodes,
        budget_exceeded,
        trace,
    })
}
