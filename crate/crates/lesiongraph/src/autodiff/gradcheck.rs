//! Central-difference verification of analytic gradients.

use super::{DiffError, DiffResult, ExprGraph, NodeId, Op};

/// Result of checking one parameter.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub node: NodeId,
    pub name: String,
    pub entries: usize,
    pub failed: usize,
    pub max_rel_error: f64,
    /// (row, col) of the entry attaining `max_rel_error`.
    pub worst_entry: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.failed == 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "gradient check: h={} tol={} params={}",
            self.h,
            self.tol,
            self.entries.len()
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<24} {:>4} entries  {:>2} failed  max rel err {:.3e} at ({}, {})",
                e.name, e.entries, e.failed, e.max_rel_error, e.worst_entry.0, e.worst_entry.1
            )?;
        }
        Ok(())
    }
}

/// Compare the analytic gradient of every parameter against the central
/// difference `(f(x+h) - f(x-h)) / 2h`, one entry at a time.
///
/// Relative error is `|fd - an| / max(|fd|, |an|, 1e-8)`. Mismatches are
/// reported, not fatal: the report lists per-parameter failure counts so a
/// broken op can be localised. A graph with no parameters yields an empty
/// report (which passes).
pub fn check_gradients(
    graph: &mut ExprGraph,
    root: NodeId,
    h: f64,
    tol: f64,
) -> DiffResult<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(DiffError::Contract(format!(
            "step size h={h} outside [1e-7, 1e-4]"
        )));
    }
    let value = graph.forward(root)?;
    if value.shape() != (1, 1) {
        return Err(DiffError::Contract(format!(
            "gradient check root must be 1x1, got {}x{}",
            value.rows(),
            value.cols()
        )));
    }
    let analytic = graph.backward(root)?;

    let mut entries = Vec::new();
    for (id, grad) in &analytic {
        let base = graph.value(*id).expect("leaf value").clone();
        let name = graph
            .node(*id)
            .name
            .clone()
            .unwrap_or_else(|| format!("#{}", id.0));
        let mut failed = 0usize;
        let mut max_rel = 0.0f64;
        let mut worst = (0, 0);
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let orig = base.get(r, c);

                let mut plus = base.clone();
                plus.set(r, c, orig + h);
                graph.set_value(*id, plus);
                let f_plus = graph.forward(root)?.scalar_value();

                let mut minus = base.clone();
                minus.set(r, c, orig - h);
                graph.set_value(*id, minus);
                let f_minus = graph.forward(root)?.scalar_value();

                let fd = (f_plus - f_minus) / (2.0 * h);
                let an = grad.get(r, c);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                if rel > max_rel {
                    max_rel = rel;
                    worst = (r, c);
                }
                if rel > tol {
                    failed += 1;
                }
            }
        }
        graph.set_value(*id, base.clone());
        entries.push(GradCheckEntry {
            node: *id,
            name,
            entries: base.len(),
            failed,
            max_rel_error: max_rel,
            worst_entry: worst,
        });
    }
    // Restore cached values to the unperturbed state.
    graph.forward(root)?;
    Ok(GradCheckReport { h, tol, entries })
}

/// Distance of the forwarded graph from every finite-difference hazard:
/// the smallest |input| over all ReLU / LeakyReLU entries and the smallest
/// top-two gap per column over all row-max-pool inputs. Central differences
/// are only trustworthy when this margin comfortably exceeds the step.
pub fn kink_margin(g: &ExprGraph) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..g.len() {
        let node = g.node(NodeId(i));
        match node.op {
            Op::Relu | Op::LeakyRelu(_) => {
                let input = g.value(node.inputs[0]).expect("forward has run");
                for &v in input.data() {
                    margin = margin.min(v.abs());
                }
            }
            Op::RowMaxPool => {
                let input = g.value(node.inputs[0]).expect("forward has run");
                for c in 0..input.cols() {
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for r in 0..input.rows() {
                        let v = input.get(r, c);
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                    if second.is_finite() {
                        margin = margin.min(best - second);
                    }
                }
            }
            _ => {}
        }
    }
    margin
}
