//! Complex-recovery scoring: precision-recall over pairwise cosine
//! similarities thresholded at the 80th through 100th percentiles.

use crate::datagen::ComplexGraph;

use super::genes::GeneEmbeddingTable;
use super::stats::percentile;
use super::EvalError;

/// Which percentile tails count as predicted-related.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tail {
    /// Similarities above the upper *or* below the mirrored lower threshold.
    #[default]
    TwoTailed,
    /// Similarities above the upper threshold only.
    Upper,
}

/// One thresholded operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub percentile: u32,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points for i ∈ {80, …, 100} plus the area under them.
#[derive(Debug, Clone)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Trapezoidal area over the covered recall span, normalized by that
    /// span; an ideal embedding scores 1.0 and an uninformative one the
    /// positive-pair base rate.
    pub area: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("percentile,precision,recall\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.percentile, p.precision, p.recall));
        }
        out
    }
}

/// Scores how well embedding cosine similarity separates same-complex gene
/// pairs. For each integer percentile i ∈ {80, …, 100} a pair is predicted
/// related when its similarity lies strictly above the i'th percentile (or,
/// two-tailed, strictly below the (100−i)'th). Strict comparisons keep
/// massed similarity values (ties at the threshold) out of the predicted
/// set, so an ideal one-hot embedding scores exactly 1.0. Thresholds that
/// predict nothing (always the case at i = 100) define no operating point
/// and are dropped; precision at such points would be arbitrary and would
/// bias the area.
pub fn corum_style_auprc(
    table: &GeneEmbeddingTable,
    graph: &ComplexGraph,
    tail: Tail,
) -> Result<PrCurve, EvalError> {
    let n = table.genes.len();
    if n < 2 {
        return Err(EvalError::BadInput(format!(
            "complex recovery needs at least two genes, found {n}"
        )));
    }
    if graph.n_complexes() < 2 {
        return Err(EvalError::BadInput(
            "complex recovery needs at least two complexes".into(),
        ));
    }
    for &gene in &table.genes {
        if gene < 0 || gene as usize >= graph.n_genes() {
            return Err(EvalError::BadInput(format!(
                "gene {gene} is not in the complex graph"
            )));
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|k| {
            table
                .row(k)
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut sims = Vec::with_capacity(n * (n - 1) / 2);
    let mut positive = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            let dot: f64 = table
                .row(a)
                .iter()
                .zip(table.row(b))
                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                .sum();
            let sim = if norms[a] < 1e-12 || norms[b] < 1e-12 {
                0.0
            } else {
                dot / (norms[a] * norms[b])
            };
            sims.push(sim);
            positive.push(graph.is_positive(table.genes[a] as usize, table.genes[b] as usize));
        }
    }
    let total_positive = positive.iter().filter(|&&p| p).count();
    if total_positive == 0 {
        return Err(EvalError::BadInput(
            "no same-complex pair among the table's genes".into(),
        ));
    }

    let mut points = Vec::with_capacity(21);
    for i in 80..=100u32 {
        let hi = percentile(&sims, f64::from(i));
        let lo = percentile(&sims, f64::from(100 - i));
        let mut tp = 0usize;
        let mut predicted = 0usize;
        for (&sim, &pos) in sims.iter().zip(&positive) {
            let hit = sim > hi || (tail == Tail::TwoTailed && sim < lo);
            if hit {
                predicted += 1;
                if pos {
                    tp += 1;
                }
            }
        }
        if predicted == 0 {
            continue;
        }
        points.push(PrPoint {
            percentile: i,
            precision: tp as f64 / predicted as f64,
            recall: tp as f64 / total_positive as f64,
        });
    }
    if points.is_empty() {
        return Ok(PrCurve { points, area: 0.0 });
    }

    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let span = sorted.last().expect("non-empty").0;
    let area = if span <= 0.0 {
        0.0
    } else {
        // Extend the lowest-recall point back to recall zero, then integrate.
        let mut prev = (0.0, sorted[0].1);
        let mut acc = 0.0;
        for &(r, p) in &sorted {
            acc += (r - prev.0) * (p + prev.1) / 2.0;
            prev = (r, p);
        }
        acc / span
    };
    Ok(PrCurve { points, area })
}
