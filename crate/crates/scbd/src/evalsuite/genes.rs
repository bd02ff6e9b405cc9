//! Aggregation of per-cell embeddings into per-gene effect embeddings.

use std::collections::BTreeMap;

use super::EvalError;

/// Control-subtracted, standardized embedding per gene.
#[derive(Debug, Clone)]
pub struct GeneEmbeddingTable {
    /// Gene ids, ascending.
    pub genes: Vec<i32>,
    pub dim: usize,
    /// `genes.len() × dim`, row-major.
    pub rows: Vec<f32>,
    /// Dimensions whose variance across genes was zero; their standardized
    /// values are substituted with 0.
    pub degenerate_dims: Vec<usize>,
}

impl GeneEmbeddingTable {
    /// The embedding of the `k`'th gene in `genes` order.
    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("gene");
        for d in 0..self.dim {
            out.push_str(&format!(",z{d}"));
        }
        out.push('\n');
        for (k, &gene) in self.genes.iter().enumerate() {
            out.push_str(&gene.to_string());
            for v in self.row(k) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Collapses `n × dim` per-cell embeddings into one embedding per gene:
/// mean per guide, then mean of guide means per gene, then subtraction of
/// the control gene's embedding, then per-dimension standardization across
/// genes (population moments, so the table's own mean is exactly 0 and its
/// variance exactly 1 in every non-degenerate dimension).
pub fn aggregate_gene_embeddings(
    z: &[f32],
    dim: usize,
    genes: &[i32],
    guides: &[i32],
    control: i32,
) -> Result<GeneEmbeddingTable, EvalError> {
    assert!(dim > 0 && z.len() == genes.len() * dim, "z must be n × dim");
    assert_eq!(genes.len(), guides.len(), "gene and guide columns must align");
    if genes.is_empty() {
        return Err(EvalError::BadInput("no cells to aggregate".into()));
    }

    // Guide → (gene, per-dimension sum, count).
    let mut per_guide: BTreeMap<i32, (i32, Vec<f64>, usize)> = BTreeMap::new();
    for (cell, (&gene, &guide)) in genes.iter().zip(guides).enumerate() {
        let entry = per_guide
            .entry(guide)
            .or_insert_with(|| (gene, vec![0.0; dim], 0));
        if entry.0 != gene {
            return Err(EvalError::BadInput(format!(
                "guide {guide} maps to both gene {} and gene {gene}",
                entry.0
            )));
        }
        for d in 0..dim {
            entry.1[d] += f64::from(z[cell * dim + d]);
        }
        entry.2 += 1;
    }

    // Gene → (sum of guide means, guide count).
    let mut per_gene: BTreeMap<i32, (Vec<f64>, usize)> = BTreeMap::new();
    for (gene, sums, count) in per_guide.into_values() {
        let entry = per_gene
            .entry(gene)
            .or_insert_with(|| (vec![0.0; dim], 0));
        for d in 0..dim {
            entry.0[d] += sums[d] / count as f64;
        }
        entry.1 += 1;
    }
    let mut rows: BTreeMap<i32, Vec<f64>> = per_gene
        .into_iter()
        .map(|(gene, (sums, count))| {
            (
                gene,
                sums.into_iter().map(|s| s / count as f64).collect(),
            )
        })
        .collect();

    let control_row = rows
        .get(&control)
        .cloned()
        .ok_or(EvalError::MissingControl(control))?;
    for row in rows.values_mut() {
        for d in 0..dim {
            row[d] -= control_row[d];
        }
    }

    let gene_ids: Vec<i32> = rows.keys().copied().collect();
    let n = gene_ids.len() as f64;
    let mut degenerate = Vec::new();
    let mut out = vec![0.0f32; gene_ids.len() * dim];
    for d in 0..dim {
        let mean = rows.values().map(|r| r[d]).sum::<f64>() / n;
        let var = rows.values().map(|r| (r[d] - mean) * (r[d] - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd < 1e-12 {
            degenerate.push(d);
            continue;
        }
        for (k, row) in rows.values().enumerate() {
            out[k * dim + d] = ((row[d] - mean) / sd) as f32;
        }
    }

    Ok(GeneEmbeddingTable {
        genes: gene_ids,
        dim,
        rows: out,
        degenerate_dims: degenerate,
    })
}
