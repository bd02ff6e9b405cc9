//! Pooled-screen simulator with ground-truth protein complexes and a
//! planted well (batch) effect.
//!
//! Genes partition into complexes of a fixed size; gene 0 is a non-targeting
//! control with zero effect. Each complex gets a random unit direction
//! `u_k`; gene `g` in complex `k` perturbs cells by `μ_g = u_k + 0.3·v_g`
//! with `v_g` a random unit deviation, and every guide adds a further
//! 0.1-scaled unit jitter. Wells are assigned per cell from a dedicated
//! substream — the screen is pooled, so every well samples the same mixture
//! of guides and carries no composition signal. A well contributes an
//! additive shift `b_w` (norm proportional to `batch_strength`) and a
//! per-feature gain; a cell is
//!
//! ```text
//! x = effect_guide ⊙ gain_well + shift_well + N(0, 0.5²) per feature
//! ```
//!
//! At `batch_strength = 0` the gains are 1 and the shifts 0, so wells are
//! statistically identical; at the default strength a linear probe reads the
//! well off raw features almost perfectly, while per-gene aggregation of raw
//! features is corrupted by the shift each guide happens to soak up.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use super::{DataError, Dataset, DatasetKind, ScreenLabels};
use crate::util::{kv, rng::substream};

/// Scale of the per-gene deviation from the complex direction.
pub const GENE_DEVIATION: f64 = 0.3;
/// Scale of the per-guide jitter around the gene effect.
pub const GUIDE_JITTER: f64 = 0.1;
/// Standard deviation of per-feature cell noise.
pub const CELL_NOISE_SD: f64 = 0.5;
/// Norm of a well's additive shift per unit of batch strength.
pub const WELL_SHIFT_SCALE: f64 = 3.0;
/// Half-width of the per-feature well gain deviation per unit of strength.
pub const WELL_GAIN_SCALE: f64 = 0.4;

/// Generator settings. `genes` counts the control, so with `complex_size`
/// 5 a 200-gene screen has 40 complexes, the first containing the control.
#[derive(Debug, Clone)]
pub struct OpsSimConfig {
    pub genes: usize,
    pub complex_size: usize,
    pub wells: usize,
    pub guides_per_gene: usize,
    /// The non-targeting control gets a larger guide library.
    pub control_guides: usize,
    pub cells_per_guide: usize,
    /// Feature dimension (ignored when `pseudo_image` is set).
    pub features: usize,
    /// Emit 4×16×16 pseudo-images instead of flat vectors.
    pub pseudo_image: bool,
    pub batch_strength: f64,
    pub seed: u64,
}

impl Default for OpsSimConfig {
    fn default() -> Self {
        Self {
            genes: 200,
            complex_size: 5,
            wells: 8,
            guides_per_gene: 4,
            control_guides: 16,
            cells_per_guide: 64,
            features: 32,
            pseudo_image: false,
            batch_strength: 1.0,
            seed: 0,
        }
    }
}

impl OpsSimConfig {
    pub fn feature_shape(&self) -> Vec<usize> {
        if self.pseudo_image {
            vec![4, 16, 16]
        } else {
            vec![self.features]
        }
    }

    fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.complex_size < 2 {
            return Err(DataError::BadConfig("complex_size must be >= 2".into()));
        }
        if self.genes < self.complex_size || self.genes % self.complex_size != 0 {
            return Err(DataError::BadConfig(format!(
                "genes ({}) must be a positive multiple of complex_size ({})",
                self.genes, self.complex_size
            )));
        }
        if self.wells < 2 {
            return Err(DataError::BadConfig("need at least 2 wells".into()));
        }
        if self.guides_per_gene == 0 || self.control_guides == 0 || self.cells_per_guide == 0 {
            return Err(DataError::BadConfig(
                "guides_per_gene, control_guides and cells_per_guide must be >= 1".into(),
            ));
        }
        if !self.pseudo_image && self.features == 0 {
            return Err(DataError::BadConfig("features must be >= 1".into()));
        }
        if !self.batch_strength.is_finite() || self.batch_strength < 0.0 {
            return Err(DataError::BadConfig(
                "batch_strength must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Gene→complex assignment with the same-complex pair relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexGraph {
    complex_of: Vec<usize>,
}

impl ComplexGraph {
    /// Contiguous blocks: genes `[k·size, (k+1)·size)` form complex `k`.
    pub fn contiguous(genes: usize, complex_size: usize) -> Self {
        ComplexGraph {
            complex_of: (0..genes).map(|g| g / complex_size).collect(),
        }
    }

    pub fn from_assignment(complex_of: Vec<usize>) -> Result<Self, DataError> {
        if complex_of.is_empty() {
            return Err(DataError::BadConfig("empty complex assignment".into()));
        }
        let k = complex_of.iter().max().unwrap() + 1;
        let mut sizes = vec![0usize; k];
        for &c in &complex_of {
            sizes[c] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s < 2) {
            return Err(DataError::BadConfig(format!(
                "complex {c} has {} member(s); every complex needs >= 2",
                sizes[c]
            )));
        }
        Ok(ComplexGraph { complex_of })
    }

    pub fn n_genes(&self) -> usize {
        self.complex_of.len()
    }

    pub fn n_complexes(&self) -> usize {
        self.complex_of.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn complex_of(&self, gene: usize) -> usize {
        self.complex_of[gene]
    }

    /// Whether two distinct genes share a complex.
    pub fn is_positive(&self, a: usize, b: usize) -> bool {
        a != b && self.complex_of[a] == self.complex_of[b]
    }

    /// All unordered same-complex pairs, `(a, b)` with `a < b`.
    pub fn positive_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for a in 0..self.n_genes() {
            for b in a + 1..self.n_genes() {
                if self.complex_of[a] == self.complex_of[b] {
                    pairs.push((a, b));
                }
            }
        }
        pairs
    }

    /// Serializes the assignment as key=value text.
    pub fn render(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("genes".to_string(), self.n_genes().to_string());
        let csv: Vec<String> = self.complex_of.iter().map(|c| c.to_string()).collect();
        map.insert("assignment".to_string(), csv.join(","));
        kv::render(&map)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let map = kv::parse(text).map_err(|e| DataError::BadConfig(e.to_string()))?;
        let reader = kv::KvReader::new(&map);
        let assignment = reader
            .raw("assignment")
            .ok_or_else(|| DataError::BadConfig("complex graph is missing `assignment`".into()))?;
        let complex_of: Vec<usize> = assignment
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| DataError::BadConfig(format!("bad complex id {tok:?}")))
            })
            .collect::<Result<_, _>>()?;
        if let Some(genes) = reader
            .parse_as::<usize>("genes")
            .map_err(|e| DataError::BadConfig(e.to_string()))?
        {
            if genes != complex_of.len() {
                return Err(DataError::BadConfig(format!(
                    "graph says {genes} genes but assignment lists {}",
                    complex_of.len()
                )));
            }
        }
        Self::from_assignment(complex_of)
    }
}

/// A generated screen: the cell dataset, the ground-truth complex graph,
/// and the noiseless per-gene effect vectors (G×F row-major) they were
/// built from.
pub struct OpsSim {
    pub dataset: Dataset,
    pub graph: ComplexGraph,
    pub gene_effects: Vec<f32>,
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a screen from `cfg`.
pub fn generate(cfg: &OpsSimConfig) -> Result<OpsSim, DataError> {
    cfg.validate()?;
    let f = cfg.feature_len();
    let g = cfg.genes;
    let graph = ComplexGraph::contiguous(g, cfg.complex_size);

    let complex_dirs: Vec<Vec<f64>> = (0..graph.n_complexes())
        .map(|k| unit_vector(&mut substream(cfg.seed, "ops-complex", k as u64), f))
        .collect();
    let mut gene_effects_f64 = vec![vec![0.0f64; f]; g];
    for gene in 1..g {
        let dev = unit_vector(&mut substream(cfg.seed, "ops-gene", gene as u64), f);
        let dir = &complex_dirs[graph.complex_of(gene)];
        for i in 0..f {
            gene_effects_f64[gene][i] = dir[i] + GENE_DEVIATION * dev[i];
        }
    }

    // Guide table: control guides first, then guides_per_gene per gene.
    let n_guides = cfg.control_guides + (g - 1) * cfg.guides_per_gene;
    let mut guide_gene = Vec::with_capacity(n_guides);
    guide_gene.resize(cfg.control_guides, 0usize);
    for gene in 1..g {
        guide_gene.extend(std::iter::repeat(gene).take(cfg.guides_per_gene));
    }
    let guide_effects: Vec<Vec<f64>> = (0..n_guides)
        .map(|q| {
            let gene = guide_gene[q];
            if gene == 0 {
                return vec![0.0; f];
            }
            let jitter = unit_vector(&mut substream(cfg.seed, "ops-guide", q as u64), f);
            (0..f)
                .map(|i| gene_effects_f64[gene][i] + GUIDE_JITTER * jitter[i])
                .collect()
        })
        .collect();

    let shift_norm = WELL_SHIFT_SCALE * cfg.batch_strength;
    let well_shifts: Vec<Vec<f64>> = (0..cfg.wells)
        .map(|w| {
            unit_vector(&mut substream(cfg.seed, "ops-well-shift", w as u64), f)
                .into_iter()
                .map(|x| x * shift_norm)
                .collect()
        })
        .collect();
    let well_gains: Vec<Vec<f64>> = (0..cfg.wells)
        .map(|w| {
            let mut rng = substream(cfg.seed, "ops-well-gain", w as u64);
            (0..f)
                .map(|_| 1.0 + WELL_GAIN_SCALE * cfg.batch_strength * rng.gen_range(-1.0..=1.0))
                .collect()
        })
        .collect();

    let n_cells = n_guides * cfg.cells_per_guide;
    let noise = Normal::new(0.0, CELL_NOISE_SD).unwrap();
    let mut features = Vec::with_capacity(n_cells * f);
    let mut y = Vec::with_capacity(n_cells);
    let mut e = Vec::with_capacity(n_cells);
    let mut gene_col = Vec::with_capacity(n_cells);
    let mut guide_col = Vec::with_capacity(n_cells);
    let mut well_col = Vec::with_capacity(n_cells);
    for q in 0..n_guides {
        for j in 0..cfg.cells_per_guide {
            let cell = (q * cfg.cells_per_guide + j) as u64;
            let mut rng = substream(cfg.seed, "ops-cell", cell);
            let well = rng.gen_range(0..cfg.wells);
            let effect = &guide_effects[q];
            let (gain, shift) = (&well_gains[well], &well_shifts[well]);
            for i in 0..f {
                let v = effect[i] * gain[i] + shift[i] + noise.sample(&mut rng);
                features.push(v as f32);
            }
            let gene = guide_gene[q];
            y.push(gene as i32);
            e.push(well as i32);
            gene_col.push(gene as i32);
            guide_col.push(q as i32);
            well_col.push(well as i32);
        }
    }

    let dataset = Dataset {
        kind: DatasetKind::Screen,
        feature_shape: cfg.feature_shape(),
        features,
        y,
        e,
        screen: Some(ScreenLabels {
            gene: gene_col,
            guide: guide_col,
            well: well_col,
        }),
    };
    dataset.validate()?;
    let gene_effects = gene_effects_f64
        .into_iter()
        .flat_map(|row| row.into_iter().map(|v| v as f32))
        .collect();
    Ok(OpsSim {
        dataset,
        graph,
        gene_effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(batch_strength: f64) -> OpsSimConfig {
        OpsSimConfig {
            genes: 20,
            complex_size: 5,
            wells: 4,
            guides_per_gene: 4,
            control_guides: 8,
            cells_per_guide: 32,
            features: 16,
            batch_strength,
            seed: 11,
            ..OpsSimConfig::default()
        }
    }

    #[test]
    fn default_graph_has_400_positive_pairs() {
        let graph = ComplexGraph::contiguous(200, 5);
        assert_eq!(graph.n_complexes(), 40);
        assert_eq!(graph.positive_pairs().len(), 400);
        assert!(graph.is_positive(0, 4));
        assert!(!graph.is_positive(4, 5));
        assert!(!graph.is_positive(3, 3));
    }

    #[test]
    fn guide_and_cell_bookkeeping() {
        let sim = generate(&tiny(1.0)).unwrap();
        let ds = &sim.dataset;
        let n_guides = 8 + 19 * 4;
        assert_eq!(ds.len(), n_guides * 32);
        let screen = ds.screen.as_ref().unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.y[i], screen.gene[i]);
            assert_eq!(ds.e[i], screen.well[i]);
        }
        // Control guides 0..8 map to gene 0; gene 1 owns guides 8..12.
        let guide_of_gene = |g: i32| -> Vec<i32> {
            let mut guides: Vec<i32> = screen
                .gene
                .iter()
                .zip(&screen.guide)
                .filter(|(&gene, _)| gene == g)
                .map(|(_, &q)| q)
                .collect();
            guides.sort_unstable();
            guides.dedup();
            guides
        };
        assert_eq!(guide_of_gene(0), (0..8).collect::<Vec<_>>());
        assert_eq!(guide_of_gene(1), (8..12).collect::<Vec<_>>());
    }

    #[test]
    fn zero_strength_wells_are_statistically_identical() {
        let cfg = OpsSimConfig {
            cells_per_guide: 128, // 84 guides → ~10k cells
            ..tiny(0.0)
        };
        let sim = generate(&cfg).unwrap();
        let ds = &sim.dataset;
        let f = ds.feature_len();
        let mut sums = vec![vec![0.0f64; f]; cfg.wells];
        let mut sq = vec![0.0f64; f];
        let mut counts = vec![0usize; cfg.wells];
        for i in 0..ds.len() {
            let w = ds.e[i] as usize;
            counts[w] += 1;
            for (d, &v) in ds.features_of(i).iter().enumerate() {
                sums[w][d] += v as f64;
                sq[d] += (v as f64) * (v as f64);
            }
        }
        let n_total: usize = counts.iter().sum();
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            for d in 0..f {
                let ma = sums[a][d] / counts[a] as f64;
                let mb = sums[b][d] / counts[b] as f64;
                let var = sq[d] / n_total as f64
                    - (sums.iter().map(|s| s[d]).sum::<f64>() / n_total as f64).powi(2);
                let limit = 3.0 * var.sqrt() * (1.0 / counts[a] as f64 + 1.0 / counts[b] as f64).sqrt();
                assert!(
                    (ma - mb).abs() <= limit,
                    "wells {a},{b} differ on feature {d}: |{ma:.4} - {mb:.4}| > {limit:.4}"
                );
            }
        }
    }

    #[test]
    fn same_complex_effects_are_more_aligned() {
        let sim = generate(&tiny(1.0)).unwrap();
        let f = sim.dataset.feature_len();
        let cos = |a: usize, b: usize| -> f64 {
            let (ra, rb) = (
                &sim.gene_effects[a * f..(a + 1) * f],
                &sim.gene_effects[b * f..(b + 1) * f],
            );
            let dot: f64 = ra.iter().zip(rb).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (mut same, mut same_n, mut cross, mut cross_n) = (0.0, 0, 0.0, 0);
        for a in 1..20 {
            for b in a + 1..20 {
                if sim.graph.is_positive(a, b) {
                    same += cos(a, b);
                    same_n += 1;
                } else {
                    cross += cos(a, b);
                    cross_n += 1;
                }
            }
        }
        assert!(same / same_n as f64 > cross / cross_n as f64 + 0.3);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate(&tiny(1.0)).unwrap();
        let b = generate(&tiny(1.0)).unwrap();
        assert_eq!(a.dataset.features, b.dataset.features);
        assert_eq!(a.dataset.e, b.dataset.e);
        let c = generate(&OpsSimConfig {
            seed: 12,
            ..tiny(1.0)
        })
        .unwrap();
        assert_ne!(a.dataset.features, c.dataset.features);
    }

    #[test]
    fn rejects_bad_divisibility_and_well_count() {
        assert!(matches!(
            generate(&OpsSimConfig {
                genes: 21,
                ..tiny(1.0)
            }),
            Err(DataError::BadConfig(_))
        ));
        assert!(matches!(
            generate(&OpsSimConfig {
                wells: 1,
                ..tiny(1.0)
            }),
            Err(DataError::BadConfig(_))
        ));
    }

    #[test]
    fn graph_text_round_trips() {
        let graph = ComplexGraph::contiguous(20, 5);
        let text = graph.render();
        let back = ComplexGraph::parse(&text).unwrap();
        assert_eq!(back, graph);
        assert!(ComplexGraph::parse("assignment = 0,0,1\n").is_err()); // complex 1 too small
    }

    #[test]
    fn pseudo_image_shape() {
        let cfg = OpsSimConfig {
            pseudo_image: true,
            cells_per_guide: 2,
            ..tiny(1.0)
        };
        let sim = generate(&cfg).unwrap();
        assert_eq!(sim.dataset.feature_shape, vec![4, 16, 16]);
        assert_eq!(sim.dataset.feature_len(), 1024);
    }
}
