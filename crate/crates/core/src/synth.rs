//! Deterministic synthetic multi-context collections.
//!
//! Each row draws a group from the context's group proportions, a label from
//! that group's base rate, and Gaussian features around a per-(group, class)
//! mean. A context-level shift moves feature means along a fixed direction,
//! scaled per group, so covariate shift between contexts is known by
//! construction. Optional categorical features threshold a noisy copy of a
//! numeric feature.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Column, ContextCollection, DataError, Dataset, FeatureSpec, Group, Schema};
use crate::derive_seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A categorical feature obtained by cutting `x[source] + noise · N(0, 1)` at
/// the (ascending) `cuts`; levels are named `k0`, `k1`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentCategorical {
    pub source: usize,
    pub cuts: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub contexts: usize,
    pub rows_per_context: usize,
    /// W/B/O proportions: one entry for all contexts, or one per context.
    pub group_proportions: Vec<[f64; 3]>,
    /// Positive-class rate per group: one entry for all contexts, or one per
    /// context.
    pub base_rates: Vec<[f64; 3]>,
    /// `class_means[group][label]`, each of the numeric dimension.
    pub class_means: [[Vec<f64>; 2]; 3],
    /// Diagonal variances, same layout as `class_means`.
    pub class_variances: [[Vec<f64>; 2]; 3],
    /// Shift magnitude per context.
    pub shift_schedule: Vec<f64>,
    pub shift_direction: Vec<f64>,
    /// Multiplier of the context shift per group.
    pub group_shift_scale: [f64; 3],
    #[serde(default)]
    pub categorical: Vec<LatentCategorical>,
    pub seed: u64,
}

fn per_context<T: Copy>(values: &[T], c: usize) -> T {
    if values.len() == 1 {
        values[0]
    } else {
        values[c]
    }
}

impl SynthSpec {
    pub fn from_json_str(text: &str) -> Result<Self, SynthError> {
        let spec: SynthSpec =
            serde_json::from_str(text).map_err(|e| SynthError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SynthError::Spec(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn numeric_dims(&self) -> usize {
        self.shift_direction.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.contexts == 0 {
            return bad("at least one context is required".into());
        }
        let d = self.numeric_dims();
        if d == 0 {
            return bad("at least one numeric feature is required".into());
        }
        for (name, len) in [
            ("group_proportions", self.group_proportions.len()),
            ("base_rates", self.base_rates.len()),
        ] {
            if len != 1 && len != self.contexts {
                return bad(format!(
                    "{name} needs 1 or {} entries, got {len}",
                    self.contexts
                ));
            }
        }
        for p in &self.group_proportions {
            if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("group proportions {p:?} must be >= 0 and sum to 1"));
            }
        }
        for r in &self.base_rates {
            if r.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return bad(format!("base rates {r:?} must lie in (0, 1)"));
            }
        }
        for g in 0..3 {
            for y in 0..2 {
                if self.class_means[g][y].len() != d || self.class_variances[g][y].len() != d {
                    return bad(format!(
                        "means/variances of group {g} class {y} need {d} entries"
                    ));
                }
                if self.class_variances[g][y].iter().any(|&v| !(v > 0.0)) {
                    return bad("variances must be positive".into());
                }
            }
        }
        if self.shift_schedule.len() != self.contexts {
            return bad(format!(
                "shift_schedule needs {} entries, got {}",
                self.contexts,
                self.shift_schedule.len()
            ));
        }
        for c in &self.categorical {
            if c.source >= d {
                return bad(format!("categorical source {} out of range", c.source));
            }
            if c.cuts.windows(2).any(|w| !(w[0] < w[1])) {
                return bad("categorical cuts must be strictly ascending".into());
            }
        }
        Ok(())
    }

    pub fn context_id(&self, c: usize) -> String {
        format!("S{c:02}")
    }

    pub fn feature_specs(&self) -> Vec<FeatureSpec> {
        let mut out: Vec<FeatureSpec> = (0..self.numeric_dims())
            .map(|j| FeatureSpec::numeric(&format!("x{j}")))
            .collect();
        out.extend(
            (0..self.categorical.len()).map(|j| FeatureSpec::categorical(&format!("cat{j}"))),
        );
        out
    }

    /// Schema matching the CSV layout written by [`write_collection_csv`].
    pub fn schema(&self) -> Schema {
        Schema {
            features: self.feature_specs(),
            label: LABEL_COLUMN.into(),
            label_threshold: 0.5,
            group: GROUP_COLUMN.into(),
            context: None,
            filters: None,
        }
    }

    fn base(dims: usize, seed: u64) -> Self {
        let mut means: [[Vec<f64>; 2]; 3] = Default::default();
        for g in means.iter_mut() {
            let mut neg = vec![0.0; dims];
            let mut pos = vec![0.0; dims];
            neg[0] = -0.75;
            pos[0] = 0.75;
            if dims > 1 {
                neg[1] = -0.25;
                pos[1] = 0.25;
            }
            *g = [neg, pos];
        }
        let variances: [[Vec<f64>; 2]; 3] =
            std::array::from_fn(|_| [vec![1.0; dims], vec![1.0; dims]]);
        Self {
            contexts: 1,
            rows_per_context: 1000,
            group_proportions: vec![[0.7, 0.15, 0.15]],
            base_rates: vec![[0.4, 0.4, 0.4]],
            class_means: means,
            class_variances: variances,
            shift_schedule: vec![0.0],
            shift_direction: {
                let mut d = vec![0.0; dims];
                d[0] = 1.0;
                if dims > 2 {
                    d[2] = 1.0;
                }
                d
            },
            group_shift_scale: [0.25, 1.0, 1.0],
            categorical: Vec::new(),
            seed,
        }
    }

    /// Contexts at shift magnitudes `0, step, 2·step, ...`; groups share their
    /// class-conditional distributions, the shift mostly moves the minority
    /// groups.
    pub fn shift_levels(levels: usize, rows: usize, step: f64, seed: u64) -> Self {
        let mut s = Self::base(3, seed);
        s.contexts = levels;
        s.rows_per_context = rows;
        s.shift_schedule = (0..levels).map(|i| i as f64 * step).collect();
        s
    }

    /// Contexts that differ in group composition, group base rates and
    /// covariate shift. Feature `x1` is a label-free proxy of group
    /// membership, so a model fitted where group base rates diverge learns a
    /// group-dependent score offset; the base rates are centred on the
    /// majority's so pooling averages that offset away.
    pub fn heterogeneous(contexts: usize, rows: usize, seed: u64) -> Self {
        let mut s = Self::base(3, seed);
        for (g, offset) in [(0usize, 0.0), (1, 1.5), (2, -1.5)] {
            for y in 0..2 {
                s.class_means[g][y][1] = offset;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "heterogeneous"));
        s.contexts = contexts;
        s.rows_per_context = rows;
        s.group_proportions = (0..contexts)
            .map(|_| {
                let w = rng.random_range(0.5..0.85);
                let b = (1.0 - w) * rng.random_range(0.3..0.7);
                [w, b, 1.0 - w - b]
            })
            .collect();
        s.base_rates = (0..contexts)
            .map(|_| {
                [
                    0.4,
                    rng.random_range(0.05..0.75),
                    rng.random_range(0.05..0.75),
                ]
            })
            .collect();
        s.shift_schedule = (0..contexts).map(|_| rng.random_range(-1.0..1.0)).collect();
        s.shift_direction = vec![0.0, 0.0, 1.0];
        s.group_shift_scale = [1.0, 1.0, 1.0];
        s
    }

    /// Group B's features sit one unit lower than W's in both classes and the
    /// groups have different base rates, so a single shared model
    /// systematically under-scores B.
    pub fn planted_bias(contexts: usize, rows: usize, seed: u64) -> Self {
        let mut s = Self::base(3, seed);
        for y in 0..2 {
            s.class_means[1][y][0] -= 1.0;
            s.class_means[1][y][1] -= 0.5;
            s.class_means[2][y][0] -= 0.4;
        }
        s.contexts = contexts;
        s.rows_per_context = rows;
        s.group_proportions = vec![[0.6, 0.25, 0.15]];
        s.base_rates = vec![[0.45, 0.3, 0.35]];
        s.shift_schedule = vec![0.0; contexts];
        s
    }

    pub fn with_categorical(mut self) -> Self {
        self.categorical = vec![LatentCategorical {
            source: 0,
            cuts: vec![-0.5, 0.5],
            noise: 0.5,
        }];
        self
    }
}

pub const LABEL_COLUMN: &str = "label";
pub const GROUP_COLUMN: &str = "RAC1P";

fn generate_context(spec: &SynthSpec, c: usize) -> Result<Dataset, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &spec.context_id(c)));
    let d = spec.numeric_dims();
    let props = per_context(&spec.group_proportions, c);
    let rates = per_context(&spec.base_rates, c);
    let shift = spec.shift_schedule[c];
    let n = spec.rows_per_context;

    let mut numeric: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d];
    let mut cats: Vec<Vec<Arc<str>>> = vec![Vec::with_capacity(n); spec.categorical.len()];
    let levels: Vec<Vec<Arc<str>>> = spec
        .categorical
        .iter()
        .map(|c| {
            (0..=c.cuts.len())
                .map(|k| Arc::from(format!("k{k}")))
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut row = vec![0.0; d];

    for _ in 0..n {
        let u: f64 = rng.random();
        let g = if u < props[0] {
            Group::W
        } else if u < props[0] + props[1] {
            Group::B
        } else {
            Group::O
        };
        let gi = g.index();
        let y = u8::from(rng.random::<f64>() < rates[gi]);
        let yi = usize::from(y);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = spec.class_means[gi][yi][j]
                + shift * spec.shift_direction[j] * spec.group_shift_scale[gi]
                + spec.class_variances[gi][yi][j].sqrt() * z;
            numeric[j].push(row[j]);
        }
        for (k, cat) in spec.categorical.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let latent = row[cat.source] + cat.noise * z;
            let level = cat.cuts.iter().filter(|&&cut| latent > cut).count();
            cats[k].push(levels[k][level].clone());
        }
        labels.push(y);
        groups.push(g);
    }

    let columns = numeric
        .into_iter()
        .map(Column::Numeric)
        .chain(cats.into_iter().map(Column::Categorical))
        .collect();
    Ok(Dataset::new(
        &spec.context_id(c),
        spec.feature_specs(),
        columns,
        labels,
        groups,
        None,
    )?)
}

/// Generates every context. Contexts use independent seeds derived from the
/// spec seed and the context id, so results do not depend on thread count.
pub fn generate_collection(spec: &SynthSpec) -> Result<ContextCollection, SynthError> {
    spec.validate()?;
    let datasets: Vec<Dataset> = (0..spec.contexts)
        .into_par_iter()
        .map(|c| generate_context(spec, c))
        .collect::<Result<_, _>>()?;
    let mut coll = ContextCollection::new();
    for ds in datasets {
        coll.insert(ds)?;
    }
    Ok(coll)
}

fn race_code(g: Group, row: usize) -> u8 {
    match g {
        Group::W => 1,
        Group::B => 2,
        // spread "Other" over the remaining RAC1P codes
        Group::O => 3 + (row % 7) as u8,
    }
}

/// Writes a dataset in the CSV layout ingested with [`SynthSpec::schema`].
pub fn write_dataset_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), SynthError> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ds.features().iter().map(|f| f.name.clone()).collect();
    header.push(LABEL_COLUMN.into());
    header.push(GROUP_COLUMN.into());
    wtr.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds
            .columns()
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => format!("{:?}", v[i]),
                Column::Categorical(v) => v[i].to_string(),
            })
            .collect();
        rec.push(ds.labels()[i].to_string());
        rec.push(race_code(ds.groups()[i], i).to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes one `<ID>.csv` per context into `dir`.
pub fn write_collection_csv(coll: &ContextCollection, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (id, ds) in coll.iter() {
        let file = std::fs::File::create(dir.join(format!("{id}.csv")))?;
        write_dataset_csv(ds, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_group_stats;

    #[test]
    fn deterministic_by_seed() {
        let spec = SynthSpec::shift_levels(3, 200, 1.0, 7);
        let a = generate_collection(&spec).unwrap();
        let b = generate_collection(&spec).unwrap();
        for ((ia, da), (ib, db)) in a.iter().zip(b.iter()) {
            assert_eq!(ia, ib);
            assert_eq!(da, db);
        }
        let other = generate_collection(&SynthSpec::shift_levels(3, 200, 1.0, 8)).unwrap();
        assert_ne!(a.get("S00"), other.get("S00"));
    }

    #[test]
    fn realized_proportions_and_imbalance() {
        let spec = SynthSpec::shift_levels(1, 10_000, 0.0, 3);
        let coll = generate_collection(&spec).unwrap();
        let stats = compute_group_stats(coll.get("S00").unwrap()).unwrap();
        for (g, &p) in spec.group_proportions[0].iter().enumerate() {
            let se = (p * (1.0 - p) / 10_000.0).sqrt();
            assert!((stats.group_rates[g] - p).abs() <= 3.0 * se, "group {g}");
        }
        let ir = stats.imbalance.value().unwrap();
        assert!((1.4..=1.6).contains(&ir), "IR {ir}");
    }

    #[test]
    fn shift_moves_means() {
        let spec = SynthSpec::shift_levels(2, 20_000, 2.0, 11);
        let coll = generate_collection(&spec).unwrap();
        let mean_x2 = |id: &str| match &coll.get(id).unwrap().columns()[2] {
            Column::Numeric(v) => v.iter().sum::<f64>() / v.len() as f64,
            _ => unreachable!(),
        };
        // x2 has zero class means; shift 2 scaled by group: 0.7·0.5 + 0.3·2
        let expected = 2.0 * (0.7 * 0.25 + 0.3 * 1.0);
        assert!(mean_x2("S00").abs() < 0.05);
        assert!((mean_x2("S01") - expected).abs() < 0.05);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = SynthSpec::shift_levels(2, 10, 1.0, 0);
        spec.group_proportions = vec![[0.5, 0.5, 0.5]];
        assert!(matches!(spec.validate(), Err(SynthError::Spec(_))));
        let mut spec = SynthSpec::shift_levels(2, 10, 1.0, 0);
        spec.base_rates = vec![[0.0, 0.5, 0.5]];
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::shift_levels(2, 10, 1.0, 0);
        spec.class_variances[0][0][0] = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::shift_levels(2, 10, 1.0, 0);
        spec.shift_schedule.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = SynthSpec::heterogeneous(4, 100, 5).with_categorical();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&text).unwrap(), spec);
    }
}
