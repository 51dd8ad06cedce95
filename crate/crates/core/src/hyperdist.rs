//! Log-uniform distributions over bounded hyperparameters.
//!
//! A [`HyperSchema`] fixes the name, role, and global feasible range of each
//! tuned hyperparameter. A [`MemberDistribution`] gives one ensemble member's
//! current per-dimension bounds inside that range; the density is uniform in
//! log space, so entropy and mean have closed forms and samples can be
//! written as a deterministic map of uniform draws, which is what the tuning
//! step differentiates through.
//!
//! Bounds are stored in log space. That makes projection exact: feasible
//! bounds pass through bit-identical, and projecting twice equals projecting
//! once.

use ndarray::Array2;
use rand::Rng;

/// Narrowest allowed log-width of a member bound. Projection widens anything
/// tighter, which keeps entropy finite and sampling well defined.
pub const MIN_LOG_WIDTH: f64 = 1e-4;

/// Widening trigger sits a hair below [`MIN_LOG_WIDTH`] so that a width of
/// exactly the minimum, reconstructed through rounding, is not re-widened.
const WIDTH_TRIGGER: f64 = MIN_LOG_WIDTH * (1.0 - 1e-9);

/// What a hyperparameter dimension controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    /// L2 penalty strength on weight matrices.
    L2Weights,
    /// L2 penalty strength on biases.
    L2Biases,
    /// Dropout rate.
    Dropout,
    /// Label smoothing coefficient.
    LabelSmoothing,
}

/// Which layers a schema entry applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One value shared by every layer of the matching kind.
    Global,
    /// One specific trainable layer, counted over the model's weight layers.
    Layer(usize),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaEntry {
    pub name: String,
    pub kind: HyperKind,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    pub lower: f64,
    pub upper: f64,
}

fn default_scope() -> Scope {
    Scope::Global
}

/// Failures constructing or using schemas and member distributions.
#[derive(Debug, thiserror::Error)]
pub enum DistError {
    #[error("schema must have at least one entry")]
    EmptySchema,
    #[error("duplicate hyperparameter name {0}")]
    DuplicateName(String),
    #[error("bad bounds for {name}: [{lower}, {upper}] must satisfy 0 < lower < upper < inf with log-width >= {MIN_LOG_WIDTH}")]
    BadBounds {
        name: String,
        lower: f64,
        upper: f64,
    },
    #[error("{name}: upper bound {upper} exceeds the {limit} cap for {kind:?}")]
    KindCap {
        name: String,
        kind: HyperKind,
        upper: f64,
        limit: f64,
    },
    #[error("dimension mismatch: got {got} dims, want {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("degenerate bounds in dim {dim}: lower == upper")]
    DegenerateBounds { dim: usize },
    #[error("non-positive, non-finite, or inverted bound in dim {dim}")]
    InvalidBound { dim: usize },
}

/// Names, kinds, and global feasible ranges of all tuned hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<SchemaEntry>", into = "Vec<SchemaEntry>")]
pub struct HyperSchema {
    entries: Vec<SchemaEntry>,
}

impl TryFrom<Vec<SchemaEntry>> for HyperSchema {
    type Error = DistError;
    fn try_from(entries: Vec<SchemaEntry>) -> Result<Self, DistError> {
        HyperSchema::new(entries)
    }
}

impl From<HyperSchema> for Vec<SchemaEntry> {
    fn from(s: HyperSchema) -> Self {
        s.entries
    }
}

impl HyperSchema {
    pub fn new(entries: Vec<SchemaEntry>) -> Result<Self, DistError> {
        if entries.is_empty() {
            return Err(DistError::EmptySchema);
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|p| p.name == e.name) {
                return Err(DistError::DuplicateName(e.name.clone()));
            }
            let wide_enough =
                e.upper > e.lower && e.upper.ln() - e.lower.ln() >= MIN_LOG_WIDTH;
            if !(e.lower > 0.0 && e.upper.is_finite() && wide_enough) {
                return Err(DistError::BadBounds {
                    name: e.name.clone(),
                    lower: e.lower,
                    upper: e.upper,
                });
            }
            let cap = match e.kind {
                HyperKind::Dropout => Some(0.95),
                HyperKind::LabelSmoothing => Some(0.3),
                _ => None,
            };
            if let Some(limit) = cap {
                if e.upper > limit {
                    return Err(DistError::KindCap {
                        name: e.name.clone(),
                        kind: e.kind,
                        upper: e.upper,
                        limit,
                    });
                }
            }
        }
        Ok(HyperSchema { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SchemaEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &SchemaEntry {
        &self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// First entry index matching `kind` that is scoped to `layer`, falling
    /// back to a global entry of that kind.
    pub fn index_for(&self, kind: HyperKind, layer: usize) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.kind == kind && e.scope == Scope::Layer(layer))
            .or_else(|| {
                self.entries
                    .iter()
                    .position(|e| e.kind == kind && e.scope == Scope::Global)
            })
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lower).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.upper).collect()
    }

    /// Maps raw hyperparameter values to `[-1, 1]` per dimension, linearly in
    /// log space against the global bounds. This is the embedding input, so
    /// its scale stays put while member bounds move around.
    pub fn normalize(&self, lambda: &[f64]) -> Vec<f64> {
        debug_assert_eq!(lambda.len(), self.len());
        self.entries
            .iter()
            .zip(lambda)
            .map(|(e, &v)| {
                let (la, lb) = (e.lower.ln(), e.upper.ln());
                2.0 * (v.ln() - la) / (lb - la) - 1.0
            })
            .collect()
    }
}

/// One ensemble member's log-uniform bounds, one `(lower, upper)` pair per
/// schema dimension, held in log space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemberDistribution {
    log_lower: Vec<f64>,
    log_upper: Vec<f64>,
}

/// Samples with the uniform draws that produced them. The map
/// `lambda = exp(ln lower + u * (ln upper - ln lower))` is differentiable in
/// the bounds for fixed `u`, which the tuning step exploits.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// `n x m` hyperparameter values.
    pub values: Array2<f64>,
    /// `n x m` uniform draws in `[0, 1)`.
    pub uniforms: Array2<f64>,
}

impl MemberDistribution {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DistError> {
        if lower.len() != upper.len() {
            return Err(DistError::DimensionMismatch {
                got: lower.len(),
                want: upper.len(),
            });
        }
        for (i, (&a, &b)) in lower.iter().zip(&upper).enumerate() {
            if !(a.is_finite() && b.is_finite() && a > 0.0) {
                return Err(DistError::InvalidBound { dim: i });
            }
            if a == b {
                return Err(DistError::DegenerateBounds { dim: i });
            }
            if a > b {
                return Err(DistError::InvalidBound { dim: i });
            }
        }
        Ok(MemberDistribution {
            log_lower: lower.iter().map(|v| v.ln()).collect(),
            log_upper: upper.iter().map(|v| v.ln()).collect(),
        })
    }

    /// Distribution spanning the schema's full global range.
    pub fn full(schema: &HyperSchema) -> Self {
        MemberDistribution {
            log_lower: schema.entries().iter().map(|e| e.lower.ln()).collect(),
            log_upper: schema.entries().iter().map(|e| e.upper.ln()).collect(),
        }
    }

    pub fn dims(&self) -> usize {
        self.log_lower.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.log_lower.iter().map(|v| v.exp()).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.log_upper.iter().map(|v| v.exp()).collect()
    }

    pub fn log_lower(&self) -> &[f64] {
        &self.log_lower
    }

    pub fn log_upper(&self) -> &[f64] {
        &self.log_upper
    }

    /// Rebuilds from log-space bounds, projecting into feasibility. This is
    /// how tuned bounds come back from a gradient step, so inverted or
    /// out-of-range values are expected input here.
    pub fn from_log_bounds(log_lower: &[f64], log_upper: &[f64], schema: &HyperSchema) -> Self {
        assert_eq!(log_lower.len(), schema.len(), "schema dimension mismatch");
        assert_eq!(log_upper.len(), schema.len(), "schema dimension mismatch");
        let mut lo = Vec::with_capacity(schema.len());
        let mut hi = Vec::with_capacity(schema.len());
        for (j, e) in schema.entries().iter().enumerate() {
            let (p, q) = project_log_pair(log_lower[j], log_upper[j], e);
            lo.push(p);
            hi.push(q);
        }
        MemberDistribution {
            log_lower: lo,
            log_upper: hi,
        }
    }

    /// One draw per row. `n` rows, one column per dimension.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> SampleBatch {
        let m = self.dims();
        let mut values = Array2::<f64>::zeros((n, m));
        let mut uniforms = Array2::<f64>::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let u: f64 = rng.random();
                values[[i, j]] =
                    (self.log_lower[j] + u * (self.log_upper[j] - self.log_lower[j])).exp();
                uniforms[[i, j]] = u;
            }
        }
        SampleBatch { values, uniforms }
    }

    /// Single draw.
    pub fn sample_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        let batch = self.sample_batch(1, rng);
        batch.values.row(0).to_vec()
    }

    /// Differential entropy, summed over dimensions:
    /// `0.5 (ln a + ln b) + ln(ln b - ln a)` per dimension.
    pub fn entropy(&self) -> f64 {
        self.log_lower
            .iter()
            .zip(&self.log_upper)
            .map(|(&la, &lb)| 0.5 * (la + lb) + (lb - la).ln())
            .sum()
    }

    /// Mean per dimension: `(b - a) / (ln b - ln a)`, evaluated as
    /// `a expm1(w) / w` with `w = ln(b/a)` so narrow widths stay accurate.
    pub fn mean(&self) -> Vec<f64> {
        self.log_lower
            .iter()
            .zip(&self.log_upper)
            .map(|(&la, &lb)| {
                let w = lb - la;
                la.exp() * w.exp_m1() / w
            })
            .collect()
    }

    /// Log density at `lambda`; `-inf` outside the support.
    pub fn log_pdf(&self, lambda: &[f64]) -> f64 {
        debug_assert_eq!(lambda.len(), self.dims());
        let mut lp = 0.0;
        for ((&la, &lb), &v) in self.log_lower.iter().zip(&self.log_upper).zip(lambda) {
            let lv = v.ln();
            if lv < la || lv > lb {
                return f64::NEG_INFINITY;
            }
            lp -= lv + (lb - la).ln();
        }
        lp
    }

    /// Returns the nearest feasible distribution: bounds reordered if
    /// inverted, clipped into the schema's global range, and widened in log
    /// space to at least [`MIN_LOG_WIDTH`]. Feasible input passes through
    /// bit-identically, so projection is idempotent.
    pub fn project(&self, schema: &HyperSchema) -> MemberDistribution {
        assert_eq!(self.dims(), schema.len(), "schema dimension mismatch");
        MemberDistribution::from_log_bounds(&self.log_lower, &self.log_upper, schema)
    }
}

/// Projection core. Reorder if inverted, clip into the global range, then
/// widen symmetrically to the minimum width, sliding back inside when the
/// widening spills over an end of the range.
fn project_log_pair(mut p: f64, mut q: f64, e: &SchemaEntry) -> (f64, f64) {
    let (ga, gb) = (e.lower.ln(), e.upper.ln());
    if p > q {
        std::mem::swap(&mut p, &mut q);
    }
    p = p.clamp(ga, gb);
    q = q.clamp(ga, gb);
    if q - p < WIDTH_TRIGGER {
        let mid = 0.5 * (p + q);
        p = mid - 0.5 * MIN_LOG_WIDTH;
        q = mid + 0.5 * MIN_LOG_WIDTH;
        if p < ga {
            p = ga;
            q = (ga + MIN_LOG_WIDTH).min(gb);
        } else if q > gb {
            q = gb;
            p = (gb - MIN_LOG_WIDTH).max(ga);
        }
    }
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::stream_rng;
    use proptest::prelude::*;

    fn schema_one(lower: f64, upper: f64) -> HyperSchema {
        HyperSchema::new(vec![SchemaEntry {
            name: "l2".into(),
            kind: HyperKind::L2Weights,
            scope: Scope::Global,
            lower,
            upper,
        }])
        .unwrap()
    }

    fn raw(lower: &[f64], upper: &[f64]) -> MemberDistribution {
        MemberDistribution {
            log_lower: lower.iter().map(|v| v.ln()).collect(),
            log_upper: upper.iter().map(|v| v.ln()).collect(),
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let d = MemberDistribution::new(vec![1.0], vec![std::f64::consts::E.powi(2)]).unwrap();
        assert!((d.entropy() - 1.6931).abs() < 5e-5, "got {}", d.entropy());
        let d = MemberDistribution::new(vec![1.0], vec![std::f64::consts::E]).unwrap();
        assert!((d.entropy() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_sums_over_dimensions() {
        let e = std::f64::consts::E;
        let d2 = MemberDistribution::new(vec![1.0, 1.0], vec![e, e]).unwrap();
        let d1 = MemberDistribution::new(vec![1.0], vec![e]).unwrap();
        assert!((d2.entropy() - 2.0 * d1.entropy()).abs() < 1e-12);
    }

    #[test]
    fn mean_closed_forms() {
        let e = std::f64::consts::E;
        let d = MemberDistribution::new(vec![1.0], vec![e]).unwrap();
        assert!((d.mean()[0] - (e - 1.0)).abs() < 1e-12);
        let d = MemberDistribution::new(vec![1e-3], vec![1e3]).unwrap();
        assert!((d.mean()[0] - 72.38).abs() < 5e-3, "got {}", d.mean()[0]);
    }

    #[test]
    fn near_degenerate_mean_tends_to_lower_bound() {
        let a = 0.37;
        let d = MemberDistribution::new(vec![a], vec![a * (1.0 + 1e-8)]).unwrap();
        let rel = (d.mean()[0] - a).abs() / a;
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn exactly_degenerate_bounds_are_rejected() {
        let err = MemberDistribution::new(vec![2.0], vec![2.0]).unwrap_err();
        assert!(matches!(err, DistError::DegenerateBounds { dim: 0 }));
        let err = MemberDistribution::new(vec![2.0], vec![1.0]).unwrap_err();
        assert!(matches!(err, DistError::InvalidBound { dim: 0 }));
    }

    #[test]
    fn samples_stay_in_support_and_collapse_with_the_width() {
        let mut rng = stream_rng(11, 0, "hyperdist-test");
        let d = MemberDistribution::new(vec![0.1, 5.0], vec![10.0, 50.0]).unwrap();
        let batch = d.sample_batch(500, &mut rng);
        let (lo, hi) = (d.lower(), d.upper());
        for i in 0..500 {
            for j in 0..2 {
                let v = batch.values[[i, j]];
                assert!(v >= lo[j] && v <= hi[j]);
            }
        }
        let tight = MemberDistribution::new(vec![3.0], vec![3.0 * (1.0 + 1e-9)]).unwrap();
        let batch = tight.sample_batch(100, &mut rng);
        for v in batch.values.iter() {
            assert!((v - 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sample_mean_matches_closed_form_within_three_se() {
        let mut rng = stream_rng(42, 0, "hyperdist-mean");
        let d = MemberDistribution::new(vec![1.0], vec![std::f64::consts::E]).unwrap();
        let n = 100_000;
        let batch = d.sample_batch(n, &mut rng);
        let mean = batch.values.column(0).mean().unwrap();
        let var = batch
            .values
            .column(0)
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let closed = d.mean()[0];
        assert!(
            (mean - closed).abs() < 3.0 * se,
            "mean {mean}, closed {closed}, se {se}"
        );
    }

    #[test]
    fn empirical_entropy_matches_closed_form() {
        let mut rng = stream_rng(42, 1, "hyperdist-entropy");
        let d = MemberDistribution::new(vec![0.5, 2.0], vec![4.0, 9.0]).unwrap();
        let n = 100_000;
        let batch = d.sample_batch(n, &mut rng);
        let lps: Vec<f64> = (0..n)
            .map(|i| d.log_pdf(&batch.values.row(i).to_vec()))
            .collect();
        let est = -lps.iter().sum::<f64>() / n as f64;
        let mean_lp = -est;
        let var =
            lps.iter().map(|&v| (v - mean_lp) * (v - mean_lp)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (est - d.entropy()).abs() < 3.0 * se,
            "est {est}, closed {}, se {se}",
            d.entropy()
        );
    }

    #[test]
    fn scaling_bounds_scales_samples_in_distribution() {
        // Kolmogorov-Smirnov on log samples: scaling (a, b) by c shifts the
        // log-sample distribution by ln c and changes nothing else.
        let c = 7.3;
        let d1 = MemberDistribution::new(vec![0.2], vec![5.0]).unwrap();
        let d2 = MemberDistribution::new(vec![0.2 * c], vec![5.0 * c]).unwrap();
        let n = 20_000;
        let mut r1 = stream_rng(9, 0, "ks-a");
        let mut r2 = stream_rng(9, 1, "ks-b");
        let mut s1: Vec<f64> = d1
            .sample_batch(n, &mut r1)
            .values
            .iter()
            .map(|v| v.ln() + c.ln())
            .collect();
        let mut s2: Vec<f64> = d2
            .sample_batch(n, &mut r2)
            .values
            .iter()
            .map(|v| v.ln())
            .collect();
        s1.sort_by(f64::total_cmp);
        s2.sort_by(f64::total_cmp);
        let mut ks = 0.0f64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < n {
            if s1[i] <= s2[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 / n as f64 - j as f64 / n as f64).abs());
        }
        let crit = 1.36 * (2.0 / n as f64).sqrt();
        assert!(ks < crit, "ks {ks} crit {crit}");
    }

    #[test]
    fn project_reorders_clips_and_widens() {
        let schema = schema_one(0.5, 4.0);
        let p = raw(&[2.0], &[1.0]).project(&schema);
        assert!((p.lower()[0] - 1.0).abs() < 1e-12 && (p.upper()[0] - 2.0).abs() < 1e-12);

        let p = raw(&[0.01], &[100.0]).project(&schema);
        assert!((p.lower()[0] - 0.5).abs() < 1e-12 && (p.upper()[0] - 4.0).abs() < 1e-12);

        let p = raw(&[2.0], &[2.0]).project(&schema);
        let width = p.log_upper()[0] - p.log_lower()[0];
        assert!((width - MIN_LOG_WIDTH).abs() < 1e-12);
    }

    #[test]
    fn project_is_identity_on_feasible_input() {
        let schema = schema_one(1e-3, 1e3);
        let d = MemberDistribution::new(vec![0.1], vec![10.0]).unwrap();
        assert_eq!(d.project(&schema), d);
    }

    proptest! {
        #[test]
        fn project_is_idempotent_and_feasible(
            a in -20.0f64..20.0,
            b in -20.0f64..20.0,
        ) {
            let schema = schema_one(1e-3, 1e3);
            let d = MemberDistribution { log_lower: vec![a], log_upper: vec![b] };
            let once = d.project(&schema);
            let twice = once.project(&schema);
            prop_assert_eq!(&once, &twice);
            let (p, q) = (once.log_lower()[0], once.log_upper()[0]);
            prop_assert!(p <= q);
            prop_assert!(p >= 1e-3f64.ln() - 1e-12 && q <= 1e3f64.ln() + 1e-12);
            prop_assert!(q - p >= WIDTH_TRIGGER - 1e-15);
        }

        #[test]
        fn samples_always_land_in_support(
            la in -6.0f64..6.0,
            w in 1e-3f64..6.0,
            seed in 0u64..1000,
        ) {
            let d = MemberDistribution {
                log_lower: vec![la],
                log_upper: vec![la + w],
            };
            let mut rng = stream_rng(seed, 0, "prop-support");
            let batch = d.sample_batch(64, &mut rng);
            for v in batch.values.iter() {
                prop_assert!(v.ln() >= la - 1e-9 && v.ln() <= la + w + 1e-9);
            }
        }
    }

    #[test]
    fn normalize_hits_the_interval_ends() {
        let schema = schema_one(1e-2, 1e2);
        let z = schema.normalize(&[1e-2]);
        assert!((z[0] + 1.0).abs() < 1e-12);
        let z = schema.normalize(&[1e2]);
        assert!((z[0] - 1.0).abs() < 1e-12);
        let z = schema.normalize(&[1.0]);
        assert!(z[0].abs() < 1e-12);
    }

    #[test]
    fn schema_rejects_bad_entries() {
        assert!(matches!(
            HyperSchema::new(vec![]).unwrap_err(),
            DistError::EmptySchema
        ));
        let bad = HyperSchema::new(vec![SchemaEntry {
            name: "d".into(),
            kind: HyperKind::Dropout,
            scope: Scope::Global,
            lower: 1e-3,
            upper: 0.99,
        }]);
        assert!(matches!(bad.unwrap_err(), DistError::KindCap { .. }));
        let dup = HyperSchema::new(vec![
            SchemaEntry {
                name: "x".into(),
                kind: HyperKind::L2Weights,
                scope: Scope::Global,
                lower: 0.1,
                upper: 1.0,
            },
            SchemaEntry {
                name: "x".into(),
                kind: HyperKind::L2Biases,
                scope: Scope::Global,
                lower: 0.1,
                upper: 1.0,
            },
        ]);
        assert!(matches!(dup.unwrap_err(), DistError::DuplicateName(_)));
    }

    #[test]
    fn kind_lookup_prefers_layer_scope_then_global() {
        let schema = HyperSchema::new(vec![
            SchemaEntry {
                name: "l2_w".into(),
                kind: HyperKind::L2Weights,
                scope: Scope::Global,
                lower: 1e-3,
                upper: 1e3,
            },
            SchemaEntry {
                name: "l2_w_1".into(),
                kind: HyperKind::L2Weights,
                scope: Scope::Layer(1),
                lower: 1e-3,
                upper: 1e3,
            },
        ])
        .unwrap();
        assert_eq!(schema.index_for(HyperKind::L2Weights, 1), Some(1));
        assert_eq!(schema.index_for(HyperKind::L2Weights, 0), Some(0));
        assert_eq!(schema.index_for(HyperKind::Dropout, 0), None);
    }
}
