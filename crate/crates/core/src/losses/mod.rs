//! Base losses and the min-max-feature extension family.
//!
//! Every function records its computation on a [`Graph`], so the returned
//! scalar can be differentiated with respect to the representation `z`.
//!
//! The extension terms act on the representation matrix `U`: one row per
//! class present in the batch, holding that class's mean activation vector.
//! With `max_feature_i = max_j |U_ij|` and `min_feature_i = min_j |U_ij|`,
//!
//! * `Mmf  = max_i min_feature_i - min_i max_feature_i`
//! * `MaxF = -min_i max_feature_i`
//! * `MinF = max_i min_feature_i`
//! * `Mmf2 = max_i min_feature_i - min_i max_j U_ij - min_i max_j (-U_ij)`
//! * `MaxF2 = -min_i max_j U_ij - min_i max_j (-U_ij)`
//!
//! Minimizing `Mmf` pushes every class's strongest feature up and its weakest
//! feature toward zero.

mod step;

pub use step::{combined_step, StepOutcome};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },
    #[error("{op}: needs at least 2 classes in the batch, found {found}")]
    TooFewClasses { op: &'static str, found: usize },
    #[error("triplet loss: no (anchor, positive, negative) triplet in the batch")]
    NoValidTriplet,
    #[error("{op}: {labels} labels for {rows} rows")]
    LabelCount { op: &'static str, labels: usize, rows: usize },
    #[error("cross-entropy needs a network with a classification head")]
    MissingHead,
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Per-class batch means of the representation, rows ordered by class id.
#[derive(Clone, Debug)]
pub struct RepresentationMatrix {
    /// `[class_ids.len(), F]` node in the graph.
    pub u: Var,
    pub class_ids: Vec<usize>,
}

/// Row `k` of the averaging matrix holds `1/n_k` at every sample of class
/// `class_ids[k]`, so that `U = A z`.
fn averaging_matrix(labels: &[usize]) -> (Tensor, Vec<usize>) {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }
    let n = labels.len();
    let mut a = vec![0.0; members.len() * n];
    for (k, rows) in members.values().enumerate() {
        let w = 1.0 / rows.len() as f64;
        for &i in rows {
            a[k * n + i] = w;
        }
    }
    let ids: Vec<usize> = members.into_keys().collect();
    (Tensor::new(vec![ids.len(), n], a).expect("averaging matrix shape"), ids)
}

fn check_rows(g: &Graph, z: Var, labels: &[usize], op: &'static str) -> Result<()> {
    let shape = g.shape(z);
    if shape.len() != 2 {
        return Err(TensorError::Invalid { op, msg: format!("expected [N, F] input, got {shape:?}") }.into());
    }
    if shape[0] == 0 {
        return Err(LossError::EmptyBatch { op });
    }
    if labels.len() != shape[0] {
        return Err(LossError::LabelCount { op, labels: labels.len(), rows: shape[0] });
    }
    Ok(())
}

pub fn representation_matrix(g: &mut Graph, z: Var, labels: &[usize]) -> Result<RepresentationMatrix> {
    check_rows(g, z, labels, "representation matrix")?;
    let (a, class_ids) = averaging_matrix(labels);
    let a = g.constant(a);
    let u = g.matmul(a, z)?;
    Ok(RepresentationMatrix { u, class_ids })
}

/// `max_j |U_ij|` for every row.
pub fn max_feature(g: &mut Graph, u: Var) -> Result<Var> {
    let a = g.abs(u);
    Ok(g.max_axis(a, 1)?)
}

/// `min_j |U_ij|` for every row.
pub fn min_feature(g: &mut Graph, u: Var) -> Result<Var> {
    let a = g.abs(u);
    Ok(g.min_axis(a, 1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extension {
    None,
    Mmf,
    MaxF,
    MinF,
    Mmf2,
    MaxF2,
}

impl Extension {
    pub const ALL: [Extension; 6] =
        [Extension::None, Extension::Mmf, Extension::MaxF, Extension::MinF, Extension::Mmf2, Extension::MaxF2];

    pub fn name(self) -> &'static str {
        match self {
            Extension::None => "none",
            Extension::Mmf => "mmf",
            Extension::MaxF => "maxf",
            Extension::MinF => "minf",
            Extension::Mmf2 => "mmf2",
            Extension::MaxF2 => "maxf2",
        }
    }
}

impl fmt::Display for Extension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Extension {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Extension::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown extension {s:?}; expected one of none, mmf, maxf, minf, mmf2, maxf2"))
    }
}

/// Scalar extension term of `U`. Returns `None` for [`Extension::None`].
pub fn mmf_term(g: &mut Graph, u: Var, variant: Extension) -> Result<Option<Var>> {
    let min_part = |g: &mut Graph| -> Result<Var> {
        let m = min_feature(g, u)?;
        Ok(g.max(m))
    };
    // min_i max_j U_ij + min_i max_j (-U_ij)
    let dual_max = |g: &mut Graph| -> Result<Var> {
        let high = g.max_axis(u, 1)?;
        let high = g.min(high);
        let neg = g.neg(u);
        let low = g.max_axis(neg, 1)?;
        let low = g.min(low);
        Ok(g.add(high, low)?)
    };
    let term = match variant {
        Extension::None => return Ok(None),
        Extension::Mmf => {
            let lo = min_part(g)?;
            let mx = max_feature(g, u)?;
            let hi = g.min(mx);
            g.sub(lo, hi)?
        }
        Extension::MaxF => {
            let mx = max_feature(g, u)?;
            let hi = g.min(mx);
            g.neg(hi)
        }
        Extension::MinF => min_part(g)?,
        Extension::Mmf2 => {
            let lo = min_part(g)?;
            let d = dual_max(g)?;
            g.sub(lo, d)?
        }
        Extension::MaxF2 => {
            let d = dual_max(g)?;
            g.neg(d)
        }
    };
    Ok(Some(term))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_rows(g, logits, labels, "cross-entropy")?;
    Ok(g.cross_entropy(logits, labels)?)
}

/// Intra-class spread minus inter-class separation:
/// `(1/N) sum_i |z_i - mu_{y_i}|^2 - min_{m<l} |mu_m - mu_l|^2`.
pub fn ii_loss(g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
    let rep = representation_matrix(g, z, labels)?;
    let c = rep.class_ids.len();
    if c < 2 {
        return Err(LossError::TooFewClasses { op: "ii loss", found: c });
    }
    let n = labels.len();
    let row_of: BTreeMap<usize, usize> = rep.class_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut assign = vec![0.0; n * c];
    for (i, y) in labels.iter().enumerate() {
        assign[i * c + row_of[y]] = 1.0;
    }
    let assign = g.constant(Tensor::new(vec![n, c], assign)?);
    let centers = g.matmul(assign, rep.u)?;
    let diff = g.sub(z, centers)?;
    let sq = g.mul(diff, diff)?;
    let spread = g.sum(sq);
    let spread = g.scale(spread, 1.0 / n as f64);

    let dist = g.pairwise_sq_dist(rep.u)?;
    let upper: Vec<usize> = (0..c).flat_map(|i| (i + 1..c).map(move |j| i * c + j)).collect();
    let len = upper.len();
    let pairs = g.gather(dist, upper, vec![len])?;
    let separation = g.min(pairs);
    Ok(g.sub(spread, separation)?)
}

/// Batch-all triplet loss averaged over the triplets with a positive hinge.
pub fn triplet_loss(g: &mut Graph, z: Var, labels: &[usize], margin: f64) -> Result<Var> {
    check_rows(g, z, labels, "triplet loss")?;
    let n = labels.len();
    let mut ap = Vec::new();
    let mut an = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    ap.push(a * n + p);
                    an.push(a * n + q);
                }
            }
        }
    }
    if ap.is_empty() {
        return Err(LossError::NoValidTriplet);
    }
    let t = ap.len();
    let dist = g.pairwise_sq_dist(z)?;
    let pos = g.gather(dist, ap, vec![t])?;
    let neg = g.gather(dist, an, vec![t])?;
    let gap = g.sub(pos, neg)?;
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    let active = g.value(hinge).data().iter().filter(|&&h| h > 0.0).count();
    let total = g.sum(hinge);
    Ok(g.scale(total, 1.0 / active.max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    #[serde(rename = "ce", alias = "cross_entropy")]
    CrossEntropy,
    Ii,
    Triplet,
}

impl BaseLoss {
    pub const ALL: [BaseLoss; 3] = [BaseLoss::CrossEntropy, BaseLoss::Ii, BaseLoss::Triplet];

    /// Short name used in reports: `ce`, `ii`, `triplet`.
    pub fn name(self) -> &'static str {
        match self {
            BaseLoss::CrossEntropy => "ce",
            BaseLoss::Ii => "ii",
            BaseLoss::Triplet => "triplet",
        }
    }

    pub fn combination(self) -> Combination {
        match self {
            BaseLoss::CrossEntropy => Combination::Alternating,
            BaseLoss::Ii | BaseLoss::Triplet => Combination::WeightedSum,
        }
    }
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseLoss {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "cross_entropy" | "cross-entropy" => Ok(BaseLoss::CrossEntropy),
            "ii" => Ok(BaseLoss::Ii),
            "triplet" => Ok(BaseLoss::Triplet),
            _ => Err(format!("unknown loss {s:?}; expected ce, ii or triplet")),
        }
    }
}

/// How the extension term joins the base loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    /// One step on `base + lambda * extension`.
    WeightedSum,
    /// An extension step followed by a base step, sharing the optimizer.
    Alternating,
}

pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub base: BaseLoss,
    pub extension: Extension,
    /// Weight of the extension in weighted-sum mode; unused when alternating.
    pub lambda: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    DEFAULT_MARGIN
}

impl LossConfig {
    pub fn new(base: BaseLoss, extension: Extension, lambda: f64) -> Self {
        Self { base, extension, lambda, margin: DEFAULT_MARGIN }
    }

    pub fn combination(&self) -> Combination {
        self.base.combination()
    }

    /// Weighted-sum `lambda` of the published configurations, keyed by
    /// dataset name. Cross-entropy has no weight and reports 1.
    pub fn default_lambda(dataset: &str, base: BaseLoss) -> f64 {
        match (dataset, base) {
            (_, BaseLoss::CrossEntropy) => 1.0,
            ("mc", BaseLoss::Ii) => 0.5,
            ("mc", BaseLoss::Triplet) => 0.3,
            ("ag", _) => 0.4,
            (_, BaseLoss::Ii) => 0.2,
            (_, BaseLoss::Triplet) => 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.combination() == Combination::WeightedSum
            && self.extension != Extension::None
            && !(self.lambda >= 0.0 && self.lambda <= 1.0)
        {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.base == BaseLoss::Triplet && !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(format!("triplet margin {} must be finite and nonnegative", self.margin));
        }
        Ok(())
    }

    /// Label such as `ii+mmf` or `ce`.
    pub fn label(&self) -> String {
        match self.extension {
            Extension::None => self.base.name().to_string(),
            e => format!("{}+{}", self.base.name(), e.name()),
        }
    }
}

/// Base representation loss for `ii` and `triplet`, cross-entropy on logits
/// otherwise.
pub fn base_loss(g: &mut Graph, cfg: &LossConfig, z: Var, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    match cfg.base {
        BaseLoss::CrossEntropy => cross_entropy(g, logits.ok_or(LossError::MissingHead)?, labels),
        BaseLoss::Ii => ii_loss(g, z, labels),
        BaseLoss::Triplet => triplet_loss(g, z, labels, cfg.margin),
    }
}
