//! Contrastive losses on the unit sphere with analytic gradients w.r.t. the
//! pre-normalization vectors `w`.
//!
//! Every loss here is a sum of per-anchor terms of the same shape:
//!
//! ```text
//! L_i = -Σ_j t_ij s_ij + m_i · log Σ_{a≠i} exp(s_ia) - λ_i (z_i·p)/τ
//! ```
//!
//! with `s_ij = z_i·z_j / τ`, target weights `t_ij` summing to one, and an
//! optional prototype term (weight `λ_i`, so `m_i = 1 + λ_i` when active).
//! The individual losses differ only in how the targets and prototype terms
//! are chosen, which [`LossPlan`] fixes up front. Random choices (KCL
//! subsampling, partial supervision) are drawn once per plan, so a plan can be
//! re-evaluated at perturbed embeddings for finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::sphere::{dot, norm, tangent_project, EmbeddingSet, Mat, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    NtXent,
    Supcon,
    SupMinority,
    SupPrototypes,
    PartialSupervision,
    Kcl,
    TscLite,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::NtXent,
        LossKind::Supcon,
        LossKind::SupMinority,
        LossKind::SupPrototypes,
        LossKind::PartialSupervision,
        LossKind::Kcl,
        LossKind::TscLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::NtXent => "nt-xent",
            LossKind::Supcon => "supcon",
            LossKind::SupMinority => "sup-minority",
            LossKind::SupPrototypes => "sup-prototypes",
            LossKind::PartialSupervision => "partial-supervision",
            LossKind::Kcl => "kcl",
            LossKind::TscLite => "tsc-lite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss kind {s:?}")))
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, LossKind::SupPrototypes | LossKind::TscLite)
    }
}

/// Which views act as anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchoring {
    /// Both views of every sample.
    #[default]
    EveryView,
    /// Only the first view of each sample.
    OnePerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f64,
    pub theta_maj: f64,
    pub theta_min: f64,
    pub k: usize,
    pub lambda: f64,
    pub gate: f64,
    pub anchoring: Anchoring,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Supcon,
            tau: 0.07,
            theta_maj: 1.0,
            theta_min: 1.0,
            k: 3,
            lambda: 1.0,
            gate: 0.5,
            anchoring: Anchoring::EveryView,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind, tau: f64) -> Self {
        Self {
            kind,
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.tau)));
        }
        for (name, t) in [("theta_maj", self.theta_maj), ("theta_min", self.theta_min)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.gate) {
            return Err(Error::config("prototype gate must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Antipodal class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePair {
    p_maj: Vec<f64>,
    p_min: Vec<f64>,
}

impl PrototypePair {
    /// Builds the pair from the majority prototype; `p_min = -p_maj`.
    pub fn from_majority(p_maj: Vec<f64>) -> Result<Self> {
        let n = norm(&p_maj);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("prototype must be unit, has norm {n}")));
        }
        let p_min = p_maj.iter().map(|x| -x).collect();
        Ok(Self { p_maj, p_min })
    }

    pub fn p_maj(&self) -> &[f64] {
        &self.p_maj
    }

    pub fn p_min(&self) -> &[f64] {
        &self.p_min
    }

    pub fn for_label(&self, label: u8, minority: u8) -> &[f64] {
        if label == minority {
            &self.p_min
        } else {
            &self.p_maj
        }
    }
}

/// Batch-level information beyond the embeddings themselves.
#[derive(Debug, Clone, Default)]
pub struct LossContext {
    pub minority: u8,
    pub prototypes: Option<PrototypePair>,
}

impl LossContext {
    pub fn new(minority: u8) -> Self {
        Self {
            minority,
            prototypes: None,
        }
    }

    pub fn with_prototypes(mut self, p: PrototypePair) -> Self {
        self.prototypes = Some(p);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub value: f64,
    /// `∂L/∂w_i`, one row per view.
    pub grad_w: Mat,
    /// Positive-set size used by each anchor (0 for views that are not anchors).
    pub positives: Vec<usize>,
    /// `|A(i)|` for each anchor (0 for views that are not anchors).
    pub others: Vec<usize>,
    /// Class `c` contributed no anchor term (absent from the batch).
    pub empty_class: [bool; 2],
    /// Number of anchors whose prototype term was active.
    pub prototype_terms: usize,
}

impl LossOutput {
    pub fn is_anchor(&self, i: usize) -> bool {
        self.others[i] > 0
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.grad_w.iter_rows().map(norm).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ProtoTerm {
    None,
    Gated { gate: f64 },
    Always { weight: f64 },
}

#[derive(Debug, Clone)]
struct AnchorTerm {
    anchor: usize,
    targets: Vec<(usize, f64)>,
    proto: ProtoTerm,
}

/// A fully determined loss for one batch layout.
#[derive(Debug, Clone)]
pub struct LossPlan {
    n: usize,
    tau: f64,
    labels: Vec<u8>,
    minority: u8,
    prototypes: Option<PrototypePair>,
    terms: Vec<AnchorTerm>,
    empty_class: [bool; 2],
}

fn check_layout(labels: &[u8], partner: &[usize]) -> Result<()> {
    let n = labels.len();
    if partner.len() != n {
        return Err(Error::batch("labels and partner map differ in length"));
    }
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::batch(format!(
            "need an even number of at least 4 views, got {n}"
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::batch("labels must be binary"));
    }
    for (i, &p) in partner.iter().enumerate() {
        if p >= n || p == i || partner[p] != i {
            return Err(Error::batch(format!("view {i} lacks a valid partner view")));
        }
        if labels[p] != labels[i] {
            return Err(Error::batch(format!("view {i} and its partner carry different labels")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Supervision {
    Supervised,
    Instance,
}

impl LossPlan {
    pub fn build(
        cfg: &LossConfig,
        labels: &[u8],
        partner: &[usize],
        ctx: &LossContext,
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        check_layout(labels, partner)?;
        let n = labels.len();
        let minority = ctx.minority;
        if cfg.kind.uses_prototypes() && ctx.prototypes.is_none() {
            return Err(Error::config(format!("{} requires prototypes", cfg.kind.name())));
        }

        let anchors: Vec<usize> = match cfg.anchoring {
            Anchoring::EveryView => (0..n).collect(),
            Anchoring::OnePerSample => (0..n).filter(|&i| i < partner[i]).collect(),
        };

        // Which anchors use label supervision.
        let supervision: Vec<Supervision> = match cfg.kind {
            LossKind::NtXent | LossKind::SupPrototypes => vec![Supervision::Instance; anchors.len()],
            LossKind::Supcon | LossKind::Kcl | LossKind::TscLite => {
                vec![Supervision::Supervised; anchors.len()]
            }
            LossKind::SupMinority => anchors
                .iter()
                .map(|&i| {
                    if labels[i] == minority {
                        Supervision::Supervised
                    } else {
                        Supervision::Instance
                    }
                })
                .collect(),
            LossKind::PartialSupervision => {
                let mut sup = vec![Supervision::Instance; anchors.len()];
                for class in [minority, 1 - minority] {
                    let theta = if class == minority { cfg.theta_min } else { cfg.theta_maj };
                    let members: Vec<usize> =
                        (0..anchors.len()).filter(|&k| labels[anchors[k]] == class).collect();
                    let count = (theta * members.len() as f64).round() as usize;
                    let chosen = if count == members.len() {
                        (0..count).collect()
                    } else {
                        rng.choose_distinct(members.len(), count)
                    };
                    for c in chosen {
                        sup[members[c]] = Supervision::Supervised;
                    }
                }
                sup
            }
        };

        let proto = match cfg.kind {
            LossKind::SupPrototypes => ProtoTerm::Gated { gate: cfg.gate },
            LossKind::TscLite => ProtoTerm::Always { weight: cfg.lambda },
            _ => ProtoTerm::None,
        };
        let subsample = matches!(cfg.kind, LossKind::Kcl | LossKind::TscLite);

        let mut terms = Vec::with_capacity(anchors.len());
        for (&i, sup) in anchors.iter().zip(&supervision) {
            let targets = match sup {
                Supervision::Instance => vec![(partner[i], 1.0)],
                Supervision::Supervised => {
                    let mut pos: Vec<usize> =
                        (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
                    if subsample && cfg.k < pos.len() {
                        // The partner view is always kept; the rest are drawn
                        // uniformly without replacement.
                        let others: Vec<usize> =
                            pos.iter().copied().filter(|&j| j != partner[i]).collect();
                        let picked = rng.choose_distinct(others.len(), cfg.k - 1);
                        pos = std::iter::once(partner[i])
                            .chain(picked.into_iter().map(|k| others[k]))
                            .collect();
                        pos.sort_unstable();
                    }
                    if pos.is_empty() {
                        continue;
                    }
                    let w = 1.0 / pos.len() as f64;
                    pos.into_iter().map(|j| (j, w)).collect()
                }
            };
            terms.push(AnchorTerm {
                anchor: i,
                targets,
                proto,
            });
        }

        let mut empty_class = [true; 2];
        for t in &terms {
            empty_class[labels[t.anchor] as usize] = false;
        }

        Ok(Self {
            n,
            tau: cfg.tau,
            labels: labels.to_vec(),
            minority,
            prototypes: ctx.prototypes.clone(),
            terms,
            empty_class,
        })
    }

    pub fn num_views(&self) -> usize {
        self.n
    }

    pub fn num_anchors(&self) -> usize {
        self.terms.len()
    }

    /// Value and gradient at the given embeddings.
    pub fn evaluate(&self, emb: &EmbeddingSet) -> Result<LossOutput> {
        Ok(self.evaluate_inner(emb, false)?.0)
    }

    /// Per-anchor `∂L_i/∂w_i`: the gradient of anchor `i`'s own term with
    /// respect to its own `w_i`, ignoring the terms of other anchors. Rows of
    /// views that are not anchors are zero.
    pub fn anchor_self_gradients(&self, emb: &EmbeddingSet) -> Result<Mat> {
        Ok(self
            .evaluate_inner(emb, true)?
            .1
            .expect("self gradients requested"))
    }

    fn evaluate_inner(&self, emb: &EmbeddingSet, want_self: bool) -> Result<(LossOutput, Option<Mat>)> {
        let n = self.n;
        if emb.len() != n {
            return Err(Error::batch(format!(
                "plan covers {n} views, embeddings have {}",
                emb.len()
            )));
        }
        let d = emb.dim();
        let tau = self.tau;
        let z = emb.z();

        // Scaled similarities, one dot product per unordered pair. Summing
        // over coordinates in the outer loop keeps each dot product in the
        // same order as `dot` while letting the pairs vectorize.
        let zt = transpose(z);
        let upper: Vec<Vec<f64>> = par::map_range(n, |i| {
            let zi = z.row(i);
            let mut acc = vec![0.0; n - i];
            for (k, &zik) in zi.iter().enumerate() {
                for (s, &v) in acc.iter_mut().zip(&zt.row(k)[i..]) {
                    *s += zik * v;
                }
            }
            acc.iter_mut().for_each(|s| *s /= tau);
            acc
        });
        let mut sim = Mat::zeros(n, n);
        for (i, row) in upper.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                sim.set(i, i + k, v);
                sim.set(i + k, i, v);
            }
        }

        // Per anchor: its value, its row of dL/ds, and the prototype pull.
        struct Row {
            value: f64,
            g: Vec<f64>,
            proto: Option<(f64, Vec<f64>)>,
        }
        let rows: Vec<Row> = par::map_slice(&self.terms, |t| {
            let i = t.anchor;
            let zi = z.row(i);
            let mut s = sim.row(i).to_vec();
            s[i] = f64::NEG_INFINITY;
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = s.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = shifted.iter().sum();
            let lse = max + sum.ln();

            let (lambda, proto) = match (t.proto, &self.prototypes) {
                (ProtoTerm::None, _) | (_, None) => (0.0, None),
                (ProtoTerm::Gated { gate }, Some(pp)) => {
                    let p = pp.for_label(self.labels[i], self.minority);
                    let pd = dot(zi, p);
                    if pd <= gate {
                        (1.0, Some((pd, p.to_vec())))
                    } else {
                        (0.0, None)
                    }
                }
                (ProtoTerm::Always { weight }, Some(pp)) => {
                    let p = pp.for_label(self.labels[i], self.minority);
                    (weight, Some((dot(zi, p), p.to_vec())))
                }
            };
            let m = 1.0 + lambda;

            let mut value = Compensated::default();
            value.add(m * lse);
            let mut g: Vec<f64> = shifted.iter().map(|&e| m * e / sum).collect();
            for &(j, w) in &t.targets {
                value.add(-w * s[j]);
                g[j] -= w;
            }
            let proto = proto.map(|(pd, p)| {
                value.add(-lambda * pd / tau);
                (lambda, p)
            });
            Row {
                value: value.total(),
                g,
                proto,
            }
        });

        let mut total = Compensated::default();
        rows.iter().for_each(|r| total.add(r.value));
        let value = total.total();

        // Dense dL/ds; rows of non-anchors are zero.
        let mut dense = Mat::zeros(n, n);
        let mut anchor_row = vec![usize::MAX; n];
        for (k, (t, r)) in self.terms.iter().zip(&rows).enumerate() {
            anchor_row[t.anchor] = k;
            dense.row_mut(t.anchor).copy_from_slice(&r.g);
        }

        // grad_z_j = Σ_a (G_ja + G_aj) z_a / τ - λ_j p_j / τ
        let dense_t = transpose(&dense);
        let mut grad_w = Mat::zeros(n, d);
        let mut self_grad = want_self.then(|| Mat::zeros(n, d));
        let contributions: Vec<(Vec<f64>, Option<Vec<f64>>)> = par::map_range(n, |j| {
            let mut total = vec![0.0; d];
            let mut own = want_self.then(|| vec![0.0; d]);
            let gj = dense.row(j);
            let gcol = dense_t.row(j);
            for a in 0..n {
                let h = gj[a] + gcol[a];
                if h != 0.0 {
                    for (o, za) in total.iter_mut().zip(z.row(a)) {
                        *o += h * za;
                    }
                }
                if let Some(own) = own.as_mut() {
                    if gj[a] != 0.0 {
                        for (o, za) in own.iter_mut().zip(z.row(a)) {
                            *o += gj[a] * za;
                        }
                    }
                }
            }
            let proto = (anchor_row[j] != usize::MAX)
                .then(|| rows[anchor_row[j]].proto.as_ref())
                .flatten();
            let finish = |g: &mut Vec<f64>| {
                g.iter_mut().for_each(|o| *o /= tau);
                if let Some((lambda, p)) = proto {
                    for (o, pk) in g.iter_mut().zip(p) {
                        *o -= lambda * pk / tau;
                    }
                }
            };
            finish(&mut total);
            if let Some(own) = own.as_mut() {
                finish(own);
            }
            let zj = z.row(j);
            let nj = emb.norms()[j];
            let project = |g: &[f64]| -> Vec<f64> {
                tangent_project(zj, g).into_iter().map(|x| x / nj).collect()
            };
            (project(&total), own.map(|o| project(&o)))
        });
        for (j, (g, sg)) in contributions.into_iter().enumerate() {
            grad_w.row_mut(j).copy_from_slice(&g);
            if let (Some(m), Some(sg)) = (self_grad.as_mut(), sg) {
                m.row_mut(j).copy_from_slice(&sg);
            }
        }

        let mut positives = vec![0; n];
        let mut others = vec![0; n];
        let mut prototype_terms = 0;
        for (t, r) in self.terms.iter().zip(&rows) {
            positives[t.anchor] = t.targets.len();
            others[t.anchor] = n - 1;
            prototype_terms += usize::from(r.proto.is_some());
        }

        Ok((
            LossOutput {
                value,
                grad_w,
                positives,
                others,
                empty_class: self.empty_class,
                prototype_terms,
            },
            self_grad,
        ))
    }
}

/// Neumaier summation. Loss values are sums of many terms of similar size,
/// and finite-difference checks at small steps need them to the last few ulps.
#[derive(Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

fn transpose(m: &Mat) -> Mat {
    let mut t = Mat::zeros(m.cols(), m.rows());
    for (i, row) in m.iter_rows().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            t.set(k, i, v);
        }
    }
    t
}

/// Builds a plan and evaluates it once.
pub fn evaluate(
    cfg: &LossConfig,
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    ctx: &LossContext,
    rng: &mut RngStream,
) -> Result<LossOutput> {
    LossPlan::build(cfg, labels, partner, ctx, rng)?.evaluate(emb)
}

fn run(
    cfg: LossConfig,
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    ctx: &LossContext,
    rng: Option<&mut RngStream>,
) -> Result<LossOutput> {
    let mut fallback = RngStream::new(0, 0);
    evaluate(&cfg, emb, labels, partner, ctx, rng.unwrap_or(&mut fallback))
}

pub fn nt_xent(emb: &EmbeddingSet, labels: &[u8], partner: &[usize], tau: f64) -> Result<LossOutput> {
    run(
        LossConfig::new(LossKind::NtXent, tau),
        emb,
        labels,
        partner,
        &LossContext::default(),
        None,
    )
}

pub fn supcon(emb: &EmbeddingSet, labels: &[u8], partner: &[usize], tau: f64) -> Result<LossOutput> {
    run(
        LossConfig::new(LossKind::Supcon, tau),
        emb,
        labels,
        partner,
        &LossContext::default(),
        None,
    )
}

pub fn sup_minority(
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    minority: u8,
    tau: f64,
) -> Result<LossOutput> {
    run(
        LossConfig::new(LossKind::SupMinority, tau),
        emb,
        labels,
        partner,
        &LossContext::new(minority),
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn sup_prototypes(
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    minority: u8,
    prototypes: &PrototypePair,
    tau: f64,
    gate: f64,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        gate,
        ..LossConfig::new(LossKind::SupPrototypes, tau)
    };
    let ctx = LossContext::new(minority).with_prototypes(prototypes.clone());
    run(cfg, emb, labels, partner, &ctx, None)
}

#[allow(clippy::too_many_arguments)]
pub fn partial_supervision(
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    minority: u8,
    theta_min: f64,
    theta_maj: f64,
    tau: f64,
    rng: &mut RngStream,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        theta_min,
        theta_maj,
        ..LossConfig::new(LossKind::PartialSupervision, tau)
    };
    run(cfg, emb, labels, partner, &LossContext::new(minority), Some(rng))
}

pub fn kcl(
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    k: usize,
    tau: f64,
    rng: &mut RngStream,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        k,
        ..LossConfig::new(LossKind::Kcl, tau)
    };
    run(cfg, emb, labels, partner, &LossContext::default(), Some(rng))
}

#[allow(clippy::too_many_arguments)]
pub fn tsc_lite(
    emb: &EmbeddingSet,
    labels: &[u8],
    partner: &[usize],
    minority: u8,
    k: usize,
    lambda: f64,
    prototypes: &PrototypePair,
    tau: f64,
    rng: &mut RngStream,
) -> Result<LossOutput> {
    let cfg = LossConfig {
        k,
        lambda,
        ..LossConfig::new(LossKind::TscLite, tau)
    };
    let ctx = LossContext::new(minority).with_prototypes(prototypes.clone());
    run(cfg, emb, labels, partner, &ctx, Some(rng))
}

/// Closed-form `∂L_i/∂w_i` of the supervised loss for one anchor, written
/// out term by term (positives and negatives separately). Kept independent
/// of [`LossPlan`] so the two can be checked against each other.
pub fn eq_s2_s3_gradient(
    z: &Mat,
    labels: &[u8],
    anchor: usize,
    tau: f64,
    w_norm: f64,
) -> Result<Vec<f64>> {
    let n = z.rows();
    if anchor >= n {
        return Err(Error::batch(format!("anchor {anchor} out of range")));
    }
    let positives: Vec<usize> = (0..n)
        .filter(|&p| p != anchor && labels[p] == labels[anchor])
        .collect();
    if positives.is_empty() {
        return Err(Error::EmptyPositives { anchor });
    }
    let negatives: Vec<usize> = (0..n)
        .filter(|&q| q != anchor && labels[q] != labels[anchor])
        .collect();
    let zi = z.row(anchor);

    // Softmax over A(i), shifted by the largest similarity for stability.
    let sims: Vec<f64> = (0..n).map(|x| dot(zi, z.row(x))).collect();
    let shift = (0..n)
        .filter(|&x| x != anchor)
        .map(|x| sims[x] / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = (0..n)
        .filter(|&a| a != anchor)
        .map(|a| (sims[a] / tau - shift).exp())
        .sum();
    let prob = |x: usize| (sims[x] / tau - shift).exp() / denom;
    let x_ip = 1.0 / positives.len() as f64;

    let d = zi.len();
    let mut pos_part = vec![0.0; d];
    for &p in &positives {
        let coef = prob(p) - x_ip;
        for (k, out) in pos_part.iter_mut().enumerate() {
            *out += (z.get(p, k) - sims[p] * zi[k]) * coef;
        }
    }
    let mut neg_part = vec![0.0; d];
    for &q in &negatives {
        let coef = prob(q);
        for (k, out) in neg_part.iter_mut().enumerate() {
            *out += (z.get(q, k) - sims[q] * zi[k]) * coef;
        }
    }
    let scale = 1.0 / (tau * w_norm);
    Ok(pos_part
        .iter()
        .zip(&neg_part)
        .map(|(a, b)| scale * (a + b))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeSource {
    /// Majority-class encodings only.
    #[default]
    Majority,
    /// Every encoding regardless of class.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub step: f64,
    pub iters: usize,
    pub tol: f64,
    pub source: PrototypeSource,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            step: 0.5,
            iters: 2000,
            tol: 1e-6,
            source: PrototypeSource::Majority,
        }
    }
}

fn mean_distance(p: &[f64], pts: &[&[f64]]) -> f64 {
    pts.iter().map(|z| crate::sphere::dist(p, z)).sum::<f64>() / pts.len() as f64
}

/// Places `p_maj` on the sphere at the point of least mean Euclidean distance
/// to the chosen encodings (projected gradient descent with backtracking),
/// and sets `p_min = -p_maj`.
pub fn place_prototypes(
    encodings: &Mat,
    labels: &[u8],
    majority: u8,
    cfg: &PlacementConfig,
) -> Result<PrototypePair> {
    let pts: Vec<&[f64]> = (0..encodings.rows())
        .filter(|&i| cfg.source == PrototypeSource::All || labels[i] == majority)
        .map(|i| encodings.row(i))
        .collect();
    if pts.is_empty() {
        return Err(Error::NoMajorityClass);
    }
    let d = encodings.cols();

    let mut mean = vec![0.0; d];
    for z in &pts {
        for (m, x) in mean.iter_mut().zip(*z) {
            *m += x;
        }
    }
    let mut p = if norm(&mean) > 1e-9 {
        let n = norm(&mean);
        mean.iter().map(|x| x / n).collect::<Vec<_>>()
    } else {
        pts[0].to_vec()
    };

    let mut f = mean_distance(&p, &pts);
    let mut step = cfg.step;
    for _ in 0..cfg.iters {
        let mut g = vec![0.0; d];
        for z in &pts {
            let r = crate::sphere::dist(&p, z);
            if r > 1e-15 {
                for ((gk, pk), zk) in g.iter_mut().zip(&p).zip(*z) {
                    *gk += (pk - zk) / r;
                }
            }
        }
        g.iter_mut().for_each(|x| *x /= pts.len() as f64);
        let rg = tangent_project(&p, &g);
        if norm(&rg) < cfg.tol {
            break;
        }
        let mut accepted = false;
        while step > 1e-14 {
            let cand: Vec<f64> = p.iter().zip(&rg).map(|(pk, gk)| pk - step * gk).collect();
            let cn = norm(&cand);
            let cand: Vec<f64> = cand.into_iter().map(|x| x / cn).collect();
            let fc = mean_distance(&cand, &pts);
            if fc < f {
                p = cand;
                f = fc;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let n = norm(&p);
    PrototypePair::from_majority(p.into_iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identical(n: usize, d: usize) -> EmbeddingSet {
        let mut z = Mat::zeros(n, d);
        for i in 0..n {
            z.set(i, 0, 1.0);
        }
        EmbeddingSet::from_unit(z).unwrap()
    }

    fn interleaved(n: usize) -> Vec<usize> {
        (0..n).map(|i| i ^ 1).collect()
    }

    fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = RngStream::new(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| rng.normal_vec(d).into_iter().map(|x| 1.5 * x).collect())
            .collect();
        EmbeddingSet::from_w(&Mat::from_rows(&rows).unwrap()).unwrap()
    }

    fn one_per_sample(kind: LossKind, tau: f64) -> LossConfig {
        LossConfig {
            anchoring: Anchoring::OnePerSample,
            ..LossConfig::new(kind, tau)
        }
    }

    #[test]
    fn nt_xent_identical_views() {
        let emb = identical(4, 3);
        for tau in [0.07, 0.5, 2.0] {
            let out = evaluate(
                &one_per_sample(LossKind::NtXent, tau),
                &emb,
                &[0, 0, 1, 1],
                &interleaved(4),
                &LossContext::default(),
                &mut RngStream::new(0, 0),
            )
            .unwrap();
            assert!((out.value - 2.0 * 3f64.ln()).abs() < 1e-12, "{}", out.value);
        }
    }

    #[test]
    fn supcon_single_class_identical_views() {
        let emb = identical(4, 3);
        let out = evaluate(
            &one_per_sample(LossKind::Supcon, 0.1),
            &emb,
            &[0; 4],
            &interleaved(4),
            &LossContext::default(),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert!((out.value - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(out.empty_class, [false, true]);
    }

    #[test]
    fn value_is_additive_over_anchors() {
        let emb = random_set(8, 4, 3);
        let labels = [0, 0, 1, 1, 0, 0, 1, 1];
        let partner = interleaved(8);
        let every = nt_xent(&emb, &labels, &partner, 0.5).unwrap();
        let first = evaluate(
            &one_per_sample(LossKind::NtXent, 0.5),
            &emb,
            &labels,
            &partner,
            &LossContext::default(),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        let swapped: Vec<usize> = (0..8).map(|i| i ^ 1).collect();
        let perm = Mat::from_rows(&swapped.iter().map(|&i| emb.zi(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let second = evaluate(
            &one_per_sample(LossKind::NtXent, 0.5),
            &EmbeddingSet::from_unit(perm).unwrap(),
            &labels,
            &partner,
            &LossContext::default(),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        assert!((every.value - first.value - second.value).abs() < 1e-12);
    }

    #[test]
    fn gate_equality_applies_prototype_term() {
        let rows = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, -1.0, 0.0],
            vec![0.0, 0.0, -1.0],
        ];
        let emb = EmbeddingSet::from_unit(Mat::from_rows(&rows).unwrap()).unwrap();
        let pp = PrototypePair::from_majority(vec![1.0, 0.0, 0.0]).unwrap();
        let out = sup_prototypes(&emb, &[0, 0, 1, 1], &interleaved(4), 1, &pp, 0.5, 0.0).unwrap();
        assert_eq!(out.prototype_terms, 4);
        let out = sup_prototypes(&emb, &[0, 0, 1, 1], &interleaved(4), 1, &pp, 0.5, -1e-9).unwrap();
        assert_eq!(out.prototype_terms, 0);
    }

    #[test]
    fn invalid_partner_map() {
        let emb = random_set(4, 3, 1);
        let err = nt_xent(&emb, &[0, 0, 1, 1], &[1, 0, 2, 3], 0.5);
        assert!(matches!(err, Err(Error::InvalidBatch(_))));
        let err = nt_xent(&random_set(2, 3, 1), &[0, 0], &[1, 0], 0.5);
        assert!(matches!(err, Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn sup_minority_without_minority_is_nt_xent() {
        let emb = random_set(8, 5, 4);
        let labels = [0u8; 8];
        let a = sup_minority(&emb, &labels, &interleaved(8), 1, 0.2).unwrap();
        let b = nt_xent(&emb, &labels, &interleaved(8), 0.2).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.empty_class, [false, true]);
    }

    #[test]
    fn sup_minority_all_minority_is_supcon() {
        let emb = random_set(8, 5, 4);
        let labels = [1u8; 8];
        let a = sup_minority(&emb, &labels, &interleaved(8), 1, 0.2).unwrap();
        let b = supcon(&emb, &labels, &interleaved(8), 0.2).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn prototype_gate_off_leaves_nt_xent() {
        // Every view sits at similarity 0.9 with its class prototype.
        let p = vec![1.0, 0.0, 0.0];
        let c = 0.9f64;
        let s = (1.0 - c * c).sqrt();
        let rows = vec![
            vec![c, s, 0.0],
            vec![c, 0.0, s],
            vec![-c, s, 0.0],
            vec![-c, 0.0, s],
        ];
        let emb = EmbeddingSet::from_unit(Mat::from_rows(&rows).unwrap()).unwrap();
        let labels = [0, 0, 1, 1];
        let pp = PrototypePair::from_majority(p).unwrap();
        let a = sup_prototypes(&emb, &labels, &interleaved(4), 1, &pp, 0.3, 0.5).unwrap();
        let b = nt_xent(&emb, &labels, &interleaved(4), 0.3).unwrap();
        assert_eq!(a.prototype_terms, 0);
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn prototype_term_all_coincident() {
        // Views and the majority prototype coincide, tau = 1: each L_p is ln 3.
        let emb = identical(4, 3);
        let pp = PrototypePair::from_majority(vec![1.0, 0.0, 0.0]).unwrap();
        let cfg = LossConfig {
            gate: 1.0,
            ..one_per_sample(LossKind::SupPrototypes, 1.0)
        };
        let ctx = LossContext::new(1).with_prototypes(pp);
        let out = evaluate(&cfg, &emb, &[0; 4], &interleaved(4), &ctx, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(out.prototype_terms, 2);
        // NT-Xent part contributes ln 3 per anchor as well.
        assert!((out.value - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn partial_supervision_endpoints() {
        let emb = random_set(16, 4, 8);
        let labels = [0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0];
        let partner = interleaved(16);
        let mut rng = RngStream::new(5, 5);
        let a = partial_supervision(&emb, &labels, &partner, 1, 1.0, 0.0, 0.1, &mut rng).unwrap();
        let b = sup_minority(&emb, &labels, &partner, 1, 0.1).unwrap();
        assert_eq!(a.value, b.value);
        let a = partial_supervision(&emb, &labels, &partner, 1, 1.0, 1.0, 0.1, &mut rng).unwrap();
        let b = supcon(&emb, &labels, &partner, 0.1).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn partial_supervision_rounds_counts() {
        let labels = [0u8, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let cfg = LossConfig {
            theta_maj: 0.5,
            theta_min: 0.0,
            anchoring: Anchoring::EveryView,
            ..LossConfig::new(LossKind::PartialSupervision, 0.1)
        };
        let plan = LossPlan::build(
            &cfg,
            &labels,
            &interleaved(12),
            &LossContext::new(1),
            &mut RngStream::new(1, 5),
        )
        .unwrap();
        let supervised = plan
            .terms
            .iter()
            .filter(|t| labels[t.anchor] == 0 && t.targets.len() > 1)
            .count();
        assert_eq!(supervised, 4);
    }

    #[test]
    fn kcl_large_k_is_supcon() {
        let emb = random_set(12, 4, 9);
        let labels = [0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0];
        let partner = interleaved(12);
        let a = kcl(&emb, &labels, &partner, 11, 0.2, &mut RngStream::new(0, 5)).unwrap();
        let b = supcon(&emb, &labels, &partner, 0.2).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn kcl_k1_keeps_only_partner() {
        let emb = random_set(12, 4, 9);
        let labels = [0u8; 12];
        let partner = interleaved(12);
        let a = kcl(&emb, &labels, &partner, 1, 0.2, &mut RngStream::new(0, 5)).unwrap();
        let b = nt_xent(&emb, &labels, &partner, 0.2).unwrap();
        assert!(a.positives.iter().all(|&p| p == 1));
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn tsc_lite_lambda_zero_is_kcl() {
        let emb = random_set(12, 4, 10);
        let labels = [0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0];
        let partner = interleaved(12);
        let pp = PrototypePair::from_majority(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let a = tsc_lite(&emb, &labels, &partner, 1, 3, 0.0, &pp, 0.2, &mut RngStream::new(3, 5)).unwrap();
        let b = kcl(&emb, &labels, &partner, 3, 0.2, &mut RngStream::new(3, 5)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn prototypes_need_a_pair() {
        let emb = random_set(4, 3, 1);
        let err = evaluate(
            &LossConfig::new(LossKind::SupPrototypes, 0.1),
            &emb,
            &[0, 0, 1, 1],
            &interleaved(4),
            &LossContext::new(1),
            &mut RngStream::new(0, 0),
        );
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c = LossConfig { theta_maj: 1.5, ..LossConfig::default() };
        assert!(c.validate().is_err());
        c = LossConfig { k: 0, ..LossConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn eq_s2_s3_uniform_softmax() {
        // All similarities equal: the gradient vanishes since every tangent
        // component is zero.
        let emb = identical(6, 3);
        let g = eq_s2_s3_gradient(emb.z(), &[0, 0, 0, 0, 1, 1], 0, 0.5, 1.0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn eq_s2_s3_rejects_empty_positives() {
        let emb = random_set(4, 3, 2);
        assert!(matches!(
            eq_s2_s3_gradient(emb.z(), &[0, 1, 1, 1], 0, 0.5, 1.0),
            Err(Error::EmptyPositives { anchor: 0 })
        ));
    }

    #[test]
    fn prototype_single_point() {
        let q = vec![0.0, 0.6, 0.8];
        let enc = Mat::from_rows(&vec![q.clone(); 5]).unwrap();
        let pp = place_prototypes(&enc, &[0; 5], 0, &PlacementConfig::default()).unwrap();
        for (a, b) in pp.p_maj().iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in pp.p_min().iter().zip(pp.p_maj()) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn prototype_symmetric_about_axis() {
        let c = 0.8f64;
        let s = 0.6f64;
        let rows = vec![
            vec![c, s, 0.0],
            vec![c, -s, 0.0],
            vec![c, 0.0, s],
            vec![c, 0.0, -s],
        ];
        let enc = Mat::from_rows(&rows).unwrap();
        let pp = place_prototypes(&enc, &[0; 4], 0, &PlacementConfig::default()).unwrap();
        assert!((pp.p_maj()[0].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prototype_needs_majority() {
        let enc = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            place_prototypes(&enc, &[1], 0, &PlacementConfig::default()),
            Err(Error::NoMajorityClass)
        ));
    }

    #[test]
    fn prototype_matches_sphere_grid_search() {
        let mut rng = RngStream::new(21, 7);
        let center = rng.unit_vec(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let v: Vec<f64> = center.iter().map(|c| c + 0.6 * rng.normal()).collect();
                let n = norm(&v);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let enc = Mat::from_rows(&rows).unwrap();
        let pts: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let pp = place_prototypes(&enc, &[0; 5], 0, &PlacementConfig::default()).unwrap();

        // Fibonacci lattice with 10^6 points.
        let m = 1_000_000usize;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let (best, best_f) = (0..m)
            .map(|k| {
                let y = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * k as f64;
                let p = [r * th.cos(), y, r * th.sin()];
                let f = mean_distance(&p, &pts);
                (p, f)
            })
            .fold(([0.0; 3], f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let ours = mean_distance(pp.p_maj(), &pts);
        // Lattice spacing is about sqrt(4π/m) ≈ 3.5e-3.
        let spacing = (4.0 * std::f64::consts::PI / m as f64).sqrt();
        assert!(ours <= best_f + 1e-12, "{ours} vs grid {best_f}");
        assert!(crate::sphere::dist(pp.p_maj(), &best) < 3.0 * spacing);
    }
}
