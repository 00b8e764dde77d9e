//! Loss kernels. Every kernel returns its scalar value together with the
//! gradient with respect to its differentiable input: logits for the
//! cross-entropy family, (L2-normalized) features for the contrastive
//! family.

use serde::{Deserialize, Serialize};

use crate::bank::MemoryBank;
use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::tensor::{dot, Matrix, Real};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub sup: f64,
    pub ct: f64,
    pub hc: f64,
    pub lc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sup: 1.0,
            ct: 1.0,
            hc: 0.1,
            lc: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sup", self.sup), ("ct", self.ct), ("hc", self.hc), ("lc", self.lc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub phi: f64,
    /// Drop the `conf_A < conf_B` factor from the LC mask.
    #[serde(default = "default_true")]
    pub directional: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.5,
            phi: 0.75,
            directional: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("contrast.temperature", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::config("contrast.phi", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// {0, 1} per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(pub Vec<u8>);

impl BinaryMask {
    pub fn zeros(n: usize) -> Self {
        BinaryMask(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn concat(parts: &[&BinaryMask]) -> BinaryMask {
        BinaryMask(parts.iter().flat_map(|m| m.0.iter().copied()).collect())
    }
}

/// A scalar loss and its gradient.
#[derive(Clone, Debug)]
pub struct LossGrad<F> {
    pub value: F,
    pub grad: Matrix<F>,
}

impl<F: Real> LossGrad<F> {
    fn zero(rows: usize, cols: usize) -> Self {
        LossGrad {
            value: F::zero(),
            grad: Matrix::zeros(rows, cols),
        }
    }
}

/// Mean negative log-likelihood of `targets` over non-IGNORE pixels, with
/// probabilities floored at 1e-12. The gradient is taken wrt the logits
/// that produced `probs`.
pub fn pixel_cross_entropy<F: Real>(probs: &Matrix<F>, targets: &[u8]) -> Result<LossGrad<F>> {
    if targets.len() != probs.rows() {
        return Err(Error::shape(format!(
            "{} targets for {} pixels",
            targets.len(),
            probs.rows()
        )));
    }
    let c = probs.cols();
    let valid = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut out = LossGrad::zero(probs.rows(), c);
    if valid == 0 {
        return Ok(out);
    }
    let floor = F::lit(PROB_FLOOR);
    let inv = F::one() / F::lit(valid as f64);
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let t = t as usize;
        if t >= c {
            return Err(Error::shape(format!("target class {t} >= {c} classes")));
        }
        let p = probs.row(i);
        total = total - if p[t] < floor { floor } else { p[t] }.ln();
        if p[t] >= floor {
            let g = out.grad.row_mut(i);
            for k in 0..c {
                g[k] = p[k] * inv;
            }
            g[t] = g[t] - inv;
        }
    }
    out.value = total * inv;
    Ok(out)
}

/// Sum of per-student cross-entropy against the ground truth.
pub fn supervised_loss<F: Real>(students: &[&ForwardOutput<F>], labels: &[u8]) -> Result<(F, Vec<Matrix<F>>)> {
    let mut total = F::zero();
    let mut grads = Vec::with_capacity(students.len());
    for s in students {
        let l = pixel_cross_entropy(&s.probs, labels)?;
        total = total + l.value;
        grads.push(l.grad);
    }
    Ok((total, grads))
}

/// Hard pseudo-labels: per-pixel argmax class (ties to the lowest index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabels {
    pub num_classes: usize,
    pub classes: Vec<u8>,
}

impl PseudoLabels {
    /// The one-hot row of pixel `i`.
    pub fn one_hot(&self, i: usize) -> Vec<u8> {
        let mut v = vec![0; self.num_classes];
        v[self.classes[i] as usize] = 1;
        v
    }
}

/// One-hot argmax of a (teacher) forward output. The result carries no
/// gradient path back to the model.
pub fn make_pseudo_labels<F: Real>(teacher_out: &ForwardOutput<F>) -> PseudoLabels {
    PseudoLabels {
        num_classes: teacher_out.num_classes(),
        classes: teacher_out.hard_labels.clone(),
    }
}

/// Result of a routed cross-entropy: the summed value, each student's share
/// and each student's logit gradient.
#[derive(Clone, Debug)]
pub struct RoutedLoss<F> {
    pub total: F,
    pub per_student: Vec<F>,
    pub grads: Vec<Matrix<F>>,
}

/// Each student `a` is trained on the mean cross-entropy against the
/// pseudo-label sets listed in `routes[a]`; the per-student terms are
/// summed.
pub fn routed_cross_entropy<F: Real>(
    student_probs: &[&Matrix<F>],
    pseudo: &[&PseudoLabels],
    routes: &[Vec<usize>],
) -> Result<RoutedLoss<F>> {
    if routes.len() != student_probs.len() {
        return Err(Error::shape("one route list per student required"));
    }
    let mut out = RoutedLoss {
        total: F::zero(),
        per_student: Vec::with_capacity(student_probs.len()),
        grads: Vec::with_capacity(student_probs.len()),
    };
    for (a, probs) in student_probs.iter().enumerate() {
        let src = &routes[a];
        let mut g = Matrix::zeros(probs.rows(), probs.cols());
        let mut value = F::zero();
        if !src.is_empty() {
            let w = F::one() / F::lit(src.len() as f64);
            for &b in src {
                let labels = pseudo
                    .get(b)
                    .ok_or_else(|| Error::shape(format!("no pseudo-label set {b}")))?;
                let mut l = pixel_cross_entropy(probs, &labels.classes)?;
                value = value + w * l.value;
                l.grad.scale(w);
                g.add_assign(&l.grad);
            }
        }
        out.total = out.total + value;
        out.per_student.push(value);
        out.grads.push(g);
    }
    Ok(out)
}

/// Routing where every student learns from every *other* pair's teacher.
pub fn cross_routes(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|a| (0..n).filter(|&b| b != a).collect()).collect()
}

/// Cross-teacher loss: student `a` is supervised by the pseudo-labels of the
/// other pairs' teachers only (never its own teacher, never a student).
/// With two pairs this is `H(P_A, Y_B) + H(P_B, Y_A)`.
pub fn cross_teacher_loss<F: Real>(
    student_probs: &[&Matrix<F>],
    teacher_pseudo: &[&PseudoLabels],
) -> Result<RoutedLoss<F>> {
    let n = student_probs.len();
    if n < 2 || teacher_pseudo.len() != n {
        return Err(Error::config(
            "pairs",
            "cross-teacher loss needs >= 2 pairs and one teacher per student",
        ));
    }
    routed_cross_entropy(student_probs, teacher_pseudo, &cross_routes(n))
}

/// 1 where confidence strictly exceeds `phi`.
pub fn hc_mask<F: Real>(confidence: &[F], phi: f64) -> BinaryMask {
    let phi = F::lit(phi);
    BinaryMask(confidence.iter().map(|&c| (c > phi) as u8).collect())
}

/// `(1 - m_A) * [conf_A < conf_B]`; without the direction factor when
/// `directional` is false.
pub fn lc_mask<F: Real>(m_a: &BinaryMask, conf_a: &[F], conf_b: &[F], directional: bool) -> Result<BinaryMask> {
    if m_a.len() != conf_a.len() || conf_a.len() != conf_b.len() {
        return Err(Error::shape("lc_mask inputs are misaligned"));
    }
    Ok(BinaryMask(
        m_a.0
            .iter()
            .zip(conf_a.iter().zip(conf_b))
            .map(|(&m, (&a, &b))| ((m == 0) && (!directional || a < b)) as u8)
            .collect(),
    ))
}

/// Per-query bookkeeping shared by the two InfoNCE kernels.
struct QuerySet {
    rows: Vec<usize>,
    class: Vec<usize>,
    /// Weight of one query: `1 / (|queries of its class| * |active classes|)`.
    weight: Vec<f64>,
}

fn collect_queries(mask: &BinaryMask, classes: &[u8], num_classes: usize) -> Result<QuerySet> {
    if mask.len() != classes.len() {
        return Err(Error::shape("mask and class assignment lengths differ"));
    }
    let mut per_class = vec![0usize; num_classes];
    let mut rows = Vec::new();
    let mut class = Vec::new();
    for (i, &c) in classes.iter().enumerate() {
        if mask.is_set(i) {
            let c = c as usize;
            if c >= num_classes {
                return Err(Error::shape(format!("query class {c} >= {num_classes}")));
            }
            per_class[c] += 1;
            rows.push(i);
            class.push(c);
        }
    }
    let active = per_class.iter().filter(|&&n| n > 0).count();
    let weight = class
        .iter()
        .map(|&c| 1.0 / (per_class[c] as f64 * active as f64))
        .collect();
    Ok(QuerySet { rows, class, weight })
}

fn gather_rows<F: Real>(m: &Matrix<F>, rows: &[usize]) -> Matrix<F> {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (j, &r) in rows.iter().enumerate() {
        out.row_mut(j).copy_from_slice(m.row(r));
    }
    out
}

/// Scaled similarities `Q K^T / tau`.
fn similarities<F: Real>(queries: &Matrix<F>, keys: &Matrix<F>, tau: F) -> Matrix<F> {
    let mut s = Matrix::zeros(queries.rows(), keys.rows());
    F::gemm(
        false,
        true,
        queries.rows(),
        keys.rows(),
        queries.cols(),
        F::one() / tau,
        queries.as_slice(),
        keys.as_slice(),
        F::zero(),
        s.as_mut_slice(),
    );
    s
}

/// Max and shifted exp-sum over the negatives of one query row.
fn negative_stats<F: Real>(srow: &[F], key_class: &[usize], c: usize) -> (F, F) {
    let mut m = F::neg_infinity();
    for (k, &s) in srow.iter().enumerate() {
        if key_class[k] != c && s > m {
            m = s;
        }
    }
    if m == F::neg_infinity() {
        return (m, F::zero());
    }
    let mut sum = F::zero();
    for (k, &s) in srow.iter().enumerate() {
        if key_class[k] != c {
            sum = sum + (s - m).exp();
        }
    }
    (m, sum)
}

/// `log(exp(a) + exp(m) * s)` computed stably.
#[inline]
fn log_add<F: Real>(a: F, m: F, s: F) -> F {
    if s == F::zero() || m == F::neg_infinity() {
        return a;
    }
    let top = a.max(m);
    top + ((a - top).exp() + s * (m - top).exp()).ln()
}

fn check_bank<F: Real>(bank: &MemoryBank<F>, dim: usize, num_classes: usize) -> Result<()> {
    if !bank.is_full() {
        return Err(Error::State("memory bank is not full".into()));
    }
    if bank.dim() != dim {
        return Err(Error::shape(format!("bank dim {} vs feature dim {dim}", bank.dim())));
    }
    if bank.num_classes() != num_classes {
        return Err(Error::shape("bank class count differs from assignment range"));
    }
    Ok(())
}

/// High-confidence InfoNCE against the memory bank.
///
/// Queries are masked-in pixels; a query of class `c` is contrasted with
/// every entry of queue `c` (positives, averaged) against all other queues
/// (negatives). Query terms are averaged per class, then over the classes
/// that have at least one query. `features` must be L2-normalized; the
/// gradient is wrt those normalized features.
pub fn hc_loss<F: Real>(
    features: &Matrix<F>,
    classes: &[u8],
    mask: &BinaryMask,
    bank: &MemoryBank<F>,
    temperature: f64,
) -> Result<LossGrad<F>> {
    let nc = bank.num_classes();
    check_bank(bank, features.cols(), nc)?;
    if classes.len() != features.rows() {
        return Err(Error::shape("class assignment length differs from feature rows"));
    }
    let qs = collect_queries(mask, classes, nc)?;
    let mut out = LossGrad::zero(features.rows(), features.cols());
    if qs.rows.is_empty() {
        return Ok(out);
    }
    let tau = F::lit(temperature);
    let (keys, key_class) = bank.stacked();
    let q = gather_rows(features, &qs.rows);
    let sim = similarities(&q, &keys, tau);
    let mut coef = Matrix::zeros(q.rows(), keys.rows());
    let mut total = F::zero();
    for j in 0..q.rows() {
        let c = qs.class[j];
        let srow = sim.row(j);
        let (m_neg, s_neg) = negative_stats(srow, &key_class, c);
        let n_pos = bank.len(c);
        let w = F::lit(qs.weight[j] / n_pos as f64);
        let crow = coef.row_mut(j);
        // accumulated sum_p exp(m_neg - lse_p) for the negative coefficients
        let mut neg_scale = F::zero();
        for (k, &s) in srow.iter().enumerate() {
            if key_class[k] != c {
                continue;
            }
            let lse = log_add(s, m_neg, s_neg);
            total = total + w * (lse - s);
            crow[k] = w * ((s - lse).exp() - F::one());
            if m_neg != F::neg_infinity() {
                neg_scale = neg_scale + (m_neg - lse).exp();
            }
        }
        if m_neg != F::neg_infinity() {
            for (k, &s) in srow.iter().enumerate() {
                if key_class[k] != c {
                    crow[k] = w * (s - m_neg).exp() * neg_scale;
                }
            }
        }
    }
    out.value = total;
    scatter_query_grad(&mut out.grad, &qs.rows, &coef, &keys, tau);
    Ok(out)
}

fn scatter_query_grad<F: Real>(grad: &mut Matrix<F>, rows: &[usize], coef: &Matrix<F>, keys: &Matrix<F>, tau: F) {
    let d = keys.cols();
    let mut dq = Matrix::zeros(rows.len(), d);
    F::gemm(
        false,
        false,
        rows.len(),
        d,
        keys.rows(),
        F::one() / tau,
        coef.as_slice(),
        keys.as_slice(),
        F::zero(),
        dq.as_mut_slice(),
    );
    for (j, &r) in rows.iter().enumerate() {
        let g = grad.row_mut(r);
        for (a, &b) in g.iter_mut().zip(dq.row(j)) {
            *a = *a + b;
        }
    }
}

/// Low-confidence InfoNCE: each masked-in pixel of network A is pulled
/// toward network B's feature at the same pixel (treated as a constant)
/// and pushed from the other-class entries of both banks. Same per-class
/// then per-active-class averaging as [`hc_loss`]. Only `features_a`
/// receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn lc_loss<F: Real>(
    features_a: &Matrix<F>,
    features_b: &Matrix<F>,
    classes_a: &[u8],
    mask: &BinaryMask,
    bank_a: &MemoryBank<F>,
    bank_b: &MemoryBank<F>,
    temperature: f64,
) -> Result<LossGrad<F>> {
    let nc = bank_a.num_classes();
    check_bank(bank_a, features_a.cols(), nc)?;
    check_bank(bank_b, features_a.cols(), nc)?;
    if !features_a.same_shape(features_b) {
        return Err(Error::shape("peer features are misaligned"));
    }
    if classes_a.len() != features_a.rows() {
        return Err(Error::shape("class assignment length differs from feature rows"));
    }
    let qs = collect_queries(mask, classes_a, nc)?;
    let mut out = LossGrad::zero(features_a.rows(), features_a.cols());
    if qs.rows.is_empty() {
        return Ok(out);
    }
    let tau = F::lit(temperature);
    let (ka, ca) = bank_a.stacked();
    let (kb, cb) = bank_b.stacked();
    let keys = Matrix::vstack(&[&ka, &kb])?;
    let key_class: Vec<usize> = ca.into_iter().chain(cb).collect();
    let q = gather_rows(features_a, &qs.rows);
    let sim = similarities(&q, &keys, tau);
    let mut coef = Matrix::zeros(q.rows(), keys.rows());
    let mut total = F::zero();
    let d = features_a.cols();
    let mut dpos = Matrix::zeros(q.rows(), d);
    for j in 0..q.rows() {
        let c = qs.class[j];
        let r = qs.rows[j];
        let w = F::lit(qs.weight[j]);
        let a = dot(q.row(j), features_b.row(r)) / tau;
        let srow = sim.row(j);
        let (m_neg, s_neg) = negative_stats(srow, &key_class, c);
        let lse = log_add(a, m_neg, s_neg);
        total = total + w * (lse - a);
        let gpos = w * ((a - lse).exp() - F::one()) / tau;
        for (g, &b) in dpos.row_mut(j).iter_mut().zip(features_b.row(r)) {
            *g = gpos * b;
        }
        if m_neg != F::neg_infinity() {
            let crow = coef.row_mut(j);
            for (k, &s) in srow.iter().enumerate() {
                if key_class[k] != c {
                    crow[k] = w * (s - lse).exp();
                }
            }
        }
    }
    out.value = total;
    scatter_query_grad(&mut out.grad, &qs.rows, &coef, &keys, tau);
    for (j, &r) in qs.rows.iter().enumerate() {
        let g = out.grad.row_mut(r);
        for (x, &y) in g.iter_mut().zip(dpos.row(j)) {
            *x = *x + y;
        }
    }
    Ok(out)
}

/// Unweighted loss terms of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub sup: f64,
    pub ct: f64,
    pub hc: f64,
    pub lc: f64,
}

/// Weighted sum; the contrastive terms only count once the banks are full.
pub fn total_loss(c: &LossComponents, w: &LossWeights, bank_full: bool) -> Result<f64> {
    w.validate()?;
    let mut t = w.sup * c.sup + w.ct * c.ct;
    if bank_full {
        t += w.hc * c.hc + w.lc * c.lc;
    }
    Ok(t)
}
