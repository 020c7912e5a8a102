//! Training objectives as differentiable graph scalars.

use std::collections::BTreeMap;

use crate::config::{LossConfig, TopK};
use crate::data::VideoLabel;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Clamp range for BCE log arguments.
pub const BCE_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

fn check_same_shape(g: &Graph, what: &str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Loss(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean over every element of `(a - b)^2`.
pub fn mean_squared(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_same_shape(g, "mean squared error", a, b)?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq, None)?)
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return Ok(g.scalar(0.0));
    };
    let mut acc = first;
    for &t in it {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `Σ_j mean((ê_j - e_j)^2)`. Both maps must name the same modalities.
pub fn l_pmg(
    g: &mut Graph,
    pseudo: &BTreeMap<String, Var>,
    targets: &BTreeMap<String, Var>,
) -> Result<Var> {
    if let Some(k) = pseudo.keys().find(|k| !targets.contains_key(*k)) {
        return Err(Error::Loss(format!("modality {k} has no target")));
    }
    if let Some(k) = targets.keys().find(|k| !pseudo.contains_key(*k)) {
        return Err(Error::Loss(format!("modality {k} has no generated stream")));
    }
    let mut terms = Vec::with_capacity(pseudo.len());
    for (k, &p) in pseudo {
        terms.push(mean_squared(g, p, targets[k])?);
    }
    sum_all(g, &terms)
}

/// `[T, T]` matrix of cosine similarities between rows of `a` and rows of `b`.
pub fn cosine_sim_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_same_shape(g, "cosine similarity", a, b)?;
    let an = g.normalize_rows(a, COSINE_EPS)?;
    let bn = g.normalize_rows(b, COSINE_EPS)?;
    let bt = g.transpose(bn)?;
    Ok(g.matmul(an, bt)?)
}

/// Snippet-level InfoNCE in both directions, same-index pairs positive and
/// the positive kept in each denominator.
pub fn l_infonce_bidirectional(g: &mut Graph, f_star: Var, a: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Loss(format!("temperature must be > 0, got {tau}")));
    }
    let t = g.shape(f_star).first().copied().unwrap_or(0);
    if t < 2 {
        return Err(Error::Loss(format!(
            "contrastive loss needs at least 2 snippets, got {t}"
        )));
    }
    let s = cosine_sim_matrix(g, f_star, a)?;
    let s = g.scale(s, 1.0 / tau);
    let mut dirs = Vec::with_capacity(2);
    for axis in [1, 0] {
        let ls = g.log_softmax(s, axis)?;
        let d = g.diagonal(ls)?;
        dirs.push(g.mean(d, None)?);
    }
    let both = g.add(dirs[0], dirs[1])?;
    Ok(g.scale(both, -0.5))
}

/// Sum of the contrastive loss over every aligned stream.
pub fn l_align(g: &mut Graph, f_star: Var, aligned: &[Var], tau: f64) -> Result<Var> {
    let terms = aligned
        .iter()
        .map(|&a| l_infonce_bidirectional(g, f_star, a, tau))
        .collect::<Result<Vec<_>>>()?;
    sum_all(g, &terms)
}

/// Mean squared distance to the teacher features, which should be
/// constants so that no gradient reaches the teacher.
pub fn l_distill(g: &mut Graph, fused: Var, teacher: Var) -> Result<Var> {
    mean_squared(g, fused, teacher)
}

/// Top-k mean of sigmoid snippet scores per video, then BCE against the
/// video label, averaged over the batch.
pub fn l_mil(g: &mut Graph, logits: &[Var], labels: &[VideoLabel], top_k: TopK) -> Result<Var> {
    if logits.len() != labels.len() {
        return Err(Error::Loss(format!(
            "{} logit vectors for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Loss("MIL batch is empty".into()));
    }
    if !labels.iter().any(|l| l.is_anomalous()) {
        return Err(Error::Loss("MIL batch has no anomalous video".into()));
    }
    if labels.iter().all(|l| l.is_anomalous()) {
        return Err(Error::Loss("MIL batch has no normal video".into()));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, label) in logits.iter().zip(labels) {
        let t = g.shape(l).first().copied().unwrap_or(0);
        let s = g.sigmoid(l)?;
        let v = g.topk_mean(s, 0, top_k.k(t))?;
        let p = g.clamp(v, BCE_CLAMP.0, BCE_CLAMP.1);
        let arg = match label {
            VideoLabel::Anomalous => p,
            VideoLabel::Normal => {
                let n = g.neg(p)?;
                g.add_scalar(n, 1.0)
            }
        };
        let lg = g.log(arg)?;
        terms.push(g.neg(lg)?);
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mil: f64,
    pub l_align: f64,
    pub l_distill: f64,
    pub l_pmg: f64,
    pub total: f64,
}

pub fn l_first(pmg: f64, align: f64, distill: f64) -> f64 {
    pmg + align + distill
}

pub fn l_second(mil: f64, align: f64, distill: f64, pmg: f64, lambda1: f64, lambda2: f64) -> f64 {
    mil + lambda1 * align + lambda2 * distill + pmg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// MIL-free warm-up objective.
    First,
    Second,
}

/// The four parts of one step as graph scalars.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub pmg: Var,
    pub align: Var,
    pub distill: Var,
    pub mil: Option<Var>,
}

/// Combines the parts into the stage objective. Parts switched off in
/// `cfg` are left out of the total but still reported.
pub fn objective(
    g: &mut Graph,
    parts: &LossVars,
    stage: Stage,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (w_align, w_distill) = match stage {
        Stage::First => (1.0, 1.0),
        Stage::Second => (cfg.lambda1, cfg.lambda2),
    };
    let mut terms = Vec::new();
    if cfg.use_pmg {
        terms.push(parts.pmg);
    }
    if cfg.use_align {
        terms.push(g.scale(parts.align, w_align));
    }
    if cfg.use_distill {
        terms.push(g.scale(parts.distill, w_distill));
    }
    let mil = match (stage, parts.mil) {
        (Stage::First, _) => 0.0,
        (Stage::Second, Some(m)) => {
            terms.push(m);
            g.item(m)
        }
        (Stage::Second, None) => {
            return Err(Error::Loss(
                "second-stage objective needs the MIL term".into(),
            ))
        }
    };
    let total = sum_all(g, &terms)?;
    let on = |flag: bool, v: Var, g: &Graph| if flag { g.item(v) } else { 0.0 };
    let (pmg, align, distill) = (
        on(cfg.use_pmg, parts.pmg, g),
        on(cfg.use_align, parts.align, g),
        on(cfg.use_distill, parts.distill, g),
    );
    let expected = match stage {
        Stage::First => l_first(pmg, align, distill),
        Stage::Second => l_second(mil, align, distill, pmg, w_align, w_distill),
    };
    let breakdown = LossBreakdown {
        l_mil: mil,
        l_align: g.item(parts.align),
        l_distill: g.item(parts.distill),
        l_pmg: g.item(parts.pmg),
        total: g.item(total),
    };
    debug_assert!((breakdown.total - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    Ok((total, breakdown))
}
