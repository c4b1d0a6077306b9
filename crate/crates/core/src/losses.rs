//! The five joint-training loss terms, the teacher/student distillation loss
//! and logit standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BundleForward, ClassifierHead, EmbeddingTriple, ModelBundle, MODALITIES};
use crate::params::ParamStore;
use crate::tape::{standardize_row, Graph, Var, EPS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthMode {
    /// Sum of plain cosines.
    #[default]
    Raw,
    /// Sum of squared cosines (minimised at orthogonality rather than at -1).
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Cl,
    Adv,
    Mod,
    Aux,
    Orth,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Cl, Term::Adv, Term::Mod, Term::Aux, Term::Orth];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cl => "cl",
            Term::Adv => "adv",
            Term::Mod => "mod",
            Term::Aux => "aux",
            Term::Orth => "orth",
        }
    }
}

/// One value per loss term, keyed like the history columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerTerm<T> {
    pub cl: T,
    pub adv: T,
    #[serde(rename = "mod")]
    pub mod_: T,
    pub aux: T,
    pub orth: T,
}

impl<T: Copy> PerTerm<T> {
    pub fn splat(v: T) -> Self {
        Self {
            cl: v,
            adv: v,
            mod_: v,
            aux: v,
            orth: v,
        }
    }

    pub fn get(&self, t: Term) -> T {
        match t {
            Term::Cl => self.cl,
            Term::Adv => self.adv,
            Term::Mod => self.mod_,
            Term::Aux => self.aux,
            Term::Orth => self.orth,
        }
    }

    pub fn set(&mut self, t: Term, v: T) {
        match t {
            Term::Cl => self.cl = v,
            Term::Adv => self.adv = v,
            Term::Mod => self.mod_ = v,
            Term::Aux => self.aux = v,
            Term::Orth => self.orth = v,
        }
    }
}

impl Default for PerTerm<bool> {
    fn default() -> Self {
        Self::splat(true)
    }
}

impl Default for PerTerm<f64> {
    fn default() -> Self {
        Self::splat(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub orth_mode: OrthMode,
    pub enable: PerTerm<bool>,
    pub weights: PerTerm<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            orth_mode: OrthMode::Raw,
            enable: PerTerm::default(),
            weights: PerTerm::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !Term::ALL.iter().any(|&t| self.enable.get(t)) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        for t in Term::ALL {
            let w = self.weights.get(t);
            if !w.is_finite() {
                return Err(Error::Config(format!("loss weight for `{}` is {w}", t.name())));
            }
        }
        Ok(())
    }
}

/// Weighted per-term values of one batch; disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cl: f64,
    pub adv: f64,
    #[serde(rename = "mod")]
    pub mod_: f64,
    pub aux: f64,
    pub orth: f64,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, t: Term) -> f64 {
        match t {
            Term::Cl => self.cl,
            Term::Adv => self.adv,
            Term::Mod => self.mod_,
            Term::Aux => self.aux,
            Term::Orth => self.orth,
        }
    }

    fn set(&mut self, t: Term, v: f64) {
        match t {
            Term::Cl => self.cl = v,
            Term::Adv => self.adv = v,
            Term::Mod => self.mod_ = v,
            Term::Aux => self.aux = v,
            Term::Orth => self.orth = v,
        }
    }

    /// Sample-weighted mean of several batch reports.
    pub fn weighted_mean(reports: &[(LossReport, usize)]) -> LossReport {
        let n: usize = reports.iter().map(|(_, k)| k).sum();
        let mut out = LossReport::default();
        if n == 0 {
            return out;
        }
        for t in Term::ALL {
            let v = reports.iter().map(|(r, k)| r.term(t) * *k as f64).sum::<f64>() / n as f64;
            out.set(t, v);
        }
        out.total = Term::ALL.iter().map(|&t| out.term(t)).sum();
        out
    }
}

/// Graph nodes of the joint objective for one batch.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub terms: PerTerm<Option<Var>>,
    pub total: Var,
    pub report: LossReport,
}

fn modality_targets(m: usize, n: usize) -> Vec<usize> {
    vec![m; n]
}

fn batch_len(g: &Graph, t: &EmbeddingTriple) -> usize {
    g.value(t.z_inv).rows()
}

/// Sum over modalities of the task-head cross entropy.
pub fn loss_cl(g: &mut Graph, fwd: &BundleForward, y: &[usize]) -> Result<Var> {
    let a = g.cross_entropy(fwd.task_logits[0], y)?;
    let b = g.cross_entropy(fwd.task_logits[1], y)?;
    g.add(a, b)
}

/// Modality prediction from reversed `z_inv`: the head descends, the
/// invariant encoders ascend.
pub fn loss_adv(g: &mut Graph, bundle: &ModelBundle, fwd: &BundleForward) -> Result<Var> {
    let mut parts = Vec::with_capacity(MODALITIES);
    for (m, t) in fwd.triples.iter().enumerate() {
        let r = bundle.arch.grl.apply(g, t.z_inv);
        let logits = bundle.arch.cl_adv.forward(g, r)?;
        parts.push(g.cross_entropy(logits, &modality_targets(m, batch_len(g, t)))?);
    }
    g.add_all(&parts)
}

/// Modality prediction from `z_inf` and from `z_irr`, without reversal.
pub fn loss_mod(g: &mut Graph, bundle: &ModelBundle, fwd: &BundleForward) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * MODALITIES);
    let heads: [(&ClassifierHead, fn(&EmbeddingTriple) -> Var); 2] = [
        (&bundle.arch.cl_m_inf, |t| t.z_inf),
        (&bundle.arch.cl_m_irr, |t| t.z_irr),
    ];
    for (head, pick) in heads {
        for (m, t) in fwd.triples.iter().enumerate() {
            let logits = head.forward(g, pick(t))?;
            parts.push(g.cross_entropy(logits, &modality_targets(m, batch_len(g, t)))?);
        }
    }
    g.add_all(&parts)
}

/// Task prediction from `z_inv` and `z_inf` of both modalities through one
/// shared head.
pub fn loss_aux(g: &mut Graph, bundle: &ModelBundle, fwd: &BundleForward, y: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * MODALITIES);
    for t in &fwd.triples {
        for z in [t.z_inv, t.z_inf] {
            let logits = bundle.arch.cl_aux.forward(g, z)?;
            parts.push(g.cross_entropy(logits, y)?);
        }
    }
    g.add_all(&parts)
}

/// `Σ_m cos(z_inv, z_inf) + cos(z_inf, z_irr)`, each cosine batch-meaned
/// (squared per sample in [`OrthMode::Squared`]).
pub fn loss_orth(g: &mut Graph, triples: &[EmbeddingTriple], mode: OrthMode) -> Result<Var> {
    let squared = mode == OrthMode::Squared;
    let mut parts = Vec::with_capacity(2 * triples.len());
    for t in triples {
        parts.push(g.cosine(t.z_inv, t.z_inf, squared)?);
        parts.push(g.cosine(t.z_inf, t.z_irr, squared)?);
    }
    g.add_all(&parts)
}

/// Builds every enabled term and their weighted sum. A non-finite term is a
/// divergence error naming it (epoch 0; the trainer re-tags it).
pub fn total_loss(
    g: &mut Graph,
    bundle: &ModelBundle,
    fwd: &BundleForward,
    y: &[usize],
    cfg: &LossConfig,
) -> Result<LossGraph> {
    cfg.validate()?;
    let mut terms = PerTerm::splat(None);
    let mut report = LossReport::default();
    let mut weighted = Vec::new();
    for t in Term::ALL {
        if !cfg.enable.get(t) {
            continue;
        }
        let v = match t {
            Term::Cl => loss_cl(g, fwd, y)?,
            Term::Adv => loss_adv(g, bundle, fwd)?,
            Term::Mod => loss_mod(g, bundle, fwd)?,
            Term::Aux => loss_aux(g, bundle, fwd, y)?,
            Term::Orth => loss_orth(g, &fwd.triples, cfg.orth_mode)?,
        };
        let w = cfg.weights.get(t);
        let wv = if w == 1.0 { v } else { g.scale(v, w) };
        let value = g.value(wv).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                term: t.name().into(),
                epoch: 0,
            });
        }
        terms.set(t, Some(v));
        report.set(t, value);
        weighted.push(wv);
    }
    let total = g.add_all(&weighted)?;
    report.total = g.value(total).item();
    Ok(LossGraph {
        terms,
        total,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    /// Weight of the hard-label cross entropy; 0 uses soft labels only.
    pub alpha: f64,
    pub temperature: f64,
    pub use_lskd: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            temperature: 4.0,
            use_lskd: false,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "kd temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("kd alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Teacher soft targets `softmax(t / tau)`, standardized first under LSKD.
pub fn teacher_targets(teacher_logits: &Tensor, cfg: &KdConfig) -> Result<Tensor> {
    let t = if cfg.use_lskd {
        lskd_standardize(teacher_logits)?.logits
    } else {
        teacher_logits.clone()
    };
    let k = t.row_len();
    let mut out = Vec::with_capacity(t.numel());
    for r in 0..t.rows() {
        let row: Vec<f64> = t.row(r).iter().map(|v| v / cfg.temperature).collect();
        let lse = crate::tape::log_sum_exp(&row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Tensor::new(vec![t.rows(), k], out)
}

/// `alpha·CE(s, y) + (1 - alpha)·tau²·KL(softmax(t/tau) || softmax(s/tau))`
/// on the graph, with the teacher held constant.
pub fn kd_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    y: &[usize],
    cfg: &KdConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.value(student_logits).shape() != teacher_logits.shape() {
        return Err(Error::dim(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.value(student_logits).shape(),
            teacher_logits.shape()
        )));
    }
    let targets = teacher_targets(teacher_logits, cfg)?;
    let s = if cfg.use_lskd {
        g.standardize_rows(student_logits)?
    } else {
        student_logits
    };
    let mut parts = Vec::with_capacity(2);
    if cfg.alpha > 0.0 {
        let ce = g.cross_entropy(student_logits, y)?;
        parts.push(g.scale(ce, cfg.alpha));
    }
    if cfg.alpha < 1.0 {
        let kl = g.soft_kl(s, &targets, cfg.temperature)?;
        let tau2 = cfg.temperature * cfg.temperature;
        parts.push(g.scale(kl, (1.0 - cfg.alpha) * tau2));
    }
    g.add_all(&parts)
}

/// Value-only form of [`kd_loss`].
pub fn kd_baseline_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    y: &[usize],
    cfg: &KdConfig,
) -> Result<f64> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let s = g.input(student_logits.clone());
    let l = kd_loss(&mut g, s, teacher_logits, y, cfg)?;
    Ok(g.value(l).item())
}

/// Batch-mean cross entropy on plain tensors.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let l = g.input(logits.clone());
    let ce = g.cross_entropy(l, targets)?;
    Ok(g.value(ce).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub logits: Tensor,
    /// Rows whose std fell below the guard and were mapped to zeros.
    pub guarded_rows: Vec<usize>,
}

/// Per-row z-score (population std, divisor floored at 1e-8).
pub fn lskd_standardize(logits: &Tensor) -> Result<Standardized> {
    if logits.rank() != 2 || logits.row_len() < 2 {
        return Err(Error::dim(format!(
            "standardization needs [B, K >= 2] logits, got {:?}",
            logits.shape()
        )));
    }
    let mut out = Vec::with_capacity(logits.numel());
    let mut guarded_rows = Vec::new();
    for r in 0..logits.rows() {
        let (y, std) = standardize_row(logits.row(r));
        if std < EPS {
            guarded_rows.push(r);
        }
        out.extend(y);
    }
    if !guarded_rows.is_empty() {
        log::debug!("standardization guard hit on {} constant rows", guarded_rows.len());
    }
    Ok(Standardized {
        logits: Tensor::new(logits.shape().to_vec(), out)?,
        guarded_rows,
    })
}
