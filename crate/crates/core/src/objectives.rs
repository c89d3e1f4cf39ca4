//! Pre-training objectives over pooled embeddings.
//!
//! * alignment: `(1 − cos(ΔV̄, ΔL)) + mean|F_t^v − F_s^v|`, where `ΔV̄` is the
//!   crop-mean visual shift and `ΔL` the text shift for one target domain;
//! * contrastive: a source term anchored on `F_s^v` (positive `F_s^l`,
//!   negatives every `F_t^{l_i}`) plus one term per target anchored on
//!   `F_t^{v_i}` (positive `F_t^{l_i}`, negative `F_s^l`), averaged over crops
//!   and weighted by `λ₀..λ_M`;
//! * pre-training loss: alignment summed over targets plus the contrastive term.
//!
//! Text embeddings enter as constants; gradients flow into the visual inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UNIT_TOL: f64 = 1e-6;

/// `F_s^v`, `F_t^{v_i}` (`N×d` each) and `F_s^l`, `F_t^{l_i}` (`d` each).
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    pub source_visual: Tensor,
    pub target_visual: Vec<Tensor>,
    pub source_text: Tensor,
    pub target_text: Vec<Tensor>,
}

impl EmbeddingBundle {
    /// Checks shapes and that every row is unit norm.
    pub fn new(source_visual: Tensor, target_visual: Vec<Tensor>, source_text: Tensor, target_text: Vec<Tensor>) -> Result<Self> {
        let b = Self::from_raw(source_visual, target_visual, source_text, target_text)?;
        let d = b.dim();
        let rows = std::iter::once(&b.source_visual)
            .chain(&b.target_visual)
            .chain(std::iter::once(&b.source_text))
            .chain(&b.target_text);
        for t in rows {
            for row in t.data().chunks(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Contract(format!("embedding row has norm {n}, expected 1")));
                }
            }
        }
        Ok(b)
    }

    /// Shape checks only, for hand-built inputs outside the unit-norm contract.
    pub fn from_raw(source_visual: Tensor, target_visual: Vec<Tensor>, source_text: Tensor, target_text: Vec<Tensor>) -> Result<Self> {
        let &[n, d] = source_visual.shape() else {
            return Err(Error::Contract(format!("F_s^v must be N×d, got {:?}", source_visual.shape())));
        };
        if target_visual.is_empty() || target_visual.len() != target_text.len() {
            return Err(Error::Contract(format!(
                "need matching nonzero target counts, got {} visual and {} text",
                target_visual.len(),
                target_text.len()
            )));
        }
        if source_text.shape() != [d] {
            return Err(Error::Contract(format!("F_s^l must have length {d}, got {:?}", source_text.shape())));
        }
        for (i, (v, l)) in target_visual.iter().zip(&target_text).enumerate() {
            if v.shape() != [n, d] || l.shape() != [d] {
                return Err(Error::Contract(format!(
                    "target {i}: visual {:?} / text {:?} inconsistent with N={n}, d={d}",
                    v.shape(),
                    l.shape()
                )));
            }
        }
        Ok(Self {
            source_visual,
            target_visual,
            source_text,
            target_text,
        })
    }

    pub fn crops(&self) -> usize {
        self.source_visual.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.source_visual.shape()[1]
    }

    pub fn domains(&self) -> usize {
        self.target_visual.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VtcclConfig {
    pub tau: f64,
    /// `λ₀` for the source term, then one weight per target in prompt order.
    pub lambdas: Vec<f64>,
}

impl Default for VtcclConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambdas: vec![1.0, 0.1, 1.0],
        }
    }
}

impl VtcclConfig {
    pub fn validate(&self, domains: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("loss.tau", format!("temperature must be positive, got {}", self.tau)));
        }
        if self.lambdas.len() != domains + 1 {
            return Err(Error::config(
                "loss.lambdas",
                format!("expected {} weights (source + {domains} targets), got {}", domains + 1, self.lambdas.len()),
            ));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::config("loss.lambdas", format!("weights must be nonnegative, got {bad}")));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tau: self.tau,
            lambdas: self.lambdas.iter().map(|l| l * factor).collect(),
        }
    }
}

fn text_columns(cols: &[&Tensor], d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; d * cols.len()];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.data().iter().enumerate() {
            data[i * cols.len() + j] = *v;
        }
    }
    Tensor::from_vec(data, &[d, cols.len()])
}

/// Mean over crops of `−log softmax(row)[0]` for logits `visual · text / τ`.
fn contrastive_term(visual: &Tensor, cols: &[&Tensor], tau: f64, d: usize) -> Result<Tensor> {
    let logits = visual.matmul(&text_columns(cols, d)?)?.scalar_mul(1.0 / tau);
    let positive = logits.select_col(0)?;
    Ok(logits.logsumexp_rows().sub(&positive)?.mean())
}

pub fn alignment_loss(bundle: &EmbeddingBundle, domain: usize) -> Result<Tensor> {
    let target = bundle.target_visual.get(domain).ok_or_else(|| {
        Error::Contract(format!("domain index {domain} out of range for {} targets", bundle.domains()))
    })?;
    let shift = target.sub(&bundle.source_visual)?.mean_axis(0)?;
    let text_shift = bundle.target_text[domain].sub(&bundle.source_text)?;
    let cos = shift.cosine_sim(&text_shift)?;
    let reg = target.l1_mean(&bundle.source_visual)?;
    cos.neg().add_scalar(1.0).add(&reg)
}

pub fn vtccl_loss(bundle: &EmbeddingBundle, cfg: &VtcclConfig) -> Result<Tensor> {
    cfg.validate(bundle.domains())?;
    let d = bundle.dim();
    let mut source_cols = vec![&bundle.source_text];
    source_cols.extend(bundle.target_text.iter());
    let mut total = contrastive_term(&bundle.source_visual, &source_cols, cfg.tau, d)?.scalar_mul(cfg.lambdas[0]);
    for (i, (visual, text)) in bundle.target_visual.iter().zip(&bundle.target_text).enumerate() {
        let term = contrastive_term(visual, &[text, &bundle.source_text], cfg.tau, d)?;
        total = total.add(&term.scalar_mul(cfg.lambdas[i + 1]))?;
    }
    Ok(total)
}

/// Loss value plus the logged components.
#[derive(Clone, Debug)]
pub struct PretrainLoss {
    pub total: Tensor,
    pub align: Vec<f64>,
    pub vtccl: f64,
}

/// `Σ_i w_i · alignment_i + vtccl`.
pub fn pretrain_loss(bundle: &EmbeddingBundle, cfg: &VtcclConfig, domain_weights: &[f64]) -> Result<PretrainLoss> {
    if domain_weights.len() != bundle.domains() {
        return Err(Error::Contract(format!(
            "{} domain weights for {} targets",
            domain_weights.len(),
            bundle.domains()
        )));
    }
    let vtccl = vtccl_loss(bundle, cfg)?;
    let mut align = Vec::with_capacity(bundle.domains());
    let mut total = vtccl.clone();
    for (i, w) in domain_weights.iter().enumerate() {
        let a = alignment_loss(bundle, i)?;
        align.push(a.item());
        total = total.add(&a.scalar_mul(*w))?;
    }
    Ok(PretrainLoss {
        vtccl: vtccl.item(),
        total,
        align,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec(), &[data.len()]).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_vec(rows.concat(), &[rows.len(), d]).unwrap()
    }

    #[test]
    fn alignment_zero_shift_is_one() {
        let fs = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = EmbeddingBundle::new(fs.clone(), vec![fs], v(&[1.0, 0.0]), vec![v(&[0.0, 1.0])]).unwrap();
        assert_eq!(alignment_loss(&b, 0).unwrap().item(), 1.0);
    }

    #[test]
    fn alignment_hand_example() {
        let b = EmbeddingBundle::from_raw(m(&[&[1.0, 0.0]]), vec![m(&[&[1.0, 1.0]])], v(&[0.0, 0.0]), vec![v(&[0.0, 1.0])]).unwrap();
        assert!((alignment_loss(&b, 0).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alignment_orthogonal_shift() {
        // ΔV̄ = [0.3, 0] ⟂ ΔL = [0, 1]; l1_mean = 0.15
        let b = EmbeddingBundle::from_raw(m(&[&[0.0, 0.5]]), vec![m(&[&[0.3, 0.5]])], v(&[0.2, 0.0]), vec![v(&[0.2, 1.0])]).unwrap();
        assert!((alignment_loss(&b, 0).unwrap().item() - 1.15).abs() < 1e-15);
    }

    #[test]
    fn alignment_domain_out_of_range() {
        let fs = m(&[&[1.0, 0.0]]);
        let b = EmbeddingBundle::new(fs.clone(), vec![fs], v(&[1.0, 0.0]), vec![v(&[0.0, 1.0])]).unwrap();
        assert!(matches!(alignment_loss(&b, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn vtccl_identical_embeddings() {
        let e = m(&[&[0.6, 0.8], &[0.6, 0.8]]);
        let t = v(&[0.6, 0.8]);
        let b = EmbeddingBundle::new(e.clone(), vec![e], t.clone(), vec![t]).unwrap();
        for tau in [0.07, 0.5, 3.0] {
            let cfg = VtcclConfig { tau, lambdas: vec![1.0, 1.0] };
            let l = vtccl_loss(&b, &cfg).unwrap().item();
            assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12, "tau {tau}: {l}");
        }
    }

    #[test]
    fn vtccl_perfect_separation() {
        let b = EmbeddingBundle::new(m(&[&[1.0, 0.0]]), vec![m(&[&[-1.0, 0.0]])], v(&[1.0, 0.0]), vec![v(&[-1.0, 0.0])]).unwrap();
        let cfg = VtcclConfig { tau: 1.0, lambdas: vec![1.0, 1.0] };
        let expect = 2.0 * (1.0 + (-2f64).exp()).ln();
        assert!((vtccl_loss(&b, &cfg).unwrap().item() - expect).abs() < 1e-12);
        assert!((expect - 0.253856).abs() < 1e-6);
    }

    #[test]
    fn vtccl_zero_lambdas() {
        let e = m(&[&[1.0, 0.0]]);
        let b = EmbeddingBundle::new(e.clone(), vec![e], v(&[0.0, 1.0]), vec![v(&[1.0, 0.0])]).unwrap();
        let cfg = VtcclConfig { tau: 0.07, lambdas: vec![0.0, 0.0] };
        assert_eq!(vtccl_loss(&b, &cfg).unwrap().item(), 0.0);
    }

    #[test]
    fn vtccl_config_errors() {
        let e = m(&[&[1.0, 0.0]]);
        let b = EmbeddingBundle::new(e.clone(), vec![e], v(&[0.0, 1.0]), vec![v(&[1.0, 0.0])]).unwrap();
        for cfg in [
            VtcclConfig { tau: 0.0, lambdas: vec![1.0, 1.0] },
            VtcclConfig { tau: 0.1, lambdas: vec![1.0, -1.0] },
            VtcclConfig { tau: 0.1, lambdas: vec![1.0] },
        ] {
            assert!(matches!(vtccl_loss(&b, &cfg), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn unit_norm_contract() {
        let bad = m(&[&[1.0, 1.0]]);
        assert!(EmbeddingBundle::new(bad.clone(), vec![bad], v(&[1.0, 0.0]), vec![v(&[0.0, 1.0])]).is_err());
    }

    #[test]
    fn pretrain_composes_terms() {
        let fs = m(&[&[1.0, 0.0]]);
        let b = EmbeddingBundle::new(fs.clone(), vec![fs], v(&[0.0, 1.0]), vec![v(&[1.0, 0.0])]).unwrap();
        let cfg = VtcclConfig { tau: 0.5, lambdas: vec![1.0, 0.3] };
        let pre = pretrain_loss(&b, &cfg, &[1.0]).unwrap();
        let vt = vtccl_loss(&b, &cfg).unwrap().item();
        assert_eq!(pre.align, vec![1.0]);
        assert!((pre.total.item() - (1.0 + vt)).abs() < 1e-15);
        let half = pretrain_loss(&b, &cfg.scaled(0.5), &[1.0]).unwrap();
        assert!((half.vtccl - 0.5 * vt).abs() < 1e-15);
        assert_eq!(half.align, pre.align);
    }
}
