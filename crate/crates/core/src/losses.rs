//! Margin softmax losses over an embedding batch and a block of prototypes.
//!
//! Both losses are written in terms of the cosines `cos_j = x_hat . P_j`
//! between the L2-normalized embedding and every prototype in the view.
//! Backward passes return the exact gradient with respect to the raw
//! (pre-normalization) embeddings and to every prototype row, the latter as
//! a sparse map keyed by class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::{dot, norm, ClassId, ZERO_NORM};
use crate::weights::WeightView;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum MarginLoss {
    /// Large margin cosine loss: the target logit is `s * (cos - m)`.
    #[serde(rename = "cosface")]
    CosFace {
        #[serde(rename = "s")]
        scale: f64,
        #[serde(rename = "m")]
        margin: f64,
    },
    /// D-Softmax: independent intra-class and inter-class terms, with the
    /// intra term saturating once the target cosine passes `d`.
    #[serde(rename = "dsoftmax")]
    DSoftmax {
        #[serde(rename = "s")]
        scale: f64,
        #[serde(rename = "d")]
        termination: f64,
    },
}

/// Cosines of one example against every prototype in the view.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsRow {
    pub cosines: Vec<f64>,
    pub target: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to each raw embedding, in input order.
    pub d_embeddings: Vec<Vec<f64>>,
    pub d_prototypes: BTreeMap<ClassId, Vec<f64>>,
    /// Clamped cosines the loss was evaluated on.
    pub rows: Vec<LogitsRow>,
}

impl MarginLoss {
    pub fn scale(&self) -> f64 {
        match *self {
            MarginLoss::CosFace { scale, .. } | MarginLoss::DSoftmax { scale, .. } => scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, name, v) = match *self {
            MarginLoss::CosFace { scale, margin } => (scale, "m", margin),
            MarginLoss::DSoftmax { scale, termination } => (scale, "d", termination),
        };
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("s must be positive, got {s}")));
        }
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
        }
        Ok(())
    }

    /// Loss of one row; when `dcos` is given it receives dL/dcos_j.
    pub fn row_loss(&self, cosines: &[f64], target: usize, dcos: Option<&mut [f64]>) -> f64 {
        match *self {
            MarginLoss::CosFace { scale, margin } => {
                cosface_row(cosines, target, scale, margin, dcos)
            }
            MarginLoss::DSoftmax { scale, termination } => {
                dsoftmax_row(cosines, target, scale, termination, dcos)
            }
        }
    }

    /// Mean loss over the rows.
    pub fn forward(&self, rows: &[LogitsRow]) -> Result<f64> {
        let mut total = 0.0;
        for (i, row) in rows.iter().enumerate() {
            let t = row.target.ok_or(Error::MissingTarget(i))?;
            total += self.row_loss(&row.cosines, t, None);
        }
        Ok(if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        })
    }

    /// Loss and gradients for raw embeddings classified against `weights`.
    /// `targets[i]` is the view position of example `i`'s class.
    pub fn backward<E: AsRef<[f64]>>(
        &self,
        embeddings: &[E],
        targets: &[Option<usize>],
        weights: &WeightView<'_>,
    ) -> Result<LossGrad> {
        assert_eq!(embeddings.len(), targets.len());
        let dim = weights.dim();
        let n = embeddings.len();
        let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let mut loss = 0.0;
        let mut d_embeddings = Vec::with_capacity(n);
        let mut d_proto = vec![0.0; weights.len() * dim];
        let mut rows = Vec::with_capacity(n);
        let mut dcos = vec![0.0; weights.len()];

        for (i, (raw, target)) in embeddings.iter().zip(targets).enumerate() {
            let raw = raw.as_ref();
            if raw.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: raw.len(),
                });
            }
            let t = target.ok_or(Error::MissingTarget(i))?;
            let r = norm(raw);
            if r.is_nan() || r < ZERO_NORM {
                return Err(Error::ZeroVector { norm: r });
            }
            let x: Vec<f64> = raw.iter().map(|v| v / r).collect();
            let cosines: Vec<f64> = (0..weights.len())
                .map(|j| dot(&x, weights.row(j)).clamp(-1.0, 1.0))
                .collect();
            loss += self.row_loss(&cosines, t, Some(&mut dcos));

            // dL/dx_hat = sum_j dcos_j P_j ; dL/dP_j += dcos_j x_hat
            let mut gx = vec![0.0; dim];
            for (j, &g) in dcos.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let g = g * inv_n;
                for (a, p) in gx.iter_mut().zip(weights.row(j)) {
                    *a += g * p;
                }
                for (a, xv) in d_proto[j * dim..(j + 1) * dim].iter_mut().zip(&x) {
                    *a += g * xv;
                }
            }
            // Through the normalization: (I - x_hat x_hat^T) g / ||x_raw||.
            let radial = dot(&gx, &x);
            d_embeddings.push(
                gx.iter()
                    .zip(&x)
                    .map(|(g, xv)| (g - radial * xv) / r)
                    .collect(),
            );
            rows.push(LogitsRow {
                cosines,
                target: Some(t),
            });
        }

        let d_prototypes = (0..weights.len())
            .map(|j| {
                (
                    weights.class_at(j),
                    d_proto[j * dim..(j + 1) * dim].to_vec(),
                )
            })
            .collect();
        Ok(LossGrad {
            loss: loss * inv_n,
            d_embeddings,
            d_prototypes,
            rows,
        })
    }
}

/// `log(sum exp(z))` over the given logits, max-shifted.
fn log_sum_exp(logits: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn cosface_row(cosines: &[f64], target: usize, s: f64, m: f64, dcos: Option<&mut [f64]>) -> f64 {
    let logit = |j: usize| {
        if j == target {
            s * (cosines[j] - m)
        } else {
            s * cosines[j]
        }
    };
    let lse = log_sum_exp((0..cosines.len()).map(logit));
    if let Some(d) = dcos {
        for (j, g) in d.iter_mut().enumerate() {
            let p = (logit(j) - lse).exp();
            *g = s * (p - if j == target { 1.0 } else { 0.0 });
        }
    }
    lse - logit(target)
}

fn dsoftmax_row(cosines: &[f64], target: usize, s: f64, d: f64, dcos: Option<&mut [f64]>) -> f64 {
    // log(1 + e^{ds} / e^{s cos_y})
    let intra_arg = s * (d - cosines[target]);
    let intra = softplus(intra_arg);
    // log(1 + sum_{j != y} e^{s cos_j}), the 1 being a zero logit.
    let negatives = (0..cosines.len())
        .filter(|&j| j != target)
        .map(|j| s * cosines[j]);
    let inter = log_sum_exp(std::iter::once(0.0).chain(negatives));
    if let Some(g) = dcos {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = if j == target {
                -s * sigmoid(intra_arg)
            } else {
                s * (s * cosines[j] - inter).exp()
            };
        }
    }
    intra + inter
}

pub fn cosface_forward(rows: &[LogitsRow], s: f64, m: f64) -> Result<f64> {
    MarginLoss::CosFace {
        scale: s,
        margin: m,
    }
    .forward(rows)
}

pub fn cosface_backward<E: AsRef<[f64]>>(
    embeddings: &[E],
    targets: &[Option<usize>],
    weights: &WeightView<'_>,
    s: f64,
    m: f64,
) -> Result<LossGrad> {
    MarginLoss::CosFace {
        scale: s,
        margin: m,
    }
    .backward(embeddings, targets, weights)
}

pub fn dsoftmax_forward(rows: &[LogitsRow], s: f64, d: f64) -> Result<f64> {
    MarginLoss::DSoftmax {
        scale: s,
        termination: d,
    }
    .forward(rows)
}

pub fn dsoftmax_backward<E: AsRef<[f64]>>(
    embeddings: &[E],
    targets: &[Option<usize>],
    weights: &WeightView<'_>,
    s: f64,
    d: f64,
) -> Result<LossGrad> {
    MarginLoss::DSoftmax {
        scale: s,
        termination: d,
    }
    .backward(embeddings, targets, weights)
}

/// Intra-class and inter-class parts of the D-Softmax row loss.
pub fn dsoftmax_terms(cosines: &[f64], target: usize, s: f64, d: f64) -> (f64, f64) {
    let intra = softplus(s * (d - cosines[target]));
    let total = dsoftmax_row(cosines, target, s, d, None);
    (intra, total - intra)
}
