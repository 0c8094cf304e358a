//! Comparison dropout methods adapted to bags of instance embeddings.
//!
//! The `*_multiplier` functions return the matrix that the forward pass
//! multiplies into the activations, so a model can replay the same mask in
//! its backward pass.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{MilError, Result};
use crate::numerics::{Matrix, Rng};
use crate::pdl::apba;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    /// Independent elementwise dropout.
    Vanilla { rate: f64 },
    /// Whole feature columns dropped across the bag.
    Spatial { rate: f64 },
    /// Instances removed from the bag before the projector.
    DropInstance { rate: f64 },
    /// Instances whose max-normalized APBA weight exceeds a threshold are zeroed.
    AttentionDrop { threshold: f64 },
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Vanilla { rate } | Self::Spatial { rate } | Self::DropInstance { rate } => {
                check_rate(rate)
            }
            Self::AttentionDrop { threshold } => {
                if threshold > 0.0 && threshold < 1.0 {
                    Ok(())
                } else {
                    Err(MilError::Config(format!(
                        "attention-dropout threshold {threshold} outside (0, 1)"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Vanilla { .. } => "vanilla",
            Self::Spatial { .. } => "spatial",
            Self::DropInstance { .. } => "drop_instance",
            Self::AttentionDrop { .. } => "attention_drop",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::Vanilla { rate } | Self::Spatial { rate } | Self::DropInstance { rate } => {
                write!(f, "{}(p={rate})", self.name())
            }
            Self::AttentionDrop { threshold } => {
                write!(f, "{}(threshold={threshold})", self.name())
            }
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(MilError::Rate {
            what: "dropout",
            value: p,
        })
    }
}

fn kept_scale(rng: &mut Rng, p: f64) -> f64 {
    if p == 0.0 || rng.bernoulli(1.0 - p) {
        1.0 / (1.0 - p)
    } else {
        0.0
    }
}

pub fn vanilla_multiplier(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Matrix> {
    check_rate(p)?;
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = kept_scale(rng, p);
    }
    Ok(m)
}

/// Each entry zeroed with probability `p`, survivors scaled by `1/(1−p)`.
pub fn vanilla_dropout(features: &Matrix, p: f64, rng: &mut Rng) -> Result<Matrix> {
    let m = vanilla_multiplier(features.rows(), features.cols(), p, rng)?;
    features.hadamard(&m)
}

pub fn spatial_multiplier(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Matrix> {
    check_rate(p)?;
    let column: Vec<f64> = (0..cols).map(|_| kept_scale(rng, p)).collect();
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        m.row_mut(i).copy_from_slice(&column);
    }
    Ok(m)
}

/// Whole columns zeroed with probability `p`, survivors scaled by `1/(1−p)`.
pub fn spatial_dropout(features: &Matrix, p: f64, rng: &mut Rng) -> Result<Matrix> {
    let m = spatial_multiplier(features.rows(), features.cols(), p, rng)?;
    features.hadamard(&m)
}

/// Instance indices surviving DropInstance, in their original order.
pub fn drop_instance_indices(k: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    check_rate(fraction)?;
    if k == 0 {
        return Err(MilError::Empty("bag"));
    }
    let removed = (fraction * k as f64).round() as usize;
    if removed == 0 {
        return Ok((0..k).collect());
    }
    let keep_count = k.saturating_sub(removed).max(1);
    let mut kept = rng.sample_indices(k, keep_count);
    kept.sort_unstable();
    Ok(kept)
}

/// Removes `round(fraction·K)` uniformly chosen instances, always leaving
/// at least one. The bag label is inherited unchanged.
pub fn drop_instance(bag: &Bag, fraction: f64, rng: &mut Rng) -> Result<Bag> {
    let kept = drop_instance_indices(bag.len(), fraction, rng)?;
    if kept.len() == bag.len() {
        return Ok(bag.clone());
    }
    Ok(bag.subset(&kept))
}

/// Which instances attention-dropout would zero; empty when the rule would
/// remove every instance.
pub fn attention_drop_set(embeddings: &Matrix, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MilError::Config(format!(
            "attention-dropout threshold {threshold} outside (0, 1)"
        )));
    }
    let attn = apba(embeddings)?;
    let max = attn.weights().iter().copied().fold(0.0, f64::max);
    let dropped: Vec<bool> = attn.weights().iter().map(|w| w / max > threshold).collect();
    if dropped.iter().all(|&d| d) {
        return Ok(vec![false; dropped.len()]);
    }
    Ok(dropped)
}

pub fn attention_multiplier(embeddings: &Matrix, threshold: f64) -> Result<Matrix> {
    let dropped = attention_drop_set(embeddings, threshold)?;
    let mut m = Matrix::filled(embeddings.rows(), embeddings.cols(), 1.0);
    for (i, &d) in dropped.iter().enumerate() {
        if d {
            m.row_mut(i).fill(0.0);
        }
    }
    Ok(m)
}

/// Hard-threshold instance dropout on max-normalized APBA weights. No
/// rescaling; `_rng` is accepted for interface symmetry and unused because
/// the rule is deterministic.
pub fn attention_dropout(embeddings: &Matrix, threshold: f64, _rng: &mut Rng) -> Result<Matrix> {
    let m = attention_multiplier(embeddings, threshold)?;
    embeddings.hadamard(&m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_matrix(6, 5, 1.0);
        assert_eq!(vanilla_dropout(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(spatial_dropout(&x, 0.0, &mut rng).unwrap(), x);
        assert!(vanilla_dropout(&x, 1.0, &mut rng).is_err());
        assert!(spatial_dropout(&x, 1.2, &mut rng).is_err());
    }

    #[test]
    fn spatial_drops_whole_columns() {
        let mut rng = Rng::new(5);
        let x = Matrix::filled(8, 30, 1.0);
        for _ in 0..20 {
            let y = spatial_dropout(&x, 0.5, &mut rng).unwrap();
            for j in 0..30 {
                let col: Vec<f64> = (0..8).map(|i| y[(i, j)]).collect();
                assert!(col.iter().all(|&v| v == 0.0) || col.iter().all(|&v| v == 2.0));
            }
        }
    }

    #[test]
    fn drop_instance_counts() {
        let mut rng = Rng::new(3);
        assert_eq!(drop_instance_indices(10, 0.3, &mut rng).unwrap().len(), 7);
        assert_eq!(
            drop_instance_indices(10, 0.0, &mut rng).unwrap(),
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(drop_instance_indices(1, 0.9, &mut rng).unwrap().len(), 1);
        assert_eq!(drop_instance_indices(2, 0.9, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn uniform_attention_falls_back_to_keeping_all() {
        let x = Matrix::filled(5, 3, 0.7);
        let dropped = attention_drop_set(&x, 0.65).unwrap();
        assert!(dropped.iter().all(|&d| !d));
        let mut rng = Rng::new(0);
        assert_eq!(attention_dropout(&x, 0.65, &mut rng).unwrap(), x);
    }

    #[test]
    fn dominant_instance_is_the_only_one_dropped() {
        // row means 3, 0, 0.1, -1 -> normalized weights 1, e^-3, e^-2.9, e^-4
        let x = Matrix::from_rows(&[
            vec![3.0, 3.0],
            vec![0.0, 0.0],
            vec![0.1, 0.1],
            vec![-1.0, -1.0],
        ])
        .unwrap();
        assert_eq!(
            attention_drop_set(&x, 0.65).unwrap(),
            vec![true, false, false, false]
        );
        assert!(attention_drop_set(&x, 1.0).is_err());
    }
}
