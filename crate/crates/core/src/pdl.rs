//! Progressive Dropout Layer.
//!
//! Each training step the layer
//!
//! 1. scores instances with parameter-free average-pooling attention,
//! 2. builds an ascending vector of `K` drop rates between `0` and the
//!    current global rate `P(t)`,
//! 3. hands the largest rate to the most-attended instance, the second
//!    largest to the next one, and so on,
//! 4. drops whole instance rows with those per-instance probabilities,
//!    rescaling survivors by `1 / (1 − p'_k)`.
//!
//! `P(t)` itself follows a progressive schedule over epochs that starts at
//! zero and reaches `P_max` on the last epoch, so the layer is inert while
//! the aggregator first learns to localize positive instances.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MilError, Result};
use crate::numerics::{stable_softmax, Matrix, Rng};

/// Non-negative per-instance weights that sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Vec<f64>);

impl AttentionMap {
    /// Wraps weights that are already normalized.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MilError::Empty("attention map"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MilError::NonFinite("attention weights".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MilError::Config(format!(
                "attention weights sum to {total}, expected 1"
            )));
        }
        Ok(Self(weights))
    }

    /// Softmax of arbitrary scores.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        stable_softmax(scores).map(Self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationKind {
    Log,
    Cos,
    Exp,
}

impl InterpolationKind {
    pub const ALL: [InterpolationKind; 3] = [Self::Log, Self::Cos, Self::Exp];
}

impl fmt::Display for InterpolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Log => "log",
            Self::Cos => "cos",
            Self::Exp => "exp",
        })
    }
}

impl FromStr for InterpolationKind {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "log" => Ok(Self::Log),
            "cos" => Ok(Self::Cos),
            "exp" => Ok(Self::Exp),
            other => Err(MilError::Config(format!(
                "unknown interpolation kind {other:?} (expected log, cos or exp)"
            ))),
        }
    }
}

/// Interpolation curve plus its spacing parameters.
///
/// `base` (G) is shared by LOG and EXP, `exponent` (E) only affects LOG and
/// `offset` (B) only affects EXP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    pub kind: InterpolationKind,
    pub base: f64,
    pub exponent: f64,
    pub offset: f64,
}

impl Default for Interpolation {
    fn default() -> Self {
        Self::new(InterpolationKind::Log)
    }
}

impl Interpolation {
    pub fn new(kind: InterpolationKind) -> Self {
        Self {
            kind,
            base: 10.0,
            exponent: 0.5,
            offset: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 1.0 && self.base.is_finite()) {
            return Err(MilError::Config(format!(
                "G must exceed 1, got {}",
                self.base
            )));
        }
        if !(self.exponent > 0.0 && self.exponent.is_finite()) {
            return Err(MilError::Config(format!(
                "E must be positive, got {}",
                self.exponent
            )));
        }
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(MilError::Config(format!(
                "B must be positive, got {}",
                self.offset
            )));
        }
        Ok(())
    }
}

/// `num` evenly spaced samples on `[start, stop]`; a single sample is `start`.
fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    match num {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (num - 1) as f64;
            let mut out: Vec<f64> = (0..num).map(|i| start + step * i as f64).collect();
            out[num - 1] = stop;
            out
        }
    }
}

/// Ascending drop rates from `0` to `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateVector(Vec<f64>);

impl RateVector {
    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.last().copied().unwrap_or(0.0)
    }
}

fn check_rate(what: &'static str, value: f64) -> Result<()> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(MilError::Rate { what, value })
    }
}

/// `K` non-decreasing drop rates from `0` to `P` shaped by `interp`.
///
/// * LOG: `P/E · log_G(linspace(0, G^E − 1, K) + 1)`
/// * COS: `P · ½(1 − cos(linspace(0, π, K)))`
/// * EXP: `P/B · (G^linspace(0, log_G(B + 1), K) − 1)`
///
/// For `K ≥ 2` the endpoints are exactly `0` and `P`; `K = 1` yields `[0]`.
pub fn interpolate_rates(interp: &Interpolation, p: f64, k: usize) -> Result<RateVector> {
    check_rate("global drop rate", p)?;
    interp.validate()?;
    if k == 0 {
        return Err(MilError::Empty("rate vector"));
    }
    let g = interp.base;
    let mut rates: Vec<f64> = match interp.kind {
        InterpolationKind::Log => {
            let e = interp.exponent;
            linspace(0.0, g.powf(e) - 1.0, k)
                .into_iter()
                .map(|x| p / e * (x + 1.0).log(g))
                .collect()
        }
        InterpolationKind::Cos => linspace(0.0, PI, k)
            .into_iter()
            .map(|x| p * (0.5 * (1.0 - x.cos())))
            .collect(),
        InterpolationKind::Exp => {
            let b = interp.offset;
            linspace(0.0, (b + 1.0).log(g), k)
                .into_iter()
                .map(|x| p / b * (g.powf(x) - 1.0))
                .collect()
        }
    };
    for r in &mut rates {
        *r = r.clamp(0.0, p);
    }
    rates[0] = 0.0;
    if k >= 2 {
        rates[k - 1] = p;
    }
    Ok(RateVector(rates))
}

/// Average-pooling based attention: softmax over instances of each
/// instance's mean activation.
pub fn apba(embeddings: &Matrix) -> Result<AttentionMap> {
    if embeddings.rows() == 0 || embeddings.cols() == 0 {
        return Err(MilError::Empty("embedding matrix"));
    }
    AttentionMap::from_scores(&embeddings.row_means())
}

/// Instance indices ordered by descending attention, ties by ascending index.
pub fn attention_ranking(attention: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    order
}

/// Pairs attention ranks with rates: the `r`-th most attended instance
/// receives the `r`-th largest rate.
pub fn assign_rates(attention: &AttentionMap, rates: &RateVector) -> Result<Vec<f64>> {
    let k = attention.len();
    if rates.len() != k {
        return Err(MilError::Shape(format!(
            "{} rates for {k} attention weights",
            rates.len()
        )));
    }
    let mut assigned = vec![0.0; k];
    for (rank, idx) in attention_ranking(attention.weights())
        .into_iter()
        .enumerate()
    {
        assigned[idx] = rates.rates()[k - 1 - rank];
    }
    Ok(assigned)
}

/// Kept/dropped flag per instance plus the multiplier applied to its row.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub keep: Vec<bool>,
    pub scale: Vec<f64>,
}

impl InstanceMask {
    pub fn identity(k: usize) -> Self {
        Self {
            keep: vec![true; k],
            scale: vec![1.0; k],
        }
    }

    /// Applies the mask row by row.
    pub fn apply(&self, embeddings: &Matrix) -> Result<Matrix> {
        if embeddings.rows() != self.scale.len() {
            return Err(MilError::Shape(format!(
                "mask over {} instances applied to {} rows",
                self.scale.len(),
                embeddings.rows()
            )));
        }
        let mut out = embeddings.clone();
        for (i, &s) in self.scale.iter().enumerate() {
            if s != 1.0 {
                out.row_mut(i).iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(out)
    }
}

/// Instance-based Bernoulli masking: instance `k` survives with
/// probability `1 − p'_k`, and survivors are scaled by `1 / (1 − p'_k)`.
pub fn sample_mask(p_prime: &[f64], rng: &mut Rng) -> Result<InstanceMask> {
    for &p in p_prime {
        check_rate("instance drop rate", p)?;
    }
    let mut keep = Vec::with_capacity(p_prime.len());
    let mut scale = Vec::with_capacity(p_prime.len());
    for &p in p_prime {
        let kept = p == 0.0 || rng.bernoulli(1.0 - p);
        keep.push(kept);
        scale.push(if kept { 1.0 / (1.0 - p) } else { 0.0 });
    }
    Ok(InstanceMask { keep, scale })
}

/// Epoch position within a progressive schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub horizon: usize,
    pub p_max: f64,
    pub interp: Interpolation,
}

impl ScheduleState {
    pub fn new(epoch: usize, horizon: usize, p_max: f64, interp: Interpolation) -> Self {
        Self {
            epoch,
            horizon,
            p_max,
            interp,
        }
    }

    fn epoch_checked(&self) -> Result<usize> {
        if self.epoch >= self.horizon {
            return Err(MilError::OutOfRange {
                index: self.epoch,
                len: self.horizon,
            });
        }
        Ok(self.epoch)
    }
}

/// Global drop rate `P(t)`: element `t` of the `T`-point interpolation from
/// `0` to `P_max`.
pub fn scheduler_value(state: &ScheduleState) -> Result<f64> {
    let epoch = state.epoch_checked()?;
    Ok(progressive_schedule(state.interp, state.p_max, state.horizon)?[epoch])
}

/// All `T` values of the progressive schedule.
pub fn progressive_schedule(interp: Interpolation, p_max: f64, horizon: usize) -> Result<Vec<f64>> {
    if horizon < 2 {
        return Err(MilError::Config(format!(
            "schedule horizon must be at least 2 epochs, got {horizon}"
        )));
    }
    Ok(interpolate_rates(&interp, p_max, horizon)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything one PDL application decided for a bag.
#[derive(Clone, Debug, PartialEq)]
pub struct PdlLayerState {
    pub attention: AttentionMap,
    pub assigned_rates: Vec<f64>,
    pub mask: InstanceMask,
}

/// PDL with an explicit global rate, for callers that already evaluated the
/// schedule for the current epoch.
pub fn pdl_forward_with_rate(
    embeddings: &Matrix,
    global_rate: f64,
    interp: &Interpolation,
    rng: &mut Rng,
) -> Result<(Matrix, PdlLayerState)> {
    let attention = apba(embeddings)?;
    let rates = interpolate_rates(interp, global_rate, embeddings.rows())?;
    let assigned_rates = assign_rates(&attention, &rates)?;
    let mask = sample_mask(&assigned_rates, rng)?;
    let out = mask.apply(embeddings)?;
    Ok((
        out,
        PdlLayerState {
            attention,
            assigned_rates,
            mask,
        },
    ))
}

/// Full layer: identity in eval mode, scheduled attention-ranked instance
/// dropout in train mode. The same `interp` shapes both the epoch schedule
/// and the per-instance rate vector.
pub fn pdl_forward(
    embeddings: &Matrix,
    state: &ScheduleState,
    rng: &mut Rng,
    mode: Mode,
) -> Result<(Matrix, Option<PdlLayerState>)> {
    match mode {
        Mode::Eval => Ok((embeddings.clone(), None)),
        Mode::Train => {
            let rate = scheduler_value(state)?;
            let (out, st) = pdl_forward_with_rate(embeddings, rate, &state.interp, rng)?;
            Ok((out, Some(st)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn log_default() -> Interpolation {
        Interpolation::default()
    }

    #[test]
    fn two_point_vectors_are_endpoints() {
        for kind in InterpolationKind::ALL {
            let r = interpolate_rates(&Interpolation::new(kind), 0.45, 2).unwrap();
            assert_eq!(r.rates(), &[0.0, 0.45]);
        }
    }

    #[test]
    fn log_five_points() {
        let r = interpolate_rates(&log_default(), 0.45, 5).unwrap();
        // 40-digit evaluation of the LOG formula
        let expected = [
            0.0,
            0.168_913_144_397_727_735,
            0.286_470_947_161_902_034,
            0.376_725_923_910_968_281,
            0.45,
        ];
        for (a, b) in r.rates().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cos_midpoint() {
        let r = interpolate_rates(&Interpolation::new(InterpolationKind::Cos), 0.4, 3).unwrap();
        assert_eq!(r.rates()[0], 0.0);
        assert!((r.rates()[1] - 0.2).abs() < 1e-15);
        assert_eq!(r.rates()[2], 0.4);
    }

    #[test]
    fn single_instance_never_drops() {
        for kind in InterpolationKind::ALL {
            let r = interpolate_rates(&Interpolation::new(kind), 0.45, 1).unwrap();
            assert_eq!(r.rates(), &[0.0]);
        }
    }

    #[test]
    fn invalid_rate_and_params() {
        assert!(interpolate_rates(&log_default(), 1.0, 4).is_err());
        assert!(interpolate_rates(&log_default(), -0.1, 4).is_err());
        let mut bad = log_default();
        bad.base = 1.0;
        assert!(interpolate_rates(&bad, 0.3, 4).is_err());
    }

    #[test]
    fn log_spacing_shrinks_towards_p() {
        let r = interpolate_rates(&log_default(), 0.45, 30).unwrap();
        let gaps: Vec<f64> = r.rates().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.windows(2).all(|g| g[1] < g[0]));
    }

    #[test]
    fn apba_examples() {
        let same = Matrix::from_rows(&[vec![0.3, 1.0], vec![0.3, 1.0], vec![0.3, 1.0]]).unwrap();
        assert!(apba(&same)
            .unwrap()
            .weights()
            .iter()
            .all(|w| (w - 1.0 / 3.0).abs() < 1e-15));

        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let a = apba(&m).unwrap();
        let e = std::f64::consts::E;
        assert!((a.weights()[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((a.weights()[0] - 0.7311).abs() < 1e-4);

        let shifted = m.map(|v| v + 17.5);
        let b = apba(&shifted).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(apba(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn assign_examples() {
        let rates = RateVector(vec![0.0, 0.2, 0.45]);
        let a = AttentionMap::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(assign_rates(&a, &rates).unwrap(), vec![0.45, 0.2, 0.0]);
        let u = AttentionMap::new(vec![1.0 / 3.0; 3]).unwrap();
        assert_eq!(assign_rates(&u, &rates).unwrap(), vec![0.45, 0.2, 0.0]);
        let short = AttentionMap::new(vec![0.5, 0.5]).unwrap();
        assert!(assign_rates(&short, &rates).is_err());
    }

    #[test]
    fn zero_rates_give_identity_mask() {
        let mut rng = Rng::new(0);
        let m = sample_mask(&[0.0; 6], &mut rng).unwrap();
        assert_eq!(m, InstanceMask::identity(6));
        assert!(sample_mask(&[0.2, 1.0], &mut rng).is_err());
    }

    #[test]
    fn scheduler_endpoints() {
        for kind in InterpolationKind::ALL {
            let interp = Interpolation::new(kind);
            assert_eq!(
                scheduler_value(&ScheduleState::new(0, 40, 0.45, interp)).unwrap(),
                0.0
            );
            assert_eq!(
                scheduler_value(&ScheduleState::new(39, 40, 0.45, interp)).unwrap(),
                0.45
            );
            assert!(scheduler_value(&ScheduleState::new(40, 40, 0.45, interp)).is_err());
        }
        let mid = scheduler_value(&ScheduleState::new(2, 5, 0.45, log_default())).unwrap();
        assert!((mid - 0.286_470_947_161_902_034).abs() < 1e-12);
    }

    #[test]
    fn first_epoch_is_identity() {
        let mut rng = Rng::new(9);
        let x = rng.gaussian_matrix(7, 4, 1.0);
        for kind in InterpolationKind::ALL {
            let st = ScheduleState::new(0, 10, 0.45, Interpolation::new(kind));
            let (y, state) = pdl_forward(&x, &st, &mut rng, Mode::Train).unwrap();
            assert_eq!(y, x);
            assert!(state.unwrap().mask.keep.iter().all(|&k| k));
        }
        let st = ScheduleState::new(9, 10, 0.45, log_default());
        let (y, state) = pdl_forward(&x, &st, &mut rng, Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert!(state.is_none());
    }

    #[test]
    fn single_row_bag_is_untouched() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix(1, 5, 1.0);
        let st = ScheduleState::new(9, 10, 0.45, log_default());
        for _ in 0..50 {
            let (y, _) = pdl_forward(&x, &st, &mut rng, Mode::Train).unwrap();
            assert_eq!(y, x);
        }
    }

    proptest! {
        #[test]
        fn rate_vectors_are_monotone_with_exact_endpoints(
            p in 0.0f64..0.99, k in 2usize..300, which in 0usize..3,
            g in 1.5f64..50.0, e in 0.1f64..3.0, b in 0.1f64..3.0,
        ) {
            let interp = Interpolation { kind: InterpolationKind::ALL[which], base: g, exponent: e, offset: b };
            let r = interpolate_rates(&interp, p, k).unwrap();
            prop_assert_eq!(r.rates()[0], 0.0);
            prop_assert_eq!(r.rates()[k - 1], p);
            prop_assert!(r.rates().windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn dropped_rows_are_entirely_zero(seed in 0u64..1000, k in 1usize..12) {
            let mut rng = Rng::new(seed);
            let x = rng.gaussian_matrix(k, 6, 1.0);
            let (y, st) = pdl_forward_with_rate(&x, 0.45, &log_default(), &mut rng).unwrap();
            for i in 0..k {
                if st.mask.keep[i] {
                    let s = 1.0 / (1.0 - st.assigned_rates[i]);
                    for (a, b) in y.row(i).iter().zip(x.row(i)) {
                        prop_assert!((a - b * s).abs() < 1e-12);
                    }
                } else {
                    prop_assert!(y.row(i).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
