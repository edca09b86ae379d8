//! Free-energy scoring of classification logits and the energy-based unknown
//! identifier.
//!
//! The free energy of a logit vector is `-T * log(sum_i exp(g_i / T))` over the
//! currently active (known) classes. Energies of known and unknown instances
//! are each modelled with a shifted Weibull distribution fitted by maximum
//! likelihood on a held-out set; a prediction is labelled unknown when the
//! unknown density exceeds the known density at its energy.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::ClassId;

/// Which side of the energy classifier a fit belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitSide {
    Known,
    Unknown,
}

impl fmt::Display for FitSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitSide::Known => write!(f, "known"),
            FitSide::Unknown => write!(f, "unknown"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("active class set is empty")]
    EmptyActiveSet,
    #[error("weibull fit needs at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("weibull fit needs at least two distinct finite sample values")]
    DegenerateSamples,
    #[error("fitting the {side} energy distribution failed: {source}")]
    SideFit {
        side: FitSide,
        #[source]
        source: Box<EnergyError>,
    },
}

/// Classification logits for classes `1..=c_max` with the set of currently
/// active (known) classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
    active: BTreeSet<ClassId>,
}

impl LogitVector {
    /// All classes active.
    pub fn new(values: Vec<f64>) -> Self {
        let active = (1..=values.len() as ClassId).collect();
        LogitVector { values, active }
    }

    pub fn with_active(values: Vec<f64>, active: BTreeSet<ClassId>) -> Self {
        debug_assert!(active.iter().all(|&c| c >= 1 && c as usize <= values.len()));
        LogitVector { values, active }
    }

    pub fn c_max(&self) -> usize {
        self.values.len()
    }

    /// Logit of class `c` (classes are 1-based; 0 is the unknown label and has
    /// no logit).
    pub fn logit(&self, c: ClassId) -> f64 {
        self.values[(c - 1) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn active(&self) -> &BTreeSet<ClassId> {
        &self.active
    }

    pub fn active_ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.active.iter().copied()
    }
}

/// Temperature and the mask value applied to logits of unseen classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub temperature: f64,
    pub mask_value: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            temperature: 1.0,
            mask_value: -1e9,
        }
    }
}

/// Free energy `-T * log(sum_{i in active} exp(g_i / T))`, computed with a
/// log-sum-exp shift.
pub fn free_energy(l: &LogitVector, cfg: &EnergyConfig) -> Result<f64, EnergyError> {
    if l.active.is_empty() {
        return Err(EnergyError::EmptyActiveSet);
    }
    let t = cfg.temperature;
    let scaled: Vec<f64> = l.active_ids().map(|c| l.logit(c) / t).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|&s| (s - m).exp()).sum();
    Ok(-t * (m + sum.ln()))
}

/// Set the logits of every class outside `known` to the mask value and make
/// `known` the active set. Logits of classes in `known` are untouched.
pub fn mask_unseen(l: &LogitVector, known: &BTreeSet<ClassId>, cfg: &EnergyConfig) -> LogitVector {
    let mut values = l.values.clone();
    for c in 1..=l.c_max() as ClassId {
        if !known.contains(&c) {
            values[(c - 1) as usize] = cfg.mask_value;
        }
    }
    LogitVector {
        values,
        active: known.clone(),
    }
}

/// Softmax probabilities over the active classes, in ascending class-id order.
pub fn softmax_probs(l: &LogitVector, cfg: &EnergyConfig) -> Vec<f64> {
    let t = cfg.temperature;
    let scaled: Vec<f64> = l.active_ids().map(|c| l.logit(c) / t).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Known/unknown verdict of the energy classifier or the softmax baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyLabel {
    Known,
    Unknown,
}

/// Unknown iff the maximum softmax probability falls strictly below `t`.
pub fn classify_softmax_baseline(l: &LogitVector, t: f64, cfg: &EnergyConfig) -> EnergyLabel {
    debug_assert!(t > 0.0 && t < 1.0, "threshold must lie in (0, 1)");
    let max_prob = softmax_probs(l, cfg)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if max_prob < t {
        EnergyLabel::Unknown
    } else {
        EnergyLabel::Known
    }
}

/// Three-parameter Weibull distribution with support `x > location`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeibullModel {
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
}

/// Density of the shifted Weibull; zero at and below the location.
pub fn weibull_pdf(m: &WeibullModel, x: f64) -> f64 {
    if x <= m.location {
        return 0.0;
    }
    let z = (x - m.location) / m.scale;
    (m.shape / m.scale) * z.powf(m.shape - 1.0) * (-z.powf(m.shape)).exp()
}

/// A fitted shifted-Weibull model with its fit record.
#[derive(Debug, Clone, PartialEq)]
pub struct WeibullFit {
    pub model: WeibullModel,
    pub log_likelihood: f64,
    pub n_samples: usize,
}

/// Flat, serialisable fit record.
#[derive(Debug, Clone, Serialize)]
pub struct WeibullFitDiagnostics {
    pub shape: f64,
    pub scale: f64,
    pub location: f64,
    pub log_likelihood: f64,
    pub n_samples: usize,
}

impl WeibullFit {
    pub fn diagnostics(&self) -> WeibullFitDiagnostics {
        WeibullFitDiagnostics {
            shape: self.model.shape,
            scale: self.model.scale,
            location: self.model.location,
            log_likelihood: self.log_likelihood,
            n_samples: self.n_samples,
        }
    }
}

const MIN_FIT_SAMPLES: usize = 10;
const SHAPE_LO: f64 = 1e-3;
const SHAPE_HI: f64 = 1e3;
const SHAPE_TOL: f64 = 1e-8;

/// Maximum-likelihood fit of a shifted Weibull distribution.
///
/// The location is pinned just below the sample minimum
/// (`min - max(1e-5 * range, 1e-6)`), which reduces the problem to the
/// two-parameter Weibull MLE on the shifted samples. The offset is kept tiny
/// because shapes below 1 concentrate mass at the left edge, where any shift
/// biases the recovered shape. The shape solves the
/// profile score equation by bisection; the scale then follows in closed form
/// from `scale^shape = mean((x - location)^shape)`.
pub fn fit_shifted_weibull(samples: &[f64]) -> Result<WeibullFit, EnergyError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(EnergyError::TooFewSamples {
            got: samples.len(),
            min: MIN_FIT_SAMPLES,
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(EnergyError::DegenerateSamples);
    }
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(EnergyError::DegenerateSamples);
    }
    let eps = (1e-5 * (max - min)).max(1e-6);
    let location = min - eps;

    let log_shifted: Vec<f64> = samples.iter().map(|&x| (x - location).ln()).collect();
    let n = samples.len() as f64;
    let mean_log: f64 = log_shifted.iter().sum::<f64>() / n;
    let max_log = log_shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // Profile score g(k) = 1/k + mean(ln t) - sum(t^k ln t)/sum(t^k), with
    // t = x - location. Weights are shifted by the max to avoid overflow at
    // large k. g is strictly decreasing, so bisection applies.
    let score = |k: f64| -> f64 {
        let mut weight_sum = 0.0;
        let mut weighted_log = 0.0;
        for &lt in &log_shifted {
            let w = (k * (lt - max_log)).exp();
            weight_sum += w;
            weighted_log += w * lt;
        }
        1.0 / k + mean_log - weighted_log / weight_sum
    };

    let mut lo = SHAPE_LO;
    let mut hi = SHAPE_HI;
    let shape = if score(lo) <= 0.0 {
        lo
    } else if score(hi) >= 0.0 {
        hi
    } else {
        while hi - lo > SHAPE_TOL {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    // scale^shape = mean(t^shape), evaluated in log space.
    let log_mean_pow = {
        let sum: f64 = log_shifted
            .iter()
            .map(|&lt| (shape * (lt - max_log)).exp())
            .sum();
        shape * max_log + (sum / n).ln()
    };
    let log_scale = log_mean_pow / shape;
    let scale = log_scale.exp();

    // With the profile scale, sum((t/scale)^shape) = n exactly.
    let log_likelihood =
        n * shape.ln() - n * shape * log_scale + (shape - 1.0) * mean_log * n - n;

    Ok(WeibullFit {
        model: WeibullModel {
            shape,
            scale,
            location,
        },
        log_likelihood,
        n_samples: samples.len(),
    })
}

/// Shifted-Weibull models of the known and unknown energy distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyClassifier {
    pub known: WeibullFit,
    pub unknown: WeibullFit,
}

/// Fit both sides independently; errors carry which side failed.
pub fn fit_energy_classifier(
    known_energies: &[f64],
    unknown_energies: &[f64],
) -> Result<EnergyClassifier, EnergyError> {
    let known = fit_shifted_weibull(known_energies).map_err(|e| EnergyError::SideFit {
        side: FitSide::Known,
        source: Box::new(e),
    })?;
    let unknown = fit_shifted_weibull(unknown_energies).map_err(|e| EnergyError::SideFit {
        side: FitSide::Unknown,
        source: Box::new(e),
    })?;
    Ok(EnergyClassifier { known, unknown })
}

/// Label an energy by comparing the two fitted densities.
///
/// Unknown iff the known density is strictly below the unknown density; ties
/// go to Known. Energies below both supports read as low-energy
/// (in-distribution) and go to Known; energies so far above both supports that
/// both densities underflow go to Unknown.
pub fn classify_energy(clf: &EnergyClassifier, e: f64) -> EnergyLabel {
    let pk = weibull_pdf(&clf.known.model, e);
    let pu = weibull_pdf(&clf.unknown.model, e);
    if pk == 0.0 && pu == 0.0 {
        if e > clf.known.model.location && e > clf.unknown.model.location {
            return EnergyLabel::Unknown;
        }
        return EnergyLabel::Known;
    }
    if pk < pu {
        EnergyLabel::Unknown
    } else {
        EnergyLabel::Known
    }
}
