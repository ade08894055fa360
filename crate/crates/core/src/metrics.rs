//! Confusion counts and the three detection rates.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Label, LabeledWindow};
use crate::nn::{is_positive, NnError, QuantizedNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} is undefined: zero denominator")]
    Undefined(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, actual_positive: bool, predicted_positive: bool) {
        match (actual_positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self::new(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn_ + other.fn_)
    }
}

pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    let d = c.tp + c.fn_;
    if d == 0 {
        return Err(MetricsError::Undefined("sensitivity"));
    }
    Ok(c.tp as f64 / d as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    let d = c.tn + c.fp;
    if d == 0 {
        return Err(MetricsError::Undefined("specificity"));
    }
    Ok(c.tn as f64 / d as f64)
}

/// Specificity over the noise-only subset.
pub fn noise_specificity(c_noise: &ConfusionCounts) -> Result<f64> {
    let d = c_noise.tn + c_noise.fp;
    if d == 0 {
        return Err(MetricsError::Undefined("noise specificity"));
    }
    Ok(c_noise.tn as f64 / d as f64)
}

/// Counts over AF/NORMAL windows and, separately, over NOISE windows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: ConfusionCounts,
    pub noise: ConfusionCounts,
}

impl Evaluation {
    pub fn record(&mut self, label: Label, predicted_positive: bool) {
        match label {
            Label::Noise => self.noise.record(false, predicted_positive),
            l => self.overall.record(l == Label::Af, predicted_positive),
        }
    }

    /// Builds counts from `(ground truth, predicted AF)` pairs.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (Label, bool)>) -> Result<Self> {
        let mut e = Self::default();
        let mut n = 0;
        for (l, p) in pairs {
            e.record(l, p);
            n += 1;
        }
        if n == 0 {
            return Err(MetricsError::Contract("no windows to evaluate".into()));
        }
        Ok(e)
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            sensitivity: sensitivity(&self.overall).ok(),
            specificity: specificity(&self.overall).ok(),
            noise_specificity: noise_specificity(&self.noise).ok(),
            overall: self.overall,
            noise: self.noise,
        }
    }
}

/// Rates with undefined ones left empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub noise_specificity: Option<f64>,
    pub overall: ConfusionCounts,
    pub noise: ConfusionCounts,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        writeln!(f, "sensitivity={}", show(self.sensitivity))?;
        writeln!(f, "specificity={}", show(self.specificity))?;
        writeln!(f, "noise_specificity={}", show(self.noise_specificity))?;
        writeln!(f, "tp={}", self.overall.tp)?;
        writeln!(f, "fp={}", self.overall.fp)?;
        writeln!(f, "tn={}", self.overall.tn)?;
        writeln!(f, "fn={}", self.overall.fn_)?;
        writeln!(f, "noise_tn={}", self.noise.tn)?;
        write!(f, "noise_fp={}", self.noise.fp)
    }
}

/// Eval-mode predictions of a network on every window.
pub fn evaluate(net: &QuantizedNetwork, windows: &[LabeledWindow]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(MetricsError::Contract("no windows to evaluate".into()));
    }
    let plan = net.eval_plan()?;
    let preds: std::result::Result<Vec<bool>, NnError> =
        windows.par_iter().map(|w| plan.forward(&w.samples).map(is_positive)).collect();
    Evaluation::from_predictions(windows.iter().map(|w| w.label).zip(preds?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(sensitivity(&ConfusionCounts::new(45, 0, 0, 5)).unwrap(), 0.9);
        assert_eq!(sensitivity(&ConfusionCounts::new(0, 3, 3, 10)).unwrap(), 0.0);
        assert_eq!(specificity(&ConfusionCounts::new(0, 2, 98, 0)).unwrap(), 0.98);
        assert_eq!(noise_specificity(&ConfusionCounts::default()), Err(MetricsError::Undefined("noise specificity")));
        assert!(sensitivity(&ConfusionCounts::new(0, 1, 1, 0)).is_err());
    }

    #[test]
    fn perfect_and_all_negative() {
        let labels = [Label::Af, Label::Normal, Label::Noise, Label::Af, Label::Normal];
        let perfect = Evaluation::from_predictions(labels.iter().map(|l| (*l, *l == Label::Af))).unwrap().report();
        assert_eq!((perfect.sensitivity, perfect.specificity, perfect.noise_specificity), (Some(1.0), Some(1.0), Some(1.0)));
        let neg = Evaluation::from_predictions(labels.iter().map(|l| (*l, false))).unwrap().report();
        assert_eq!((neg.sensitivity, neg.specificity), (Some(0.0), Some(1.0)));
        assert!(Evaluation::from_predictions(std::iter::empty()).is_err());
    }

    proptest! {
        #[test]
        fn rates_bounded_and_independent(tp in 0u64..1000, fp in 0u64..1000, tn in 1u64..1000, fn_ in 1u64..1000, d in 0u64..50) {
            let c = ConfusionCounts::new(tp, fp, tn, fn_);
            let s = sensitivity(&c).unwrap();
            let p = specificity(&c).unwrap();
            prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&p));
            prop_assert_eq!(s, sensitivity(&ConfusionCounts::new(tp, fp + d, tn + d, fn_)).unwrap());
            prop_assert_eq!(p, specificity(&ConfusionCounts::new(tp + d, fp, tn, fn_ + d)).unwrap());
        }
    }
}
