//! Haemoglobin regression, cut-off classification and screening metrics.
//!
//! Anemia is the positive class: a case is anemic at cut-off `c` when its
//! haemoglobin is strictly below `c`. Rates with a zero denominator are
//! [`Rate::Undefined`], never zero.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{PallorError, Result};
use crate::exec::Exec;
use crate::features::FeatureVector;
use crate::neuralnet::{self, encode_weights, Network, NetworkSpec, Standardization, Tensor, TrainingConfig, WeightsFormat};

pub const HB_REPORT_RANGE: [f64; 2] = [3.0, 20.0];
pub const DEFAULT_CUTOFFS: [f64; 3] = [9.0, 10.0, 11.0];
pub const MIN_TRAINING_SAMPLES: usize = 10;

/// Trained Hb regressor with its standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    net: Network,
    model_id: String,
}

impl Regressor {
    /// Wraps a network; the model id is the hash of its binary weights file.
    pub fn new(net: Network) -> Result<Self> {
        let id = neuralnet::content_id(&encode_weights(&net, WeightsFormat::Binary)?);
        Self::with_id(net, id)
    }

    pub fn with_id(net: Network, model_id: String) -> Result<Self> {
        if net.input_shape() != [3] || net.output_shape() != [1] {
            return Err(PallorError::Shape(format!(
                "regressor must map [3] to [1], got {:?} → {:?}",
                net.input_shape(),
                net.output_shape()
            )));
        }
        if let Some(s) = &net.standardization {
            if s.input_mean.len() != 3 || s.input_std.len() != 3 {
                return Err(PallorError::Shape("model/feature standardization mismatch".into()));
            }
        }
        Ok(Self { net, model_id })
    }

    /// Loads a weights file; the model id is the hash of the file bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(PallorError::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| PallorError::io(path, e))?;
        Self::with_id(neuralnet::decode_weights(&bytes)?, neuralnet::content_id(&bytes))
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Network output in g/dL before clamping.
    pub fn raw_hb(&self, features: &FeatureVector) -> Result<f64> {
        let x = features.as_input();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PallorError::OutOfRange("non-finite feature".into()));
        }
        let (input, unscale): (Vec<f64>, Box<dyn Fn(f64) -> f64>) = match &self.net.standardization {
            Some(s) => (s.apply(&x), Box::new(|y| s.unscale_target(y))),
            None => (x.to_vec(), Box::new(|y| y)),
        };
        let y = self.net.forward(&Tensor::vector(input))?.data()[0];
        Ok(unscale(y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbPrediction {
    pub hb: f64,
    pub clamped: bool,
    pub features: FeatureVector,
    pub model_id: String,
}

/// Clamps to the physiological reporting range, flagging when it fired.
pub fn clamp_hb(raw: f64) -> (f64, bool) {
    let [lo, hi] = HB_REPORT_RANGE;
    let hb = raw.clamp(lo, hi);
    (hb, hb != raw)
}

pub fn predict_hb(model: &Regressor, features: &FeatureVector) -> Result<HbPrediction> {
    let raw = model.raw_hb(features)?;
    if !raw.is_finite() {
        return Err(PallorError::OutOfRange(format!("regressor produced {raw}")));
    }
    let (hb, clamped) = clamp_hb(raw);
    Ok(HbPrediction { hb, clamped, features: *features, model_id: model.model_id.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffDecision {
    pub cutoff: f64,
    pub anemic: bool,
}

pub fn is_anemic(hb: f64, cutoff: f64) -> bool {
    hb < cutoff
}

pub fn classify(pred: &HbPrediction, cutoff: f64) -> CutoffDecision {
    debug_assert!(cutoff > 0.0);
    CutoffDecision { cutoff, anemic: is_anemic(pred.hb, cutoff) }
}

pub fn validate_cutoffs(cutoffs: &[f64]) -> Result<()> {
    if cutoffs.is_empty() {
        return Err(PallorError::InvalidConfig("at least one cut-off is required".into()));
    }
    if let Some(c) = cutoffs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(PallorError::InvalidConfig(format!("cut-off {c} must be positive")));
    }
    Ok(())
}

/// A percentage, or undefined when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

impl Rate {
    pub fn percent(num: usize, den: usize) -> Rate {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(100.0 * num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(v),
            Rate::Undefined => None,
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Defined(v) => s.serialize_f64(*v),
            Rate::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v:.2}"),
            Rate::Undefined => f.write_str("—"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScreeningMetrics {
    pub cutoff: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
}

impl ScreeningMetrics {
    pub fn from_counts(cutoff: f64, tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self {
            cutoff,
            tp,
            fp,
            tn,
            fn_,
            accuracy: Rate::percent(tp + tn, tp + fp + tn + fn_),
            sensitivity: Rate::percent(tp, tp + fn_),
            specificity: Rate::percent(tn, tn + fp),
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn column(&self) -> ReportColumn {
        ReportColumn {
            cutoff: self.cutoff,
            accuracy: self.accuracy,
            sensitivity: self.sensitivity,
            specificity: self.specificity,
        }
    }
}

/// Confusion counts and rates for `(predicted_hb, gold_hb)` pairs at one
/// cut-off. Gold labels use the same strict rule as predictions.
pub fn evaluate(pairs: &[(f64, f64)], cutoff: f64) -> Result<ScreeningMetrics> {
    if pairs.is_empty() {
        return Err(PallorError::Dataset("cannot evaluate an empty set".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(pred, gold) in pairs {
        match (is_anemic(pred, cutoff), is_anemic(gold, cutoff)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ScreeningMetrics::from_counts(cutoff, tp, fp, tn, fn_))
}

pub fn evaluate_cutoffs(pairs: &[(f64, f64)], cutoffs: &[f64]) -> Result<Vec<ScreeningMetrics>> {
    cutoffs.iter().map(|&c| evaluate(pairs, c)).collect()
}

/// One column of the report table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub cutoff: f64,
    pub accuracy: Rate,
    pub sensitivity: Rate,
    pub specificity: Rate,
}

/// Text table with one `Hb = <cutoff>` column per cut-off and rows for
/// accuracy, sensitivity and specificity, in percent to 2 decimals.
pub fn render_report(columns: &[ReportColumn]) -> String {
    let header: Vec<String> = columns.iter().map(|c| format!("Hb = {}", c.cutoff)).collect();
    let rows: [(&str, Vec<String>); 3] = [
        ("Accuracy", columns.iter().map(|c| c.accuracy.to_string()).collect()),
        ("Sensitivity", columns.iter().map(|c| c.sensitivity.to_string()).collect()),
        ("Specificity", columns.iter().map(|c| c.specificity.to_string()).collect()),
    ];
    let label_w = "Cut-off point".len();
    let widths: Vec<usize> = (0..columns.len())
        .map(|i| rows.iter().map(|(_, v)| v[i].chars().count()).chain([header[i].chars().count()]).max().unwrap())
        .collect();
    let mut out = String::new();
    let mut line = |label: &str, cells: &[String]| {
        let _ = write!(out, "{label:<label_w$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let pad = w - cell.chars().count();
            let _ = write!(out, "  {}{cell}", " ".repeat(pad));
        }
        out.push('\n');
    };
    line("Cut-off point", &header);
    for (label, cells) in &rows {
        line(label, cells);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub n: usize,
    pub metrics: Vec<ScreeningMetrics>,
}

/// Outcome of [`train_regressor`].
#[derive(Debug, Clone)]
pub struct RegressorTraining {
    pub regressor: Regressor,
    /// Mean training loss per epoch (standardized units).
    pub loss_curve: Vec<f64>,
    /// Running minimum of `loss_curve`.
    pub best_loss_curve: Vec<f64>,
    pub validation_mae: f64,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Trains a regressor on `(features, gold_hb)` pairs with a seeded 80/20
/// train/validation split. Inputs and target are standardized with
/// training-split statistics.
pub fn train_regressor(
    dataset: &[(FeatureVector, f64)],
    spec: NetworkSpec,
    config: &TrainingConfig,
    exec: Exec,
) -> Result<RegressorTraining> {
    config.validate()?;
    if dataset.len() < MIN_TRAINING_SAMPLES {
        return Err(PallorError::Dataset(format!(
            "{} samples, need at least {MIN_TRAINING_SAMPLES}",
            dataset.len()
        )));
    }
    let [lo, hi] = HB_REPORT_RANGE;
    for (i, (f, hb)) in dataset.iter().enumerate() {
        if f.as_input().iter().any(|v| !v.is_finite()) {
            return Err(PallorError::Dataset(format!("sample {i}: non-finite features")));
        }
        if !(*hb >= lo && *hb <= hi) {
            return Err(PallorError::Dataset(format!("sample {i}: gold hb {hb} outside [{lo}, {hi}]")));
        }
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_train = (dataset.len() * 4).div_ceil(5);
    let (train_idx, val_idx) = order.split_at(n_train);

    let inputs: Vec<Vec<f64>> = train_idx.iter().map(|&i| dataset[i].0.as_input().to_vec()).collect();
    let targets: Vec<f64> = train_idx.iter().map(|&i| dataset[i].1).collect();
    let norm = Standardization::fit(&inputs, &targets);
    let pairs: Vec<(Tensor, Tensor)> = inputs
        .iter()
        .zip(&targets)
        .map(|(x, &y)| (Tensor::vector(norm.apply(x)), Tensor::vector(vec![norm.scale_target(y)])))
        .collect();

    let mut net = Network::init(spec)?;
    if net.input_shape() != [3] || net.output_shape() != [1] {
        return Err(PallorError::Shape("regressor spec must map [3] to [1]".into()));
    }
    net.standardization = Some(norm);
    let loss_curve = neuralnet::train(&mut net, &pairs, config, exec, |_, _, _| {})?;
    let regressor = Regressor::new(net)?;

    let eval_idx = if val_idx.is_empty() { train_idx } else { val_idx };
    let mut abs_err = 0.0;
    for &i in eval_idx {
        abs_err += (predict_hb(&regressor, &dataset[i].0)?.hb - dataset[i].1).abs();
    }
    let best_loss_curve = loss_curve
        .iter()
        .scan(f64::INFINITY, |best, &l| {
            *best = best.min(l);
            Some(*best)
        })
        .collect();
    Ok(RegressorTraining {
        regressor,
        loss_curve,
        best_loss_curve,
        validation_mae: abs_err / eval_idx.len() as f64,
        train_indices: train_idx.to_vec(),
        validation_indices: val_idx.to_vec(),
    })
}

/// Default regressor training schedule.
pub fn default_regressor_config(seed: u64) -> TrainingConfig {
    TrainingConfig { learning_rate: 0.01, epochs: 300, batch_size: 8, momentum: 0.9, seed, ..Default::default() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Activation, LayerParams, LayerSpec};
    use proptest::prelude::*;

    fn fv(r: f64, g: f64) -> FeatureVector {
        FeatureVector { mean_r: r, mean_g: g, ei: r.log10() - g.log10(), mask_area: 100 }
    }

    /// Linear model returning `bias` + `w·ei`.
    fn linear_model(w_ei: f64, bias: f64) -> Regressor {
        let spec = NetworkSpec { input_shape: vec![3], layers: vec![LayerSpec::dense(3, 1, Activation::Linear)], seed: 0 };
        Regressor::new(Network::from_params(spec, vec![LayerParams { weights: vec![0.0, 0.0, w_ei], bias: vec![bias] }]).unwrap()).unwrap()
    }

    #[test]
    fn prediction_is_deterministic_and_clamped() {
        let m = linear_model(10.0, 9.0);
        let f = fv(120.0, 80.0);
        assert_eq!(predict_hb(&m, &f).unwrap(), predict_hb(&m, &f).unwrap());

        let hot = linear_model(0.0, 25.0);
        let p = predict_hb(&hot, &f).unwrap();
        assert_eq!((p.hb, p.clamped), (20.0, true));
        let cold = linear_model(0.0, -1.0);
        assert_eq!(predict_hb(&cold, &f).unwrap().hb, 3.0);
        assert!(!predict_hb(&linear_model(0.0, 12.0), &f).unwrap().clamped);
    }

    #[test]
    fn standardization_mismatch_rejected() {
        let mut net = Network::init(NetworkSpec::regressor(0)).unwrap();
        net.standardization = Some(Standardization::identity(2));
        assert!(Regressor::new(net).is_err());
    }

    #[test]
    fn classify_is_strict() {
        let p = |hb| HbPrediction { hb, clamped: false, features: fv(100.0, 80.0), model_id: String::new() };
        assert!(classify(&p(10.9), 11.0).anemic);
        assert!(!classify(&p(11.0), 11.0).anemic);
        assert!(!classify(&p(9.5), 9.0).anemic);
    }

    #[test]
    fn evaluate_constructed_case() {
        // tp=3 fn=1 tn=4 fp=2 at cutoff 11
        let mut pairs = vec![(10.0, 10.0); 3];
        pairs.push((12.0, 10.0));
        pairs.extend([(12.0, 12.0); 4]);
        pairs.extend([(10.0, 12.0); 2]);
        let m = evaluate(&pairs, 11.0).unwrap();
        assert_eq!((m.tp, m.fn_, m.tn, m.fp), (3, 1, 4, 2));
        assert_eq!(m.accuracy.to_string(), "70.00");
        assert_eq!(m.sensitivity.to_string(), "75.00");
        assert_eq!(m.specificity.to_string(), "66.67");
    }

    #[test]
    fn perfect_predictions_score_100() {
        let pairs: Vec<(f64, f64)> = [8.0, 9.5, 10.5, 12.0].iter().map(|&h| (h, h)).collect();
        let m = evaluate(&pairs, 10.0).unwrap();
        assert_eq!([m.accuracy, m.sensitivity, m.specificity], [Rate::Defined(100.0); 3]);
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let m = evaluate(&[(12.0, 12.0), (10.0, 13.0)], 11.0).unwrap();
        assert_eq!(m.sensitivity, Rate::Undefined);
        assert_eq!(serde_json::to_value(m).unwrap()["sensitivity"], "undefined");
        assert!(evaluate(&[], 11.0).is_err());
    }

    #[test]
    fn report_reproduces_reference_table() {
        let col = |c, a, s, p| ReportColumn { cutoff: c, accuracy: Rate::Defined(a), sensitivity: Rate::Defined(s), specificity: Rate::Defined(p) };
        let text = render_report(&[
            col(9.0, 93.53, 22.49, 94.20),
            col(10.0, 77.07, 52.21, 78.40),
            col(11.0, 42.96, 77.58, 36.03),
        ]);
        let expected = "\
Cut-off point  Hb = 9  Hb = 10  Hb = 11
Accuracy        93.53    77.07    42.96
Sensitivity     22.49    52.21    77.58
Specificity     94.20    78.40    36.03
";
        assert_eq!(text, expected);
    }

    #[test]
    fn report_single_column_and_undefined() {
        let text = render_report(&[ReportColumn { cutoff: 11.0, accuracy: Rate::Defined(100.0), sensitivity: Rate::Undefined, specificity: Rate::Defined(100.0) }]);
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().ends_with("Hb = 11"));
        assert!(text.contains("—"));
        assert!(text.contains("100.00"));
    }

    #[test]
    fn training_rejects_small_or_bad_datasets() {
        let spec = NetworkSpec::regressor(0);
        let cfg = default_regressor_config(0);
        let small: Vec<_> = (0..5).map(|i| (fv(100.0 + i as f64, 80.0), 10.0)).collect();
        assert!(train_regressor(&small, spec.clone(), &cfg, Exec::Sequential).is_err());
        let mut bad: Vec<_> = (0..12).map(|i| (fv(100.0 + i as f64, 80.0), 10.0)).collect();
        bad[3].1 = 25.0;
        assert!(train_regressor(&bad, spec, &cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn constant_target_is_learned() {
        let data: Vec<_> = (0..40).map(|i| (fv(60.0 + 4.0 * i as f64, 80.0), 11.0)).collect();
        let cfg = TrainingConfig { epochs: 50, ..default_regressor_config(1) };
        let out = train_regressor(&data, NetworkSpec::regressor(1), &cfg, Exec::Sequential).unwrap();
        for r in [50.0, 120.0, 240.0] {
            let hb = predict_hb(&out.regressor, &fv(r, 80.0)).unwrap().hb;
            assert!((hb - 11.0).abs() <= 0.05, "{hb}");
        }
        assert_eq!(out.train_indices.len(), 32);
        assert_eq!(out.validation_indices.len(), 8);
        assert!(out.best_loss_curve.windows(2).all(|w| w[1] <= w[0]));
    }

    /// Independent confusion counter.
    fn brute_counts(pairs: &[(f64, f64)], cutoff: f64) -> [usize; 4] {
        let mut c = [0; 4];
        for &(p, g) in pairs {
            let pos_pred = p < cutoff;
            let pos_gold = g < cutoff;
            let slot = if pos_pred && pos_gold {
                0
            } else if pos_pred {
                1
            } else if !pos_gold {
                2
            } else {
                3
            };
            c[slot] += 1;
        }
        c
    }

    proptest! {
        #[test]
        fn evaluate_matches_brute_force(
            pairs in proptest::collection::vec((5.0f64..15.0, 5.0f64..15.0), 1..60),
            cutoff in 8.0f64..12.0,
        ) {
            let m = evaluate(&pairs, cutoff).unwrap();
            prop_assert_eq!([m.tp, m.fp, m.tn, m.fn_], brute_counts(&pairs, cutoff));
            prop_assert_eq!(m.total(), pairs.len());
        }

        #[test]
        fn raising_cutoff_never_loses_gold_positives(
            pairs in proptest::collection::vec((5.0f64..15.0, 5.0f64..15.0), 1..60),
            c1 in 8.0f64..12.0, dc in 0.0f64..3.0,
        ) {
            let lo = evaluate(&pairs, c1).unwrap();
            let hi = evaluate(&pairs, c1 + dc).unwrap();
            prop_assert!(hi.tp + hi.fn_ >= lo.tp + lo.fn_);
            prop_assert!(hi.tp + hi.fp >= lo.tp + lo.fp);
        }

        #[test]
        fn classify_is_monotone(h1 in 3.0f64..20.0, h2 in 3.0f64..20.0, c in 5.0f64..15.0) {
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            if is_anemic(hi, c) {
                prop_assert!(is_anemic(lo, c));
            }
        }
    }
}
