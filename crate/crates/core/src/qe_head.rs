//! Fine-tuning heads: zero-inflated Beta regression with the digamma-based
//! gradient shortcut, the baseline regression heads, the hierarchical loss,
//! and expected-prediction inference.
//!
//! The Beta branch reports the true negative log-likelihood but delivers
//! its μ-gradient through the surrogate φ·g_μ·stop_gradient(y* − μ*) with
//! y* = logit(y) and μ* = ψ(φ g_μ) − ψ(φ(1−g_μ)), which has the same
//! gradient as the log-density while avoiding differentiation through Γ.

use ndarray::Array2;

use crate::data::QESample;
use crate::dist::{beta_log_pdf, BetaMeanPrecision};
use crate::errors::{Result, ZiqeError};
use crate::nn::{bilstm_fuse, bilstm_init, dense, NodeId, ParamStore, Tape};
use crate::special::digamma_checked;
use crate::speech_bert::SpeechBert;

/// Output of the zero-inflated head for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroInflatedPrediction {
    pub lambda_zero: f64,
    pub mu: f64,
    pub expected_wer: f64,
}

impl ZeroInflatedPrediction {
    pub fn new(lambda_zero: f64, mu: f64) -> Result<Self> {
        if !(0.0 < lambda_zero && lambda_zero < 1.0) || !(0.0 < mu && mu < 1.0) {
            return Err(ZiqeError::domain(format!(
                "lambda and mu must lie in (0,1), got {lambda_zero}, {mu}"
            )));
        }
        Ok(ZeroInflatedPrediction {
            lambda_zero,
            mu,
            expected_wer: (1.0 - lambda_zero) * mu,
        })
    }
}

/// The regression head variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    ZiBeta,
    Linear,
    ZiLinear,
    Logistic,
    ZiLogistic,
    InflatedCategorical(usize),
}

impl HeadKind {
    pub fn is_zero_inflated(&self) -> bool {
        matches!(
            self,
            HeadKind::ZiBeta
                | HeadKind::ZiLinear
                | HeadKind::ZiLogistic
                | HeadKind::InflatedCategorical(_)
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zi_beta" => Ok(HeadKind::ZiBeta),
            "linear" => Ok(HeadKind::Linear),
            "zi_linear" => Ok(HeadKind::ZiLinear),
            "logistic" => Ok(HeadKind::Logistic),
            "zi_logistic" => Ok(HeadKind::ZiLogistic),
            other => match other.strip_prefix("inflated_categorical_") {
                Some(k) => {
                    let k: usize = k
                        .parse()
                        .map_err(|_| ZiqeError::Config(format!("bad head kind {other}")))?;
                    if k == 0 {
                        return Err(ZiqeError::Config("categorical K must be >= 1".into()));
                    }
                    Ok(HeadKind::InflatedCategorical(k))
                }
                None => Err(ZiqeError::Config(format!("unknown head kind {other}"))),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            HeadKind::ZiBeta => "zi_beta".into(),
            HeadKind::Linear => "linear".into(),
            HeadKind::ZiLinear => "zi_linear".into(),
            HeadKind::Logistic => "logistic".into(),
            HeadKind::ZiLogistic => "zi_logistic".into(),
            HeadKind::InflatedCategorical(k) => format!("inflated_categorical_{k}"),
        }
    }
}

/// Loss value plus gradients with respect to the head outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_mu: f64,
    pub d_lambda: f64,
}

/// Ceiling for labels entering the Beta branch. WER can reach or exceed 1,
/// which lies outside the Beta support; clamping to 1 − ε with a tiny ε
/// would put the label logit near 14 and let a handful of saturated samples
/// dominate every batch gradient, so the ceiling is kept moderate.
pub const LABEL_CEIL: f64 = 0.99;

fn clamp_label(y: f64) -> Result<f64> {
    if !y.is_finite() || y < 0.0 {
        return Err(ZiqeError::domain(format!("WER label must be >= 0, got {y}")));
    }
    Ok(y.min(LABEL_CEIL))
}

/// Surrogate gradient of the Beta log-density with respect to g_μ:
/// φ·(y* − μ*), equal to ∂ log p(y) / ∂μ.
pub fn beta_surrogate_grad(y: f64, g_mu: f64, phi: f64) -> Result<f64> {
    if !(0.0 < g_mu && g_mu < 1.0) {
        return Err(ZiqeError::domain(format!(
            "g_mu must lie strictly inside (0,1), got {g_mu}"
        )));
    }
    let y_star = y.ln() - (1.0 - y).ln();
    let mu_star = digamma_checked(phi * g_mu)? - digamma_checked(phi * (1.0 - g_mu))?;
    Ok(phi * (y_star - mu_star))
}

/// Hierarchical zero-inflated Beta loss.
///
/// Reports the true NLL (Bernoulli term always, Beta term only for y > 0)
/// and the surrogate-delivered gradients for the λ and g_μ graph outputs.
pub fn zi_beta_loss_and_grad(g_mu: f64, lambda: f64, y: f64, phi: f64) -> Result<LossGrad> {
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(ZiqeError::domain(format!("lambda must lie in (0,1), got {lambda}")));
    }
    if !(0.0 < g_mu && g_mu < 1.0) {
        return Err(ZiqeError::domain(format!(
            "g_mu saturated at {g_mu}; pre-sigmoid value too large"
        )));
    }
    if !phi.is_finite() || phi <= 0.0 {
        return Err(ZiqeError::domain(format!("phi must be positive, got {phi}")));
    }
    let y = clamp_label(y)?;
    if y == 0.0 {
        Ok(LossGrad {
            loss: -lambda.ln(),
            d_mu: 0.0,
            d_lambda: -1.0 / lambda,
        })
    } else {
        let beta = BetaMeanPrecision::new(g_mu, phi)?;
        let log_p = beta_log_pdf(y, &beta)?;
        Ok(LossGrad {
            loss: -((1.0 - lambda).ln() + log_p),
            d_mu: -beta_surrogate_grad(y, g_mu, phi)?,
            d_lambda: 1.0 / (1.0 - lambda),
        })
    }
}

/// Losses for the baseline heads of the ablation.
///
/// `Linear` is squared error on μ, `Logistic` is cross-entropy on μ; the
/// `Zi` variants add the Bernoulli gate and apply the continuous loss only
/// to y > 0.
pub fn baseline_loss(kind: HeadKind, mu: f64, lambda: f64, y: f64) -> Result<LossGrad> {
    if !(0.0 < mu && mu < 1.0) {
        return Err(ZiqeError::domain(format!("mu must lie in (0,1), got {mu}")));
    }
    let y_raw = clamp_label(y)?;
    let continuous = |y: f64| -> (f64, f64) {
        match kind {
            HeadKind::Linear | HeadKind::ZiLinear => ((mu - y) * (mu - y), 2.0 * (mu - y)),
            HeadKind::Logistic | HeadKind::ZiLogistic => (
                -(y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()),
                -y / mu + (1.0 - y) / (1.0 - mu),
            ),
            _ => unreachable!(),
        }
    };
    match kind {
        HeadKind::Linear | HeadKind::Logistic => {
            let (loss, d_mu) = continuous(y_raw);
            Ok(LossGrad {
                loss,
                d_mu,
                d_lambda: 0.0,
            })
        }
        HeadKind::ZiLinear | HeadKind::ZiLogistic => {
            if !(0.0 < lambda && lambda < 1.0) {
                return Err(ZiqeError::domain(format!(
                    "lambda must lie in (0,1), got {lambda}"
                )));
            }
            if y_raw == 0.0 {
                Ok(LossGrad {
                    loss: -lambda.ln(),
                    d_mu: 0.0,
                    d_lambda: -1.0 / lambda,
                })
            } else {
                let (loss, d_mu) = continuous(y_raw);
                Ok(LossGrad {
                    loss: loss - (1.0 - lambda).ln(),
                    d_mu,
                    d_lambda: 1.0 / (1.0 - lambda),
                })
            }
        }
        _ => Err(ZiqeError::Config(format!(
            "baseline_loss does not handle {:?}",
            kind
        ))),
    }
}

/// Result of the K+1-way inflated categorical loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalLossGrad {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_mu: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Generalization of the zero-inflated gate to K discrete masses.
///
/// `logits` has K+1 entries: index 0 is the continuous class with
/// probability 1−λ; index i ≥ 1 is the absorbed mass λ·p_{y_i}. A discrete
/// label must match an element of `masses`; a continuous label in (0,1)
/// pays the continuous-class NLL plus the Beta log-density under (g_mu, phi).
pub fn inflated_categorical_loss(
    logits: &[f64],
    masses: &[f64],
    g_mu: f64,
    phi: f64,
    y: f64,
) -> Result<CategoricalLossGrad> {
    if masses.is_empty() || logits.len() != masses.len() + 1 {
        return Err(ZiqeError::shape(format!(
            "need K+1 logits for K={} masses, got {}",
            masses.len(),
            logits.len()
        )));
    }
    let probs = softmax(logits);
    let nll_of_class = |class: usize| -> CategoricalLossGrad {
        let mut d: Vec<f64> = probs.clone();
        d[class] -= 1.0;
        CategoricalLossGrad {
            loss: -probs[class].max(1e-300).ln(),
            d_logits: d,
            d_mu: 0.0,
        }
    };
    if let Some(i) = masses.iter().position(|&m| (m - y).abs() < 1e-9) {
        return Ok(nll_of_class(i + 1));
    }
    if y > 0.0 && y < 1.0 {
        let mut out = nll_of_class(0);
        let y = clamp_label(y)?;
        let beta = BetaMeanPrecision::new(g_mu, phi)?;
        out.loss -= beta_log_pdf(y, &beta)?;
        out.d_mu = -beta_surrogate_grad(y, g_mu, phi)?;
        return Ok(out);
    }
    Err(ZiqeError::domain(format!(
        "label {y} matches neither a discrete mass nor the continuous branch"
    )))
}

/// Head parameters attached to a backbone store.
///
/// `hidden` is the per-direction Bi-LSTM size; the head reads the fused
/// (1×2·hidden) state. φ and the head kind are stored as metadata records.
pub fn init_head_params(
    store: &mut ParamStore,
    d_model: usize,
    hidden: usize,
    kind: HeadKind,
    phi: f64,
    rng: &mut crate::rng::SplitMix64,
) {
    bilstm_init(store, "qe_head/fuse", d_model, hidden, rng);
    store.insert_init("qe_head/lambda.w", 2 * hidden, 1, rng);
    store.insert_zeros("qe_head/lambda.b", 1, 1);
    store.insert_init("qe_head/mu.w", 2 * hidden, 1, rng);
    store.insert_zeros("qe_head/mu.b", 1, 1);
    if let HeadKind::InflatedCategorical(k) = kind {
        store.insert_init("qe_head/cat.w", 2 * hidden, k + 1, rng);
        store.insert_zeros("qe_head/cat.b", 1, k + 1);
    }
    store.insert("qe_head/phi", Array2::from_elem((1, 1), phi));
    let code = match kind {
        HeadKind::ZiBeta => 0.0,
        HeadKind::Linear => 1.0,
        HeadKind::ZiLinear => 2.0,
        HeadKind::Logistic => 3.0,
        HeadKind::ZiLogistic => 4.0,
        HeadKind::InflatedCategorical(k) => 100.0 + k as f64,
    };
    store.insert("qe_head/kind", Array2::from_elem((1, 1), code));
}

pub fn head_kind_from_store(store: &ParamStore) -> Result<HeadKind> {
    if !store.contains("qe_head/kind") {
        return Err(ZiqeError::Format("checkpoint has no qe_head".into()));
    }
    let code = store.get("qe_head/kind")[[0, 0]];
    Ok(match code as i64 {
        0 => HeadKind::ZiBeta,
        1 => HeadKind::Linear,
        2 => HeadKind::ZiLinear,
        3 => HeadKind::Logistic,
        4 => HeadKind::ZiLogistic,
        k if k >= 100 => HeadKind::InflatedCategorical((k - 100) as usize),
        other => return Err(ZiqeError::Format(format!("bad head kind code {other}"))),
    })
}

pub fn phi_from_store(store: &ParamStore) -> Result<f64> {
    if !store.contains("qe_head/phi") {
        return Err(ZiqeError::Format("checkpoint has no qe_head/phi".into()));
    }
    Ok(store.get("qe_head/phi")[[0, 0]])
}

fn fuse_hidden(store: &ParamStore) -> usize {
    store.get("qe_head/fuse.fwd.w_hh").nrows()
}

/// Two affine+sigmoid projections of a fused feature vector.
pub fn head_predict(h: &Array2<f64>, store: &ParamStore) -> Result<ZeroInflatedPrediction> {
    let wl = store.get("qe_head/lambda.w");
    if h.ncols() != wl.nrows() || h.nrows() != 1 {
        return Err(ZiqeError::shape(format!(
            "fused vector is {}×{}, head expects 1×{}",
            h.nrows(),
            h.ncols(),
            wl.nrows()
        )));
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let lambda = sig(h.dot(wl)[[0, 0]] + store.get("qe_head/lambda.b")[[0, 0]]);
    let mu = sig(h.dot(store.get("qe_head/mu.w"))[[0, 0]] + store.get("qe_head/mu.b")[[0, 0]]);
    ZeroInflatedPrediction::new(lambda, mu)
}

/// Builds the end-to-end loss graph for one sample: backbone features →
/// Bi-LSTM fusion → head → hierarchical loss. Returns the loss node and the
/// (λ, μ) forward values.
pub fn build_sample_loss(
    model: &SpeechBert,
    store: &ParamStore,
    tape: &mut Tape,
    sample: &QESample,
    kind: HeadKind,
) -> Result<(NodeId, f64, f64)> {
    let states = tape_fused_state(model, store, tape, sample)?;
    let phi = phi_from_store(store)?;
    let zl = dense(tape, store, states, "qe_head/lambda")?;
    let lambda_node = tape.sigmoid(zl);
    let zm = dense(tape, store, states, "qe_head/mu")?;
    let mu_node = tape.sigmoid(zm);
    let lambda = tape.value(lambda_node)[[0, 0]];
    let mu = tape.value(mu_node)[[0, 0]];
    let y = sample.wer_label;

    let loss_node = match kind {
        HeadKind::ZiBeta => {
            let lg = zi_beta_loss_and_grad(mu, lambda, y, phi)?;
            tape.scalar_loss(
                lg.loss,
                vec![lambda_node, mu_node],
                vec![
                    Array2::from_elem((1, 1), lg.d_lambda),
                    Array2::from_elem((1, 1), lg.d_mu),
                ],
            )
        }
        HeadKind::Linear | HeadKind::ZiLinear | HeadKind::Logistic | HeadKind::ZiLogistic => {
            let lg = baseline_loss(kind, mu, lambda, y)?;
            tape.scalar_loss(
                lg.loss,
                vec![lambda_node, mu_node],
                vec![
                    Array2::from_elem((1, 1), lg.d_lambda),
                    Array2::from_elem((1, 1), lg.d_mu),
                ],
            )
        }
        HeadKind::InflatedCategorical(k) => {
            let logits_node = dense(tape, store, states, "qe_head/cat")?;
            let logits: Vec<f64> = tape.value(logits_node).iter().cloned().collect();
            // Mass 0 carries the WER spike; extra masses are evenly spaced.
            let masses: Vec<f64> = (0..k).map(|i| i as f64 / k as f64).collect();
            let cg = inflated_categorical_loss(&logits, &masses, mu, phi, y)?;
            let d_logits = Array2::from_shape_vec((1, k + 1), cg.d_logits)
                .expect("gradient shape");
            tape.scalar_loss(
                cg.loss,
                vec![logits_node, mu_node],
                vec![d_logits, Array2::from_elem((1, 1), cg.d_mu)],
            )
        }
    };
    Ok((loss_node, lambda, mu))
}

/// Backbone features through the Bi-LSTM fuser for one sample.
pub fn tape_fused_state(
    model: &SpeechBert,
    store: &ParamStore,
    tape: &mut Tape,
    sample: &QESample,
) -> Result<NodeId> {
    let states = model.extract_feature_nodes(
        tape,
        store,
        &sample.utterance.features,
        &sample.hypothesis,
    )?;
    bilstm_fuse(tape, store, states, fuse_hidden(store), "qe_head/fuse")
}

/// Inference for one sample: fused state → head.
pub fn predict_sample(
    model: &SpeechBert,
    store: &ParamStore,
    sample: &QESample,
) -> Result<ZeroInflatedPrediction> {
    let mut tape = Tape::new();
    let fused = tape_fused_state(model, store, &mut tape, sample)?;
    head_predict(tape.value(fused), store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;

    #[test]
    fn prediction_invariant_and_limits() {
        let p = ZeroInflatedPrediction::new(0.5, 0.5).unwrap();
        assert_abs_diff_eq!(p.expected_wer, 0.25, epsilon = 1e-15);
        // Saturated gate pushes the expectation to zero.
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let p = ZeroInflatedPrediction::new(sig(30.0), 0.5).unwrap();
        assert!(p.expected_wer < 1e-12);
        assert!(ZeroInflatedPrediction::new(0.0, 0.5).is_err());
    }

    #[test]
    fn head_predict_zero_weights() {
        let mut rng = crate::rng::SplitMix64::new(1);
        let mut store = ParamStore::new();
        init_head_params(&mut store, 4, 3, HeadKind::ZiBeta, 5.0, &mut rng);
        *store.get_mut("qe_head/lambda.w") = Array2::zeros((6, 1));
        *store.get_mut("qe_head/mu.w") = Array2::zeros((6, 1));
        let h = Array2::ones((1, 6));
        let p = head_predict(&h, &store).unwrap();
        assert_abs_diff_eq!(p.lambda_zero, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.mu, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.expected_wer, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn head_predict_hand_computed() {
        let mut rng = crate::rng::SplitMix64::new(2);
        let mut store = ParamStore::new();
        init_head_params(&mut store, 4, 1, HeadKind::ZiBeta, 5.0, &mut rng);
        *store.get_mut("qe_head/lambda.w") = array![[0.5], [-1.0]];
        *store.get_mut("qe_head/lambda.b") = array![[0.2]];
        *store.get_mut("qe_head/mu.w") = array![[2.0], [0.0]];
        *store.get_mut("qe_head/mu.b") = array![[-0.3]];
        let h = array![[1.0, 0.5]];
        let p = head_predict(&h, &store).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        assert_abs_diff_eq!(p.lambda_zero, sig(0.5 - 0.5 + 0.2), epsilon = 1e-14);
        assert_abs_diff_eq!(p.mu, sig(2.0 - 0.3), epsilon = 1e-14);
    }

    #[test]
    fn surrogate_zero_at_midpoint() {
        for phi in [0.5, 2.0, 10.0] {
            let lg = zi_beta_loss_and_grad(0.5, 0.4, 0.5, phi).unwrap();
            // y* = 0 and μ* = ψ(φ/2) − ψ(φ/2) = 0.
            assert_abs_diff_eq!(lg.d_mu, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_label_routes_through_gate_only() {
        let lg = zi_beta_loss_and_grad(0.3, 0.25, 0.0, 5.0).unwrap();
        assert_abs_diff_eq!(lg.loss, -(0.25f64.ln()), epsilon = 1e-14);
        assert_eq!(lg.d_mu, 0.0);
        assert_abs_diff_eq!(lg.d_lambda, -4.0, epsilon = 1e-12);
        // Chained through a sigmoid: d(-ln λ)/d logit = λ − 1.
        let mut tape = Tape::new();
        let logit = tape.constant(array![[(0.25f64 / 0.75).ln()]]);
        let lambda = tape.sigmoid(logit);
        let mu = tape.constant(array![[0.3]]);
        let loss = tape.scalar_loss(
            lg.loss,
            vec![lambda, mu],
            vec![array![[lg.d_lambda]], array![[lg.d_mu]]],
        );
        // Backprop to the constant via a parameter stand-in instead.
        let mut store = ParamStore::new();
        store.insert("logit", array![[(0.25f64 / 0.75).ln()]]);
        let mut tape = Tape::new();
        let logit = tape.param(&store, "logit");
        let lambda = tape.sigmoid(logit);
        let lv = tape.value(lambda)[[0, 0]];
        let lg2 = zi_beta_loss_and_grad(0.3, lv, 0.0, 5.0).unwrap();
        let loss2 = tape.scalar_loss(lg2.loss, vec![lambda], vec![array![[lg2.d_lambda]]]);
        let grads = tape.backward(loss2);
        assert_abs_diff_eq!(grads["logit"][[0, 0]], lv - 1.0, epsilon = 1e-12);
        let _ = loss;
    }

    #[test]
    fn surrogate_matches_finite_difference_grid() {
        let h = 1e-6;
        for &mu in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            for &phi in &[0.5, 2.0, 10.0, 50.0] {
                for &y in &[0.05, 0.35, 0.65, 0.95] {
                    let analytic = beta_surrogate_grad(y, mu, phi).unwrap();
                    let at = |m: f64| {
                        beta_log_pdf(y, &BetaMeanPrecision::new(m, phi).unwrap()).unwrap()
                    };
                    let fd = (at(mu + h) - at(mu - h)) / (2.0 * h);
                    assert_relative_eq!(analytic, fd, max_relative = 1e-4);
                }
            }
        }
    }

    #[test]
    fn baseline_examples() {
        let lg = baseline_loss(HeadKind::Linear, 0.4, 0.5, 0.4).unwrap();
        assert_abs_diff_eq!(lg.loss, 0.0, epsilon = 1e-15);
        let lg = baseline_loss(HeadKind::Logistic, 0.5, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(lg.loss, (2.0f64).ln(), epsilon = 1e-12);
        let lg = baseline_loss(HeadKind::ZiLinear, 0.4, 0.7, 0.0).unwrap();
        assert_abs_diff_eq!(lg.loss, -(0.7f64.ln()), epsilon = 1e-12);
        assert_eq!(lg.d_mu, 0.0);
    }

    #[test]
    fn categorical_reduces_to_zi_beta_for_k1() {
        // Two logits (0, logit λ) reproduce the sigmoid gate exactly.
        let lambda: f64 = 0.35;
        let logit = (lambda / (1.0 - lambda)).ln();
        let (mu, phi) = (0.4, 6.0);
        for y in [0.0, 0.3, 0.8] {
            let cat = inflated_categorical_loss(&[0.0, logit], &[0.0], mu, phi, y).unwrap();
            let zib = zi_beta_loss_and_grad(mu, lambda, y, phi).unwrap();
            assert_abs_diff_eq!(cat.loss, zib.loss, epsilon = 1e-6);
            assert_abs_diff_eq!(cat.d_mu, zib.d_mu, epsilon = 1e-9);
        }
    }

    #[test]
    fn categorical_uniform_and_fixed_logits() {
        let cg = inflated_categorical_loss(&[0.0, 0.0, 0.0], &[0.0, 0.25], 0.5, 2.0, 0.25).unwrap();
        assert_abs_diff_eq!(cg.loss, (3.0f64).ln(), epsilon = 1e-12);
        // Softmax oracle for logits [1,0,0].
        let p0 = 1f64.exp() / (1f64.exp() + 2.0);
        let cg = inflated_categorical_loss(&[1.0, 0.0, 0.0], &[0.0, 0.25], 0.5, 2.0, 0.6).unwrap();
        assert_abs_diff_eq!(cg.d_logits[0], p0 - 1.0, epsilon = 1e-12);
        assert!(
            inflated_categorical_loss(&[0.0, 0.0], &[0.0], 0.5, 2.0, 1.7).is_err()
        );
    }

    #[test]
    fn expected_prediction_monotonicity() {
        let mut rng = crate::rng::SplitMix64::new(8);
        for _ in 0..200 {
            let l = 0.05 + 0.9 * rng.next_f64();
            let m = 0.05 + 0.9 * rng.next_f64();
            let p = ZeroInflatedPrediction::new(l, m).unwrap();
            let up_l = ZeroInflatedPrediction::new((l + 0.02).min(0.999), m).unwrap();
            let up_m = ZeroInflatedPrediction::new(l, (m + 0.02).min(0.999)).unwrap();
            assert!(up_l.expected_wer < p.expected_wer);
            assert!(up_m.expected_wer > p.expected_wer);
        }
    }
}
