//! Central finite-difference validation of analytic gradients.

use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};

/// Compares analytic parameter gradients of a scalar loss against central
/// finite differences and returns the worst relative error over every
/// coordinate of every parameter.
///
/// `build` must construct the loss graph from the given store and return
/// the (1×1) loss node; it is re-invoked for each perturbed evaluation.
pub fn finite_difference_check<F>(store: &ParamStore, build: F, epsilon: f64) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> NodeId,
{
    finite_difference_check_filtered(store, build, epsilon, |_| true)
}

/// As [`finite_difference_check`], but only perturbs parameters accepted by
/// `filter` (fixed hyperparameters stored alongside weights carry no
/// gradient by design and must be skipped).
pub fn finite_difference_check_filtered<F, P>(
    store: &ParamStore,
    build: F,
    epsilon: f64,
    filter: P,
) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> NodeId,
    P: Fn(&str) -> bool,
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon out of the supported range"
    );
    let mut tape = Tape::new();
    let loss = build(store, &mut tape);
    let analytic = tape.backward(loss);

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = build(s, &mut t);
        t.scalar(l)
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store
        .names()
        .filter(|n| filter(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let shape = store.get(&name).raw_dim();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                let mut plus = store.clone();
                plus.get_mut(&name)[[i, j]] += epsilon;
                let mut minus = store.clone();
                minus.get_mut(&name)[[i, j]] -= epsilon;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * epsilon);
                let an = analytic.get(&name).map_or(0.0, |g| g[[i, j]]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// One row of the standard gradient-check suite.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

fn sum_all(tape: &mut Tape, x: NodeId) -> NodeId {
    let (rows, cols) = {
        let d = tape.value(x).raw_dim();
        (d[0], d[1])
    };
    let ones_c = tape.constant(ndarray::Array2::ones((cols, 1)));
    let col = tape.matmul(x, ones_c);
    let row = tape.transpose(col);
    let ones_r = tape.constant(ndarray::Array2::ones((rows, 1)));
    tape.matmul(row, ones_r)
}

/// Runs finite-difference checks over every differentiable layer and the
/// quality-estimation losses; the full-model rows exercise the surrogate
/// Beta gradient end to end. Threshold 1e-5 relative, double precision.
pub fn standard_suite() -> Vec<SuiteRow> {
    use crate::data::{FeatureMatrix, QESample, Utterance};
    use crate::nn::layers::{
        attention_init, bilstm_fuse, bilstm_init, dense, dense_init, layer_norm, layer_norm_init,
        multi_head_attention, MaskMode,
    };
    use crate::qe_head::{build_sample_loss, init_head_params, HeadKind};
    use crate::rng::SplitMix64;
    use crate::speech_bert::{apply_masking, MaskingConfig, ModelConfig, SpecialTokens, SpeechBert};
    use ndarray::Array2;

    const THRESHOLD: f64 = 1e-5;
    let mut rng = SplitMix64::new(0xFD);
    let mut rows = Vec::new();
    let push = |name: &str, err: f64, rows: &mut Vec<SuiteRow>| {
        rows.push(SuiteRow {
            name: name.to_string(),
            max_rel_error: err,
            threshold: THRESHOLD,
        });
    };

    {
        let mut store = ParamStore::new();
        dense_init(&mut store, "fc", 5, 4, &mut rng);
        let input = Array2::from_shape_fn((3, 5), |_| rng.normal());
        let err = finite_difference_check(
            &store,
            |s, tape| {
                let x = tape.constant(input.clone());
                let y = dense(tape, s, x, "fc").unwrap();
                let y = tape.sigmoid(y);
                sum_all(tape, y)
            },
            1e-5,
        );
        push("dense+sigmoid", err, &mut rows);
    }
    {
        let mut store = ParamStore::new();
        layer_norm_init(&mut store, "ln", 6);
        let input = Array2::from_shape_fn((4, 6), |_| rng.normal());
        let err = finite_difference_check(
            &store,
            |s, tape| {
                let x = tape.constant(input.clone());
                let y = layer_norm(tape, s, x, "ln").unwrap();
                let y = tape.tanh(y);
                sum_all(tape, y)
            },
            1e-5,
        );
        push("layer_norm+tanh", err, &mut rows);
    }
    for mode in [MaskMode::Causal, MaskMode::Full] {
        let mut store = ParamStore::new();
        attention_init(&mut store, "att", 4, &mut rng);
        let input = Array2::from_shape_fn((3, 4), |_| rng.normal());
        let err = finite_difference_check(
            &store,
            |s, tape| {
                let x = tape.constant(input.clone());
                let (y, _) = multi_head_attention(tape, s, x, x, x, mode, 2, "att").unwrap();
                let y = tape.sigmoid(y);
                sum_all(tape, y)
            },
            1e-5,
        );
        let name = match mode {
            MaskMode::Causal => "attention(causal)",
            MaskMode::Full => "attention(full)",
        };
        push(name, err, &mut rows);
    }
    {
        let mut store = ParamStore::new();
        bilstm_init(&mut store, "bi", 4, 3, &mut rng);
        let input = Array2::from_shape_fn((5, 4), |_| rng.normal());
        let err = finite_difference_check(
            &store,
            |s, tape| {
                let x = tape.constant(input.clone());
                let y = bilstm_fuse(tape, s, x, 3, "bi").unwrap();
                sum_all(tape, y)
            },
            1e-5,
        );
        push("bilstm_fuse", err, &mut rows);
    }

    // Full model: backbone + head, tiny dims so the coordinate sweep stays fast.
    let config = ModelConfig {
        vocab_size: 8,
        d_model: 4,
        heads: 2,
        encoder_layers: 1,
        memory_layers: 1,
        feedforward_dim: 8,
        max_seq_len: 32,
        feature_dim: 4,
        lambda_st: 0.15,
        specials: SpecialTokens::default(),
    };
    let model = SpeechBert::new(config).unwrap();
    let features = FeatureMatrix::raw(Array2::from_shape_fn((6, 4), |_| rng.normal()));
    let tokens: Vec<u32> = vec![4, 5, 6];
    let make_sample = |hyp: Vec<u32>, wer: f64| QESample {
        utterance: Utterance {
            id: "fd".into(),
            tokens: tokens.clone(),
            features: features.clone(),
        },
        hypothesis: hyp,
        wer_label: wer,
    };
    let head_cases = [
        ("zi_beta loss (y>0)", HeadKind::ZiBeta, make_sample(vec![4, 7, 6], 1.0 / 3.0)),
        ("zi_beta loss (y=0)", HeadKind::ZiBeta, make_sample(tokens.clone(), 0.0)),
        ("linear loss", HeadKind::Linear, make_sample(vec![4, 7, 6], 1.0 / 3.0)),
        ("zi_logistic loss", HeadKind::ZiLogistic, make_sample(vec![4, 7, 6], 1.0 / 3.0)),
        (
            "inflated_categorical loss",
            HeadKind::InflatedCategorical(3),
            make_sample(vec![4, 7, 6], 1.0 / 3.0),
        ),
    ];
    // Stored hyperparameters (config values, φ, head code) carry no gradient
    // by design and are excluded from the perturbation sweep.
    let weights = |n: &str| !n.starts_with("config/") && n != "qe_head/phi" && n != "qe_head/kind";
    for (name, kind, sample) in head_cases {
        let mut store = model.init_params(7);
        init_head_params(&mut store, 4, 2, kind, 5.0, &mut rng);
        let err = finite_difference_check_filtered(
            &store,
            |s, tape| {
                let (loss, _, _) = build_sample_loss(&model, s, tape, &sample, kind).unwrap();
                loss
            },
            1e-5,
            weights,
        );
        push(name, err, &mut rows);
    }
    {
        let store = model.init_params(7);
        let outcome =
            apply_masking(&tokens, &model.config, &MaskingConfig::default(), 3).unwrap();
        let err = finite_difference_check_filtered(
            &store,
            |s, tape| model.joint_loss(tape, s, &features, &tokens, &outcome).unwrap(),
            1e-5,
            weights,
        );
        push("joint pretraining loss", err, &mut rows);
    }
    rows
}
