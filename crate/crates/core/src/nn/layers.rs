//! Standard layers built on the tape: affine, layer norm, embeddings,
//! sinusoidal positions, multi-head attention, and a Bi-LSTM fuser.

use ndarray::Array2;

use crate::errors::{Result, ZiqeError};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};

/// Attention masking regime: `Causal` blocks future positions (the
/// autoregressive decoder), `Full` attends everywhere (the memory encoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Causal,
    Full,
}

/// Realization of the −∞ entries in the causal mask.
pub const NEG_INF_MASK: f64 = -1e9;

/// Affine layer `x W + b` with parameters `{name}.w` (d_in×d_out) and
/// `{name}.b` (1×d_out).
pub fn dense(tape: &mut Tape, store: &ParamStore, x: NodeId, name: &str) -> Result<NodeId> {
    let w_name = format!("{name}.w");
    let d_in = store.get(&w_name).nrows();
    if tape.value(x).ncols() != d_in {
        return Err(ZiqeError::shape(format!(
            "dense {name}: input has {} cols, weight expects {d_in}",
            tape.value(x).ncols()
        )));
    }
    let w = tape.param(store, &w_name);
    let b = tape.param(store, &format!("{name}.b"));
    let xw = tape.matmul(x, w);
    Ok(tape.add_bias(xw, b))
}

/// Registers the two dense parameters used by [`dense`].
pub fn dense_init(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut crate::rng::SplitMix64,
) {
    store.insert_init(&format!("{name}.w"), d_in, d_out, rng);
    store.insert_zeros(&format!("{name}.b"), 1, d_out);
}

/// Row-wise layer normalization with affine parameters `{name}.g`, `{name}.b`.
pub fn layer_norm(tape: &mut Tape, store: &ParamStore, x: NodeId, name: &str) -> Result<NodeId> {
    let g_name = format!("{name}.g");
    if tape.value(x).ncols() != store.get(&g_name).ncols() {
        return Err(ZiqeError::shape(format!(
            "layer_norm {name}: {} cols vs gain {}",
            tape.value(x).ncols(),
            store.get(&g_name).ncols()
        )));
    }
    let gain = tape.param(store, &g_name);
    let bias = tape.param(store, &format!("{name}.b"));
    Ok(tape.layer_norm(x, gain, bias))
}

pub fn layer_norm_init(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(&format!("{name}.g"), Array2::ones((1, d)));
    store.insert_zeros(&format!("{name}.b"), 1, d);
}

/// Token embedding lookup from the table parameter `name` (vocab×d).
pub fn embedding_lookup(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &[usize],
    name: &str,
) -> Result<NodeId> {
    let table = store.get(name);
    if let Some(&bad) = ids.iter().find(|&&i| i >= table.nrows()) {
        return Err(ZiqeError::shape(format!(
            "embedding {name}: id {bad} out of range {}",
            table.nrows()
        )));
    }
    let t = tape.param(store, name);
    Ok(tape.embed(t, ids))
}

/// Sinusoidal positional encoding (len×d), interleaved sin/cos pairs.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            out[[pos, 2 * i]] = angle.sin();
            out[[pos, 2 * i + 1]] = angle.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            out[[pos, d - 1]] = (pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64)).sin();
        }
    }
    out
}

/// Scaled dot-product attention over `heads` heads with projection
/// parameters `{name}.{q,k,v,o}` (each a dense pair). In `Causal` mode a
/// strictly-upper-triangular −∞ mask is added before the softmax.
///
/// Returns the output node and the per-head attention-probability nodes.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    mode: MaskMode,
    heads: usize,
    name: &str,
) -> Result<(NodeId, Vec<NodeId>)> {
    let d = tape.value(q_in).ncols();
    if heads == 0 || d % heads != 0 {
        return Err(ZiqeError::shape(format!(
            "attention {name}: model dim {d} not divisible by {heads} heads"
        )));
    }
    if tape.value(k_in).ncols() != d || tape.value(v_in).ncols() != d {
        return Err(ZiqeError::shape(format!("attention {name}: q/k/v dims differ")));
    }
    let (n_q, n_k) = (tape.value(q_in).nrows(), tape.value(k_in).nrows());
    if tape.value(v_in).nrows() != n_k {
        return Err(ZiqeError::shape(format!("attention {name}: k/v lengths differ")));
    }
    if mode == MaskMode::Causal && n_q != n_k {
        return Err(ZiqeError::shape(format!(
            "attention {name}: causal mode requires matching q/k lengths"
        )));
    }

    let q = dense(tape, store, q_in, &format!("{name}.q"))?;
    let k = dense(tape, store, k_in, &format!("{name}.k"))?;
    let v = dense(tape, store, v_in, &format!("{name}.v"))?;
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mask = match mode {
        MaskMode::Full => None,
        MaskMode::Causal => {
            let mut m = Array2::zeros((n_q, n_k));
            for i in 0..n_q {
                for j in (i + 1)..n_k {
                    m[[i, j]] = NEG_INF_MASK;
                }
            }
            Some(m)
        }
    };

    let mut head_outs = Vec::with_capacity(heads);
    let mut probs_ids = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scaled = tape.scale(scores, scale);
        if let Some(m) = &mask {
            scaled = tape.add_const(scaled, m);
        }
        let probs = tape.softmax_rows(scaled);
        probs_ids.push(probs);
        head_outs.push(tape.matmul(probs, vh));
    }
    let mut merged = head_outs[0];
    for &h in &head_outs[1..] {
        merged = tape.concat_cols(merged, h);
    }
    let out = dense(tape, store, merged, &format!("{name}.o"))?;
    Ok((out, probs_ids))
}

pub fn attention_init(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    rng: &mut crate::rng::SplitMix64,
) {
    for proj in ["q", "k", "v", "o"] {
        dense_init(store, &format!("{name}.{proj}"), d, d, rng);
    }
}

fn lstm_cell(
    tape: &mut Tape,
    store: &ParamStore,
    x_t: NodeId,
    h: NodeId,
    c: NodeId,
    hidden: usize,
    name: &str,
) -> Result<(NodeId, NodeId)> {
    let w_ih = tape.param(store, &format!("{name}.w_ih"));
    let w_hh = tape.param(store, &format!("{name}.w_hh"));
    let b = tape.param(store, &format!("{name}.b"));
    let xg = tape.matmul(x_t, w_ih);
    let hg = tape.matmul(h, w_hh);
    let pre = tape.add(xg, hg);
    let gates = tape.add_bias(pre, b);
    let i_g = tape.slice_cols(gates, 0, hidden);
    let f_g = tape.slice_cols(gates, hidden, 2 * hidden);
    let g_g = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
    let o_g = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i = tape.sigmoid(i_g);
    let f = tape.sigmoid(f_g);
    let g = tape.tanh(g_g);
    let o = tape.sigmoid(o_g);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_new = tape.add(fc, ig);
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc);
    Ok((h_new, c_new))
}

fn lstm_last_state(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    hidden: usize,
    name: &str,
    reverse: bool,
) -> Result<NodeId> {
    let seq = tape.value(x).nrows();
    let mut h = tape.constant(Array2::zeros((1, hidden)));
    let mut c = tape.constant(Array2::zeros((1, hidden)));
    let order: Vec<usize> = if reverse {
        (0..seq).rev().collect()
    } else {
        (0..seq).collect()
    };
    for t in order {
        let x_t = tape.slice_rows(x, t, t + 1);
        let (h2, c2) = lstm_cell(tape, store, x_t, h, c, hidden, name)?;
        h = h2;
        c = c2;
    }
    Ok(h)
}

/// Bi-LSTM fusion of a feature sequence (seq×d) into a single (1×2·hidden)
/// state: forward final state concatenated with backward final state.
///
/// Parameters: `{name}.fwd.{w_ih,w_hh,b}` and `{name}.bwd.{...}` with
/// `w_ih` (d×4H), `w_hh` (H×4H), `b` (1×4H); gate order i, f, g, o.
pub fn bilstm_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    hidden: usize,
    name: &str,
) -> Result<NodeId> {
    if tape.value(x).nrows() == 0 {
        return Err(ZiqeError::shape(format!("bilstm {name}: empty sequence")));
    }
    let d = tape.value(x).ncols();
    if store.get(&format!("{name}.fwd.w_ih")).nrows() != d {
        return Err(ZiqeError::shape(format!(
            "bilstm {name}: input dim {d} does not match parameters"
        )));
    }
    let fwd = lstm_last_state(tape, store, x, hidden, &format!("{name}.fwd"), false)?;
    let bwd = lstm_last_state(tape, store, x, hidden, &format!("{name}.bwd"), true)?;
    Ok(tape.concat_cols(fwd, bwd))
}

pub fn bilstm_init(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    hidden: usize,
    rng: &mut crate::rng::SplitMix64,
) {
    for dir in ["fwd", "bwd"] {
        store.insert_init(&format!("{name}.{dir}.w_ih"), d, 4 * hidden, rng);
        store.insert_init(&format!("{name}.{dir}.w_hh"), hidden, 4 * hidden, rng);
        store.insert_zeros(&format!("{name}.{dir}.b"), 1, 4 * hidden);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn dense_zero_weights_zero_output() {
        let mut store = ParamStore::new();
        store.insert_zeros("fc.w", 3, 2);
        store.insert_zeros("fc.b", 1, 2);
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, -2.0, 0.5]]);
        let y = dense(&mut tape, &store, x, "fc").unwrap();
        assert_eq!(*tape.value(y), Array2::zeros((1, 2)));
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let mut rng = SplitMix64::new(0);
        let mut store = ParamStore::new();
        dense_init(&mut store, "fc", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((1, 4)));
        assert!(dense(&mut tape, &store, x, "fc").is_err());
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let mut store = ParamStore::new();
        layer_norm_init(&mut store, "ln", 4);
        let mut tape = Tape::new();
        let x = tape.constant(array![[3.0, 3.0, 3.0, 3.0]]);
        let y = layer_norm(&mut tape, &store, x, "ln").unwrap();
        for &v in tape.value(y).iter() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn positional_encoding_first_row() {
        let pe = positional_encoding(1, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_single_position_passes_value_projection() {
        let mut rng = SplitMix64::new(1);
        let mut store = ParamStore::new();
        attention_init(&mut store, "att", 4, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.3, -0.1, 0.7, 0.2]]);
        let (out, probs) = multi_head_attention(
            &mut tape, &store, x, x, x, MaskMode::Full, 2, "att",
        )
        .unwrap();
        // Length-1 softmax is exactly 1, so output = o-proj(v-proj(x)).
        for &p in &probs {
            assert_abs_diff_eq!(tape.value(p)[[0, 0]], 1.0, epsilon = 1e-15);
        }
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(array![[0.3, -0.1, 0.7, 0.2]]);
        let v = dense(&mut tape2, &store, x2, "att.v").unwrap();
        let o = dense(&mut tape2, &store, v, "att.o").unwrap();
        for (a, b) in tape.value(out).iter().zip(tape2.value(o).iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn causal_mode_blocks_future_bit_exact() {
        let mut rng = SplitMix64::new(2);
        let mut store = ParamStore::new();
        attention_init(&mut store, "att", 8, &mut rng);
        let base = Array2::from_shape_fn((3, 8), |_| rng.normal());
        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let (out, _) =
                multi_head_attention(&mut tape, &store, x, x, x, MaskMode::Causal, 2, "att")
                    .unwrap();
            tape.value(out).clone()
        };
        let a = run(&base);
        let mut perturbed = base.clone();
        perturbed.row_mut(2).mapv_inplace(|v| v + 10.0);
        let b = run(&perturbed);
        for t in 0..2 {
            for j in 0..8 {
                assert_eq!(a[[t, j]].to_bits(), b[[t, j]].to_bits());
            }
        }
    }

    #[test]
    fn single_head_weights_match_hand_softmax() {
        // Identity projections, d=2, two positions.
        let mut store = ParamStore::new();
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        for proj in ["q", "k", "v", "o"] {
            store.insert(&format!("att.{proj}.w"), eye.clone());
            store.insert_zeros(&format!("att.{proj}.b"), 1, 2);
        }
        let x = array![[1.0, 0.0], [0.0, 2.0]];
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let (_, probs) =
            multi_head_attention(&mut tape, &store, xn, xn, xn, MaskMode::Full, 1, "att").unwrap();
        // Row 0 logits: [x0·x0, x0·x1]/√2 = [1, 0]/√2
        let s = 1.0 / 2f64.sqrt();
        let e0 = (s).exp();
        let e1 = (0.0f64).exp();
        let expect = e0 / (e0 + e1);
        assert_abs_diff_eq!(tape.value(probs[0])[[0, 0]], expect, epsilon = 1e-12);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = SplitMix64::new(3);
        let mut store = ParamStore::new();
        attention_init(&mut store, "att", 6, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((2, 6)));
        assert!(
            multi_head_attention(&mut tape, &store, x, x, x, MaskMode::Full, 4, "att").is_err()
        );
    }

    #[test]
    fn bilstm_reversal_swaps_halves_with_tied_directions() {
        let mut rng = SplitMix64::new(4);
        let mut store = ParamStore::new();
        // Tie forward and backward parameters.
        store.insert_init("f.fwd.w_ih", 3, 8, &mut rng);
        store.insert_init("f.fwd.w_hh", 2, 8, &mut rng);
        store.insert_zeros("f.fwd.b", 1, 8);
        store.insert("f.bwd.w_ih", store.get("f.fwd.w_ih").clone());
        store.insert("f.bwd.w_hh", store.get("f.fwd.w_hh").clone());
        store.insert("f.bwd.b", store.get("f.fwd.b").clone());
        let x = Array2::from_shape_fn((4, 3), |_| rng.normal());
        let run = |input: &Array2<f64>| {
            let mut tape = Tape::new();
            let xn = tape.constant(input.clone());
            let h = bilstm_fuse(&mut tape, &store, xn, 2, "f").unwrap();
            tape.value(h).clone()
        };
        let fwd = run(&x);
        let mut rev_rows: Vec<_> = x.rows().into_iter().collect();
        rev_rows.reverse();
        let reversed = ndarray::stack(
            ndarray::Axis(0),
            &rev_rows.iter().map(|r| r.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        let bwd = run(&reversed);
        for j in 0..2 {
            assert_abs_diff_eq!(fwd[[0, j]], bwd[[0, j + 2]], epsilon = 1e-12);
            assert_abs_diff_eq!(fwd[[0, j + 2]], bwd[[0, j]], epsilon = 1e-12);
        }
    }

    #[test]
    fn bilstm_matches_unrolled_recurrence() {
        // Hand-set small weights, 3 steps, hidden=1.
        let mut store = ParamStore::new();
        let w_ih = array![[0.1, 0.2, 0.3, 0.4]];
        let w_hh = array![[0.05, -0.05, 0.1, 0.0]];
        let b = array![[0.0, 0.0, 0.0, 0.0]];
        for dir in ["fwd", "bwd"] {
            store.insert(&format!("f.{dir}.w_ih"), w_ih.clone());
            store.insert(&format!("f.{dir}.w_hh"), w_hh.clone());
            store.insert(&format!("f.{dir}.b"), b.clone());
        }
        let xs = [0.5, -1.0, 0.25];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |x: f64, h: f64, c: f64| {
            let g = [
                x * 0.1 + h * 0.05,
                x * 0.2 - h * 0.05,
                x * 0.3 + h * 0.1,
                x * 0.4,
            ];
            let c2 = sig(g[1]) * c + sig(g[0]) * g[2].tanh();
            (sig(g[3]) * c2.tanh(), c2)
        };
        let (mut h, mut c) = (0.0, 0.0);
        for &x in &xs {
            let (h2, c2) = step(x, h, c);
            h = h2;
            c = c2;
        }
        let (mut hb, mut cb) = (0.0, 0.0);
        for &x in xs.iter().rev() {
            let (h2, c2) = step(x, hb, cb);
            hb = h2;
            cb = c2;
        }
        let mut tape = Tape::new();
        let xn = tape.constant(array![[0.5], [-1.0], [0.25]]);
        let out = bilstm_fuse(&mut tape, &store, xn, 1, "f").unwrap();
        assert_abs_diff_eq!(tape.value(out)[[0, 0]], h, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(out)[[0, 1]], hb, epsilon = 1e-12);
    }

    #[test]
    fn bilstm_rejects_empty_sequence() {
        let mut rng = SplitMix64::new(6);
        let mut store = ParamStore::new();
        bilstm_init(&mut store, "f", 3, 2, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((0, 3)));
        assert!(bilstm_fuse(&mut tape, &store, x, 2, "f").is_err());
    }
}
