//! The encoder / memory-encoder conditional masked language model, its
//! masking procedure, and the joint pre-training loss.

use ndarray::Array2;

use crate::data::FeatureMatrix;
use crate::errors::{Result, ZiqeError};
use crate::nn::{
    attention_init, dense, dense_init, embedding_lookup, layer_norm, layer_norm_init,
    multi_head_attention, positional_encoding, MaskMode, NodeId, ParamStore, Tape,
};
use crate::rng::SplitMix64;

/// Reserved token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub mask_id: u32,
    pub pad_id: u32,
    pub bos_id: u32,
    pub eos_id: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            mask_id: 0,
            pad_id: 1,
            bos_id: 2,
            eos_id: 3,
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [u32; 4] {
        [self.mask_id, self.pad_id, self.bos_id, self.eos_id]
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ids = self.all();
        for (i, a) in ids.iter().enumerate() {
            if *a as usize >= vocab_size {
                return Err(ZiqeError::Config(format!("special id {a} outside vocab")));
            }
            if ids[i + 1..].contains(a) {
                return Err(ZiqeError::Config("special token ids must be distinct".into()));
            }
        }
        Ok(())
    }
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub memory_layers: usize,
    pub feedforward_dim: usize,
    pub max_seq_len: usize,
    pub feature_dim: usize,
    /// Weight of the autoregressive loss in the joint objective.
    pub lambda_st: f64,
    pub specials: SpecialTokens,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 50,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            memory_layers: 2,
            feedforward_dim: 128,
            max_seq_len: 256,
            feature_dim: 32,
            lambda_st: 0.15,
            specials: SpecialTokens::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 || self.heads == 0 {
            return Err(ZiqeError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("encoder_layers", self.encoder_layers),
            ("memory_layers", self.memory_layers),
            ("feedforward_dim", self.feedforward_dim),
            ("max_seq_len", self.max_seq_len),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(ZiqeError::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.lambda_st.is_finite() || self.lambda_st < 0.0 {
            return Err(ZiqeError::Config(format!("bad lambda_st {}", self.lambda_st)));
        }
        self.specials.validate(self.vocab_size)
    }

    /// Encodes the configuration as 1×1 tensors under `config/` so a
    /// checkpoint is self-describing.
    pub fn store_into(&self, store: &mut ParamStore) {
        let mut put = |k: &str, v: f64| store.insert(k, Array2::from_elem((1, 1), v));
        put("config/vocab_size", self.vocab_size as f64);
        put("config/d_model", self.d_model as f64);
        put("config/heads", self.heads as f64);
        put("config/encoder_layers", self.encoder_layers as f64);
        put("config/memory_layers", self.memory_layers as f64);
        put("config/feedforward_dim", self.feedforward_dim as f64);
        put("config/max_seq_len", self.max_seq_len as f64);
        put("config/feature_dim", self.feature_dim as f64);
        put("config/lambda_st", self.lambda_st);
    }

    pub fn load_from(store: &ParamStore) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            if !store.contains(k) {
                return Err(ZiqeError::Format(format!("checkpoint missing {k}")));
            }
            Ok(store.get(k)[[0, 0]])
        };
        Ok(ModelConfig {
            vocab_size: get("config/vocab_size")? as usize,
            d_model: get("config/d_model")? as usize,
            heads: get("config/heads")? as usize,
            encoder_layers: get("config/encoder_layers")? as usize,
            memory_layers: get("config/memory_layers")? as usize,
            feedforward_dim: get("config/feedforward_dim")? as usize,
            max_seq_len: get("config/max_seq_len")? as usize,
            feature_dim: get("config/feature_dim")? as usize,
            lambda_st: get("config/lambda_st")?,
            specials: SpecialTokens::default(),
        })
    }
}

/// Probabilities of the masking procedure; the defaults yield the
/// 12% / 1.5% / 1.5% corpus-level split.
#[derive(Debug, Clone, Copy)]
pub struct MaskingConfig {
    /// Per-token probability of becoming a prediction target.
    pub p_target: f64,
    /// Among targets: probability of replacement by `[mask]`.
    pub p_mask: f64,
    /// Among targets: probability of replacement by a random token.
    pub p_substitute: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            p_target: 0.15,
            p_mask: 0.8,
            p_substitute: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Masked,
    Substituted,
    Unchanged,
}

/// Result of corrupting one token sequence for masked-LM training.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingOutcome {
    pub corrupted_tokens: Vec<u32>,
    pub target_positions: Vec<usize>,
    pub target_labels: Vec<u32>,
    pub kinds: Vec<OutcomeKind>,
}

/// Selects prediction targets i.i.d. per token and corrupts them; the whole
/// draw is repeated until at least one target exists.
pub fn apply_masking(
    tokens: &[u32],
    config: &ModelConfig,
    masking: &MaskingConfig,
    seed: u64,
) -> Result<MaskingOutcome> {
    if tokens.is_empty() {
        return Err(ZiqeError::domain("cannot mask an empty sequence"));
    }
    let specials = config.specials.all();
    if let Some(&bad) = tokens.iter().find(|t| specials.contains(t)) {
        return Err(ZiqeError::domain(format!(
            "input contains special token {bad}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let n_special = specials.len();
    let content = config.vocab_size - n_special;
    loop {
        let mut corrupted = tokens.to_vec();
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        let mut kinds = Vec::new();
        for (i, &tok) in tokens.iter().enumerate() {
            if rng.next_f64() >= masking.p_target {
                continue;
            }
            positions.push(i);
            labels.push(tok);
            let u = rng.next_f64();
            if u < masking.p_mask {
                corrupted[i] = config.specials.mask_id;
                kinds.push(OutcomeKind::Masked);
            } else if u < masking.p_mask + masking.p_substitute {
                corrupted[i] = (n_special + rng.index(content)) as u32;
                kinds.push(OutcomeKind::Substituted);
            } else {
                kinds.push(OutcomeKind::Unchanged);
            }
        }
        if positions.is_empty() {
            continue;
        }
        return Ok(MaskingOutcome {
            corrupted_tokens: corrupted,
            target_positions: positions,
            target_labels: labels,
            kinds,
        });
    }
}

/// The conditional masked language model. Holds the architecture only;
/// parameters live in a [`ParamStore`] so the fine-tuning heads can share it.
#[derive(Debug, Clone)]
pub struct SpeechBert {
    pub config: ModelConfig,
}

impl SpeechBert {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(SpeechBert { config })
    }

    /// Fresh parameter store for this architecture.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        c.store_into(&mut store);
        dense_init(&mut store, "enc.proj", c.feature_dim, c.d_model, &mut rng);
        for l in 0..c.encoder_layers {
            attention_init(&mut store, &format!("enc.{l}.att"), c.d_model, &mut rng);
            layer_norm_init(&mut store, &format!("enc.{l}.ln1"), c.d_model);
            dense_init(&mut store, &format!("enc.{l}.ffn1"), c.d_model, c.feedforward_dim, &mut rng);
            dense_init(&mut store, &format!("enc.{l}.ffn2"), c.feedforward_dim, c.d_model, &mut rng);
            layer_norm_init(&mut store, &format!("enc.{l}.ln2"), c.d_model);
        }
        store.insert_init("tok_emb", c.vocab_size, c.d_model, &mut rng);
        for l in 0..c.memory_layers {
            attention_init(&mut store, &format!("mem.{l}.self"), c.d_model, &mut rng);
            layer_norm_init(&mut store, &format!("mem.{l}.ln1"), c.d_model);
            attention_init(&mut store, &format!("mem.{l}.cross"), c.d_model, &mut rng);
            layer_norm_init(&mut store, &format!("mem.{l}.ln2"), c.d_model);
            dense_init(&mut store, &format!("mem.{l}.ffn1"), c.d_model, c.feedforward_dim, &mut rng);
            dense_init(&mut store, &format!("mem.{l}.ffn2"), c.feedforward_dim, c.d_model, &mut rng);
            layer_norm_init(&mut store, &format!("mem.{l}.ln3"), c.d_model);
        }
        dense_init(&mut store, "out", c.d_model, c.vocab_size, &mut rng);
        store
    }

    fn ffn(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        let h = dense(tape, store, x, &format!("{prefix}.ffn1"))?;
        let h = tape.relu(h);
        dense(tape, store, h, &format!("{prefix}.ffn2"))
    }

    /// Self-attention encoder over projected acoustic features; returns the
    /// memory states (frames × d_model).
    pub fn speech_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureMatrix,
    ) -> Result<NodeId> {
        let c = &self.config;
        if features.frames() == 0 {
            return Err(ZiqeError::shape("empty feature matrix"));
        }
        if features.dim() != c.feature_dim {
            return Err(ZiqeError::shape(format!(
                "feature dim {} does not match config {}",
                features.dim(),
                c.feature_dim
            )));
        }
        let x = tape.constant(features.data.clone());
        let x = dense(tape, store, x, "enc.proj")?;
        let pe = positional_encoding(features.frames(), c.d_model);
        let mut x = tape.add_const(x, &pe);
        for l in 0..c.encoder_layers {
            let (att, _) = multi_head_attention(
                tape,
                store,
                x,
                x,
                x,
                MaskMode::Full,
                c.heads,
                &format!("enc.{l}.att"),
            )?;
            let sum = tape.add(x, att);
            x = layer_norm(tape, store, sum, &format!("enc.{l}.ln1"))?;
            let f = self.ffn(tape, store, x, &format!("enc.{l}"))?;
            let sum = tape.add(x, f);
            x = layer_norm(tape, store, sum, &format!("enc.{l}.ln2"))?;
        }
        Ok(x)
    }

    /// Text-side stack: token embeddings, `mode`-masked self-attention,
    /// cross-attention into the speech memory, feed-forward. Returns the
    /// final states and the per-layer per-head cross-attention nodes.
    pub fn text_states(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[u32],
        memory: NodeId,
        mode: MaskMode,
    ) -> Result<(NodeId, Vec<Vec<NodeId>>)> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(ZiqeError::shape("empty token sequence"));
        }
        if tokens.len() > c.max_seq_len {
            return Err(ZiqeError::shape(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = embedding_lookup(tape, store, &ids, "tok_emb")?;
        let pe = positional_encoding(tokens.len(), c.d_model);
        let mut x = tape.add_const(emb, &pe);
        let mut cross_all = Vec::with_capacity(c.memory_layers);
        for l in 0..c.memory_layers {
            let (att, _) = multi_head_attention(
                tape,
                store,
                x,
                x,
                x,
                mode,
                c.heads,
                &format!("mem.{l}.self"),
            )?;
            let sum = tape.add(x, att);
            x = layer_norm(tape, store, sum, &format!("mem.{l}.ln1"))?;
            let (cross, probs) = multi_head_attention(
                tape,
                store,
                x,
                memory,
                memory,
                MaskMode::Full,
                c.heads,
                &format!("mem.{l}.cross"),
            )?;
            cross_all.push(probs);
            let sum = tape.add(x, cross);
            x = layer_norm(tape, store, sum, &format!("mem.{l}.ln2"))?;
            let f = self.ffn(tape, store, x, &format!("mem.{l}"))?;
            let sum = tape.add(x, f);
            x = layer_norm(tape, store, sum, &format!("mem.{l}.ln3"))?;
        }
        Ok((x, cross_all))
    }

    fn vocab_logits(&self, tape: &mut Tape, store: &ParamStore, states: NodeId) -> Result<NodeId> {
        dense(tape, store, states, "out")
    }

    /// Mean masked-token NLL with full text-side self-attention.
    pub fn masked_lm_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureMatrix,
        outcome: &MaskingOutcome,
    ) -> Result<NodeId> {
        if outcome.target_positions.is_empty() {
            return Err(ZiqeError::domain("masking outcome has no targets"));
        }
        let memory = self.speech_encode(tape, store, features)?;
        let (states, _) =
            self.text_states(tape, store, &outcome.corrupted_tokens, memory, MaskMode::Full)?;
        let logits = self.vocab_logits(tape, store, states)?;
        let targets: Vec<(usize, usize)> = outcome
            .target_positions
            .iter()
            .zip(&outcome.target_labels)
            .map(|(&p, &l)| (p, l as usize))
            .collect();
        Ok(tape.cross_entropy(logits, &targets))
    }

    /// Mean teacher-forced autoregressive NLL with causal self-attention;
    /// reads the same parameters as the masked-LM path.
    pub fn asr_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureMatrix,
        tokens: &[u32],
    ) -> Result<NodeId> {
        let sp = &self.config.specials;
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(sp.bos_id);
        input.extend_from_slice(tokens);
        let mut target = tokens.to_vec();
        target.push(sp.eos_id);
        let memory = self.speech_encode(tape, store, features)?;
        let (states, _) = self.text_states(tape, store, &input, memory, MaskMode::Causal)?;
        let logits = self.vocab_logits(tape, store, states)?;
        let targets: Vec<(usize, usize)> = target
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t as usize))
            .collect();
        Ok(tape.cross_entropy(logits, &targets))
    }

    /// L_SB + λ_ST · L_ST.
    pub fn joint_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureMatrix,
        tokens: &[u32],
        outcome: &MaskingOutcome,
    ) -> Result<NodeId> {
        let sb = self.masked_lm_loss(tape, store, features, outcome)?;
        if self.config.lambda_st == 0.0 {
            return Ok(sb);
        }
        let st = self.asr_loss(tape, store, features, tokens)?;
        let st_scaled = tape.scale(st, self.config.lambda_st);
        Ok(tape.add(sb, st_scaled))
    }

    /// Final memory-encoder states for unmasked tokens, one row per token.
    pub fn extract_feature_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &FeatureMatrix,
        tokens: &[u32],
    ) -> Result<NodeId> {
        let memory = self.speech_encode(tape, store, features)?;
        let (states, _) = self.text_states(tape, store, tokens, memory, MaskMode::Full)?;
        Ok(states)
    }

    /// Inference-only variant of [`Self::extract_feature_nodes`].
    pub fn extract_features(
        &self,
        store: &ParamStore,
        features: &FeatureMatrix,
        tokens: &[u32],
    ) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let states = self.extract_feature_nodes(&mut tape, store, features, tokens)?;
        Ok(tape.value(states).clone())
    }

    /// Per-layer cross-attention matrices (token_len × frame_len), averaged
    /// over heads.
    pub fn dump_attention(
        &self,
        store: &ParamStore,
        features: &FeatureMatrix,
        tokens: &[u32],
    ) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let memory = self.speech_encode(&mut tape, store, features)?;
        let (_, cross) = self.text_states(&mut tape, store, tokens, memory, MaskMode::Full)?;
        let mut out = Vec::with_capacity(cross.len());
        for layer in cross {
            let mut avg = tape.value(layer[0]).clone();
            for &h in &layer[1..] {
                avg += tape.value(h);
            }
            avg /= layer.len() as f64;
            out.push(avg);
        }
        Ok(out)
    }

    /// Fraction of masked-LM targets predicted correctly by argmax.
    pub fn masked_accuracy(
        &self,
        store: &ParamStore,
        features: &FeatureMatrix,
        outcome: &MaskingOutcome,
    ) -> Result<(usize, usize)> {
        let mut tape = Tape::new();
        let memory = self.speech_encode(&mut tape, store, features)?;
        let (states, _) = self.text_states(
            &mut tape,
            store,
            &outcome.corrupted_tokens,
            memory,
            MaskMode::Full,
        )?;
        let logits = self.vocab_logits(&mut tape, store, states)?;
        let values = tape.value(logits);
        let mut correct = 0;
        for (&pos, &label) in outcome.target_positions.iter().zip(&outcome.target_labels) {
            let row = values.row(pos);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == label as usize {
                correct += 1;
            }
        }
        Ok((correct, outcome.target_positions.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_utterance, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_model() -> (SpeechBert, ParamStore, FeatureMatrix, Vec<u32>) {
        let config = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            memory_layers: 1,
            feedforward_dim: 16,
            max_seq_len: 32,
            feature_dim: 6,
            lambda_st: 0.15,
            specials: SpecialTokens::default(),
        };
        let model = SpeechBert::new(config).unwrap();
        let store = model.init_params(42);
        let synth = SynthConfig {
            vocab_size: 20,
            raw_dim: 6,
            frames_per_token: 2,
            min_len: 4,
            max_len: 6,
            ..SynthConfig::default()
        };
        let utt = synth_utterance(&synth, "u", 3).unwrap();
        (model, store, utt.features.clone(), utt.tokens)
    }

    #[test]
    fn masking_examples() {
        let config = ModelConfig::default();
        // Force everything to mask.
        let all = MaskingConfig {
            p_target: 1.0,
            p_mask: 1.0,
            p_substitute: 0.0,
        };
        let tokens = vec![5, 6, 7, 8];
        let out = apply_masking(&tokens, &config, &all, 1).unwrap();
        assert_eq!(out.corrupted_tokens, vec![0, 0, 0, 0]);
        assert_eq!(out.target_labels, tokens);
        assert_eq!(out.target_positions, vec![0, 1, 2, 3]);

        // Length-1 sequence always yields a target via the re-draw guarantee.
        let out = apply_masking(&[9], &config, &MaskingConfig::default(), 2).unwrap();
        assert_eq!(out.target_positions, vec![0]);

        assert!(apply_masking(&[], &config, &MaskingConfig::default(), 0).is_err());
        assert!(apply_masking(&[0], &config, &MaskingConfig::default(), 0).is_err());
    }

    #[test]
    fn masking_statistics_converge() {
        let config = ModelConfig::default();
        let masking = MaskingConfig::default();
        let tokens: Vec<u32> = vec![10; 1000];
        let mut masked = 0usize;
        let mut substituted = 0usize;
        let mut unchanged = 0usize;
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let out = apply_masking(&tokens, &config, &masking, seed).unwrap();
            total += tokens.len();
            for k in &out.kinds {
                match k {
                    OutcomeKind::Masked => masked += 1,
                    OutcomeKind::Substituted => substituted += 1,
                    OutcomeKind::Unchanged => unchanged += 1,
                }
            }
        }
        let n = total as f64;
        assert!((masked as f64 / n - 0.12).abs() < 0.005);
        assert!((substituted as f64 / n - 0.015).abs() < 0.0015);
        assert!((unchanged as f64 / n - 0.015).abs() < 0.0015);
    }

    #[test]
    fn uniform_logit_loss_is_ln_vocab() {
        let (model, mut store, features, tokens) = tiny_model();
        // Zero the output projection: logits all equal, softmax uniform.
        *store.get_mut("out.w") = Array2::zeros(store.get("out.w").raw_dim());
        *store.get_mut("out.b") = Array2::zeros(store.get("out.b").raw_dim());
        let outcome = apply_masking(&tokens, &model.config, &MaskingConfig::default(), 7).unwrap();
        let mut tape = Tape::new();
        let loss = model
            .masked_lm_loss(&mut tape, &store, &features, &outcome)
            .unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), (20.0f64).ln(), epsilon = 1e-9);
        let mut tape = Tape::new();
        let loss = model.asr_loss(&mut tape, &store, &features, &tokens).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), (20.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn joint_loss_combines_with_lambda() {
        let (model, store, features, tokens) = tiny_model();
        let outcome = apply_masking(&tokens, &model.config, &MaskingConfig::default(), 7).unwrap();
        let mut tape = Tape::new();
        let sb = model
            .masked_lm_loss(&mut tape, &store, &features, &outcome)
            .unwrap();
        let st = model.asr_loss(&mut tape, &store, &features, &tokens).unwrap();
        let joint = {
            let mut t2 = Tape::new();
            let j = model
                .joint_loss(&mut t2, &store, &features, &tokens, &outcome)
                .unwrap();
            t2.scalar(j)
        };
        assert_abs_diff_eq!(
            joint,
            tape.scalar(sb) + 0.15 * tape.scalar(st),
            epsilon = 1e-12
        );
        // λ_ST = 0 reduces to the masked-LM loss alone.
        let mut cfg0 = model.config.clone();
        cfg0.lambda_st = 0.0;
        let m0 = SpeechBert::new(cfg0).unwrap();
        let mut t3 = Tape::new();
        let j0 = m0
            .joint_loss(&mut t3, &store, &features, &tokens, &outcome)
            .unwrap();
        assert_abs_diff_eq!(t3.scalar(j0), tape.scalar(sb), epsilon = 1e-12);
    }

    #[test]
    fn joint_gradient_is_sum_of_parts() {
        let (model, store, features, tokens) = tiny_model();
        let outcome = apply_masking(&tokens, &model.config, &MaskingConfig::default(), 9).unwrap();
        let mut t1 = Tape::new();
        let sb = model
            .masked_lm_loss(&mut t1, &store, &features, &outcome)
            .unwrap();
        let g_sb = t1.backward(sb);
        let mut t2 = Tape::new();
        let st = model.asr_loss(&mut t2, &store, &features, &tokens).unwrap();
        let g_st = t2.backward(st);
        let mut t3 = Tape::new();
        let j = model
            .joint_loss(&mut t3, &store, &features, &tokens, &outcome)
            .unwrap();
        let g_j = t3.backward(j);
        for (name, g) in &g_j {
            let expected = match (g_sb.get(name), g_st.get(name)) {
                (Some(a), Some(b)) => a + &(b * 0.15),
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b * 0.15,
                (None, None) => continue,
            };
            for (x, y) in g.iter().zip(expected.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn asr_loss_is_causal_per_step() {
        let (model, store, features, tokens) = tiny_model();
        // Perturbing the last token must not change the loss contribution of
        // earlier steps; check by comparing total losses where only the last
        // target differs.
        let mut tape = Tape::new();
        let memory = model.speech_encode(&mut tape, &store, &features).unwrap();
        let sp = &model.config.specials;
        let mut input = vec![sp.bos_id];
        input.extend_from_slice(&tokens);
        let (states, _) = model
            .text_states(&mut tape, &store, &input, memory, MaskMode::Causal)
            .unwrap();
        let run_states = tape.value(states).clone();

        let mut perturbed = input.clone();
        let last = perturbed.len() - 1;
        perturbed[last] = if perturbed[last] == 5 { 6 } else { 5 };
        let mut tape2 = Tape::new();
        let memory2 = model.speech_encode(&mut tape2, &store, &features).unwrap();
        let (states2, _) = model
            .text_states(&mut tape2, &store, &perturbed, memory2, MaskMode::Causal)
            .unwrap();
        let run2 = tape2.value(states2).clone();
        for t in 0..last {
            for j in 0..run_states.ncols() {
                assert_eq!(run_states[[t, j]].to_bits(), run2[[t, j]].to_bits());
            }
        }
    }

    #[test]
    fn extracted_features_shape_and_determinism() {
        let (model, store, features, tokens) = tiny_model();
        let a = model.extract_features(&store, &features, &tokens).unwrap();
        let b = model.extract_features(&store, &features, &tokens).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nrows(), tokens.len());
        assert_eq!(a.ncols(), model.config.d_model);
    }

    #[test]
    fn full_attention_features_depend_on_every_token() {
        let (model, store, features, tokens) = tiny_model();
        let base = model.extract_features(&store, &features, &tokens).unwrap();
        let mut perturbed = tokens.clone();
        let j = perturbed.len() - 1;
        perturbed[j] = if perturbed[j] == 5 { 6 } else { 5 };
        let changed = model.extract_features(&store, &features, &perturbed).unwrap();
        for t in 0..tokens.len() {
            let delta: f64 = (0..base.ncols())
                .map(|c| (base[[t, c]] - changed[[t, c]]).abs())
                .sum();
            assert!(delta > 1e-12, "position {t} unaffected");
        }
    }

    #[test]
    fn attention_dump_rows_sum_to_one() {
        let (model, store, features, tokens) = tiny_model();
        let dumps = model.dump_attention(&store, &features, &tokens).unwrap();
        assert_eq!(dumps.len(), model.config.memory_layers);
        for m in &dumps {
            assert_eq!(m.nrows(), tokens.len());
            assert_eq!(m.ncols(), features.frames());
            for row in m.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn config_round_trips_through_store() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        cfg.store_into(&mut store);
        let back = ModelConfig::load_from(&store).unwrap();
        assert_eq!(back.vocab_size, cfg.vocab_size);
        assert_eq!(back.d_model, cfg.d_model);
        assert_abs_diff_eq!(back.lambda_st, cfg.lambda_st, epsilon = 1e-9);
    }
}
