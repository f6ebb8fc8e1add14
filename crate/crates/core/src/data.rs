//! Synthetic paired corpus generation, frame stacking, and dataset /
//! feature-file I/O.
//!
//! Dataset file: a `ziqe-dataset v1` header, then one tab-separated record
//! per line: id, space-joined reference ids, space-joined hypothesis ids,
//! WER to 6 decimals, feature-file name. Feature files use the binary
//! checkpoint format with one record per utterance id plus `_meta/*`
//! scalars for the stacking dimensions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};

use crate::errors::{Result, ZiqeError};
use crate::metrics::word_error_rate;
use crate::nn::{read_checkpoint, write_checkpoint, ParamStore};
use crate::par::par_map_indexed;
use crate::rng::{derive_seed, SplitMix64};

/// Per-utterance acoustic feature frames (rows = frames, cols = dims).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub raw_dim: usize,
    pub stack_window: usize,
}

impl FeatureMatrix {
    pub fn raw(data: Array2<f64>) -> Self {
        let raw_dim = data.ncols();
        FeatureMatrix {
            data,
            raw_dim,
            stack_window: 1,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Token sequence paired with its acoustic features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<u32>,
    pub features: FeatureMatrix,
}

/// A quality-estimation sample: reference utterance, ASR hypothesis, WER label.
#[derive(Debug, Clone, PartialEq)]
pub struct QESample {
    pub utterance: Utterance,
    pub hypothesis: Vec<u32>,
    pub wer_label: f64,
}

/// Controls the synthetic hypothesis corruption.
#[derive(Debug, Clone, Copy)]
pub struct CorruptionConfig {
    /// Probability the hypothesis is returned verbatim (the zero-inflation mass).
    pub p_clean: f64,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            p_clean: 0.4,
            p_sub: 0.2,
            p_del: 0.1,
            p_ins: 0.1,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_clean", self.p_clean),
            ("p_sub", self.p_sub),
            ("p_del", self.p_del),
            ("p_ins", self.p_ins),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ZiqeError::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.p_sub + self.p_del > 1.0 {
            return Err(ZiqeError::Config("p_sub + p_del must not exceed 1".into()));
        }
        Ok(())
    }
}

/// Controls synthetic utterance generation.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub vocab_size: usize,
    /// ids below this are reserved for special tokens and never generated.
    pub num_special: usize,
    pub raw_dim: usize,
    pub frames_per_token: usize,
    pub noise_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Seed of the fixed token-template table.
    pub template_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            num_special: 4,
            raw_dim: 8,
            frames_per_token: 4,
            noise_scale: 0.1,
            min_len: 5,
            max_len: 12,
            template_seed: 0x7E_AA_17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < self.num_special + 1 || self.vocab_size < 4 {
            return Err(ZiqeError::Config(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(ZiqeError::Config(format!(
                "bad length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.frames_per_token == 0 || self.raw_dim == 0 {
            return Err(ZiqeError::Config("frames_per_token and raw_dim must be positive".into()));
        }
        Ok(())
    }

    /// The fixed template vector for one token id, a pure function of
    /// `(template_seed, token)`.
    pub fn template(&self, token: u32) -> Vec<f64> {
        let mut rng = SplitMix64::new(derive_seed(self.template_seed, token as u64));
        (0..self.raw_dim).map(|_| rng.normal()).collect()
    }
}

/// Concatenates `window` consecutive frames into wider vectors, advancing
/// by `stride` input frames per output frame; missing tail frames repeat
/// the final frame.
pub fn stack_frames(raw: &FeatureMatrix, window: usize, stride: usize) -> Result<FeatureMatrix> {
    if window < 1 || stride < 1 {
        return Err(ZiqeError::Config("stack window and stride must be >= 1".into()));
    }
    let frames = raw.frames();
    if frames == 0 {
        return Err(ZiqeError::domain("cannot stack an empty feature matrix"));
    }
    let d = raw.dim();
    let out_frames = frames.div_ceil(stride);
    let mut out = Array2::zeros((out_frames, d * window));
    for (o, row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let mut row = row;
        for w in 0..window {
            let src = (o * stride + w).min(frames - 1);
            for j in 0..d {
                row[w * d + j] = raw.data[[src, j]];
            }
        }
    }
    Ok(FeatureMatrix {
        data: out,
        raw_dim: d,
        stack_window: window,
    })
}

/// Generates one random utterance whose features carry the token identity:
/// each token contributes `frames_per_token` copies of its fixed template
/// plus Gaussian noise.
pub fn synth_utterance(config: &SynthConfig, id: &str, seed: u64) -> Result<Utterance> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let len = config.min_len + rng.index(config.max_len - config.min_len + 1);
    let content = config.vocab_size - config.num_special;
    let tokens: Vec<u32> = (0..len)
        .map(|_| (config.num_special + rng.index(content)) as u32)
        .collect();
    let mut data = Array2::zeros((len * config.frames_per_token, config.raw_dim));
    for (t, &tok) in tokens.iter().enumerate() {
        let template = config.template(tok);
        for f in 0..config.frames_per_token {
            for j in 0..config.raw_dim {
                data[[t * config.frames_per_token + f, j]] =
                    template[j] + config.noise_scale * rng.normal();
            }
        }
    }
    Ok(Utterance {
        id: id.to_string(),
        tokens,
        features: FeatureMatrix::raw(data),
    })
}

/// Applies the corruption model to a reference, returning the hypothesis
/// and its exact WER.
pub fn corrupt_hypothesis(
    reference: &[u32],
    config: &CorruptionConfig,
    synth: &SynthConfig,
    seed: u64,
) -> Result<(Vec<u32>, f64)> {
    config.validate()?;
    if reference.is_empty() {
        return Err(ZiqeError::domain("empty reference"));
    }
    let mut rng = SplitMix64::new(seed);
    if rng.next_f64() < config.p_clean {
        return Ok((reference.to_vec(), 0.0));
    }
    let content = synth.vocab_size - synth.num_special;
    fn random_token(
        rng: &mut SplitMix64,
        num_special: usize,
        content: usize,
        avoid: Option<u32>,
    ) -> u32 {
        loop {
            let t = (num_special + rng.index(content)) as u32;
            if Some(t) != avoid {
                return t;
            }
        }
    }
    let mut hyp = Vec::with_capacity(reference.len());
    for &tok in reference {
        let u = rng.next_f64();
        if u < config.p_sub {
            hyp.push(random_token(&mut rng, synth.num_special, content, Some(tok)));
        } else if u < config.p_sub + config.p_del {
            // deleted
        } else {
            hyp.push(tok);
        }
        while rng.next_f64() < config.p_ins {
            hyp.push(random_token(&mut rng, synth.num_special, content, None));
        }
    }
    let wer = word_error_rate(reference, &hyp)?;
    Ok((hyp, wer))
}

/// Generates a full QE corpus; utterances are independent streams derived
/// from the root seed, so generation parallelizes deterministically.
pub fn generate_corpus(
    synth: &SynthConfig,
    corruption: &CorruptionConfig,
    count: usize,
    root_seed: u64,
) -> Result<Vec<QESample>> {
    synth.validate()?;
    corruption.validate()?;
    let samples = par_map_indexed(count, |i| -> Result<QESample> {
        let id = format!("utt{i:06}");
        let utt = synth_utterance(synth, &id, derive_seed(root_seed, i as u64))?;
        let (hyp, wer) = corrupt_hypothesis(
            &utt.tokens,
            corruption,
            synth,
            derive_seed(root_seed ^ 0xC0FFEE, i as u64),
        )?;
        Ok(QESample {
            utterance: utt,
            hypothesis: hyp,
            wer_label: wer,
        })
    });
    samples.into_iter().collect()
}

fn ids_to_str(ids: &[u32]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{id}").unwrap();
    }
    s
}

fn parse_ids(s: &str, line: usize) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| ZiqeError::Format(format!("line {line}: bad token id {t:?}")))
        })
        .collect()
}

/// Writes the samples: a text index at `path` and the features as a binary
/// sidecar named `<stem>.feat` in the same directory.
pub fn write_dataset(path: &Path, samples: &[QESample]) -> Result<()> {
    let feat_name = {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset");
        format!("{stem}.feat")
    };
    let feat_path = path.with_file_name(&feat_name);

    let mut store = ParamStore::new();
    let (raw_dim, window) = samples
        .first()
        .map(|s| (s.utterance.features.raw_dim, s.utterance.features.stack_window))
        .unwrap_or((0, 1));
    store.insert("_meta/raw_dim", Array2::from_elem((1, 1), raw_dim as f64));
    store.insert("_meta/stack_window", Array2::from_elem((1, 1), window as f64));
    for s in samples {
        store.insert(&s.utterance.id, s.utterance.features.data.clone());
    }
    write_checkpoint(&feat_path, &store)?;

    let mut text = String::from("ziqe-dataset v1\n");
    for s in samples {
        writeln!(
            text,
            "{}\t{}\t{}\t{:.6}\t{}",
            s.utterance.id,
            ids_to_str(&s.utterance.tokens),
            ids_to_str(&s.hypothesis),
            s.wer_label,
            feat_name
        )
        .unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a dataset, re-deriving every WER label from its token pair and
/// rejecting records whose stored label disagrees.
pub fn read_dataset(path: &Path) -> Result<Vec<QESample>> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ziqe-dataset v1")) => {}
        other => {
            return Err(ZiqeError::Format(format!(
                "missing dataset header, got {:?}",
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut features_cache: BTreeMap<String, ParamStore> = BTreeMap::new();
    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(ZiqeError::Format(format!(
                "line {line_no}: expected 5 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        let tokens = parse_ids(fields[1], line_no)?;
        if tokens.is_empty() {
            return Err(ZiqeError::Format(format!("line {line_no}: empty reference")));
        }
        let hypothesis = parse_ids(fields[2], line_no)?;
        let stored_wer: f64 = fields[3]
            .parse()
            .map_err(|_| ZiqeError::Format(format!("line {line_no}: bad wer {:?}", fields[3])))?;
        let feat_name = fields[4];
        if !features_cache.contains_key(feat_name) {
            let store = read_checkpoint(&dir.join(feat_name))?;
            features_cache.insert(feat_name.to_string(), store);
        }
        let store = &features_cache[feat_name];
        if !store.contains(&id) {
            return Err(ZiqeError::Format(format!(
                "line {line_no}: no features for utterance {id}"
            )));
        }
        let raw_dim = store.get("_meta/raw_dim")[[0, 0]] as usize;
        let window = store.get("_meta/stack_window")[[0, 0]] as usize;
        let wer = word_error_rate(&tokens, &hypothesis)?;
        if (wer - stored_wer).abs() > 5e-7 {
            return Err(ZiqeError::Format(format!(
                "line {line_no}: stored WER {stored_wer} disagrees with recomputed {wer}"
            )));
        }
        samples.push(QESample {
            utterance: Utterance {
                id,
                tokens,
                features: FeatureMatrix {
                    data: store.get(fields[0]).clone(),
                    raw_dim,
                    stack_window: window,
                },
            },
            hypothesis,
            wer_label: wer,
        });
    }
    Ok(samples)
}
