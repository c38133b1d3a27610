//! A small pre-norm transformer encoder whose six per-layer weight matrices
//! are prunable, with a mean-pooled classification head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::mask::{masked_forward, MaskedVars, PrunableMatrix};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MATRICES_PER_LAYER: usize = 6;
const DENSE_PER_LAYER: usize = 10;

/// Encoder dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            seq_len: 16,
            hidden: 64,
            heads: 4,
            ffn: 256,
            layers: 2,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab", self.vocab),
            ("model.seq_len", self.seq_len),
            ("model.hidden", self.hidden),
            ("model.heads", self.heads),
            ("model.ffn", self.ffn),
            ("model.layers", self.layers),
            ("model.classes", self.classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide hidden size {}", self.heads, self.hidden),
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes", "need at least two classes"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Block sizes for attention and feed-forward matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GranularityProfile {
    H32,
    S32,
    S16,
    S8,
    S1,
}

impl GranularityProfile {
    pub const ALL: [GranularityProfile; 5] = [Self::H32, Self::S32, Self::S16, Self::S8, Self::S1];

    pub fn mha_block(self) -> usize {
        match self {
            Self::H32 | Self::S32 => 32,
            Self::S16 => 16,
            Self::S8 => 8,
            Self::S1 => 1,
        }
    }

    pub fn fc_block(self) -> usize {
        match self {
            Self::H32 | Self::S1 => 1,
            Self::S32 => 32,
            Self::S16 => 16,
            Self::S8 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::H32 => "h32",
            Self::S32 => "s32",
            Self::S16 => "s16",
            Self::S8 => "s8",
            Self::S1 => "s1",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Self::H32 => 0,
            Self::S32 => 1,
            Self::S16 => 2,
            Self::S8 => 3,
            Self::S1 => 4,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown profile code {code}")))
    }
}

impl fmt::Display for GranularityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GranularityProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("profile", format!("unknown profile `{s}`")))
    }
}

/// Position of a prunable matrix inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubLayer {
    Query,
    Key,
    Value,
    Output,
    FfnIn,
    FfnOut,
}

impl SubLayer {
    pub const ALL: [SubLayer; MATRICES_PER_LAYER] = [
        Self::Query,
        Self::Key,
        Self::Value,
        Self::Output,
        Self::FfnIn,
        Self::FfnOut,
    ];

    pub fn is_attention(self) -> bool {
        !matches!(self, Self::FfnIn | Self::FfnOut)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Query => "attn.query",
            Self::Key => "attn.key",
            Self::Value => "attn.value",
            Self::Output => "attn.output",
            Self::FfnIn => "ffn.in",
            Self::FfnOut => "ffn.out",
        }
    }

    /// `"mha"` or `"fc"`.
    pub fn group(self) -> &'static str {
        if self.is_attention() {
            "mha"
        } else {
            "fc"
        }
    }
}

/// Index of the matrix in [`ToyModel::prunables`] to its layer and role.
pub fn locate(index: usize) -> (usize, SubLayer) {
    (index / MATRICES_PER_LAYER, SubLayer::ALL[index % MATRICES_PER_LAYER])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub query: PrunableMatrix,
    pub query_bias: Tensor,
    pub key: PrunableMatrix,
    pub key_bias: Tensor,
    pub value: PrunableMatrix,
    pub value_bias: Tensor,
    pub output: PrunableMatrix,
    pub output_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn_in: PrunableMatrix,
    pub ffn_in_bias: Tensor,
    pub ffn_out: PrunableMatrix,
    pub ffn_out_bias: Tensor,
}

impl EncoderLayer {
    pub fn prunables(&self) -> [&PrunableMatrix; MATRICES_PER_LAYER] {
        [&self.query, &self.key, &self.value, &self.output, &self.ffn_in, &self.ffn_out]
    }

    pub fn prunables_mut(&mut self) -> [&mut PrunableMatrix; MATRICES_PER_LAYER] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ]
    }

    fn dense(&self) -> [&Tensor; DENSE_PER_LAYER] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.query_bias,
            &self.key_bias,
            &self.value_bias,
            &self.output_bias,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ffn_in_bias,
            &self.ffn_out_bias,
        ]
    }

    fn dense_mut(&mut self) -> [&mut Tensor; DENSE_PER_LAYER] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.query_bias,
            &mut self.key_bias,
            &mut self.value_bias,
            &mut self.output_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_bias,
        ]
    }
}

const LAYER_DENSE_NAMES: [&str; DENSE_PER_LAYER] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.query.bias",
    "attn.key.bias",
    "attn.value.bias",
    "attn.output.bias",
    "ln2.gamma",
    "ln2.beta",
    "ffn.in.bias",
    "ffn.out.bias",
];

/// Encoder plus embedding table and classifier head. Only the `6 · layers`
/// encoder matrices are prunable.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub profile: GranularityProfile,
    pub embedding: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

/// Graph handles for every parameter of a [`ToyModel`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    /// Same order as [`ToyModel::dense_params`].
    pub dense: Vec<Var>,
    /// Same order as [`ToyModel::prunables`].
    pub masked: Vec<MaskedVars>,
}

/// Fixed sinusoidal position table, `seq_len x hidden`.
pub fn positional_encoding(seq_len: usize, hidden: usize) -> Tensor {
    let mut t = Tensor::zeros(seq_len, hidden);
    for pos in 0..seq_len {
        for i in 0..hidden {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / hidden as f64);
            let angle = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl ToyModel {
    /// Seeded initialisation: matrices uniform in `±1/sqrt(fan_in)`, biases
    /// zero, layer-norm gains one.
    pub fn new(config: ModelConfig, profile: GranularityProfile, seed: u64) -> Result<Self> {
        config.validate()?;
        for (what, block) in [("attention", profile.mha_block()), ("feed-forward", profile.fc_block())] {
            if !config.hidden.is_multiple_of(block) || !config.ffn.is_multiple_of(block) {
                return Err(Error::config(
                    "profile",
                    format!(
                        "{what} block {block} does not tile hidden {} / ffn {}",
                        config.hidden, config.ffn
                    ),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f) = (config.hidden, config.ffn);
        let matrix = |name: String, d_in: usize, d_out: usize, block: usize, index: usize, rng: &mut ChaCha8Rng| {
            let w = Tensor::uniform(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng);
            PrunableMatrix::new(name, w, block, index, rng)
        };
        // one-hot inputs have a fan-in of one
        let embedding = Tensor::uniform(config.vocab, h, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let base = l * MATRICES_PER_LAYER;
            let (mb, fb) = (profile.mha_block(), profile.fc_block());
            let name = |s: SubLayer| format!("layer{l}.{}", s.label());
            layers.push(EncoderLayer {
                ln1_gamma: Tensor::ones(1, h),
                ln1_beta: Tensor::zeros(1, h),
                query: matrix(name(SubLayer::Query), h, h, mb, base, &mut rng)?,
                query_bias: Tensor::zeros(1, h),
                key: matrix(name(SubLayer::Key), h, h, mb, base + 1, &mut rng)?,
                key_bias: Tensor::zeros(1, h),
                value: matrix(name(SubLayer::Value), h, h, mb, base + 2, &mut rng)?,
                value_bias: Tensor::zeros(1, h),
                output: matrix(name(SubLayer::Output), h, h, mb, base + 3, &mut rng)?,
                output_bias: Tensor::zeros(1, h),
                ln2_gamma: Tensor::ones(1, h),
                ln2_beta: Tensor::zeros(1, h),
                ffn_in: matrix(name(SubLayer::FfnIn), h, f, fb, base + 4, &mut rng)?,
                ffn_in_bias: Tensor::zeros(1, f),
                ffn_out: matrix(name(SubLayer::FfnOut), f, h, fb, base + 5, &mut rng)?,
                ffn_out_bias: Tensor::zeros(1, h),
            });
        }
        let classifier = Tensor::uniform(h, config.classes, 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            profile,
            embedding,
            layers,
            final_gamma: Tensor::ones(1, h),
            final_beta: Tensor::zeros(1, h),
            classifier,
            classifier_bias: Tensor::zeros(1, config.classes),
        })
    }

    pub fn prunables(&self) -> Vec<&PrunableMatrix> {
        self.layers.iter().flat_map(|l| l.prunables()).collect()
    }

    pub fn prunables_mut(&mut self) -> Vec<&mut PrunableMatrix> {
        self.layers.iter_mut().flat_map(|l| l.prunables_mut()).collect()
    }

    pub fn num_prunable(&self) -> usize {
        self.layers.len() * MATRICES_PER_LAYER
    }

    /// `d_in · d_out` of every prunable matrix.
    pub fn element_counts(&self) -> Vec<usize> {
        self.prunables()
            .iter()
            .map(|p| p.geometry().element_count())
            .collect()
    }

    /// Parameters that are trained but never pruned, in a fixed order.
    pub fn dense_params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.dense());
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.classifier, &self.classifier_bias]);
        out
    }

    pub fn dense_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.dense_mut());
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.classifier,
            &mut self.classifier_bias,
        ]);
        out
    }

    pub fn dense_param_names(&self) -> Vec<String> {
        let mut out = vec!["embedding".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_DENSE_NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        out.extend(["final.gamma", "final.beta", "classifier", "classifier.bias"].map(String::from));
        out
    }

    /// Insert every parameter into `g`, as tracked leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut insert = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let dense = self.dense_params().into_iter().map(&mut insert).collect();
        let masked = self
            .prunables()
            .into_iter()
            .map(|p| MaskedVars {
                weight: insert(p.weight()),
                gate: None,
                keep: None,
            })
            .collect();
        BoundModel { dense, masked }
    }

    /// Logits `batch x classes`.
    pub fn forward(&self, g: &mut Graph, bound: &BoundModel, batch: &Batch) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq_len != cfg.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} for a model of length {}",
                batch.seq_len, cfg.seq_len
            )));
        }
        if let Some(bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
            return Err(Error::Input(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        let n = batch.len();
        let (s, dh) = (cfg.seq_len, cfg.head_dim());
        let emb = g.gather_rows(bound.dense[0], &batch.tokens)?;
        let pos = positional_encoding(s, cfg.hidden);
        let mut tiled = Vec::with_capacity(n * s * cfg.hidden);
        for _ in 0..n {
            tiled.extend_from_slice(pos.data());
        }
        let pos = g.constant(Tensor::from_vec(n * s, cfg.hidden, tiled)?);
        let mut x = g.add(emb, pos)?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for (l, layer) in self.layers.iter().enumerate() {
            let d = &bound.dense[1 + l * DENSE_PER_LAYER..1 + (l + 1) * DENSE_PER_LAYER];
            let m = &bound.masked[l * MATRICES_PER_LAYER..(l + 1) * MATRICES_PER_LAYER];

            let a = g.layer_norm(x, d[0], d[1], LAYER_NORM_EPS)?;
            let q = masked_forward(g, &layer.query, m[0], a)?;
            let q = g.add_bias(q, d[2])?;
            let k = masked_forward(g, &layer.key, m[1], a)?;
            let k = g.add_bias(k, d[3])?;
            let v = masked_forward(g, &layer.value, m[2], a)?;
            let v = g.add_bias(v, d[4])?;

            let mut rows = Vec::with_capacity(n);
            for b in 0..n {
                let mut heads = Vec::with_capacity(cfg.heads);
                for head in 0..cfg.heads {
                    let qs = g.slice(q, b * s, s, head * dh, dh)?;
                    let ks = g.slice(k, b * s, s, head * dh, dh)?;
                    let vs = g.slice(v, b * s, s, head * dh, dh)?;
                    let kt = g.transpose(ks);
                    let scores = g.matmul(qs, kt)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let att = g.softmax_rows(scores);
                    heads.push(g.matmul(att, vs)?);
                }
                rows.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
            }
            let attended = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
            let o = masked_forward(g, &layer.output, m[3], attended)?;
            let o = g.add_bias(o, d[5])?;
            x = g.add(x, o)?;

            let f = g.layer_norm(x, d[6], d[7], LAYER_NORM_EPS)?;
            let f = masked_forward(g, &layer.ffn_in, m[4], f)?;
            let f = g.add_bias(f, d[8])?;
            let f = g.relu(f);
            let f = masked_forward(g, &layer.ffn_out, m[5], f)?;
            let f = g.add_bias(f, d[9])?;
            x = g.add(x, f)?;
        }

        let tail = 1 + self.layers.len() * DENSE_PER_LAYER;
        let x = g.layer_norm(x, bound.dense[tail], bound.dense[tail + 1], LAYER_NORM_EPS)?;
        let pooled = g.mean_pool_rows(x, s)?;
        let logits = g.matmul(pooled, bound.dense[tail + 2])?;
        g.add_bias(logits, bound.dense[tail + 3])
    }

    /// Logits without tracking gradients.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let logits = self.forward(&mut g, &bound, batch)?;
        Ok(g.value(logits).clone())
    }

    /// Logits for every example of `data`, in order.
    pub fn predict_all(&self, data: &Dataset, batch_size: usize) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(data.len() * self.config.classes);
        for batch in data.chunks(batch_size) {
            rows.extend_from_slice(self.predict(&batch)?.data());
        }
        Tensor::from_vec(data.len(), self.config.classes, rows)
    }

    pub fn accuracy(&self, data: &Dataset, batch_size: usize) -> Result<f64> {
        let logits = self.predict_all(data, batch_size)?;
        Ok(accuracy(&logits, data.labels()))
    }

    /// Copy every weight and unpruned parameter from a model of the same
    /// dimensions, keeping this model's profile, scores and masks. Masks are
    /// left stale.
    pub fn copy_weights_from(&mut self, other: &ToyModel) -> Result<()> {
        if self.config != other.config {
            return Err(Error::config(
                "teacher_checkpoint",
                format!("teacher dimensions {:?} differ from {:?}", other.config, self.config),
            ));
        }
        for (dst, src) in self.dense_params_mut().into_iter().zip(other.dense_params()) {
            *dst = src.clone();
        }
        for (dst, src) in self.prunables_mut().into_iter().zip(other.prunables()) {
            *dst.weight_mut() = src.weight().clone();
        }
        Ok(())
    }

    /// Refresh every mask to all-ones.
    pub fn reset_masks(&mut self) -> Result<()> {
        for p in self.prunables_mut() {
            p.refresh_mask(1.0)?;
        }
        Ok(())
    }
}

/// Fraction of rows whose arg-max (first on ties) equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| {
            let row = logits.row(*r);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab: 8,
            seq_len: 4,
            hidden: 16,
            heads: 2,
            ffn: 32,
            layers: 2,
            classes: 2,
        }
    }

    fn batch(cfg: &ModelConfig, n: usize) -> Batch {
        Dataset::generate(&TaskConfig::default(), n, cfg.seq_len, cfg.vocab, 3)
            .unwrap()
            .batch(&(0..n).collect::<Vec<_>>())
    }

    #[test]
    fn profiles_parse_and_report_blocks() {
        assert_eq!("H32".parse::<GranularityProfile>().unwrap(), GranularityProfile::H32);
        assert_eq!(GranularityProfile::H32.mha_block(), 32);
        assert_eq!(GranularityProfile::H32.fc_block(), 1);
        assert_eq!(GranularityProfile::S16.fc_block(), 16);
        assert!("s4".parse::<GranularityProfile>().is_err());
        for p in GranularityProfile::ALL {
            assert_eq!(GranularityProfile::from_code(p.code()).unwrap(), p);
        }
    }

    #[test]
    fn six_prunable_matrices_per_layer() {
        let m = ToyModel::new(ModelConfig::default(), GranularityProfile::S1, 0).unwrap();
        assert_eq!(m.num_prunable(), 12);
        assert_eq!(m.prunables().len(), 12);
        for (i, p) in m.prunables().iter().enumerate() {
            assert_eq!(p.threshold_index(), i);
            let (l, role) = locate(i);
            assert_eq!(p.name(), format!("layer{l}.{}", role.label()));
        }
        assert_eq!(m.dense_params().len(), m.dense_param_names().len());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut cfg = small();
        cfg.heads = 3;
        assert!(ToyModel::new(cfg, GranularityProfile::S1, 0).is_err());
        assert!(ToyModel::new(small(), GranularityProfile::S32, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_rejects_bad_tokens() {
        let cfg = small();
        let m = ToyModel::new(cfg, GranularityProfile::S8, 4).unwrap();
        let b = batch(&cfg, 3);
        let a = m.predict(&b).unwrap();
        assert_eq!(a.shape(), (3, 2));
        assert_eq!(a, m.predict(&b).unwrap());
        let mut bad = b.clone();
        bad.tokens[0] = 99;
        assert!(matches!(m.predict(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn stale_masks_refuse_forward() {
        let cfg = small();
        let mut m = ToyModel::new(cfg, GranularityProfile::S1, 4).unwrap();
        m.layers[0].key.mark_stale();
        assert!(matches!(m.predict(&batch(&cfg, 2)), Err(Error::Usage(_))));
    }

    #[test]
    fn zeroing_and_masking_agree() {
        let cfg = small();
        let mut masked = ToyModel::new(cfg, GranularityProfile::S8, 5).unwrap();
        for p in masked.prunables_mut() {
            p.refresh_mask(0.5).unwrap();
        }
        let mut zeroed = masked.clone();
        for p in zeroed.prunables_mut() {
            let eff = p.effective_weight();
            *p.weight_mut() = eff;
            p.refresh_mask(1.0).unwrap();
        }
        let b = batch(&cfg, 4);
        assert_eq!(masked.predict(&b).unwrap(), zeroed.predict(&b).unwrap());
    }

    #[test]
    fn all_zero_masks_remove_weight_dependence() {
        let cfg = small();
        let mut a = ToyModel::new(cfg, GranularityProfile::S1, 6).unwrap();
        for p in a.prunables_mut() {
            p.refresh_mask(0.0).unwrap();
        }
        let mut b = a.clone();
        for (pb, fresh) in b.prunables_mut().into_iter().zip(
            ToyModel::new(cfg, GranularityProfile::S1, 7).unwrap().prunables(),
        ) {
            *pb.weight_mut() = fresh.weight().clone();
            pb.refresh_mask(0.0).unwrap();
        }
        let data = batch(&cfg, 3);
        assert_eq!(a.predict(&data).unwrap(), b.predict(&data).unwrap());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 1.0], &[0.5, 0.5]]).unwrap();
        assert!((accuracy(&logits, &[1, 0, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }
}
