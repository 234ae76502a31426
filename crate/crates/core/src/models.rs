//! FiLM and the CNN-LSTM / CNN-LSTM-SA baselines.
//!
//! Every model maps a [`Batch`] of images and token sequences to `[N, 2]`
//! logits (index 1 = "true"). Parameters live in an ordered, named registry
//! so checkpoints and optimizer state line up by position.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::tensor::{
    gru_sequence, lstm_sequence, AdamState, BatchNormState, Checkpoint, GruWeights, LstmWeights, Tape,
    Tensor, Var,
};

pub const CNN_LAYERS: usize = 6;
/// 1-based stem layers with stride 2.
pub const STRIDED_LAYERS: [usize; 2] = [3, 6];
pub const RESBLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Film,
    CnnLstm,
    CnnLstmSa,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Film, Architecture::CnnLstm, Architecture::CnnLstmSa];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Film => "film",
            Architecture::CnnLstm => "cnn-lstm",
            Architecture::CnnLstmSa => "cnn-lstm-sa",
        }
    }

    pub fn default_config(self) -> ModelConfig {
        match self {
            Architecture::Film => ModelConfig::Film(FilmConfig::default()),
            Architecture::CnnLstm => ModelConfig::CnnLstm(BaselineConfig::default()),
            Architecture::CnnLstmSa => ModelConfig::CnnLstmSa(BaselineConfig::default()),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown model {s:?}; expected film, cnn-lstm or cnn-lstm-sa")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilmConfig {
    pub cnn_channels: usize,
    pub resblock_channels: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub proj_dim: usize,
    pub classifier_hidden: usize,
    pub use_coordinate_maps: bool,
}

impl Default for FilmConfig {
    fn default() -> Self {
        FilmConfig {
            cnn_channels: 128,
            resblock_channels: 128,
            embed_dim: 64,
            gru_hidden: 256,
            proj_dim: 512,
            classifier_hidden: 1024,
            use_coordinate_maps: true,
        }
    }
}

impl FilmConfig {
    /// A narrow variant that trains in minutes on one CPU core.
    pub fn compact() -> Self {
        FilmConfig {
            cnn_channels: 32,
            resblock_channels: 32,
            embed_dim: 32,
            gru_hidden: 64,
            proj_dim: 64,
            classifier_hidden: 128,
            use_coordinate_maps: true,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.cnn_channels,
            self.resblock_channels,
            self.embed_dim,
            self.gru_hidden,
            self.proj_dim,
            self.classifier_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::ConfigInvalid(format!("all FiLM dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub cnn_channels: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    /// Stacked attention only.
    pub glimpses: usize,
    /// Stacked attention only.
    pub attention_dim: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            cnn_channels: 128,
            embed_dim: 64,
            lstm_hidden: 256,
            mlp_hidden: 1024,
            glimpses: 2,
            attention_dim: 256,
        }
    }
}

impl BaselineConfig {
    pub fn compact() -> Self {
        BaselineConfig {
            cnn_channels: 32,
            embed_dim: 32,
            lstm_hidden: 64,
            mlp_hidden: 128,
            glimpses: 2,
            attention_dim: 64,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.cnn_channels,
            self.embed_dim,
            self.lstm_hidden,
            self.mlp_hidden,
            self.glimpses,
            self.attention_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::ConfigInvalid(format!(
                "baseline dimensions must be positive and glimpses >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
pub enum ModelConfig {
    Film(FilmConfig),
    CnnLstm(BaselineConfig),
    CnnLstmSa(BaselineConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Film(FilmConfig::default())
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self {
            ModelConfig::Film(_) => Architecture::Film,
            ModelConfig::CnnLstm(_) => Architecture::CnnLstm,
            ModelConfig::CnnLstmSa(_) => Architecture::CnnLstmSa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Film(c) => c.validate(),
            ModelConfig::CnnLstm(c) | ModelConfig::CnnLstmSa(c) => c.validate(),
        }
    }
}

/// Spatial sizes after stem layers 3 and 6 for a square input.
pub fn spatial_ledger(input: usize) -> [usize; 2] {
    let half = |s: usize| (s + 2 - 3) / 2 + 1;
    let after3 = half(input);
    [after3, half(after3)]
}

/// Checkpoint metadata, enough to rebuild the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub image_size: usize,
}

pub struct Model {
    meta: ModelMeta,
    params: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
    bn: Vec<(String, BatchNormState<f32>)>,
    bn_index: HashMap<String, usize>,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape<f32>,
    pub logits: Var,
    /// One per registry entry, in registry order.
    pub params: Vec<Var>,
    /// Attention weights `[N, h, w]` per glimpse (CNN-LSTM-SA only).
    pub attention: Vec<Var>,
    bn: Vec<BatchNormState<f32>>,
}

struct Init<'a> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<(String, Tensor<f32>)>,
    bn: &'a mut Vec<(String, BatchNormState<f32>)>,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f32) {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.params.push((name, t));
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.push((name, Tensor::zeros(shape)));
    }

    /// He-uniform conv kernel `[out, in, k, k]`.
    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = (cin * k * k) as f32;
        self.uniform(format!("{prefix}.weight"), &[cout, cin, k, k], (6.0 / fan_in).sqrt());
        if bias {
            self.zeros(format!("{prefix}.bias"), &[cout]);
        }
    }

    fn linear(&mut self, prefix: &str, fin: usize, fout: usize) {
        self.uniform(format!("{prefix}.weight"), &[fin, fout], (6.0 / fin as f32).sqrt());
        self.zeros(format!("{prefix}.bias"), &[fout]);
    }

    fn batchnorm(&mut self, prefix: &str, c: usize, affine: bool) {
        if affine {
            self.params.push((format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)));
            self.zeros(format!("{prefix}.beta"), &[c]);
        }
        self.bn.push((prefix.to_owned(), BatchNormState::new(c)));
    }

    fn stem(&mut self, channels: usize) {
        for layer in 1..=CNN_LAYERS {
            let cin = if layer == 1 { 3 } else { channels };
            self.conv(&format!("stem.{layer}.conv"), cin, channels, 3, false);
            self.batchnorm(&format!("stem.{layer}.bn"), channels, true);
        }
    }

    fn embedding(&mut self, vocab: usize, dim: usize) {
        self.uniform("embed.weight".into(), &[vocab, dim], 1.0);
    }

    fn recurrent(&mut self, prefix: &str, e: usize, h: usize, gates: usize, two_biases: bool) {
        let bound = 1.0 / (h as f32).sqrt();
        self.uniform(format!("{prefix}.w_ih"), &[e, gates * h], bound);
        self.uniform(format!("{prefix}.w_hh"), &[h, gates * h], bound);
        if two_biases {
            self.uniform(format!("{prefix}.b_ih"), &[gates * h], bound);
            self.uniform(format!("{prefix}.b_hh"), &[gates * h], bound);
        } else {
            self.uniform(format!("{prefix}.bias"), &[gates * h], bound);
        }
    }
}

struct Pass<'a> {
    model: &'a Model,
    tape: Tape<f32>,
    vars: Vec<Var>,
    bn: Vec<BatchNormState<f32>>,
    train: bool,
    attention: Vec<Var>,
}

impl Pass<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    fn opt(&self, name: &str) -> Option<Var> {
        self.model.index.get(name).map(|&i| self.vars[i])
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.opt(&format!("{prefix}.gamma"));
        let beta = self.opt(&format!("{prefix}.beta"));
        let i = self.model.bn_index[prefix];
        self.tape.batchnorm2d(x, gamma, beta, &mut self.bn[i], self.train)
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.opt(&format!("{prefix}.bias"));
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.tape.linear(x, w, Some(b))
    }

    fn stem(&mut self, images: Var) -> Result<Var> {
        let mut x = images;
        for layer in 1..=CNN_LAYERS {
            let stride = if STRIDED_LAYERS.contains(&layer) { 2 } else { 1 };
            x = self.conv(x, &format!("stem.{layer}.conv"), stride, 1)?;
            x = self.bn(x, &format!("stem.{layer}.bn"))?;
            x = self.tape.relu(x);
        }
        Ok(x)
    }

    fn embed(&mut self, batch: &Batch) -> Result<Var> {
        let ids: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let table = self.p("embed.weight");
        let e = self.tape.embedding(table, &ids)?;
        let dim = self.tape.value(e).shape()[1];
        self.tape.reshape(e, &[batch.len(), batch.max_len, dim])
    }

    fn film(&mut self, batch: &Batch, images: Var, c: &FilmConfig) -> Result<Var> {
        let embedded = self.embed(batch)?;
        let gru = GruWeights {
            w_ih: self.p("gru.w_ih"),
            w_hh: self.p("gru.w_hh"),
            b_ih: self.p("gru.b_ih"),
            b_hh: self.p("gru.b_hh"),
        };
        let q = gru_sequence(&mut self.tape, embedded, &batch.lengths, &gru)?;
        let mut x = self.stem(images)?;
        let ch = c.resblock_channels;
        let ones = self.tape.constant(Tensor::full(&[batch.len(), ch], 1.0));
        for i in 0..RESBLOCKS {
            if c.use_coordinate_maps {
                x = self.tape.append_coords(x)?;
            }
            let h = self.conv(x, &format!("res.{i}.conv1"), 1, 0)?;
            let h = self.tape.relu(h);
            let y = self.conv(h, &format!("res.{i}.conv2"), 1, 1)?;
            let y = self.bn(y, &format!("res.{i}.bn"))?;
            let head = self.linear(q, &format!("res.{i}.film"))?;
            let delta = self.tape.slice_cols(head, 0, ch)?;
            let gamma = self.tape.add(ones, delta)?;
            let beta = self.tape.slice_cols(head, ch, ch)?;
            let y = self.tape.film(y, gamma, beta)?;
            let y = self.tape.relu(y);
            x = self.tape.add(h, y)?;
        }
        let x = self.conv(x, "cls.conv", 1, 0)?;
        let x = self.bn(x, "cls.bn")?;
        let x = self.tape.relu(x);
        let x = self.tape.global_max_pool(x)?;
        let x = self.linear(x, "cls.fc1")?;
        let x = self.tape.relu(x);
        self.linear(x, "cls.fc2")
    }

    fn question(&mut self, batch: &Batch) -> Result<Var> {
        let embedded = self.embed(batch)?;
        let lstm = LstmWeights {
            w_ih: self.p("lstm.w_ih"),
            w_hh: self.p("lstm.w_hh"),
            bias: self.p("lstm.bias"),
        };
        lstm_sequence(&mut self.tape, embedded, &batch.lengths, &lstm)
    }

    fn mlp(&mut self, x: Var) -> Result<Var> {
        let x = self.linear(x, "mlp.fc1")?;
        let x = self.tape.relu(x);
        self.linear(x, "mlp.fc2")
    }

    fn cnn_lstm_head(&mut self, features: Var, q: Var) -> Result<Var> {
        let pooled = self.tape.global_avg_pool(features)?;
        let joint = self.tape.concat(pooled, q)?;
        self.mlp(joint)
    }

    fn stacked_attention(&mut self, features: Var, q: Var, c: &BaselineConfig) -> Result<Var> {
        let v = self.conv(features, "att.proj", 1, 0)?;
        let shape = self.tape.value(v).shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let mut u = q;
        for g in 0..c.glimpses {
            let vi = self.conv(v, &format!("att.{g}.image"), 1, 0)?;
            let uq = self.linear(u, &format!("att.{g}.query"))?;
            let ha = self.tape.add_spatial(vi, uq)?;
            let ha = self.tape.tanh(ha);
            let scores = self.conv(ha, &format!("att.{g}.score"), 1, 0)?;
            let scores = self.tape.reshape(scores, &[n, h, w])?;
            let (attended, weights) = self.tape.softmax_attention_pool(v, scores)?;
            self.attention.push(weights);
            u = self.tape.add(attended, u)?;
        }
        self.mlp(u)
    }
}

impl Model {
    /// Builds a freshly initialized model.
    pub fn build(config: ModelConfig, vocab_size: usize, image_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(Error::ConfigInvalid(format!("vocabulary size {vocab_size} < 2")));
        }
        let [s3, s6] = spatial_ledger(image_size);
        if image_size < 4 || s6 < 1 {
            return Err(Error::ConfigInvalid(format!("image size {image_size} too small")));
        }
        debug_assert!(image_size != 64 || (s3 == 32 && s6 == 16));
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
            bn: &mut bn,
        };
        match &config {
            ModelConfig::Film(c) => {
                init.embedding(vocab_size, c.embed_dim);
                init.recurrent("gru", c.embed_dim, c.gru_hidden, 3, true);
                init.stem(c.cnn_channels);
                let coords = if c.use_coordinate_maps { 2 } else { 0 };
                for i in 0..RESBLOCKS {
                    let cin = if i == 0 { c.cnn_channels } else { c.resblock_channels } + coords;
                    init.conv(&format!("res.{i}.conv1"), cin, c.resblock_channels, 1, true);
                    init.conv(&format!("res.{i}.conv2"), c.resblock_channels, c.resblock_channels, 3, false);
                    init.batchnorm(&format!("res.{i}.bn"), c.resblock_channels, false);
                    // zero-initialized: γ = 1 + δ, β = 0 at start
                    init.zeros(format!("res.{i}.film.weight"), &[c.gru_hidden, 2 * c.resblock_channels]);
                    init.zeros(format!("res.{i}.film.bias"), &[2 * c.resblock_channels]);
                }
                init.conv("cls.conv", c.resblock_channels, c.proj_dim, 1, false);
                init.batchnorm("cls.bn", c.proj_dim, true);
                init.linear("cls.fc1", c.proj_dim, c.classifier_hidden);
                init.linear("cls.fc2", c.classifier_hidden, 2);
            }
            ModelConfig::CnnLstm(c) => {
                init.embedding(vocab_size, c.embed_dim);
                init.recurrent("lstm", c.embed_dim, c.lstm_hidden, 4, false);
                init.stem(c.cnn_channels);
                init.linear("mlp.fc1", c.cnn_channels + c.lstm_hidden, c.mlp_hidden);
                init.linear("mlp.fc2", c.mlp_hidden, 2);
            }
            ModelConfig::CnnLstmSa(c) => {
                init.embedding(vocab_size, c.embed_dim);
                init.recurrent("lstm", c.embed_dim, c.lstm_hidden, 4, false);
                init.stem(c.cnn_channels);
                init.conv("att.proj", c.cnn_channels, c.lstm_hidden, 1, true);
                for g in 0..c.glimpses {
                    init.conv(&format!("att.{g}.image"), c.lstm_hidden, c.attention_dim, 1, false);
                    init.linear(&format!("att.{g}.query"), c.lstm_hidden, c.attention_dim);
                    init.conv(&format!("att.{g}.score"), c.attention_dim, 1, 1, true);
                }
                init.linear("mlp.fc1", c.lstm_hidden, c.mlp_hidden);
                init.linear("mlp.fc2", c.mlp_hidden, 2);
            }
        }
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect::<HashMap<_, _>>();
        let bn_index = bn.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect::<HashMap<_, _>>();
        assert_eq!(index.len(), params.len(), "parameter names must be unique");
        Ok(Model {
            meta: ModelMeta {
                config,
                vocab_size,
                image_size,
            },
            params,
            index,
            bn,
            bn_index,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.meta.config.architecture()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.params.iter_mut().map(|(_, t)| t).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.len();
        let s = self.meta.image_size;
        let ok = n > 0
            && batch.image_height == s
            && batch.image_width == s
            && batch.images.len() == n * 3 * s * s
            && batch.tokens.len() == n * batch.max_len
            && batch.lengths.len() == n;
        if !ok {
            return Err(Error::shape("forward", format!("batch of {n} does not fit a {s}×{s} model")));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= self.meta.vocab_size) {
            return Err(Error::shape("forward", format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn run(&self, batch: &Batch, train: bool) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars = self.params.iter().map(|(_, t)| tape.leaf(t.clone(), train)).collect();
        let mut pass = Pass {
            model: self,
            tape,
            vars,
            bn: self.bn.iter().map(|(_, s)| s.clone()).collect(),
            train,
            attention: Vec::new(),
        };
        let s = self.meta.image_size;
        let images = pass
            .tape
            .constant(Tensor::new(vec![batch.len(), 3, s, s], batch.images.clone())?);
        let logits = match &self.meta.config {
            ModelConfig::Film(c) => pass.film(batch, images, c)?,
            ModelConfig::CnnLstm(_) => {
                let q = pass.question(batch)?;
                let f = pass.stem(images)?;
                pass.cnn_lstm_head(f, q)?
            }
            ModelConfig::CnnLstmSa(c) => {
                let q = pass.question(batch)?;
                let f = pass.stem(images)?;
                pass.stacked_attention(f, q, c)?
            }
        };
        if !pass.tape.value(logits).all_finite() {
            return Err(Error::NonFiniteActivation("logits"));
        }
        Ok(ForwardPass {
            tape: pass.tape,
            logits,
            params: pass.vars,
            attention: pass.attention,
            bn: pass.bn,
        })
    }

    /// Train-mode pass: batch statistics, running statistics updated,
    /// parameters recorded as differentiable leaves.
    pub fn forward_train(&mut self, batch: &Batch) -> Result<ForwardPass> {
        let pass = self.run(batch, true)?;
        for ((_, st), new) in self.bn.iter_mut().zip(&pass.bn) {
            *st = new.clone();
        }
        Ok(pass)
    }

    /// Eval-mode pass recorded on a tape (for attention maps and inspection).
    pub fn forward_eval(&self, batch: &Batch) -> Result<ForwardPass> {
        self.run(batch, false)
    }

    /// Eval-mode logits `[N, 2]`.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let pass = self.run(batch, false)?;
        Ok(pass.tape.value(pass.logits).clone())
    }

    /// Predicted labels (argmax, ties to "false").
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits.data().chunks(2).map(|r| usize::from(r[1] > r[0])).collect())
    }

    pub fn to_checkpoint(&self, optimizer: Option<&AdamState<f32>>) -> Checkpoint {
        let mut buffers = Vec::new();
        for (name, st) in &self.bn {
            let c = st.mean.len();
            buffers.push((format!("{name}.running_mean"), Tensor::new(vec![c], st.mean.clone()).expect("shape")));
            buffers.push((format!("{name}.running_var"), Tensor::new(vec![c], st.var.clone()).expect("shape")));
        }
        Checkpoint {
            metadata: serde_json::to_string(&self.meta).expect("metadata serializes"),
            params: self.params.clone(),
            buffers,
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds a model and its optimizer state from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState<f32>>)> {
        let meta: ModelMeta = serde_json::from_str(&ck.metadata)
            .map_err(|e| Error::CorruptCheckpoint(format!("model metadata: {e}")))?;
        let mut model = Model::build(meta.config, meta.vocab_size, meta.image_size, 0)?;
        let names = |v: &[(String, Tensor<f32>)]| v.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect::<Vec<_>>();
        if names(&ck.params) != names(&model.params) {
            return Err(Error::ArchitectureMismatch(
                "checkpoint parameters do not match the architecture in its metadata".into(),
            ));
        }
        model.params = ck.params.clone();
        let expected = model.to_checkpoint(None).buffers;
        if names(&ck.buffers) != names(&expected) {
            return Err(Error::ArchitectureMismatch("checkpoint buffers do not match the architecture".into()));
        }
        for (i, (_, st)) in model.bn.iter_mut().enumerate() {
            st.mean = ck.buffers[2 * i].1.data().to_vec();
            st.var = ck.buffers[2 * i + 1].1.data().to_vec();
        }
        Ok((model, ck.optimizer.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_film() -> FilmConfig {
        FilmConfig {
            cnn_channels: 4,
            resblock_channels: 4,
            embed_dim: 3,
            gru_hidden: 5,
            proj_dim: 6,
            classifier_hidden: 7,
            use_coordinate_maps: true,
        }
    }

    fn tiny_baseline() -> BaselineConfig {
        BaselineConfig {
            cnn_channels: 4,
            embed_dim: 3,
            lstm_hidden: 5,
            mlp_hidden: 6,
            glimpses: 2,
            attention_dim: 3,
        }
    }

    fn batch(n: usize, size: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_len = 4;
        Batch {
            images: (0..n * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
            image_height: size,
            image_width: size,
            tokens: (0..n * max_len).map(|_| rng.gen_range(2..9)).collect(),
            max_len,
            lengths: (0..n).map(|_| rng.gen_range(1..=max_len)).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
            indices: (0..n).collect(),
        }
    }

    #[test]
    fn ledger_for_64() {
        assert_eq!(spatial_ledger(64), [32, 16]);
    }

    #[test]
    fn feature_maps_are_16x16() {
        let m = Model::build(ModelConfig::Film(tiny_film()), 10, 64, 0).unwrap();
        let pass = m.forward_eval(&batch(1, 64, 0)).unwrap();
        let has = |shape: &[usize]| (0..pass.tape.len()).any(|i| pass.tape.value(Var(i)).shape() == shape);
        assert!(has(&[1, 4, 16, 16]));
        assert!(!has(&[1, 4, 8, 8]));
        assert_eq!(m.param("res.0.film.weight").unwrap().shape(), [5, 8]);
    }

    #[test]
    fn zero_heads_ignore_caption() {
        let m = Model::build(ModelConfig::Film(tiny_film()), 10, 16, 3).unwrap();
        let a = batch(2, 16, 1);
        let mut b = a.clone();
        b.tokens.iter_mut().for_each(|t| *t = 9 - (*t % 7));
        assert_eq!(m.forward(&a).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn nonzero_heads_use_caption() {
        let mut m = Model::build(ModelConfig::Film(tiny_film()), 10, 16, 3).unwrap();
        for i in 0..RESBLOCKS {
            let w = m.param_mut(&format!("res.{i}.film.weight")).unwrap();
            w.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = ((j % 5) as f32 - 2.0) * 0.3);
        }
        let a = batch(1, 16, 1);
        let mut b = a.clone();
        b.tokens = vec![2, 3, 4, 5];
        b.lengths = vec![4];
        let mut a2 = a.clone();
        a2.tokens = vec![8, 7, 6, 5];
        a2.lengths = vec![4];
        assert_ne!(m.forward(&a2).unwrap(), m.forward(&b).unwrap());
    }

    #[test]
    fn identical_rows_identical_logits() {
        for cfg in [
            ModelConfig::Film(tiny_film()),
            ModelConfig::CnnLstm(tiny_baseline()),
            ModelConfig::CnnLstmSa(tiny_baseline()),
        ] {
            let m = Model::build(cfg, 10, 16, 0).unwrap();
            let one = batch(1, 16, 5);
            let mut three = one.clone();
            for _ in 0..2 {
                three.images.extend_from_slice(&one.images);
                three.tokens.extend_from_slice(&one.tokens);
                three.lengths.push(one.lengths[0]);
                three.labels.push(0);
                three.indices.push(0);
            }
            let l = m.forward(&three).unwrap();
            assert_eq!(l.shape(), [3, 2]);
            assert_eq!(&l.data()[0..2], &l.data()[2..4]);
            assert_eq!(&l.data()[0..2], &l.data()[4..6]);
            assert_eq!(l, m.forward(&three).unwrap());
        }
    }

    #[test]
    fn black_images_finite() {
        let m = Model::build(ModelConfig::Film(tiny_film()), 10, 16, 0).unwrap();
        let mut b = batch(2, 16, 0);
        b.images.iter_mut().for_each(|v| *v = 0.0);
        assert!(m.forward(&b).unwrap().all_finite());
    }

    #[test]
    fn attention_sums_to_one() {
        let m = Model::build(ModelConfig::CnnLstmSa(tiny_baseline()), 10, 16, 0).unwrap();
        let pass = m.forward_eval(&batch(3, 16, 2)).unwrap();
        assert_eq!(pass.attention.len(), 2);
        for &a in &pass.attention {
            for row in pass.tape.value(a).data().chunks(16) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn avg_pool_head_ignores_permutation() {
        let m = Model::build(ModelConfig::CnnLstm(tiny_baseline()), 10, 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats: Vec<f32> = (0..2 * 4 * 9).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let mut permuted = feats.clone();
        for chunk in permuted.chunks_mut(9) {
            chunk.reverse();
            chunk.swap(0, 4);
        }
        let head = |data: Vec<f32>| {
            let mut pass = Pass {
                model: &m,
                tape: Tape::new(),
                vars: Vec::new(),
                bn: Vec::new(),
                train: false,
                attention: Vec::new(),
            };
            pass.vars = m.params.iter().map(|(_, t)| pass.tape.constant(t.clone())).collect();
            let f = pass.tape.constant(Tensor::new(vec![2, 4, 3, 3], data).unwrap());
            let q = pass.tape.constant(Tensor::full(&[2, 5], 0.25));
            let l = pass.cnn_lstm_head(f, q).unwrap();
            pass.tape.value(l).clone()
        };
        let (a, b) = (head(feats), head(permuted));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn parameter_count_properties() {
        let count = |c: FilmConfig| Model::build(ModelConfig::Film(c), 10, 16, 0).unwrap().parameter_count();
        let base = tiny_film();
        let wider = FilmConfig {
            gru_hidden: 10,
            ..base.clone()
        };
        assert!(count(wider) > count(base.clone()));
        assert_eq!(count(base.clone()), count(base.clone()));
        let m = Model::build(ModelConfig::Film(base), 10, 16, 0).unwrap();
        assert_eq!(m.parameter_count(), m.params().iter().map(|(_, t)| t.numel()).sum::<usize>());
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let mut m = Model::build(ModelConfig::CnnLstmSa(tiny_baseline()), 10, 16, 4).unwrap();
        let b = batch(2, 16, 3);
        m.forward_train(&b).unwrap();
        let ck = m.to_checkpoint(None);
        let bytes = ck.to_bytes();
        let (back, _) = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.forward(&b).unwrap(), m.forward(&b).unwrap());
        assert_eq!(back.to_checkpoint(None).to_bytes(), bytes);
    }

    #[test]
    fn config_validation() {
        let bad = BaselineConfig {
            glimpses: 0,
            ..tiny_baseline()
        };
        assert!(matches!(
            Model::build(ModelConfig::CnnLstmSa(bad), 10, 16, 0),
            Err(Error::ConfigInvalid(_))
        ));
        assert!(Model::build(ModelConfig::Film(tiny_film()), 1, 16, 0).is_err());
        let json = r#"{"architecture":"film","cnn_channels":8}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg, ModelConfig::Film(FilmConfig { cnn_channels: 8, ..FilmConfig::default() }));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"architecture":"film","bogus":1}"#).is_err());
    }
}
