//! The projection network and its relation-score head.
//!
//! Inputs are centered by [`INPUT_MEAN`], then pass through three layers: two
//! 3x3 convolutions with ReLU and a 1x1 convolution into the embedding space.
//! Each pixel's feature is scored against every class embedding by inner
//! product and the scores are softmax-normalized over the whole vocabulary.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{read_checked, read_json, write_checked, write_json, CHANNELS};
use crate::embeddings::{EmbeddingTable, SplitSpec};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, ParamVars, Tape, Tensor, Var};

/// Subtracted from every input channel before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_channels: usize,
    pub output_dim: usize,
    pub init_seed: u64,
}

impl NetConfig {
    pub fn new(output_dim: usize, init_seed: u64) -> Self {
        NetConfig {
            hidden_channels: 16,
            output_dim,
            init_seed,
        }
    }

    /// `(name, kernel size, input channels, output channels)` per layer.
    fn layers(&self) -> [(&'static str, usize, usize, usize); 3] {
        let h = self.hidden_channels;
        [
            ("conv1", 3, CHANNELS, h),
            ("conv2", 3, h, h),
            ("proj", 1, h, self.output_dim),
        ]
    }
}

/// He-scaled Gaussian kernels (`sqrt(2 / fan_in)`), zero biases.
pub fn init_net(config: &NetConfig) -> Result<ParamSet> {
    if config.hidden_channels == 0 || config.output_dim == 0 {
        return Err(Error::invalid(
            "hidden_channels and output_dim must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut params = ParamSet::new();
    for (name, k, cin, cout) in config.layers() {
        let scale = (2.0 / (k * k * cin) as f64).sqrt();
        let kernel = Tensor::from_fn(&[k, k, cin, cout], |_| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        params.insert(format!("{name}.kernel"), kernel);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
    Ok(params)
}

/// Records `params` as constants, for inference without gradients.
pub fn bind_frozen(params: &ParamSet, tape: &mut Tape) -> ParamVars {
    params
        .iter()
        .map(|(name, t)| (name.clone(), tape.input(t.clone())))
        .collect()
}

fn lookup(params: &ParamVars, name: &str) -> Result<Var> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
}

/// Maps an `HxWx3` (or batched `BxHxWx3`) image to an `HxWxd` feature field.
pub fn forward(tape: &mut Tape, params: &ParamVars, image: Var) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if !(shape.len() == 3 || shape.len() == 4) || shape.last() != Some(&CHANNELS) {
        return Err(Error::shape(format!(
            "expected an HxWx{CHANNELS} image, got {shape:?}"
        )));
    }
    // Mean-pixel subtraction; zero padding then matches the mean color.
    let mean = tape.input(Tensor::full(&shape, -INPUT_MEAN));
    let mut x = tape.add(image, mean)?;
    for (i, layer) in ["conv1", "conv2", "proj"].into_iter().enumerate() {
        let k = lookup(params, &format!("{layer}.kernel"))?;
        let b = lookup(params, &format!("{layer}.bias"))?;
        x = tape.conv2d(x, k, b)?;
        if i < 2 {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Per-pixel inner products with every class embedding.
pub fn relation_logits(tape: &mut Tape, features: Var, table: &EmbeddingTable) -> Result<Var> {
    tape.relation(features, table.shared_matrix())
}

/// Softmax over the full class vocabulary at every pixel.
pub fn pixel_softmax(tape: &mut Tape, logits: Var) -> Var {
    tape.softmax(logits)
}

/// Image to probability map in one call.
pub fn probabilities(
    tape: &mut Tape,
    params: &ParamVars,
    image: Var,
    table: &EmbeddingTable,
) -> Result<Var> {
    let features = forward(tape, params, image)?;
    let logits = relation_logits(tape, features, table)?;
    Ok(pixel_softmax(tape, logits))
}

/// Probability map of one image, without recording gradients.
pub fn infer_probs(params: &ParamSet, image: &Tensor, table: &EmbeddingTable) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind_frozen(params, &mut tape);
    let x = tape.input(image.clone());
    let p = probabilities(&mut tape, &vars, x, table)?;
    Ok(tape.value(p).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// Argmax over every class.
    Generalized,
    /// Argmax over unseen classes and background.
    Conventional,
}

impl std::str::FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generalized" => Ok(PredictMode::Generalized),
            "conventional" => Ok(PredictMode::Conventional),
            other => Err(Error::invalid(format!(
                "unknown evaluation mode `{other}` (expected generalized|conventional)"
            ))),
        }
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn predict(probs: &Tensor, mode: PredictMode, split: &SplitSpec) -> Vec<u16> {
    let n = probs.last_dim();
    let allowed: Vec<bool> = (0..n)
        .map(|c| match mode {
            PredictMode::Generalized => true,
            PredictMode::Conventional => c == 0 || split.is_unseen(c),
        })
        .collect();
    probs
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = usize::MAX;
            for (c, &p) in row.iter().enumerate() {
                if allowed[c] && (best == usize::MAX || p > row[best]) {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    net: NetConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json` plus one little-endian `f64` file per tensor.
pub fn save_checkpoint(config: &NetConfig, params: &ParamSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let file = format!("{name}.f64");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let sha256 = write_checked(&dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
            sha256,
        });
    }
    write_json(
        &dir.join("manifest.json"),
        &CheckpointManifest {
            net: *config,
            tensors,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetConfig, ParamSet)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let mut params = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = read_checked(&dir.join(&e.file), n * 8, &e.sha256)?;
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    let expected = init_net(&manifest.net)?;
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(Error::shape(format!(
                    "checkpoint tensor `{name}` is missing or misshapen"
                )))
            }
        }
    }
    Ok((manifest.net, params))
}
