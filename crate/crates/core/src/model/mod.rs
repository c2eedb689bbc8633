//! Prompt-conditioned encoder-decoder segmentation model.
//!
//! The trunk is computed once per image; any number of prompted heads can
//! then be evaluated on the same decoder output. The head's weights are
//! produced per image by a linear generator applied to the pooled bottleneck
//! embedding concatenated with the one-hot task prompt.

mod checkpoint;
mod network;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use network::{head_param_count, HeadTrace, ModelConfig, Network, TrunkTrace};
pub use optim::{Adam, AdamConfig};

use sha2::{Digest, Sha256};

use crate::data::{Shape3, Volume};
use crate::error::{ensure, Result};
use crate::nn::Feature;
use crate::tasks::PromptVector;

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub network: Network<f32>,
    pub optimizer: Adam,
    pub step: u64,
}

pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    let network = Network::init(config)?;
    let optimizer = Adam::new(network.n_params(), AdamConfig::default());
    Ok(ModelState {
        network,
        optimizer,
        step: 0,
    })
}

impl ModelState {
    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn n_params(&self) -> usize {
        self.network.n_params()
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        params_checksum(self.network.params())
    }

    pub fn all_finite(&self) -> bool {
        self.network.params().iter().all(|p| p.is_finite())
    }
}

pub fn params_checksum(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Intermediate features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub bottleneck: Feature<f32>,
    pub decoded: Feature<f32>,
    pub pooled: Vec<f32>,
}

/// Generated head weights for one (image, prompt) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams(pub Vec<f32>);

impl KernelParams {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-voxel background/foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    shape: Shape3,
    background: Vec<f32>,
    foreground: Vec<f32>,
}

impl ProbMap {
    pub fn new(shape: Shape3, background: Vec<f32>, foreground: Vec<f32>) -> Result<Self> {
        ensure!(
            background.len() == shape.len() && foreground.len() == shape.len(),
            "probability channels do not match shape {shape}"
        );
        Ok(Self {
            shape,
            background,
            foreground,
        })
    }

    /// Two-channel map from foreground probabilities alone.
    pub fn from_foreground(shape: Shape3, foreground: Vec<f32>) -> Result<Self> {
        let background = foreground.iter().map(|p| 1.0 - p).collect();
        Self::new(shape, background, foreground)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn foreground(&self) -> &[f32] {
        &self.foreground
    }

    pub fn background(&self) -> &[f32] {
        &self.background
    }

    pub(crate) fn from_head<T: crate::nn::Real>(shape: Shape3, h: &HeadTrace<T>) -> Self {
        Self {
            shape,
            background: h.background.iter().map(|v| v.f64() as f32).collect(),
            foreground: h.foreground.iter().map(|v| v.f64() as f32).collect(),
        }
    }
}

pub(crate) fn volume_feature(v: &Volume) -> Feature<f32> {
    Feature::new(1, v.shape(), v.voxels().to_vec())
}

pub(crate) fn volume_feature_as<T: crate::nn::Real>(v: &Volume) -> Feature<T> {
    Feature::new(1, v.shape(), v.voxels().iter().map(|&x| T::of(f64::from(x))).collect())
}

fn check_prompt(config: &ModelConfig, prompt: &PromptVector) -> Result<()> {
    ensure!(
        prompt.len() == config.prompt_dim,
        "prompt length {} != model prompt_dim {}",
        prompt.len(),
        config.prompt_dim
    );
    Ok(())
}

pub fn extract_features(state: &ModelState, batch: &[Volume]) -> Result<Vec<FeatureBundle>> {
    batch
        .iter()
        .map(|v| {
            state.config().check_input(v.shape())?;
            let t = state.network.trunk_forward(&volume_feature(v));
            Ok(FeatureBundle {
                bottleneck: t.bottleneck,
                decoded: t.decoded,
                pooled: t.pooled,
            })
        })
        .collect()
}

pub fn generate_kernels(state: &ModelState, pooled: &[f32], prompt: &PromptVector) -> Result<KernelParams> {
    let c = state.config();
    check_prompt(c, prompt)?;
    ensure!(
        pooled.len() == c.embed_dim(),
        "pooled embedding has {} entries, expected {}",
        pooled.len(),
        c.embed_dim()
    );
    Ok(KernelParams(state.network.generate_kernel(pooled, prompt.values()).0))
}

/// Prompted prediction for every volume in the batch.
pub fn forward(state: &ModelState, batch: &[Volume], prompt: &PromptVector) -> Result<Vec<ProbMap>> {
    check_prompt(state.config(), prompt)?;
    batch
        .iter()
        .map(|v| {
            state.config().check_input(v.shape())?;
            let t = state.network.trunk_forward(&volume_feature(v));
            let h = state.network.head_forward(&t.decoded, &t.pooled, prompt.values());
            Ok(ProbMap::from_head(v.shape(), &h))
        })
        .collect()
}

/// Predictions for several prompts sharing one trunk pass per volume.
pub fn forward_prompts(state: &ModelState, volume: &Volume, prompts: &[PromptVector]) -> Result<Vec<ProbMap>> {
    state.config().check_input(volume.shape())?;
    for p in prompts {
        check_prompt(state.config(), p)?;
    }
    let t = state.network.trunk_forward(&volume_feature(volume));
    Ok(prompts
        .iter()
        .map(|p| ProbMap::from_head(volume.shape(), &state.network.head_forward(&t.decoded, &t.pooled, p.values())))
        .collect())
}
