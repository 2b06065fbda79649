//! The full classifier: two CNN backbones (audio, video), a sequence head
//! per modality, late fusion, and a three-layer classifier.
//!
//! Both modalities always use the same head kind. LSTM/GRU heads summarize
//! with the last hidden state (128 units), the transformer head with a
//! global max over encoded timesteps (64 units), and the max-over-time
//! variant pools the raw 32-dim CNN vectors directly, skipping the
//! embedding affine.

pub mod backbone;
mod checkpoint;
pub mod heads;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::AudioFeatureTensor;
use crate::autograd::{self, AdamState, ParamId, ParamStore, Tape, TensorRef};
use crate::video::VideoFeatureTensor;
use crate::NUM_CLASSES;

pub use backbone::Backbone;
pub use checkpoint::{load_checkpoint, save_checkpoint, write_sidecar_manifest, CheckpointError};
pub use heads::{build_head, head_names, HeadKind, SequenceHead, HEAD_REGISTRY};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// CNN backbone dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { conv_layers: 3, filters: 32, kernel: 3, embed_dim: 64 }
    }
}

/// Sequence-head dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    pub recurrent_hidden: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub attn_heads: usize,
    pub layers: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { recurrent_hidden: 128, d_model: 64, ffn_hidden: 64, attn_heads: 4, layers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub num_classes: usize,
    pub fc1_dim: usize,
    pub fc2_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Paper-default dimensions for the given head kind.
    pub fn canonical(head: HeadKind, seed: u64) -> Self {
        Self {
            head,
            backbone: BackboneConfig::default(),
            heads: HeadConfig::default(),
            num_classes: NUM_CLASSES,
            fc1_dim: 128,
            fc2_dim: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.backbone.conv_layers == 0 || self.backbone.filters == 0 || self.backbone.embed_dim == 0 {
            return err("backbone dimensions must be positive".into());
        }
        if self.backbone.kernel % 2 == 0 || self.backbone.kernel == 0 {
            return err(format!("kernel must be odd, got {}", self.backbone.kernel));
        }
        if self.heads.recurrent_hidden == 0 || self.heads.ffn_hidden == 0 || self.heads.layers == 0 {
            return err("head dimensions must be positive".into());
        }
        if self.heads.d_model % self.heads.attn_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by {} attention heads",
                self.heads.d_model, self.heads.attn_heads
            ));
        }
        if self.head == HeadKind::Transformer && self.heads.d_model != self.backbone.embed_dim {
            return err(format!(
                "transformer d_model {} must equal embed_dim {}",
                self.heads.d_model, self.backbone.embed_dim
            ));
        }
        if self.num_classes < 2 {
            return err("need at least two classes".into());
        }
        Ok(())
    }

    /// Key=value view used by checkpoints and the run config.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let s = |v: usize| v.to_string();
        vec![
            ("head".into(), self.head.name().into()),
            ("num_classes".into(), s(self.num_classes)),
            ("conv_layers".into(), s(self.backbone.conv_layers)),
            ("filters".into(), s(self.backbone.filters)),
            ("kernel".into(), s(self.backbone.kernel)),
            ("embed_dim".into(), s(self.backbone.embed_dim)),
            ("recurrent_hidden".into(), s(self.heads.recurrent_hidden)),
            ("transformer_d_model".into(), s(self.heads.d_model)),
            ("transformer_ffn_hidden".into(), s(self.heads.ffn_hidden)),
            ("transformer_heads".into(), s(self.heads.attn_heads)),
            ("transformer_layers".into(), s(self.heads.layers)),
            ("fc1_dim".into(), s(self.fc1_dim)),
            ("fc2_dim".into(), s(self.fc2_dim)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| ModelError::InvalidConfig(format!("{key}: bad number {v:?}")))
        };
        match key {
            "head" => {
                self.head = HeadKind::parse(value).ok_or_else(|| {
                    ModelError::InvalidConfig(format!(
                        "unknown head {value:?}; valid heads: {}",
                        head_names().join(", ")
                    ))
                })?;
            }
            "num_classes" => self.num_classes = parse_usize(value)?,
            "conv_layers" => self.backbone.conv_layers = parse_usize(value)?,
            "filters" => self.backbone.filters = parse_usize(value)?,
            "kernel" => self.backbone.kernel = parse_usize(value)?,
            "embed_dim" => self.backbone.embed_dim = parse_usize(value)?,
            "recurrent_hidden" => self.heads.recurrent_hidden = parse_usize(value)?,
            "transformer_d_model" => self.heads.d_model = parse_usize(value)?,
            "transformer_ffn_hidden" => self.heads.ffn_hidden = parse_usize(value)?,
            "transformer_heads" => self.heads.attn_heads = parse_usize(value)?,
            "transformer_layers" => self.heads.layers = parse_usize(value)?,
            "fc1_dim" => self.fc1_dim = parse_usize(value)?,
            "fc2_dim" => self.fc2_dim = parse_usize(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| ModelError::InvalidConfig(format!("seed: bad number {value:?}")))?;
            }
            other => return Err(ModelError::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

/// Uniform Glorot-style initialization.
pub(crate) fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Backbones + heads + fusion classifier with its parameter store and
/// optimizer state.
pub struct EmotionModel {
    cfg: ModelConfig,
    store: ParamStore,
    audio_backbone: Backbone,
    video_backbone: Backbone,
    audio_head: Box<dyn SequenceHead>,
    video_head: Box<dyn SequenceHead>,
    post_fusion: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    fc3: (ParamId, ParamId),
    adam: AdamState,
}

impl EmotionModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let with_embed = cfg.head != HeadKind::MaxpoolTime;

        let audio_backbone = Backbone::new(&mut store, "audio", &cfg.backbone, with_embed, &mut rng);
        let video_backbone = Backbone::new(&mut store, "video", &cfg.backbone, with_embed, &mut rng);
        let head_in = audio_backbone.output_dim();
        let audio_head = build_head(cfg.head, &mut store, "audio", head_in, &cfg.heads, &mut rng);
        let video_head = build_head(cfg.head, &mut store, "video", head_in, &cfg.heads, &mut rng);

        let fused_dim = audio_head.output_dim() + video_head.output_dim();
        let affine = |store: &mut ParamStore, name: &str, di: usize, dout: usize, rng: &mut ChaCha8Rng| {
            (
                store.add_param(&format!("{name}.w"), vec![di, dout], glorot_uniform(rng, di, dout, di * dout)),
                store.add_param(&format!("{name}.b"), vec![dout], vec![0.0; dout]),
            )
        };
        let post_fusion = affine(&mut store, "fusion", fused_dim, cfg.fc1_dim, &mut rng);
        let fc1 = affine(&mut store, "fc1", cfg.fc1_dim, cfg.fc1_dim, &mut rng);
        let fc2 = affine(&mut store, "fc2", cfg.fc1_dim, cfg.fc2_dim, &mut rng);
        let fc3 = affine(&mut store, "fc3", cfg.fc2_dim, cfg.num_classes, &mut rng);

        let adam = AdamState::new(&store, autograd::adam::DEFAULT_LR);
        Ok(Self {
            cfg,
            store,
            audio_backbone,
            video_backbone,
            audio_head,
            video_head,
            post_fusion,
            fc1,
            fc2,
            fc3,
            adam,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head_kind(&self) -> HeadKind {
        self.cfg.head
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Exact count of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Forward pass over raw feature leaves: `audio: t x h x w x 1`,
    /// `video: t x h x w x 1`. Returns `1 x num_classes` logits (softmax is
    /// applied inside the loss and in [`EmotionModel::predict`]).
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        audio: TensorRef,
        video: TensorRef,
        train: bool,
    ) -> autograd::Result<TensorRef> {
        let a_seq = self.audio_backbone.forward(tape, &mut self.store, audio, train)?;
        let v_seq = self.video_backbone.forward(tape, &mut self.store, video, train)?;
        let a_vec = self.audio_head.forward(tape, &self.store, a_seq)?;
        let v_vec = self.video_head.forward(tape, &self.store, v_seq)?;
        let fused = tape.concat(&[a_vec, v_vec], 1)?;

        let mut cur = fused;
        for &(w, b) in [&self.post_fusion, &self.fc1, &self.fc2].into_iter() {
            let wl = tape.param(&self.store, w);
            let bl = tape.param(&self.store, b);
            let lin = tape.linear(cur, wl, bl)?;
            cur = tape.relu(lin)?;
        }
        let wl = tape.param(&self.store, self.fc3.0);
        let bl = tape.param(&self.store, self.fc3.1);
        tape.linear(cur, wl, bl)
    }

    /// Forward pass for one clip's cached features.
    pub fn forward_clip(
        &mut self,
        tape: &mut Tape,
        audio: &AudioFeatureTensor,
        video: &VideoFeatureTensor,
        train: bool,
    ) -> autograd::Result<TensorRef> {
        let [wins, rows, cols] = audio.shape();
        let a = tape.leaf(vec![wins, rows, cols, 1], audio.values().to_vec())?;
        let v = tape.leaf(video.shape().to_vec(), video.values().to_vec())?;
        self.forward(tape, a, v, train)
    }

    /// Eval-mode prediction: argmax class plus softmax probabilities.
    pub fn predict(
        &mut self,
        audio: &AudioFeatureTensor,
        video: &VideoFeatureTensor,
    ) -> autograd::Result<(usize, Vec<f64>)> {
        let mut tape = Tape::new_inference();
        let logits = self.forward_clip(&mut tape, audio, video, false)?;
        let probs_ref = tape.softmax(logits)?;
        let probs = tape.values(probs_ref).to_vec();
        let label = argmax(&probs);
        Ok((label, probs))
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }

    pub fn adam_step(&mut self) -> autograd::Result<()> {
        self.adam.step(&mut self.store)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
