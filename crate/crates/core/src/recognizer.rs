//! Action-token temporal transformer.
//!
//! Each sampled frame becomes a token: the 189 pose coordinates and the
//! object-class one-hot, linearly projected to the model width. A learnable
//! action token is prepended, learned positional embeddings are added to all
//! `N + 1` slots, `L` pre-norm encoder layers run, and an MLP on the final
//! position-0 output produces the action logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{gaussian, Bound, EncoderLayer, LayerNorm, Linear, ParamId, ParamStore};
use crate::scene::{FramePose, POSE_DIM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    /// Frame tokens per video.
    pub n_frames: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub n_object_classes: usize,
    pub n_actions: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            n_frames: 64,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            layers: 3,
            n_object_classes: 4,
            n_actions: 8,
        }
    }
}

impl RecognizerConfig {
    pub fn token_input_dim(&self) -> usize {
        POSE_DIM + self.n_object_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.n_actions == 0 || self.n_object_classes == 0 {
            return Err(Error::Config("recognizer sizes must be >= 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "recognizer dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Pose coordinates followed by the object-class one-hot.
pub fn token_input(pose: &FramePose, n_object_classes: usize) -> Result<Vec<f64>> {
    let class = pose.object.class_id;
    if class >= n_object_classes {
        return Err(Error::InvalidArgument(format!(
            "object class {class} of {n_object_classes}"
        )));
    }
    let mut v = pose.to_flat();
    v.extend((0..n_object_classes).map(|c| if c == class { 1.0 } else { 0.0 }));
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct ActionRecognizer {
    pub config: RecognizerConfig,
    pub params: ParamStore,
    token_proj: Linear,
    action_token: ParamId,
    pos_embed: ParamId,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    head_hidden: Linear,
    head_out: Linear,
}

impl ActionRecognizer {
    pub fn new(config: RecognizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let token_proj = Linear::new(&mut store, &mut rng, "token_proj", config.token_input_dim(), d);
        let action_token = store.add("action_token", gaussian(&mut rng, 1, d, 0.02));
        let pos_embed = store.add("pos_embed", gaussian(&mut rng, config.n_frames + 1, d, 0.02));
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut store, &mut rng, &format!("layers.{i}"), d, config.heads, config.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "norm", d);
        let head_hidden = Linear::new(&mut store, &mut rng, "head.0", d, d);
        let head_out = Linear::new(&mut store, &mut rng, "head.1", d, config.n_actions);
        Ok(ActionRecognizer {
            config,
            params: store,
            token_proj,
            action_token,
            pos_embed,
            layers,
            norm,
            head_hidden,
            head_out,
        })
    }

    pub fn pos_embed_param(&self) -> ParamId {
        self.pos_embed
    }

    pub fn token_proj_param(&self) -> (ParamId, ParamId) {
        (self.token_proj.weight, self.token_proj.bias)
    }

    /// `poses.len() × dim` frame tokens.
    pub fn tokenize(&self, g: &mut Graph, p: &Bound, poses: &[FramePose]) -> Result<Var> {
        if poses.is_empty() {
            return Err(Error::Empty("frame poses"));
        }
        let rows = poses
            .iter()
            .map(|pose| token_input(pose, self.config.n_object_classes))
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant(Tensor::from_rows(&rows)?);
        self.token_proj.forward(g, p, x)
    }

    /// `1 × K_act` logits from exactly `N` frame tokens.
    pub fn forward_tokens(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        let n = g.value(tokens).rows();
        if n != self.config.n_frames {
            return Err(Error::Shape(format!(
                "recognizer expects {} frame tokens, got {n}",
                self.config.n_frames
            )));
        }
        let seq = g.concat_rows(&[p.var(self.action_token), tokens])?;
        let mut x = g.add(seq, p.var(self.pos_embed))?;
        for layer in &self.layers {
            x = layer.forward(g, p, x)?;
        }
        let x = self.norm.forward(g, p, x)?;
        let cls = g.select_rows(x, &[0])?;
        let h = self.head_hidden.forward(g, p, cls)?;
        let h = g.gelu(h);
        self.head_out.forward(g, p, h)
    }

    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, poses: &[FramePose]) -> Result<Var> {
        let tokens = self.tokenize(g, p, poses)?;
        self.forward_tokens(g, p, tokens)
    }

    /// Inference over frozen parameters.
    pub fn logits(&self, poses: &[FramePose]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, poses)?;
        Ok(g.value(out).data().to_vec())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, SceneConfig};

    fn small() -> RecognizerConfig {
        RecognizerConfig {
            n_frames: 6,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            layers: 2,
            ..RecognizerConfig::default()
        }
    }

    fn poses(n: usize) -> Vec<FramePose> {
        let v = generate_video(2, 11, &SceneConfig::default()).unwrap();
        v.frames.iter().step_by(7).take(n).cloned().collect()
    }

    #[test]
    fn token_input_dim() {
        let p = &poses(1)[0];
        assert_eq!(token_input(p, 4).unwrap().len(), 193);
        assert_eq!(RecognizerConfig::default().token_input_dim(), 193);
    }

    #[test]
    fn sequence_length_includes_action_token() {
        let rec = ActionRecognizer::new(RecognizerConfig::default(), 0).unwrap();
        assert_eq!(rec.params.get(rec.pos_embed).rows(), 65);
    }

    #[test]
    fn wrong_length_is_error() {
        let rec = ActionRecognizer::new(small(), 0).unwrap();
        assert!(rec.logits(&poses(5)).is_err());
        assert_eq!(rec.logits(&poses(6)).unwrap().len(), 8);
    }

    #[test]
    fn zero_projection_gives_zero_tokens() {
        let mut rec = ActionRecognizer::new(small(), 0).unwrap();
        let (w, b) = rec.token_proj_param();
        rec.params.get_mut(w).data_mut().fill(0.0);
        rec.params.get_mut(b).data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = rec.params.bind(&mut g, false);
        let t = rec.tokenize(&mut g, &p, &poses(3)).unwrap();
        assert!(g.value(t).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
