//! Set-prediction keypoint estimator.
//!
//! A grid is cut into patches, linearly embedded with learned 2-D position
//! embeddings, and encoded by a transformer encoder. `Q` learned query
//! embeddings pass through a transformer decoder (self-attention, then
//! cross-attention to the encoder memory). Every decoder output feeds a
//! linear class head over `left, right, K_obj objects, no-entity` and a
//! 3-layer MLP keypoint head whose 63 outputs go through a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{gaussian, Bound, DecoderLayer, EncoderLayer, LayerNorm, Linear, ParamId, ParamStore};
use crate::render::{extract_patches, ObservationGrid};
use crate::scene::{FramePose, ENTITY_DIM, JOINTS};
use crate::tensor::{softmax, Tensor};

pub const LEFT_CLASS: usize = 0;
pub const RIGHT_CLASS: usize = 1;
pub const FIRST_OBJECT_CLASS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub patch_size: usize,
    pub grid_channels: usize,
    pub grid_size: usize,
    pub n_object_classes: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            n_queries: 12,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 3,
            decoder_layers: 3,
            patch_size: 8,
            grid_channels: 3,
            grid_size: 48,
            n_object_classes: 4,
        }
    }
}

impl EstimatorConfig {
    /// `left, right, objects…, no-entity`.
    pub fn n_classes(&self) -> usize {
        2 + self.n_object_classes + 1
    }

    pub fn no_entity_class(&self) -> usize {
        self.n_classes() - 1
    }

    pub fn n_patches(&self) -> usize {
        let side = self.grid_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.grid_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.grid_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "grid {} not divisible by patch {}",
                self.grid_size, self.patch_size
            )));
        }
        if self.n_queries < 3 {
            return Err(Error::Config("estimator needs at least 3 queries".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "estimator dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("estimator needs a decoder layer".into()));
        }
        Ok(())
    }
}

/// One query's output.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPrediction {
    pub class_logits: Vec<f64>,
    /// 63 values in `(0, 1)`, 21 points × (x, y, z).
    pub keypoints: Vec<f64>,
}

impl QueryPrediction {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.class_logits).expect("non-empty logits")
    }
}

/// Exactly `Q` predictions from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPredictionSet {
    pub predictions: Vec<QueryPrediction>,
}

impl QueryPredictionSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn from_values(logits: &Tensor, keypoints: &Tensor) -> Self {
        let predictions = (0..logits.rows())
            .map(|q| QueryPrediction {
                class_logits: logits.row(q).to_vec(),
                keypoints: keypoints.row(q).to_vec(),
            })
            .collect();
        QueryPredictionSet { predictions }
    }

    /// Reorders queries: output `i` is input `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        QueryPredictionSet {
            predictions: order.iter().map(|&i| self.predictions[i].clone()).collect(),
        }
    }
}

/// Graph handles for the head outputs of every decoder layer, last layer
/// last.
pub struct EstimatorOutputs {
    pub logits: Vec<Var>,
    pub keypoints: Vec<Var>,
}

impl EstimatorOutputs {
    pub fn final_logits(&self) -> Var {
        *self.logits.last().expect("at least one decoder layer")
    }

    pub fn final_keypoints(&self) -> Var {
        *self.keypoints.last().expect("at least one decoder layer")
    }
}

#[derive(Clone, Debug)]
pub struct KeypointEstimator {
    pub config: EstimatorConfig,
    pub params: ParamStore,
    patch_embed: Linear,
    pos_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    class_head: Linear,
    kp_head: [Linear; 3],
}

impl KeypointEstimator {
    pub fn new(config: EstimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let patch_embed = Linear::new(&mut store, &mut rng, "patch_embed", config.patch_dim(), d);
        let pos_embed = store.add("pos_embed", gaussian(&mut rng, config.n_patches(), d, 0.02));
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                EncoderLayer::new(&mut store, &mut rng, &format!("encoder.{i}"), d, config.heads, config.ffn_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "encoder.norm", d);
        let queries = store.add("queries", gaussian(&mut rng, config.n_queries, d, 1.0));
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(&mut store, &mut rng, &format!("decoder.{i}"), d, config.heads, config.ffn_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let class_head = Linear::new(&mut store, &mut rng, "class_head", d, config.n_classes());
        let kp_head = [
            Linear::new(&mut store, &mut rng, "kp_head.0", d, d),
            Linear::new(&mut store, &mut rng, "kp_head.1", d, d),
            Linear::new(&mut store, &mut rng, "kp_head.2", d, ENTITY_DIM),
        ];
        Ok(KeypointEstimator {
            config,
            params: store,
            patch_embed,
            pos_embed,
            encoder,
            encoder_norm,
            queries,
            decoder,
            decoder_norm,
            class_head,
            kp_head,
        })
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Patch tokens plus position embeddings, `n_patches × dim`.
    pub fn embed_grid(&self, g: &mut Graph, p: &Bound, grid: &ObservationGrid) -> Result<Var> {
        let (c, h, w) = grid.dims();
        if c != self.config.grid_channels || h != self.config.grid_size || w != self.config.grid_size {
            return Err(Error::Shape(format!(
                "grid {c}x{h}x{w}, estimator expects {}x{}x{}",
                self.config.grid_channels, self.config.grid_size, self.config.grid_size
            )));
        }
        let (n, feat, patches) = extract_patches(grid, self.config.patch_size)?;
        let x = g.constant(Tensor::matrix(n, feat, patches)?);
        let tokens = self.patch_embed.forward(g, p, x)?;
        g.add(tokens, p.var(self.pos_embed))
    }

    /// Full forward pass on a bound graph.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, grid: &ObservationGrid) -> Result<EstimatorOutputs> {
        let mut memory = self.embed_grid(g, p, grid)?;
        for layer in &self.encoder {
            memory = layer.forward(g, p, memory)?;
        }
        let memory = self.encoder_norm.forward(g, p, memory)?;
        let mut x = p.var(self.queries);
        let mut outputs = EstimatorOutputs {
            logits: Vec::new(),
            keypoints: Vec::new(),
        };
        for layer in &self.decoder {
            x = layer.forward(g, p, x, memory)?;
            let normed = self.decoder_norm.forward(g, p, x)?;
            let logits = self.class_head.forward(g, p, normed)?;
            let mut h = self.kp_head[0].forward(g, p, normed)?;
            h = g.gelu(h);
            h = self.kp_head[1].forward(g, p, h)?;
            h = g.gelu(h);
            h = self.kp_head[2].forward(g, p, h)?;
            let kps = g.sigmoid(h);
            outputs.logits.push(logits);
            outputs.keypoints.push(kps);
        }
        Ok(outputs)
    }

    /// Inference over frozen parameters.
    pub fn predict(&self, grid: &ObservationGrid) -> Result<QueryPredictionSet> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &p, grid)?;
        Ok(QueryPredictionSet::from_values(
            g.value(out.final_logits()),
            g.value(out.final_keypoints()),
        ))
    }
}

/// Result of picking one query per role.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedEntities {
    pub pose: FramePose,
    /// Winning query per role: left, right, object.
    pub queries: [usize; 3],
    /// Probability of the winning class per role.
    pub confidence: [f64; 3],
}

/// Picks, per role, the query with the highest probability of that class.
/// The object role maximizes over every (query, object class) pair. Ties go
/// to the lowest query index, then the lowest class. One query may fill
/// several roles.
pub fn select_entities(preds: &QueryPredictionSet, n_object_classes: usize) -> Result<SelectedEntities> {
    if preds.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 queries, got {}",
            preds.len()
        )));
    }
    let expected = 2 + n_object_classes + 1;
    let probs: Vec<Vec<f64>> = preds
        .predictions
        .iter()
        .map(|p| {
            if p.class_logits.len() != expected || p.keypoints.len() != ENTITY_DIM {
                return Err(Error::Shape(format!(
                    "query with {} logits and {} keypoint values",
                    p.class_logits.len(),
                    p.keypoints.len()
                )));
            }
            Ok(p.probabilities())
        })
        .collect::<Result<_>>()?;
    let best_for = |class: usize| {
        let mut best = (0usize, probs[0][class]);
        for (q, pr) in probs.iter().enumerate().skip(1) {
            if pr[class] > best.1 {
                best = (q, pr[class]);
            }
        }
        best
    };
    let (lq, lp) = best_for(LEFT_CLASS);
    let (rq, rp) = best_for(RIGHT_CLASS);
    let mut obj = (0usize, 0usize, f64::NEG_INFINITY);
    for (q, pr) in probs.iter().enumerate() {
        for c in 0..n_object_classes {
            if pr[FIRST_OBJECT_CLASS + c] > obj.2 {
                obj = (q, c, pr[FIRST_OBJECT_CLASS + c]);
            }
        }
    }
    let mut flat = Vec::with_capacity(3 * ENTITY_DIM);
    flat.extend_from_slice(&preds.predictions[lq].keypoints);
    flat.extend_from_slice(&preds.predictions[rq].keypoints);
    flat.extend_from_slice(&preds.predictions[obj.0].keypoints);
    Ok(SelectedEntities {
        pose: FramePose::from_flat(&flat, obj.1)?,
        queries: [lq, rq, obj.0],
        confidence: [lp, rp, obj.2],
    })
}

/// Keypoints per entity, for readers of the prediction output.
pub const POINTS_PER_ENTITY: usize = JOINTS;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::RenderConfig;

    fn small() -> EstimatorConfig {
        EstimatorConfig {
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            encoder_layers: 1,
            decoder_layers: 2,
            n_queries: 5,
            ..EstimatorConfig::default()
        }
    }

    fn one_hot_pred(class: usize, n_classes: usize, value: f64) -> QueryPrediction {
        let mut logits = vec![0.0; n_classes];
        logits[class] = 30.0;
        QueryPrediction {
            class_logits: logits,
            keypoints: vec![value; ENTITY_DIM],
        }
    }

    #[test]
    fn output_cardinality_and_range() {
        let est = KeypointEstimator::new(small(), 1).unwrap();
        let grid = ObservationGrid::zeros(3, 48, 48);
        let preds = est.predict(&grid).unwrap();
        assert_eq!(preds.len(), 5);
        for p in &preds.predictions {
            assert_eq!(p.class_logits.len(), 7);
            assert!(p.keypoints.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn embed_grid_token_count_and_zero_input() {
        let mut est = KeypointEstimator::new(EstimatorConfig::default(), 2).unwrap();
        for id in [est.patch_embed.weight, est.patch_embed.bias] {
            est.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = est.params.bind(&mut g, false);
        let tokens = est
            .embed_grid(&mut g, &p, &ObservationGrid::zeros(3, 48, 48))
            .unwrap();
        assert_eq!(g.value(tokens).rows(), 36);
        assert_eq!(g.value(tokens).data(), est.params.get(est.pos_embed).data());
    }

    #[test]
    fn rejects_wrong_grid() {
        let est = KeypointEstimator::new(small(), 1).unwrap();
        assert!(est.predict(&ObservationGrid::zeros(3, 40, 40)).is_err());
    }

    #[test]
    fn select_one_hot_roles() {
        let n = 7;
        let preds = QueryPredictionSet {
            predictions: vec![
                one_hot_pred(0, n, 0.1),
                one_hot_pred(1, n, 0.2),
                one_hot_pred(4, n, 0.3),
                one_hot_pred(6, n, 0.9),
            ],
        };
        let sel = select_entities(&preds, 4).unwrap();
        assert_eq!(sel.queries, [0, 1, 2]);
        assert_eq!(sel.pose.object.class_id, 2);
        assert_eq!(sel.pose.left.joints[0], [0.1; 3]);
        assert_eq!(sel.pose.right.joints[5], [0.2; 3]);
        assert_eq!(sel.pose.object.points[20], [0.3; 3]);
    }

    #[test]
    fn uniform_probabilities_pick_lowest_index() {
        let preds = QueryPredictionSet {
            predictions: (0..4)
                .map(|i| QueryPrediction {
                    class_logits: vec![0.0; 7],
                    keypoints: vec![0.1 * i as f64; ENTITY_DIM],
                })
                .collect(),
        };
        let sel = select_entities(&preds, 4).unwrap();
        assert_eq!(sel.queries, [0, 0, 0]);
        assert_eq!(sel.pose.object.class_id, 0);
    }

    #[test]
    fn too_few_queries() {
        let preds = QueryPredictionSet {
            predictions: vec![one_hot_pred(0, 7, 0.1); 2],
        };
        assert!(select_entities(&preds, 4).is_err());
    }

    #[test]
    fn rendered_input_runs() {
        let est = KeypointEstimator::new(small(), 4).unwrap();
        let cfg = RenderConfig::default();
        let grid = crate::render::render_points(&[(0, [0.3, 0.3, 0.5])], &cfg);
        assert_eq!(est.predict(&grid).unwrap().len(), 5);
    }
}
