//! Multi-resolution saliency network.
//!
//! Data flow for `levels = L` and saliency side `N`:
//!
//! ```text
//! x ─ stem ─ reduce₁ ─ refine₁ ─ reduce₂ ─ refine₂ ─ … ─ reduce_L ─ refine_L
//!                                                            │
//!            fuse_j ◄─ … ◄─ fuse_{L−1} ◄─────────────────────┘
//!              │
//!           1×1 instance classifier ─ sigmoid ─ S (K × N × N) ─ pooling ─ P
//! ```
//!
//! where level `j` is the one whose resolution is `N`. Every fuse step
//! upsamples the coarser map, concatenates it with the refined map of its
//! own level, and applies a 3×3 convolution and relu.

mod blocks;
mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{dense_refine, Conv, FuseBlock, Init, ReduceBlock, RefineBlock};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, PoolingKind, Refinement, MODEL_KEYS};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, LOG_CLAMP};
use crate::optim::ParamStore;
use crate::pooling::{PoolingSpec, BETA_MAX};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Name of the learnable sharpness parameter in the parameter store.
pub const BETA_PARAM: &str = "pool.beta";

/// Per-class instance probabilities on an `N × N` grid, class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    side: usize,
    classes: usize,
    data: Vec<T>,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(side: usize, classes: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != side * side * classes {
            return Err(Error::shape(
                "saliency_map",
                format!("{} values for {classes} classes of {side}x{side}", data.len()),
            ));
        }
        Ok(SaliencyMap { side, classes, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Row-major `N × N` slice for one class.
    pub fn class(&self, k: usize) -> &[T] {
        let p = self.side * self.side;
        &self.data[k * p..(k + 1) * p]
    }

    pub fn get(&self, k: usize, y: usize, x: usize) -> T {
        self.data[(k * self.side + y) * self.side + x]
    }
}

/// Global per-class probabilities and the saliency map they were pooled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub probs: Vec<T>,
    pub saliency: SaliencyMap<T>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub params: Vec<Var>,
    /// `[n, k, N, N]` sigmoid instance probabilities.
    pub saliency: Var,
    /// `[n, k, 1, 1]` pooled bag probabilities.
    pub probs: Var,
    /// Finest fused feature map `F⁰`.
    pub features: Var,
    /// Shapes of the refined map at each level 1..=L, then of each fused map.
    pub level_shapes: Vec<Shape>,
    pub fused_shapes: Vec<Shape>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pooling: PoolingKind,
    params: ParamStore<T>,
    stem: Conv,
    reduce: Vec<ReduceBlock>,
    refine: Vec<RefineBlock>,
    /// `fuse[i]` merges into level `levels − 1 − i`.
    fuse: Vec<FuseBlock>,
    classifier: Conv,
    beta: Option<usize>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network and initializes its parameters from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let pooling = config.pooling()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let stem = Conv::new(&mut params, "stem", 1, config.base_channels, 3, 1, Init::He, &mut rng);

        let mut reduce = Vec::new();
        let mut refine = Vec::new();
        let mut refined_channels = Vec::new();
        let mut channels = config.base_channels;
        for l in 1..=config.levels {
            let out = config.channels_per_level[l - 1];
            reduce.push(ReduceBlock::new(
                &mut params,
                &format!("down{l}"),
                channels,
                out,
                &mut rng,
            ));
            let block = match config.refinement {
                Refinement::Dense => RefineBlock::dense(
                    &mut params,
                    &format!("refine{l}"),
                    out,
                    config.dense_depth,
                    config.growth_rate,
                    &mut rng,
                ),
                Refinement::Residual => {
                    RefineBlock::residual(&mut params, &format!("refine{l}"), out, config.dense_depth, &mut rng)
                }
            };
            channels = block.out_channels(out);
            refined_channels.push(channels);
            refine.push(block);
        }

        let out_level = config.output_level().expect("validated");
        let mut fuse = Vec::new();
        let mut lower = refined_channels[config.levels - 1];
        for l in (out_level..config.levels).rev() {
            let out = config.channels_per_level[l - 1];
            fuse.push(FuseBlock::new(
                &mut params,
                &format!("fuse{l}"),
                lower,
                refined_channels[l - 1],
                out,
                &mut rng,
            ));
            lower = out;
        }

        let classifier = Conv::new(
            &mut params,
            "classifier",
            lower,
            config.num_classes,
            1,
            1,
            Init::Xavier,
            &mut rng,
        );
        let beta = matches!(pooling, PoolingKind::LseLba { .. }).then(|| {
            let k = if config.per_class_beta { config.num_classes } else { 1 };
            params.push(BETA_PARAM, Tensor::full([1, k, 1, 1], T::of(config.beta_init)))
        });

        Ok(Model {
            config,
            pooling,
            params,
            stem,
            reduce,
            refine,
            fuse,
            classifier,
            beta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pooling(&self) -> PoolingKind {
        self.pooling
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn classifier(&self) -> &Conv {
        &self.classifier
    }

    /// Current `β` values: one entry, or one per class.
    pub fn beta(&self) -> Option<&[T]> {
        self.beta.map(|i| self.params.get(i).data())
    }

    /// Pooling spec for class `k` at the current `β`.
    pub fn pooling_spec(&self, k: usize) -> PoolingSpec<T> {
        let beta = self
            .beta()
            .map(|b| if b.len() == 1 { b[0] } else { b[k] })
            .unwrap_or_else(T::zero);
        self.pooling.spec(beta)
    }

    /// Mean effective sharpness `r0 + e^β` over classes, or the fixed `r`.
    pub fn r_eff(&self) -> Option<f64> {
        let k = self.config.num_classes;
        let total: f64 = (0..k)
            .map(|c| self.pooling_spec(c).effective_sharpness().map(Scalar::f64))
            .sum::<Option<f64>>()?;
        Some(total / k as f64)
    }

    /// Enforces `β ≤ BETA_MAX`.
    pub fn clamp_beta(&mut self) {
        if let Some(i) = self.beta {
            let cap = T::of(BETA_MAX);
            for b in self.params.get_mut(i).data_mut() {
                *b = b.min(cap);
            }
        }
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let s = self.config.input_size;
        if shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "forward",
                format!("expected [n, 1, {s}, {s}] input, got {shape:?}"),
            ));
        }
        Ok(())
    }

    /// Records the full forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<ForwardNodes> {
        let vars = self.params.bind(g);
        self.forward_with(g, vars, x)
    }

    /// Forward pass using caller-bound parameter variables, one per entry of
    /// [`Model::params`] in order.
    pub fn forward_with(&self, g: &mut Graph<T>, vars: Vec<Var>, x: Var) -> Result<ForwardNodes> {
        self.check_input(g.value(x).shape())?;
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} parameter variables for {} parameters",
                    vars.len(),
                    self.params.len()
                ),
            ));
        }
        let stem = self.stem.forward(g, &vars, x)?;
        let mut cur = g.relu(stem);
        let mut refined = Vec::with_capacity(self.config.levels);
        let mut level_shapes = Vec::new();
        for (reduce, refine) in self.reduce.iter().zip(&self.refine) {
            let down = reduce.forward(g, &vars, cur)?;
            cur = refine.forward(g, &vars, down)?;
            level_shapes.push(g.value(cur).shape());
            refined.push(cur);
        }
        let mut fused_shapes = Vec::new();
        let mut lower = cur;
        for (i, fuse) in self.fuse.iter().enumerate() {
            let level = self.config.levels - 1 - i;
            lower = fuse.forward(g, &vars, lower, refined[level - 1])?;
            fused_shapes.push(g.value(lower).shape());
        }
        let features = lower;
        let logits = self.classifier.forward(g, &vars, features)?;
        let saliency = g.sigmoid(logits);
        let probs = match (self.pooling, self.beta) {
            (PoolingKind::LseLba { r0 }, Some(b)) => g.pool_lse_lba(saliency, T::of(r0), vars[b])?,
            _ => g.pool(saliency, &self.pooling.spec(T::zero()))?,
        };
        Ok(ForwardNodes {
            params: vars,
            saliency,
            probs,
            features,
            level_shapes,
            fused_shapes,
        })
    }

    /// Forward pass without gradient bookkeeping beyond the tape itself.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Prediction<T>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let nodes = self.forward_graph(&mut g, x)?;
        let s = g.value(nodes.saliency);
        let p = g.value(nodes.probs);
        let [n, k, side, _] = s.shape();
        (0..n)
            .map(|b| {
                let data = s.data()[b * k * side * side..(b + 1) * k * side * side].to_vec();
                Ok(Prediction {
                    probs: p.data()[b * k..(b + 1) * k].to_vec(),
                    saliency: SaliencyMap::new(side, k, data)?,
                })
            })
            .collect()
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, images: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let nodes = self.forward_graph(&mut g, x)?;
        let loss = g.bce(nodes.probs, targets.clone())?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        Ok((value, self.params.collect_grads(&nodes.params, &mut grads)))
    }

    /// Loss value only; used by finite-difference checks.
    pub fn loss_value(&self, images: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let nodes = self.forward_graph(&mut g, x)?;
        let loss = g.bce(nodes.probs, targets.clone())?;
        Ok(g.value(loss).data()[0])
    }
}

/// Mean over classes of the binary cross-entropy, logs clamped at 1e-12.
pub fn mil_loss<T: Scalar>(pred: &Prediction<T>, labels: &[u8]) -> Result<T> {
    if labels.len() != pred.probs.len() {
        return Err(Error::shape(
            "loss",
            format!("{} labels for {} classes", labels.len(), pred.probs.len()),
        ));
    }
    let eps = T::of(LOG_CLAMP);
    let one = T::one();
    let total: T = pred
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let y = if y != 0 { one } else { T::zero() };
            -(y * p.max(eps).ln() + (one - y) * (one - p).max(eps).ln())
        })
        .sum();
    Ok(total / T::of_usize(labels.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(levels: usize, input: usize, n: usize) -> ModelConfig {
        ModelConfig {
            input_size: input,
            levels,
            base_channels: 2,
            channels_per_level: vec![3; levels],
            dense_depth: 1,
            growth_rate: 2,
            num_classes: 2,
            saliency_resolution: n,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn resolution_arithmetic_errors_name_the_level() {
        let err = Model::<f64>::build(tiny(3, 20, 5)).unwrap_err().to_string();
        assert!(err.contains("level 3"), "{err}");
        let err = Model::<f64>::build(tiny(3, 64, 12)).unwrap_err().to_string();
        assert!(err.contains("level 1 = 32"), "{err}");
        let mut cfg = tiny(3, 64, 16);
        cfg.channels_per_level.pop();
        assert!(Model::<f64>::build(cfg).is_err());
    }

    #[test]
    fn default_shapes_follow_the_halving_path() {
        let model = Model::<f64>::build(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 64, 64]));
        let nodes = model.forward_graph(&mut g, x).unwrap();
        let sides: Vec<usize> = nodes.level_shapes.iter().map(|s| s[2]).collect();
        assert_eq!(sides, vec![32, 16, 8]);
        assert_eq!(nodes.fused_shapes.len(), 1);
        assert_eq!(nodes.fused_shapes[0][2], 16);
        assert_eq!(g.value(nodes.saliency).shape(), [1, 2, 16, 16]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f64>::build(ModelConfig::default()).unwrap();
        let b = Model::<f64>::build(ModelConfig::default()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::<f64>::build(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn single_class_prediction_length() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..tiny(2, 16, 8)
        };
        let model = Model::<f64>::build(cfg).unwrap();
        let preds = model.predict(&Tensor::full([3, 1, 16, 16], 0.5)).unwrap();
        assert_eq!(preds.len(), 3);
        assert!(preds.iter().all(|p| p.probs.len() == 1));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model = Model::<f64>::build(tiny(2, 16, 8)).unwrap();
        assert!(model.predict(&Tensor::zeros([1, 1, 32, 32])).is_err());
        assert!(model.predict(&Tensor::zeros([1, 2, 16, 16])).is_err());
    }

    #[test]
    fn zero_classifier_gives_half_everywhere() {
        let mut model = Model::<f64>::build(tiny(2, 16, 8)).unwrap();
        let cls = model.classifier().clone();
        cls.zero(model.params_mut());
        let preds = model
            .predict(&Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rand::rng()))
            .unwrap();
        for p in preds {
            assert!(p.saliency.class(0).iter().chain(p.saliency.class(1)).all(|&s| s == 0.5));
            assert!(p.probs.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn loss_values() {
        let s = SaliencyMap::new(1, 2, vec![0.5, 0.5]).unwrap();
        let pred = Prediction {
            probs: vec![0.5, 0.5],
            saliency: s.clone(),
        };
        let l: f64 = mil_loss(&pred, &[1, 0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let sure = Prediction {
            probs: vec![1.0 - 1e-9, 1e-9],
            saliency: s,
        };
        assert!(mil_loss(&sure, &[1, 0]).unwrap() < 1e-8);
        assert!(mil_loss(&sure, &[1, 0, 1]).is_err());
    }

    #[test]
    fn beta_clamp() {
        let mut model = Model::<f64>::build(tiny(2, 16, 8)).unwrap();
        let i = model.params().index_of(BETA_PARAM).unwrap();
        model.params_mut().get_mut(i).data_mut()[0] = 50.0;
        model.clamp_beta();
        assert_eq!(model.beta().unwrap()[0], BETA_MAX);
        assert!((model.r_eff().unwrap() - (5.0 + BETA_MAX.exp())).abs() < 1e-9);
    }

    #[test]
    fn fixed_pooling_has_no_beta() {
        let cfg = ModelConfig {
            pooling: "lse".into(),
            r: 3.0,
            ..tiny(2, 16, 8)
        };
        let model = Model::<f64>::build(cfg).unwrap();
        assert!(model.beta().is_none());
        assert_eq!(model.r_eff(), Some(3.0));
        let max = Model::<f64>::build(ModelConfig {
            pooling: "max".into(),
            ..tiny(2, 16, 8)
        })
        .unwrap();
        assert_eq!(max.r_eff(), None);
    }
}
