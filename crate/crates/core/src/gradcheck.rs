//! Finite-difference verification of every differentiable op.
//!
//! Each case builds a scalar function of some leaf tensors on a fresh graph.
//! Analytic gradients from [`Graph::backward`] are compared with central
//! differences, per tensor, by `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
//!
//! Piecewise-smooth ops (relu, max pooling, clamped logs) make a difference
//! quotient meaningless when the two evaluations straddle a kink. The graph's
//! [`kink_signature`](Graph::kink_signature) detects this; such coordinates
//! are retried with a step 100× smaller and skipped (and counted) if the
//! straddle persists.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{dense_refine, FuseBlock, Model, ModelConfig, ReduceBlock, RefineBlock};
use crate::optim::ParamStore;
use crate::pooling::PoolingSpec;
use crate::tensor::{Shape, Tensor};

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One scalar-valued function of `inputs`.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Norms below this are treated as this, so that two vanishing gradients
    /// do not produce a spurious relative error.
    pub norm_floor: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            step: 1e-4,
            tolerance: 1e-4,
            norm_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    /// Worst relative error over the case's input tensors.
    pub rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn evaluate(case: &GradCase, inputs: &[Tensor<f64>]) -> Result<(f64, u64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape(
            "gradcheck",
            format!("case output has shape {:?}", v.shape()),
        ));
    }
    Ok((v.data()[0], g.kink_signature()))
}

/// Analytic gradients of `case`, optionally scaled by `corrupt` (a test hook).
pub fn analytic(case: &GradCase) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let mut grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Compares `analytic_grads` with central differences of `case`.
pub fn compare(case: &GradCase, analytic_grads: &[Tensor<f64>], settings: &CheckSettings) -> Result<CaseResult> {
    let (_, base_sig) = evaluate(case, &case.inputs)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for (ti, a) in analytic_grads.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..case.inputs[ti].len() {
            let mut numeric = None;
            for h in [settings.step, settings.step / 100.0] {
                let mut plus = case.inputs.to_vec();
                plus[ti].data_mut()[j] += h;
                let (fp, sp) = evaluate(case, &plus)?;
                let mut minus = case.inputs.to_vec();
                minus[ti].data_mut()[j] -= h;
                let (fm, sm) = evaluate(case, &minus)?;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            let Some(n) = numeric else {
                skipped += 1;
                continue;
            };
            checked += 1;
            let av = a.data()[j];
            diff2 += (av - n).powi(2);
            a2 += av * av;
            n2 += n * n;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(settings.norm_floor);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(CaseResult {
        rel_err: worst,
        checked,
        skipped,
    })
}

pub fn check(case: &GradCase, settings: &CheckSettings) -> Result<CaseResult> {
    let a = analytic(case)?;
    compare(case, &a, settings)
}

/// Differentiable operations covered by [`run_suite`], in report order.
pub const OPS: &[&str] = &[
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "concat_channels",
    "upsample2x",
    "sum",
    "scale",
    "dot",
    "bce",
    "pool_max",
    "pool_avg",
    "pool_gm",
    "pool_noisy_or",
    "pool_lse",
    "pool_lse_lba",
    "reduce_block",
    "dense_refine",
    "fuse",
    "model_end_to_end",
];

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Contracts `x` with a fixed random weight so that every output entry
/// contributes to the scalar.
fn contract(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(g.value(x).shape(), -1.0, 1.0, &mut rng);
    g.dot(x, w)
}

fn pool_case(spec: PoolingSpec<f64>, seed: u64, rng: &mut ChaCha8Rng) -> GradCase {
    // Noisy-OR gradients are products of the other complements; keep them
    // well above the difference quotient's rounding floor
    let input = match spec {
        PoolingSpec::NoisyOr => uniform([2, 2, 3, 3], 0.02, 0.4, rng),
        _ => uniform([2, 2, 5, 5], 0.05, 0.95, rng),
    };
    GradCase {
        inputs: vec![input],
        build: Box::new(move |g, v| {
            let p = g.pool(v[0], &spec)?;
            contract(g, p, seed)
        }),
    }
}

/// Builds the case for `op` at `seed`. Shapes and hyper-parameters vary
/// with the seed so that five seeds cover strides, kernels and sharpness.
pub fn case_for(op: &str, seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed as usize;
    let case = match op {
        "conv2d" => {
            let k = [3, 1, 3, 1, 3][s % 5];
            let stride = [1, 2, 2, 1, 1][s % 5];
            GradCase {
                inputs: vec![
                    uniform([2, 3, 6, 7], -1.0, 1.0, &mut rng),
                    uniform([4, 3, k, k], -1.0, 1.0, &mut rng),
                    uniform([1, 4, 1, 1], -1.0, 1.0, &mut rng),
                ],
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride)?;
                    contract(g, y, seed)
                }),
            }
        }
        "relu" | "sigmoid" | "upsample2x" | "sum" | "scale" | "dot" => {
            let name = op.to_string();
            GradCase {
                inputs: vec![uniform([2, 3, 4, 5], -2.0, 2.0, &mut rng)],
                build: Box::new(move |g, v| {
                    let y = match name.as_str() {
                        "relu" => g.relu(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        "upsample2x" => g.upsample2x(v[0]),
                        "scale" => g.scale(v[0], -1.75),
                        "sum" => {
                            let sq = g.sigmoid(v[0]);
                            return Ok(g.sum(sq));
                        }
                        _ => v[0],
                    };
                    contract(g, y, seed)
                }),
            }
        }
        "add" => GradCase {
            inputs: vec![
                uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng),
                uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.sigmoid(y);
                contract(g, y, seed)
            }),
        },
        "concat_channels" => GradCase {
            inputs: vec![
                uniform([2, 1, 3, 3], -1.0, 1.0, &mut rng),
                uniform([2, 3, 3, 3], -1.0, 1.0, &mut rng),
                uniform([2, 2, 3, 3], -1.0, 1.0, &mut rng),
            ],
            build: Box::new(move |g, v| {
                let y = g.concat_channels(&[v[0], v[1], v[2]])?;
                contract(g, y, seed)
            }),
        },
        "bce" => {
            let targets = Tensor::from_vec([3, 2, 1, 1], (0..6).map(|_| rng.random_range(0..2) as f64).collect())?;
            GradCase {
                inputs: vec![uniform([3, 2, 1, 1], 0.05, 0.95, &mut rng)],
                build: Box::new(move |g, v| g.bce(v[0], targets.clone())),
            }
        }
        "pool_max" => pool_case(PoolingSpec::Max, seed, &mut rng),
        "pool_avg" => pool_case(PoolingSpec::Average, seed, &mut rng),
        "pool_gm" => pool_case(
            PoolingSpec::GeneralizedMean {
                r: [1.0, 2.5, 4.0, 6.0, 8.0][s % 5],
            },
            seed,
            &mut rng,
        ),
        "pool_noisy_or" => pool_case(PoolingSpec::NoisyOr, seed, &mut rng),
        "pool_lse" => pool_case(
            PoolingSpec::LogSumExp {
                r: [0.5, 2.0, 5.0, 10.0, 20.0][s % 5],
            },
            seed,
            &mut rng,
        ),
        "pool_lse_lba" => {
            let r0 = [0.0, 5.0, 10.0, 2.0, 7.5][s % 5];
            let per_class = s % 2 == 1;
            let beta_shape = if per_class { [1, 2, 1, 1] } else { [1, 1, 1, 1] };
            GradCase {
                inputs: vec![
                    uniform([2, 2, 6, 6], 0.0, 1.0, &mut rng),
                    uniform(beta_shape, -2.0, 2.0, &mut rng),
                ],
                build: Box::new(move |g, v| {
                    let p = g.pool_lse_lba(v[0], r0, v[1])?;
                    contract(g, p, seed)
                }),
            }
        }
        "reduce_block" => {
            let mut params = ParamStore::new();
            let block = ReduceBlock::new(&mut params, "r", 3, 4, &mut rng);
            block_case(
                params,
                uniform([1, 3, 6, 6], -1.0, 1.0, &mut rng),
                seed,
                move |g, v, x| block.forward(g, v, x),
            )
        }
        "dense_refine" => {
            let mut params = ParamStore::new();
            let block = RefineBlock::dense(&mut params, "d", 3, 2, 2, &mut rng);
            let RefineBlock::Dense { steps } = block else {
                unreachable!()
            };
            block_case(
                params,
                uniform([1, 3, 5, 5], -1.0, 1.0, &mut rng),
                seed,
                move |g, v, x| dense_refine(g, v, &steps, vec![x]),
            )
        }
        "fuse" => {
            let mut params = ParamStore::new();
            let fuse = FuseBlock::new(&mut params, "f", 2, 2, 3, &mut rng);
            let same = uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng);
            block_case(
                params,
                uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng),
                seed,
                move |g, v, x| {
                    let same = g.constant(same.clone());
                    fuse.forward(g, v, x, same)
                },
            )
        }
        "model_end_to_end" => model_case(seed)?,
        other => return Err(Error::invalid("gradcheck", format!("unknown op `{other}`"))),
    };
    Ok(case)
}

/// Input tensor followed by a block's parameters.
fn block_case(
    params: ParamStore<f64>,
    x: Tensor<f64>,
    seed: u64,
    forward: impl Fn(&mut Graph<f64>, &[Var], Var) -> Result<Var> + 'static,
) -> GradCase {
    let mut inputs = vec![x];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    GradCase {
        inputs,
        build: Box::new(move |g, v| {
            let y = forward(g, &v[1..], v[0])?;
            contract(g, y, seed)
        }),
    }
}

/// Configuration of the end-to-end check model (well under 2000 parameters).
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        levels: 2,
        base_channels: 2,
        channels_per_level: vec![3, 4],
        dense_depth: 1,
        growth_rate: 2,
        num_classes: 2,
        saliency_resolution: 8,
        beta_init: 0.3,
        seed,
        ..ModelConfig::default()
    }
}

fn model_case(seed: u64) -> Result<GradCase> {
    let mut model = Model::<f64>::build(tiny_model_config(seed))?;
    // biases start at zero; randomize them so their gradients are generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for i in 0..model.params().len() {
        if model.params().name(i).ends_with(".b") {
            let shape = model.params().get(i).shape();
            *model.params_mut().get_mut(i) = Tensor::uniform(shape, -0.1, 0.1, &mut rng);
        }
    }
    let images = Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let targets = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0])?;
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    Ok(GradCase {
        inputs,
        build: Box::new(move |g, v| {
            let x = g.constant(images.clone());
            let nodes = model.forward_with(g, v.to_vec(), x)?;
            g.bce(nodes.probs, targets.clone())
        }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub worst_rel_err: f64,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.ops {
            let _ = writeln!(
                out,
                "{:<18} {}  worst rel err {:.3e}  ({} coords, {} kink skips, {} seeds)",
                o.op,
                if o.passed { "ok  " } else { "FAIL" },
                o.worst_rel_err,
                o.checked,
                o.skipped,
                o.seeds
            );
        }
        let _ = writeln!(
            out,
            "{} / {} ops within {:.0e}",
            self.ops.iter().filter(|o| o.passed).count(),
            self.ops.len(),
            self.tolerance
        );
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub settings: CheckSettings,
    /// Test hook: perturb the analytic gradient of this op by 1%.
    pub corrupt: Option<String>,
}

impl SuiteConfig {
    pub fn standard() -> Self {
        SuiteConfig {
            seeds: (0..5).collect(),
            settings: CheckSettings::default(),
            corrupt: None,
        }
    }
}

pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    if let Some(c) = &config.corrupt {
        if !OPS.contains(&c.as_str()) {
            return Err(Error::invalid("gradcheck", format!("cannot corrupt unknown op `{c}`")));
        }
    }
    let mut ops = Vec::with_capacity(OPS.len());
    for &op in OPS {
        let mut report = OpReport {
            op: op.to_string(),
            worst_rel_err: 0.0,
            seeds: config.seeds.len(),
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for &seed in &config.seeds {
            let case = case_for(op, seed)?;
            let mut grads = analytic(&case)?;
            if config.corrupt.as_deref() == Some(op) {
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= 1.01);
                }
            }
            let r = compare(&case, &grads, &config.settings)?;
            report.worst_rel_err = report.worst_rel_err.max(r.rel_err);
            report.checked += r.checked;
            report.skipped += r.skipped;
        }
        report.passed = report.worst_rel_err <= config.settings.tolerance && report.checked > 0;
        ops.push(report);
    }
    Ok(SuiteReport {
        tolerance: config.settings.tolerance,
        ops,
    })
}
