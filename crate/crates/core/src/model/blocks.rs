//! Building blocks of the multi-resolution network.
//!
//! Blocks only remember indices into a [`ParamStore`]; the forward functions
//! take the graph variables produced by [`ParamStore::bind`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `std = sqrt(2 / fan_in)`, for layers followed by relu.
    He,
    /// `std = sqrt(2 / (fan_in + fan_out))`.
    Xavier,
}

/// Convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let w = Tensor::randn([out_channels, in_channels, kernel, kernel], std, rng);
        let weight = params.push(format!("{name}.w"), w);
        let bias = params.push(format!("{name}.b"), Tensor::zeros([1, out_channels, 1, 1]));
        Conv {
            weight,
            bias,
            stride,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, vars[self.weight], Some(vars[self.bias]), self.stride)
    }

    /// Zeroes weight and bias.
    pub fn zero<T: Scalar>(&self, params: &mut ParamStore<T>) {
        params.get_mut(self.weight).data_mut().fill(T::zero());
        params.get_mut(self.bias).data_mut().fill(T::zero());
    }
}

/// Resolution-halving residual block `relu(g(F) + f(F))`.
///
/// `g` is 1×1 → relu → 3×3 stride 2 → relu → 1×1 and `f` is a 1×1 stride-2
/// projection, the closest thing to an identity that can change shape.
#[derive(Debug, Clone)]
pub struct ReduceBlock {
    pub squeeze: Conv,
    pub spatial: Conv,
    pub expand: Conv,
    pub shortcut: Conv,
}

impl ReduceBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mid = (out_channels / 2).max(1);
        ReduceBlock {
            squeeze: Conv::new(params, &format!("{name}.g1"), in_channels, mid, 1, 1, Init::He, rng),
            spatial: Conv::new(params, &format!("{name}.g2"), mid, mid, 3, 2, Init::He, rng),
            expand: Conv::new(params, &format!("{name}.g3"), mid, out_channels, 1, 1, Init::He, rng),
            shortcut: Conv::new(
                params,
                &format!("{name}.f"),
                in_channels,
                out_channels,
                1,
                2,
                Init::He,
                rng,
            ),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand.out_channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "reduce_block",
                format!("spatial dims {h}x{w} must be even"),
            ));
        }
        let a = self.squeeze.forward(g, vars, x)?;
        let a = g.relu(a);
        let a = self.spatial.forward(g, vars, a)?;
        let a = g.relu(a);
        let residual = self.expand.forward(g, vars, a)?;
        let shortcut = self.shortcut.forward(g, vars, x)?;
        let sum = g.add(residual, shortcut)?;
        Ok(g.relu(sum))
    }
}

/// Resolution-preserving refinement, dense or residual.
#[derive(Debug, Clone)]
pub enum RefineBlock {
    /// Step `m` convolves the concatenation of the input and every earlier
    /// step's output; the block returns the full concatenation.
    Dense { steps: Vec<Conv> },
    /// Step `relu(conv(F) + F)`, repeated.
    Residual { steps: Vec<Conv> },
}

impl RefineBlock {
    pub fn dense<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        depth: usize,
        growth: usize,
        rng: &mut R,
    ) -> Self {
        let steps = (0..depth)
            .map(|m| {
                Conv::new(
                    params,
                    &format!("{name}.d{m}"),
                    in_channels + m * growth,
                    growth,
                    3,
                    1,
                    Init::He,
                    rng,
                )
            })
            .collect();
        RefineBlock::Dense { steps }
    }

    pub fn residual<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let steps = (0..depth)
            .map(|m| Conv::new(params, &format!("{name}.r{m}"), channels, channels, 3, 1, Init::He, rng))
            .collect();
        RefineBlock::Residual { steps }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            RefineBlock::Dense { steps } => in_channels + steps.iter().map(|c| c.out_channels).sum::<usize>(),
            RefineBlock::Residual { .. } => in_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        match self {
            RefineBlock::Dense { steps } => dense_refine(g, vars, steps, vec![x]),
            RefineBlock::Residual { steps } => {
                let mut cur = x;
                for conv in steps {
                    let y = conv.forward(g, vars, cur)?;
                    let s = g.add(y, cur)?;
                    cur = g.relu(s);
                }
                Ok(cur)
            }
        }
    }
}

/// Dense refinement over an explicit list of same-resolution maps. Each step
/// appends `relu(conv(F_1 ⊕ … ⊕ F_m))`; the result is the concatenation of
/// the whole list.
pub fn dense_refine<T: Scalar>(g: &mut Graph<T>, vars: &[Var], steps: &[Conv], mut maps: Vec<Var>) -> Result<Var> {
    for conv in steps {
        let cat = g.concat_channels(&maps)?;
        let y = conv.forward(g, vars, cat)?;
        maps.push(g.relu(y));
    }
    g.concat_channels(&maps)
}

/// Coarse-to-fine fusion `relu(conv3x3(U(F_lower) ⊕ F_same))`.
#[derive(Debug, Clone)]
pub struct FuseBlock {
    pub conv: Conv,
}

impl FuseBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        name: &str,
        lower_channels: usize,
        same_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        FuseBlock {
            conv: Conv::new(
                params,
                name,
                lower_channels + same_channels,
                out_channels,
                3,
                1,
                Init::He,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var], lower: Var, same: Var) -> Result<Var> {
        let [_, _, lh, lw] = g.value(lower).shape();
        let [_, _, sh, sw] = g.value(same).shape();
        if (2 * lh, 2 * lw) != (sh, sw) {
            return Err(Error::shape(
                "fuse",
                format!(
                    "upsampled lower map is {}x{}, same-level map is {sh}x{sw}",
                    2 * lh,
                    2 * lw
                ),
            ));
        }
        let up = g.upsample2x(lower);
        let cat = g.concat_channels(&[up, same])?;
        let y = self.conv.forward(g, vars, cat)?;
        Ok(g.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn reduce_block_shape_contract() {
        let mut params = ParamStore::<f64>::new();
        let block = ReduceBlock::new(&mut params, "r", 4, 8, &mut rng());
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let x = g.constant(Tensor::uniform([2, 4, 16, 16], 0.0, 1.0, &mut rng()));
        let y = block.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).shape(), [2, 8, 8, 8]);

        let odd = g.constant(Tensor::zeros([1, 4, 5, 6]));
        assert!(block.forward(&mut g, &vars, odd).is_err());
    }

    #[test]
    fn zeroed_residual_branch_degenerates_to_shortcut() {
        let mut params = ParamStore::<f64>::new();
        let block = ReduceBlock::new(&mut params, "r", 3, 6, &mut rng());
        block.expand.zero(&mut params);
        let input = Tensor::uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng());

        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let x = g.constant(input.clone());
        let y = block.forward(&mut g, &vars, x).unwrap();

        let mut h = Graph::new();
        let hv = params.bind(&mut h);
        let x = h.constant(input);
        let p = block.shortcut.forward(&mut h, &hv, x).unwrap();
        let expected = h.relu(p);
        assert_eq!(g.value(y), h.value(expected));
    }

    #[test]
    fn dense_width_grows_by_growth_rate() {
        for depth in 1..4 {
            let mut params = ParamStore::<f64>::new();
            let block = RefineBlock::dense(&mut params, "d", 5, depth, 3, &mut rng());
            assert_eq!(block.out_channels(5), 5 + depth * 3);
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let x = g.constant(Tensor::uniform([1, 5, 6, 6], 0.0, 1.0, &mut rng()));
            let y = block.forward(&mut g, &vars, x).unwrap();
            assert_eq!(g.value(y).shape(), [1, 5 + depth * 3, 6, 6]);
        }
    }

    #[test]
    fn dense_depth_one_is_plain_conv_relu() {
        let mut params = ParamStore::<f64>::new();
        let block = RefineBlock::dense(&mut params, "d", 2, 1, 4, &mut rng());
        let input = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng());
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let x = g.constant(input.clone());
        let y = block.forward(&mut g, &vars, x).unwrap();
        let RefineBlock::Dense { steps } = &block else {
            unreachable!()
        };
        let c = steps[0].forward(&mut g, &vars, x).unwrap();
        let plain = g.relu(c);
        let out = g.value(y);
        for ch in 0..4 {
            assert_eq!(out.plane_slice(0, 2 + ch), g.value(plain).plane_slice(0, ch));
        }
        assert_eq!(out.plane_slice(0, 0), input.plane_slice(0, 0));
    }

    #[test]
    fn dense_refine_rejects_spatial_mismatch() {
        let mut params = ParamStore::<f64>::new();
        let RefineBlock::Dense { steps } = RefineBlock::dense(&mut params, "d", 3, 1, 2, &mut rng()) else {
            unreachable!()
        };
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let a = g.constant(Tensor::zeros([1, 1, 4, 4]));
        let b = g.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(dense_refine(&mut g, &vars, &steps, vec![a, b]).is_err());
    }

    #[test]
    fn residual_refinement_keeps_width() {
        let mut params = ParamStore::<f64>::new();
        let block = RefineBlock::residual(&mut params, "r", 4, 2, &mut rng());
        assert_eq!(block.out_channels(4), 4);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let x = g.constant(Tensor::uniform([1, 4, 6, 6], 0.0, 1.0, &mut rng()));
        let y = block.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).shape(), [1, 4, 6, 6]);
    }

    #[test]
    fn fuse_shapes_and_constant_propagation() {
        let mut params = ParamStore::<f64>::new();
        let fuse = FuseBlock::new(&mut params, "fz", 1, 1, 1, &mut rng());
        // identity-like kernel: centre tap of the upsampled channel only
        fuse.conv.zero(&mut params);
        params.get_mut(fuse.conv.weight).set(0, 0, 1, 1, 1.0);
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let lower = g.constant(Tensor::full([1, 1, 3, 3], 0.4));
        let same = g.constant(Tensor::zeros([1, 1, 6, 6]));
        let y = fuse.forward(&mut g, &vars, lower, same).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let wrong = g.constant(Tensor::zeros([1, 1, 5, 5]));
        assert!(fuse.forward(&mut g, &vars, lower, wrong).is_err());
    }
}
