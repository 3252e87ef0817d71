//! The unfolded K-stage reconstruction network.
//!
//! Each stage generates a rank-bounded matrix `l^k` from two pooled paths
//! whose heads multiply into `p (h x r)` and `q (r x w)` (LRGM), performs the
//! analytic `z`-update with learned stage scalars, and refines `x` with a
//! learned gradient term produced by two dense blocks (GDPM). A deep feature
//! `F^k` is carried between stages through a 1x1 convolution.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sensing::{self, MeasurementOperator, Measurements};
use crate::tensor::{concat, Graph, Real, Tensor, TensorData};

/// Architecture knobs: stage count `K`, LRGM rank `r`, feature channels `C`,
/// and the CS ratio of the measurement operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    pub rank: usize,
    pub channels: usize,
    pub ratio: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidHyper("stage count must be at least 1"));
        }
        if self.rank == 0 {
            return Err(Error::InvalidHyper("rank must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::InvalidHyper("channel count must be at least 1"));
        }
        sensing::ratio_to_m(self.ratio)?;
        Ok(())
    }
}

/// The five learnable scalars of one reconstruction stage.
///
/// In the model-based derivation they come from penalty constants as
/// `rho1 = 2b/s`, `rho2 = l1/s`, `eta = 1/s` (with `s = l1 + 2u + 2b`),
/// `alpha = t*l2/(t*l2 + b)`, `gamma = t/(t*l2 + b)`; here each stage trains
/// them independently.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageParams<T> {
    pub rho1: T,
    pub rho2: T,
    pub eta: T,
    pub alpha: T,
    pub gamma: T,
}

/// One convolution layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    pub weight: TensorData<T>,
    pub bias: TensorData<T>,
}

/// Low-rank generation module: entry conv (2 -> C), fuse conv (2C -> C), and
/// the two 1x1 heads that reduce the pooled paths to `p` and `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrgmParams<T> {
    pub entry: Conv2dParams<T>,
    pub fuse: Conv2dParams<T>,
    pub p_head: Conv2dParams<T>,
    pub q_head: Conv2dParams<T>,
}

/// Gradient-descent/proximal-mapping module: fuse conv over `concat(z, l)`,
/// two dense blocks of three 3x3 layers each, the 1-channel head producing
/// the learned gradient, and the 1x1 transmission conv producing `F^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GdpmParams<T> {
    pub fuse: Conv2dParams<T>,
    pub db1: [Conv2dParams<T>; 3],
    pub db2: [Conv2dParams<T>; 3],
    pub head: Conv2dParams<T>,
    pub trans: Conv2dParams<T>,
}

/// Everything one reconstruction stage owns.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub scalars: StageParams<T>,
    pub lrgm: LrgmParams<T>,
    pub gdpm: GdpmParams<T>,
}

/// All trainable state: the shared measurement matrix plus per-stage weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub operator: MeasurementOperator<T>,
    pub stages: Vec<Stage<T>>,
    pub rank: usize,
    pub channels: usize,
}

/// Carried variables of one stage: `x^k`, `z^k`, `l^k`, `F^k`.
pub struct ReconstructionState<T: Real> {
    pub x: Tensor<T>,
    pub z: Tensor<T>,
    pub l: Tensor<T>,
    pub f: Tensor<T>,
}

/// Full forward record: the initial reconstruction and every stage state,
/// kept for per-stage metric curves and visualization.
pub struct ForwardTrace<T: Real> {
    pub x0: Tensor<T>,
    pub states: Vec<ReconstructionState<T>>,
}

impl<T: Real> ForwardTrace<T> {
    /// `x^K`, or `x^0` for the degenerate zero-stage case used in tests.
    pub fn final_x(&self) -> &Tensor<T> {
        self.states.last().map(|s| &s.x).unwrap_or(&self.x0)
    }
}

/// Output of one GDPM application; `grad_estimate` is the learned gradient
/// map (useful for stage visualization).
pub struct GdpmOutput<T: Real> {
    pub x: Tensor<T>,
    pub f: Tensor<T>,
    pub grad_estimate: Tensor<T>,
}

fn kaiming_conv<T: Real>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<Conv2dParams<T>> {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data: Vec<T> = (0..c_out * c_in * k * k)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v * std)
        })
        .collect();
    Ok(Conv2dParams {
        weight: TensorData::new(alloc::vec![c_out, c_in, k, k], data)?,
        bias: TensorData::zeros(alloc::vec![c_out])?,
    })
}

/// Fresh parameters: fan-in scaled Gaussian conv weights, zero biases, and
/// stage scalars at `rho1 = rho2 = eta = 1/3`, `alpha = 1/2`, `gamma = 0.01`
/// so the first iterations stay close to the analytic update. Deterministic
/// per seed.
pub fn init_params<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let operator = MeasurementOperator::init(config.ratio, seed)?;
    // Separate stream for network weights so the operator matches a bare
    // `MeasurementOperator::init` with the same seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let c = config.channels;
    let third = T::from_f64(1.0 / 3.0);
    let mut stages = Vec::with_capacity(config.stages);
    for _ in 0..config.stages {
        let lrgm = LrgmParams {
            entry: kaiming_conv(&mut rng, c, 2, 3)?,
            fuse: kaiming_conv(&mut rng, c, 2 * c, 3)?,
            p_head: kaiming_conv(&mut rng, 1, c, 1)?,
            q_head: kaiming_conv(&mut rng, 1, c, 1)?,
        };
        let gdpm = GdpmParams {
            fuse: kaiming_conv(&mut rng, c, 2, 3)?,
            db1: [
                kaiming_conv(&mut rng, c, c, 3)?,
                kaiming_conv(&mut rng, c, 2 * c, 3)?,
                kaiming_conv(&mut rng, c, 3 * c, 3)?,
            ],
            db2: [
                kaiming_conv(&mut rng, c, c, 3)?,
                kaiming_conv(&mut rng, c, 2 * c, 3)?,
                kaiming_conv(&mut rng, c, 3 * c, 3)?,
            ],
            head: kaiming_conv(&mut rng, 1, c, 3)?,
            trans: kaiming_conv(&mut rng, c, 2 * c, 1)?,
        };
        stages.push(Stage {
            scalars: StageParams {
                rho1: third,
                rho2: third,
                eta: third,
                alpha: T::from_f64(0.5),
                gamma: T::from_f64(0.01),
            },
            lrgm,
            gdpm,
        });
    }
    Ok(ModelParams {
        operator,
        stages,
        rank: config.rank,
        channels: config.channels,
    })
}

impl<T: Real> ModelParams<T> {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            stages: self.stages.len(),
            rank: self.rank,
            channels: self.channels,
            ratio: self.operator.ratio(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let cast_conv = |c: &Conv2dParams<T>| Conv2dParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        ModelParams {
            operator: self.operator.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    scalars: StageParams {
                        rho1: U::from_f64(s.scalars.rho1.as_f64()),
                        rho2: U::from_f64(s.scalars.rho2.as_f64()),
                        eta: U::from_f64(s.scalars.eta.as_f64()),
                        alpha: U::from_f64(s.scalars.alpha.as_f64()),
                        gamma: U::from_f64(s.scalars.gamma.as_f64()),
                    },
                    lrgm: LrgmParams {
                        entry: cast_conv(&s.lrgm.entry),
                        fuse: cast_conv(&s.lrgm.fuse),
                        p_head: cast_conv(&s.lrgm.p_head),
                        q_head: cast_conv(&s.lrgm.q_head),
                    },
                    gdpm: GdpmParams {
                        fuse: cast_conv(&s.gdpm.fuse),
                        db1: [
                            cast_conv(&s.gdpm.db1[0]),
                            cast_conv(&s.gdpm.db1[1]),
                            cast_conv(&s.gdpm.db1[2]),
                        ],
                        db2: [
                            cast_conv(&s.gdpm.db2[0]),
                            cast_conv(&s.gdpm.db2[1]),
                            cast_conv(&s.gdpm.db2[2]),
                        ],
                        head: cast_conv(&s.gdpm.head),
                        trans: cast_conv(&s.gdpm.trans),
                    },
                })
                .collect(),
            rank: self.rank,
            channels: self.channels,
        }
    }

    /// Visits every parameter as `(name, shape, values)` in the canonical
    /// order: `phi` first, then per stage the five scalars, the LRGM convs,
    /// and the GDPM convs. The optimizer and the checkpoint format both rely
    /// on this order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[T])) {
        f("phi", self.operator.phi().shape(), self.operator.phi().data());
        for (k, stage) in self.stages.iter().enumerate() {
            let scalar_fields: [(&str, &T); 5] = [
                ("rho1", &stage.scalars.rho1),
                ("rho2", &stage.scalars.rho2),
                ("eta", &stage.scalars.eta),
                ("alpha", &stage.scalars.alpha),
                ("gamma", &stage.scalars.gamma),
            ];
            for (name, v) in scalar_fields {
                f(&format!("stage{k}.{name}"), &[1], core::slice::from_ref(v));
            }
            let convs = stage_conv_names();
            for (name, conv) in convs.into_iter().zip(stage_convs(stage)) {
                f(
                    &format!("stage{k}.{name}.weight"),
                    conv.weight.shape(),
                    conv.weight.data(),
                );
                f(&format!("stage{k}.{name}.bias"), conv.bias.shape(), conv.bias.data());
            }
        }
    }

    /// Mutable variant of [`ModelParams::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        f("phi", self.operator.phi_mut().data_mut());
        for (k, stage) in self.stages.iter_mut().enumerate() {
            let scalar_fields: [(&str, &mut T); 5] = [
                ("rho1", &mut stage.scalars.rho1),
                ("rho2", &mut stage.scalars.rho2),
                ("eta", &mut stage.scalars.eta),
                ("alpha", &mut stage.scalars.alpha),
                ("gamma", &mut stage.scalars.gamma),
            ];
            for (name, v) in scalar_fields {
                f(&format!("stage{k}.{name}"), core::slice::from_mut(v));
            }
            let names = stage_conv_names();
            for (name, conv) in names.into_iter().zip(stage_convs_mut(stage)) {
                f(&format!("stage{k}.{name}.weight"), conv.weight.data_mut());
                f(&format!("stage{k}.{name}.bias"), conv.bias.data_mut());
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, data| n += data.len());
        n
    }

    /// Registers every parameter as a graph leaf and returns the handle
    /// structure used to run the network.
    pub fn bind(&self, graph: &Graph<T>, trainable: bool) -> BoundModel<T> {
        let mut named = Vec::new();
        let phi = self.operator.phi_leaf(graph, trainable);
        named.push((String::from("phi"), phi.clone()));

        let bind_conv = |graph: &Graph<T>,
                         named: &mut Vec<(String, Tensor<T>)>,
                         prefix: &str,
                         c: &Conv2dParams<T>| {
            let weight = graph.leaf(c.weight.clone(), trainable);
            let bias = graph.leaf(c.bias.clone(), trainable);
            named.push((format!("{prefix}.weight"), weight.clone()));
            named.push((format!("{prefix}.bias"), bias.clone()));
            BoundConv { weight, bias }
        };

        let mut stages = Vec::with_capacity(self.stages.len());
        for (k, stage) in self.stages.iter().enumerate() {
            let mut scalar = |name: &str, v: T| {
                let t = graph.leaf(TensorData::scalar(v), trainable);
                named.push((format!("stage{k}.{name}"), t.clone()));
                t
            };
            let rho1 = scalar("rho1", stage.scalars.rho1);
            let rho2 = scalar("rho2", stage.scalars.rho2);
            let eta = scalar("eta", stage.scalars.eta);
            let alpha = scalar("alpha", stage.scalars.alpha);
            let gamma = scalar("gamma", stage.scalars.gamma);

            let lrgm = BoundLrgm {
                entry: bind_conv(graph, &mut named, &format!("stage{k}.lrgm.entry"), &stage.lrgm.entry),
                fuse: bind_conv(graph, &mut named, &format!("stage{k}.lrgm.fuse"), &stage.lrgm.fuse),
                p_head: bind_conv(graph, &mut named, &format!("stage{k}.lrgm.p_head"), &stage.lrgm.p_head),
                q_head: bind_conv(graph, &mut named, &format!("stage{k}.lrgm.q_head"), &stage.lrgm.q_head),
            };
            let gdpm = BoundGdpm {
                fuse: bind_conv(graph, &mut named, &format!("stage{k}.gdpm.fuse"), &stage.gdpm.fuse),
                db1: [
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db1.conv0"), &stage.gdpm.db1[0]),
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db1.conv1"), &stage.gdpm.db1[1]),
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db1.conv2"), &stage.gdpm.db1[2]),
                ],
                db2: [
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db2.conv0"), &stage.gdpm.db2[0]),
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db2.conv1"), &stage.gdpm.db2[1]),
                    bind_conv(graph, &mut named, &format!("stage{k}.gdpm.db2.conv2"), &stage.gdpm.db2[2]),
                ],
                head: bind_conv(graph, &mut named, &format!("stage{k}.gdpm.head"), &stage.gdpm.head),
                trans: bind_conv(graph, &mut named, &format!("stage{k}.gdpm.trans"), &stage.gdpm.trans),
            };
            stages.push(BoundStage {
                rho1,
                rho2,
                eta,
                alpha,
                gamma,
                lrgm,
                gdpm,
            });
        }
        BoundModel {
            graph: graph.clone(),
            phi,
            stages,
            rank: self.rank,
            channels: self.channels,
            named,
        }
    }
}

fn stage_conv_names() -> [&'static str; 13] {
    [
        "lrgm.entry",
        "lrgm.fuse",
        "lrgm.p_head",
        "lrgm.q_head",
        "gdpm.fuse",
        "gdpm.db1.conv0",
        "gdpm.db1.conv1",
        "gdpm.db1.conv2",
        "gdpm.db2.conv0",
        "gdpm.db2.conv1",
        "gdpm.db2.conv2",
        "gdpm.head",
        "gdpm.trans",
    ]
}

fn stage_convs<T>(stage: &Stage<T>) -> [&Conv2dParams<T>; 13] {
    [
        &stage.lrgm.entry,
        &stage.lrgm.fuse,
        &stage.lrgm.p_head,
        &stage.lrgm.q_head,
        &stage.gdpm.fuse,
        &stage.gdpm.db1[0],
        &stage.gdpm.db1[1],
        &stage.gdpm.db1[2],
        &stage.gdpm.db2[0],
        &stage.gdpm.db2[1],
        &stage.gdpm.db2[2],
        &stage.gdpm.head,
        &stage.gdpm.trans,
    ]
}

fn stage_convs_mut<T>(stage: &mut Stage<T>) -> [&mut Conv2dParams<T>; 13] {
    let Stage { lrgm, gdpm, .. } = stage;
    let [d10, d11, d12] = &mut gdpm.db1;
    let [d20, d21, d22] = &mut gdpm.db2;
    [
        &mut lrgm.entry,
        &mut lrgm.fuse,
        &mut lrgm.p_head,
        &mut lrgm.q_head,
        &mut gdpm.fuse,
        d10,
        d11,
        d12,
        d20,
        d21,
        d22,
        &mut gdpm.head,
        &mut gdpm.trans,
    ]
}

/// A convolution layer bound into a graph.
pub struct BoundConv<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> BoundConv<T> {
    fn apply(&self, x: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, stride, padding)?.bias_add(&self.bias)
    }
}

pub struct BoundLrgm<T: Real> {
    pub entry: BoundConv<T>,
    pub fuse: BoundConv<T>,
    pub p_head: BoundConv<T>,
    pub q_head: BoundConv<T>,
}

pub struct BoundGdpm<T: Real> {
    pub fuse: BoundConv<T>,
    pub db1: [BoundConv<T>; 3],
    pub db2: [BoundConv<T>; 3],
    pub head: BoundConv<T>,
    pub trans: BoundConv<T>,
}

pub struct BoundStage<T: Real> {
    pub rho1: Tensor<T>,
    pub rho2: Tensor<T>,
    pub eta: Tensor<T>,
    pub alpha: Tensor<T>,
    pub gamma: Tensor<T>,
    pub lrgm: BoundLrgm<T>,
    pub gdpm: BoundGdpm<T>,
}

/// The network bound into one graph; run [`BoundModel::forward`] per image.
pub struct BoundModel<T: Real> {
    graph: Graph<T>,
    pub phi: Tensor<T>,
    pub stages: Vec<BoundStage<T>>,
    pub rank: usize,
    pub channels: usize,
    named: Vec<(String, Tensor<T>)>,
}

impl<T: Real> BoundModel<T> {
    /// Parameter leaves in the canonical visit order, for gradient readout.
    pub fn named_leaves(&self) -> &[(String, Tensor<T>)] {
        &self.named
    }

    /// Three 3x3 conv layers with relu, each consuming the concatenation of
    /// everything before it inside the block; no block-level residual.
    fn dense_block(convs: &[BoundConv<T>; 3], input: &Tensor<T>) -> Result<Tensor<T>> {
        let a1 = convs[0].apply(input, 1, 1)?.relu();
        let a2 = convs[1].apply(&concat(&[input.clone(), a1.clone()], 0)?, 1, 1)?.relu();
        let a3 = convs[2]
            .apply(&concat(&[input.clone(), a1, a2], 0)?, 1, 1)?
            .relu();
        Ok(a3)
    }

    /// LRGM with the factors exposed; `l = p @ q` so `rank(l) <= r` by
    /// construction.
    pub fn lrgm_factors(
        &self,
        stage: &BoundStage<T>,
        x_prev: &Tensor<T>,
        z_prev: &Tensor<T>,
        f_prev: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = x_prev.shape();
        let (h, w) = (shape[1], shape[2]);
        let r = self.rank;
        if r > h.min(w) {
            return Err(Error::RankTooLarge {
                rank: r,
                max: h.min(w),
            });
        }
        let entry = stage.lrgm.entry.apply(&concat(&[x_prev.clone(), z_prev.clone()], 0)?, 1, 1)?;
        let feat = stage
            .lrgm
            .fuse
            .apply(&concat(&[entry, f_prev.clone()], 0)?, 1, 1)?;
        let p = stage
            .lrgm
            .p_head
            .apply(&feat.adaptive_avg_pool(h, r)?, 1, 0)?
            .reshape(alloc::vec![h, r])?;
        let q = stage
            .lrgm
            .q_head
            .apply(&feat.adaptive_avg_pool(r, w)?, 1, 0)?
            .reshape(alloc::vec![r, w])?;
        Ok((p, q))
    }

    /// Generates the stage's low-rank matrix `l^k (1 x h x w)`.
    pub fn lrgm_forward(
        &self,
        stage: &BoundStage<T>,
        x_prev: &Tensor<T>,
        z_prev: &Tensor<T>,
        f_prev: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let shape = x_prev.shape();
        let (h, w) = (shape[1], shape[2]);
        let (p, q) = self.lrgm_factors(stage, x_prev, z_prev, f_prev)?;
        p.matmul(&q)?.reshape(alloc::vec![1, h, w])
    }

    /// The analytic update
    /// `z = rho1*x + rho2*z + (1 - rho1 - rho2)*l - eta*Phi^T Phi z + eta*Phi^T y`,
    /// with `Phi^T Phi` applied blockwise through sample/init_reconstruction.
    pub fn z_update(
        &self,
        stage: &BoundStage<T>,
        x_prev: &Tensor<T>,
        z_prev: &Tensor<T>,
        l: &Tensor<T>,
        y: &Measurements<T>,
    ) -> Result<Tensor<T>> {
        let phit_phi_z = sensing::init_reconstruction(&self.phi, &sensing::sample(&self.phi, z_prev)?)?;
        let phit_y = sensing::init_reconstruction(&self.phi, y)?;
        let l_weight = self
            .graph
            .scalar(T::one())
            .sub(&stage.rho1)?
            .sub(&stage.rho2)?;
        x_prev
            .mul_scalar(&stage.rho1)?
            .add(&z_prev.mul_scalar(&stage.rho2)?)?
            .add(&l.mul_scalar(&l_weight)?)?
            .sub(&phit_phi_z.mul_scalar(&stage.eta)?)?
            .add(&phit_y.mul_scalar(&stage.eta)?)
    }

    /// GDPM: learned gradient from `concat(z, l)` through two dense blocks,
    /// then `x = alpha*x_prev + (1 - alpha)*z - gamma*grad` and the updated
    /// transmission feature.
    pub fn gdpm_forward(
        &self,
        stage: &BoundStage<T>,
        z: &Tensor<T>,
        l: &Tensor<T>,
        x_prev: &Tensor<T>,
        f_prev: &Tensor<T>,
    ) -> Result<GdpmOutput<T>> {
        let fused = stage.gdpm.fuse.apply(&concat(&[z.clone(), l.clone()], 0)?, 1, 1)?;
        let d1 = Self::dense_block(&stage.gdpm.db1, &fused)?;
        let d2 = Self::dense_block(&stage.gdpm.db2, &d1)?;
        let grad_estimate = stage.gdpm.head.apply(&d2, 1, 1)?;

        let z_weight = self.graph.scalar(T::one()).sub(&stage.alpha)?;
        let x = x_prev
            .mul_scalar(&stage.alpha)?
            .add(&z.mul_scalar(&z_weight)?)?
            .sub(&grad_estimate.mul_scalar(&stage.gamma)?)?;
        let f = stage
            .gdpm
            .trans
            .apply(&concat(&[d2, f_prev.clone()], 0)?, 1, 0)?;
        Ok(GdpmOutput {
            x,
            f,
            grad_estimate,
        })
    }

    /// Runs `x0 = Phi^T y`, `z0 = x0`, `F0 = 0`, then the K stages.
    pub fn forward(&self, y: &Measurements<T>) -> Result<ForwardTrace<T>> {
        let x0 = sensing::init_reconstruction(&self.phi, y)?;
        let shape = x0.shape();
        let (h, w) = (shape[1], shape[2]);
        let mut x = x0.clone();
        let mut z = x0.clone();
        let mut f = self.graph.zeros(alloc::vec![self.channels, h, w])?;
        let mut states = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let l = self.lrgm_forward(stage, &x, &z, &f)?;
            let z_new = self.z_update(stage, &x, &z, &l, y)?;
            let out = self.gdpm_forward(stage, &z_new, &l, &x, &f)?;
            x = out.x.clone();
            z = z_new.clone();
            f = out.f.clone();
            states.push(ReconstructionState {
                x: out.x,
                z: z_new,
                l,
                f: f.clone(),
            });
        }
        Ok(ForwardTrace { x0, states })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use alloc::vec;

    fn small_config() -> ModelConfig {
        ModelConfig {
            stages: 2,
            rank: 4,
            channels: 8,
            ratio: 0.25,
        }
    }

    fn random_measurements(
        params: &ModelParams<f64>,
        graph: &Graph<f64>,
        seed: u64,
    ) -> Measurements<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = params.operator.m();
        let data: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        Measurements {
            y: graph.constant(TensorData::matrix(m, 1, data).unwrap()),
            grid_rows: 1,
            grid_cols: 1,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config();
        let a: ModelParams<f32> = init_params(&cfg, 42).unwrap();
        let b: ModelParams<f32> = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c: ModelParams<f32> = init_params(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn initial_scalars_leave_positive_low_rank_weight() {
        let cfg = small_config();
        let p: ModelParams<f64> = init_params(&cfg, 0).unwrap();
        let s = &p.stages[0].scalars;
        assert!(s.rho1 + s.rho2 < 1.0);
        assert!((1.0 - s.rho1 - s.rho2 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.gamma, 0.01);
    }

    #[test]
    fn visit_orders_match_bind_order() {
        let cfg = small_config();
        let p: ModelParams<f64> = init_params(&cfg, 1).unwrap();
        let mut visit_names = Vec::new();
        p.visit(|name, _, _| visit_names.push(alloc::string::String::from(name)));
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let bind_names: Vec<_> = bound.named_leaves().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visit_names, bind_names);
        assert_eq!(visit_names.len(), 1 + 2 * (5 + 13 * 2));
    }

    #[test]
    fn pass_through_scalars_reproduce_x0() {
        let cfg = small_config();
        let mut p: ModelParams<f64> = init_params(&cfg, 5).unwrap();
        for stage in &mut p.stages {
            stage.scalars = StageParams {
                rho1: 1.0,
                rho2: 0.0,
                eta: 0.0,
                alpha: 1.0,
                gamma: 0.0,
            };
        }
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 77);
        let trace = bound.forward(&y).unwrap();
        let x0 = trace.x0.value();
        let xk = trace.final_x().value();
        let max_diff = x0
            .data()
            .iter()
            .zip(xk.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "pass-through drifted by {max_diff}");
    }

    #[test]
    fn z_update_coefficient_identities() {
        let cfg = small_config();
        let mut p: ModelParams<f64> = init_params(&cfg, 9).unwrap();
        // rho1 = 1, rho2 = 0, eta = 0 => z = x_prev
        p.stages[0].scalars = StageParams {
            rho1: 1.0,
            rho2: 0.0,
            eta: 0.0,
            alpha: 0.5,
            gamma: 0.01,
        };
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 3);
        let x0 = sensing::init_reconstruction(&bound.phi, &y).unwrap();
        let f0 = graph.zeros(vec![p.channels, 33, 33]).unwrap();
        let l = bound.lrgm_forward(&bound.stages[0], &x0, &x0, &f0).unwrap();
        let z = bound.z_update(&bound.stages[0], &x0, &x0, &l, &y).unwrap();
        assert_eq!(z.value().data(), x0.value().data());

        // rho1 = rho2 = 0, eta = 0 => z = l
        let mut p2: ModelParams<f64> = init_params(&cfg, 9).unwrap();
        p2.stages[0].scalars.rho1 = 0.0;
        p2.stages[0].scalars.rho2 = 0.0;
        p2.stages[0].scalars.eta = 0.0;
        let graph2 = Graph::new();
        let bound2 = p2.bind(&graph2, false);
        let y2 = random_measurements(&p2, &graph2, 3);
        let x02 = sensing::init_reconstruction(&bound2.phi, &y2).unwrap();
        let f02 = graph2.zeros(vec![p2.channels, 33, 33]).unwrap();
        let l2 = bound2.lrgm_forward(&bound2.stages[0], &x02, &x02, &f02).unwrap();
        let z2 = bound2.z_update(&bound2.stages[0], &x02, &x02, &l2, &y2).unwrap();
        let max_diff = z2
            .value()
            .data()
            .iter()
            .zip(l2.value().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn gdpm_coefficient_identities() {
        let cfg = small_config();
        let mut p: ModelParams<f64> = init_params(&cfg, 31).unwrap();
        // gamma = 0, alpha = 0 => x = z
        p.stages[0].scalars.gamma = 0.0;
        p.stages[0].scalars.alpha = 0.0;
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 4);
        let x0 = sensing::init_reconstruction(&bound.phi, &y).unwrap();
        let f0 = graph.zeros(vec![p.channels, 33, 33]).unwrap();
        let l = bound.lrgm_forward(&bound.stages[0], &x0, &x0, &f0).unwrap();
        let out = bound.gdpm_forward(&bound.stages[0], &x0, &l, &x0, &f0).unwrap();
        assert_eq!(out.x.value().data(), x0.value().data());

        // gamma = 0, alpha = 1 => x = x_prev regardless of z
        let mut p2: ModelParams<f64> = init_params(&cfg, 31).unwrap();
        p2.stages[0].scalars.gamma = 0.0;
        p2.stages[0].scalars.alpha = 1.0;
        let graph2 = Graph::new();
        let bound2 = p2.bind(&graph2, false);
        let y2 = random_measurements(&p2, &graph2, 4);
        let x02 = sensing::init_reconstruction(&bound2.phi, &y2).unwrap();
        let z2 = x02.scale(-3.0);
        let f02 = graph2.zeros(vec![p2.channels, 33, 33]).unwrap();
        let l2 = bound2.lrgm_forward(&bound2.stages[0], &x02, &z2, &f02).unwrap();
        let out2 = bound2.gdpm_forward(&bound2.stages[0], &z2, &l2, &x02, &f02).unwrap();
        assert_eq!(out2.x.value().data(), x02.value().data());
    }

    #[test]
    fn lrgm_zero_inputs_give_zero_l() {
        let cfg = small_config();
        let p: ModelParams<f64> = init_params(&cfg, 13).unwrap();
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let zero_img = graph.zeros(vec![1, 33, 33]).unwrap();
        let zero_f = graph.zeros(vec![p.channels, 33, 33]).unwrap();
        let l = bound
            .lrgm_forward(&bound.stages[0], &zero_img, &zero_img, &zero_f)
            .unwrap();
        assert!(l.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lrgm_matches_refactored_product() {
        let cfg = small_config();
        let p: ModelParams<f64> = init_params(&cfg, 23).unwrap();
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 6);
        let x0 = sensing::init_reconstruction(&bound.phi, &y).unwrap();
        let f0 = graph.zeros(vec![p.channels, 33, 33]).unwrap();

        let (pt, qt) = bound.lrgm_factors(&bound.stages[0], &x0, &x0, &f0).unwrap();
        let l = bound.lrgm_forward(&bound.stages[0], &x0, &x0, &f0).unwrap();

        let l_oracle = linalg::mat_mul(&pt.value(), &qt.value());
        let max_diff = l
            .value()
            .data()
            .iter()
            .zip(l_oracle.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "product oracle differs by {max_diff}");
    }

    #[test]
    fn gdpm_matches_closed_formula() {
        let cfg = small_config();
        let p: ModelParams<f64> = init_params(&cfg, 29).unwrap();
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 8);
        let x0 = sensing::init_reconstruction(&bound.phi, &y).unwrap();
        let f0 = graph.zeros(vec![p.channels, 33, 33]).unwrap();
        let l = bound.lrgm_forward(&bound.stages[0], &x0, &x0, &f0).unwrap();
        let z = bound.z_update(&bound.stages[0], &x0, &x0, &l, &y).unwrap();
        let out = bound.gdpm_forward(&bound.stages[0], &z, &l, &x0, &f0).unwrap();

        let (alpha, gamma) = (p.stages[0].scalars.alpha, p.stages[0].scalars.gamma);
        let (xv, zv, gv) = (x0.value(), z.value(), out.grad_estimate.value());
        let mut max_diff = 0.0f64;
        for i in 0..xv.numel() {
            let expect = alpha * xv.data()[i] + (1.0 - alpha) * zv.data()[i] - gamma * gv.data()[i];
            max_diff = max_diff.max((expect - out.x.value().data()[i]).abs());
        }
        assert!(max_diff < 1e-6, "closed formula differs by {max_diff}");
    }

    #[test]
    fn zero_stage_forward_returns_x0() {
        let cfg = small_config();
        let mut p: ModelParams<f64> = init_params(&cfg, 2).unwrap();
        p.stages.clear();
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 11);
        let trace = bound.forward(&y).unwrap();
        assert!(trace.states.is_empty());
        assert_eq!(trace.final_x().value(), trace.x0.value());
    }

    #[test]
    fn rank_larger_than_extent_rejected() {
        let cfg = ModelConfig {
            stages: 1,
            rank: 40,
            channels: 4,
            ratio: 0.25,
        };
        let p: ModelParams<f64> = init_params(&cfg, 2).unwrap();
        let graph = Graph::new();
        let bound = p.bind(&graph, false);
        let y = random_measurements(&p, &graph, 11);
        assert!(matches!(
            bound.forward(&y),
            Err(Error::RankTooLarge { rank: 40, max: 33 })
        ));
    }
}
