//! The ReDimNet network: stem, stages over a shared 1D accumulator,
//! attentive statistics pooling and embedding head.

mod config;

use crate::audio::FeatureConfig;
use crate::error::{Error, Result};
use crate::nn::{
    join, to_1d, to_2d, AttentiveStatsPool, BatchNorm, Block1d, Conv2d, Cost, Init, Linear, Mode, Module, Param,
    Stage2d,
};
use crate::tensor::{macs, no_grad, Float, Tensor};

pub use config::{ModelConfig, StageConfig, StageShapeRow};

/// Frames in the 2-second segment used for complexity figures.
pub fn frames_for_two_seconds() -> usize {
    FeatureConfig::default().frames_for_seconds(2.0).expect("2 s exceeds one frame")
}

/// One stage: 2D block on the unfolded accumulator, then a 1D block.
#[derive(Debug)]
pub struct Stage<T: Float> {
    pub block2d: Stage2d<T>,
    pub block1d: Block1d<T>,
}

impl<T: Float> Module<T> for Stage<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.block2d.visit(&join(prefix, "block2d"), f);
        self.block1d.visit(&join(prefix, "block1d"), f);
    }
}

#[derive(Debug)]
pub struct Model<T: Float = f32> {
    cfg: ModelConfig,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    pub stages: Vec<Stage<T>>,
    pub pool: AttentiveStatsPool<T>,
    pub head: Linear<T>,
    pub head_bn: BatchNorm<T>,
}

impl<T: Float> Model<T> {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let (c, f, d) = (cfg.c, cfg.f, cfg.width());
        let stem_conv = Conv2d::same(&mut init, 1, c, 3, 1, false);
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut shape = (c, f);
        for (i, s) in cfg.stages.iter().enumerate() {
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("model.stages[{i}] (stage {}): {m}", i + 1)),
                other => other,
            };
            let block2d = Stage2d::new(&mut init, shape, s.sf, c * s.mult, s.n2d, s.kind2d).map_err(at)?;
            shape = block2d.output;
            let block1d = Block1d::new(&mut init, s.kind1d, d, cfg.reduction, cfg.heads).map_err(at)?;
            stages.push(Stage { block2d, block1d });
        }
        Ok(Model {
            cfg: cfg.clone(),
            stem_conv,
            stem_bn: BatchNorm::new(c),
            stages,
            pool: AttentiveStatsPool::new(&mut init, d, cfg.attn_hidden),
            head: Linear::new(&mut init, 2 * d, cfg.embedding_dim, false),
            head_bn: BatchNorm::new(cfg.embedding_dim),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Final 1D accumulator `(N, C*F, T)` for features `(N, F, T)`.
    pub fn trunk(&self, features: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let f = self.cfg.f;
        let [n, rows, t] = *features.shape() else {
            return Err(Error::Input(format!("features must be (N, F, T), got {:?}", features.shape())));
        };
        if rows != f || t == 0 || n == 0 {
            return Err(Error::Input(format!(
                "features of shape {:?} do not match the model's {f} frequency bins",
                features.shape()
            )));
        }
        let x = features.reshape(&[n, 1, f, t])?;
        let x = self.stem_bn.forward(&self.stem_conv.forward(&x)?, mode)?.gelu();
        let mut acc = to_1d(&x)?;
        for (i, stage) in self.stages.iter().enumerate() {
            let (ci, fi) = stage.block2d.input;
            let y = stage.block2d.forward(&to_2d(&acc, ci, fi)?, mode)?;
            let z = stage.block1d.forward(&to_1d(&y)?)?;
            if z.shape() != acc.shape() {
                return Err(Error::State(format!(
                    "stage {} changed the accumulator from {:?} to {:?}",
                    i + 1,
                    acc.shape(),
                    z.shape()
                )));
            }
            acc = acc.add(&z)?;
        }
        Ok(acc)
    }

    /// Embeddings `(N, embedding_dim)` for features `(N, F, T)`.
    pub fn forward(&self, features: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pooled = self.pool.forward(&self.trunk(features, mode)?)?;
        self.head_bn.forward(&self.head.forward(&pooled)?, mode)
    }

    /// Embedding of a single `(F, T)` utterance in eval mode.
    pub fn embed(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        let [f, t] = *features.shape() else {
            return Err(Error::Input(format!("expected (F, T) features, got {:?}", features.shape())));
        };
        no_grad(|| Ok(self.forward(&features.reshape(&[1, f, t])?, Mode::Eval)?.to_vec()))
    }

    /// Trainable scalar weights, norms and biases included; running statistics excluded.
    pub fn count_params(&self) -> usize {
        self.param_count()
    }

    /// MACs of one eval forward pass over `seconds` of audio, counted by instrumenting the kernels.
    pub fn count_macs(&self, seconds: f64) -> Result<u64> {
        let t = FeatureConfig::default()
            .frames_for_seconds(seconds)
            .ok_or_else(|| Error::Input(format!("{seconds} s is shorter than one frame")))?;
        let x = Tensor::zeros(&[1, self.cfg.f, t]);
        let (r, n) = macs::count(|| no_grad(|| self.forward(&x, Mode::Eval)));
        r?;
        Ok(n)
    }
}

impl<T: Float> Module<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        self.stages.visit(&join(prefix, "stages"), f);
        self.pool.visit(&join(prefix, "pool"), f);
        self.head.visit(&join(prefix, "head.linear"), f);
        self.head_bn.visit(&join(prefix, "head.bn"), f);
    }
}

/// Closed-form parameter and MAC totals for `cfg` at `t` frames, without building the model.
pub fn analytic_cost(cfg: &ModelConfig, t: usize) -> Result<Cost> {
    cfg.validate()?;
    let (c, f, d) = (cfg.c, cfg.f, cfg.width());
    let mut cost = Cost::conv(1, c, 9, 1, f * t, false) + Cost::norm(c);
    let mut shape = (c, f);
    for s in &cfg.stages {
        cost += Stage2d::<f32>::cost(shape, s.sf, c * s.mult, s.n2d, s.kind2d, t);
        shape = (c * s.mult, shape.1 / s.sf);
        cost += Block1d::<f32>::cost(s.kind1d, d, cfg.reduction, t);
    }
    cost += AttentiveStatsPool::<f32>::cost(d, cfg.attn_hidden, t);
    cost += Cost::linear(2 * d, cfg.embedding_dim, 1, false) + Cost::norm(cfg.embedding_dim);
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Block1dKind, Block2dKind};
    use crate::tensor::ops::test_util::randn;

    fn small(kind2d: Block2dKind, kind1d: Block1dKind) -> ModelConfig {
        ModelConfig { f: 16, reduction: 4, heads: 2, attn_hidden: 8, embedding_dim: 12, ..ModelConfig::default_schedule(2, [1, 1, 1, 1, 1], kind2d, kind1d) }
    }

    #[test]
    fn table_one_pattern() {
        let cfg = ModelConfig::default_schedule(8, [1; 5], Block2dKind::ConvNeXt2d, Block1dKind::Mha);
        let rows = cfg.stage_shapes().unwrap();
        let strides: Vec<_> = rows.iter().map(|r| r.sf).collect();
        let chans: Vec<_> = rows.iter().map(|r| r.out_channels).collect();
        let freqs: Vec<_> = rows.iter().map(|r| r.out_freq).collect();
        assert_eq!(strides, [1, 2, 2, 2, 1]);
        assert_eq!(chans, [8, 16, 32, 64, 64]);
        assert_eq!(freqs, [72, 36, 18, 9, 9]);
        assert!(rows.iter().all(|r| r.volume(132) == 8 * 72 * 132 && r.in_volume(132) == 8 * 72 * 132));
        assert_eq!((rows[2].in_channels, rows[2].in_freq, rows[2].out_channels, rows[2].out_freq), (16, 36, 32, 18));
    }

    #[test]
    fn volume_violations_name_the_stage() {
        let mut cfg = ModelConfig::default_schedule(4, [1; 5], Block2dKind::ConvNeXt2d, Block1dKind::Skip);
        cfg.stages[1].sf = 1;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.stages[1]"), "{err}");
        let mut cfg = ModelConfig::default_schedule(4, [1; 5], Block2dKind::ConvNeXt2d, Block1dKind::Skip);
        cfg.f = 60;
        assert!(cfg.validate().unwrap_err().to_string().contains("model.stages[3]"));
        let single = ModelConfig { stages: vec![cfg.stages[0].clone()], ..cfg };
        let row = single.stage_shapes().unwrap()[0];
        assert_eq!((row.in_channels, row.in_freq), (row.out_channels, row.out_freq));
    }

    #[test]
    fn forward_shapes_and_time_extent() {
        let cfg = small(Block2dKind::ConvNeXt2d, Block1dKind::Conv1dMha);
        let m = Model::<f64>::build(&cfg, 0).unwrap();
        let x = randn(&[2, 16, 11], 1);
        let acc = m.trunk(&x, Mode::Train).unwrap();
        assert_eq!(acc.shape(), &[2, 32, 11]);
        assert_eq!(m.forward(&x, Mode::Train).unwrap().shape(), &[2, 12]);
        assert!(matches!(m.forward(&randn(&[2, 15, 11], 1), Mode::Eval), Err(Error::Input(_))));
    }

    #[test]
    fn identity_stages_pass_stem_output_to_pooling() {
        let mut cfg = small(Block2dKind::ResNetBasic2d, Block1dKind::Skip);
        for s in &mut cfg.stages {
            s.sf = 1;
            s.mult = 1;
        }
        let m = Model::<f64>::build(&cfg, 0).unwrap();
        let x = randn(&[2, 16, 7], 1);
        let stem = to_1d(&m.stem_bn.forward(&m.stem_conv.forward(&x.reshape(&[2, 1, 16, 7]).unwrap()).unwrap(), Mode::Eval).unwrap().gelu()).unwrap();
        let acc = m.trunk(&x, Mode::Eval).unwrap();
        // every stage adds an identity copy of the running sum
        let scale = 2f64.powi(5);
        assert!(acc.data().iter().zip(stem.data()).all(|(a, s)| (a - scale * s).abs() < 1e-9));
        assert!(m.forward(&x, Mode::Eval).unwrap().all_finite());
    }

    #[test]
    fn eval_forward_is_bit_reproducible() {
        let cfg = small(Block2dKind::FwseResNet2d, Block1dKind::Mha);
        let x = randn(&[3, 16, 9], 2).cast::<f32>();
        let a = Model::<f32>::build(&cfg, 5).unwrap().forward(&x, Mode::Eval).unwrap();
        let b = Model::<f32>::build(&cfg, 5).unwrap().forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn analytic_counts_match_instrumented() {
        for kind2d in Block2dKind::ALL {
            for kind1d in Block1dKind::ALL {
                let cfg = small(kind2d, kind1d);
                let m = Model::<f32>::build(&cfg, 0).unwrap();
                let cost = analytic_cost(&cfg, 132).unwrap();
                assert_eq!(cost.params as usize, m.count_params(), "{kind2d}/{kind1d}");
                assert_eq!(cost.macs, m.count_macs(2.0).unwrap(), "{kind2d}/{kind1d}");
            }
        }
    }

    #[test]
    fn embedding_dim_delta_is_head_only() {
        let cfg = small(Block2dKind::ConvNeXt2d, Block1dKind::Fc);
        let wide = ModelConfig { embedding_dim: 24, ..cfg.clone() };
        let a = Model::<f32>::build(&cfg, 0).unwrap().count_params();
        let b = Model::<f32>::build(&wide, 0).unwrap().count_params();
        // linear 2D -> E without bias, plus BN gain and shift
        let d = cfg.width();
        assert_eq!(b - a, 2 * d * 12 + 2 * 12);
    }
}
