//! Margin-based classification losses over speaker embeddings.

mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Module, Param};
use crate::tensor::{Float, Tensor};

pub use schedule::{margin_schedule, MarginSchedule, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Additive angular margin softmax.
    Aam,
    /// AAM with sub-centers per class.
    AamSc,
    /// SphereFace2, identity similarity map.
    Sf2A,
    /// SphereFace2 with the warped similarity `g(z) = 2((z+1)/2)^t - 1`.
    Sf2C,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Aam, LossKind::AamSc, LossKind::Sf2A, LossKind::Sf2C];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Aam => "aam",
            LossKind::AamSc => "aam_sc",
            LossKind::Sf2A => "sf2_a",
            LossKind::Sf2C => "sf2_c",
        }
    }

    fn is_sf2(self) -> bool {
        matches!(self, LossKind::Sf2A | LossKind::Sf2C)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind {s:?}; expected aam, aam_sc, sf2_a or sf2_c")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Logit scale `s` for AAM, radius `r` for SphereFace2.
    pub scale: f64,
    /// Final pretraining margin.
    pub margin: f64,
    /// Sub-centers per class (`aam_sc` only).
    pub subcenters: usize,
    /// SphereFace2 positive/negative balance.
    pub lambda: f64,
    /// SphereFace2 type C exponent.
    pub t: f64,
    /// Margin used during large-margin finetuning.
    pub lm_margin: f64,
    /// Epoch at which the margin starts to rise.
    pub margin_start: f64,
    /// Epochs taken by the exponential rise.
    pub margin_ramp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Aam,
            scale: 32.0,
            margin: 0.2,
            subcenters: 3,
            lambda: 0.7,
            t: 3.0,
            lm_margin: 0.5,
            margin_start: 20.0,
            margin_ramp: 20.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0) {
            return bad(format!("loss.scale must be positive, got {}", self.scale));
        }
        for (name, m) in [("margin", self.margin), ("lm_margin", self.lm_margin)] {
            if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
                return bad(format!("loss.{name} must lie in [0, pi/2), got {m}"));
            }
        }
        if self.kind == LossKind::AamSc && self.subcenters == 0 {
            return bad("loss.subcenters must be at least 1".into());
        }
        if self.kind.is_sf2() && !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("loss.lambda must lie in (0, 1), got {}", self.lambda));
        }
        if self.kind == LossKind::Sf2C && !(self.t >= 1.0) {
            return bad(format!("loss.t must be at least 1, got {}", self.t));
        }
        if !(self.margin_start >= 0.0 && self.margin_ramp > 0.0) {
            return bad("loss.margin_start must be >= 0 and loss.margin_ramp > 0".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> MarginSchedule {
        MarginSchedule {
            final_margin: self.margin,
            start: self.margin_start,
            ramp: self.margin_ramp,
            lm_margin: self.lm_margin,
            ..MarginSchedule::default()
        }
    }

    fn centers(&self) -> usize {
        if self.kind == LossKind::AamSc {
            self.subcenters
        } else {
            1
        }
    }
}

/// SphereFace2 type C similarity warp; `g(-1) = -1`, `g(1) = 1`.
pub fn sf2_g(z: f64, t: f64) -> f64 {
    2.0 * ((z + 1.0) / 2.0).powf(t) - 1.0
}

/// `cos(theta + m)` for `c = cos(theta)`, falling back to the monotone
/// `c - m sin(m)` once `theta + m` would pass pi.
pub fn additive_angular(c: f64, m: f64) -> f64 {
    if c > -m.cos() {
        c * m.cos() - (1.0 - c * c).max(0.0).sqrt() * m.sin()
    } else {
        c - m * m.sin()
    }
}

/// Class weights (and the SphereFace2 bias) with the loss evaluation.
#[derive(Debug)]
pub struct ClassifierHead<T: Float> {
    pub cfg: LossConfig,
    pub n_classes: usize,
    /// `(n_classes * K, D)`, sub-centers of a class adjacent.
    pub weight: Param<T>,
    /// Learnable scalar bias of SphereFace2.
    pub bias: Option<Param<T>>,
}

impl<T: Float> ClassifierHead<T> {
    pub fn new(cfg: &LossConfig, n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {n_classes}")));
        }
        let rows = n_classes * cfg.centers();
        Ok(ClassifierHead {
            cfg: cfg.clone(),
            n_classes,
            weight: Param::trainable(Init::new(seed).kaiming(&[rows, dim], dim)),
            bias: cfg.kind.is_sf2().then(|| Param::trainable(Tensor::zeros(&[1]))),
        })
    }

    /// Cosine similarities `(N, n_classes)`, max over sub-centers.
    pub fn cosines(&self, emb: &Tensor<T>) -> Result<Tensor<T>> {
        let dim = self.weight.shape()[1];
        if emb.rank() != 2 || emb.dim(1) != dim {
            return Err(Error::Input(format!("embeddings {:?} do not match classifier width {dim}", emb.shape())));
        }
        let cos = unit_rows(emb)?.linear(&unit_rows(&self.weight.get())?, None)?;
        let k = self.cfg.centers();
        if k == 1 {
            return Ok(cos);
        }
        cos.reshape(&[emb.dim(0), self.n_classes, k])?.max_axis(2, false)
    }

    fn one_hot(&self, labels: &[usize], n: usize) -> Result<Tensor<T>> {
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
        }
        let mut data = vec![T::zero(); n * self.n_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.n_classes {
                return Err(Error::Input(format!("label {y} out of range for {} classes", self.n_classes)));
            }
            data[i * self.n_classes + y] = T::one();
        }
        Tensor::new(data, &[n, self.n_classes])
    }

    /// Mean loss over the batch with angular or additive margin `margin`.
    pub fn loss(&self, emb: &Tensor<T>, labels: &[usize], margin: f64) -> Result<Tensor<T>> {
        let cos = self.cosines(emb)?;
        let n = emb.dim(0);
        let onehot = self.one_hot(labels, n)?;
        match self.cfg.kind {
            LossKind::Aam | LossKind::AamSc => {
                let target = cos.mul(&onehot)?.sum_axes(&[1], true)?;
                let phi = angular_margin(&target, margin);
                let logits = cos.add(&onehot.mul(&phi.sub(&target)?)?)?.mul_scalar(T::of(self.cfg.scale));
                let nll = logits.log_softmax(1)?.mul(&onehot)?.sum();
                Ok(nll.mul_scalar(T::of(-1.0 / n as f64)))
            }
            LossKind::Sf2A | LossKind::Sf2C => {
                let (r, lambda) = (self.cfg.scale, self.cfg.lambda);
                let g = if self.cfg.kind == LossKind::Sf2C {
                    let t = self.cfg.t;
                    cos.add_scalar(T::one()).mul_scalar(T::of(0.5)).clamp_min(T::zero()).powf(T::of(t)).mul_scalar(T::of(2.0)).add_scalar(-T::one())
                } else {
                    cos
                };
                let b = self.bias.as_ref().expect("sphereface2 head has a bias").get();
                let pos = g.add_scalar(T::of(-margin)).mul_scalar(T::of(r)).add(&b)?.neg().softplus();
                let neg = g.add_scalar(T::of(margin)).mul_scalar(T::of(r)).add(&b)?.softplus();
                let negmask = onehot.neg().add_scalar(T::one());
                let total = pos
                    .mul(&onehot)?
                    .mul_scalar(T::of(lambda / r))
                    .add(&neg.mul(&negmask)?.mul_scalar(T::of((1.0 - lambda) / r)))?
                    .sum();
                Ok(total.mul_scalar(T::of(1.0 / n as f64)))
            }
        }
    }
}

impl<T: Float> Module<T> for ClassifierHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

fn unit_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let norm = x.square().sum_axes(&[1], true)?.clamp_min(T::of(1e-24)).sqrt();
    x.div(&norm)
}

fn angular_margin<T: Float>(c: &Tensor<T>, m: f64) -> Tensor<T> {
    let (cm, sm) = (m.cos(), m.sin());
    c.unary(
        "angular_margin",
        move |c| T::of(additive_angular(c.as_f64(), m)),
        move |c, _| {
            let c = c.as_f64();
            let d = if c > -cm {
                let s = (1.0 - c * c).max(1e-24).sqrt();
                cm + c * sm / s
            } else {
                1.0
            };
            T::of(d)
        },
    )
}
