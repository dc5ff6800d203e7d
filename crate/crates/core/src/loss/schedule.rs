use serde::{Deserialize, Serialize};

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    /// Large-margin finetuning.
    Lm,
}

impl std::str::FromStr for Stage {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "lm" => Ok(Stage::Lm),
            _ => Err(crate::error::Error::Usage(format!("unknown stage {s:?}; expected pretrain or lm"))),
        }
    }
}

/// Margin held at zero, then rising exponentially to its final value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub final_margin: f64,
    pub start: f64,
    pub ramp: f64,
    /// Curvature of the rise.
    pub lambda: f64,
    pub lm_margin: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        MarginSchedule { final_margin: 0.2, start: 20.0, ramp: 20.0, lambda: 5.0, lm_margin: 0.5 }
    }
}

impl MarginSchedule {
    /// Margin at a (possibly fractional) epoch.
    pub fn at(&self, epoch: f64, stage: Stage) -> f64 {
        if stage == Stage::Lm {
            return self.lm_margin;
        }
        if epoch < self.start {
            return 0.0;
        }
        if epoch >= self.start + self.ramp {
            return self.final_margin;
        }
        let u = (epoch - self.start) / self.ramp;
        self.final_margin * (self.lambda * u).exp_m1() / self.lambda.exp_m1()
    }
}

/// Margin under the default schedule.
pub fn margin_schedule(epoch: f64, stage: Stage) -> f64 {
    MarginSchedule::default().at(epoch, stage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakpoints() {
        assert_eq!(margin_schedule(10.0, Stage::Pretrain), 0.0);
        assert_eq!(margin_schedule(100.0, Stage::Pretrain), 0.2);
        assert_eq!(margin_schedule(40.0, Stage::Pretrain), 0.2);
        for e in [0.0, 3.0, 55.0] {
            assert_eq!(margin_schedule(e, Stage::Lm), 0.5);
        }
        let mid = margin_schedule(30.0, Stage::Pretrain);
        let expect = 0.2 * (2.5f64.exp() - 1.0) / (5f64.exp() - 1.0);
        assert!((mid - expect).abs() < 1e-15);
        assert!((mid - 0.01517).abs() < 1e-5);
    }

    #[test]
    fn monotone_and_continuous() {
        let s = MarginSchedule::default();
        let mut prev = 0.0;
        for i in 0..=6000 {
            let m = s.at(i as f64 / 100.0, Stage::Pretrain);
            assert!(m >= prev);
            prev = m;
        }
        for knot in [20.0, 40.0] {
            let gap = (s.at(knot, Stage::Pretrain) - s.at(knot - 1e-12, Stage::Pretrain)).abs();
            assert!(gap < 1e-12, "{knot}: {gap}");
        }
    }
}
