use crate::error::{Error, Result};

/// `eta_e = eta0 / (e + 1)^p` with `p` in `(1/2, 1]`, so that
/// `sum eta_e^2 < inf` while `sum eta_e = inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepsizeSchedule {
    eta0: f64,
    power: f64,
}

impl StepsizeSchedule {
    pub fn new(eta0: f64, power: f64) -> Result<Self> {
        if !(eta0 > 0.0) || !eta0.is_finite() {
            return Err(Error::invalid(format!("eta0 must be positive and finite, got {eta0}")));
        }
        if !(power > 0.5 && power <= 1.0) {
            return Err(Error::invalid(format!("schedule exponent must lie in (0.5, 1], got {power}")));
        }
        Ok(Self { eta0, power })
    }

    /// `p = 1`.
    pub fn harmonic(eta0: f64) -> Result<Self> {
        Self::new(eta0, 1.0)
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn eta(&self, epoch: usize) -> f64 {
        let base = (epoch + 1) as f64;
        if self.power == 1.0 {
            self.eta0 / base
        } else {
            self.eta0 / base.powf(self.power)
        }
    }
}

/// `(sum_{e < horizon} eta_e^2, sum_{e < horizon} eta_e)`, accumulated from the
/// smallest terms up.
pub fn schedule_energy(schedule: &StepsizeSchedule, horizon: usize) -> Result<(f64, f64)> {
    if horizon == 0 {
        return Err(Error::invalid("schedule horizon must be >= 1"));
    }
    let mut sq = 0.0;
    let mut lin = 0.0;
    for e in (0..horizon).rev() {
        let eta = schedule.eta(e);
        sq += eta * eta;
        lin += eta;
    }
    Ok((sq, lin))
}
