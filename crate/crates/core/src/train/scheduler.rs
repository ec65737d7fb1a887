use serde::{Deserialize, Serialize};

/// Smallest decrease that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-6;

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub learning_rate: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(learning_rate: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            learning_rate,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn step(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best - PLATEAU_THRESHOLD => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.learning_rate *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        self.learning_rate
    }
}

/// Learning rate after replaying `history` through a fresh scheduler.
pub fn plateau_schedule(history: &[f64], learning_rate: f64, factor: f64, patience: usize) -> f64 {
    let mut s = PlateauScheduler::new(learning_rate, factor, patience);
    history.iter().fold(learning_rate, |_, &l| s.step(l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_history_keeps_rate() {
        let h: Vec<f64> = (0..30).map(|i| 10.0 - i as f64).collect();
        assert_eq!(plateau_schedule(&h, 1e-4, 0.5, 8), 1e-4);
    }

    #[test]
    fn one_plateau_halves_once() {
        assert_eq!(plateau_schedule(&[1.0; 9], 1e-4, 0.5, 8), 5e-5);
        assert_eq!(plateau_schedule(&[1.0; 8], 1e-4, 0.5, 8), 1e-4);
        assert_eq!(plateau_schedule(&[1.0; 16], 1e-4, 0.5, 8), 5e-5);
    }

    #[test]
    fn two_plateaus_quarter_the_rate() {
        assert_eq!(plateau_schedule(&[1.0; 17], 1e-4, 0.5, 8), 2.5e-5);
    }

    #[test]
    fn tiny_improvements_do_not_count() {
        let h: Vec<f64> = (0..3).map(|i| 1.0 - 1e-7 * i as f64).collect();
        assert_eq!(plateau_schedule(&h, 1.0, 0.5, 2), 0.5);
    }
}
