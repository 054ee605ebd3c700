use super::optim::OptimState;
use crate::tensor::Float;

/// Divides the learning rate by `factor` once the epoch loss has failed to
/// improve strictly on its best value for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: Float,
    pub best_loss: Float,
    pub epochs_since_improvement: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(10, 10.0)
    }
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: Float) -> Self {
        PlateauSchedule {
            patience,
            factor,
            best_loss: Float::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Feeds one epoch loss; returns true when the learning rate was reduced.
    pub fn update(&mut self, epoch_loss: Float, state: &mut OptimState) -> bool {
        if epoch_loss < self.best_loss {
            self.best_loss = epoch_loss;
            self.epochs_since_improvement = 0;
            return false;
        }
        self.epochs_since_improvement += 1;
        if self.epochs_since_improvement >= self.patience {
            state.learning_rate /= self.factor;
            self.epochs_since_improvement = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::OptimConfig;

    fn state() -> OptimState {
        OptimState::new(&[], OptimConfig::default()).unwrap()
    }

    #[test]
    fn decreasing_losses_keep_rate() {
        let (mut s, mut st) = (PlateauSchedule::default(), state());
        for e in 0..50 {
            assert!(!s.update(1.0 - e as Float * 0.01, &mut st));
        }
        assert_eq!(st.learning_rate, 8e-3);
    }

    #[test]
    fn improvement_resets_counter() {
        let (mut s, mut st) = (PlateauSchedule::default(), state());
        for _ in 0..9 {
            s.update(1.0, &mut st);
        }
        s.update(0.5, &mut st);
        assert_eq!(s.epochs_since_improvement, 0);
        for _ in 0..9 {
            s.update(0.5, &mut st);
        }
        assert_eq!(st.learning_rate, 8e-3);
    }
}
