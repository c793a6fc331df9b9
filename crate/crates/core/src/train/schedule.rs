//! Learning-rate decay on validation-loss plateaus.

/// Plateau detection settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    /// An epoch counts as an improvement only if it beats the best loss so
    /// far by more than this (absolute) amount.
    pub delta: f64,
    /// Consecutive non-improving epochs that trigger a decay.
    pub patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            delta: 1e-4,
            patience: 1,
            decay_factor: 10.0,
            min_lr: 1e-6,
        }
    }
}

/// Incremental form of [`lr_on_plateau`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, cfg: PlateauConfig) -> Self {
        PlateauScheduler {
            cfg,
            lr: initial_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the learning rate
    /// for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if self.plateau_reached(val_loss) {
            self.lr = decayed(self.lr, &self.cfg);
        }
        self.lr
    }

    /// Updates the best loss and patience counter; true when this epoch
    /// completes a plateau.
    fn plateau_reached(&mut self, val_loss: f64) -> bool {
        match self.best {
            Some(best) if !(best - val_loss > self.cfg.delta) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.cfg.patience {
                    self.bad_epochs = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.bad_epochs = 0;
            }
        }
        false
    }
}

fn decayed(lr: f64, cfg: &PlateauConfig) -> f64 {
    (lr / cfg.decay_factor).max(cfg.min_lr).min(lr)
}

/// Learning rate after the last epoch of `history`, given the rate in
/// effect during it. The patience counter is replayed from the full
/// history, so this is a pure function of its arguments.
pub fn lr_on_plateau(history: &[f64], current_lr: f64, cfg: &PlateauConfig) -> f64 {
    let Some((last, earlier)) = history.split_last() else {
        return current_lr;
    };
    let mut replay = PlateauScheduler::new(current_lr, *cfg);
    for &loss in earlier {
        replay.plateau_reached(loss);
    }
    if replay.plateau_reached(*last) {
        decayed(current_lr, cfg)
    } else {
        current_lr
    }
}
