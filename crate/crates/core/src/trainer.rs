//! rmsprop training with plateau learning-rate decay, early stopping and
//! best-validation model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{Network, NetworkConfig, NetworkParams};
use crate::objective::{chimera_loss, chimera_loss_with_gradient, MaskTerm, TargetMatrix};
use crate::signal::{log_magnitude_features, MixtureScene};
use crate::simplex::TargetMode;

/// Smallest decrease of the best validation loss that counts as improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub target_mode: TargetMode,
    /// Weight of the DC term; `1` trains the embedding head alone.
    pub alpha: f64,
    /// Drives batch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.5,
            plateau_patience: 5,
            stop_patience: 30,
            batch_size: 32,
            max_epochs: 200,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            target_mode: TargetMode::Simplex,
            alpha: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid(format!("decay factor must lie in (0, 1), got {}", self.decay_factor)));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return Err(Error::invalid("patience values must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.learning_rate) || !(0.0..1.0).contains(&self.rms_decay) || !positive(self.rms_epsilon) {
            return Err(Error::invalid("learning rate, rms decay and rms epsilon out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Validation loss of the initial parameters.
    pub initial_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            ));
        }
        out
    }
}

/// One utterance prepared for training: features, targets per kept bin and
/// the magnitudes needed by the mask term.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub features: Matrix,
    pub mix_mag: Matrix,
    pub src_mags: Vec<Matrix>,
    /// Dominant speaker of every kept bin.
    pub labels: Vec<usize>,
    /// Kept bin positions in `t·F + f` order.
    pub kept: Vec<usize>,
}

impl Utterance {
    pub fn from_scene(scene: &MixtureScene, context: usize, drop_silence: bool) -> Result<Self> {
        let kept = scene.kept_bins(drop_silence);
        if kept.is_empty() {
            return Err(Error::Degenerate("scene has no bins above the silence threshold".into()));
        }
        Ok(Self {
            features: log_magnitude_features(&scene.mix_spec, context)?,
            mix_mag: scene.mix_mag(),
            src_mags: scene.src_mags.clone(),
            labels: kept.iter().map(|&i| scene.indicator[i]).collect(),
            kept,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.mix_mag.rows() * self.mix_mag.cols()
    }

    pub fn targets(&self, mode: TargetMode) -> Result<TargetMatrix> {
        TargetMatrix::from_labels(&self.labels, self.src_mags.len(), mode)
    }
}

/// Chimera-weighted loss of one utterance and, on request, its parameter gradient.
pub fn utterance_loss(
    net: &Network,
    utt: &Utterance,
    targets: &TargetMatrix,
    alpha: f64,
    with_gradient: bool,
) -> Result<(f64, Option<NetworkParams>)> {
    let trace = net.forward_trace(&utt.features)?;
    let all_kept = utt.kept.len() == utt.n_bins();
    let selected;
    let v = if all_kept {
        &trace.output.embeddings
    } else {
        selected = trace.output.embeddings.select_rows(&utt.kept);
        &selected
    };
    let masks = trace.output.masks.as_deref().unwrap_or(&[]);
    if alpha < 1.0 && masks.is_empty() {
        return Err(Error::invalid("alpha below 1 needs a network with an MI head"));
    }
    let term = MaskTerm {
        masks,
        mix_mag: &utt.mix_mag,
        src_mags: &utt.src_mags,
    };
    if !with_gradient {
        return Ok((chimera_loss(v, targets, term, alpha)?.value, None));
    }
    let loss = chimera_loss_with_gradient(v, targets, term, alpha)?;
    let grad_v = loss.grad_embeddings.map(|g| {
        if all_kept {
            g
        } else {
            let mut full = Matrix::zeros(utt.n_bins(), g.cols());
            for (r, &i) in utt.kept.iter().enumerate() {
                full.row_mut(i).copy_from_slice(g.row(r));
            }
            full
        }
    });
    let grads = net.backward(&trace, grad_v.as_ref(), loss.grad_masks.as_deref())?;
    Ok((loss.value, Some(grads)))
}

/// Running mean of squared gradients, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub mean_square: NetworkParams,
}

impl RmsPropState {
    pub fn new(params: &NetworkParams) -> Self {
        Self {
            mean_square: params.zeros_like(),
        }
    }
}

/// `s ← ρs + (1−ρ)g²`, `θ ← θ − lr·g/(√s + ε)` on flat slices.
pub fn rmsprop_update(params: &mut [f64], grads: &[f64], state: &mut [f64], lr: f64, rho: f64, eps: f64) {
    for ((p, &g), s) in params.iter_mut().zip(grads).zip(state.iter_mut()) {
        *s = rho * *s + (1.0 - rho) * g * g;
        *p -= lr * g / (s.sqrt() + eps);
    }
}

/// Applies one rmsprop step. Leaves everything untouched when the gradient
/// contains a non-finite value.
pub fn rmsprop_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut RmsPropState,
    lr: f64,
    rms_decay: f64,
    rms_epsilon: f64,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let g = grads.tensors();
    let s = state.mean_square.tensors_mut();
    if g.len() != s.len() || params.n_params() != grads.n_params() {
        return Err(Error::invalid("gradient does not match parameters"));
    }
    for ((p, g), s) in params.tensors_mut().into_iter().zip(g).zip(s) {
        rmsprop_update(p, g, s, lr, rms_decay, rms_epsilon);
    }
    Ok(())
}

/// Mean loss over a dataset, evaluated in order.
pub fn mean_loss(net: &Network, data: &[Utterance], targets: &[TargetMatrix], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for (u, y) in data.iter().zip(targets) {
        total += utterance_loss(net, u, y, alpha, false)?.0;
    }
    Ok(total / data.len() as f64)
}

fn prepare_targets(data: &[Utterance], mode: TargetMode) -> Result<Vec<TargetMatrix>> {
    data.iter().map(|u| u.targets(mode)).collect()
}

/// Trains a network and returns the parameters of the best validation epoch.
pub fn train(
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    train_set: &[Utterance],
    val_set: &[Utterance],
) -> Result<(Network, TrainLog)> {
    train_config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut net = Network::new(net_config.clone())?;
    let mut log = TrainLog::default();
    if train_config.max_epochs == 0 {
        return Ok((net, log));
    }

    let alpha = train_config.alpha;
    let train_targets = prepare_targets(train_set, train_config.target_mode)?;
    let val_targets = prepare_targets(val_set, train_config.target_mode)?;
    log.initial_val_loss = Some(mean_loss(&net, val_set, &val_targets, alpha)?);

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut state = RmsPropState::new(&net.params);
    let mut lr = train_config.learning_rate;
    let mut best = f64::INFINITY;
    let mut best_params = net.params.clone();
    let (mut plateau, mut stale) = (0, 0);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..train_config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for (b, batch) in order.chunks(train_config.batch_size).enumerate() {
            let mut sum = net.params.zeros_like();
            for &i in batch {
                let (loss, grads) = utterance_loss(&net, &train_set[i], &train_targets[i], alpha, true)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
                }
                train_total += loss;
                sum.add_scaled(&grads.expect("gradient requested"), 1.0);
            }
            let mut mean = sum.zeros_like();
            mean.add_scaled(&sum, 1.0 / batch.len() as f64);
            rmsprop_step(
                &mut net.params,
                &mean,
                &mut state,
                lr,
                train_config.rms_decay,
                train_config.rms_epsilon,
            )
            .map_err(|e| Error::NonFinite(format!("{e} at epoch {epoch}, batch {b}")))?;
        }
        let val_loss = mean_loss(&net, val_set, &val_targets, alpha)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: train_total / train_set.len() as f64,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });

        if val_loss < best - MIN_IMPROVEMENT {
            best = val_loss;
            best_params = net.params.clone();
            log.best_epoch = Some(epoch);
            plateau = 0;
            stale = 0;
        } else {
            plateau += 1;
            stale += 1;
            if stale >= train_config.stop_patience {
                break;
            }
            if plateau >= train_config.plateau_patience {
                lr *= train_config.decay_factor;
                plateau = 0;
            }
        }
    }
    net.params = best_params;
    Ok((net, log))
}
