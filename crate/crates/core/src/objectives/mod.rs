//! Training losses, evaluation metrics, the training step and synthetic data.

mod fit;
mod losses;
mod metrics;
mod toy;
mod train;

pub use fit::{fit, mean_enhanced_si_sdr, mean_loss, FitOptions, FitReport, TrainPair};
pub use losses::{compute_losses, phase_loss, LossTerms, LossWeights, SpectralView};
pub use metrics::{mean_std, si_sdr, ssnr, FileMetrics, MetricReport, SI_SDR_CAP_DB, SSNR_MAX_DB, SSNR_MIN_DB, SSNR_SEGMENT};
pub use toy::{filtered_noise, harmonic_speech, toy_pairs, ToyPair, CLEAN_RMS, SNR_GRID_DB};
pub use train::{batch, loss_and_grads, losses_on_graph, LossValues, Trainer};
