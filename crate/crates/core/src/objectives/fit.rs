use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real};

use super::metrics::si_sdr;
use super::train::{batch, LossValues, Trainer};

/// A named clean/noisy pair of equal length.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub name: String,
    pub clean: AudioBuffer,
    pub noisy: AudioBuffer,
}

impl TrainPair {
    pub fn new(name: impl Into<String>, clean: AudioBuffer, noisy: AudioBuffer) -> Result<Self> {
        let name = name.into();
        if clean.len() != noisy.len() || clean.sample_rate != noisy.sample_rate {
            return Err(Error::Audio(format!(
                "{name}: clean has {} samples at {} Hz, noisy {} at {} Hz",
                clean.len(),
                clean.sample_rate,
                noisy.len(),
                noisy.sample_rate
            )));
        }
        Ok(Self { name, clean, noisy })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub steps: usize,
    pub batch: usize,
    /// Training segment length in samples; longer clips are cropped at a random
    /// offset, shorter ones zero-padded.
    pub segment: usize,
    /// Validate every this many steps (and after the last one).
    pub eval_every: usize,
    /// Drives the clip order and crop offsets.
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Training-batch losses, one row per step, numbered from 1.
    pub log: Vec<(usize, LossValues)>,
    /// Loss over every pair at the initial and at the final weights.
    pub initial_loss: LossValues,
    pub final_loss: LossValues,
    /// `(step, mean validation SI-SDR)` at every checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_si_sdr: f64,
    /// Mean SI-SDR of the unprocessed noisy clips.
    pub noisy_si_sdr: f64,
}

fn segment_of(x: &[f64], offset: usize, len: usize) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().skip(offset).take(len).copied().collect();
    out.resize(len, 0.0);
    out
}

/// Mean SI-SDR of the enhanced noisy clips against their clean references.
pub fn mean_enhanced_si_sdr<T: Real>(trainer: &Trainer<T>, pairs: &[TrainPair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        let out = trainer.model.enhance(&trainer.store, &p.noisy)?;
        sum += si_sdr(&p.clean.samples, &out.audio.samples)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean loss over every pair, each cropped to its first `segment` samples.
pub fn mean_loss<T: Real>(trainer: &Trainer<T>, pairs: &[TrainPair], segment: usize) -> Result<LossValues> {
    let mut acc = [0.0; 6];
    for p in pairs {
        let (n, c) = (segment_of(&p.noisy.samples, 0, segment), segment_of(&p.clean.samples, 0, segment));
        let v = trainer.evaluate(&batch(&[&n])?, &batch(&[&c])?)?;
        acc.iter_mut().zip(v).for_each(|(a, v)| *a += v / pairs.len() as f64);
    }
    Ok(acc)
}

/// Trains for `opts.steps` steps, validating on `pairs` (held-in) by SI-SDR, and
/// returns the report with the best checkpoint's weights. `on_step` sees every
/// training step's losses as they are produced.
pub fn fit<T: Real>(
    trainer: &mut Trainer<T>,
    pairs: &[TrainPair],
    opts: FitOptions,
    mut on_step: impl FnMut(usize, &LossValues),
) -> Result<(FitReport, ParamStore<T>)> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    if opts.batch == 0 || opts.segment == 0 || opts.eval_every == 0 {
        return Err(Error::Invalid(format!("batch, segment and eval_every must be positive: {opts:?}")));
    }
    let mut noisy_si_sdr = 0.0;
    for p in pairs {
        noisy_si_sdr += si_sdr(&p.clean.samples, &p.noisy.samples)? / pairs.len() as f64;
    }
    let initial_loss = mean_loss(trainer, pairs, opts.segment)?;
    let mut best = (0, mean_enhanced_si_sdr(trainer, pairs)?, trainer.store.clone());
    let mut checkpoints = vec![(0, best.1)];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(opts.steps);
    for step in 1..=opts.steps {
        let mut noisy = Vec::with_capacity(opts.batch);
        let mut clean = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let p = &pairs[order.pop().expect("refilled above")];
            let offset = if p.clean.len() > opts.segment { rng.gen_range(0..=p.clean.len() - opts.segment) } else { 0 };
            noisy.push(segment_of(&p.noisy.samples, offset, opts.segment));
            clean.push(segment_of(&p.clean.samples, offset, opts.segment));
        }
        let nb = batch::<T>(&noisy.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let cb = batch::<T>(&clean.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let values = trainer.step(&nb, &cb).map_err(|e| Error::AtStep { step, source: Box::new(e) })?;
        on_step(step, &values);
        log.push((step, values));
        if step % opts.eval_every == 0 || step == opts.steps {
            let score = mean_enhanced_si_sdr(trainer, pairs)?;
            checkpoints.push((step, score));
            if score > best.1 {
                best = (step, score, trainer.store.clone());
            }
        }
    }
    let final_loss = mean_loss(trainer, pairs, opts.segment)?;
    let report = FitReport {
        log,
        initial_loss,
        final_loss,
        checkpoints,
        best_step: best.0,
        best_si_sdr: best.1,
        noisy_si_sdr,
    };
    Ok((report, best.2))
}
