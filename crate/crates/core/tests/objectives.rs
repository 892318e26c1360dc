mod common;

use std::f64::consts::PI;

use common::{max_abs_diff, rng};
use rand::Rng;
use rwsa_core::dsp::{AudioBuffer, StftConfig, StftPlan};
use rwsa_core::model::{compressed_polar, polar_to_spec, ModelConfig, RwsaMambaUNet};
use rwsa_core::objectives::{
    compute_losses, fit, loss_and_grads, phase_loss, si_sdr, ssnr, toy_pairs, FitOptions, LossWeights, MetricReport, SpectralView,
    TrainPair, Trainer, CLEAN_RMS, SI_SDR_CAP_DB, SNR_GRID_DB,
};
use rwsa_core::tensor::gradcheck::check;
use rwsa_core::tensor::optim::AdamW;
use rwsa_core::tensor::{Array, Graph, ParamStore, Var};
use rwsa_core::verify::untied_twin_error;
use rwsa_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig { channels: 8, blocks: 1, ..ModelConfig::xs() }
}

fn small_stft() -> StftConfig {
    StftConfig { n_fft: 16, win_length: 16, hop: 4, centered: true }
}

fn batch_of(x: &[f64]) -> Array<f64> {
    Array::from_f64(&[1, x.len()], x).unwrap()
}

/// Views of a waveform as both estimate and reference on `g`.
fn view(g: &mut Graph<f64>, plan: &StftPlan<f64>, wave: &Var<f64>) -> SpectralView<f64> {
    let (mag_c, phase) = compressed_polar(g, plan, wave, 0.3).unwrap();
    SpectralView { wave: wave.clone(), mag_c, phase }
}

fn terms_for(est: &[f64], reference: &[f64], w: &LossWeights) -> [f64; 6] {
    let plan = StftPlan::<f64>::new(small_stft()).unwrap();
    let mut g = Graph::<f64>::inference();
    let (e, r) = (g.constant(batch_of(est)), g.constant(batch_of(reference)));
    let ev = view(&mut g, &plan, &e);
    let rv = view(&mut g, &plan, &r);
    let spec = polar_to_spec(&mut g, &ev.mag_c, &ev.phase, 0.3).unwrap();
    compute_losses(&mut g, &ev, &spec, &rv, w, &plan, est.len()).unwrap().values()
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-0.5..0.5)).collect()
}

#[test]
fn identical_estimate_gives_zero_loss() {
    let x = noise(64, 1);
    let v = terms_for(&x, &x, &LossWeights::default());
    // The consistency term is a round trip through istft/stft, so it is zero up to rounding.
    assert_eq!(&v[1..5], &[0.0; 4]);
    assert!(v[5] < 1e-20 && v[0] < 1e-20, "{v:?}");
}

#[test]
fn components_are_non_negative_and_weights_scale_linearly() {
    let (a, b) = (noise(64, 2), noise(64, 3));
    let w = LossWeights::default();
    let base = terms_for(&a, &b, &w);
    assert!(base.iter().all(|v| *v >= 0.0));
    for k in [0.5, 2.0, 3.0] {
        let scaled = terms_for(&a, &b, &w.scaled(k));
        assert!((scaled[0] - k * base[0]).abs() <= 1e-12 * base[0], "k={k}");
        assert_eq!(&scaled[1..], &base[1..]);
    }
}

#[test]
fn wrapped_distance_takes_the_short_way_round() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(Array::new(&[1], vec![PI - 0.1]).unwrap());
    let b = g.constant(Array::new(&[1], vec![-PI + 0.1]).unwrap());
    let d = g.sub(&a, &b).unwrap();
    let w = g.wrap_abs(&d).unwrap();
    assert!((w.value().item() - 0.2).abs() < 1e-12);
}

#[test]
fn phase_loss_is_zero_for_equal_phases_modulo_two_pi() {
    let mut g = Graph::<f64>::inference();
    let mut r = rng(4);
    let p = Array::from_fn(&[1, 4, 5], |_| r.gen_range(-3.0..3.0));
    let shifted = p.map(|v| v + 2.0 * PI);
    let (a, b) = (g.constant(p), g.constant(shifted));
    assert!(phase_loss(&mut g, &a, &b).unwrap().value().item() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let plan = StftPlan::<f64>::new(small_stft()).unwrap();
    let len = 24;
    let frames = small_stft().frames(len);
    let bins = small_stft().bins();
    let mut r = rng(5);
    let reference = noise(len, 6);
    let ref_phase: Vec<f64> = {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(batch_of(&reference));
        compressed_polar(&mut g, &plan, &x, 0.3).unwrap().1.value().data().to_vec()
    };
    // Phase estimates close to the reference keep every wrapped difference away from ±π.
    let est_phase: Vec<f64> = ref_phase.iter().map(|p| p + r.gen_range(-0.3..0.3)).collect();
    let inputs = vec![
        Array::from_fn(&[1, len], |_| r.gen_range(-0.5..0.5)),
        Array::from_fn(&[1, frames, bins], |_| r.gen_range(0.2..1.2)),
        Array::new(&[1, frames, bins], est_phase).unwrap(),
    ];
    let w = LossWeights::default();
    let rep = check(
        |g, v| {
            let rw = g.constant(batch_of(&reference));
            let rv = view(g, &plan, &rw);
            let ev = SpectralView { wave: v[0].clone(), mag_c: v[1].clone(), phase: v[2].clone() };
            let spec = polar_to_spec(g, &ev.mag_c, &ev.phase, 0.3)?;
            Ok(compute_losses(g, &ev, &spec, &rv, &w, &plan, len)?.total)
        },
        &inputs,
        1e-6,
        40,
        7,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{rep:?}");
}

#[test]
fn ssnr_closed_forms() {
    let x = noise(1024, 8);
    assert_eq!(ssnr(&x, &x).unwrap(), 35.0);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((ssnr(&x, &neg).unwrap() - 10.0 * 0.25f64.log10()).abs() < 1e-12);
    assert!(ssnr(&x, &vec![0.0; 1024]).unwrap().abs() < 1e-12);
    // Not scale-invariant: doubling gives error energy equal to signal energy.
    let twice: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert!(ssnr(&x, &twice).unwrap().abs() < 1e-12);
    assert!(ssnr(&vec![0.0; 512], &x[..512]).is_err());
}

#[test]
fn si_sdr_closed_forms() {
    assert_eq!(si_sdr(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
    let (x, e) = (noise(2000, 9), noise(2000, 10));
    assert_eq!(si_sdr(&x, &x).unwrap(), SI_SDR_CAP_DB);
    let base = si_sdr(&x, &e).unwrap();
    for a in [0.1, 3.0, -2.0] {
        let scaled: Vec<f64> = e.iter().map(|v| a * v).collect();
        assert!((si_sdr(&x, &scaled).unwrap() - base).abs() < 1e-9);
    }
    assert!(si_sdr(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    assert!(si_sdr(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn zero_db_orthogonal_mixture_scores_zero() {
    let n = 16_000;
    let clean: Vec<f64> = (0..n).map(|i| (2.0 * PI * 200.0 * i as f64 / 16_000.0).sin()).collect();
    let noise_: Vec<f64> = (0..n).map(|i| (2.0 * PI * 200.0 * i as f64 / 16_000.0).cos()).collect();
    let (c, z) = (AudioBuffer::new(clean, 16_000).unwrap(), AudioBuffer::new(noise_, 16_000).unwrap());
    let mix = rwsa_core::dsp::mix_at_snr(&c, &z, 0.0).unwrap();
    assert!(si_sdr(&c.samples, &mix.samples).unwrap().abs() < 1e-9);
}

#[test]
fn report_aggregates_are_plain_averages() {
    let mut rep = MetricReport::default();
    let x = noise(1024, 11);
    for (i, k) in [0.1, 0.5, 1.0].iter().enumerate() {
        let est: Vec<f64> = x.iter().zip(noise(1024, 20 + i as u64)).map(|(a, b)| a + k * b).collect();
        rep.push(format!("f{i}.wav"), &x, &est).unwrap();
    }
    let mean = rep.files.iter().map(|f| f.si_sdr_db).sum::<f64>() / 3.0;
    assert!((rep.si_sdr().0 - mean).abs() < 1e-12);
    let tsv = rep.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("f0.wav\t"));
    assert!(lines[3].starts_with("#aggregate\tssnr\t") && lines[4].starts_with("#aggregate\tsi_sdr\t"));
}

#[test]
fn toy_pairs_follow_the_snr_grid() {
    let pairs = toy_pairs(9, 4000, 12).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(p.snr_db, SNR_GRID_DB[i % 7]);
        assert!((p.clean.rms() - CLEAN_RMS).abs() < 1e-12);
        let residual: Vec<f64> = p.noisy.samples.iter().zip(&p.clean.samples).map(|(n, c)| n - c).collect();
        let e = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!((10.0 * (e(&p.clean.samples) / e(&residual)).log10() - p.snr_db).abs() < 1e-9);
    }
    assert_eq!(toy_pairs(3, 100, 1).unwrap()[2].noisy, toy_pairs(3, 100, 1).unwrap()[2].noisy);
}

fn trainer(cfg: ModelConfig, lr: f64, seed: u64) -> Trainer<f64> {
    let mut ps = ParamStore::new();
    let m = RwsaMambaUNet::build(cfg, &mut ps, seed).unwrap();
    Trainer::new(m, ps, lr, LossWeights::default())
}

fn toy_batch(len: usize, seed: u64) -> (Array<f64>, Array<f64>) {
    let p = toy_pairs(1, len, seed).unwrap().remove(0);
    (batch_of(&p.noisy.samples), batch_of(&p.clean.samples))
}

#[test]
fn zero_learning_rate_leaves_weights_bitwise_unchanged() {
    let mut tr = trainer(tiny(), 0.0, 1);
    let before = tr.store.clone();
    let (n, c) = toy_batch(960, 2);
    for _ in 0..2 {
        tr.step(&n, &c).unwrap();
    }
    for ((_, a), (_, b)) in before.iter().zip(tr.store.iter()) {
        assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn one_small_step_decreases_the_loss() {
    for seed in 0..3 {
        let mut tr = trainer(tiny(), 1e-5, seed);
        let (n, c) = toy_batch(960, 10 + seed);
        let before = tr.evaluate(&n, &c).unwrap()[0];
        tr.step(&n, &c).unwrap();
        let after = tr.evaluate(&n, &c).unwrap()[0];
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn tied_gradient_is_the_sum_over_an_untied_twin() {
    assert!(untied_twin_error(&tiny(), 960).unwrap() < 1e-12);
}

#[test]
fn tied_update_applies_the_summed_gradient_once() {
    let cfg = tiny();
    let mut tr = trainer(cfg, 1e-3, 3);
    let start = tr.store.clone();
    let (n, c) = toy_batch(960, 4);
    let (_, grads) = loss_and_grads(&tr.model, &tr.store, &n, &c, &tr.weights).unwrap();
    tr.step(&n, &c).unwrap();

    // The same update driven by hand from the gradient map, once per canonical slot.
    let mut manual = start.clone();
    AdamW::new(1e-3).step(&mut manual, &grads);
    for ((_, a), (_, b)) in tr.store.iter().zip(manual.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    for (alias, canonical) in tr.store.tie_table() {
        assert_eq!(tr.store.read(&alias), tr.store.read(&canonical));
    }
}

#[test]
fn nan_input_aborts_the_step() {
    let mut tr = trainer(tiny(), 1e-3, 5);
    let (n, mut c) = toy_batch(960, 6);
    c.data_mut()[10] = f64::NAN;
    let err = tr.step(&n, &c).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. } | Error::NonFiniteLoss(_)), "{err}");
}

fn pairs(count: usize, len: usize, seed: u64) -> Vec<TrainPair> {
    toy_pairs(count, len, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, p)| TrainPair::new(format!("p{i}"), p.clean, p.noisy).unwrap())
        .collect()
}

#[test]
fn fit_is_deterministic_and_zero_steps_keeps_the_init() {
    let data = pairs(2, 1200, 7);
    let opts = FitOptions { steps: 3, batch: 1, segment: 960, eval_every: 2, seed: 9 };
    let run = || {
        let mut tr = trainer(tiny(), 1e-3, 8);
        let (rep, best) = fit(&mut tr, &data, opts, |_, _| {}).unwrap();
        (rep, best)
    };
    let (a, _) = run();
    let (b, _) = run();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2, 3]);

    let mut tr = trainer(tiny(), 1e-3, 8);
    let init = tr.store.clone();
    let (rep, best) = fit(&mut tr, &data, FitOptions { steps: 0, ..opts }, |_, _| {}).unwrap();
    assert_eq!(rep.best_step, 0);
    for ((_, a), (_, b)) in init.iter().zip(best.iter()) {
        assert_eq!(a.value, b.value);
    }
    assert!(max_abs_diff(&rep.initial_loss, &rep.final_loss) == 0.0);
}

#[test]
fn fit_rejects_an_empty_dataset() {
    let mut tr = trainer(tiny(), 1e-3, 0);
    let opts = FitOptions { steps: 1, batch: 1, segment: 960, eval_every: 1, seed: 0 };
    assert!(matches!(fit(&mut tr, &[], opts, |_, _| {}), Err(Error::Invalid(_))));
}
