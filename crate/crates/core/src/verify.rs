//! The invariant suite behind `rwsa verify`: oracle comparisons, gradient checks,
//! reshape round trips, the shape ladder and RWSA tie integrity, run against one
//! model configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{istft, stft, AudioBuffer, StftPlan, DEFAULT_SAMPLE_RATE};
use crate::error::Result;
use crate::model::{ModelConfig, RwsaMambaUNet};
use crate::nn::{Conv2dSpec, ParamBuilder};
use crate::objectives::{loss_and_grads, toy_pairs, LossWeights, Trainer};
use crate::seq::{BlockOptions, FeatureMap, MambAttention, MambaConfig, Mha};
use crate::tensor::gradcheck::{check, check_params};
use crate::tensor::{Array, Graph, ParamStore, Var};

/// Length of the training segment the shape ladder is checked at.
pub const LADDER_LEN: usize = 30_600;

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub results: Vec<CheckResult>,
}

impl VerifyReport {
    fn record(&mut self, name: &str, outcome: Result<Option<String>>, pass: impl FnOnce(&str) -> bool) {
        let (status, detail) = match outcome {
            Ok(None) => (Status::Skip, String::new()),
            Ok(Some(d)) => (if pass(&d) { Status::Pass } else { Status::Fail }, d),
            Err(e) => (Status::Fail, e.to_string()),
        };
        self.results.push(CheckResult { name: name.to_string(), status, detail });
    }

    fn push(&mut self, name: &str, outcome: Result<Measured>) {
        match outcome {
            Ok(m) => self.results.push(CheckResult {
                name: name.to_string(),
                status: if m.ok { Status::Pass } else { Status::Fail },
                detail: m.detail,
            }),
            Err(e) => self.results.push(CheckResult { name: name.to_string(), status: Status::Fail, detail: e.to_string() }),
        }
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.status != Status::Fail)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| r.status == Status::Fail).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let tag = match r.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skip => "SKIP",
            };
            let _ = writeln!(s, "{tag}  {:<28} {}", r.name, r.detail);
        }
        s
    }
}

/// Outcome of one measured check.
struct Measured {
    ok: bool,
    detail: String,
}

fn within(value: f64, tol: f64) -> Measured {
    Measured { ok: value < tol, detail: format!("{value:.3e} < {tol:.0e}") }
}

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Σ y ⊙ R` for a fixed random `R`.
fn probe(g: &mut Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(rand_array(y.shape(), &mut rng, -1.0, 1.0));
    let p = g.mul(y, &r)?;
    g.sum(&p)
}

/// Worst deviation of the scan op from a per-step loop over `count` random instances.
pub fn scan_oracle_error(count: u64, max_len: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..count {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (batch, len, d, n) = (r.gen_range(1..=3), r.gen_range(1..=max_len), r.gen_range(1..=4), r.gen_range(1..=4));
        let u = rand_array(&[batch, len, d], &mut r, -1.0, 1.0);
        let dt = rand_array(&[batch, len, d], &mut r, 0.01, 1.0);
        let a = rand_array(&[d, n], &mut r, -2.0, -0.05);
        let b = rand_array(&[batch, len, n], &mut r, -1.0, 1.0);
        let c = rand_array(&[batch, len, n], &mut r, -1.0, 1.0);
        let ds = rand_array(&[d], &mut r, -1.0, 1.0);
        let mut g = Graph::<f64>::inference();
        let vs: Vec<Var<f64>> = [&u, &dt, &a, &b, &c, &ds].iter().map(|x| g.constant((*x).clone())).collect();
        let got = g.selective_scan(&vs[0], &vs[1], &vs[2], &vs[3], &vs[4], &vs[5])?;
        let (ud, dd, ad, bd, cd, sd) = (u.data(), dt.data(), a.data(), b.data(), c.data(), ds.data());
        let mut want = Vec::with_capacity(batch * len * d);
        for bi in 0..batch {
            let mut h = vec![0.0; d * n];
            for t in 0..len {
                for i in 0..d {
                    let k = (bi * len + t) * d + i;
                    let mut y = sd[i] * ud[k];
                    for s in 0..n {
                        let bc = (bi * len + t) * n + s;
                        h[i * n + s] = (dd[k] * ad[i * n + s]).exp() * h[i * n + s] + dd[k] * bd[bc] * ud[k];
                        y += cd[bc] * h[i * n + s];
                    }
                    want.push(y);
                }
            }
        }
        worst = worst.max(max_abs_diff(got.value().data(), &want));
    }
    Ok(worst)
}

/// Worst deviation of the MHA op from an explicit softmax(QKᵀ/√d_h)V loop.
pub fn mha_oracle_error(count: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..count {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1);
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let d = heads * r.gen_range(1..=3);
        let (batch, len) = (r.gen_range(1..=2), r.gen_range(1..=6));
        let mut ps = ParamStore::<f64>::new();
        let mha = Mha::new(&mut ParamBuilder::new(&mut ps, &mut r), d, heads)?;
        for (_, p) in ps.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.8..0.8));
        }
        let x = rand_array(&[batch, len, d], &mut r, -1.0, 1.0);
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x.clone());
        let got = mha.forward(&mut g, &ps, &xv)?;
        let (wi, bi_, wo, bo) = (ps.value(mha.in_w).data(), ps.value(mha.in_b).data(), ps.value(mha.out_w).data(), ps.value(mha.out_b).data());
        let dh = d / heads;
        let mut want = Vec::new();
        for b in 0..batch {
            let row = |t: usize| &x.data()[(b * len + t) * d..(b * len + t + 1) * d];
            // Projections: rows 0..d of in_proj are Q, d..2d K, 2d..3d V.
            let proj = |t: usize, o: usize| -> f64 { bi_[o] + (0..d).map(|j| wi[o * d + j] * row(t)[j]).sum::<f64>() };
            let q: Vec<Vec<f64>> = (0..len).map(|t| (0..d).map(|o| proj(t, o)).collect()).collect();
            let k: Vec<Vec<f64>> = (0..len).map(|t| (0..d).map(|o| proj(t, d + o)).collect()).collect();
            let v: Vec<Vec<f64>> = (0..len).map(|t| (0..d).map(|o| proj(t, 2 * d + o)).collect()).collect();
            for t in 0..len {
                let mut ctx = vec![0.0; d];
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = (0..len)
                        .map(|s| hs.clone().map(|j| q[t][j] * k[s][j]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in hs {
                        ctx[j] = (0..len).map(|s| e[s] / z * v[s][j]).sum();
                    }
                }
                want.extend((0..d).map(|o| bo[o] + (0..d).map(|j| wo[o * d + j] * ctx[j]).sum::<f64>()));
            }
        }
        worst = worst.max(max_abs_diff(got.value().data(), &want));
    }
    Ok(worst)
}

type Primitive = (&'static str, Vec<Array<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>>);

/// Every differentiable primitive the model uses, with a random point for each.
fn primitives(seed: u64) -> Result<Vec<Primitive>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut a = |shape: &[usize]| rand_array(shape, &mut r, -1.0, 1.0);
    let plan = StftPlan::<f64>::new(crate::dsp::StftConfig { n_fft: 16, win_length: 16, hop: 4, centered: true })?;
    let plan2 = plan.clone();
    let conv = Conv2dSpec::new(2, 3, (3, 3)).dilation((2, 1));
    let strided = Conv2dSpec::new(2, 4, (3, 3)).stride((2, 2));
    let up = Conv2dSpec::new(4, 2, (3, 3)).stride((2, 2)).transposed();
    let deform = Conv2dSpec::new(2, 2, (3, 3)).groups(2);
    let offsets = Array::from_fn(&[1, 18, 4, 4], |i| 0.3 + 0.37 * ((i * 7 % 11) as f64 / 11.0) - 0.15);
    let positive = Array::from_fn(&[3, 4], |i| 0.5 + 0.1 * i as f64);
    // Phase differences kept away from the ±π wrap points.
    let phases = Array::from_fn(&[2, 5], |i| -2.5 + 0.53 * i as f64);
    let list: Vec<Primitive> = vec![
        ("linear", vec![a(&[3, 4]), a(&[2, 4]), a(&[2])], Box::new(|g, v| g.linear(&v[0], &v[1], Some(&v[2])))),
        ("bmm", vec![a(&[2, 3, 4]), a(&[2, 4, 2])], Box::new(|g, v| g.bmm(&v[0], &v[1], false))),
        ("softmax", vec![a(&[3, 5])], Box::new(|g, v| g.softmax(&v[0]))),
        ("layer_norm", vec![a(&[3, 5]), a(&[5]), a(&[5])], Box::new(|g, v| g.layer_norm(&v[0], &v[1], &v[2], 1e-5))),
        ("rms_norm", vec![a(&[3, 5]), a(&[5])], Box::new(|g, v| g.rms_norm(&v[0], &v[1], 1e-5))),
        ("instance_norm", vec![a(&[2, 3, 3, 4]), a(&[3]), a(&[3])], Box::new(|g, v| g.instance_norm(&v[0], &v[1], &v[2], 1e-5))),
        ("prelu", vec![a(&[2, 3, 2, 2]), a(&[3])], Box::new(|g, v| g.prelu(&v[0], &v[1]))),
        ("silu", vec![a(&[7])], Box::new(|g, v| g.silu(&v[0]))),
        ("softplus", vec![a(&[7])], Box::new(|g, v| g.softplus(&v[0]))),
        ("sigmoid", vec![a(&[7])], Box::new(|g, v| g.sigmoid(&v[0]))),
        ("power_law", vec![positive], Box::new(|g, v| g.powf(&v[0], 0.3))),
        ("atan2", vec![a(&[6]), a(&[6])], Box::new(|g, v| g.atan2(&v[0], &v[1]))),
        ("wrap_abs", vec![phases.clone(), phases.map(|p| p * 0.5)], Box::new(|g, v| {
            let d = g.sub(&v[0], &v[1])?;
            g.wrap_abs(&d)
        })),
        ("conv2d", vec![a(&[1, 2, 5, 4]), a(&[3, 2, 3, 3]), a(&[3])], Box::new(move |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), conv))),
        ("conv2d_strided", vec![a(&[1, 2, 4, 4]), a(&[4, 2, 3, 3]), a(&[4])], Box::new(move |g, v| g.conv2d(&v[0], &v[1], Some(&v[2]), strided))),
        ("conv_transpose2d", vec![a(&[1, 4, 2, 2]), a(&[4, 2, 3, 3]), a(&[2])], Box::new(move |g, v| g.conv_transpose2d(&v[0], &v[1], Some(&v[2]), up))),
        ("deform_conv2d", vec![a(&[1, 2, 4, 4]), offsets, a(&[2, 1, 3, 3]), a(&[2])], Box::new(move |g, v| g.deform_conv2d(&v[0], &v[1], &v[2], Some(&v[3]), deform))),
        ("freq_shuffle", vec![a(&[1, 4, 2, 3])], Box::new(|g, v| g.freq_shuffle(&v[0], 2))),
        ("causal_conv1d", vec![a(&[2, 5, 3]), a(&[3, 4]), a(&[3])], Box::new(|g, v| g.causal_conv1d(&v[0], &v[1], &v[2]))),
        ("stft", vec![a(&[1, 24])], Box::new(move |g, v| g.stft(&v[0], &plan))),
        ("istft", vec![a(&[1, 2, 7, 9])], Box::new(move |g, v| g.istft(&v[0], &plan2, 24))),
    ];
    Ok(list)
}

fn gradcheck_primitives() -> Result<Vec<(String, Measured)>> {
    let mut out = Vec::new();
    for (i, (name, inputs, f)) in primitives(17)?.into_iter().enumerate() {
        let rep = check(|g, v| {
            let y = f(g, v)?;
            probe(g, &y, 100 + i as u64)
        }, &inputs, 1e-6, 32, i as u64)?;
        out.push((format!("gradcheck.{name}"), within(rep.max_rel_err, 1e-5)));
    }
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (u, dt, a, b, c, d) = (
        rand_array(&[2, 5, 3], &mut r, -1.0, 1.0),
        rand_array(&[2, 5, 3], &mut r, 0.1, 1.0),
        rand_array(&[3, 2], &mut r, -1.5, -0.1),
        rand_array(&[2, 5, 2], &mut r, -1.0, 1.0),
        rand_array(&[2, 5, 2], &mut r, -1.0, 1.0),
        rand_array(&[3], &mut r, -1.0, 1.0),
    );
    let rep = check(|g, v| {
        let y = g.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
        probe(g, &y, 200)
    }, &[u, dt, a, b, c, d], 1e-6, 32, 9)?;
    out.push(("gradcheck.selective_scan".into(), within(rep.max_rel_err, 1e-5)));
    Ok(out)
}

/// Tiny MambAttention block (B=1, C=4, T=F=4, h=2, d_state=2), checked through
/// every parameter and the input.
fn gradcheck_block() -> Result<Measured> {
    let mut ps = ParamStore::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let opts = BlockOptions { heads: 2, attention: true, share_tf: true, mamba: MambaConfig { d_state: 2, d_conv: 4, expand: 2 } };
    let block = MambAttention::new(&mut ParamBuilder::new(&mut ps, &mut r), 4, opts)?;
    for (_, p) in ps.iter_mut() {
        if (p.name.ends_with(".bias") && p.name.contains("mha")) || p.name.ends_with("dt_proj.bias") {
            p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
        }
    }
    let x = rand_array(&[1, 4, 4, 4], &mut r, -1.0, 1.0);
    let params = check_params(|g, s| {
        let xv = g.constant(x.clone());
        let y = block.forward(g, s, &xv)?;
        probe(g, &y, 11)
    }, &ps, 1e-5, 12, 5)?;
    let input = check(|g, v| {
        let y = block.forward(g, &ps, &v[0])?;
        probe(g, &y, 12)
    }, &[x.clone()], 1e-6, 64, 6)?;
    Ok(within(params.max_rel_err.max(input.max_rel_err), 1e-4))
}

fn reshape_round_trip() -> Result<Measured> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = rand_array(&[2, 3, 4, 5], &mut r, -1.0, 1.0);
    let mut g = Graph::<f64>::inference();
    let v = g.constant(x.clone());
    let back = FeatureMap::grid(v)?.to_time_seq(&mut g)?.time_to_freq(&mut g)?.freq_to_grid(&mut g)?;
    let ok = back.var().value() == &x;
    Ok(Measured { ok, detail: if ok { "bit-exact".into() } else { "round trip changed values".into() } })
}

fn dsp_round_trip() -> Result<Measured> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = AudioBuffer::new((0..LADDER_LEN).map(|_| r.gen_range(-1.0..1.0)).collect(), DEFAULT_SAMPLE_RATE)?;
    let cfg = ModelConfig::default().stft;
    let y = istft(&stft(&x, cfg)?, x.len())?;
    Ok(within(max_abs_diff(&x.samples, &y.samples), 1e-5))
}

/// Junction shapes of one item at the training segment length.
pub fn expected_ladder(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let frames = cfg.stft.frames(LADDER_LEN);
    let (bins, lat) = (cfg.stft.bins(), cfg.latent_bins());
    let c = cfg.channels;
    let mut v: Vec<(String, Vec<usize>)> = vec![("input".into(), vec![1, 2, frames, bins]), ("encoder".into(), vec![1, c, frames, lat])];
    let at = |l: usize| vec![1, cfg.width(l), frames >> l, lat >> l];
    v.push(("down0".into(), at(0)));
    v.push(("downsample0".into(), at(1)));
    v.push(("down1".into(), at(1)));
    v.push(("downsample1".into(), at(2)));
    v.push(("bottleneck".into(), at(2)));
    for l in [1, 0] {
        v.push((format!("upsample{l}"), at(l)));
        let mut cat = at(l);
        cat[1] *= 2;
        v.push((format!("concat{l}"), cat));
        v.push((format!("up{l}"), at(l)));
    }
    v.push(("mag_refine".into(), at(0)));
    v.push(("phase_refine".into(), at(0)));
    v.push(("mask".into(), vec![1, frames, bins]));
    v.push(("phase".into(), vec![1, frames, bins]));
    v.push(("output".into(), vec![1, LADDER_LEN]));
    v
}

/// Shape ladder plus decoder ranges from one inference pass at the segment length.
fn ladder_and_ranges(cfg: &ModelConfig) -> Result<(Measured, Measured)> {
    let mut ps = ParamStore::<f32>::new();
    let model = RwsaMambaUNet::build(*cfg, &mut ps, 0)?;
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = Array::<f32>::from_fn(&[1, LADDER_LEN], |_| r.gen_range(-0.1..0.1));
    let mut g = Graph::<f32>::inference();
    let xv = g.constant(x);
    let out = model.forward(&mut g, &ps, &xv)?;
    let want = expected_ladder(cfg);
    let bad: Vec<String> = want
        .iter()
        .filter(|w| !out.junctions.contains(w))
        .map(|(n, s)| format!("{n} expected {s:?}, got {:?}", out.junctions.iter().find(|(m, _)| m == n).map(|x| &x.1)))
        .collect();
    let ladder = Measured {
        ok: bad.is_empty() && out.junctions.len() == want.len(),
        detail: if bad.is_empty() { format!("{} junctions", want.len()) } else { bad.join("; ") },
    };
    let mask_ok = out.mask.value().data().iter().all(|m| *m > 0.0 && *m < 2.0);
    let phase_ok = out.phase.value().data().iter().all(|p| *p > -PI as f32 && *p <= PI as f32);
    let ranges = Measured {
        ok: mask_ok && phase_ok,
        detail: format!("mask in (0,2): {mask_ok}, phase in (-pi,pi]: {phase_ok}"),
    };
    Ok((ladder, ranges))
}

/// Tied gradient against the sum of gradients of an untied twin holding the same
/// values, at 64-bit on a short clip.
pub fn untied_twin_error(cfg: &ModelConfig, len: usize) -> Result<f64> {
    let mut tied = ParamStore::<f64>::new();
    let model = RwsaMambaUNet::build(*cfg, &mut tied, 0)?;
    let twin_cfg = ModelConfig { rwsa: false, ..*cfg };
    let mut untied = ParamStore::<f64>::new();
    let twin = RwsaMambaUNet::build(twin_cfg, &mut untied, 0)?;
    let mut sites: Vec<String> = tied.iter().map(|(_, p)| p.name.clone()).collect();
    sites.extend(tied.tie_table().into_iter().map(|(alias, _)| alias));
    for site in &sites {
        let v = tied.read(site).expect("listed site").clone();
        untied.write(site, v)?;
    }
    let pair = toy_pairs(1, len, 3)?.remove(0);
    let noisy = Array::from_f64(&[1, len], &pair.noisy.samples)?;
    let clean = Array::from_f64(&[1, len], &pair.clean.samples)?;
    let w = LossWeights::default();
    let (_, gt) = loss_and_grads(&model, &tied, &noisy, &clean, &w)?;
    let (_, gu) = loss_and_grads(&twin, &untied, &noisy, &clean, &w)?;
    let mut groups: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for site in &sites {
        let (t, u) = (tied.resolve(site).expect("site"), untied.resolve(site).expect("site"));
        groups.entry(t.index()).or_default().insert(u.index());
    }
    let mut worst = 0.0f64;
    for (id, p) in tied.iter() {
        let shape = p.value.shape();
        let mut sum = Array::<f64>::zeros(shape);
        for u in &groups[&id.index()] {
            if let Some(g) = gu.iter().find(|(k, _)| k.index() == *u).map(|(_, g)| g) {
                sum.add_assign(g);
            }
        }
        let zero = Array::<f64>::zeros(shape);
        let got = gt.get(&id).unwrap_or(&zero);
        worst = worst.max(max_abs_diff(got.data(), sum.data()));
    }
    Ok(worst)
}

/// Trains `steps` steps and returns the number of tied sites whose value differs
/// from their canonical parameter (always zero when sharing is real).
pub fn tie_drift_after_training(cfg: &ModelConfig, steps: usize, len: usize) -> Result<(usize, usize)> {
    let mut ps = ParamStore::<f32>::new();
    let model = RwsaMambaUNet::build(*cfg, &mut ps, 0)?;
    let mut tr = Trainer::new(model, ps, 1e-3, LossWeights::default());
    let pair = toy_pairs(1, len, 5)?.remove(0);
    let noisy = Array::from_f64(&[1, len], &pair.noisy.samples)?;
    let clean = Array::from_f64(&[1, len], &pair.clean.samples)?;
    for _ in 0..steps {
        tr.step(&noisy, &clean)?;
    }
    let table = tr.store.tie_table();
    let drift = table
        .iter()
        .filter(|(alias, canon)| tr.store.read(alias).map(|a| a.data().to_vec()) != tr.store.read(canon).map(|c| c.data().to_vec()))
        .count();
    Ok((drift, table.len()))
}

/// Runs every check against `cfg`. Tie checks are skipped when the configuration
/// has nothing to tie.
pub fn run_suite(cfg: &ModelConfig) -> VerifyReport {
    let mut rep = VerifyReport::default();
    rep.push("scan_oracle", scan_oracle_error(100, 16).map(|e| within(e, 1e-12)));
    rep.push("mha_oracle", mha_oracle_error(100).map(|e| within(e, 1e-12)));
    match gradcheck_primitives() {
        Ok(list) => list.into_iter().for_each(|(n, m)| rep.push(&n, Ok(m))),
        Err(e) => rep.push("gradcheck.primitives", Err(e)),
    }
    rep.push("gradcheck.block", gradcheck_block());
    rep.push("reshape_round_trip", reshape_round_trip());
    rep.push("dsp_round_trip", dsp_round_trip());
    match ladder_and_ranges(cfg) {
        Ok((ladder, ranges)) => {
            rep.push("shape_ladder", Ok(ladder));
            rep.push("decoder_ranges", Ok(ranges));
        }
        Err(e) => rep.push("shape_ladder", Err(e)),
    }
    let tied = cfg.rwsa && cfg.mha;
    let short = 4 * cfg.stft.hop;
    rep.record(
        "tie.untied_twin_gradient",
        if tied { untied_twin_error(cfg, short).map(|e| Some(format!("{e:.3e} < 1e-12"))) } else { Ok(None) },
        |d| d.split(' ').next().and_then(|v| v.parse::<f64>().ok()).is_some_and(|v| v < 1e-12),
    );
    rep.record(
        "tie.bitwise_after_training",
        if tied { tie_drift_after_training(cfg, 3, short).map(|(drift, n)| Some(format!("{drift} of {n} tied sites drifted"))) } else { Ok(None) },
        |d| d.starts_with("0 "),
    );
    rep
}
