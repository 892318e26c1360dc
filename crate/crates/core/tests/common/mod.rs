#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwsa_core::tensor::{Array, Graph, Var};
use rwsa_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_array(shape: &[usize], seed: u64) -> Array<f64> {
    let mut r = rng(seed);
    Array::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element gets a distinct weight.
pub fn probe(g: &mut Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = g.constant(rand_array(y.shape(), seed ^ 0x9e37));
    let p = g.mul(y, &r)?;
    g.sum(&p)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct per-step recurrence for one sequence. `u, dt: [len][d]`, `a: [d][n]`,
/// `b, c: [len][n]`. Discretization: `Ā = exp(Δ·A)`, `B̄ = Δ·B`.
pub fn naive_scan(
    u: &[Vec<f64>],
    dt: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    c: &[Vec<f64>],
    dskip: &[f64],
) -> Vec<Vec<f64>> {
    let (d, n) = (a.len(), a[0].len());
    let mut h = vec![vec![0.0; n]; d];
    let mut ys = Vec::new();
    for t in 0..u.len() {
        let mut y = vec![0.0; d];
        for i in 0..d {
            for s in 0..n {
                let abar = (dt[t][i] * a[i][s]).exp();
                let bbar = dt[t][i] * b[t][s];
                h[i][s] = abar * h[i][s] + bbar * u[t][i];
                y[i] += c[t][s] * h[i][s];
            }
            y[i] += dskip[i] * u[t][i];
        }
        ys.push(y);
    }
    ys
}

/// Random scan instance as flat arrays for the graph op plus the nested form for the oracle.
pub struct ScanCase {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
    pub u: Array<f64>,
    pub dt: Array<f64>,
    pub a: Array<f64>,
    pub b: Array<f64>,
    pub c: Array<f64>,
    pub dskip: Array<f64>,
}

impl ScanCase {
    pub fn random(seed: u64, max_len: usize) -> Self {
        let mut r = rng(seed);
        let (batch, len, d, n) = (r.gen_range(1..=3), r.gen_range(1..=max_len), r.gen_range(1..=4), r.gen_range(1..=4));
        let mut arr = |shape: &[usize], lo: f64, hi: f64| Array::from_fn(shape, |_| r.gen_range(lo..hi));
        Self {
            batch,
            len,
            d,
            n,
            u: arr(&[batch, len, d], -1.0, 1.0),
            dt: arr(&[batch, len, d], 0.01, 1.0),
            a: arr(&[d, n], -2.0, -0.05),
            b: arr(&[batch, len, n], -1.0, 1.0),
            c: arr(&[batch, len, n], -1.0, 1.0),
            dskip: arr(&[d], -1.0, 1.0),
        }
    }

    pub fn inputs(&self) -> Vec<Array<f64>> {
        vec![self.u.clone(), self.dt.clone(), self.a.clone(), self.b.clone(), self.c.clone(), self.dskip.clone()]
    }

    pub fn oracle(&self) -> Vec<f64> {
        let rows = |x: &Array<f64>, bi: usize, w: usize| -> Vec<Vec<f64>> {
            (0..self.len).map(|t| x.data()[(bi * self.len + t) * w..][..w].to_vec()).collect()
        };
        let a: Vec<Vec<f64>> = (0..self.d).map(|i| self.a.data()[i * self.n..][..self.n].to_vec()).collect();
        let mut out = Vec::new();
        for bi in 0..self.batch {
            let ys = naive_scan(
                &rows(&self.u, bi, self.d),
                &rows(&self.dt, bi, self.d),
                &a,
                &rows(&self.b, bi, self.n),
                &rows(&self.c, bi, self.n),
                self.dskip.data(),
            );
            out.extend(ys.into_iter().flatten());
        }
        out
    }

    pub fn run(&self) -> Vec<f64> {
        let mut g = Graph::<f64>::inference();
        let v: Vec<Var<f64>> = self.inputs().into_iter().map(|a| g.constant(a)).collect();
        g.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]).unwrap().value().data().to_vec()
    }
}

/// Dense attention for one sequence `x: [len][d]` with `in_w: [3d][d]` rows
/// (query, key, value) and `out_w: [d][d]`.
pub fn naive_mha(x: &[Vec<f64>], in_w: &[f64], in_b: &[f64], out_w: &[f64], out_b: &[f64], heads: usize) -> Vec<Vec<f64>> {
    let (len, d) = (x.len(), x[0].len());
    let dh = d / heads;
    let proj = |row: usize, v: &[f64]| -> f64 { in_b[row] + (0..d).map(|j| in_w[row * d + j] * v[j]).sum::<f64>() };
    let q: Vec<Vec<f64>> = x.iter().map(|v| (0..d).map(|o| proj(o, v)).collect()).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|v| (0..d).map(|o| proj(d + o, v)).collect()).collect();
    let vv: Vec<Vec<f64>> = x.iter().map(|v| (0..d).map(|o| proj(2 * d + o, v)).collect()).collect();
    let mut ctx = vec![vec![0.0; d]; len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..len {
            let s: Vec<f64> = (0..len)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..len).map(|j| e[j] / z * vv[j][c]).sum();
            }
        }
    }
    ctx.iter()
        .map(|cv| (0..d).map(|o| out_b[o] + (0..d).map(|j| out_w[o * d + j] * cv[j]).sum::<f64>()).collect())
        .collect()
}
