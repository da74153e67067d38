//! Loop-level reimplementation of the transformer forward pass and of the
//! three losses, written against parameter names only.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llm2rec::model::ModelCheckpoint;

type Mat = Vec<Vec<f64>>;

fn param<'a>(ck: &'a ModelCheckpoint, name: &str) -> &'a [f64] {
    ck.param(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

fn linear(x: &Mat, w: &[f64], b: &[f64], din: usize, dout: usize) -> Mat {
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let mut s = b[j];
                    for i in 0..din {
                        s += row[i] * w[i * dout + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) / sd * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Inverted dropout with the same sampling convention as the library:
/// one uniform draw per entry, row-major.
struct Dropper {
    rate: f64,
    seeds: ChaCha8Rng,
}

impl Dropper {
    fn apply(&mut self, x: &mut Mat) {
        let s = self.seeds.next_u64();
        if self.rate == 0.0 {
            return;
        }
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let keep = 1.0 / (1.0 - self.rate);
        for row in x.iter_mut() {
            for v in row.iter_mut() {
                *v *= if r.random::<f64>() < self.rate { 0.0 } else { keep };
            }
        }
    }
}

/// Final-norm hidden states. `dropout` is `(rate, seed)`.
pub fn hidden(ck: &ModelCheckpoint, ids: &[usize], bidirectional: bool, dropout: Option<(f64, u64)>) -> Mat {
    let c = &ck.config;
    let (d, f, heads) = (c.d_model, c.d_ffn, c.n_heads);
    let dh = d / heads;
    let (rate, seed) = dropout.unwrap_or((0.0, 0));
    let mut drop = Dropper {
        rate,
        seeds: ChaCha8Rng::seed_from_u64(seed),
    };
    let tok = param(ck, "tok_emb");
    let pos = param(ck, "pos_emb");
    let len = ids.len();
    let mut x: Mat = (0..len)
        .map(|t| (0..d).map(|j| tok[ids[t] * d + j] + pos[t * d + j]).collect())
        .collect();
    drop.apply(&mut x);
    for l in 0..c.n_layers {
        let p = |s: &str| param(ck, &format!("layers.{l}.{s}"));
        let h = norm(&x, p("ln1.gain"), p("ln1.bias"));
        let q = linear(&h, p("attn.wq"), p("attn.bq"), d, d);
        let k = linear(&h, p("attn.wk"), p("attn.bk"), d, d);
        let v = linear(&h, p("attn.wv"), p("attn.bv"), d, d);
        let mut a = vec![vec![0.0; d]; len];
        for hd in 0..heads {
            let o = hd * dh;
            for i in 0..len {
                let visible: Vec<usize> = (0..len).filter(|&j| bidirectional || j <= i).collect();
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| (0..dh).map(|e| q[i][o + e] * k[j][o + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (n, &j) in visible.iter().enumerate() {
                    let w = (scores[n] - m).exp() / z;
                    for e in 0..dh {
                        a[i][o + e] += w * v[j][o + e];
                    }
                }
            }
        }
        let mut o = linear(&a, p("attn.wo"), p("attn.bo"), d, d);
        drop.apply(&mut o);
        for (xr, or) in x.iter_mut().zip(&o) {
            for (xv, ov) in xr.iter_mut().zip(or) {
                *xv += ov;
            }
        }
        let h = norm(&x, p("ln2.gain"), p("ln2.bias"));
        let mut u = linear(&h, p("ffn.w1"), p("ffn.b1"), d, f);
        for row in u.iter_mut() {
            for v in row.iter_mut() {
                *v = gelu(*v);
            }
        }
        let mut y = linear(&u, p("ffn.w2"), p("ffn.b2"), f, d);
        drop.apply(&mut y);
        for (xr, yr) in x.iter_mut().zip(&y) {
            for (xv, yv) in xr.iter_mut().zip(yr) {
                *xv += yv;
            }
        }
    }
    norm(&x, param(ck, "ln_f.gain"), param(ck, "ln_f.bias"))
}

pub fn logits(ck: &ModelCheckpoint, ids: &[usize], bidirectional: bool, dropout: Option<(f64, u64)>) -> Mat {
    let h = hidden(ck, ids, bidirectional, dropout);
    let tok = param(ck, "tok_emb");
    let d = ck.config.d_model;
    h.iter()
        .map(|row| {
            (0..ck.config.vocab_size)
                .map(|w| (0..d).map(|j| row[j] * tok[w * d + j]).sum())
                .collect()
        })
        .collect()
}

/// `-log softmax(row)[target]` by explicit summation.
pub fn nll(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + z.ln() - row[target]
}

/// Next-item loss: position `t` predicts token `t + 1` whenever that token is
/// scored; the batch mean runs over all such tokens.
pub fn csft(ck: &ModelCheckpoint, batch: &[(Vec<usize>, Vec<bool>)]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for (ids, scored) in batch {
        let lg = logits(ck, ids, false, None);
        for t in 1..ids.len() {
            if scored[t] {
                total += nll(&lg[t - 1], ids[t]);
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Masked next-token loss: a mask at `p >= 1` is predicted from row `p - 1`.
pub fn mntp(ck: &ModelCheckpoint, batch: &[(Vec<usize>, Vec<usize>, Vec<usize>)]) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for (masked, original, positions) in batch {
        let lg = logits(ck, masked, true, None);
        for &p in positions {
            if p >= 1 {
                total += nll(&lg[p - 1], original[p]);
                n += 1;
            }
        }
    }
    total / n as f64
}

pub fn mean_pool(h: &Mat) -> Vec<f64> {
    let d = h[0].len();
    (0..d).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / h.len() as f64).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// InfoNCE over cosine similarities between two lists of views.
pub fn info_nce(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let b = z1.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| cos(&z1[i], &z2[j]) / tau).collect();
        total += nll(&row, i);
    }
    total / b as f64
}
