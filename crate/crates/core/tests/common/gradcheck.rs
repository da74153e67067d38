//! Central finite differences against the tape's reverse pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use llm2rec::model::{AttentionMode, Bound, ModelCheckpoint, ModelConfig};
use llm2rec::objectives::{csft_loss, ic_loss, make_views, mask_for_mntp, mntp_loss, CsftExample, IcAugmentation, IcExample};
use llm2rec::tensor::{Graph, Tensor, Var};
use llm2rec::tokenizer::Vocabulary;

pub const CASES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>) + 'a;

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the given
/// `(tensor, index)` coordinates; 0 when both vanish.
pub fn relative_error(inputs: &[Tensor], coords: &[(usize, usize)], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let (loss, vars) = build(&mut g, inputs);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(t, i)| g.grad(vars[t]).map_or(0.0, |gr| gr[i]))
        .collect();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let (l, _) = build(&mut g, ts);
        g.scalar(l)
    };
    let mut work = inputs.to_vec();
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&(t, i)| {
            let x0 = work[t].data()[i];
            work[t].data_mut()[i] = x0 + H;
            let up = eval(&work);
            work[t].data_mut()[i] = x0 - H;
            let down = eval(&work);
            work[t].data_mut()[i] = x0;
            (up - down) / (2.0 * H)
        })
        .collect();
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = l2(&analytic).max(l2(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        l2(&diff) / scale
    }
}

fn all_coords(ts: &[Tensor]) -> Vec<(usize, usize)> {
    ts.iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
        .collect()
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().requiring_grad()
}

/// Reduces any output to a scalar with fixed, non-uniform weights.
fn weighted_sum(g: &mut Graph, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect();
    let w = g.constant(&shape, w).unwrap();
    let m = g.mul(out, w).unwrap();
    g.sum(m).unwrap()
}

fn leaves(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.leaf(t)).collect()
}

fn unary(ts: Vec<Tensor>, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let coords = all_coords(&ts);
    relative_error(&ts, &coords, &|g, ts| {
        let v = leaves(g, ts);
        let out = f(g, v[0]);
        (weighted_sum(g, out), v)
    })
}

fn binary(ts: Vec<Tensor>, f: impl Fn(&mut Graph, Var, Var) -> Var) -> f64 {
    let coords = all_coords(&ts);
    relative_error(&ts, &coords, &|g, ts| {
        let v = leaves(g, ts);
        let out = f(g, v[0], v[1]);
        (weighted_sum(g, out), v)
    })
}

/// One random case of the named op; returns its relative error.
pub fn op_case(op: &str, r: &mut ChaCha8Rng) -> f64 {
    let (m, n, k) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5));
    let x = |r: &mut ChaCha8Rng| uniform(r, &[m, n], -1.5, 1.5);
    match op {
        "matmul" => {
            let b = uniform(r, &[n, k], -1.0, 1.0);
            binary(vec![x(r), b], |g, a, b| g.matmul(a, b).unwrap())
        }
        "transpose" => unary(vec![x(r)], |g, a| g.transpose(a).unwrap()),
        "add" => binary(vec![x(r), x(r)], |g, a, b| g.add(a, b).unwrap()),
        "sub" => binary(vec![x(r), x(r)], |g, a, b| g.sub(a, b).unwrap()),
        "mul" => binary(vec![x(r), x(r)], |g, a, b| g.mul(a, b).unwrap()),
        "add_row" => {
            let b = uniform(r, &[n], -1.0, 1.0);
            binary(vec![x(r), b], |g, a, b| g.add_row(a, b).unwrap())
        }
        "scale" => {
            let s = r.random_range(-2.0..2.0);
            unary(vec![x(r)], move |g, a| g.scale(a, s).unwrap())
        }
        "sum" => unary(vec![x(r)], |g, a| g.sum(a).unwrap()),
        "mean_rows" => unary(vec![x(r)], |g, a| g.mean_rows(a).unwrap()),
        "gelu" => unary(vec![uniform(r, &[m, n], -3.0, 3.0)], |g, a| g.gelu(a).unwrap()),
        "sigmoid" => unary(vec![uniform(r, &[m, n], -3.0, 3.0)], |g, a| g.sigmoid(a).unwrap()),
        "tanh" => unary(vec![uniform(r, &[m, n], -2.0, 2.0)], |g, a| g.tanh(a).unwrap()),
        "layer_norm" => {
            let n = n.max(2);
            let ts = vec![
                uniform(r, &[m, n], -2.0, 2.0),
                uniform(r, &[n], 0.5, 1.5),
                uniform(r, &[n], -0.5, 0.5),
            ];
            let coords = all_coords(&ts);
            relative_error(&ts, &coords, &|g, ts| {
                let v = leaves(g, ts);
                let out = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                (weighted_sum(g, out), v)
            })
        }
        "dropout" => {
            let seed = r.random();
            unary(vec![x(r)], move |g, a| g.dropout(a, 0.3, seed).unwrap())
        }
        "gather_rows" => {
            let ids: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..m)).collect();
            unary(vec![x(r)], move |g, a| g.gather_rows(a, &ids).unwrap())
        }
        "concat_rows" => {
            let ts: Vec<Tensor> = (0..r.random_range(1..4))
                .map(|_| {
                    let rows = r.random_range(1..4);
                    uniform(r, &[rows, n], -1.0, 1.0)
                })
                .collect();
            let coords = all_coords(&ts);
            relative_error(&ts, &coords, &|g, ts| {
                let v = leaves(g, ts);
                let out = g.concat_rows(&v).unwrap();
                (weighted_sum(g, out), v)
            })
        }
        "attention" => {
            let heads = r.random_range(1..3);
            let d = heads * r.random_range(1..4);
            let l = r.random_range(1..6);
            let allowed: Vec<bool> = match r.random_range(0..3) {
                0 => (0..l * l).map(|p| p % l <= p / l).collect(),
                1 => vec![true; l * l],
                _ => (0..l * l).map(|_| r.random_bool(0.6)).collect(),
            };
            let ts: Vec<Tensor> = (0..3).map(|_| uniform(r, &[l, d], -1.5, 1.5)).collect();
            let coords = all_coords(&ts);
            relative_error(&ts, &coords, &|g, ts| {
                let v = leaves(g, ts);
                let out = g.attention(v[0], v[1], v[2], &allowed, heads).unwrap();
                (weighted_sum(g, out), v)
            })
        }
        "l2_normalize_rows" => unary(vec![x(r)], |g, a| g.l2_normalize_rows(a).unwrap()),
        "softmax_cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
            let mut mask: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
            mask[0] = true;
            let ts = vec![uniform(r, &[m, n], -3.0, 3.0)];
            let coords = all_coords(&ts);
            relative_error(&ts, &coords, &|g, ts| {
                let v = leaves(g, ts);
                (g.softmax_cross_entropy(v[0], &targets, &mask).unwrap(), v)
            })
        }
        other => panic!("unknown op {other}"),
    }
}

pub const OPS: [&str; 19] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "sum",
    "mean_rows",
    "gelu",
    "sigmoid",
    "tanh",
    "layer_norm",
    "dropout",
    "gather_rows",
    "concat_rows",
    "attention",
    "l2_normalize_rows",
    "softmax_cross_entropy",
];

const WORDS: [&str; 12] = [
    "amber", "basalt", "cedar", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "juniper", "kelp", "lumen",
];

/// Random titles of `lo..=hi` words drawn from a small word list.
pub fn titles(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let k = r.random_range(lo..=hi);
            (0..k).map(|_| WORDS[r.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Two-layer `d_model = 8` model with weights spread well beyond the
/// initialization scale.
pub fn tiny_model(r: &mut ChaCha8Rng, vocab: &Vocabulary, mode: AttentionMode, dropout: f64) -> ModelCheckpoint {
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_context: 64,
        attention_mode: mode,
        dropout_rate: dropout,
    };
    let mut ck = ModelCheckpoint::init(cfg, r.random()).unwrap();
    for p in ck.params.iter_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.4..0.4);
        }
    }
    ck
}

/// A few random coordinates from every parameter tensor.
fn param_coords(r: &mut ChaCha8Rng, ps: &[Tensor], per: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, p) in ps.iter().enumerate() {
        for _ in 0..per {
            out.push((t, r.random_range(0..p.len())));
        }
    }
    out
}

/// One random case of the named loss on a tiny model.
pub fn loss_case(loss: &str, r: &mut ChaCha8Rng) -> f64 {
    let words = titles(r, 8, 2, 3);
    let vocab = Vocabulary::build(&words, 1).unwrap();
    let use_dropout = r.random_bool(0.5);
    let drop_seed: u64 = r.random();
    match loss {
        "csft" => {
            let ck = tiny_model(r, &vocab, AttentionMode::Causal, if use_dropout { 0.1 } else { 0.0 });
            let batch: Vec<CsftExample> = (0..r.random_range(1..4))
                .map(|_| {
                    let h = r.random_range(1..4);
                    let hist: Vec<&String> = (0..h).map(|_| &words[r.random_range(0..words.len())]).collect();
                    let t = &words[r.random_range(0..words.len())];
                    CsftExample::new(&vocab, &hist, t, 10).unwrap()
                })
                .collect();
            let coords = param_coords(r, &ck.params, 4);
            let drop = use_dropout.then_some(drop_seed);
            relative_error(&ck.params, &coords, &|g, ts| {
                let b = Bound::bind(g, ts);
                (csft_loss(g, &b, &ck.config, &batch, drop).unwrap(), b.vars().to_vec())
            })
        }
        "mntp" => {
            let ck = tiny_model(r, &vocab, AttentionMode::Bidirectional, if use_dropout { 0.1 } else { 0.0 });
            let batch: Vec<_> = (0..r.random_range(1..4))
                .map(|_| {
                    let seq = vocab.encode_item(&words[r.random_range(0..words.len())]).unwrap();
                    mask_for_mntp(&seq, 0.3, r.random()).unwrap()
                })
                .collect();
            let coords = param_coords(r, &ck.params, 4);
            let drop = use_dropout.then_some(drop_seed);
            relative_error(&ck.params, &coords, &|g, ts| {
                let b = Bound::bind(g, ts);
                (mntp_loss(g, &b, &ck.config, &batch, drop).unwrap(), b.vars().to_vec())
            })
        }
        "ic" => {
            let (rate, aug) = if use_dropout {
                (0.2, IcAugmentation::Dropout)
            } else {
                (0.0, IcAugmentation::TokenMask(0.3))
            };
            let ck = tiny_model(r, &vocab, AttentionMode::Bidirectional, rate);
            let batch: Vec<IcExample> = (0..r.random_range(2..5))
                .map(|i| IcExample {
                    pair: make_views(i, r.random()),
                    ids: vocab.encode_item(&words[i]).unwrap().ids,
                })
                .collect();
            let coords = param_coords(r, &ck.params, 4);
            relative_error(&ck.params, &coords, &|g, ts| {
                let b = Bound::bind(g, ts);
                (ic_loss(g, &b, &ck.config, &batch, 0.2, aug).unwrap(), b.vars().to_vec())
            })
        }
        other => panic!("unknown loss {other}"),
    }
}

pub const LOSSES: [&str; 3] = ["csft", "mntp", "ic"];

/// Worst relative error over `CASES` random cases per op and per loss.
pub fn worst_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (i, name) in OPS.iter().chain(LOSSES.iter()).enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 * 0x9E37_79B9));
        let worst = (0..CASES)
            .map(|_| {
                if LOSSES.contains(name) {
                    loss_case(name, &mut r)
                } else {
                    op_case(name, &mut r)
                }
            })
            .fold(0.0, f64::max);
        out.push((*name, worst));
    }
    out
}
