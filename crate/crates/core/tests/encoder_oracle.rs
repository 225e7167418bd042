//! The encoder forward pass against a hand-written straight-line version.

use wvad_core::encoder::{EncoderConfig, ModelParams};
use wvad_core::tensor_core::Tensor;

type Mat = Vec<Vec<f64>>;

struct Named<'a>(&'a ModelParams);

impl Named<'_> {
    fn mat(&self, name: &str) -> Mat {
        let i = self
            .0
            .names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("{name}"));
        let t = &self.0.tensors()[i];
        let cols = *t.shape().last().unwrap();
        t.data().chunks(cols).map(<[f64]>::to_vec).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.mat(name).concat()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, c)| v + c).collect())
        .collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Depthwise kernel `[D×w]` over time with edge replication, then pointwise.
fn dws_conv(x: &Mat, depth: &Mat, point: &Mat) -> Mat {
    let t_len = x.len() as isize;
    let w = depth[0].len() as isize;
    let z: Mat = (0..t_len)
        .map(|t| {
            (0..x[0].len())
                .map(|c| {
                    (0..w)
                        .map(|j| depth[c][j as usize] * x[(t + j - w / 2).clamp(0, t_len - 1) as usize][c])
                        .sum()
                })
                .collect()
        })
        .collect();
    matmul(&z, point)
}

fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn oracle(p: &ModelParams, features: &Mat) -> (Vec<f64>, f64) {
    let n = Named(p);
    let cfg = p.config();
    let mut x = vec![n.vec("cls_token")];
    x.extend(affine(features, &n.mat("input.weight"), &n.vec("input.bias")));
    for b in 0..cfg.depth {
        let nm = |s: &str| format!("block{b}.{s}");
        let h = layer_norm(&x, &n.vec(&nm("norm1.gain")), &n.vec(&nm("norm1.bias")));
        let proj = |which: &str| {
            let point = n.mat(&nm(&format!("{which}.point")));
            let mut out = matmul(&h[..1].to_vec(), &point);
            out.extend(dws_conv(
                &h[1..].to_vec(),
                &n.mat(&nm(&format!("{which}.depth"))),
                &point,
            ));
            out
        };
        let a = attention(&proj("query"), &proj("key"), &proj("value"));
        x = add(
            &x,
            &affine(&a, &n.mat(&nm("attn_out.weight")), &n.vec(&nm("attn_out.bias"))),
        );
        let h = layer_norm(&x, &n.vec(&nm("norm2.gain")), &n.vec(&nm("norm2.bias")));
        let f: Mat = affine(&h, &n.mat(&nm("ff1.weight")), &n.vec(&nm("ff1.bias")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        x = add(&x, &affine(&f, &n.mat(&nm("ff2.weight")), &n.vec(&nm("ff2.bias"))));
    }
    if cfg.final_norm {
        x = layer_norm(&x, &n.vec("final_norm.gain"), &n.vec("final_norm.bias"));
    }
    let s = affine(
        &x[1..].to_vec(),
        &n.mat("snippet_head.weight"),
        &n.vec("snippet_head.bias"),
    );
    let v = affine(&x[..1].to_vec(), &n.mat("video_head.weight"), &n.vec("video_head.bias"));
    (s.iter().map(|r| sigmoid(r[0])).collect(), sigmoid(v[0][0]))
}

fn features(t: usize, d: usize, seed: u64) -> Mat {
    (0..t)
        .map(|i| {
            (0..d)
                .map(|c| ((i * 7 + c * 3) as f64 + seed as f64 * 0.37).sin() * 1.5)
                .collect()
        })
        .collect()
}

fn compare(cfg: &EncoderConfig, seed: u64) {
    let p = ModelParams::init(cfg, seed).unwrap();
    let f = features(cfg.snippets, cfg.input_dim, seed);
    let (want_s, want_v) = oracle(&p, &f);
    let (got_s, got_v) = p.score(&Tensor::from_rows(&f).unwrap()).unwrap();
    for (g, w) in got_s.iter().zip(&want_s) {
        assert!((g - w).abs() <= 1e-10, "snippet {g} vs {w}");
    }
    assert!((got_v.unwrap() - want_v).abs() <= 1e-10);
    if !cfg.final_norm {
        assert!(want_s.iter().any(|s| (s - want_s[0]).abs() > 1e-6));
    }
}

fn micro() -> EncoderConfig {
    EncoderConfig {
        snippets: 5,
        input_dim: 3,
        model_dim: 2,
        heads: 1,
        depth: 1,
        zero_init_residual: false,
        ..EncoderConfig::default()
    }
}

#[test]
fn single_block_matches_straight_line_oracle() {
    for seed in 0..5 {
        compare(&micro(), seed);
        compare(
            &EncoderConfig {
                final_norm: true,
                ..micro()
            },
            seed,
        );
    }
}

#[test]
fn two_blocks_with_final_norm() {
    compare(
        &EncoderConfig {
            depth: 2,
            final_norm: true,
            ..micro()
        },
        9,
    );
}

#[test]
fn linear_baseline_is_a_logistic_head() {
    let cfg = EncoderConfig {
        use_transformer: false,
        ..micro()
    };
    let p = ModelParams::init(&cfg, 4).unwrap();
    let n = Named(&p);
    let f = features(cfg.snippets, cfg.input_dim, 4);
    let want = affine(&f, &n.mat("snippet_head.weight"), &n.vec("snippet_head.bias"));
    let (got, video) = p.score(&Tensor::from_rows(&f).unwrap()).unwrap();
    assert!(video.is_none());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - sigmoid(w[0])).abs() <= 1e-12);
    }
}
