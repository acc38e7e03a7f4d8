//! Straight-line reference implementations written with plain loops over
//! slices. They share nothing with the library beyond reading tensor data.

#![allow(dead_code)]

use epsakit_core::nn::{Conv2dParams, LinearParams};
use epsakit_core::psa::{BranchInput, PsaParams};
use epsakit_core::{Shape, Tensor};

/// Plain nested-loop grouped convolution, zero padding, no bias.
pub fn conv(x: &Tensor, p: &Conv2dParams) -> Tensor {
    let s = x.shape();
    let (k, st, pad, g) = (p.kernel, p.stride, p.padding, p.groups);
    let cout = p.out_channels;
    let cin_g = s.c / g;
    let cout_g = cout / g;
    let oh = (s.h + 2 * pad - k) / st + 1;
    let ow = (s.w + 2 * pad - k) / st + 1;
    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![0.0; s.n * cout * oh * ow];
    for n in 0..s.n {
        for o in 0..cout {
            let grp = o / cout_g;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        let c = grp * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * st + ky) as isize - pad as isize;
                                let ix = (xx * st + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = xd[((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize];
                                let wv = wd[((o * cin_g + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = &p.bias {
                        acc += b.data()[o];
                    }
                    out[((n * cout + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(s.n, cout, oh, ow).unwrap(), out).unwrap()
}

fn dense(v: &[f64], p: &LinearParams) -> Vec<f64> {
    let ws = p.weight.shape();
    let (out, inp) = (ws.n, ws.c);
    (0..out)
        .map(|o| {
            let mut acc: f64 = (0..inp).map(|i| p.weight.data()[o * inp + i] * v[i]).sum();
            if let Some(b) = &p.bias {
                acc += b.data()[o];
            }
            acc
        })
        .collect()
}

/// Intermediates of the reference PSA computation, indexed `[n][branch][channel]`.
pub struct PsaOracle {
    pub branches: Vec<Tensor>,
    pub logits: Vec<Vec<Vec<f64>>>,
    pub attention: Vec<Vec<Vec<f64>>>,
    pub output: Tensor,
}

/// Branch convolutions, per-branch SE gates, a softmax across branches for
/// every channel position, channel reweighting and concatenation.
pub fn psa(x: &Tensor, p: &PsaParams) -> PsaOracle {
    let cfg = &p.config;
    let s = cfg.scales;
    let cb = cfg.channels / s;
    let xs = x.shape();
    let mut branches = Vec::new();
    for i in 0..s {
        let input = match cfg.branch_input {
            BranchInput::Full => x.clone(),
            BranchInput::Split => {
                let mut d = Vec::new();
                for n in 0..xs.n {
                    for c in i * cb..(i + 1) * cb {
                        let base = (n * xs.c + c) * xs.h * xs.w;
                        d.extend_from_slice(&x.data()[base..base + xs.h * xs.w]);
                    }
                }
                Tensor::from_vec(Shape::new(xs.n, cb, xs.h, xs.w).unwrap(), d).unwrap()
            }
        };
        branches.push(conv(&input, &p.branch_convs[i]));
    }
    let fs = branches[0].shape();
    let hw = fs.h * fs.w;
    let mut logits = vec![vec![vec![0.0; cb]; s]; xs.n];
    let mut attention = logits.clone();
    for n in 0..xs.n {
        for i in 0..s {
            let se = if cfg.shared_se {
                &p.se_weights[0]
            } else {
                &p.se_weights[i]
            };
            let d = branches[i].data();
            let pooled: Vec<f64> = (0..cb)
                .map(|c| d[(n * cb + c) * hw..(n * cb + c + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            let hidden: Vec<f64> = dense(&pooled, &se.fc0).into_iter().map(|v| v.max(0.0)).collect();
            let gate: Vec<f64> = dense(&hidden, &se.fc1)
                .into_iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect();
            logits[n][i] = gate;
        }
        for c in 0..cb {
            let m = (0..s).map(|i| logits[n][i][c]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..s).map(|i| (logits[n][i][c] - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for i in 0..s {
                attention[n][i][c] = e[i] / z;
            }
        }
    }
    let mut out = Vec::with_capacity(xs.n * cfg.channels * hw);
    for n in 0..xs.n {
        for i in 0..s {
            let d = branches[i].data();
            for c in 0..cb {
                let a = attention[n][i][c];
                out.extend(d[(n * cb + c) * hw..(n * cb + c + 1) * hw].iter().map(|v| v * a));
            }
        }
    }
    let output = Tensor::from_vec(Shape::new(xs.n, cfg.channels, fs.h, fs.w).unwrap(), out).unwrap();
    PsaOracle {
        branches,
        logits,
        attention,
        output,
    }
}

/// Parameter count of a bottleneck network from layer widths alone.
pub mod params {
    pub fn conv(cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
        (cin / groups * cout * k * k) as u64
    }

    pub fn bn(c: usize) -> u64 {
        2 * c as u64
    }

    pub fn fc(cin: usize, cout: usize, bias: bool) -> u64 {
        (cin * cout + if bias { cout } else { 0 }) as u64
    }

    #[derive(Clone, Copy)]
    pub enum Mid<'a> {
        Plain,
        /// Bias-free SE after the last BN, reduction 16.
        Se,
        /// `(groups, split input)`; kernels 3, 5, 7, 9, one shared biased SE, reduction 16.
        Psa(&'a [usize], bool),
    }

    fn psa(c: usize, groups: &[usize], split: bool) -> u64 {
        let s = groups.len();
        let cb = c / s;
        let cin = if split { cb } else { c };
        let kernels = [3, 5, 7, 9];
        let convs: u64 = groups.iter().zip(kernels).map(|(&g, k)| conv(cin, cb, k, g)).sum();
        let hidden = (cb / 16).max(1);
        convs + fc(cb, hidden, true) + fc(hidden, cb, true)
    }

    fn block(cin: usize, mid: usize, out: usize, stride: usize, kind: Mid) -> u64 {
        let mut p = conv(cin, mid, 1, 1) + bn(mid) + bn(mid) + conv(mid, out, 1, 1) + bn(out);
        p += match kind {
            Mid::Psa(g, split) => psa(mid, g, split),
            _ => conv(mid, mid, 3, 1),
        };
        if let Mid::Se = kind {
            p += fc(out, out / 16, false) + fc(out / 16, out, false);
        }
        if stride != 1 || cin != out {
            p += conv(cin, out, 1, 1) + bn(out);
        }
        p
    }

    /// Stem, four stages with outputs 256/512/1024/2048, 1000-way classifier.
    pub fn network(depth: [usize; 4], mids: [usize; 4], kind: Mid) -> u64 {
        let mut total = conv(3, 64, 7, 1) + bn(64);
        let mut cin = 64;
        for (i, (&reps, &mid)) in depth.iter().zip(&mids).enumerate() {
            let out = 256 << i;
            for b in 0..reps {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                total += block(cin, mid, out, stride, kind);
                cin = out;
            }
        }
        total + fc(2048, 1000, true)
    }
}

/// Multiply-accumulate count of the same networks at 224x224, batch one.
pub mod macs {
    use super::params::Mid;

    fn conv(cin: usize, cout: usize, k: usize, groups: usize, out_size: usize) -> u64 {
        (cin / groups * k * k * cout * out_size * out_size) as u64
    }

    fn block(cin: usize, mid: usize, out: usize, in_size: usize, stride: usize, kind: Mid) -> u64 {
        let o = in_size / stride;
        let mut m = conv(cin, mid, 1, 1, in_size) + conv(mid, out, 1, 1, o);
        m += match kind {
            Mid::Psa(groups, split) => {
                let cb = mid / groups.len();
                let bin = if split { cb } else { mid };
                let hidden = (cb / 16).max(1);
                let convs: u64 = groups
                    .iter()
                    .zip([3, 5, 7, 9])
                    .map(|(&g, k)| conv(bin, cb, k, g, o))
                    .sum();
                convs + groups.len() as u64 * (2 * cb * hidden) as u64
            }
            _ => conv(mid, mid, 3, 1, o),
        };
        if let Mid::Se = kind {
            m += (2 * out * (out / 16)) as u64;
        }
        if stride != 1 || cin != out {
            m += conv(cin, out, 1, 1, o);
        }
        m
    }

    pub fn network(depth: [usize; 4], mids: [usize; 4], kind: Mid) -> u64 {
        let mut total = conv(3, 64, 7, 1, 112);
        let (mut cin, mut size) = (64, 56);
        for (i, (&reps, &mid)) in depth.iter().zip(&mids).enumerate() {
            let out = 256 << i;
            for b in 0..reps {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                total += block(cin, mid, out, size, stride, kind);
                size /= stride;
                cin = out;
            }
        }
        total + 2048 * 1000
    }
}
