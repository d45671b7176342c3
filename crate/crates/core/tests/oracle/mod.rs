//! Loop-level reference implementations, written straight from the cell
//! and pooling updates without the tape or the im2col kernels.
//!
//! Everything is plain `Vec<f64>` in channel-major `[C x H x W]` layout.

#![allow(dead_code)]

#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Map { c, h, w, data }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn channels(&self, start: usize, len: usize) -> Map {
        let n = self.h * self.w;
        Map::new(len, self.h, self.w, self.data[start * n..(start + len) * n].to_vec())
    }

    pub fn concat(&self, other: &Map) -> Map {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Map::new(self.c + other.c, self.h, self.w, data)
    }

    fn zip(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        // a single-channel map broadcasts over the channels of the other
        let n = self.h * self.w;
        let c = self.c.max(other.c);
        let mut out = Map::zeros(c, self.h, self.w);
        for ch in 0..c {
            for i in 0..n {
                let a = self.data[(if self.c == 1 { 0 } else { ch }) * n + i];
                let b = other.data[(if other.c == 1 { 0 } else { ch }) * n + i];
                out.data[ch * n + i] = f(a, b);
            }
        }
        out
    }

    pub fn add(&self, o: &Map) -> Map {
        self.zip(o, |a, b| a + b)
    }

    pub fn mul(&self, o: &Map) -> Map {
        self.zip(o, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map::new(self.c, self.h, self.w, self.data.iter().map(|&v| f(v)).collect())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Same-padded cross-correlation, six nested loops.
pub fn conv2d(x: &Map, kernel: &[f64], c_out: usize, k: usize, bias: &[f64], extra: Option<&Map>) -> Map {
    let pad = (k / 2) as isize;
    let mut out = Map::zeros(c_out, x.h, x.w);
    for o in 0..c_out {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias[o];
                if let Some(e) = extra {
                    acc += e.at(o, y, xx);
                }
                for ci in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            let wv = kernel[((o * x.c + ci) * k + ky) * k + kx];
                            acc += wv * x.at(ci, sy as usize, sx as usize);
                        }
                    }
                }
                *out.at_mut(o, y, xx) = acc;
            }
        }
    }
    out
}

/// `input[T x C x H x W]`, `kernel[Co x Ci x kt x k x k]`: valid in time,
/// zero-padded in space. Returns `T - kt + 1` maps.
pub fn conv3d(input: &[Map], kernel: &[f64], c_out: usize, kt: usize, k: usize, bias: &[f64]) -> Vec<Map> {
    let pad = (k / 2) as isize;
    let (ci_n, h, w) = (input[0].c, input[0].h, input[0].w);
    let mut out = Vec::new();
    for t in 0..=input.len() - kt {
        let mut m = Map::zeros(c_out, h, w);
        for o in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for ci in 0..ci_n {
                        for dt in 0..kt {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = x as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wv = kernel[(((o * ci_n + ci) * kt + dt) * k + ky) * k + kx];
                                    acc += wv * input[t + dt].at(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    *m.at_mut(o, y, x) = acc;
                }
            }
        }
        out.push(m);
    }
    out
}

pub fn spatial_average(x: &Map) -> Vec<f64> {
    (0..x.c)
        .map(|c| {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(c, y, xx);
                }
            }
            s / (x.h * x.w) as f64
        })
        .collect()
}

pub fn channel_sum(x: &Map) -> Map {
    let mut out = Map::zeros(1, x.h, x.w);
    for c in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                *out.at_mut(0, y, xx) += x.at(c, y, xx);
            }
        }
    }
    out
}

pub fn softmax_map(x: &Map) -> Map {
    let m = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.data.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Map::new(x.c, x.h, x.w, e.iter().map(|v| v / z).collect())
}

/// `z_c = sum_k avg(x)_k theta[k, c] + bias_c` for `theta[K x C]`.
pub fn scores(x: &Map, theta: &[f64], categories: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let avg = spatial_average(x);
    (0..categories)
        .map(|c| {
            let mut z = 0.0;
            for (k, a) in avg.iter().enumerate() {
                z += a * theta[k * categories + c];
            }
            z + bias.map_or(0.0, |b| b[c])
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// `x[k, i] * theta[k, c]` for one category.
pub fn scale_by_column(x: &Map, theta: &[f64], categories: usize, c: usize) -> Map {
    let mut out = x.clone();
    for k in 0..x.c {
        for y in 0..x.h {
            for xx in 0..x.w {
                *out.at_mut(k, y, xx) = x.at(k, y, xx) * theta[k * categories + c];
            }
        }
    }
    out
}

/// Class activation maps of every category, then the argmax one.
pub fn attention_map(x: &Map, theta: &[f64], categories: usize) -> Map {
    let maps: Vec<Map> = (0..categories)
        .map(|c| channel_sum(&scale_by_column(x, theta, categories, c)))
        .collect();
    let c = argmax(&scores(x, theta, categories, None));
    maps[c].clone()
}

pub fn attention_map_fullrank(c: &Map, theta: &[f64], categories: usize, bias: Option<&[f64]>) -> Map {
    let win = argmax(&scores(c, theta, categories, bias));
    scale_by_column(c, theta, categories, win)
}

/// `w_o (theta^T avg(attended))`.
pub fn instance_bias(attended: &Map, theta: &[f64], categories: usize, w_o: &[f64]) -> Vec<f64> {
    let z = scores(attended, theta, categories, None);
    (0..categories)
        .map(|r| (0..categories).map(|j| w_o[r * categories + j] * z[j]).sum())
        .collect()
}

pub struct Conv {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub struct LstaWeights {
    pub depth: usize,
    pub kernel: usize,
    pub categories: usize,
    pub w_a: Option<Conv>,
    pub theta_a: Option<Vec<f64>>,
    pub w_c: Conv,
    pub w_o: Conv,
    pub theta_c: Option<Vec<f64>>,
    pub bias_ctrl: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LstaState {
    pub a: Map,
    pub s: Map,
    pub c: Map,
    pub o: Map,
}

impl LstaState {
    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        LstaState {
            a: Map::zeros(1, h, w),
            s: Map::zeros(1, h, w),
            c: Map::zeros(k, h, w),
            o: Map::zeros(k, h, w),
        }
    }
}

pub struct StepOut {
    pub state: LstaState,
    pub s_map: Option<Map>,
    pub nu_c: Option<Map>,
}

fn hidden(gate: &Map, mem: &Map) -> Map {
    gate.mul(&mem.map(f64::tanh))
}

/// One LSTA step.
///
/// ```text
/// nu_a      = CAM of x under the winning category of theta_a
/// (i,f,s,a~) = (sig,sig,sig,tanh)(W_a * [nu_a, s_prev * tanh(a_prev)])
/// a         = f * a_prev + i * a~
/// s_map     = softmax(nu_a + s * tanh(a))
/// attended  = N * s_map * x            (x when attention is off)
/// (i,f,c~)  = (sig,sig,tanh)(W_c * [attended, o_prev * tanh(c_prev)])
/// c         = f * c_prev + i * c~
/// nu_c      = theta_c[:, c*] * c, c* = argmax(scores(c) + w_o scores(attended))
/// o         = sig(W_o * [nu_c * c, o_prev * tanh(c_prev)])   (or [attended, ...])
/// ```
pub fn lsta_step(x: &Map, st: &LstaState, w: &LstaWeights) -> StepOut {
    let k = w.depth;
    let n = (x.h * x.w) as f64;
    let (attended, a, s, s_map) = match (&w.w_a, &w.theta_a) {
        (Some(wa), Some(theta)) => {
            let nu = attention_map(x, theta, w.categories);
            let input = nu.concat(&hidden(&st.s, &st.a));
            let pre = conv2d(&input, &wa.kernel, 4, w.kernel, &wa.bias, None);
            let i = pre.channels(0, 1).map(sigmoid);
            let f = pre.channels(1, 1).map(sigmoid);
            let s = pre.channels(2, 1).map(sigmoid);
            let cand = pre.channels(3, 1).map(f64::tanh);
            let a = f.mul(&st.a).add(&i.mul(&cand));
            let s_map = softmax_map(&nu.add(&hidden(&s, &a)));
            let attended = x.mul(&s_map).map(|v| v * n);
            (attended, a, s, Some(s_map))
        }
        _ => (x.clone(), st.a.clone(), st.s.clone(), None),
    };
    let h = hidden(&st.o, &st.c);
    let pre = conv2d(&attended.concat(&h), &w.w_c.kernel, 3 * k, w.kernel, &w.w_c.bias, None);
    let i = pre.channels(0, k).map(sigmoid);
    let f = pre.channels(k, k).map(sigmoid);
    let cand = pre.channels(2 * k, k).map(f64::tanh);
    let c = f.mul(&st.c).add(&i.mul(&cand));
    let (gate_in, nu_c) = match &w.theta_c {
        Some(theta) => {
            let b = w
                .bias_ctrl
                .as_ref()
                .map(|wo| instance_bias(&attended, theta, w.categories, wo));
            let nu_c = attention_map_fullrank(&c, theta, w.categories, b.as_deref());
            (nu_c.mul(&c), Some(nu_c))
        }
        None => (attended.clone(), None),
    };
    let o = conv2d(&gate_in.concat(&h), &w.w_o.kernel, k, w.kernel, &w.w_o.bias, None).map(sigmoid);
    StepOut {
        state: LstaState { a, s, c, o },
        s_map,
        nu_c,
    }
}

/// ConvLSTM step, gates `(i, f, o, c~)` from one `4K`-channel convolution.
pub fn convlstm_step(x: &Map, c_prev: &Map, o_prev: &Map, kernel: &[f64], bias: &[f64], ks: usize) -> (Map, Map) {
    let k = c_prev.c;
    let pre = conv2d(&x.concat(&hidden(o_prev, c_prev)), kernel, 4 * k, ks, bias, None);
    let i = pre.channels(0, k).map(sigmoid);
    let f = pre.channels(k, k).map(sigmoid);
    let o = pre.channels(2 * k, k).map(sigmoid);
    let cand = pre.channels(3 * k, k).map(f64::tanh);
    let c = f.mul(c_prev).add(&i.mul(&cand));
    (c, o)
}
