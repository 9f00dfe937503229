//! Double-precision re-implementation of the RcAE forward pass and loss.
//!
//! Nothing here goes through the tensor crate, so finite differences taken
//! through it are an oracle for the f32 backward pass that is independent of
//! its kernels and free of single-precision cancellation.

use crate::nn::{Conv2d, ConvTranspose2d, ConvUnit, LEAKY_SLOPE};
use crate::rcae::RcaeModel;

/// C×H×W feature map.
#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Map {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.v[(c * self.h + y as usize) * self.w + x as usize]
        }
    }

    fn map(mut self, f: impl Fn(f64) -> f64) -> Map {
        self.v.iter_mut().for_each(|v| *v = f(*v));
        self
    }

    fn concat(&self, other: &Map) -> Map {
        let mut v = self.v.clone();
        v.extend_from_slice(&other.v);
        Map { c: self.c + other.c, v, ..*self }
    }
}

/// Parameter values indexed like the model's store.
pub struct Params {
    pub values: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<usize>>,
}

impl Params {
    pub fn of(model: &RcaeModel) -> Params {
        Params {
            values: model.store.iter().map(|p| p.value().data().iter().map(|&v| v as f64).collect()).collect(),
            shapes: model.store.iter().map(|p| p.value().shape().to_vec()).collect(),
        }
    }
}

fn conv(p: &Params, layer: &Conv2d, x: &Map) -> Map {
    let (w, b, s) = (&p.values[layer.weight.0], &p.values[layer.bias.0], &p.shapes[layer.weight.0]);
    let (cout, cin, k) = (s[0], s[1], s[2]);
    let (st, pad) = (layer.stride, layer.padding as isize);
    let mut out = Map::zeros(cout, (x.h + 2 * layer.padding - k) / st + 1, (x.w + 2 * layer.padding - k) / st + 1);
    for o in 0..cout {
        for y in 0..out.h {
            for xx in 0..out.w {
                let mut acc = b[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * st + ky) as isize - pad;
                            let ix = (xx * st + kx) as isize - pad;
                            acc += w[((o * cin + i) * k + ky) * k + kx] * x.at(i, iy, ix);
                        }
                    }
                }
                out.v[(o * out.h + y) * out.w + xx] = acc;
            }
        }
    }
    out
}

fn conv_transpose(p: &Params, layer: &ConvTranspose2d, x: &Map) -> Map {
    let (w, b, s) = (&p.values[layer.weight.0], &p.values[layer.bias.0], &p.shapes[layer.weight.0]);
    let (cin, cout, k) = (s[0], s[1], s[2]);
    let st = layer.stride;
    let mut out = Map::zeros(cout, (x.h - 1) * st + k, (x.w - 1) * st + k);
    for (plane, &bias) in out.v.chunks_mut(out.h * out.w).zip(b) {
        plane.fill(bias);
    }
    for i in 0..cin {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = x.v[(i * x.h + y) * x.w + xx];
                for o in 0..cout {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (oy, ox) = (y * st + ky, xx * st + kx);
                            out.v[(o * out.h + oy) * out.w + ox] += v * w[((i * cout + o) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE as f64 * v
    }
}

fn unit(p: &Params, u: &ConvUnit, x: &Map) -> Map {
    let [l1, l2, l3, l4] = &u.layers;
    let h1 = conv(p, l1, x).map(leaky);
    let h2 = conv(p, l2, &h1).map(leaky);
    let h3 = conv(p, l3, &if u.skips { h2.concat(&h1) } else { h2 }).map(leaky);
    conv(p, l4, &if u.skips { h3.concat(x) } else { h3 })
}

fn gradient_magnitude(m: &Map) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.v.len());
    for c in 0..m.c {
        for y in 0..m.h as isize {
            for x in 0..m.w as isize {
                let v = m.at(c, y, x);
                let dx = if x + 1 < m.w as isize { m.at(c, y, x + 1) - v } else { 0.0 };
                let dy = if y + 1 < m.h as isize { m.at(c, y + 1, x) - v } else { 0.0 };
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
    }
    out
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Depth-`n` reconstruction of a single C×H×W image.
fn reconstruct(model: &RcaeModel, p: &Params, x: &Map, n: usize) -> Map {
    let mut codes = Vec::with_capacity(n);
    let mut h = x.clone();
    for level in 1..=n {
        let e = model.encoder(level);
        h = conv(p, &e.down, &unit(p, &e.unit, &h));
        codes.push(h.clone());
    }
    for level in (1..=n).rev() {
        let d = model.decoder(level);
        h = conv_transpose(p, &d.up, &unit(p, &d.unit, &h));
        if model.config.cross_skips {
            let skip = if level == 1 { x } else { &codes[level - 2] };
            h.v.iter_mut().zip(&skip.v).for_each(|(a, b)| *a += b);
        }
    }
    h.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Reconstruction loss of the depth-`n` pass over a 1×C×H×W input, with
/// every parameter taken from `p`.
pub fn rcae_loss(model: &RcaeModel, p: &Params, x: &[f32], target: &[f32], shape: [usize; 3], n: usize) -> f64 {
    let [c, h, w] = shape;
    let to_map = |d: &[f32]| Map { c, h, w, v: d.iter().map(|&v| v as f64).collect() };
    let (x, t) = (to_map(x), to_map(target));
    let r = reconstruct(model, p, &x, n);
    mean_abs_diff(&t.v, &r.v) + mean_abs_diff(&gradient_magnitude(&t), &gradient_magnitude(&r))
}
