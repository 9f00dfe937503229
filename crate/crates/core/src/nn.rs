//! Convolution layers and the 4-layer skip-connected unit shared by the
//! RcAE encoder/decoder and the DPN.

use rand::Rng;
use rcad_tensor::{Binding, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

pub const LEAKY_SLOPE: f32 = 0.01;

/// Gain for layers followed by a leaky ReLU.
fn leaky_gain() -> f32 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

/// Uniform weights with variance `gain² / fan_in`.
fn scaled_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f32, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Channel-diagonal average-pooling weights over the kernel window.
    pub fn set_average(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.weight).value_mut();
        let [cout, cin, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let data = w.data_mut();
        data.fill(0.0);
        for c in 0..cin.min(cout) {
            let base = (c * cin + c) * kh * kw;
            data[base..base + kh * kw].fill(1.0 / (kh * kw) as f32);
        }
    }

    /// A convolution feeding a leaky ReLU.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, [cin, cout, kernel, stride, padding], leaky_gain(), rng)
    }

    /// A convolution whose output is used without an activation.
    #[allow(clippy::too_many_arguments)]
    pub fn new_linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, [cin, cout, kernel, stride, padding], 1.0, rng)
    }

    fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        [cin, cout, kernel, stride, padding]: [usize; 5],
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let w = scaled_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, gain, rng);
        Conv2d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.padding)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Channel-diagonal nearest-neighbour upsampling weights.
    pub fn set_replicate(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.weight).value_mut();
        let [cin, cout, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let data = w.data_mut();
        data.fill(0.0);
        for c in 0..cin.min(cout) {
            let base = (c * cout + c) * kh * kw;
            data[base..base + kh * kw].fill(1.0);
        }
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees cin·(kernel/stride)² taps.
        let fan_in = cin * (kernel * kernel / (stride * stride)).max(1);
        let w = scaled_uniform(&[cin, cout, kernel, kernel], fan_in, 1.0, rng);
        ConvTranspose2d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv_transpose2d(x, p.var(self.weight), p.var(self.bias), self.stride)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let k3 = kernel * kernel * kernel;
        let w = scaled_uniform(&[cout, cin, kernel, kernel, kernel], cin * k3, leaky_gain(), rng);
        Conv3d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        Ok(g.conv3d(x, p.var(self.weight), p.var(self.bias), self.stride, self.padding)?)
    }
}

/// Four 3×3 convolutions, `in → hidden → hidden → hidden → out`, with
/// leaky-ReLU after the first three and a linear last layer.
///
/// With `skips` on, the feature entering layer *k* is concatenated onto the
/// input of its mirror layer *5−k*: layer 3 reads `[h2, h1]` and layer 4
/// reads `[h3, x]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub layers: [Conv2d; 4],
    pub skips: bool,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        skips: bool,
        rng: &mut R,
    ) -> Self {
        let l3_in = if skips { 2 * hidden } else { hidden };
        let l4_in = if skips { hidden + cin } else { hidden };
        let layers = [
            Conv2d::new(store, &format!("{name}.l1"), cin, hidden, 3, 1, 1, rng),
            Conv2d::new(store, &format!("{name}.l2"), hidden, hidden, 3, 1, 1, rng),
            Conv2d::new(store, &format!("{name}.l3"), l3_in, hidden, 3, 1, 1, rng),
            Conv2d::new_linear(store, &format!("{name}.l4"), l4_in, cout, 3, 1, 1, rng),
        ];
        ConvUnit { layers, skips }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let [l1, l2, l3, l4] = &self.layers;
        let h1 = l1.forward(g, p, x)?;
        let h1 = g.leaky_relu(h1, LEAKY_SLOPE);
        let h2 = l2.forward(g, p, h1)?;
        let h2 = g.leaky_relu(h2, LEAKY_SLOPE);
        let in3 = if self.skips { g.concat(&[h2, h1], 1)? } else { h2 };
        let h3 = l3.forward(g, p, in3)?;
        let h3 = g.leaky_relu(h3, LEAKY_SLOPE);
        let in4 = if self.skips { g.concat(&[h3, x], 1)? } else { h3 };
        l4.forward(g, p, in4)
    }

    /// Sets the last layer's taps on the unit input to the identity, so the
    /// unit starts close to passing its input through. Needs `skips` and
    /// matching input and output channel counts.
    pub fn identity_skip(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.layers[3].weight).value_mut();
        let [cout, cin4, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let hidden = cin4 - cout;
        let data = w.data_mut();
        for o in 0..cout {
            for i in hidden..cin4 {
                let base = (o * cin4 + i) * k * k;
                data[base..base + k * k].fill(0.0);
                if i - hidden == o {
                    data[base + (k / 2) * k + k / 2] = 1.0;
                }
            }
        }
    }

    /// Zeroes the last layer so the unit initially outputs exactly zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        for id in [self.layers[3].weight, self.layers[3].bias] {
            store.get_mut(id).value_mut().data_mut().fill(0.0);
        }
    }
}
