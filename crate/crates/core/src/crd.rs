//! Cross-recursion detector: a 3-D convolutional encoder-decoder over the
//! stacked `[I, I_D^1, …, I_D^N]` volume, producing a pixel anomaly map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rcad_tensor::{Binding, Graph, ParamStore, Tensor, Var};

use crate::augment::{self, AugmentConfig};
use crate::dpn::{batch1, DpnModel};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Conv3d, LEAKY_SLOPE};
use crate::rcae::RcaeModel;
use crate::train::{self, EpochLoss, TrainOptions};

/// Initial head bias: where the reconstructions agree with the input a
/// freshly built detector predicts `sigmoid(-2.944) ≈ 0.05`.
pub const HEAD_PRIOR_LOGIT: f32 = -2.944;

/// Initial head weight on each cross-recursion difference channel.
pub const HEAD_RESIDUAL_GAIN: f32 = 4.0;

/// Spatial downsampling factor of the encoder; input sides must divide it.
pub const SPATIAL_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CrdConfig {
    pub channels: usize,
    /// Channels of the first level; later levels use 2w, 4w, 4w.
    pub width: usize,
    /// Recursion depths (1-based, ascending) stacked after the input.
    pub steps: Vec<usize>,
}

impl CrdConfig {
    pub fn all_steps(channels: usize, width: usize, depth: usize) -> Self {
        CrdConfig {
            channels,
            width,
            steps: (1..=depth).collect(),
        }
    }

    pub fn volume_depth(&self) -> usize {
        self.steps.len() + 1
    }
}

/// Checks that `steps` is a non-empty, strictly increasing subset of `1..=max_depth`.
pub fn validate_steps(steps: &[usize], max_depth: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Config("CRD step subset is empty".into()));
    }
    if let Some(&s) = steps.iter().find(|&&s| s == 0 || s > max_depth) {
        return Err(Error::Config(format!("CRD step {s} outside [1, {max_depth}]")));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("CRD steps {steps:?} must be strictly increasing")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CrdModel {
    pub config: CrdConfig,
    pub store: ParamStore,
    encoder: [Conv3d; 4],
    decoder: [Conv3d; 3],
    head: Conv2d,
}

impl CrdModel {
    pub fn new<R: Rng + ?Sized>(config: CrdConfig, rng: &mut R) -> Result<Self> {
        if config.channels == 0 || config.width == 0 || config.steps.is_empty() {
            return Err(Error::Config("CRD channels, width and steps must be non-empty".into()));
        }
        let (c, w) = (config.channels, config.width);
        let widths = [w, 2 * w, 4 * w, 4 * w];
        let same = [1, 1, 1];
        let down = [1, 2, 2];
        let mut store = ParamStore::new();
        let encoder = [
            Conv3d::new(&mut store, "crd.enc1", c, widths[0], 3, [1, 1, 1], same, rng),
            Conv3d::new(&mut store, "crd.enc2", widths[0], widths[1], 3, down, same, rng),
            Conv3d::new(&mut store, "crd.enc3", widths[1], widths[2], 3, down, same, rng),
            Conv3d::new(&mut store, "crd.enc4", widths[2], widths[3], 3, down, same, rng),
        ];
        let decoder = [
            Conv3d::new(&mut store, "crd.dec3", widths[3] + widths[2], widths[2], 3, [1, 1, 1], same, rng),
            Conv3d::new(&mut store, "crd.dec2", widths[2] + widths[1], widths[1], 3, [1, 1, 1], same, rng),
            Conv3d::new(&mut store, "crd.dec1", widths[1] + widths[0], widths[0], 3, [1, 1, 1], same, rng),
        ];
        let head = Conv2d::new_linear(&mut store, "crd.head", widths[0], 1, 1, 1, 0, rng);
        let seeded = seed_depth_differences(&mut store, &encoder[0], c);
        pass_skip_channels(&mut store, &decoder[2], widths[1], seeded);
        let hw = store.get_mut(head.weight).value_mut().data_mut();
        hw.fill(0.0);
        hw[..seeded].fill(HEAD_RESIDUAL_GAIN);
        store.get_mut(head.bias).value_mut().data_mut().fill(HEAD_PRIOR_LOGIT);
        Ok(CrdModel {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Zeroes the 1×1 head so the map is exactly 0.5 everywhere.
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.get_mut(id).value_mut().data_mut().fill(0.0);
        }
    }

    fn check_volume(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 5
            && shape[1] == self.config.channels
            && shape[2] == self.config.volume_depth()
            && shape[3].is_multiple_of(SPATIAL_FACTOR)
            && shape[4].is_multiple_of(SPATIAL_FACTOR);
        if !ok {
            return Err(rcad_tensor::TensorError::Dimension {
                op: "crd_forward",
                detail: format!(
                    "expected B×{}×{}×H×W with H, W divisible by {SPATIAL_FACTOR}, got {shape:?}",
                    self.config.channels,
                    self.config.volume_depth()
                ),
            }
            .into());
        }
        Ok(())
    }

    /// B×C×D×H×W volume → B×1×H×W map in (0,1).
    pub fn forward_graph(&self, g: &mut Graph, p: &Binding, volume: Var) -> Result<Var> {
        self.check_volume(g.shape(volume))?;
        let mut skips = Vec::with_capacity(4);
        let mut h = volume;
        for layer in &self.encoder {
            let z = layer.forward(g, p, h)?;
            h = g.leaky_relu(z, LEAKY_SLOPE);
            skips.push(h);
        }
        for (layer, skip) in self.decoder.iter().zip(skips[..3].iter().rev()) {
            let up = g.upsample2x(h)?;
            let cat = g.concat(&[up, *skip], 1)?;
            let z = layer.forward(g, p, cat)?;
            h = g.leaky_relu(z, LEAKY_SLOPE);
        }
        let pooled = g.mean_axis(h, 2)?;
        let logits = self.head.forward(g, p, pooled)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward(&self, volume: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let v = g.input(volume.clone());
        let m = self.forward_graph(&mut g, &p, v)?;
        Ok(g.value(m).clone())
    }

    fn layout(&self) -> CrdModel {
        CrdModel {
            config: self.config.clone(),
            store: ParamStore::new(),
            encoder: self.encoder,
            decoder: self.decoder,
            head: self.head,
        }
    }
}

/// Turns the first `2c` filters of the first layer into one-sided
/// differences with the previous and the next depth slice. Summed over depth
/// after the activation they give `Σₖ |xₖ − xₖ₋₁|` per channel. Returns the
/// number of filters set.
fn seed_depth_differences(store: &mut ParamStore, layer: &Conv3d, c: usize) -> usize {
    let w = store.get_mut(layer.weight).value_mut();
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let seeded = (2 * c).min(cout);
    let data = w.data_mut();
    for o in 0..seeded {
        let (ch, neighbour) = (o % c, if o < c { 0 } else { 2 });
        let filter = &mut data[o * cin * 27..(o + 1) * cin * 27];
        filter.fill(0.0);
        filter[ch * 27 + neighbour * 9 + 4] = 1.0;
        filter[ch * 27 + 9 + 4] = -1.0;
    }
    seeded
}

/// Makes the first `count` outputs of a decoder layer copy the matching
/// skip channels, which follow `upsampled` channels in its input.
fn pass_skip_channels(store: &mut ParamStore, layer: &Conv3d, upsampled: usize, count: usize) {
    let w = store.get_mut(layer.weight).value_mut();
    let cin = w.shape()[1];
    let data = w.data_mut();
    for o in 0..count {
        let filter = &mut data[o * cin * 27..(o + 1) * cin * 27];
        filter.fill(0.0);
        filter[(upsampled + o) * 27 + 13] = 1.0;
    }
}

/// Stacks B×C×H×W tensors `[input, details…]` along a new depth axis.
pub fn stack_volume(input: &Tensor, details: &[Tensor]) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Usage(format!("expected B×C×H×W input, got {shape:?}")));
    }
    if let Some(d) = details.iter().find(|d| d.shape() != shape) {
        return Err(rcad_tensor::TensorError::Dimension {
            op: "stack_volume",
            detail: format!("detail {:?} vs input {shape:?}", d.shape()),
        }
        .into());
    }
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let depth = details.len() + 1;
    let mut data = Vec::with_capacity(b * c * depth * plane);
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * plane;
            for t in std::iter::once(input).chain(details) {
                data.extend_from_slice(&t.data()[off..off + plane]);
            }
        }
    }
    Ok(Tensor::new(&[b, c, depth, shape[2], shape[3]], data)?)
}

/// Detail-enhanced reconstructions `I_D^n` of a 1×C×H×W image for the
/// requested depths.
pub fn enhanced_trace(rcae: &RcaeModel, dpn: &DpnModel, x: &Tensor, steps: &[usize]) -> Result<Vec<Tensor>> {
    let deepest = steps.iter().copied().max().unwrap_or(0);
    let trace = rcae.run_trace(x, deepest)?;
    steps
        .iter()
        .map(|&n| Ok(dpn.forward(&trace.reconstructions[n - 1], x)?.1))
        .collect()
}

/// Volume `[I, I_D^n for n in steps]` for a 1×C×H×W image.
pub fn detection_volume(rcae: &RcaeModel, dpn: &DpnModel, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
    stack_volume(x, &enhanced_trace(rcae, dpn, x, steps)?)
}

/// Squared error between maps plus squared error between their gradient maps.
pub fn crd_loss(g: &mut Graph, predicted: Var, target: Var) -> Result<Var> {
    let values = g.l2_loss(predicted, target)?;
    let gp = g.spatial_gradient(predicted)?;
    let gt = g.spatial_gradient(target)?;
    let edges = g.l2_loss(gp, gt)?;
    Ok(g.add(values, edges)?)
}

pub fn crd_loss_value(predicted: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (a, b) = (g.input(predicted.clone()), g.input(target.clone()));
    let l = crd_loss(&mut g, a, b)?;
    Ok(g.value(l).data()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage3Config {
    pub train: TrainOptions,
    pub augment: AugmentConfig,
    /// Fraction of batches left uncorrupted, with an all-zero target.
    pub clean_batch_fraction: f32,
}

/// Trains the detector on corrupted normals against their exact change
/// masks, with RcAE and DPN frozen. `images` are C×H×W.
pub fn train_stage3(
    crd: &mut CrdModel,
    rcae: &RcaeModel,
    dpn: &DpnModel,
    images: &[Tensor],
    cfg: &Stage3Config,
    rng: &mut ChaCha8Rng,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Vec<EpochLoss>> {
    let layout = crd.layout();
    let steps = crd.config.steps.clone();
    train::fit(
        &mut crd.store,
        images,
        &cfg.train,
        3,
        rng,
        |r| r.gen::<f32>() < cfg.clean_batch_fraction,
        |store, img, &clean, r| {
            let (input, mask) = if clean {
                let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
                (img.clone(), Tensor::zeros(&[1, h, w]))
            } else {
                let a = augment::sample(img, r, &cfg.augment)?;
                (a.corrupted, a.mask)
            };
            let x = batch1(&input)?;
            let volume = detection_volume(rcae, dpn, &x, &steps)?;
            let target = batch1(&mask)?;
            train::sample_gradients(store, |g, p| {
                let v = g.input(volume);
                let t = g.input(target);
                let m = layout.forward_graph(g, p, v)?;
                crd_loss(g, m, t)
            })
        },
        log,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_head_gives_half_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut crd = CrdModel::new(CrdConfig::all_steps(3, 2, 2), &mut rng).unwrap();
        crd.zero_head();
        let v = Tensor::rand_uniform(&[1, 3, 3, 16, 16], 0.0, 1.0, &mut rng);
        let m = crd.forward(&v).unwrap();
        assert_eq!(m.shape(), &[1, 1, 16, 16]);
        assert!(m.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn wrong_depth_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crd = CrdModel::new(CrdConfig::all_steps(3, 2, 3), &mut rng).unwrap();
        let v = Tensor::zeros(&[1, 3, 3, 16, 16]);
        assert!(crd.forward(&v).is_err());
    }

    #[test]
    fn volume_puts_input_first() {
        let a = Tensor::full(&[1, 2, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2, 2], 2.0);
        let v = stack_volume(&a, &[b]).unwrap();
        assert_eq!(v.shape(), &[1, 2, 2, 2, 2]);
        assert_eq!(&v.data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn step_validation() {
        assert!(validate_steps(&[1, 3], 3).is_ok());
        assert!(validate_steps(&[], 3).is_err());
        assert!(validate_steps(&[4], 3).is_err());
        assert!(validate_steps(&[3, 1], 3).is_err());
    }
}
