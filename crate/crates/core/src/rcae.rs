//! Recursive convolutional autoencoder.
//!
//! One encoder block halves the resolution and one decoder block doubles it;
//! both are reapplied `n` times, so the parameter count does not depend on
//! the recursion depth. The depth-`n` reconstruction `R_n` is `n` encoder
//! applications followed by `n` decoder applications.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rcad_tensor::{Binding, Graph, ParamStore, Tensor, Var};

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ConvUnit};
use crate::train::{self, EpochLoss, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct RcaeConfig {
    pub channels: usize,
    pub hidden_width: usize,
    pub max_depth: usize,
    /// One encoder/decoder pair reused at every level. When off, each level
    /// gets its own blocks.
    pub weight_sharing: bool,
    /// Skip connections inside each [`ConvUnit`].
    pub unit_skips: bool,
    /// Adds the encoder output of each level to the decoder output at the
    /// same level (the input image itself at level 0).
    pub cross_skips: bool,
    /// Builds the trace from the intermediate decoder states of the deepest
    /// reconstruction, upsampled to full resolution.
    pub intermediate_trace: bool,
}

impl Default for RcaeConfig {
    fn default() -> Self {
        RcaeConfig {
            channels: 3,
            hidden_width: 32,
            max_depth: 5,
            weight_sharing: true,
            unit_skips: true,
            cross_skips: false,
            intermediate_trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub unit: ConvUnit,
    pub down: Conv2d,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderBlock {
    pub unit: ConvUnit,
    pub up: ConvTranspose2d,
}

#[derive(Clone, Debug)]
pub struct RcaeModel {
    pub config: RcaeConfig,
    pub store: ParamStore,
    encoders: Vec<EncoderBlock>,
    decoders: Vec<DecoderBlock>,
}

/// Codes `I_C^1..I_C^N` and full-resolution reconstructions `R_1..R_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursionTrace {
    pub codes: Vec<Tensor>,
    pub reconstructions: Vec<Tensor>,
}

impl RcaeModel {
    pub fn new<R: Rng + ?Sized>(config: RcaeConfig, rng: &mut R) -> Result<Self> {
        if config.max_depth == 0 || config.channels == 0 || config.hidden_width == 0 {
            return Err(Error::Config(
                "RcAE depth, channels and hidden width must be positive".into(),
            ));
        }
        let blocks = if config.weight_sharing { 1 } else { config.max_depth };
        let (c, w) = (config.channels, config.hidden_width);
        let mut store = ParamStore::new();
        let mut encoders = Vec::with_capacity(blocks);
        let mut decoders = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let name = if blocks == 1 { "enc".to_string() } else { format!("enc{}", i + 1) };
            encoders.push(EncoderBlock {
                unit: ConvUnit::new(&mut store, &format!("{name}.unit"), c, w, c, config.unit_skips, rng),
                down: Conv2d::new_linear(&mut store, &format!("{name}.down"), c, c, 2, 2, 0, rng),
            });
        }
        for i in 0..blocks {
            let name = if blocks == 1 { "dec".to_string() } else { format!("dec{}", i + 1) };
            decoders.push(DecoderBlock {
                unit: ConvUnit::new(&mut store, &format!("{name}.unit"), c, w, c, config.unit_skips, rng),
                up: ConvTranspose2d::new(&mut store, &format!("{name}.up"), c, c, 2, 2, rng),
            });
        }
        for (e, d) in encoders.iter().zip(&decoders) {
            if config.unit_skips {
                e.unit.identity_skip(&mut store);
                d.unit.identity_skip(&mut store);
            }
            e.down.set_average(&mut store);
            d.up.set_replicate(&mut store);
        }
        Ok(RcaeModel {
            config,
            store,
            encoders,
            decoders,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Encoder used to go from `level - 1` to `level` (1-based).
    pub(crate) fn encoder(&self, level: usize) -> &EncoderBlock {
        &self.encoders[if self.config.weight_sharing { 0 } else { level - 1 }]
    }

    /// Decoder used to go from `level` to `level - 1`.
    pub(crate) fn decoder(&self, level: usize) -> &DecoderBlock {
        &self.decoders[if self.config.weight_sharing { 0 } else { level - 1 }]
    }

    fn check_depth(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.max_depth {
            return Err(Error::Usage(format!(
                "recursion depth {n} outside [1, {}]",
                self.config.max_depth
            )));
        }
        Ok(())
    }

    fn check_ladder(&self, shape: &[usize], n: usize) -> Result<()> {
        let step = 1usize << n;
        if shape.len() != 4 || shape[1] != self.config.channels {
            return Err(Error::Usage(format!(
                "expected B×{}×H×W input, got {shape:?}",
                self.config.channels
            )));
        }
        if !shape[2].is_multiple_of(step) || !shape[3].is_multiple_of(step) {
            return Err(rcad_tensor::TensorError::Dimension {
                op: "compress",
                detail: format!("{}×{} is not divisible by 2^{n}", shape[2], shape[3]),
            }
            .into());
        }
        Ok(())
    }

    /// Records `n` encoder applications; returns the codes at levels 1..=n.
    pub fn compress_graph(&self, g: &mut Graph, p: &Binding, x: Var, n: usize) -> Result<Vec<Var>> {
        self.check_depth(n)?;
        self.check_ladder(g.shape(x), n)?;
        let mut codes = Vec::with_capacity(n);
        let mut h = x;
        for level in 1..=n {
            let e = self.encoder(level);
            let u = e.unit.forward(g, p, h)?;
            h = e.down.forward(g, p, u)?;
            codes.push(h);
        }
        Ok(codes)
    }

    /// Decoder states after each of the `n` decoder applications starting
    /// from the level-`n` code, before the output sigmoid. `skips[l]` is
    /// the encoder feature at level `l` (level 0 being the input).
    fn decode_graph(
        &self,
        g: &mut Graph,
        p: &Binding,
        code: Var,
        n: usize,
        skips: Option<&[Var]>,
    ) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(n);
        let mut h = code;
        for level in (1..=n).rev() {
            let d = self.decoder(level);
            let u = d.unit.forward(g, p, h)?;
            h = d.up.forward(g, p, u)?;
            if let Some(skips) = skips {
                h = g.add(h, skips[level - 1])?;
            }
            states.push(h);
        }
        Ok(states)
    }

    /// Records `n` decoder applications and the output sigmoid.
    pub fn reconstruct_graph(&self, g: &mut Graph, p: &Binding, code: Var, n: usize) -> Result<Var> {
        self.check_depth(n)?;
        let states = self.decode_graph(g, p, code, n, None)?;
        Ok(g.sigmoid(*states.last().expect("n >= 1")))
    }

    /// Depth-`n` reconstruction of `x` as a graph node.
    pub fn forward_graph(&self, g: &mut Graph, p: &Binding, x: Var, n: usize) -> Result<Var> {
        let codes = self.compress_graph(g, p, x, n)?;
        let skips = self.skip_features(x, &codes);
        let states = self.decode_graph(g, p, codes[n - 1], n, skips.as_deref())?;
        Ok(g.sigmoid(*states.last().expect("n >= 1")))
    }

    fn skip_features(&self, x: Var, codes: &[Var]) -> Option<Vec<Var>> {
        self.config.cross_skips.then(|| {
            let mut v = vec![x];
            v.extend_from_slice(codes);
            v
        })
    }

    /// Full recursion trace `R_1..R_n` as graph nodes; the compression
    /// prefix is shared between depths.
    pub fn trace_graph(&self, g: &mut Graph, p: &Binding, x: Var, n: usize) -> Result<(Vec<Var>, Vec<Var>)> {
        let codes = self.compress_graph(g, p, x, n)?;
        let skips = self.skip_features(x, &codes);
        let mut recons = Vec::with_capacity(n);
        if self.config.intermediate_trace {
            let states = self.decode_graph(g, p, codes[n - 1], n, skips.as_deref())?;
            for (j, &s) in states.iter().enumerate() {
                let mut r = g.sigmoid(s);
                for _ in 0..(n - 1 - j) {
                    r = g.upsample2x(r)?;
                }
                recons.push(r);
            }
        } else {
            for depth in 1..=n {
                let states = self.decode_graph(g, p, codes[depth - 1], depth, skips.as_deref())?;
                recons.push(g.sigmoid(*states.last().expect("depth >= 1")));
            }
        }
        Ok((codes, recons))
    }

    pub fn compress(&self, x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let xv = g.input(x.clone());
        let codes = self.compress_graph(&mut g, &p, xv, n)?;
        Ok(codes.into_iter().map(|c| g.value(c).clone()).collect())
    }

    pub fn reconstruct(&self, code: &Tensor, n: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let cv = g.input(code.clone());
        let r = self.reconstruct_graph(&mut g, &p, cv, n)?;
        Ok(g.value(r).clone())
    }

    /// Depth-`n` reconstruction of a B×C×H×W batch.
    pub fn forward(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let xv = g.input(x.clone());
        let r = self.forward_graph(&mut g, &p, xv, n)?;
        Ok(g.value(r).clone())
    }

    /// `R_n` as it appears in the trace.
    pub fn reconstruction(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        if self.config.intermediate_trace {
            Ok(self.run_trace(x, self.config.max_depth)?.reconstructions.swap_remove(n - 1))
        } else {
            self.forward(x, n)
        }
    }

    pub fn run_trace(&self, x: &Tensor, n: usize) -> Result<RecursionTrace> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let xv = g.input(x.clone());
        let (codes, recons) = self.trace_graph(&mut g, &p, xv, n)?;
        Ok(RecursionTrace {
            codes: codes.into_iter().map(|c| g.value(c).clone()).collect(),
            reconstructions: recons.into_iter().map(|r| g.value(r).clone()).collect(),
        })
    }
}

/// Intensity L1 plus L1 between spatial-gradient maps.
pub fn rcae_loss(g: &mut Graph, target: Var, recon: Var) -> Result<Var> {
    let intensity = g.l1_loss(target, recon)?;
    let gt = g.spatial_gradient(target)?;
    let gr = g.spatial_gradient(recon)?;
    let edges = g.l1_loss(gt, gr)?;
    Ok(g.add(intensity, edges)?)
}

pub fn rcae_loss_value(target: &Tensor, recon: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let t = g.input(target.clone());
    let r = g.input(recon.clone());
    let l = rcae_loss(&mut g, t, r)?;
    Ok(g.value(l).data()[0])
}

/// Non-recursive autoencoder of the same unrolled depth: one unshared block
/// per level and no skips inside the units.
pub fn build_convae_baseline<R: Rng + ?Sized>(config: &RcaeConfig, rng: &mut R) -> Result<RcaeModel> {
    RcaeModel::new(
        RcaeConfig {
            weight_sharing: false,
            unit_skips: false,
            cross_skips: false,
            intermediate_trace: false,
            ..config.clone()
        },
        rng,
    )
}

pub fn sample_depth<R: Rng + ?Sized>(rng: &mut R, max_depth: usize) -> usize {
    rng.gen_range(1..=max_depth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub train: TrainOptions,
    pub augment: AugmentConfig,
    /// Chance that a training image is corrupted before reconstruction.
    pub corrupt_probability: f32,
    /// Draws the depth per batch; when false every batch uses `max_depth`.
    pub random_depth: bool,
}

/// Trains `model` to reconstruct clean images from corrupted inputs at a
/// depth drawn uniformly from `[1, N]` per batch. `images` are C×H×W.
pub fn train_stage1(
    model: &mut RcaeModel,
    images: &[Tensor],
    cfg: &Stage1Config,
    rng: &mut ChaCha8Rng,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Vec<EpochLoss>> {
    let max_depth = model.config.max_depth;
    let shape = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        s
    };
    let layout = model.layout();
    train::fit(
        &mut model.store,
        images,
        &cfg.train,
        1,
        rng,
        |r| if cfg.random_depth { sample_depth(r, max_depth) } else { max_depth },
        |store, img, &depth, r| {
            let input = if r.gen::<f32>() < cfg.corrupt_probability {
                augment::sample(img, r, &cfg.augment)?.corrupted
            } else {
                img.clone()
            };
            train::sample_gradients(store, |g, p| {
                let x = g.input(input.reshape(&shape(img))?);
                let target = g.input(img.clone().reshape(&shape(img))?);
                let r = layout.forward_graph(g, p, x, depth)?;
                rcae_loss(g, target, r)
            })
        },
        log,
    )
}

impl RcaeModel {
    /// Structure without parameters, for recording graphs against a
    /// separately borrowed store.
    pub(crate) fn layout(&self) -> RcaeModel {
        RcaeModel {
            config: self.config.clone(),
            store: ParamStore::new(),
            encoders: self.encoders.clone(),
            decoders: self.decoders.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model(depth: usize, shared: bool) -> RcaeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        RcaeModel::new(
            RcaeConfig {
                hidden_width: 8,
                max_depth: depth,
                weight_sharing: shared,
                ..RcaeConfig::default()
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn resolution_ladder() {
        let m = model(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let codes = m.compress(&x, 3).unwrap();
        let sizes: Vec<_> = codes.iter().map(|c| c.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![1, 3, 32, 32], vec![1, 3, 16, 16], vec![1, 3, 8, 8]]);
        let r = m.reconstruct(&codes[2], 3).unwrap();
        assert_eq!(r.shape(), &[1, 3, 64, 64]);
        assert!(r.is_finite());
    }

    #[test]
    fn odd_resolution_is_rejected() {
        let m = model(3, true);
        let x = Tensor::zeros(&[1, 3, 36, 36]);
        assert!(matches!(
            m.compress(&x, 3),
            Err(Error::Tensor(rcad_tensor::TensorError::Dimension { .. }))
        ));
        assert!(m.compress(&x, 2).is_ok());
        assert!(matches!(m.compress(&x, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn depth_one_trace_is_plain_encode_decode() {
        let m = model(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let trace = m.run_trace(&x, 1).unwrap();
        let code = m.compress(&x, 1).unwrap().remove(0);
        assert_eq!(trace.reconstructions[0], m.reconstruct(&code, 1).unwrap());
        assert_eq!(trace.reconstructions[0], m.forward(&x, 1).unwrap());
    }

    #[test]
    fn unshared_blocks_scale_with_depth() {
        assert_eq!(model(1, true).num_parameters(), model(5, true).num_parameters());
        assert_eq!(model(3, false).num_parameters(), 3 * model(1, true).num_parameters());
    }

    #[test]
    fn loss_hand_values() {
        let zero = Tensor::zeros(&[1, 3, 4, 4]);
        let one = Tensor::full(&[1, 3, 4, 4], 1.0);
        assert_eq!(rcae_loss_value(&zero, &one).unwrap(), 1.0);
        assert_eq!(rcae_loss_value(&one, &one).unwrap(), 0.0);
    }

    #[test]
    fn intermediate_trace_is_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = RcaeModel::new(
            RcaeConfig {
                hidden_width: 4,
                max_depth: 3,
                intermediate_trace: true,
                ..RcaeConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let t = m.run_trace(&x, 3).unwrap();
        assert!(t.reconstructions.iter().all(|r| r.shape() == x.shape()));
        assert_eq!(t.reconstructions[2], m.forward(&x, 3).unwrap());
    }
}
