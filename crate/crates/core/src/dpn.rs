//! Detail restoration network: predicts a residual that puts back the
//! high-frequency content a recursive reconstruction loses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rcad_tensor::{Binding, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ConvUnit;
use crate::rcae::{sample_depth, RcaeModel};
use crate::train::{self, EpochLoss, TrainOptions};

#[derive(Clone, Debug)]
pub struct DpnModel {
    pub channels: usize,
    pub hidden_width: usize,
    pub store: ParamStore,
    unit: ConvUnit,
}

impl DpnModel {
    /// The output layer starts at zero, so an untrained network leaves
    /// reconstructions unchanged.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden_width: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || hidden_width == 0 {
            return Err(Error::Config("DPN channels and hidden width must be positive".into()));
        }
        let mut store = ParamStore::new();
        let unit = ConvUnit::new(&mut store, "dpn", 2 * channels, hidden_width, channels, true, rng);
        unit.zero_output_layer(&mut store);
        Ok(DpnModel {
            channels,
            hidden_width,
            store,
            unit,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Returns `(residual, clamp(recon + residual, 0, 1))`. The network reads
    /// the reconstruction alongside the gradient map of `input`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Binding, recon: Var, input: Var) -> Result<(Var, Var)> {
        if g.shape(recon) != g.shape(input) {
            return Err(rcad_tensor::TensorError::Dimension {
                op: "dpn_forward",
                detail: format!("reconstruction {:?} vs input {:?}", g.shape(recon), g.shape(input)),
            }
            .into());
        }
        let edges = g.spatial_gradient(input)?;
        let x = g.concat(&[recon, edges], 1)?;
        let res = self.unit.forward(g, p, x)?;
        let sum = g.add(recon, res)?;
        Ok((res, g.clamp(sum, 0.0, 1.0)))
    }

    pub fn forward(&self, recon: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let r = g.input(recon.clone());
        let i = g.input(input.clone());
        let (res, detail) = self.forward_graph(&mut g, &p, r, i)?;
        Ok((g.value(res).clone(), g.value(detail).clone()))
    }

    fn layout(&self) -> DpnModel {
        DpnModel {
            channels: self.channels,
            hidden_width: self.hidden_width,
            store: ParamStore::new(),
            unit: self.unit.clone(),
        }
    }
}

/// Intensity and gradient-map L1 between `res + recon` and `target`.
pub fn dpn_loss(g: &mut Graph, res: Var, recon: Var, target: Var) -> Result<Var> {
    let restored = g.add(res, recon)?;
    let intensity = g.l1_loss(restored, target)?;
    let gr = g.spatial_gradient(restored)?;
    let gt = g.spatial_gradient(target)?;
    let edges = g.l1_loss(gr, gt)?;
    Ok(g.add(intensity, edges)?)
}

pub fn dpn_loss_value(res: &Tensor, recon: &Tensor, target: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let (a, b, c) = (g.input(res.clone()), g.input(recon.clone()), g.input(target.clone()));
    let l = dpn_loss(&mut g, a, b, c)?;
    Ok(g.value(l).data()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub train: TrainOptions,
}

/// Trains the DPN on clean images against a frozen RcAE, with the
/// recursion depth drawn uniformly per batch. `images` are C×H×W.
pub fn train_stage2(
    dpn: &mut DpnModel,
    rcae: &RcaeModel,
    images: &[Tensor],
    cfg: &Stage2Config,
    rng: &mut ChaCha8Rng,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Vec<EpochLoss>> {
    let max_depth = rcae.config.max_depth;
    let layout = dpn.layout();
    train::fit(
        &mut dpn.store,
        images,
        &cfg.train,
        2,
        rng,
        |r| sample_depth(r, max_depth),
        |store, img, &depth, _| {
            let x = batch1(img)?;
            let recon = rcae.reconstruction(&x, depth)?;
            train::sample_gradients(store, |g, p| {
                let r = g.input(recon);
                let i = g.input(x);
                let (res, _) = layout.forward_graph(g, p, r, i)?;
                dpn_loss(g, res, r, i)
            })
        },
        log,
    )
}

/// Adds a leading batch axis of size 1.
pub(crate) fn batch1(img: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    Ok(img.clone().reshape(&shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn untrained_network_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dpn = DpnModel::new(3, 8, &mut rng).unwrap();
        let r = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let i = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let (res, detail) = dpn.forward(&r, &i).unwrap();
        assert!(res.data().iter().all(|&v| v == 0.0));
        assert_eq!(detail, r);
    }

    #[test]
    fn first_layer_reads_six_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dpn = DpnModel::new(3, 8, &mut rng).unwrap();
        assert_eq!(dpn.store.iter().next().unwrap().value().shape(), &[8, 6, 3, 3]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dpn = DpnModel::new(3, 4, &mut rng).unwrap();
        let r = Tensor::zeros(&[1, 3, 8, 8]);
        let i = Tensor::zeros(&[1, 3, 8, 6]);
        assert!(dpn.forward(&r, &i).is_err());
    }
}
