//! Minibatch training loop shared by the three stages.
//!
//! Each sample of a batch builds its own graph, so samples run concurrently
//! under [`Exec::Parallel`]. Per-sample gradients are summed in sample order
//! before the Adam step, which keeps results independent of the exec mode.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcad_tensor::{par, Adam, Binding, Exec, Graph, ParamStore, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: Adam,
    pub exec: Exec,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: 4,
            adam: Adam::default(),
            exec: Exec::default(),
        }
    }
}

/// Mean per-sample loss over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f32,
}

pub(crate) type SampleResult = (f32, Vec<Vec<f32>>);

/// Builds a loss graph over `store`'s parameters and returns the loss value
/// and the flat parameter gradients.
pub(crate) fn sample_gradients(
    store: &ParamStore,
    build: impl FnOnce(&mut Graph, &Binding) -> Result<Var>,
) -> Result<SampleResult> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let loss = build(&mut g, &p)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, store.collect_grads(&p, &grads)))
}

/// Runs `opts.epochs` shuffled passes over `items`.
///
/// `draw_batch` is called once per batch on the master rng (e.g. to pick a
/// recursion depth). `per_sample` receives its own rng seeded from the
/// master stream, so the draws do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit<T, B, D, F>(
    store: &mut ParamStore,
    items: &[T],
    opts: &TrainOptions,
    stage: u8,
    rng: &mut ChaCha8Rng,
    mut draw_batch: D,
    per_sample: F,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Vec<EpochLoss>>
where
    T: Sync,
    B: Sync,
    D: FnMut(&mut ChaCha8Rng) -> B,
    F: Fn(&ParamStore, &T, &B, &mut ChaCha8Rng) -> Result<SampleResult> + Sync + Send,
{
    if items.is_empty() {
        return Err(Error::Usage(format!("stage {stage}: empty training set")));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Usage(format!("stage {stage}: batch size and epochs must be positive")));
    }
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(opts.batch_size) {
            let batch = draw_batch(rng);
            let jobs: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.gen())).collect();
            let results = par::try_map(opts.exec, &jobs, |&(i, seed)| {
                let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
                per_sample(store, &items[i], &batch, &mut sample_rng)
            })?;
            let scale = 1.0 / chunk.len() as f32;
            for (loss, grads) in &results {
                total += *loss as f64;
                store.accumulate_flat(grads, scale)?;
            }
            opts.adam.step(store)?;
        }
        let entry = EpochLoss {
            stage,
            epoch: epoch + 1,
            loss: (total / items.len() as f64) as f32,
        };
        log(entry);
        history.push(entry);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rcad_tensor::Tensor;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        store
    }

    fn run(exec: Exec) -> (Vec<u8>, Vec<EpochLoss>) {
        let mut store = quadratic_store();
        let targets: Vec<f32> = (0..7).map(|i| i as f32 * 0.1).collect();
        let opts = TrainOptions {
            epochs: 20,
            batch_size: 3,
            adam: Adam::with_lr(0.05),
            exec,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hist = fit(
            &mut store,
            &targets,
            &opts,
            1,
            &mut rng,
            |r| r.gen_range(0.5f32..1.5),
            |s, &t, &scale, r| {
                let noise: f32 = r.gen_range(-0.01..0.01);
                sample_gradients(s, |g, p| {
                    let w = p.var(rcad_tensor::ParamId(0));
                    let target = g.input(Tensor::full(&[2], t + noise));
                    let d = g.sub(w, target)?;
                    let d = g.scale(d, scale);
                    let z = g.input(Tensor::zeros(&[2]));
                    Ok(g.l2_loss(d, z)?)
                })
            },
            &mut |_| {},
        )
        .unwrap();
        (store.value_bytes(), hist)
    }

    #[test]
    fn loss_decreases_and_modes_agree() {
        let (seq_bytes, seq_hist) = run(Exec::Sequential);
        let (par_bytes, par_hist) = run(Exec::Parallel);
        assert_eq!(seq_bytes, par_bytes);
        assert_eq!(seq_hist, par_hist);
        assert!(seq_hist.last().unwrap().loss < seq_hist[0].loss * 0.5);
        assert_eq!(seq_hist.len(), 20);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut store = quadratic_store();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items: [f32; 0] = [];
        let err = fit(
            &mut store,
            &items,
            &TrainOptions::default(),
            1,
            &mut rng,
            |_| (),
            |_, _, _, _| unreachable!(),
            &mut |_| {},
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }
}
