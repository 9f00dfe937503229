//! Built-in correctness suite: finite-difference gradients of every
//! operator and of the depth-2 RcAE loss, the conv adjoint identity, the
//! fast AUROC against exhaustive pair counting, and augmentation masks
//! against a pixel-diff oracle.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcad_tensor::gradcheck::{self, relative_error, GradCheckReport, Probe};
use rcad_tensor::{Graph, ParamId, Tensor, Var};

use super::reference;
use crate::augment::{self, AugmentConfig, PseudoAnomaly};
use crate::error::Result;
use crate::metrics;
use crate::rcae::{rcae_loss, RcaeConfig, RcaeModel};

pub const OP_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_TOLERANCE: f64 = 1e-2;
pub const FD_EPS: f32 = 1e-3;
/// Step for finite differences through the double-precision reference.
pub const REFERENCE_EPS: f64 = 1e-6;
pub const ADJOINT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} checks, {} failed, {:.1}s",
            self.checks.len(),
            failed,
            self.seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Relative error injected into the analytic conv2d gradients; a correct
    /// checker must then report a failure.
    pub conv_grad_perturbation: f64,
    pub augment_draws: usize,
    pub auroc_instances: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            seed: 0,
            conv_grad_perturbation: 0.0,
            augment_draws: 1000,
            auroc_instances: 100,
        }
    }
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

/// `Σ wᵢ yᵢ` with fixed random weights, so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> rcad_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(Tensor::rand_uniform(g.shape(y), -1.0, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> rcad_tensor::Result<Var>;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let r = |s: &[usize], rng: &mut ChaCha8Rng| rand(s, rng);
    vec![
        (
            "conv2d",
            vec![r(&[1, 2, 5, 5], rng), r(&[3, 2, 3, 3], rng), r(&[3], rng)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                weighted_sum(g, y, 1)
            },
        ),
        (
            "conv2d_stride2",
            vec![r(&[1, 3, 6, 6], rng), r(&[3, 3, 2, 2], rng), r(&[3], rng)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
                weighted_sum(g, y, 2)
            },
        ),
        (
            "conv_transpose2d",
            vec![r(&[1, 3, 3, 3], rng), r(&[3, 2, 2, 2], rng), r(&[2], rng)],
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], v[2], 2)?;
                weighted_sum(g, y, 3)
            },
        ),
        (
            "conv3d",
            vec![r(&[1, 1, 3, 4, 4], rng), r(&[2, 1, 3, 3, 3], rng), r(&[2], rng)],
            |g, v| {
                let y = g.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
                weighted_sum(g, y, 4)
            },
        ),
        ("add", vec![r(&[2, 3], rng), r(&[2, 3], rng)], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
        ("mul", vec![r(&[2, 3], rng), r(&[2, 3], rng)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 6)
        }),
        ("leaky_relu", vec![r(&[12], rng)], |g, v| {
            let y = g.leaky_relu(v[0], 0.1);
            weighted_sum(g, y, 7)
        }),
        ("sigmoid", vec![r(&[12], rng)], |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, 8)
        }),
        ("concat", vec![r(&[1, 2, 3], rng), r(&[1, 1, 3], rng)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, 9)
        }),
        ("mean", vec![r(&[2, 5], rng)], |g, v| {
            let y = g.mean(v[0]);
            weighted_sum(g, y, 10)
        }),
        ("l1_loss", vec![r(&[2, 4], rng), r(&[2, 4], rng)], |g, v| g.l1_loss(v[0], v[1])),
        ("l2_loss", vec![r(&[2, 4], rng), r(&[2, 4], rng)], |g, v| g.l2_loss(v[0], v[1])),
        ("spatial_gradient", vec![r(&[1, 1, 4, 4], rng)], |g, v| {
            let y = g.spatial_gradient(v[0])?;
            weighted_sum(g, y, 11)
        }),
        ("upsample2x", vec![r(&[1, 2, 2, 3], rng)], |g, v| {
            let y = g.upsample2x(v[0])?;
            weighted_sum(g, y, 12)
        }),
        ("mean_axis", vec![r(&[1, 2, 3, 2, 2], rng)], |g, v| {
            let y = g.mean_axis(v[0], 2)?;
            weighted_sum(g, y, 13)
        }),
    ]
}

fn perturbed(report: &GradCheckReport, factor: f64) -> f64 {
    let a: Vec<f64> = report.analytic.iter().map(|x| x * (1.0 + factor)).collect();
    relative_error(&a, &report.numeric)
}

/// Gradient of the depth-2 RcAE loss with respect to `samples` randomly
/// chosen parameters, on an 8×8 input, against central differences of the
/// double-precision reference forward pass with step [`REFERENCE_EPS`].
pub fn rcae_gradient_check(seed: u64, samples: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = RcaeModel::new(
        RcaeConfig {
            hidden_width: 4,
            max_depth: 2,
            ..RcaeConfig::default()
        },
        &mut rng,
    )?;
    let x = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let target = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let sizes: Vec<usize> = model.store.iter().map(|p| p.value().len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let probes: Vec<Probe> = rand::seq::index::sample(&mut rng, model.num_parameters(), samples)
        .into_iter()
        .map(|flat| {
            let i = offsets.partition_point(|&o| o <= flat) - 1;
            (i, flat - offsets[i])
        })
        .collect();

    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let xv = g.input(x.clone());
    let tv = g.input(target.clone());
    let r = model.forward_graph(&mut g, &p, xv, 2)?;
    let loss = rcae_loss(&mut g, tv, r)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(i, e)| grads.get(p.var(ParamId(i))).map_or(0.0, |gr| gr[e] as f64))
        .collect();

    let mut params = reference::Params::of(&model);
    let eval = |params: &reference::Params| {
        reference::rcae_loss(&model, params, x.data(), target.data(), [3, 8, 8], 2)
    };
    let numeric: Vec<f64> = probes
        .iter()
        .map(|&(i, e)| {
            let orig = params.values[i][e];
            params.values[i][e] = orig + REFERENCE_EPS;
            let plus = eval(&params);
            params.values[i][e] = orig - REFERENCE_EPS;
            let minus = eval(&params);
            params.values[i][e] = orig;
            (plus - minus) / (2.0 * REFERENCE_EPS)
        })
        .collect();
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_error,
    })
}

/// Largest `|⟨conv(x), y⟩ − ⟨x, convᵀ(y)⟩|` relative to the inner product
/// magnitude over a few random shapes.
pub fn adjoint_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for &(ci, co, hw, k, s) in &[(2, 3, 8, 2, 2), (3, 3, 6, 3, 1), (1, 2, 9, 3, 3), (4, 2, 8, 4, 2)] {
        let x = rand(&[2, ci, hw, hw], &mut rng);
        let w = rand(&[co, ci, k, k], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let zero_o = g.input(Tensor::zeros(&[co]));
        let zero_i = g.input(Tensor::zeros(&[ci]));
        let ax = g.conv2d(xv, wv, zero_o, s, 0)?;
        let y = rand(g.shape(ax), &mut rng);
        let yv = g.input(y.clone());
        let aty = g.conv_transpose2d(yv, wv, zero_i, s)?;
        let lhs = g.value(ax).dot(&y)?;
        let rhs = x.dot(g.value(aty))?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    Ok(worst)
}

/// Mann–Whitney probability by enumerating every positive/negative pair.
pub fn auroc_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let mut num = 0.0f64;
    let mut pairs = 0u64;
    for (&si, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            pairs += 1;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs as f64
}

/// Random scoring instances with at most `max_len` items, both classes
/// present and frequent ties.
pub fn auroc_instances(seed: u64, count: usize, max_len: usize) -> Vec<(Vec<f32>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=max_len);
            let levels = rng.gen_range(2..=20u32);
            let scores: Vec<f32> = (0..n).map(|_| rng.gen_range(0..levels) as f32 / levels as f32).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            (scores, labels)
        })
        .collect()
}

/// Mask computed pixel by pixel straight from the definition.
pub fn pixel_diff_oracle(original: &Tensor, corrupted: &Tensor) -> Vec<bool> {
    let s = original.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (a, b) = (original.data(), corrupted.data());
    (0..h * w)
        .map(|p| (0..c).any(|ch| a[ch * h * w + p] != b[ch * h * w + p]))
        .collect()
}

pub fn mask_matches_oracle(original: &Tensor, anomaly: &PseudoAnomaly) -> bool {
    let oracle = pixel_diff_oracle(original, &anomaly.corrupted);
    anomaly.mask.data().len() == oracle.len()
        && anomaly.mask.data().iter().zip(&oracle).all(|(&m, &o)| (m == 1.0) == o && (m == 0.0 || m == 1.0))
        && anomaly.corrupted.data().iter().all(|v| (0.0..=1.0).contains(v))
}

/// Counts mask/oracle disagreements over `draws` images per generator.
pub fn augment_mismatches(seed: u64, draws: usize) -> Vec<(&'static str, usize)> {
    let cfg = AugmentConfig {
        reference_resolution: 256,
        ..AugmentConfig::default()
    };
    type Gen = fn(&Tensor, &mut ChaCha8Rng, &AugmentConfig) -> Result<PseudoAnomaly>;
    let gens: [(&str, Gen); 3] = [
        ("color_block", augment::inject_color_block),
        ("copy_paste", augment::inject_copy_paste),
        ("lines", augment::inject_lines),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gens.iter()
        .map(|&(name, f)| {
            let bad = (0..draws)
                .filter(|i| {
                    let img = crate::dataio::render_texture(
                        [crate::dataio::Texture::Stripes, crate::dataio::Texture::Checker][i % 2],
                        64,
                        8,
                        &mut rng,
                    );
                    match f(&img, &mut rng, &cfg) {
                        Ok(a) => !mask_matches_oracle(&img, &a),
                        Err(_) => true,
                    }
                })
                .count();
            (name, bad)
        })
        .collect()
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut push = |name: String, outcome: Result<(bool, String)>| {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        checks.push(CheckResult { name, passed, detail });
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (name, inputs, f) in op_cases(&mut rng) {
        let which: Vec<usize> = (0..inputs.len()).collect();
        let probes = gradcheck::all_probes(&inputs, &which);
        let outcome = gradcheck::check(&inputs, &probes, FD_EPS, f)
            .map_err(crate::Error::from)
            .map(|r| {
                let err = if name.starts_with("conv2d") && opts.conv_grad_perturbation != 0.0 {
                    perturbed(&r, opts.conv_grad_perturbation)
                } else {
                    r.rel_error
                };
                (err.is_finite() && err <= OP_TOLERANCE, format!("rel err {err:.2e}"))
            });
        push(format!("grad {name}"), outcome);
    }

    push(
        "grad rcae depth-2 (50 params)".into(),
        rcae_gradient_check(opts.seed, 50).map(|r| {
            (r.passes(END_TO_END_TOLERANCE), format!("rel err {:.2e}", r.rel_error))
        }),
    );

    push(
        "conv adjoint".into(),
        adjoint_gap(opts.seed).map(|gap| (gap <= ADJOINT_TOLERANCE, format!("gap {gap:.2e}"))),
    );

    let instances = auroc_instances(opts.seed, opts.auroc_instances, 50);
    let mismatches = instances
        .iter()
        .filter(|(s, l)| metrics::auroc(s, l).ok() != Some(auroc_oracle(s, l)))
        .count();
    push(
        "auroc vs pair oracle".into(),
        Ok((mismatches == 0, format!("{mismatches}/{} mismatches", instances.len()))),
    );

    for (name, bad) in augment_mismatches(opts.seed, opts.augment_draws) {
        push(
            format!("mask oracle {name}"),
            Ok((bad == 0, format!("{bad}/{} mismatches", opts.augment_draws))),
        );
    }

    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_hand_value() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auroc_oracle(&s, &l), 0.75);
    }

    #[test]
    fn perturbation_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, inputs, f) = op_cases(&mut rng).remove(0);
        let probes = gradcheck::all_probes(&inputs, &[0, 1, 2]);
        let r = gradcheck::check(&inputs, &probes, FD_EPS, f).unwrap();
        assert!(r.passes(OP_TOLERANCE));
        assert!(perturbed(&r, 0.01) > OP_TOLERANCE);
    }
}
