//! Sample-average neural lower bound on mutual information
//!
//! ```text
//! Î(d, ψ) = mean_i T(θ_i, y_i) − e⁻¹ · mean_i exp T(θ_i, y′_i)
//! ```
//!
//! with `y_i = h(ε_i; θ_i, d)` and `y′_i = h(ε′_i; θ′_i, d)`, `θ′` an
//! independent prior batch. Gradients with respect to the critic parameters
//! and, through the sampling path, with respect to the design are exact
//! derivatives of this sample average.
//!
//! Rows are processed in fixed-size chunks whose partial sums are reduced in
//! chunk order, so results do not depend on the number of worker threads.

use rand::RngCore;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::models::SimulatorModel;
use crate::nn::{reduce_lanes, BlockScratch, Lane, Network, LANES};

/// Critic values above this are clamped inside the exponential.
pub const CRITIC_CLAMP: f64 = 30.0;

const CHUNK_ROWS: usize = 512;

/// Joint and product-of-marginals samples at one design.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    design: Vec<f64>,
    rows: usize,
    theta_dim: usize,
    data_dim: usize,
    noise_dim: usize,
    theta: Vec<f64>,
    data: Vec<f64>,
    noise: Vec<f64>,
    theta_marginal: Vec<f64>,
    data_marginal: Vec<f64>,
    noise_marginal: Vec<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn design(&self) -> &[f64] {
        &self.design
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.theta[i * self.theta_dim..(i + 1) * self.theta_dim]
    }

    pub fn data(&self, i: usize) -> &[f64] {
        &self.data[i * self.data_dim..(i + 1) * self.data_dim]
    }

    pub fn noise(&self, i: usize) -> &[f64] {
        &self.noise[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    pub fn theta_marginal(&self, i: usize) -> &[f64] {
        &self.theta_marginal[i * self.theta_dim..(i + 1) * self.theta_dim]
    }

    pub fn data_marginal(&self, i: usize) -> &[f64] {
        &self.data_marginal[i * self.data_dim..(i + 1) * self.data_dim]
    }

    pub fn noise_marginal(&self, i: usize) -> &[f64] {
        &self.noise_marginal[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    /// Re-runs the sampling path at `design` with the stored parameters and
    /// noise draws (common random numbers).
    pub fn regenerate(&mut self, model: &dyn SimulatorModel, design: &[f64]) -> Result<()> {
        check_len("design", self.design.len(), design.len())?;
        self.design.copy_from_slice(design);
        let (t, y, e) = (self.theta_dim, self.data_dim, self.noise_dim);
        for i in 0..self.rows {
            model.sample_path(
                &self.theta[i * t..(i + 1) * t],
                design,
                &self.noise[i * e..(i + 1) * e],
                &mut self.data[i * y..(i + 1) * y],
            )?;
            model.sample_path(
                &self.theta_marginal[i * t..(i + 1) * t],
                design,
                &self.noise_marginal[i * e..(i + 1) * e],
                &mut self.data_marginal[i * y..(i + 1) * y],
            )?;
        }
        Ok(())
    }

    /// Builds a batch from explicit rows (used by tests and by callers that
    /// bring their own samples). Marginal rows pair `theta[i]` with `data_marginal[i]`.
    pub fn from_parts(
        design: Vec<f64>,
        theta_dim: usize,
        data_dim: usize,
        theta: Vec<f64>,
        data: Vec<f64>,
        data_marginal: Vec<f64>,
    ) -> Result<Self> {
        if theta_dim == 0 || data_dim == 0 || theta.len() % theta_dim != 0 {
            return Err(Error::Input("batch dimensions must be positive and divide the row data".into()));
        }
        let rows = theta.len() / theta_dim;
        check_len("batch data rows", rows * data_dim, data.len())?;
        check_len("batch marginal rows", rows * data_dim, data_marginal.len())?;
        Ok(Self {
            design,
            rows,
            theta_dim,
            data_dim,
            noise_dim: 0,
            theta_marginal: theta.clone(),
            theta,
            data,
            noise: Vec::new(),
            data_marginal,
            noise_marginal: Vec::new(),
        })
    }

    /// Stacks `other` under `self`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.design != other.design
            || self.theta_dim != other.theta_dim
            || self.data_dim != other.data_dim
            || self.noise_dim != other.noise_dim
        {
            return Err(Error::Input("cannot concatenate batches of different shape or design".into()));
        }
        let cat = |a: &[f64], b: &[f64]| [a, b].concat();
        Ok(Batch {
            design: self.design.clone(),
            rows: self.rows + other.rows,
            theta_dim: self.theta_dim,
            data_dim: self.data_dim,
            noise_dim: self.noise_dim,
            theta: cat(&self.theta, &other.theta),
            data: cat(&self.data, &other.data),
            noise: cat(&self.noise, &other.noise),
            theta_marginal: cat(&self.theta_marginal, &other.theta_marginal),
            data_marginal: cat(&self.data_marginal, &other.data_marginal),
            noise_marginal: cat(&self.noise_marginal, &other.noise_marginal),
        })
    }

    /// Reorders rows; each row keeps its joint and marginal samples together.
    pub fn permuted(&self, perm: &[usize]) -> Batch {
        let gather = |src: &[f64], width: usize| -> Vec<f64> {
            perm.iter()
                .flat_map(|&p| src[p * width..(p + 1) * width].iter().copied())
                .collect()
        };
        let mut out = self.clone();
        out.rows = perm.len();
        out.theta = gather(&self.theta, self.theta_dim);
        out.data = gather(&self.data, self.data_dim);
        out.noise = gather(&self.noise, self.noise_dim);
        out.theta_marginal = gather(&self.theta_marginal, self.theta_dim);
        out.data_marginal = gather(&self.data_marginal, self.data_dim);
        out.noise_marginal = gather(&self.noise_marginal, self.noise_dim);
        out
    }
}

/// Simulates `rows` joint samples `(θ_i, y_i)` and independent marginal
/// samples `y′_i` from fresh prior draws `θ′_i` and fresh noise.
pub fn make_batch(
    model: &dyn SimulatorModel,
    design: &[f64],
    rows: usize,
    rng: &mut dyn RngCore,
) -> Result<Batch> {
    check_len("design", model.design_dim(), design.len())?;
    if !model.domain().contains(design) {
        return Err(Error::Input(format!("design {design:?} lies outside the model domain")));
    }
    if rows < 2 {
        return Err(Error::Input(format!("batch needs at least 2 rows, got {rows}")));
    }
    let (t, y, e) = (model.theta_dim(), model.data_dim(), model.noise_dim());
    let mut batch = Batch {
        design: design.to_vec(),
        rows,
        theta_dim: t,
        data_dim: y,
        noise_dim: e,
        theta: vec![0.0; rows * t],
        data: vec![0.0; rows * y],
        noise: vec![0.0; rows * e],
        theta_marginal: vec![0.0; rows * t],
        data_marginal: vec![0.0; rows * y],
        noise_marginal: vec![0.0; rows * e],
    };
    for i in 0..rows {
        model.sample_prior(rng, &mut batch.theta[i * t..(i + 1) * t]);
        model.sample_noise(rng, &mut batch.noise[i * e..(i + 1) * e]);
        model.sample_prior(rng, &mut batch.theta_marginal[i * t..(i + 1) * t]);
        model.sample_noise(rng, &mut batch.noise_marginal[i * e..(i + 1) * e]);
    }
    batch.regenerate(model, design)?;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiEstimate {
    /// Lower-bound value in nats.
    pub value: f64,
    /// Mean critic value over joint rows.
    pub joint_term: f64,
    /// Mean of `exp T` over marginal rows.
    pub marginal_term: f64,
}

impl MiEstimate {
    fn from_terms(joint_term: f64, marginal_term: f64) -> Self {
        Self {
            value: joint_term - (-1.0f64).exp() * marginal_term,
            joint_term,
            marginal_term,
        }
    }
}

/// Bound value plus whichever gradients were requested.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub estimate: MiEstimate,
    pub grad_psi: Option<Vec<f64>>,
    pub grad_design: Option<Vec<f64>>,
    /// Marginal rows whose critic value exceeded [`CRITIC_CLAMP`].
    pub clamped: usize,
    /// Largest critic value seen on a marginal row.
    pub max_marginal_critic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wants {
    pub psi: bool,
    pub design: bool,
}

struct Partial {
    joint: f64,
    marginal: f64,
    grad_psi: Vec<f64>,
    grad_design: Vec<f64>,
    clamped: usize,
    max_marginal: f64,
}

/// One pass over the batch computing the bound and the requested gradients.
pub fn evaluate(
    net: &Network,
    batch: &Batch,
    model: Option<&dyn SimulatorModel>,
    wants: Wants,
) -> Result<Evaluation> {
    let cfg = net.config();
    check_len("batch theta dim", cfg.theta_dim, batch.theta_dim)?;
    check_len("batch data dim", cfg.data_dim, batch.data_dim)?;
    if batch.rows == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let model = if wants.design {
        let model = model.ok_or_else(|| {
            Error::Input("design gradient requested without a simulator model".into())
        })?;
        if !model.has_gradients() {
            return Err(Error::NoGradients(model.name().to_string()));
        }
        if batch.noise_dim != model.noise_dim() {
            return Err(Error::Input("batch carries no replayable noise draws for this model".into()));
        }
        Some(model)
    } else {
        None
    };

    let n = batch.rows;
    let inv_n = 1.0 / n as f64;
    let n_params = if wants.psi { net.num_params() } else { 0 };
    let n_design = if wants.design { batch.design.len() } else { 0 };
    let need_backward = wants.psi || wants.design;
    let split = cfg.theta_dim;
    let chunks = n.div_ceil(CHUNK_ROWS);

    let partials: Vec<Result<Partial>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            // Blocks hold [joint 0..8, marginal 0..8, joint 8..16, marginal 8..16]
            // of each 16-row step.
            let mut blocks: Vec<BlockScratch> = (0..4).map(|_| net.block_scratch()).collect();
            let mut grad = vec![Lane::ZERO; n_params];
            let mut grad_design = vec![0.0; n_design];
            let mut v = vec![0.0; cfg.data_dim];
            let mut p = Partial {
                joint: 0.0,
                marginal: 0.0,
                grad_psi: Vec::new(),
                grad_design: Vec::new(),
                clamped: 0,
                max_marginal: f64::NEG_INFINITY,
            };
            let end = ((c + 1) * CHUNK_ROWS).min(n);
            for step in (c * CHUNK_ROWS..end).step_by(2 * LANES) {
                let mut active = 0;
                for half in 0..2 {
                    let start = step + half * LANES;
                    if start >= end {
                        break;
                    }
                    let count = LANES.min(end - start);
                    for marginal in [false, true] {
                        let block = &mut blocks[active];
                        active += 1;
                        for l in 0..LANES {
                            if l < count {
                                let i = start + l;
                                let y = if marginal { batch.data_marginal(i) } else { batch.data(i) };
                                block.set_row(l, batch.theta(i), y);
                            } else {
                                block.clear_row(l);
                            }
                        }
                        let t = net.forward_block(block);
                        let mut seeds = [0.0; LANES];
                        for (l, &tl) in t.as_array().iter().enumerate().take(count) {
                            if !tl.is_finite() {
                                let kind = if marginal { "marginal" } else { "joint" };
                                return Err(Error::Numerical(format!(
                                    "critic returned {tl} on {kind} row {}",
                                    start + l
                                )));
                            }
                            if marginal {
                                p.max_marginal = p.max_marginal.max(tl);
                                let tc = if tl > CRITIC_CLAMP {
                                    p.clamped += 1;
                                    CRITIC_CLAMP
                                } else {
                                    tl
                                };
                                p.marginal += tc.exp();
                                seeds[l] = -(tc - 1.0).exp() * inv_n;
                            } else {
                                p.joint += tl;
                                seeds[l] = inv_n;
                            }
                        }
                        if !need_backward {
                            continue;
                        }
                        net.backward_deltas(block, Lane::new(seeds), wants.design);
                        if let Some(model) = model {
                            for l in 0..count {
                                let i = start + l;
                                for (k, vk) in v.iter_mut().enumerate() {
                                    *vk = block.input_grad()[split + k].as_array()[l];
                                }
                                // Marginal rows move with d along θ′_i's path.
                                let (theta, noise) = if marginal {
                                    (batch.theta_marginal(i), batch.noise_marginal(i))
                                } else {
                                    (batch.theta(i), batch.noise(i))
                                };
                                model.accumulate_jacobian_transpose(
                                    theta,
                                    &batch.design,
                                    noise,
                                    &v,
                                    &mut grad_design,
                                )?;
                            }
                        }
                    }
                }
                if wants.psi {
                    net.accumulate_block_grads(&blocks[..active], &mut grad);
                }
            }
            if wants.psi {
                p.grad_psi = vec![0.0; n_params];
                reduce_lanes(&grad, &mut p.grad_psi);
            }
            p.grad_design = grad_design;
            Ok(p)
        })
        .collect();

    let mut joint = 0.0;
    let mut marginal = 0.0;
    let mut grad_psi = vec![0.0; n_params];
    let mut grad_design = vec![0.0; n_design];
    let mut clamped = 0;
    let mut max_marginal = f64::NEG_INFINITY;
    for p in partials {
        let p = p?;
        joint += p.joint;
        marginal += p.marginal;
        for (g, x) in grad_psi.iter_mut().zip(&p.grad_psi) {
            *g += x;
        }
        for (g, x) in grad_design.iter_mut().zip(&p.grad_design) {
            *g += x;
        }
        clamped += p.clamped;
        max_marginal = max_marginal.max(p.max_marginal);
    }
    if clamped > 0 {
        log::warn!("{clamped} marginal critic values exceeded {CRITIC_CLAMP} and were clamped");
    }

    Ok(Evaluation {
        estimate: MiEstimate::from_terms(joint * inv_n, marginal * inv_n),
        grad_psi: wants.psi.then_some(grad_psi),
        grad_design: wants.design.then_some(grad_design),
        clamped,
        max_marginal_critic: max_marginal,
    })
}

/// Sample-average bound at the batch's design.
pub fn mi_lower_bound(net: &Network, batch: &Batch) -> Result<MiEstimate> {
    evaluate(
        net,
        batch,
        None,
        Wants {
            psi: false,
            design: false,
        },
    )
    .map(|e| e.estimate)
}

/// Gradient of the sample-average bound with respect to all critic parameters.
pub fn grad_psi(net: &Network, batch: &Batch) -> Result<Vec<f64>> {
    let eval = evaluate(
        net,
        batch,
        None,
        Wants {
            psi: true,
            design: false,
        },
    )?;
    Ok(eval.grad_psi.expect("requested"))
}

/// Pathwise gradient of the sample-average bound with respect to the design.
pub fn grad_design(net: &Network, batch: &Batch, model: &dyn SimulatorModel) -> Result<Vec<f64>> {
    let eval = evaluate(
        net,
        batch,
        Some(model),
        Wants {
            psi: false,
            design: true,
        },
    )?;
    Ok(eval.grad_design.expect("requested"))
}

/// Trailing mean over `min(window, i + 1)` entries.
pub fn moving_average(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..trace.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            let slice = &trace[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}
