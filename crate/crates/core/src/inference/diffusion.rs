//! Conditional denoiser over per-frame latents.
//!
//! Forward process: `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps` with
//! betas on a linear schedule. The denoiser is a two-layer MLP seeing the
//! noisy frame, a sinusoidal timestep embedding, the pooled semantic
//! condition, and the perceptual frame prediction. Either condition is
//! dropped independently during training so sampling can run the
//! unconditional branch for guidance. The reverse update is ancestral DDPM;
//! the default noise multiplier of zero makes it deterministic given the
//! initial draw.

use crate::autodiff::optim::{collect_grads, Adam};
use crate::autodiff::{Graph, Var};
use crate::config::{DiffusionConfig, GuidanceConfig};
use crate::embedding::derive_seed;
use crate::encoders::{init_linear, init_zeros};
use crate::error::{Error, Result};
use crate::perceptual::sinusoidal_pe;
use ndarray::{Array1, Array2, Ix2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Linear beta schedule with cached alpha products.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        if cfg.steps == 0 || cfg.steps > 50 {
            return Err(Error::Config(format!(
                "diffusion steps ({}) must be in 1..=50",
                cfg.steps
            )));
        }
        if !(cfg.beta_min > 0.0 && cfg.beta_min <= cfg.beta_max && cfg.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got {} and {}",
                cfg.beta_min, cfg.beta_max
            )));
        }
        let n = cfg.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    cfg.beta_min
                } else {
                    cfg.beta_min + (cfg.beta_max - cfg.beta_min) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(n);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    #[must_use]
    pub fn steps(&self) -> usize {
        self.betas.len()
    }
}

/// Two-layer MLP noise estimator.
pub struct NoisePredictor {
    latent_dim: usize,
    cond_dim: usize,
    time_dim: usize,
    params: crate::autodiff::optim::ParamGroup,
}

impl NoisePredictor {
    pub fn new(
        latent_dim: usize,
        cond_dim: usize,
        time_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 || cond_dim == 0 || time_dim == 0 || hidden == 0 {
            return Err(Error::Config("denoiser dims must be positive".into()));
        }
        let input = 2 * latent_dim + time_dim + cond_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "denoiser"));
        let mut params = crate::autodiff::optim::ParamGroup::new();
        params.push("w1", init_linear(&mut rng, input, hidden));
        params.push("b1", init_zeros(&[hidden]));
        params.push("w2", init_linear(&mut rng, hidden, latent_dim));
        params.push("b2", init_zeros(&[latent_dim]));
        Ok(Self {
            latent_dim,
            cond_dim,
            time_dim,
            params,
        })
    }

    #[must_use]
    pub fn params(&self) -> &crate::autodiff::optim::ParamGroup {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut crate::autodiff::optim::ParamGroup {
        &mut self.params
    }

    #[must_use]
    pub fn input_dim(&self) -> usize {
        2 * self.latent_dim + self.time_dim + self.cond_dim
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let h = g.matmul(x, vars[0]);
        let h = g.add_bias(h, vars[1]);
        let h = g.gelu(h);
        let y = g.matmul(h, vars[2]);
        g.add_bias(y, vars[3])
    }

    /// Plain evaluation outside training, `[n, input] -> [n, latent]`.
    pub fn eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let xc = g.constant(x.clone().into_dyn());
        let out = self.forward(&mut g, &vars, xc);
        g.value(out)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("rank 2 output")
    }
}

/// Training set for the denoiser: one row per (clip, frame).
pub struct DiffusionSamples {
    /// Ground-truth latents, `[n, latent_dim]`.
    pub z0: Array2<f64>,
    /// Pooled semantic condition per row, `[n, cond_dim]`.
    pub sem: Array2<f64>,
    /// Perceptual frame prediction per row, `[n, latent_dim]`.
    pub perc: Array2<f64>,
}

impl DiffusionSamples {
    #[must_use]
    pub fn len(&self) -> usize {
        self.z0.nrows()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.z0.nrows();
        if self.sem.nrows() != n || self.perc.nrows() != n {
            return Err(Error::Validation(format!(
                "sample row counts disagree: {} / {} / {}",
                n,
                self.sem.nrows(),
                self.perc.nrows()
            )));
        }
        if self.perc.ncols() != self.z0.ncols() {
            return Err(Error::shape(
                "perceptual condition",
                &[self.z0.ncols()],
                &[self.perc.ncols()],
            ));
        }
        let finite = self.z0.iter().chain(self.sem.iter()).chain(self.perc.iter());
        for v in finite {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite diffusion sample".into()));
            }
        }
        Ok(())
    }
}

fn fill_row(
    row: &mut ndarray::ArrayViewMut1<'_, f64>,
    zt: &Array1<f64>,
    temb: &[f64],
    sem: Option<ndarray::ArrayView1<'_, f64>>,
    perc: Option<ndarray::ArrayView1<'_, f64>>,
) {
    let l = zt.len();
    let td = temb.len();
    for i in 0..l {
        row[i] = zt[i];
    }
    for i in 0..td {
        row[l + i] = temb[i];
    }
    if let Some(s) = sem {
        for i in 0..s.len() {
            row[l + td + i] = s[i];
        }
    }
    let cd = row.len() - 2 * l - td;
    if let Some(p) = perc {
        for i in 0..l {
            row[l + td + cd + i] = p[i];
        }
    }
}

/// Train the denoiser. Returns the net and the per-epoch mean loss.
pub fn train_diffusion(
    cfg: &DiffusionConfig,
    samples: &DiffusionSamples,
    seed: u64,
) -> Result<(NoisePredictor, Vec<f64>)> {
    samples.validate()?;
    if samples.is_empty() {
        return Err(Error::Validation("no diffusion training samples".into()));
    }
    let schedule = DiffusionSchedule::new(cfg)?;
    let latent = samples.z0.ncols();
    let cond = samples.sem.ncols();
    let mut net = NoisePredictor::new(latent, cond, cfg.time_dim, cfg.hidden, derive_seed(seed, "net"))?;
    let temb = sinusoidal_pe(schedule.steps(), cfg.time_dim);
    let mut adam = Adam::new(cfg.lr);
    let n = samples.len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut draw_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("draws{epoch}")));

        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let b = chunk.len();
            let mut x = Array2::zeros((b, net.input_dim()));
            let mut target = Array2::zeros((b, latent));
            for (row, &si) in chunk.iter().enumerate() {
                let t = draw_rng.gen_range(0..schedule.steps());
                let eps: Array1<f64> =
                    Array1::from_shape_fn(latent, |_| draw_rng.sample(StandardNormal));
                let keep_sem = draw_rng.gen::<f64>() >= cfg.cond_drop;
                let keep_perc = draw_rng.gen::<f64>() >= cfg.cond_drop;
                let ab = schedule.alpha_bars[t];
                let z0 = samples.z0.row(si);
                let zt = Array1::from_shape_fn(latent, |i| {
                    ab.sqrt() * z0[i] + (1.0 - ab).sqrt() * eps[i]
                });
                let temb_row: Vec<f64> = temb.row(t).to_vec();
                fill_row(
                    &mut x.row_mut(row),
                    &zt,
                    &temb_row,
                    keep_sem.then(|| samples.sem.row(si)),
                    keep_perc.then(|| samples.perc.row(si)),
                );
                target.row_mut(row).assign(&eps);
            }
            let mut g = Graph::new();
            let vars = net.params.bind(&mut g);
            let xc = g.constant(x.into_dyn());
            let pred = net.forward(&mut g, &vars, xc);
            let tc = g.constant(target.into_dyn());
            let d = g.sub(pred, tc);
            let sq = g.mul(d, d);
            let total = g.sum_all(sq);
            let loss = g.scale(total, 1.0 / b as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            g.backward(loss);
            let grads = collect_grads(&g, &vars);
            adam.step(&mut [net.params_mut()], &grads);
            sum += value * b as f64;
        }
        history.push(sum / n as f64);
        log::debug!("diffusion epoch {epoch}: loss {:.6}", history[epoch]);
    }
    Ok((net, history))
}

/// Sample one latent frame per row under classifier-free guidance.
///
/// `seeds` gives each row its own noise stream, so results do not depend on
/// how rows are batched together.
pub fn sample_latents(
    net: &NoisePredictor,
    schedule: &DiffusionSchedule,
    dcfg: &DiffusionConfig,
    gcfg: &GuidanceConfig,
    sem: &Array2<f64>,
    perc: &Array2<f64>,
    seeds: &[u64],
) -> Result<Array2<f64>> {
    let n = seeds.len();
    if sem.nrows() != n || perc.nrows() != n {
        return Err(Error::Validation(format!(
            "row counts disagree: {n} seeds, {} sem, {} perc",
            sem.nrows(),
            perc.nrows()
        )));
    }
    let latent = net.latent_dim;
    if perc.ncols() != latent || sem.ncols() != net.cond_dim {
        return Err(Error::shape(
            "sampling conditions",
            &[latent, net.cond_dim],
            &[perc.ncols(), sem.ncols()],
        ));
    }
    let temb = sinusoidal_pe(schedule.steps(), net.time_dim);
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s))
        .collect();
    let mut z = Array2::zeros((n, latent));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..latent {
            z[[i, j]] = rng.sample(StandardNormal);
        }
    }
    for t in (0..schedule.steps()).rev() {
        let temb_row: Vec<f64> = temb.row(t).to_vec();
        // stacked conditional rows then unconditional rows
        let mut x = Array2::zeros((2 * n, net.input_dim()));
        for i in 0..n {
            let zt = z.row(i).to_owned();
            fill_row(
                &mut x.row_mut(i),
                &zt,
                &temb_row,
                gcfg.use_semantic.then(|| sem.row(i)),
                gcfg.use_perceptual.then(|| perc.row(i)),
            );
            fill_row(&mut x.row_mut(n + i), &zt, &temb_row, None, None);
        }
        let eps = net.eval(&x);
        let beta = schedule.betas[t];
        let alpha = schedule.alphas[t];
        let ab = schedule.alpha_bars[t];
        for i in 0..n {
            let ec = eps.row(i).to_owned();
            let eu = eps.row(n + i).to_owned();
            let e = super::guided_score(&eu, &ec, gcfg.scale);
            for j in 0..latent {
                z[[i, j]] = (z[[i, j]] - beta / (1.0 - ab).sqrt() * e[j]) / alpha.sqrt();
            }
            if t > 0 && dcfg.sample_noise != 0.0 {
                let ab_prev = schedule.alpha_bars[t - 1];
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                for j in 0..latent {
                    let noise: f64 = rngs[i].sample(StandardNormal);
                    z[[i, j]] += dcfg.sample_noise * sigma * noise;
                }
            }
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample from the denoiser".into()));
    }
    Ok(z)
}
