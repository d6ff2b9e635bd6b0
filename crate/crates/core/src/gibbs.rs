//! Blocked Gibbs sampler with Pólya-Gamma augmentation.
//!
//! One sweep updates, in order: the latent `omega`, the hospital effects
//! `alpha`, the fixed effects `beta`, then the hyperparameters (mean
//! coefficients, `sigma2_alpha`, block scales, `delta` by random-walk
//! Metropolis, `g_delta`, `sigma2_beta`).

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::RngExt;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignBundle;
use crate::error::{Error, Result};
use crate::linalg::draw_gaussian_canonical;
use crate::model::{sigma2_h, InvGamma, ModelSpec};
use crate::pg::draw_pg1;
use crate::rng::{mix_ids, RngStream};
use crate::stats::{logit, quantile};

/// Patients per omega shard. Fixed so draws do not depend on thread count.
const SHARD: usize = 4096;
/// Metropolis adaptation window during burn-in.
const ADAPT_BATCH: usize = 50;
const TARGET_ACCEPT: f64 = 0.44;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Initial `delta` proposal scale; `None` derives one from the volumes.
    pub delta_step: Option<f64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            burnin: 1000,
            thin: 5,
            seed: 0,
            n_chains: 4,
            delta_step: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burnin >= self.iterations {
            return Err(Error::Invalid(
                "burnin must be smaller than iterations".into(),
            ));
        }
        if self.thin == 0 {
            return Err(Error::Invalid("thin must be at least 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::Invalid("need at least one chain".into()));
        }
        if let Some(s) = self.delta_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Invalid("delta_step must be positive".into()));
            }
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burnin) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Mean coefficients, laid out as in the hospital design.
    pub theta: Vec<f64>,
    /// Prior scale per coefficient block.
    pub g: Vec<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    /// Zero when the variance family is constant.
    pub delta: f64,
    pub g_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub hyper: Hyper,
}

impl ParamState {
    /// Hyperparameter values in [`hyper_names`] order.
    pub fn hyper_values(&self, spec: &ModelSpec) -> Vec<f64> {
        let h = &self.hyper;
        let mut v = h.theta.clone();
        v.extend(&h.g);
        v.push(h.sigma2_alpha);
        v.push(h.sigma2_beta);
        if spec.has_delta() {
            v.push(h.delta);
            v.push(h.g_delta);
        }
        v
    }

    fn all_finite(&self) -> Option<&'static str> {
        if self.alpha.iter().any(|x| !x.is_finite()) {
            return Some("alpha");
        }
        if self.beta.iter().any(|x| !x.is_finite()) {
            return Some("beta");
        }
        let h = &self.hyper;
        if h.theta.iter().chain(&h.g).any(|x| !x.is_finite())
            || !(h.sigma2_alpha.is_finite()
                && h.sigma2_beta.is_finite()
                && h.delta.is_finite()
                && h.g_delta.is_finite())
        {
            return Some("hyperparameters");
        }
        None
    }
}

/// Column names of the hyperparameters for a design/spec pair.
pub fn hyper_names(design: &DesignBundle, spec: &ModelSpec) -> Vec<String> {
    let mut names = design.hospitals.coef_names();
    names.extend(
        design
            .hospitals
            .blocks
            .iter()
            .map(|b| b.scale_name.to_string()),
    );
    names.push("sigma2_alpha".into());
    names.push("sigma2_beta".into());
    if spec.has_delta() {
        names.push("delta".into());
        names.push("g_delta".into());
    }
    names
}

/// Inverse gamma draw: `scale / Gamma(shape, 1)`.
pub fn draw_inv_gamma(shape: f64, scale: f64, rng: &mut RngStream) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("inverse gamma shape is positive");
    scale / g.sample(rng)
}

pub struct GibbsSampler<'a> {
    design: &'a DesignBundle,
    spec: &'a ModelSpec,
    state: ParamState,
    omega: Vec<f64>,
    xb: Vec<f64>,
    y: Vec<bool>,
    rng: RngStream,
    iteration: usize,
    delta_step: f64,
    delta_accepted: usize,
    delta_proposed: usize,
}

impl<'a> GibbsSampler<'a> {
    /// Sampler started from data-driven initial values.
    pub fn new(design: &'a DesignBundle, spec: &'a ModelSpec, rng: RngStream) -> Self {
        let h_count = design.n_hospitals();
        let alpha: Vec<f64> = (0..h_count)
            .map(|h| {
                let r = design.rows_of(h);
                let n = r.len() as f64;
                let s = design.y[r].iter().filter(|y| **y).count() as f64;
                logit((s + 0.5) / (n + 1.0))
            })
            .collect();
        let hd = &design.hospitals;
        let q = hd.n_coef();
        let mut wtw = hd.w.transpose() * &hd.w;
        let ridge = 1e-3 * (wtw.trace() / q as f64).max(1.0);
        for i in 0..q {
            wtw[(i, i)] += ridge;
        }
        let a = DVector::from_column_slice(&alpha);
        let theta = wtw
            .cholesky()
            .map(|c| c.solve(&(hd.w.transpose() * &a)))
            .map(|t| t.iter().copied().collect())
            .unwrap_or_else(|| vec![0.0; q]);
        let resid: Vec<f64> = (0..h_count)
            .map(|h| alpha[h] - hd.mean(h, &theta))
            .collect();
        let sigma2_alpha =
            (resid.iter().map(|r| r * r).sum::<f64>() / h_count.max(1) as f64).max(0.01);
        let state = ParamState {
            alpha,
            beta: vec![0.0; design.p],
            hyper: Hyper {
                theta,
                g: vec![1.0; hd.blocks.len()],
                sigma2_alpha,
                sigma2_beta: 1.0,
                delta: 0.0,
                g_delta: 1.0,
            },
        };
        let vol_sq: f64 = hd.volume.iter().map(|v| v * v).sum();
        let delta_step = 2.4 / (0.5 * vol_sq).sqrt().max(1e-12);
        Self {
            design,
            spec,
            omega: vec![0.0; design.n()],
            xb: vec![0.0; design.n()],
            y: design.y.clone(),
            state,
            rng,
            iteration: 0,
            delta_step,
            delta_accepted: 0,
            delta_proposed: 0,
        }
    }

    pub fn state(&self) -> &ParamState {
        &self.state
    }

    pub fn set_state(&mut self, state: ParamState) {
        self.xb = self.design.fixed_effects(&state.beta);
        self.state = state;
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn set_omega(&mut self, omega: Vec<f64>) {
        assert_eq!(omega.len(), self.design.n());
        self.omega = omega;
    }

    pub fn outcomes(&self) -> &[bool] {
        &self.y
    }

    /// Replace the outcomes the sampler conditions on.
    pub fn set_outcomes(&mut self, y: Vec<bool>) {
        assert_eq!(y.len(), self.design.n());
        self.y = y;
    }

    pub fn rng_mut(&mut self) -> &mut RngStream {
        &mut self.rng
    }

    pub fn delta_step(&self) -> f64 {
        self.delta_step
    }

    pub fn set_delta_step(&mut self, step: f64) {
        self.delta_step = step;
    }

    fn sigma2(&self, h: usize) -> f64 {
        let hd = &self.design.hospitals;
        sigma2_h(
            self.spec.variance,
            self.state.hyper.sigma2_alpha,
            self.state.hyper.delta,
            hd.volume[h],
        )
    }

    /// `omega_j ~ PG(1, alpha_h + x_j' beta)`, sharded with per-shard streams.
    pub fn update_omega(&mut self) {
        let base = mix_ids(
            self.rng.stream_id(),
            self.iteration as u64 ^ 0x6f6d_6567_6100_0000,
        );
        let seed = self.rng.seed();
        let alpha = &self.state.alpha;
        let hosp = &self.design.hospital;
        let xb = &self.xb;
        self.omega
            .par_chunks_mut(SHARD)
            .enumerate()
            .for_each(|(s, chunk)| {
                let mut rng = RngStream::new(seed, mix_ids(base, s as u64));
                let start = s * SHARD;
                for (i, w) in chunk.iter_mut().enumerate() {
                    let j = start + i;
                    *w = draw_pg1(alpha[hosp[j]] + xb[j], &mut rng);
                }
            });
    }

    /// `alpha_h ~ N(m_h, V_h)` given omega, beta and the hyperparameters.
    pub fn update_alpha(&mut self) {
        let hd = &self.design.hospitals;
        for h in 0..self.design.n_hospitals() {
            let s2 = self.sigma2(h);
            let mu = hd.mean(h, &self.state.hyper.theta);
            let mut prec = 1.0 / s2;
            let mut lin = mu / s2;
            for j in self.design.rows_of(h) {
                let k = if self.y[j] { 0.5 } else { -0.5 };
                prec += self.omega[j];
                lin += k - self.omega[j] * self.xb[j];
            }
            let v = 1.0 / prec;
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.state.alpha[h] = v * lin + v.sqrt() * z;
        }
    }

    /// `beta ~ N(m, V)` with precision `I / sigma2_beta + X' Omega X`.
    pub fn update_beta(&mut self) -> Result<()> {
        let p = self.design.p;
        let mut q = DMatrix::identity(p, p) / self.state.hyper.sigma2_beta;
        let mut b = DVector::zeros(p);
        for j in 0..self.design.n() {
            let x = self.design.row(j);
            let w = self.omega[j];
            let k = if self.y[j] { 0.5 } else { -0.5 };
            let r = k - w * self.state.alpha[self.design.hospital[j]];
            for a in 0..p {
                b[a] += x[a] * r;
                let wx = w * x[a];
                for c in 0..=a {
                    q[(a, c)] += wx * x[c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                q[(c, a)] = q[(a, c)];
            }
        }
        let beta = draw_gaussian_canonical(q, &b, &mut self.rng, "beta conditional precision")?;
        self.state.beta = beta.iter().copied().collect();
        self.xb = self.design.fixed_effects(&self.state.beta);
        Ok(())
    }

    /// Mean coefficients given alpha: weighted Bayesian linear regression.
    pub fn update_theta(&mut self) -> Result<()> {
        let hd = &self.design.hospitals;
        let q = hd.n_coef();
        let s2a = self.state.hyper.sigma2_alpha;
        let mut prec = DMatrix::zeros(q, q);
        for (bi, block) in hd.blocks.iter().enumerate() {
            let scale = 1.0 / (self.state.hyper.g[bi] * s2a);
            let r = block.range.clone();
            match &block.penalty {
                None => {
                    for i in r {
                        prec[(i, i)] += scale;
                    }
                }
                Some(p) => {
                    for (a, i) in r.clone().enumerate() {
                        for (c, k) in r.clone().enumerate() {
                            prec[(i, k)] += scale * p[(a, c)];
                        }
                    }
                }
            }
        }
        let mut lin = DVector::zeros(q);
        for h in 0..hd.n_hospitals() {
            let wgt = 1.0 / self.sigma2(h);
            for a in 0..q {
                let wa = hd.w[(h, a)];
                if wa == 0.0 {
                    continue;
                }
                lin[a] += wgt * wa * self.state.alpha[h];
                for c in 0..q {
                    prec[(a, c)] += wgt * wa * hd.w[(h, c)];
                }
            }
        }
        let theta =
            draw_gaussian_canonical(prec, &lin, &mut self.rng, "mean coefficient precision")?;
        self.state.hyper.theta = theta.iter().copied().collect();
        Ok(())
    }

    /// Scaled squared residuals `(alpha_h - mean_h)^2` and the volumes.
    fn residuals_sq(&self) -> Vec<f64> {
        let hd = &self.design.hospitals;
        (0..hd.n_hospitals())
            .map(|h| (self.state.alpha[h] - hd.mean(h, &self.state.hyper.theta)).powi(2))
            .collect()
    }

    fn delta_log_target(&self, delta: f64, r2: &[f64]) -> f64 {
        let vol = &self.design.hospitals.volume;
        let s2a = self.state.hyper.sigma2_alpha;
        let mut lp = -delta * delta / (2.0 * self.state.hyper.g_delta * s2a);
        for (v, r) in vol.iter().zip(r2) {
            lp += -0.5 * delta * v - r * (-delta * v).exp() / (2.0 * s2a);
        }
        lp
    }

    /// Shape and scale of the inverse gamma conditional of `sigma2_alpha`.
    pub fn sigma2_alpha_conditional(&self) -> (f64, f64) {
        let pri = self.spec.priors.sigma2_alpha;
        let hd = &self.design.hospitals;
        let hy = &self.state.hyper;
        let mut shape = pri.shape + 0.5 * hd.n_hospitals() as f64;
        let mut scale = pri.scale;
        for (h, r) in self.residuals_sq().iter().enumerate() {
            scale += 0.5 * r * (-hy.delta * hd.volume[h]).exp();
        }
        for (bi, block) in hd.blocks.iter().enumerate() {
            shape += 0.5 * block.len() as f64;
            scale += block.quadratic(&hy.theta) / (2.0 * hy.g[bi]);
        }
        if self.spec.has_delta() {
            shape += 0.5;
            scale += hy.delta * hy.delta / (2.0 * hy.g_delta);
        }
        (shape, scale)
    }

    pub fn update_sigma2_alpha(&mut self) {
        let (shape, scale) = self.sigma2_alpha_conditional();
        self.state.hyper.sigma2_alpha = draw_inv_gamma(shape, scale, &mut self.rng);
    }

    /// Block scales `g_b | theta_b, sigma2_alpha`.
    pub fn update_scales(&mut self) {
        let pri = self.spec.priors;
        let s2a = self.state.hyper.sigma2_alpha;
        for (bi, block) in self.design.hospitals.blocks.iter().enumerate() {
            let prior: InvGamma = match block.scale_name {
                "g_s" => pri.g_s,
                "g_l" => pri.g_l,
                _ => pri.g,
            };
            let qf = block.quadratic(&self.state.hyper.theta);
            self.state.hyper.g[bi] = draw_inv_gamma(
                prior.shape + 0.5 * block.len() as f64,
                prior.scale + qf / (2.0 * s2a),
                &mut self.rng,
            );
        }
    }

    /// Random-walk Metropolis for `delta`, then `g_delta | delta`.
    pub fn update_delta(&mut self) {
        let r2 = self.residuals_sq();
        let delta = self.state.hyper.delta;
        let current = self.delta_log_target(delta, &r2);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let proposal = delta + self.delta_step * z;
        let cand = self.delta_log_target(proposal, &r2);
        self.delta_proposed += 1;
        let u: f64 = self.rng.random();
        if u.ln() < cand - current {
            self.state.hyper.delta = proposal;
            self.delta_accepted += 1;
        }
        let pri = self.spec.priors.g_delta;
        let d = self.state.hyper.delta;
        let s2a = self.state.hyper.sigma2_alpha;
        self.state.hyper.g_delta = draw_inv_gamma(
            pri.shape + 0.5,
            pri.scale + d * d / (2.0 * s2a),
            &mut self.rng,
        );
    }

    pub fn update_sigma2_beta(&mut self) {
        let pri = self.spec.priors.sigma2_beta;
        let bb: f64 = self.state.beta.iter().map(|b| b * b).sum();
        self.state.hyper.sigma2_beta = draw_inv_gamma(
            pri.shape + 0.5 * self.design.p as f64,
            pri.scale + 0.5 * bb,
            &mut self.rng,
        );
    }

    /// All hyperparameter blocks conditioned on alpha and beta.
    pub fn update_hyper(&mut self) -> Result<()> {
        self.update_theta()?;
        self.update_sigma2_alpha();
        self.update_scales();
        if self.spec.has_delta() {
            self.update_delta();
        }
        self.update_sigma2_beta();
        Ok(())
    }

    /// One full sweep; errors on non-finite parameters.
    pub fn sweep(&mut self) -> Result<()> {
        self.xb = self.design.fixed_effects(&self.state.beta);
        self.update_omega();
        self.update_alpha();
        self.update_beta()?;
        self.update_hyper()?;
        if let Some(what) = self.state.all_finite() {
            return Err(Error::NonFinite {
                what: what.into(),
                iteration: self.iteration,
            });
        }
        self.iteration += 1;
        Ok(())
    }

    fn take_delta_counts(&mut self) -> (usize, usize) {
        let out = (self.delta_accepted, self.delta_proposed);
        self.delta_accepted = 0;
        self.delta_proposed = 0;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub iterations: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    pub spec: ModelSpec,
    pub spec_hash: String,
    pub data_hash: String,
    pub hospital_ids: Vec<String>,
    pub beta_names: Vec<String>,
    pub hyper_names: Vec<String>,
    /// Post-burn-in `delta` acceptance rate per chain.
    pub delta_acceptance: Vec<Option<f64>>,
    /// Frozen `delta` proposal scale per chain.
    pub delta_step: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub meta: SampleMeta,
    pub draws: Vec<ParamState>,
    /// Chain index of each draw.
    pub chain: Vec<usize>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Draws of one named column (`alpha.<id>`, `beta.<j>` or a hyper name).
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(id) = name.strip_prefix("alpha.") {
            let h = self.meta.hospital_ids.iter().position(|x| x == id)?;
            return Some(self.draws.iter().map(|d| d.alpha[h]).collect());
        }
        if let Some(j) = name.strip_prefix("beta.") {
            let j: usize = j.parse().ok()?;
            if j == 0 || j > self.meta.beta_names.len() {
                return None;
            }
            return Some(self.draws.iter().map(|d| d.beta[j - 1]).collect());
        }
        let k = self.meta.hyper_names.iter().position(|x| x == name)?;
        Some(
            self.draws
                .iter()
                .map(|d| d.hyper_values(&self.meta.spec)[k])
                .collect(),
        )
    }

    /// Posterior mean parameter state.
    pub fn mean_state(&self) -> ParamState {
        let s = self.draws.len() as f64;
        let mut m = self.draws[0].clone();
        let avg = |f: &dyn Fn(&ParamState) -> f64| self.draws.iter().map(f).sum::<f64>() / s;
        for h in 0..m.alpha.len() {
            m.alpha[h] = avg(&|d| d.alpha[h]);
        }
        for j in 0..m.beta.len() {
            m.beta[j] = avg(&|d| d.beta[j]);
        }
        for k in 0..m.hyper.theta.len() {
            m.hyper.theta[k] = avg(&|d| d.hyper.theta[k]);
        }
        for k in 0..m.hyper.g.len() {
            m.hyper.g[k] = avg(&|d| d.hyper.g[k]);
        }
        m.hyper.sigma2_alpha = avg(&|d| d.hyper.sigma2_alpha);
        m.hyper.sigma2_beta = avg(&|d| d.hyper.sigma2_beta);
        m.hyper.delta = avg(&|d| d.hyper.delta);
        m.hyper.g_delta = avg(&|d| d.hyper.g_delta);
        m
    }
}

/// Run one chain. `chain` selects the random stream.
pub fn run_chain(
    design: &DesignBundle,
    spec: &ModelSpec,
    config: &ChainConfig,
    chain: usize,
) -> Result<PosteriorSamples> {
    config.validate()?;
    spec.validate()?;
    let rng = RngStream::new(config.seed, 1 + chain as u64);
    let mut sampler = GibbsSampler::new(design, spec, rng);
    if let Some(step) = config.delta_step {
        sampler.set_delta_step(step);
    }
    let mut draws = Vec::with_capacity(config.retained());
    let mut batch = 0usize;
    for it in 0..config.iterations {
        sampler.sweep()?;
        if it < config.burnin {
            if spec.has_delta() && (it + 1) % ADAPT_BATCH == 0 {
                batch += 1;
                let (acc, prop) = sampler.take_delta_counts();
                let rate = acc as f64 / prop.max(1) as f64;
                let gain = (1.0 / (batch as f64).sqrt()).min(0.5);
                let step = sampler.delta_step() * ((rate - TARGET_ACCEPT) * gain * 2.0).exp();
                sampler.set_delta_step(step);
            }
            if it + 1 == config.burnin {
                sampler.take_delta_counts();
            }
        } else if (it + 1 - config.burnin).is_multiple_of(config.thin) {
            draws.push(sampler.state().clone());
        }
    }
    let mut warnings = Vec::new();
    let (acc, prop) = sampler.take_delta_counts();
    let acceptance = (spec.has_delta() && prop > 0).then(|| acc as f64 / prop as f64);
    if let Some(a) = acceptance {
        if !(0.1..=0.7).contains(&a) {
            warnings.push(format!(
                "chain {chain}: delta acceptance {a:.3} outside [0.1, 0.7]"
            ));
        }
    }
    let n = draws.len();
    Ok(PosteriorSamples {
        meta: SampleMeta {
            iterations: config.iterations,
            burnin: config.burnin,
            thin: config.thin,
            seed: config.seed,
            n_chains: 1,
            spec: spec.clone(),
            spec_hash: spec.hash(),
            data_hash: design.data_hash.clone(),
            hospital_ids: design.hospitals.hospital_ids.clone(),
            beta_names: design.transform.names.clone(),
            hyper_names: hyper_names(design, spec),
            delta_acceptance: vec![acceptance],
            delta_step: vec![spec.has_delta().then(|| sampler.delta_step())],
            warnings,
        },
        draws,
        chain: vec![chain; n],
    })
}

/// Run `config.n_chains` chains in parallel and pool their draws in chain order.
pub fn run_chains(
    design: &DesignBundle,
    spec: &ModelSpec,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let results: Vec<Result<PosteriorSamples>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(design, spec, config, c))
        .collect();
    let mut out: Option<PosteriorSamples> = None;
    for r in results {
        let s = r?;
        match out.as_mut() {
            None => out = Some(s),
            Some(o) => {
                o.meta.n_chains += 1;
                o.meta.delta_acceptance.extend(s.meta.delta_acceptance);
                o.meta.delta_step.extend(s.meta.delta_step);
                o.meta.warnings.extend(s.meta.warnings);
                o.draws.extend(s.draws);
                o.chain.extend(s.chain);
            }
        }
    }
    Ok(out.expect("at least one chain"))
}

pub const SAMPLES_FILE: &str = "samples.csv";
pub const META_FILE: &str = "meta.json";

/// Write `samples.csv` and `meta.json` into `dir`.
pub fn write_samples(samples: &PosteriorSamples, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SAMPLES_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let meta = &samples.meta;
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(meta.hospital_ids.iter().map(|h| format!("alpha.{h}")));
    header.extend((1..=meta.beta_names.len()).map(|j| format!("beta.{j}")));
    header.extend(meta.hyper_names.iter().cloned());
    let io = |e| Error::io(&path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut counter = vec![0usize; samples.chain.iter().copied().max().map_or(0, |c| c + 1)];
    let mut line = String::new();
    for (d, &c) in samples.draws.iter().zip(&samples.chain) {
        line.clear();
        use std::fmt::Write as _;
        let _ = write!(line, "{c},{}", counter[c]);
        counter[c] += 1;
        for v in d
            .alpha
            .iter()
            .chain(&d.beta)
            .chain(&d.hyper_values(&meta.spec))
        {
            let _ = write!(line, ",{v}");
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let mpath = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Read samples written by [`write_samples`].
pub fn read_samples(dir: &Path) -> Result<PosteriorSamples> {
    let mpath = dir.join(META_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: SampleMeta = serde_json::from_str(&text)?;
    if meta.spec.hash() != meta.spec_hash {
        return Err(Error::Samples(
            "spec hash does not match the stored spec".into(),
        ));
    }
    let path = dir.join(SAMPLES_FILE);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    let h = meta.hospital_ids.len();
    let p = meta.beta_names.len();
    let m = meta.hyper_names.len();
    if headers.len() != 2 + h + p + m {
        return Err(Error::Samples(format!(
            "expected {} columns, found {}",
            2 + h + p + m,
            headers.len()
        )));
    }
    for (i, id) in meta.hospital_ids.iter().enumerate() {
        if headers[2 + i] != format!("alpha.{id}") {
            return Err(Error::Samples(format!(
                "column {} should be alpha.{id}",
                2 + i
            )));
        }
    }
    for (i, name) in meta.hyper_names.iter().enumerate() {
        if headers[2 + h + p + i] != *name {
            return Err(Error::Samples(format!(
                "column {} should be {name}",
                2 + h + p + i
            )));
        }
    }
    let n_theta = meta.hyper_names.len() - 2 - if meta.spec.has_delta() { 2 } else { 0 };
    let mut draws = Vec::new();
    let mut chain = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let nums: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Samples(format!("unparseable value in row {}", row + 1)))?;
        chain.push(nums[0] as usize);
        let hyper = &nums[2 + h + p..];
        // theta and block scales share the leading hyper columns
        let n_blocks = meta.hyper_names[..n_theta]
            .iter()
            .filter(|n| matches!(n.as_str(), "g" | "g_s" | "g_l"))
            .count();
        let n_coef = n_theta - n_blocks;
        let rest = &hyper[n_theta..];
        draws.push(ParamState {
            alpha: nums[2..2 + h].to_vec(),
            beta: nums[2 + h..2 + h + p].to_vec(),
            hyper: Hyper {
                theta: hyper[..n_coef].to_vec(),
                g: hyper[n_coef..n_theta].to_vec(),
                sigma2_alpha: rest[0],
                sigma2_beta: rest[1],
                delta: if meta.spec.has_delta() { rest[2] } else { 0.0 },
                g_delta: if meta.spec.has_delta() { rest[3] } else { 1.0 },
            },
        });
    }
    if draws.is_empty() {
        return Err(Error::Samples("no draws".into()));
    }
    Ok(PosteriorSamples { meta, draws, chain })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Posterior mean, standard deviation and central 95% interval of every
/// fixed effect and hyperparameter.
pub fn summarize_parameters(samples: &PosteriorSamples) -> Vec<ParamSummary> {
    let meta = &samples.meta;
    let mut names: Vec<String> = (1..=meta.beta_names.len())
        .map(|j| format!("beta.{j}"))
        .collect();
    names.extend(meta.hyper_names.iter().cloned());
    names
        .into_iter()
        .filter_map(|name| {
            let v = samples.column(&name)?;
            let mean = crate::stats::mean(&v);
            let sd = crate::stats::sample_variance(&v).sqrt();
            Some(ParamSummary {
                lo: quantile(&v, 0.025),
                hi: quantile(&v, 0.975),
                name,
                mean,
                sd,
            })
        })
        .collect()
}
