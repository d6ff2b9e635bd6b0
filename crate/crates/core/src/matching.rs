//! Matched observational comparison of patient groups defined by hospital
//! membership: propensity and prognostic scores, optimal k-to-1 matching,
//! covariate balance and observed-versus-predicted aggregation.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::ColumnTransform;
use crate::error::{Error, Result};
use crate::inference::{FittedModel, Predictor};
use crate::stats::{logistic, quantile};

pub const DEFAULT_TREATED_QUANTILE: f64 = 0.2;

/// Treated-group rule, control rule and matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortDef {
    /// Treated hospitals: volume at or below this quantile of hospital volumes
    /// (0.2 when neither rule is given).
    pub quantile_volume_le: Option<f64>,
    /// Treated hospitals given explicitly.
    pub hospital_ids: Option<Vec<String>>,
    /// Control hospitals: volume at or above this quantile. Defaults to
    /// `1 - quantile_volume_le`; with explicit ids every other hospital is a
    /// control.
    pub control_quantile_volume_ge: Option<f64>,
    pub k: usize,
    pub caliper_sd: f64,
    pub exact_keys: Vec<String>,
    /// Above this many admissible pairs the greedy matcher is used.
    pub max_edges: usize,
}

impl Default for CohortDef {
    fn default() -> Self {
        Self {
            quantile_volume_le: None,
            hospital_ids: None,
            control_quantile_volume_ge: None,
            k: 5,
            caliper_sd: 0.2,
            exact_keys: Vec::new(),
            max_edges: 5_000_000,
        }
    }
}

impl CohortDef {
    pub fn from_json(text: &str) -> Result<Self> {
        let def: CohortDef = serde_json::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if !(self.caliper_sd >= 0.0) {
            return Err(Error::Invalid("caliper_sd must be nonnegative".into()));
        }
        match (self.quantile_volume_le, &self.hospital_ids) {
            (Some(_), Some(_)) => Err(Error::Invalid(
                "give only one of quantile_volume_le and hospital_ids".into(),
            )),
            (q, None) => {
                let q = q.unwrap_or(DEFAULT_TREATED_QUANTILE);
                let c = self.control_quantile_volume_ge.unwrap_or(1.0 - q);
                if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&c) || q >= c {
                    return Err(Error::Invalid(format!(
                        "volume quantiles must satisfy 0 <= {q} < {c} <= 1"
                    )));
                }
                Ok(())
            }
            (None, Some(ids)) if ids.is_empty() => {
                Err(Error::Invalid("hospital_ids is empty".into()))
            }
            (None, Some(_)) => Ok(()),
        }
    }
}

/// Treated and control patients (indices into the dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    pub treated_hospitals: Vec<usize>,
    pub control_hospitals: Vec<usize>,
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
}

pub fn cohort_groups(d: &Dataset, def: &CohortDef) -> Result<Groups> {
    def.validate()?;
    let h_count = d.n_hospitals();
    let mut is_treated = vec![false; h_count];
    let mut is_control = vec![false; h_count];
    if let Some(ids) = &def.hospital_ids {
        for id in ids {
            let h = d
                .hospital_index(id)
                .ok_or_else(|| Error::Invalid(format!("unknown treated hospital {id}")))?;
            is_treated[h] = true;
        }
        for h in 0..h_count {
            is_control[h] = !is_treated[h];
        }
    } else {
        let q = def.quantile_volume_le.unwrap_or(DEFAULT_TREATED_QUANTILE);
        let c = def.control_quantile_volume_ge.unwrap_or(1.0 - q);
        let vol: Vec<f64> = d.hospitals().iter().map(|h| h.volume as f64).collect();
        let lo = quantile(&vol, q);
        let hi = quantile(&vol, c);
        for h in 0..h_count {
            is_treated[h] = vol[h] <= lo;
            is_control[h] = vol[h] >= hi && !is_treated[h];
        }
    }
    let pick = |flags: &[bool]| -> Vec<usize> {
        flags
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(h, _)| h)
            .collect()
    };
    let treated_hospitals = pick(&is_treated);
    let control_hospitals = pick(&is_control);
    let patients =
        |hs: &[usize]| -> Vec<usize> { hs.iter().flat_map(|&h| d.hospital_patients(h)).collect() };
    let treated = patients(&treated_hospitals);
    let controls = patients(&control_hospitals);
    if treated.is_empty() || controls.is_empty() {
        return Err(Error::Invalid(format!(
            "matching needs both groups: {} treated and {} control patients",
            treated.len(),
            controls.len()
        )));
    }
    Ok(Groups {
        treated_hospitals,
        control_hospitals,
        treated,
        controls,
    })
}

/// Patient covariates followed by age.
pub fn patient_features(d: &Dataset, j: usize) -> Vec<f64> {
    let p = &d.patients()[j];
    let mut f = p.covariates.clone();
    f.push(p.age);
    f
}

pub fn feature_names(d: &Dataset) -> Vec<String> {
    let mut n = d.covariate_names().to_vec();
    n.push("age".into());
    n
}

/// Result of a logistic maximum-likelihood fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

impl LogisticFit {
    /// Nonconvergence or runaway slopes, the signature of separation.
    pub fn diverged(&self) -> bool {
        !self.converged || self.coef[1..].iter().any(|b| b.abs() > SEPARATION_BOUND)
    }
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
const SEPARATION_BOUND: f64 = 25.0;
const SEPARATION_RIDGE: f64 = 1e-4;

/// Newton-Raphson for `logit P(y) = b0 + x'b` with an optional ridge on the
/// slopes. `rows` exclude the intercept.
pub fn fit_logistic(rows: &[Vec<f64>], y: &[bool], ridge: f64) -> Result<LogisticFit> {
    let n = rows.len();
    if n == 0 || n != y.len() {
        return Err(Error::Invalid(
            "logistic fit needs matching nonempty rows and outcomes".into(),
        ));
    }
    let p = rows[0].len() + 1;
    let mut b = DVector::<f64>::zeros(p);
    let mut grad_norm = f64::INFINITY;
    for it in 1..=NEWTON_MAX_ITER {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        let mut x = vec![1.0; p];
        for (r, &yi) in rows.iter().zip(y) {
            x[1..].copy_from_slice(r);
            let eta: f64 = x.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
            let mu = logistic(eta);
            let w = mu * (1.0 - mu);
            let resid = f64::from(u8::from(yi)) - mu;
            for i in 0..p {
                grad[i] += x[i] * resid;
                for k in 0..=i {
                    hess[(i, k)] += w * x[i] * x[k];
                }
            }
        }
        for i in 0..p {
            for k in 0..i {
                hess[(k, i)] = hess[(i, k)];
            }
        }
        for i in 1..p {
            grad[i] -= ridge * b[i];
            hess[(i, i)] += ridge;
        }
        grad_norm = grad.norm();
        if grad_norm <= NEWTON_TOL {
            return Ok(LogisticFit {
                coef: b.iter().copied().collect(),
                iterations: it - 1,
                converged: true,
                gradient_norm: grad_norm,
            });
        }
        let step = match hess.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };
        b += step;
        if b.iter().any(|v| !v.is_finite() || v.abs() > 1e3) {
            break;
        }
    }
    Ok(LogisticFit {
        coef: b.iter().copied().collect(),
        iterations: NEWTON_MAX_ITER,
        converged: false,
        gradient_norm: grad_norm,
    })
}

/// Fitted propensity of treated-group membership, on the logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub names: Vec<String>,
    pub intercept: f64,
    /// Raw-scale slopes; zero for constant features.
    pub coef: Vec<f64>,
    pub ridge: f64,
    pub iterations: usize,
    pub converged: bool,
    pub notes: Vec<String>,
}

impl PropensityModel {
    pub fn logit(&self, features: &[f64]) -> f64 {
        self.intercept
            + self
                .coef
                .iter()
                .zip(features)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }
}

/// Logistic regression of treated-group membership on patient covariates
/// and age. Perfect separation triggers a refit with a small ridge.
pub fn fit_propensity(d: &Dataset, groups: &Groups) -> Result<PropensityModel> {
    let names = feature_names(d);
    let dim = names.len();
    let idx: Vec<usize> = groups
        .treated
        .iter()
        .chain(&groups.controls)
        .copied()
        .collect();
    let y: Vec<bool> = (0..idx.len()).map(|i| i < groups.treated.len()).collect();
    let raw: Vec<Vec<f64>> = idx.iter().map(|&j| patient_features(d, j)).collect();

    let mut center = vec![0.0; dim];
    let mut scale = vec![0.0; dim];
    let n = raw.len() as f64;
    for c in 0..dim {
        let m = raw.iter().map(|r| r[c]).sum::<f64>() / n;
        let v = raw.iter().map(|r| (r[c] - m).powi(2)).sum::<f64>() / n;
        center[c] = m;
        scale[c] = v.sqrt();
    }
    let keep: Vec<usize> = (0..dim)
        .filter(|&c| scale[c] > 1e-12 * center[c].abs().max(1.0))
        .collect();
    let mut notes = Vec::new();
    for c in (0..dim).filter(|c| !keep.contains(c)) {
        notes.push(format!("constant feature `{}` left out", names[c]));
    }
    let rows: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| {
            keep.iter()
                .map(|&c| (r[c] - center[c]) / scale[c])
                .collect()
        })
        .collect();

    let mut ridge = 0.0;
    let mut fit = fit_logistic(&rows, &y, 0.0)?;
    if fit.diverged() {
        notes.push(format!(
            "propensity coefficients diverged (separation); refit with ridge {SEPARATION_RIDGE}"
        ));
        ridge = SEPARATION_RIDGE;
        fit = fit_logistic(&rows, &y, ridge)?;
    }
    let mut coef = vec![0.0; dim];
    let mut intercept = fit.coef[0];
    for (i, &c) in keep.iter().enumerate() {
        let b = fit.coef[i + 1] / scale[c];
        coef[c] = b;
        intercept -= b * center[c];
    }
    Ok(PropensityModel {
        names,
        intercept,
        coef,
        ridge,
        iterations: fit.iterations,
        converged: fit.converged,
        notes,
    })
}

/// Population-level prognostic score from a training fit: posterior-mean
/// fixed effects plus the average hospital effect, no hospital-specific term.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskModel {
    pub beta: Vec<f64>,
    pub mu: f64,
    pub transform: ColumnTransform,
    pub interaction: Option<usize>,
    /// Average `log(vol + 1)` used for the interaction column.
    pub log_volume_mean: f64,
}

impl RiskModel {
    pub fn from_fit(fit: FittedModel<'_>) -> Result<Self> {
        let s = fit.samples;
        if s.is_empty() {
            return Err(Error::Invalid("no posterior draws".into()));
        }
        if s.meta.data_hash != fit.design.data_hash {
            return Err(Error::Mismatch(
                "samples were fit to a different dataset".into(),
            ));
        }
        let m = s.mean_state();
        let mu = m.alpha.iter().sum::<f64>() / m.alpha.len() as f64;
        let lv = &fit.design.hospitals.log_volume;
        Ok(Self {
            beta: m.beta,
            mu,
            transform: fit.design.transform.clone(),
            interaction: fit.design.interaction,
            log_volume_mean: lv.iter().sum::<f64>() / lv.len() as f64,
        })
    }

    /// Logit-scale score of a patient with raw covariates and age.
    pub fn score(&self, covariates: &[f64], age: f64) -> f64 {
        let mut eta = self.mu;
        for (c, b) in self.beta.iter().enumerate() {
            let raw = if Some(c) == self.interaction {
                age * self.log_volume_mean
            } else {
                covariates[c]
            };
            eta += b * self.transform.apply(c, raw);
        }
        eta
    }

    pub fn scores(&self, d: &Dataset) -> Vec<f64> {
        d.patients()
            .iter()
            .map(|p| self.score(&p.covariates, p.age))
            .collect()
    }
}

/// Optimal or greedy assignment of controls to treated units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Optimal,
    Greedy,
}

/// Controls assigned to each treated unit and the total integer cost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub sets: Vec<Vec<usize>>,
    pub total: i64,
}

struct Graph {
    to: Vec<usize>,
    cap: Vec<i64>,
    cost: Vec<i64>,
    adj: Vec<Vec<usize>>,
}

impl Graph {
    fn new(n: usize) -> Self {
        Self {
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, u: usize, v: usize, cap: i64, cost: i64) {
        self.adj[u].push(self.to.len());
        self.to.push(v);
        self.cap.push(cap);
        self.cost.push(cost);
        self.adj[v].push(self.to.len());
        self.to.push(u);
        self.cap.push(0);
        self.cost.push(-cost);
    }
}

/// Minimum-cost maximum assignment: treated `t` may take up to `k` controls
/// from `edges[t]` (`(control, cost)` pairs, costs nonnegative), each control
/// at most once. Successive shortest paths with Dijkstra on reduced costs.
pub fn optimal_assignment(edges: &[Vec<(usize, i64)>], n_controls: usize, k: usize) -> Assignment {
    let t_count = edges.len();
    let source = 0;
    let sink = 1 + t_count + n_controls;
    let mut g = Graph::new(sink + 1);
    for (t, es) in edges.iter().enumerate() {
        g.add(source, 1 + t, k as i64, 0);
        for &(c, cost) in es {
            debug_assert!(cost >= 0);
            g.add(1 + t, 1 + t_count + c, 1, cost);
        }
    }
    for c in 0..n_controls {
        g.add(1 + t_count + c, sink, 1, 0);
    }

    let n = sink + 1;
    let mut pot = vec![0i64; n];
    let mut dist = vec![i64::MAX; n];
    let mut prev = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut heap = BinaryHeap::new();
    let needed = t_count * k;
    let mut flow = 0;
    while flow < needed {
        for &v in &touched {
            dist[v] = i64::MAX;
            prev[v] = usize::MAX;
            done[v] = false;
        }
        touched.clear();
        dist[source] = 0;
        touched.push(source);
        heap.clear();
        heap.push(Reverse((0i64, source)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            if u == sink {
                break;
            }
            for &e in &g.adj[u] {
                if g.cap[e] <= 0 {
                    continue;
                }
                let v = g.to[e];
                let nd = d + g.cost[e] + pot[u] - pot[v];
                if nd < dist[v] {
                    if dist[v] == i64::MAX {
                        touched.push(v);
                    }
                    dist[v] = nd;
                    prev[v] = e;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        if !done[sink] {
            break;
        }
        let ds = dist[sink];
        // Nodes beyond the sink's distance keep reduced costs nonnegative
        // when their potential moves by the sink distance.
        for v in 0..n {
            pot[v] += if done[v] { dist[v] } else { ds };
        }
        let mut v = sink;
        while v != source {
            let e = prev[v];
            g.cap[e] -= 1;
            g.cap[e ^ 1] += 1;
            v = g.to[e ^ 1];
        }
        flow += 1;
    }

    let mut sets = vec![Vec::new(); t_count];
    let mut total = 0;
    for (t, set) in sets.iter_mut().enumerate() {
        for &e in &g.adj[1 + t] {
            let v = g.to[e];
            if e % 2 == 0 && v > t_count && v < sink && g.cap[e] == 0 {
                set.push(v - 1 - t_count);
                total += g.cost[e];
            }
        }
        set.sort_unstable();
    }
    Assignment { sets, total }
}

/// Most constrained treated units first, each taking its cheapest free
/// admissible controls.
pub fn greedy_assignment(edges: &[Vec<(usize, i64)>], n_controls: usize, k: usize) -> Assignment {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&t| (edges[t].len(), t));
    let mut used = vec![false; n_controls];
    let mut sets = vec![Vec::new(); edges.len()];
    let mut total = 0;
    for t in order {
        let mut es = edges[t].clone();
        es.sort_by_key(|&(c, cost)| (cost, c));
        for (c, cost) in es {
            if sets[t].len() == k {
                break;
            }
            if !used[c] {
                used[c] = true;
                sets[t].push(c);
                total += cost;
            }
        }
        sets[t].sort_unstable();
    }
    Assignment { sets, total }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// No control within the caliper and exact keys.
    NoAdmissibleControl,
    /// Admissible controls exist but were all used by other treated units.
    ControlsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub treated: usize,
    pub controls: Vec<usize>,
}

/// Distances are scaled by this factor and rounded for the flow solver.
pub const COST_SCALE: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedStudy {
    pub k_requested: usize,
    pub k: usize,
    pub method: MatchMethod,
    /// Absolute caliper on the propensity logit.
    pub caliper: f64,
    pub sets: Vec<MatchedSet>,
    pub dropped: Vec<(usize, DropReason)>,
    /// All treated and control patients (dataset indices).
    pub treated: Vec<usize>,
    pub controls: Vec<usize>,
    pub admissible_counts: Vec<usize>,
    pub feature_names: Vec<String>,
    /// Features of every dataset patient: covariates, age, risk score.
    pub features: Vec<Vec<f64>>,
    pub outcomes: Vec<bool>,
    pub propensity: Vec<f64>,
    pub total_distance: f64,
    pub total_cost: i64,
    pub edges: usize,
    pub warnings: Vec<String>,
}

/// Whitening map `x -> L^{-1} x` for the pooled covariance `L L'`.
fn whitener(rows: &[&Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for c in 0..dim {
            mean[c] += r[c] / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for r in rows {
        for a in 0..dim {
            for b in 0..=a {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1.0).max(1.0);
    for a in 0..dim {
        for b in 0..=a {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let chol = match cov.clone().cholesky() {
        Some(c)
            if c.l()
                .diagonal()
                .iter()
                .all(|d| *d > 1e-10 * cov.trace().sqrt().max(1e-300)) =>
        {
            c
        }
        _ => {
            let eps = 1e-8 * cov.trace().max(1e-300) / dim as f64;
            let reg = cov + DMatrix::identity(dim, dim) * eps;
            reg.cholesky()
                .ok_or(Error::NotPositiveDefinite("matching covariance"))?
        }
    };
    chol.l()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite("matching covariance"))
}

/// Match each treated patient to `k` controls without replacement.
pub fn match_patients(
    d: &Dataset,
    def: &CohortDef,
    groups: &Groups,
    propensity: &PropensityModel,
    risk: &[f64],
) -> Result<MatchedStudy> {
    def.validate()?;
    if risk.len() != d.n_patients() {
        return Err(Error::Invalid(
            "one risk score per patient is required".into(),
        ));
    }
    let mut warnings = Vec::new();
    let n_t = groups.treated.len();
    let n_c = groups.controls.len();
    let mut k = def.k;
    if k * n_t > n_c {
        k = (n_c / n_t).max(1);
        warnings.push(format!(
            "k reduced from {} to {k}: {n_t} treated and {n_c} controls",
            def.k
        ));
    }

    let mut feature_names = feature_names(d);
    feature_names.push("risk_score".into());
    let features: Vec<Vec<f64>> = (0..d.n_patients())
        .map(|j| {
            let mut f = patient_features(d, j);
            f.push(risk[j]);
            f
        })
        .collect();
    let prop: Vec<f64> = (0..d.n_patients())
        .map(|j| propensity.logit(&patient_features(d, j)))
        .collect();

    let cohort: Vec<usize> = groups
        .treated
        .iter()
        .chain(&groups.controls)
        .copied()
        .collect();
    let logits: Vec<f64> = cohort.iter().map(|&j| prop[j]).collect();
    let lm = logits.iter().sum::<f64>() / logits.len() as f64;
    let lsd = (logits.iter().map(|l| (l - lm).powi(2)).sum::<f64>()
        / (logits.len() as f64 - 1.0).max(1.0))
    .sqrt();
    let caliper = def.caliper_sd * lsd;

    let rows: Vec<&Vec<f64>> = cohort.iter().map(|&j| &features[j]).collect();
    let linv = whitener(&rows)?;
    let white = |j: usize| -> DVector<f64> { &linv * DVector::from_column_slice(&features[j]) };
    let wt: Vec<DVector<f64>> = groups.treated.iter().map(|&j| white(j)).collect();
    let wc: Vec<DVector<f64>> = groups.controls.iter().map(|&j| white(j)).collect();

    let key_cols: Vec<usize> = def
        .exact_keys
        .iter()
        .map(|key| {
            feature_names
                .iter()
                .position(|n| n == key)
                .ok_or_else(|| Error::Invalid(format!("unknown exact key `{key}`")))
        })
        .collect::<Result<_>>()?;

    let mut by_logit: Vec<usize> = (0..n_c).collect();
    by_logit.sort_by(|&a, &b| prop[groups.controls[a]].total_cmp(&prop[groups.controls[b]]));
    let sorted_logits: Vec<f64> = by_logit.iter().map(|&c| prop[groups.controls[c]]).collect();

    let edges: Vec<Vec<(usize, i64)>> = groups
        .treated
        .par_iter()
        .enumerate()
        .map(|(t, &jt)| {
            let l = prop[jt];
            let start = sorted_logits.partition_point(|&x| x < l - caliper);
            let end = sorted_logits.partition_point(|&x| x <= l + caliper);
            let mut es = Vec::new();
            for &c in &by_logit[start..end] {
                let jc = groups.controls[c];
                if key_cols
                    .iter()
                    .any(|&kc| features[jt][kc] != features[jc][kc])
                {
                    continue;
                }
                let dist = (&wt[t] - &wc[c]).norm();
                es.push((c, (dist * COST_SCALE).round() as i64));
            }
            es.sort_unstable();
            es
        })
        .collect();
    let admissible_counts: Vec<usize> = edges.iter().map(Vec::len).collect();
    let n_edges: usize = admissible_counts.iter().sum();
    let without = admissible_counts.iter().filter(|c| **c == 0).count();
    if without == n_t {
        return Err(Error::InfeasibleMatching {
            treated: n_t,
            treated_without_controls: without,
            admissible_counts,
        });
    }

    let method = if n_edges > def.max_edges {
        warnings.push(format!(
            "{n_edges} admissible pairs exceed the cap of {}; greedy matching used",
            def.max_edges
        ));
        MatchMethod::Greedy
    } else {
        MatchMethod::Optimal
    };
    let assignment = match method {
        MatchMethod::Optimal => optimal_assignment(&edges, n_c, k),
        MatchMethod::Greedy => greedy_assignment(&edges, n_c, k),
    };

    let mut sets = Vec::new();
    let mut dropped = Vec::new();
    let mut total_distance = 0.0;
    let mut partial = 0;
    for (t, set) in assignment.sets.iter().enumerate() {
        let jt = groups.treated[t];
        if set.is_empty() {
            let reason = if admissible_counts[t] == 0 {
                DropReason::NoAdmissibleControl
            } else {
                DropReason::ControlsExhausted
            };
            dropped.push((jt, reason));
            continue;
        }
        if set.len() < k {
            partial += 1;
        }
        for &c in set {
            total_distance += (&wt[t] - &wc[c]).norm();
        }
        sets.push(MatchedSet {
            treated: jt,
            controls: set.iter().map(|&c| groups.controls[c]).collect(),
        });
    }
    if !dropped.is_empty() {
        warnings.push(format!(
            "{} of {n_t} treated patients dropped",
            dropped.len()
        ));
    }
    if partial > 0 {
        warnings.push(format!(
            "{partial} treated patients matched to fewer than {k} controls"
        ));
    }
    Ok(MatchedStudy {
        k_requested: def.k,
        k,
        method,
        caliper,
        sets,
        dropped,
        treated: groups.treated.clone(),
        controls: groups.controls.clone(),
        admissible_counts,
        feature_names,
        features,
        outcomes: d.patients().iter().map(|p| p.outcome).collect(),
        propensity: prop,
        total_distance,
        total_cost: assignment.total,
        edges: n_edges,
        warnings,
    })
}

impl MatchedStudy {
    /// Mean of `f` over matched treated units.
    fn matched_treated_mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.sets.iter().map(|s| f(s.treated)).sum::<f64>() / self.sets.len() as f64
    }

    /// Mean of `f` over matched controls, each treated unit's set weighted
    /// equally.
    fn matched_control_mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.sets
            .iter()
            .map(|s| s.controls.iter().map(|&c| f(c)).sum::<f64>() / s.controls.len() as f64)
            .sum::<f64>()
            / self.sets.len() as f64
    }

    fn group_mean(idx: &[usize], f: impl Fn(usize) -> f64) -> f64 {
        idx.iter().map(|&j| f(j)).sum::<f64>() / idx.len() as f64
    }

    /// Observed outcome rates: matched treated, matched controls, all controls.
    pub fn observed(&self) -> [f64; 3] {
        let y = |j: usize| f64::from(u8::from(self.outcomes[j]));
        [
            self.matched_treated_mean(y),
            self.matched_control_mean(y),
            Self::group_mean(&self.controls, y),
        ]
    }

    pub fn n_matched(&self) -> usize {
        self.sets.len()
    }
}

/// `(m1 - m0) / sqrt((v1 + v0) / 2)`.
pub fn standardized_difference(m1: f64, m0: f64, v1: f64, v0: f64) -> Option<f64> {
    let sd = ((v1 + v0) / 2.0).sqrt();
    (sd > 0.0).then(|| (m1 - m0) / sd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub name: String,
    pub treated: f64,
    pub matched_treated: f64,
    pub matched_control: f64,
    pub all_control: f64,
    /// Pre-matching pooled SD; `None` marks a degenerate covariate.
    pub pooled_sd: Option<f64>,
    pub std_diff_before: Option<f64>,
    pub std_diff_after: Option<f64>,
}

fn var(idx: &[usize], f: impl Fn(usize) -> f64) -> f64 {
    let n = idx.len() as f64;
    let m = idx.iter().map(|&j| f(j)).sum::<f64>() / n;
    idx.iter().map(|&j| (f(j) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Covariate balance before and after matching. Differences are in units of
/// the equal-weight pooled SD of all treated and all controls.
pub fn balance_table(study: &MatchedStudy) -> Vec<BalanceRow> {
    (0..study.feature_names.len())
        .map(|c| {
            let f = |j: usize| study.features[j][c];
            let treated = MatchedStudy::group_mean(&study.treated, f);
            let all_control = MatchedStudy::group_mean(&study.controls, f);
            let matched_treated = study.matched_treated_mean(f);
            let matched_control = study.matched_control_mean(f);
            let (vt, vc) = (var(&study.treated, f), var(&study.controls, f));
            let before = standardized_difference(treated, all_control, vt, vc);
            let after = standardized_difference(matched_treated, matched_control, vt, vc);
            BalanceRow {
                name: study.feature_names[c].clone(),
                treated,
                matched_treated,
                matched_control,
                all_control,
                pooled_sd: before.map(|_| ((vt + vc) / 2.0).sqrt()),
                std_diff_before: before,
                std_diff_after: after,
            }
        })
        .collect()
}

/// Mean absolute standardized difference before and after matching over
/// non-degenerate covariates.
pub fn mean_abs_std_diff(rows: &[BalanceRow]) -> (f64, f64) {
    let ok: Vec<&BalanceRow> = rows.iter().filter(|r| r.pooled_sd.is_some()).collect();
    let n = ok.len() as f64;
    (
        ok.iter()
            .map(|r| r.std_diff_before.unwrap().abs())
            .sum::<f64>()
            / n,
        ok.iter()
            .map(|r| r.std_diff_after.unwrap().abs())
            .sum::<f64>()
            / n,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationRow {
    pub label: String,
    pub treated: f64,
    pub matched_controls: f64,
    pub all_controls: f64,
}

/// Posterior-mean rate of every patient at the hospital they attended.
pub fn posterior_mean_rates(fit: FittedModel<'_>, d: &Dataset) -> Result<Vec<f64>> {
    if fit.samples.meta.data_hash != fit.design.data_hash {
        return Err(Error::Mismatch(
            "samples were fit to a different dataset".into(),
        ));
    }
    let val = fit.design.apply_to(d)?;
    let s = fit.samples.len() as f64;
    let sums = fit
        .samples
        .draws
        .par_iter()
        .map(|draw| {
            let pred = Predictor::new(&val, &draw.beta);
            (0..val.n())
                .map(|j| logistic(pred.eta(j, draw.alpha[val.hospital[j]], val.hospital[j])))
                .collect::<Vec<f64>>()
        })
        .reduce(
            || vec![0.0; val.n()],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        );
    Ok(sums.into_iter().map(|v| v / s).collect())
}

/// Observed rates and each model's aggregated predictions for the treated,
/// matched-control and all-control groups.
pub fn aggregation_check(
    study: &MatchedStudy,
    d: &Dataset,
    fits: &[(String, FittedModel<'_>)],
) -> Result<Vec<AggregationRow>> {
    if study.outcomes.len() != d.n_patients() {
        return Err(Error::Mismatch(
            "study was built on a different dataset".into(),
        ));
    }
    let obs = study.observed();
    let mut rows = vec![AggregationRow {
        label: "observed".into(),
        treated: obs[0],
        matched_controls: obs[1],
        all_controls: obs[2],
    }];
    for (label, fit) in fits {
        let p = posterior_mean_rates(*fit, d)?;
        let f = |j: usize| p[j];
        rows.push(AggregationRow {
            label: label.clone(),
            treated: study.matched_treated_mean(f),
            matched_controls: study.matched_control_mean(f),
            all_controls: MatchedStudy::group_mean(&study.controls, f),
        });
    }
    Ok(rows)
}
