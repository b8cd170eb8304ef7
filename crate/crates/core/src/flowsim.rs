//! Gradient flow of a projection pair on the linear reconstruction loss
//! `‖X − XQO‖² / 2L`, plus the spectral diagnostics used to check its
//! conservation laws and singular-value dynamics.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{all_finite, pearson, second_moment, singular_values, sorted_svd};
use crate::spectral::erank_from_moment;

/// Down-projection `Q` (`D × D′`) and up-projection `O` (`D′ × D`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    q: DMatrix<f64>,
    o: DMatrix<f64>,
}

impl ProjectionPair {
    pub fn new(q: DMatrix<f64>, o: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != o.ncols() || q.ncols() != o.nrows() {
            return Err(domain(format!(
                "Q is {}x{} but O is {}x{}",
                q.nrows(),
                q.ncols(),
                o.nrows(),
                o.ncols()
            )));
        }
        if q.ncols() == 0 || q.ncols() > q.nrows() {
            return Err(domain(format!(
                "reduced width {} must be in 1..={}",
                q.ncols(),
                q.nrows()
            )));
        }
        if !all_finite(&q) || !all_finite(&o) {
            return Err(Error::Data("projection entries must be finite".into()));
        }
        Ok(Self { q, o })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn o(&self) -> &DMatrix<f64> {
        &self.o
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn reduced_dim(&self) -> usize {
        self.q.ncols()
    }

    /// `M = QO`.
    pub fn product(&self) -> DMatrix<f64> {
        &self.q * &self.o
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.q, self.o)
    }

    fn is_finite(&self) -> bool {
        all_finite(&self.q) && all_finite(&self.o)
    }
}

fn check_width(d: usize, p: &ProjectionPair) -> Result<()> {
    if d != p.dim() {
        return Err(domain(format!(
            "data width {d} does not match projection width {}",
            p.dim()
        )));
    }
    Ok(())
}

/// `(1/2L) ‖X − XQO‖_F²`.
pub fn recon_loss(x: &DMatrix<f64>, p: &ProjectionPair) -> Result<f64> {
    check_width(x.ncols(), p)?;
    let r = x - x * p.q() * p.o();
    Ok(r.norm_squared() / (2.0 * x.nrows() as f64))
}

/// Same loss from the second moment: `½ Tr((I − M)ᵀ Σ (I − M))`.
pub fn recon_loss_from_moment(moment: &DMatrix<f64>, p: &ProjectionPair) -> Result<f64> {
    check_width(moment.nrows(), p)?;
    let r = DMatrix::identity(p.dim(), p.dim()) - p.product();
    Ok(0.5 * r.component_mul(&(moment * &r)).sum().max(0.0))
}

/// Loss gradients `(∂L/∂O, ∂L/∂Q)`; the flow moves against them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGradients {
    pub grad_o: DMatrix<f64>,
    pub grad_q: DMatrix<f64>,
}

pub fn flow_gradients(x: &DMatrix<f64>, p: &ProjectionPair) -> Result<FlowGradients> {
    check_width(x.ncols(), p)?;
    flow_gradients_from_moment(&second_moment(x), p)
}

/// `∂L/∂O = Qᵀ Σ (QO − I)`, `∂L/∂Q = Σ (QO − I) Oᵀ`.
pub fn flow_gradients_from_moment(
    moment: &DMatrix<f64>,
    p: &ProjectionPair,
) -> Result<FlowGradients> {
    check_width(moment.nrows(), p)?;
    let d = p.dim();
    let residual = moment * (p.product() - DMatrix::identity(d, d));
    Ok(FlowGradients {
        grad_o: p.q().tr_mul(&residual),
        grad_q: residual * p.o().transpose(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub eta: f64,
    pub num_steps: usize,
    pub integrator: Integrator,
    pub record_every: usize,
    pub seed: u64,
}

impl FlowConfig {
    pub fn euler(eta: f64, num_steps: usize) -> Self {
        Self {
            eta,
            num_steps,
            integrator: Integrator::Euler,
            record_every: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || !self.eta.is_finite() {
            return Err(domain(format!("step size must be positive, got {}", self.eta)));
        }
        if self.num_steps == 0 {
            return Err(domain("num_steps must be >= 1"));
        }
        if self.record_every == 0 {
            return Err(domain("record_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSnapshot {
    pub step: usize,
    /// Top `D′` singular values of `M`.
    pub sigma_m: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub sigma_o: Vec<f64>,
    pub loss: f64,
    pub balancedness_drift: f64,
    /// eRank of `XQ`; `None` when `XQ` vanishes.
    pub hidden_erank: Option<f64>,
}

impl SpectralSnapshot {
    fn capture(step: usize, moment: &DMatrix<f64>, p: &ProjectionPair) -> Result<Self> {
        let dp = p.reduced_dim();
        let mut sigma_m = singular_values(&p.product());
        sigma_m.truncate(dp);
        let hidden = p.q().tr_mul(&(moment * p.q()));
        Ok(Self {
            step,
            sigma_m,
            sigma_q: singular_values(p.q()),
            sigma_o: singular_values(p.o()),
            loss: recon_loss_from_moment(moment, p)?,
            balancedness_drift: balancedness_drift(p),
            hidden_erank: erank_from_moment(&hidden).ok().map(|s| s.erank),
        })
    }

    /// `σ / σ_max` over the strictly positive singular values of `M`.
    pub fn relative_singular_values(&self) -> Vec<f64> {
        let max = self.sigma_m.first().copied().unwrap_or(0.0);
        if max <= 0.0 {
            return Vec::new();
        }
        self.sigma_m
            .iter()
            .filter(|&&s| s > 1e-12 * max)
            .map(|s| s / max)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub config: FlowConfig,
    pub snapshots: Vec<SpectralSnapshot>,
}

impl FlowTrace {
    pub fn at_step(&self, step: usize) -> Option<&SpectralSnapshot> {
        self.snapshots
            .binary_search_by_key(&step, |s| s.step)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    pub fn last(&self) -> &SpectralSnapshot {
        self.snapshots.last().expect("trace always holds step 0")
    }

    /// One row per snapshot: `step,loss,drift,erank,sigma_1..sigma_D′`.
    pub fn to_csv(&self) -> String {
        let width = self.snapshots.first().map_or(0, |s| s.sigma_m.len());
        let mut out = String::from("step,loss,drift,erank");
        for r in 1..=width {
            let _ = write!(out, ",sigma_{r}");
        }
        out.push('\n');
        for s in &self.snapshots {
            let erank = s.hidden_erank.map_or(String::new(), |e| format!("{e:e}"));
            let _ = write!(out, "{},{:e},{:e},{}", s.step, s.loss, s.balancedness_drift, erank);
            for v in &s.sigma_m {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Stepper for the flow `Q̇ = −∂L/∂Q`, `Ȯ = −∂L/∂O` on a fixed second moment.
#[derive(Debug, Clone)]
pub struct Flow {
    moment: DMatrix<f64>,
    pair: ProjectionPair,
    eta: f64,
    integrator: Integrator,
}

impl Flow {
    pub fn new(
        moment: DMatrix<f64>,
        pair: ProjectionPair,
        eta: f64,
        integrator: Integrator,
    ) -> Result<Self> {
        check_width(moment.nrows(), &pair)?;
        Ok(Self {
            moment,
            pair,
            eta,
            integrator,
        })
    }

    pub fn pair(&self) -> &ProjectionPair {
        &self.pair
    }

    pub fn moment(&self) -> &DMatrix<f64> {
        &self.moment
    }

    fn velocity(&self, q: &DMatrix<f64>, o: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = q.nrows();
        let residual = &self.moment * (q * o - DMatrix::identity(d, d));
        let dq = -(&residual * o.transpose());
        let do_ = -(q.tr_mul(&residual));
        (dq, do_)
    }

    pub fn step(&mut self) {
        let (q, o) = (&self.pair.q, &self.pair.o);
        let h = self.eta;
        let (nq, no) = match self.integrator {
            Integrator::Euler => {
                let (dq, do_) = self.velocity(q, o);
                (q + dq * h, o + do_ * h)
            }
            Integrator::Rk4 => {
                let (k1q, k1o) = self.velocity(q, o);
                let (k2q, k2o) = self.velocity(&(q + &k1q * (h / 2.0)), &(o + &k1o * (h / 2.0)));
                let (k3q, k3o) = self.velocity(&(q + &k2q * (h / 2.0)), &(o + &k2o * (h / 2.0)));
                let (k4q, k4o) = self.velocity(&(q + &k3q * h), &(o + &k3o * h));
                (
                    q + (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (h / 6.0),
                    o + (k1o + k2o * 2.0 + k3o * 2.0 + k4o) * (h / 6.0),
                )
            }
        };
        self.pair.q = nq;
        self.pair.o = no;
    }
}

/// Integrates the flow from `init`, recording step 0, every
/// `record_every`-th step, and the final step.
pub fn simulate(x: &DMatrix<f64>, init: &ProjectionPair, cfg: &FlowConfig) -> Result<FlowTrace> {
    check_width(x.ncols(), init)?;
    simulate_from_moment(&second_moment(x), init, cfg)
}

pub fn simulate_from_moment(
    moment: &DMatrix<f64>,
    init: &ProjectionPair,
    cfg: &FlowConfig,
) -> Result<FlowTrace> {
    cfg.validate()?;
    let mut flow = Flow::new(moment.clone(), init.clone(), cfg.eta, cfg.integrator)?;
    let first = SpectralSnapshot::capture(0, moment, init)?;
    let initial_loss = first.loss;
    let mut snapshots = vec![first];
    for step in 1..=cfg.num_steps {
        flow.step();
        if !flow.pair.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite projection entry".into(),
            });
        }
        let loss = recon_loss_from_moment(moment, &flow.pair)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite loss".into(),
            });
        }
        if initial_loss > 0.0 && loss > 1e6 * initial_loss {
            return Err(Error::Divergence {
                step,
                reason: format!("loss {loss:e} exceeds 1e6 x initial {initial_loss:e}"),
            });
        }
        if step % cfg.record_every == 0 || step == cfg.num_steps {
            snapshots.push(SpectralSnapshot::capture(step, moment, &flow.pair)?);
        }
    }
    Ok(FlowTrace {
        config: cfg.clone(),
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaDotPrediction {
    /// Predicted `dσ_r/dt` for the top `D′` singular values of `M`.
    pub values: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `false` where the gap to another singular value is below
    /// `1e-6 · σ_max`.
    pub reliable: Vec<bool>,
}

/// `σ̇_r = 2 σ_r u_rᵀ Σ (v_r − σ_r u_r)` from an SVD of `m`.
pub fn predicted_sigma_dot(
    moment: &DMatrix<f64>,
    m: &DMatrix<f64>,
    dprime: usize,
) -> Result<SigmaDotPrediction> {
    if !m.is_square() || moment.shape() != m.shape() {
        return Err(domain("moment and M must both be D x D"));
    }
    let svd = sorted_svd(m);
    let all = svd.singular_values.as_slice();
    let k = dprime.min(all.len());
    let smax = all.first().copied().unwrap_or(0.0);
    let mut values = Vec::with_capacity(k);
    let mut reliable = Vec::with_capacity(k);
    for r in 0..k {
        let s = all[r];
        let u = svd.u.column(r);
        let v = svd.v.column(r);
        let dir = v - u * s;
        values.push(2.0 * s * u.dot(&(moment * dir)));
        let gap = all
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != r)
            .map(|(_, t)| (s - t).abs())
            .fold(f64::INFINITY, f64::min);
        reliable.push(gap >= 1e-6 * smax);
    }
    Ok(SigmaDotPrediction {
        values,
        sigma: all[..k].to_vec(),
        reliable,
    })
}

/// `‖QᵀQ − OOᵀ‖_F`.
pub fn balancedness_drift(p: &ProjectionPair) -> f64 {
    (p.q().tr_mul(p.q()) - p.o() * p.o().transpose()).norm()
}

/// `max_r max(|σ_Q − σ_O|, |σ_Q − √σ_M|)` over the top `D′` indices.
pub fn spectral_coupling_residual(p: &ProjectionPair) -> f64 {
    let dp = p.reduced_dim();
    let sq = singular_values(p.q());
    let so = singular_values(p.o());
    let sm = singular_values(&p.product());
    (0..dp)
        .map(|r| (sq[r] - so[r]).abs().max((sq[r] - sm[r].sqrt()).abs()))
        .fold(0.0, f64::max)
}

/// Pearson correlation between `σ_M` at `from_step` and its growth up to
/// `to_step`, pairing singular values by rank index.
pub fn growth_correlation(trace: &FlowTrace, from_step: usize, to_step: usize) -> Result<f64> {
    let a = trace
        .at_step(from_step)
        .ok_or_else(|| domain(format!("step {from_step} not recorded")))?;
    let b = trace
        .at_step(to_step)
        .ok_or_else(|| domain(format!("step {to_step} not recorded")))?;
    if a.sigma_m.len() < 3 {
        return Err(Error::UndefinedCorrelation(
            "need at least 3 tracked singular values".into(),
        ));
    }
    let growth: Vec<f64> = b.sigma_m.iter().zip(&a.sigma_m).map(|(y, x)| y - x).collect();
    pearson(&a.sigma_m, &growth)
        .ok_or_else(|| Error::UndefinedCorrelation("zero variance in sigma or growth".into()))
}
