//! Full-batch Adam training of the linear autoencoder `X ↦ XQO`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::flowsim::{flow_gradients_from_moment, recon_loss_from_moment, ProjectionPair};
use crate::initlab::{build_pair, InitKind, InitSpec};
use crate::linalg::second_moment;
use crate::spectral::{erank, preprocess, RepMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub orthogonal_penalty_weight: f64,
    /// Preprocess `XQ` and `XQO` before measuring their eRank.
    pub recenter_erank: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            orthogonal_penalty_weight: 0.0,
            recenter_erank: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(domain("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if b.is_nan() || b <= 0.0 || b >= 1.0 {
                return Err(domain(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(domain("adam eps must be positive"));
        }
        if self.orthogonal_penalty_weight.is_nan() || self.orthogonal_penalty_weight < 0.0 {
            return Err(domain("orthogonal penalty weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Adam moments for `(Q, O)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_q: DMatrix<f64>,
    v_q: DMatrix<f64>,
    m_o: DMatrix<f64>,
    v_o: DMatrix<f64>,
    step: u32,
}

impl AdamState {
    pub fn new(p: &ProjectionPair) -> Self {
        let (d, dp) = (p.dim(), p.reduced_dim());
        Self {
            m_q: DMatrix::zeros(d, dp),
            v_q: DMatrix::zeros(d, dp),
            m_o: DMatrix::zeros(dp, d),
            v_o: DMatrix::zeros(dp, d),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// One bias-corrected Adam update of `(q, o)`.
    pub fn update(
        &mut self,
        cfg: &TrainConfig,
        q: &mut DMatrix<f64>,
        o: &mut DMatrix<f64>,
        grad_q: &DMatrix<f64>,
        grad_o: &DMatrix<f64>,
    ) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (param, g, m, v) in [
            (q, grad_q, &mut self.m_q, &mut self.v_q),
            (o, grad_o, &mut self.m_o, &mut self.v_o),
        ] {
            for i in 0..param.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub value: f64,
    pub grad_q: DMatrix<f64>,
    pub grad_o: DMatrix<f64>,
}

/// `w (‖QᵀQ − I‖² + ‖OOᵀ − I‖²)` and its gradients.
pub fn orthogonal_penalty(p: &ProjectionPair, weight: f64) -> Penalty {
    let dp = p.reduced_dim();
    let eye = DMatrix::<f64>::identity(dp, dp);
    let gq = p.q().tr_mul(p.q()) - &eye;
    let go = p.o() * p.o().transpose() - &eye;
    Penalty {
        value: weight * (gq.norm_squared() + go.norm_squared()),
        grad_q: p.q() * &gq * (4.0 * weight),
        grad_o: &go * p.o() * (4.0 * weight),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub init_kind: String,
    pub final_loss: f64,
    /// eRank of `XQ`.
    pub hidden_erank: f64,
    /// eRank of `XQO`.
    pub recon_erank: f64,
    pub recentered: bool,
    /// Total loss before each update, then after the last one.
    pub loss_curve: Vec<f64>,
}

fn measure_erank(m: DMatrix<f64>, recenter: bool) -> Result<f64> {
    if recenter {
        let prepped = preprocess(&RepMatrix::new(m)?)?;
        Ok(erank(prepped.data())?.erank)
    } else {
        Ok(erank(&m)?.erank)
    }
}

/// Trains from an explicit starting pair.
pub fn train_pair(
    x: &DMatrix<f64>,
    init: ProjectionPair,
    init_kind: &str,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if x.ncols() != init.dim() {
        return Err(domain(format!(
            "data width {} does not match projection width {}",
            x.ncols(),
            init.dim()
        )));
    }
    let moment = second_moment(x);
    let total_loss = |p: &ProjectionPair| -> Result<f64> {
        let recon = recon_loss_from_moment(&moment, p)?;
        let pen = if cfg.orthogonal_penalty_weight > 0.0 {
            orthogonal_penalty(p, cfg.orthogonal_penalty_weight).value
        } else {
            0.0
        };
        Ok(recon + pen)
    };
    let mut adam = AdamState::new(&init);
    let (mut q, mut o) = init.into_parts();
    let mut pair = ProjectionPair::new(q.clone(), o.clone())?;
    let initial = total_loss(&pair)?;
    // Loss of the zero map; keeps the guard meaningful when `initial` is ~0.
    let limit = 1e6 * initial.max(0.5 * moment.trace());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    curve.push(initial);
    for epoch in 1..=cfg.epochs {
        let g = flow_gradients_from_moment(&moment, &pair)?;
        let (mut gq, mut go) = (g.grad_q, g.grad_o);
        if cfg.orthogonal_penalty_weight > 0.0 {
            let pen = orthogonal_penalty(&pair, cfg.orthogonal_penalty_weight);
            gq += pen.grad_q;
            go += pen.grad_o;
        }
        adam.update(cfg, &mut q, &mut o, &gq, &go);
        pair = ProjectionPair::new(q.clone(), o.clone()).map_err(|_| Error::Divergence {
            step: epoch,
            reason: "non-finite parameters".into(),
        })?;
        let loss = total_loss(&pair)?;
        if !loss.is_finite() || loss > limit {
            return Err(Error::Divergence {
                step: epoch,
                reason: format!("loss {loss:e} against initial {initial:e}"),
            });
        }
        curve.push(loss);
    }
    let hidden = x * pair.q();
    let recon = &hidden * pair.o();
    Ok(TrainReport {
        init_kind: init_kind.to_string(),
        final_loss: recon_loss_from_moment(&moment, &pair)?,
        hidden_erank: measure_erank(hidden, cfg.recenter_erank)?,
        recon_erank: measure_erank(recon, cfg.recenter_erank)?,
        recentered: cfg.recenter_erank,
        loss_curve: curve,
    })
}

/// Builds the pair from `init` and trains it. `dprime` is ignored for
/// channel selections, whose width is the number of indices.
pub fn train_autoencoder(
    x: &DMatrix<f64>,
    init: &InitSpec,
    dprime: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let width = match &init.kind {
        InitKind::ChannelSelect { indices } => indices.len(),
        _ => dprime,
    };
    let pair = build_pair(init, x.ncols(), width)?;
    train_pair(x, pair, init.kind.name(), cfg)
}
