//! Dual-decoding objective and the decaying weight of its continuous branch.

use crate::error::{Error, Result};
use crate::model::DualOutput;
use crate::tensor::{Graph, Var};

/// Piecewise-linear schedule: flat at `start_value` until `start_step`,
/// linear until `end_step`, flat at `end_value` after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub start_value: f64,
    pub end_value: f64,
    pub start_step: u64,
    pub end_step: u64,
}

impl Default for ScheduleConfig {
    /// 1 to 0.1 between steps 20k and 80k.
    fn default() -> Self {
        Self {
            start_value: 1.0,
            end_value: 0.1,
            start_step: 20_000,
            end_step: 80_000,
        }
    }
}

impl ScheduleConfig {
    /// Default endpoints with breakpoints at 20% and 80% of `total_steps`.
    pub fn scaled(total_steps: u64) -> Self {
        Self {
            start_step: total_steps / 5,
            end_step: total_steps * 4 / 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_value = |v: f64| v.is_finite() && v >= 0.0;
        if !ok_value(self.start_value) || !ok_value(self.end_value) {
            return Err(Error::InvalidConfig(format!(
                "lambda values must be finite and >= 0, got {} and {}",
                self.start_value, self.end_value
            )));
        }
        if self.start_step > self.end_step {
            return Err(Error::InvalidConfig(format!(
                "lambda start_step {} is after end_step {}",
                self.start_step, self.end_step
            )));
        }
        Ok(())
    }
}

pub fn lambda_schedule(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step <= cfg.start_step {
        return cfg.start_value;
    }
    if step >= cfg.end_step {
        return cfg.end_value;
    }
    let frac = (step - cfg.start_step) as f64 / (cfg.end_step - cfg.start_step) as f64;
    cfg.start_value + (cfg.end_value - cfg.start_value) * frac
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Commitment weight.
    pub alpha: f64,
    /// Codebook weight; only used when codebooks are trained by gradient.
    pub beta: f64,
    pub lambda: ScheduleConfig,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: ScheduleConfig::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.lambda.validate()
    }
}

/// Per-step settings for [`loss_dual`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    /// Codebooks are graph parameters (no EMA): the codebook term enters the loss.
    pub codebook_grad: bool,
    /// The commitment term enters the loss. Off for fixed grids, whose
    /// codes are not learned and whose targets are already bounded.
    pub commit_grad: bool,
}

/// Values of every loss term; `recon_e` is `None` without the continuous branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub recon_q: f64,
    pub recon_e: Option<f64>,
    pub commit: f64,
    pub codebook: f64,
    pub lambda: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.total, self.recon_q, self.recon_e.unwrap_or(0.0), self.commit, self.codebook]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn add_weighted(g: &mut Graph, total: Var, term: Var, w: f64) -> Result<Var> {
    if w == 1.0 {
        return g.add(total, term);
    }
    let scaled = g.scale(term, w);
    g.add(total, scaled)
}

/// `mse(X, X_hat) + lambda * mse(X, X_tilde) + alpha * mse(E, sg(Z)) [+ beta * mse(sg(E), Z)]`,
/// each a per-element mean over valid rows. Terms with zero weight or no
/// gradient path are evaluated for logging but kept out of the loss node.
pub fn loss_dual(
    g: &mut Graph,
    x: Var,
    out: &DualOutput,
    frame_mask: &[f64],
    token_mask: &[f64],
    opts: &LossOptions,
) -> Result<(Var, LossTerms)> {
    let recon_q = g.masked_mse(out.x_hat, x, frame_mask)?;
    let mut total = recon_q;
    let mut terms = LossTerms {
        total: 0.0,
        recon_q: g.value(recon_q).item(),
        recon_e: None,
        commit: 0.0,
        codebook: 0.0,
        lambda: 0.0,
    };

    if let Some(x_tilde) = out.x_tilde {
        let recon_e = g.masked_mse(x_tilde, x, frame_mask)?;
        terms.recon_e = Some(g.value(recon_e).item());
        terms.lambda = opts.lambda;
        if opts.lambda != 0.0 {
            total = add_weighted(g, total, recon_e, opts.lambda)?;
        }
    }

    if let Some(codes) = out.quant.codes {
        let target = out.quant.target;
        let sg_codes = g.stop_gradient(codes);
        let commit = g.masked_mse(target, sg_codes, token_mask)?;
        terms.commit = g.value(commit).item();
        terms.codebook = terms.commit;
        if opts.commit_grad && opts.alpha != 0.0 {
            total = add_weighted(g, total, commit, opts.alpha)?;
        }
        if opts.codebook_grad && opts.beta != 0.0 {
            let sg_target = g.stop_gradient(target);
            let codebook = g.masked_mse(sg_target, codes, token_mask)?;
            total = add_weighted(g, total, codebook, opts.beta)?;
        }
    }
    terms.total = g.value(total).item();
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::Applied;
    use crate::tensor::Tensor;

    fn scalar_case(x_tilde: f64, lambda: f64, alpha: f64) -> LossTerms {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let xh = g.param(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let xt = g.param(Tensor::matrix(1, 1, vec![x_tilde]).unwrap());
        let e = g.param(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let codes = g.constant(Tensor::matrix(1, 1, vec![0.3]).unwrap());
        let z = g.straight_through(e, codes).unwrap();
        let out = DualOutput {
            e,
            quant: Applied { z, target: e, codes: Some(codes), result: None },
            x_hat: xh,
            x_tilde: Some(xt),
        };
        let opts = LossOptions { alpha, beta: 1.0, lambda, codebook_grad: false, commit_grad: true };
        loss_dual(&mut g, x, &out, &[1.0], &[1.0], &opts).unwrap().1
    }

    #[test]
    fn scalar_dual_loss() {
        let t = scalar_case(0.5, 1.0, 7.0);
        assert_eq!(t.total, 1.25);
        assert_eq!(t.commit, 0.0);
        assert_eq!(scalar_case(0.5, 0.0, 7.0).total, 1.0);
    }

    #[test]
    fn schedule_points() {
        let s = ScheduleConfig::default();
        assert_eq!(lambda_schedule(0, &s), 1.0);
        assert!((lambda_schedule(50_000, &s) - 0.55).abs() < 1e-12);
        assert_eq!(lambda_schedule(100_000, &s), 0.1);
        assert_eq!(lambda_schedule(20_000, &s), 1.0);
        assert_eq!(lambda_schedule(80_000, &s), 0.1);
        let flat = ScheduleConfig { start_step: 5, end_step: 5, ..s };
        assert_eq!(lambda_schedule(4, &flat), 1.0);
        assert_eq!(lambda_schedule(6, &flat), 0.1);
    }

    #[test]
    fn scaled_breakpoints() {
        let s = ScheduleConfig::scaled(5000);
        assert_eq!((s.start_step, s.end_step), (1000, 4000));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { alpha: -1.0, ..LossWeights::default() }.validate().is_err());
        let bad = ScheduleConfig { start_step: 10, end_step: 1, ..ScheduleConfig::default() };
        assert!(bad.validate().is_err());
    }
}
