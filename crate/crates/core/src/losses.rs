//! Training loss terms: split, supervised, autoencoder, and their weighted sum.

use crate::error::{ensure, Result};
use crate::field::{diff_stencil, FieldTensor};
use crate::nn::{Graph, LatentCode, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_ae_direct: f64,
    pub w_sup: f64,
    pub w_split_vel: f64,
    pub w_split_den: f64,
    pub w_ae_pred: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ae_direct: 1.0, w_sup: 1.0, w_split_vel: 1.0, w_split_den: 1.0, w_ae_pred: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { w_ae_direct: 0.0, w_sup: 0.0, w_split_vel: 0.0, w_split_den: 0.0, w_ae_pred: 0.0 }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.w_ae_direct, self.w_sup, self.w_split_vel, self.w_split_den, self.w_ae_pred]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0),
            "loss weights must be finite and non-negative: {self:?}"
        );
        Ok(())
    }
}

/// Unweighted loss terms of one sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub ae_direct: f64,
    pub sup: f64,
    pub split_vel: f64,
    pub split_den: f64,
    /// One term per recurrent prediction.
    pub ae_pred: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub ae_direct: f64,
    pub sup: f64,
    pub split_vel: f64,
    pub split_den: f64,
    /// Sum over recurrent predictions.
    pub ae_pred: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.ae_direct, self.sup, self.split_vel, self.split_den, self.ae_pred, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.ae_direct += r.ae_direct / n;
            m.sup += r.sup / n;
            m.split_vel += r.split_vel / n;
            m.split_den += r.split_den / n;
            m.ae_pred += r.ae_pred / n;
            m.total += r.total / n;
        }
        m
    }
}

/// `sum_{i = i_s}^{i_e} |c_i|`.
pub fn loss_split(c: &LatentCode, i_s: usize, i_e: usize) -> Result<f64> {
    let v = c.values();
    ensure!(i_s <= i_e && i_e < v.len(), "split range [{i_s}, {i_e}] invalid for a code of {}", v.len());
    Ok(v[i_s..=i_e].iter().map(|x| x.abs()).sum())
}

/// Mean squared difference.
pub fn loss_sup(c_sp_hat: &[f64], c_sp: &[f64]) -> Result<f64> {
    ensure!(
        c_sp_hat.len() == c_sp.len() && !c_sp.is_empty(),
        "supervised vectors differ in length: {} vs {}",
        c_sp_hat.len(),
        c_sp.len()
    );
    Ok(c_sp_hat.iter().zip(c_sp).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c_sp.len() as f64)
}

/// Mean absolute velocity error, plus mean absolute error of the velocity
/// gradients, plus mean squared density error.
pub fn loss_ae(x: &FieldTensor, x_hat: &FieldTensor) -> Result<f64> {
    ensure!(
        x.width() == x_hat.width() && x.height() == x_hat.height(),
        "autoencoder loss on fields of different shape"
    );
    let (w, h) = (x.width(), x.height());
    let n = (w * h) as f64;
    let a = x.to_chw();
    let b = x_hat.to_chw();
    let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
    let vel = &diff[..2 * w * h];
    let den = &diff[2 * w * h..];
    let l1 = vel.iter().map(|v| v.abs()).sum::<f64>() / (2.0 * n);
    let mut grad = 0.0;
    for ch in 0..2 {
        let f = &vel[ch * w * h..(ch + 1) * w * h];
        for j in 0..h {
            for i in 0..w {
                let dx: f64 = diff_stencil(w, i).iter().map(|&(ii, c)| c * f[j * w + ii]).sum();
                let dy: f64 = diff_stencil(h, j).iter().map(|&(jj, c)| c * f[jj * w + i]).sum();
                grad += dx.abs() + dy.abs();
            }
        }
    }
    let grad = grad / (4.0 * n);
    let l2 = den.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(l1 + grad + l2)
}

/// Weighted sum of all terms; prediction terms are summed over steps.
pub fn loss_total(parts: &LossParts, w: &LossWeights) -> LossReport {
    let ae_pred: f64 = parts.ae_pred.iter().sum();
    let total = w.w_ae_direct * parts.ae_direct
        + w.w_sup * parts.sup
        + w.w_split_vel * parts.split_vel
        + w.w_split_den * parts.split_den
        + w.w_ae_pred * ae_pred;
    LossReport {
        ae_direct: parts.ae_direct,
        sup: parts.sup,
        split_vel: parts.split_vel,
        split_den: parts.split_den,
        ae_pred,
        total,
    }
}

/// Graph form of [`loss_split`].
pub fn split_node(g: &mut Graph, c: Var, i_s: usize, i_e: usize) -> Result<Var> {
    let n = g.shape(c).iter().product::<usize>();
    ensure!(i_s <= i_e && i_e < n, "split range [{i_s}, {i_e}] invalid for a code of {n}");
    let s = g.slice(c, i_s, i_e - i_s + 1)?;
    Ok(g.abs_sum(s))
}

/// Graph form of [`loss_sup`].
pub fn sup_node(g: &mut Graph, c_sp_hat: Var, c_sp: Var) -> Result<Var> {
    let d = g.sub(c_sp_hat, c_sp)?;
    Ok(g.sq_mean(d))
}

/// Graph form of [`loss_ae`] on `[3, H, W]` nodes.
pub fn ae_node(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    ensure!(s.len() == 3 && s[0] == 3 && g.shape(x_hat) == s.as_slice(), "autoencoder loss needs matching [3, H, W]");
    let n = s[1] * s[2];
    let d = g.sub(x, x_hat)?;
    let vel = g.slice(d, 0, 2 * n)?;
    let l1 = g.abs_mean(vel);
    let vel = g.reshape(vel, vec![2, s[1], s[2]])?;
    let grads = g.grad2(vel)?;
    let lg = g.abs_mean(grads);
    let den = g.slice(d, 2 * n, n)?;
    let l2 = g.sq_mean(den);
    g.weighted(&[(l1, 1.0), (lg, 1.0), (l2, 1.0)])
}
