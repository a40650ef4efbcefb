//! Pixel-wise cross-entropy, soft Dice and their weighted sum.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_dice: Scalar,
    /// Dice smoothing `ε`.
    pub dice_smooth: Scalar,
    pub ignore_label: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_dice: 1.0,
            dice_smooth: 1.0,
            ignore_label: 255,
        }
    }
}

impl From<&TrainConfig> for LossConfig {
    fn from(c: &TrainConfig) -> Self {
        LossConfig {
            lambda_dice: c.lambda_dice,
            dice_smooth: c.dice_smooth,
            ignore_label: c.ignore_label,
        }
    }
}

/// Logits flattened to `[P × C]` plus the one-hot targets and the per-pixel
/// validity mask as constants.
struct Prepared {
    logits: Var,
    onehot: Tensor,
    valid: Tensor,
    count: usize,
}

fn prepare(t: &mut Tape, logits: Var, labels: &[u8], cfg: &LossConfig) -> Result<Prepared> {
    let shape = t.shape(logits).to_vec();
    let c = *shape.last().ok_or_else(|| Error::InvalidArgument("logits must have a class axis".into()))?;
    let p = t.value(logits).rows();
    if p != labels.len() {
        return Err(Error::shape("loss (logits vs labels)", &shape, &[labels.len()]));
    }
    let mut onehot = Tensor::zeros(&[p, c]);
    let mut valid = Tensor::zeros(&[p, c]);
    let mut count = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l == cfg.ignore_label {
            continue;
        }
        if l as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "label {l} at pixel {i} is outside [0, {c}) and is not the ignore label {}",
                cfg.ignore_label
            )));
        }
        onehot.data_mut()[i * c + l as usize] = 1.0;
        valid.data_mut()[i * c..(i + 1) * c].fill(1.0);
        count += 1;
    }
    let logits = if shape.len() == 2 { logits } else { t.reshape(logits, &[p, c])? };
    Ok(Prepared {
        logits,
        onehot,
        valid,
        count,
    })
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`. A map with
/// every pixel ignored gives 0 and logs a warning.
pub fn cross_entropy(t: &mut Tape, logits: Var, labels: &[u8], cfg: &LossConfig) -> Result<Var> {
    let p = prepare(t, logits, labels, cfg)?;
    if p.count == 0 {
        log::warn!("cross_entropy: every pixel carries the ignore label; loss defined as 0");
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let lsm = t.log_softmax(p.logits)?;
    let y = t.constant(p.onehot);
    let picked = t.mul(lsm, y)?;
    let s = t.sum(picked)?;
    t.scale(s, -1.0 / p.count as Scalar)
}

/// `1 − mean_c (2·Σ p_c·y_c + ε)/(Σ p_c + Σ y_c + ε)` with `p = softmax(logits)`,
/// sums over non-ignored pixels.
pub fn dice_loss(t: &mut Tape, logits: Var, labels: &[u8], cfg: &LossConfig) -> Result<Var> {
    if !(cfg.dice_smooth > 0.0) {
        return Err(Error::InvalidArgument("dice smoothing must be > 0".into()));
    }
    let p = prepare(t, logits, labels, cfg)?;
    let c = p.onehot.last_dim();
    let eps = cfg.dice_smooth;
    let mut y_sum = vec![0.0; c];
    for row in p.onehot.data().chunks(c) {
        for (s, &v) in y_sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let probs = t.softmax(p.logits)?;
    let valid = t.constant(p.valid);
    let probs = t.mul(probs, valid)?;
    let y = t.constant(p.onehot);
    let inter = t.mul(probs, y)?;
    let inter = t.sum_rows(inter)?;
    let num = t.scale(inter, 2.0)?;
    let num = t.add_scalar(num, eps)?;
    let p_sum = t.sum_rows(probs)?;
    let y_eps = t.constant(Tensor::new(&[c], y_sum.iter().map(|v| v + eps).collect())?);
    let den = t.add(p_sum, y_eps)?;
    let dice = t.div(num, den)?;
    let mean = t.mean(dice)?;
    let neg = t.scale(mean, -1.0)?;
    t.add_scalar(neg, 1.0)
}

/// `CE + λ·Dice`; the Dice term is not built when `λ = 0`.
pub fn total_loss(t: &mut Tape, logits: Var, labels: &[u8], cfg: &LossConfig) -> Result<Var> {
    let ce = cross_entropy(t, logits, labels, cfg)?;
    if cfg.lambda_dice == 0.0 {
        return Ok(ce);
    }
    let d = dice_loss(t, logits, labels, cfg)?;
    let d = t.scale(d, cfg.lambda_dice)?;
    t.add(ce, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn eval(f: fn(&mut Tape, Var, &[u8], &LossConfig) -> Result<Var>, logits: &Tensor, labels: &[u8], cfg: &LossConfig) -> Scalar {
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let v = f(&mut t, l, labels, cfg).unwrap();
        t.value(v).item()
    }

    fn softmax(row: &[Scalar]) -> Vec<Scalar> {
        let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let e: Vec<Scalar> = row.iter().map(|v| (v - m).exp()).collect();
        let z: Scalar = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let ce = eval(cross_entropy, &Tensor::zeros(&[2, 2, 4]), &[0, 1, 2, 3], &LossConfig::default());
        assert!((ce - (4.0 as Scalar).ln()).abs() <= 1e-12);
    }

    #[test]
    fn saturated_correct_logit() {
        let mut l = Tensor::zeros(&[1, 3]);
        l.set(&[0, 1], 1e6);
        assert!(eval(cross_entropy, &l, &[1], &LossConfig::default()) <= 1e-6);
    }

    #[test]
    fn random_ce_matches_per_pixel_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let l = Tensor::randn(&[3, 3, 3], 2.0, &mut rng);
        let labels: Vec<u8> = (0..9).map(|_| rng.random_range(0..3)).collect();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            want -= softmax(&l.data()[i * 3..i * 3 + 3])[y as usize].ln();
        }
        want /= 9.0;
        assert!((eval(cross_entropy, &l, &labels, &LossConfig::default()) - want).abs() <= 1e-12);
    }

    #[test]
    fn ignored_pixels_and_bad_labels() {
        let cfg = LossConfig::default();
        let l = Tensor::zeros(&[2, 4]);
        assert_eq!(eval(cross_entropy, &l, &[255, 255], &cfg), 0.0);
        let mut t = Tape::new();
        let v = t.constant(l.clone());
        assert!(cross_entropy(&mut t, v, &[0, 4], &cfg).is_err());
        assert!(dice_loss(&mut t, v, &[0, 4], &cfg).is_err());
    }

    #[test]
    fn perfect_hard_prediction_has_zero_dice_loss() {
        let labels = [0u8, 1, 1, 2];
        let mut l = Tensor::full(&[4, 4], -1e4);
        for (i, &y) in labels.iter().enumerate() {
            l.set(&[i, y as usize], 1e4);
        }
        let cfg = LossConfig::default();
        assert!(eval(dice_loss, &l, &labels, &cfg).abs() <= 1e-12);
        assert!(eval(total_loss, &l, &labels, &cfg).abs() <= 1e-12);
    }

    #[test]
    fn completely_wrong_prediction_is_eight_ninths() {
        // Each class is predicted on 4 pixels and labelled on 4 other pixels:
        // D_c = (0 + 1)/(4 + 4 + 1) = 1/9 for both classes.
        let labels = [0u8, 0, 0, 0, 1, 1, 1, 1];
        let mut l = Tensor::zeros(&[8, 2]);
        for (i, &y) in labels.iter().enumerate() {
            l.set(&[i, 1 - y as usize], 1e4);
        }
        let v = eval(dice_loss, &l, &labels, &LossConfig::default());
        assert!((v - 8.0 / 9.0).abs() <= 1e-15);
    }

    #[test]
    fn uniform_half_half_matches_hand_formula() {
        let n = 8usize;
        let labels: Vec<u8> = (0..n).map(|i| (i >= n / 2) as u8).collect();
        let cfg = LossConfig::default();
        let v = eval(dice_loss, &Tensor::zeros(&[n, 2]), &labels, &cfg);
        // Per class: Σp·y = n/2·0.5, Σp = n·0.5, Σy = n/2.
        let nf = n as Scalar;
        let d = (2.0 * (nf / 2.0) * 0.5 + 1.0) / (nf * 0.5 + nf / 2.0 + 1.0);
        assert!((v - (1.0 - d)).abs() <= 1e-15);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let l = Tensor::randn(&[5, 5, 3], 1.0, &mut rng);
        let labels: Vec<u8> = (0..25).map(|_| rng.random_range(0..3)).collect();
        let cfg = LossConfig { lambda_dice: 0.7, ..Default::default() };
        let ce = eval(cross_entropy, &l, &labels, &cfg);
        let dice = eval(dice_loss, &l, &labels, &cfg);
        assert!((eval(total_loss, &l, &labels, &cfg) - (ce + 0.7 * dice)).abs() <= 1e-12);
        let ce_only = LossConfig { lambda_dice: 0.0, ..cfg };
        assert_eq!(eval(total_loss, &l, &labels, &ce_only), ce);
        assert!((0.0..=1.0).contains(&dice) && ce >= 0.0);
    }
}
