//! Focal and dice losses, the deep-supervised objective, and change-class
//! metrics from a global confusion matrix.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::sigmoid;
use crate::tensor::{Real, Tensor};

pub const PT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Dice weight inside each focal+dice term.
    pub beta: f64,
    pub gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 0.5, gamma: 2.0, focal_alpha: 0.25, dice_smooth: 1.0, aux_weight: 0.5 }
    }
}

fn check_target<T: Real>(op: &str, dims: &[usize], y: &Tensor<T>) -> Result<()> {
    if y.dims() != dims {
        return Err(Error::shape("loss", format!("{op}: prediction {dims:?} vs target {:?}", y.dims())));
    }
    if y.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(format!("{op}: target must be binary")));
    }
    Ok(())
}

/// Mean focal loss for probabilities `p` of the positive class.
pub fn focal_from_probs(p: &[f64], y: &[f64], gamma: f64, alpha: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let (pt, at) = if y > 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            let pt = pt.max(PT_FLOOR);
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    total / p.len() as f64
}

/// `1 − (2Σpy + s) / (Σp + Σy + s)`.
pub fn dice_from_probs(p: &[f64], y: &[f64], smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sy: f64 = y.iter().sum();
    1.0 - (2.0 * inter + smooth) / (sp + sy + smooth)
}

impl<T: Real> Graph<T> {
    /// Mean focal loss of logits against a binary target of the same shape.
    pub fn focal_loss(&self, logits: Var, y: &Tensor<T>, gamma: T, alpha: T) -> Result<Var> {
        let tz = self.value(logits);
        check_target("focal_loss", tz.dims(), y)?;
        let n = T::from_usize(tz.numel()).unwrap();
        let floor = T::lit(PT_FLOOR);
        // p_t = σ(±z) and a_t per pixel.
        let parts: Vec<(T, T, T)> = tz
            .data()
            .iter()
            .zip(y.data())
            .map(|(&z, &t)| if t == T::one() { (sigmoid(z), alpha, T::one()) } else { (sigmoid(-z), T::one() - alpha, -T::one()) })
            .collect();
        let mut total = T::zero();
        for &(pt, at, _) in &parts {
            let pc = pt.max(floor);
            total += -at * (T::one() - pc).powf(gamma) * pc.ln();
        }
        let value = Tensor::scalar(total / n);
        let shape = tz.shape().clone();
        self.push_op("focal_loss", &[logits], value, move |g, _| {
            let go = g.item() / n;
            let gz = parts
                .iter()
                .map(|&(pt, at, s)| {
                    if pt < floor {
                        return T::zero();
                    }
                    let q = T::one() - pt;
                    // dL/dz = s a_t [γ q^γ p_t ln p_t − q^(γ+1)]
                    let mut d = -q.powf(gamma + T::one());
                    if gamma != T::zero() {
                        d += gamma * q.powf(gamma) * pt * pt.ln();
                    }
                    go * s * at * d
                })
                .collect();
            vec![Some(Tensor::from_parts(shape.clone(), gz))]
        })
    }

    /// Dice loss on sigmoid probabilities, summed over every pixel.
    pub fn dice_loss(&self, logits: Var, y: &Tensor<T>, smooth: T) -> Result<Var> {
        let tz = self.value(logits);
        check_target("dice_loss", tz.dims(), y)?;
        let p: Vec<T> = tz.data().iter().map(|&z| sigmoid(z)).collect();
        let yd = y.data().to_vec();
        let inter: T = p.iter().zip(&yd).map(|(&a, &b)| a * b).sum();
        let denom = p.iter().copied().sum::<T>() + yd.iter().copied().sum::<T>() + smooth;
        let numer = T::lit(2.0) * inter + smooth;
        let value = Tensor::scalar(T::one() - numer / denom);
        let shape = tz.shape().clone();
        self.push_op("dice_loss", &[logits], value, move |g, _| {
            let go = g.item();
            let d2 = denom * denom;
            let gz = p
                .iter()
                .zip(&yd)
                .map(|(&pi, &yi)| {
                    let dp = -(T::lit(2.0) * yi * denom - numer) / d2;
                    go * dp * pi * (T::one() - pi)
                })
                .collect();
            vec![Some(Tensor::from_parts(shape.clone(), gz))]
        })
    }

    /// `focal + β dice` for one logit map.
    pub fn seg_loss(&self, logits: Var, y: &Tensor<T>, cfg: &LossConfig) -> Result<(Var, Var, Var)> {
        let f = self.focal_loss(logits, y, T::lit(cfg.gamma), T::lit(cfg.focal_alpha))?;
        let d = self.dice_loss(logits, y, T::lit(cfg.dice_smooth))?;
        let total = self.add(f, self.scale(d, T::lit(cfg.beta))?)?;
        Ok((total, f, d))
    }
}

/// Loss terms as graph values.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub main_focal: Var,
    pub main_dice: Var,
    pub aux: Var,
}

/// `L_main + w Σ_l (focal + β dice)(aux_l)` over the four auxiliary maps.
pub fn total_loss<T: Real>(g: &Graph<T>, main: Var, aux: &[Var; 4], y: &Tensor<T>, cfg: &LossConfig) -> Result<LossTerms> {
    let (main_loss, main_focal, main_dice) = g.seg_loss(main, y, cfg)?;
    let mut aux_sum: Option<Var> = None;
    for &a in aux {
        let (l, _, _) = g.seg_loss(a, y, cfg)?;
        aux_sum = Some(match aux_sum {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    let aux_loss = aux_sum.expect("four maps");
    let total = g.add(main_loss, g.scale(aux_loss, T::lit(cfg.aux_weight))?)?;
    Ok(LossTerms { total, main: main_loss, main_focal, main_dice, aux: aux_loss })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn update(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape("confusion_update", format!("{} predictions vs {} labels", pred.len(), target.len())));
        }
        for (&p, &t) in pred.iter().zip(target) {
            match (p, t) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                (0, 0) => self.tn += 1,
                _ => return Err(Error::invalid(format!("non-binary mask value ({p}, {t})"))),
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Zero denominators give zero. F1 uses the count form `2TP/(2TP+FP+FN)`,
    /// equal to the harmonic mean of precision and recall.
    pub fn metrics(&self) -> Metrics {
        Metrics {
            iou: ratio(self.tp, self.tp + self.fp + self.fn_),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
        }
    }
}
