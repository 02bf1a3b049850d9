//! Training objectives: paraphraser reconstruction, classification,
//! factor transfer, softened-softmax distillation (KD), attention transfer
//! (AT), and their hybrid composition.
//!
//! Teacher-side arguments are always treated as constants: they are either
//! detached here or never recorded as graph inputs, so no backward pass can
//! reach teacher or paraphraser parameters through a loss.

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{NormP, Tensor};

/// Default paraphrase rate.
pub const DEFAULT_K: f64 = 0.5;
/// Default factor-transfer weight for CIFAR-scale classification.
pub const DEFAULT_BETA: f64 = 500.0;
/// Attention-transfer weight.
pub const DEFAULT_AT_BETA: f64 = 1e3;
/// Softened-softmax temperature.
pub const DEFAULT_T: f64 = 4.0;
/// Guard for l2 normalization of factors and attention maps.
pub const L2_EPS: f64 = 1e-12;

/// Hyperparameters of the factor-transfer objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorConfig {
    /// Paraphrase rate: factor channels = round(m·k).
    pub k: f64,
    /// Weight of the factor-transfer term in the student loss.
    pub beta: f64,
    /// Norm exponent for the factor distance.
    pub p: NormP,
    /// KD temperature.
    pub t: f64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            k: DEFAULT_K,
            beta: DEFAULT_BETA,
            p: NormP::L1,
            t: DEFAULT_T,
        }
    }
}

impl FactorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k <= 0.0 {
            config_err!("paraphrase rate k must be positive, got {}", self.k);
        }
        if self.beta < 0.0 {
            config_err!("beta must be non-negative, got {}", self.beta);
        }
        if self.t <= 0.0 {
            config_err!("temperature must be positive, got {}", self.t);
        }
        Ok(())
    }
}

/// Mean over the batch of the squared euclidean distance between the input
/// feature map and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, px: &Tensor<T>) -> Result<Tensor<T>> {
    x.check_same_shape(px, "reconstruction_loss")?;
    x.sub(px)?.flatten_rows()?.sqnorm_rows_mean()
}

/// Mean cross entropy between integer labels and the softmax of the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    logits.cross_entropy_loss(labels)
}

/// Factor-transfer distance: flatten per sample, l2-normalize both factors,
/// p-norm of the difference, batch mean. The teacher factor is detached;
/// gradients flow only into the student factor.
pub fn factor_transfer_loss<T: Scalar>(
    ft: &Tensor<T>,
    fs: &Tensor<T>,
    p: NormP,
) -> Result<Tensor<T>> {
    ft.check_same_shape(fs, "factor_transfer_loss")?;
    let a = ft.detach().flatten_rows()?.l2_normalize(L2_EPS)?;
    let b = fs.flatten_rows()?.l2_normalize(L2_EPS)?;
    a.sub(&b)?.pnorm_rows_mean(p)
}

/// Total student objective: classification plus weighted factor transfer.
pub fn student_loss<T: Scalar>(cls: &Tensor<T>, ft: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if beta < 0.0 {
        config_err!("student_loss: beta must be non-negative, got {beta}");
    }
    cls.add(&ft.scale(beta))
}

/// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, batch mean.
pub fn kd_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    student_logits.kd_loss_vs(teacher_logits, t)
}

/// Spatial attention map: channel-squared sum flattened to `[N, H·W]`,
/// l2-normalized per sample.
pub fn attention_map<T: Scalar>(feature: &Tensor<T>) -> Result<Tensor<T>> {
    feature.square_channel_sum()?.l2_normalize(L2_EPS)
}

/// Attention-transfer loss: sum over paired groups of the batch-mean l2
/// distance between attention maps. Channel counts may differ per pair;
/// spatial extents must match. The weighting happens in [`compose_total`].
pub fn at_loss<T: Scalar>(
    student_groups: &[Tensor<T>],
    teacher_groups: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if student_groups.is_empty() || student_groups.len() != teacher_groups.len() {
        config_err!(
            "at_loss: got {} student and {} teacher groups",
            student_groups.len(),
            teacher_groups.len()
        );
    }
    let mut total: Option<Tensor<T>> = None;
    for (s, t) in student_groups.iter().zip(teacher_groups) {
        let ms = attention_map(s)?;
        let mt = attention_map(&t.detach())?;
        ms.check_same_shape(&mt, "at_loss attention maps (spatial extents)")?;
        let term = ms.sub(&mt)?.pnorm_rows_mean(NormP::L2)?;
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty groups"))
}

/// Knowledge-transfer method selector; tags match the comparison table
/// column headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Scratch,
    Ft,
    Kd,
    At,
    FtKd,
    AtKd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Scratch,
        Method::At,
        Method::Kd,
        Method::Ft,
        Method::AtKd,
        Method::FtKd,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "scratch" => Ok(Method::Scratch),
            "ft" => Ok(Method::Ft),
            "kd" => Ok(Method::Kd),
            "at" => Ok(Method::At),
            "ft+kd" | "kd+ft" => Ok(Method::FtKd),
            "at+kd" | "kd+at" => Ok(Method::AtKd),
            other => config_err!(
                "unknown method '{other}' (expected scratch, ft, kd, at, ft+kd or at+kd)"
            ),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Scratch => "scratch",
            Method::Ft => "ft",
            Method::Kd => "kd",
            Method::At => "at",
            Method::FtKd => "ft+kd",
            Method::AtKd => "at+kd",
        }
    }

    pub fn uses_ft(&self) -> bool {
        matches!(self, Method::Ft | Method::FtKd)
    }

    pub fn uses_kd(&self) -> bool {
        matches!(self, Method::Kd | Method::FtKd | Method::AtKd)
    }

    pub fn uses_at(&self) -> bool {
        matches!(self, Method::At | Method::AtKd)
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Method::Scratch)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scalar loss terms available for composition.
pub struct LossParts<T: Scalar> {
    pub cls: Tensor<T>,
    pub ft: Option<Tensor<T>>,
    pub kd: Option<Tensor<T>>,
    pub at: Option<Tensor<T>>,
    pub beta: f64,
    pub at_beta: f64,
}

/// Total objective for a method. KD enters hybrids with weight one;
/// the feature-matching terms carry their own weights.
pub fn compose_total<T: Scalar>(method: Method, parts: &LossParts<T>) -> Result<Tensor<T>> {
    let need = |part: &Option<Tensor<T>>, what: &str| -> Result<Tensor<T>> {
        part.clone()
            .ok_or_else(|| crate::error::Error::Config(format!("method {method} requires {what}")))
    };
    let mut total = parts.cls.clone();
    if method.uses_ft() {
        let ft = need(&parts.ft, "a factor-transfer term")?;
        total = total.add(&ft.scale(parts.beta))?;
    }
    if method.uses_at() {
        let at = need(&parts.at, "an attention-transfer term")?;
        total = total.add(&at.scale(parts.at_beta))?;
    }
    if method.uses_kd() {
        let kd = need(&parts.kd, "a distillation term")?;
        total = total.add(&kd)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn reconstruction_examples() {
        let x = t(vec![1.0, 2.0], &[2]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap().item(), 0.0);
        let px = t(vec![0.0, 0.0], &[2]);
        assert_eq!(reconstruction_loss(&x, &px).unwrap().item(), 5.0);
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let logits = t(vec![0.0; 10], &[1, 10]);
        let ce = cross_entropy(&logits, &[3]).unwrap().item();
        assert!((ce - 10f64.ln()).abs() < 1e-12);

        let mut conf = vec![0.0; 10];
        conf[7] = 1000.0;
        let ce = cross_entropy(&t(conf, &[1, 10]), &[7]).unwrap().item();
        assert!(ce.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = t(vec![0.0; 4], &[2, 2]);
        assert!(cross_entropy(&logits, &[0, 2]).is_err());
    }

    #[test]
    fn factor_transfer_unit_vectors() {
        let ft = t(vec![1.0, 0.0], &[2]);
        let fs = t(vec![0.0, 1.0], &[2]);
        let l1 = factor_transfer_loss(&ft, &fs, NormP::L1).unwrap().item();
        assert!((l1 - 2.0).abs() < 1e-12);
        let l2 = factor_transfer_loss(&ft, &fs, NormP::L2).unwrap().item();
        assert!((l2 - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            factor_transfer_loss(&ft, &ft, NormP::L1).unwrap().item(),
            0.0
        );
    }

    #[test]
    fn factor_transfer_positive_scale_invariance() {
        let ft = t(vec![0.3, -1.2, 0.7, 2.0], &[1, 4]);
        let fs = t(vec![1.0, 0.4, -0.5, 0.1], &[1, 4]);
        let base = factor_transfer_loss(&ft, &fs, NormP::L1).unwrap().item();
        let scaled = t(fs.to_vec().iter().map(|v| v * 7.3).collect(), &[1, 4]);
        let l = factor_transfer_loss(&ft, &scaled, NormP::L1).unwrap().item();
        assert!((base - l).abs() < 1e-6);
        // negative scaling flips the normalized vector
        let neg = t(fs.to_vec().iter().map(|v| v * -7.3).collect(), &[1, 4]);
        let ln = factor_transfer_loss(&ft, &neg, NormP::L1).unwrap().item();
        assert!((base - ln).abs() > 1e-3);
    }

    #[test]
    fn student_loss_arithmetic() {
        let cls = t(vec![2.0], &[1]);
        let ft = t(vec![0.004], &[1]);
        let total = student_loss(&cls, &ft, 500.0).unwrap().item();
        assert!((total - 4.0).abs() < 1e-12);
        assert_eq!(student_loss(&cls, &ft, 0.0).unwrap().item(), 2.0);
        assert!(student_loss(&cls, &ft, -1.0).is_err());
    }

    #[test]
    fn kd_zero_for_identical_logits() {
        let s = t(vec![1.0, -0.5, 0.3, 2.0, -1.0, 0.0], &[2, 3]);
        let l = kd_loss(&s, &s, 4.0).unwrap().item();
        assert!(l.abs() < 1e-12);
        assert!(kd_loss(&s, &s, 0.0).is_err());
    }

    #[test]
    fn softened_softmax_temperature_identity() {
        // probs of [4, 0] at T = 4 equal probs of [1, 0] at T = 1
        let a = t(vec![4.0, 0.0], &[1, 2]).softmax_t(4.0).unwrap().to_vec();
        let b = t(vec![1.0, 0.0], &[1, 2]).softmax_t(1.0).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_map_properties() {
        // two channels [a] and [-a] produce the same sign-independent map
        let f = t(vec![1.0, -2.0, 3.0, 0.5, -1.0, 2.0, -3.0, -0.5], &[1, 2, 2, 2]);
        let m = attention_map(&f).unwrap();
        assert_eq!(m.shape(), &[1, 4]);
        let norm: f64 = m.to_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn at_loss_unit_vectors_and_additivity() {
        // maps [1,0] vs [0,1] come from single-pixel-channel features
        let s = t(vec![1.0, 0.0], &[1, 1, 1, 2]);
        let te = t(vec![0.0, 1.0], &[1, 1, 1, 2]);
        let single = at_loss(&[s.clone()], &[te.clone()]).unwrap().item();
        assert!((single - 2f64.sqrt()).abs() < 1e-9);
        let identical = at_loss(&[te.clone()], &[te.clone()]).unwrap().item();
        assert_eq!(identical, 0.0);
        let triple = at_loss(
            &[s.clone(), s.clone(), s.clone()],
            &[te.clone(), te.clone(), te.clone()],
        )
        .unwrap()
        .item();
        assert!((triple - 3.0 * single).abs() < 1e-9);
    }

    #[test]
    fn at_loss_rejects_spatial_mismatch() {
        let s = t(vec![1.0, 0.0], &[1, 1, 1, 2]);
        let te = t(vec![0.0, 1.0, 0.0], &[1, 1, 1, 3]);
        assert!(at_loss(&[s], &[te]).is_err());
    }

    #[test]
    fn compose_total_methods() {
        let cls = t(vec![1.0], &[1]);
        let ft = t(vec![0.01], &[1]);
        let kd = t(vec![0.2], &[1]);
        let at = t(vec![0.003], &[1]);
        let parts = LossParts {
            cls: cls.clone(),
            ft: Some(ft),
            kd: Some(kd),
            at: Some(at),
            beta: 500.0,
            at_beta: 1000.0,
        };
        assert_eq!(compose_total(Method::Scratch, &parts).unwrap().item(), 1.0);
        assert!((compose_total(Method::Ft, &parts).unwrap().item() - 6.0).abs() < 1e-12);
        assert!((compose_total(Method::Kd, &parts).unwrap().item() - 1.2).abs() < 1e-12);
        assert!((compose_total(Method::At, &parts).unwrap().item() - 4.0).abs() < 1e-12);
        assert!((compose_total(Method::FtKd, &parts).unwrap().item() - 6.2).abs() < 1e-12);
        assert!((compose_total(Method::AtKd, &parts).unwrap().item() - 4.2).abs() < 1e-12);

        let missing = LossParts {
            cls,
            ft: None,
            kd: None,
            at: None,
            beta: 500.0,
            at_beta: 1000.0,
        };
        assert!(compose_total(Method::Ft, &missing).is_err());
        assert!(compose_total(Method::Scratch, &missing).is_ok());
    }

    #[test]
    fn method_tags_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("fitnet").is_err());
    }
}
