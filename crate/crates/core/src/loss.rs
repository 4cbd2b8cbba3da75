//! Latent distances, self-supervision, adversarial and cycle-consistency
//! losses, in plain scalar form and as graph ops for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub alpha: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 5.0,
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 1.0,
            alpha: 1.4,
            w1: 1.0,
            w2: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        let named = [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
            ("w1", self.w1),
            ("w2", self.w2),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Self-supervision weight for stream `k`'s own-domain term.
    pub fn ss_weight(&self, k: usize) -> f64 {
        if k == 0 {
            self.lambda1
        } else {
            self.lambda2
        }
    }

    /// Cycle weight for stream `k`'s re-separation term.
    pub fn cc_weight(&self, k: usize) -> f64 {
        if k == 0 {
            self.lambda5
        } else {
            self.lambda6
        }
    }

    /// All term weights zeroed, leaving `alpha` and the outer weights.
    pub fn zeroed(self) -> Self {
        LossWeights {
            lambda0: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            lambda5: 0.0,
            lambda6: 0.0,
            ..self
        }
    }
}

/// Per-step loss components. Index 0 of the per-layer vectors is `y`,
/// index 1 is `z`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ss: f64,
    pub gan: Vec<f64>,
    pub cc_x: f64,
    pub cc: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn gan_y(&self) -> f64 {
        self.gan[0]
    }

    pub fn gan_z(&self) -> f64 {
        self.gan[1]
    }

    pub fn cc_y(&self) -> f64 {
        self.cc[0]
    }

    pub fn cc_z(&self) -> f64 {
        self.cc[1]
    }

    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        total_loss(self.ss, self.gan.iter().sum(), self.cc_x + self.cc.iter().sum::<f64>(), w.w1, w.w2)
    }

    pub fn is_finite(&self) -> bool {
        self.ss.is_finite()
            && self.cc_x.is_finite()
            && self.total.is_finite()
            && self.gan.iter().chain(&self.cc).all(|v| v.is_finite())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidInput(format!(
            "latent shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Intra-domain distance: mean absolute difference.
pub fn d_phi(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// The inter-domain squashing applied to a mean absolute distance.
pub fn d_psi_of_distance(distance: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let g = -(distance - alpha * alpha.exp()) / (alpha * alpha);
    Ok(1.0 / (1.0 + g.exp()))
}

/// Inter-domain distance in `(0, 1)`, `0.5` at distance `alpha * e^alpha`.
pub fn d_psi(a: &Tensor, b: &Tensor, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    d_psi_of_distance(d_phi(a, b)?, alpha)
}

/// Two-layer self-supervision.
pub fn loss_ss(fy_x: &Tensor, fy_y: &Tensor, fz_x: &Tensor, fz_z: &Tensor, w: &LossWeights) -> Result<f64> {
    loss_ss_multi(&[fy_x.clone(), fz_x.clone()], &[fy_y.clone(), fz_z.clone()], w)
}

/// `x_codes[k]` is stream `k`'s code of the blend and `own_codes[k]` its
/// code of a layer-`k` sample. The inter-domain term averages over pairs.
pub fn loss_ss_multi(x_codes: &[Tensor], own_codes: &[Tensor], w: &LossWeights) -> Result<f64> {
    if x_codes.len() != own_codes.len() || x_codes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need matching code lists of at least two streams, got {} and {}",
            x_codes.len(),
            own_codes.len()
        )));
    }
    let mut total = 0.0;
    for (k, (fx, fo)) in x_codes.iter().zip(own_codes).enumerate() {
        total += w.ss_weight(k) * d_phi(fo, fx)?;
    }
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..x_codes.len() {
        for j in i + 1..x_codes.len() {
            inter += 1.0 - d_psi(&x_codes[i], &x_codes[j], w.alpha)?;
            pairs += 1;
        }
    }
    Ok(total + w.lambda3 * inter / pairs as f64)
}

fn check_score(name: &str, s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidInput(format!("{name} score {s} is outside (0, 1)")));
    }
    Ok(())
}

/// `-lambda0 * (log d_real + log(1 - d_fake))`.
pub fn loss_gan_discriminator(d_real: f64, d_fake: f64, lambda0: f64) -> Result<f64> {
    check_score("real", d_real)?;
    check_score("fake", d_fake)?;
    Ok(-lambda0 * (d_real.ln() + (1.0 - d_fake).ln()))
}

/// Non-saturating generator loss `-lambda0 * log d_fake`.
pub fn loss_gan_generator(d_fake: f64, lambda0: f64) -> Result<f64> {
    check_score("fake", d_fake)?;
    Ok(-lambda0 * d_fake.ln())
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Cycle terms `(cc_x, cc_y, cc_z)` for two layers.
pub fn loss_cc(x: &Image, y_p: &Image, z_p: &Image, y_pp: &Image, z_pp: &Image, w: &LossWeights) -> Result<(f64, f64, f64)> {
    let (cc_x, cc) = loss_cc_multi(x, &[y_p.clone(), z_p.clone()], &[y_pp.clone(), z_pp.clone()], w)?;
    Ok((cc_x, cc[0], cc[1]))
}

/// `cc_x = lambda4 * |sum(preds) - x|`, and per layer the distance between
/// the re-separated and the first prediction.
pub fn loss_cc_multi(x: &Image, preds: &[Image], repreds: &[Image], w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    if preds.len() != repreds.len() || preds.is_empty() {
        return Err(Error::InvalidInput("prediction lists differ in length".into()));
    }
    for img in preds.iter().chain(repreds) {
        if !img.same_dims(x) {
            return Err(Error::InvalidInput(format!(
                "image dims {:?} differ from the input's {:?}",
                img.dims(),
                x.dims()
            )));
        }
    }
    let mut sum = vec![0.0; x.data().len()];
    for p in preds {
        for (s, v) in sum.iter_mut().zip(p.data()) {
            *s += v;
        }
    }
    let cc_x = w.lambda4 * mean_abs(&sum, x.data());
    let cc = preds
        .iter()
        .zip(repreds)
        .enumerate()
        .map(|(k, (p, r))| w.cc_weight(k) * mean_abs(r.data(), p.data()))
        .collect();
    Ok((cc_x, cc))
}

/// `w1 * ss + gan + w2 * cc`.
pub fn total_loss(ss: f64, gan: f64, cc: f64, w1: f64, w2: f64) -> f64 {
    w1 * ss + gan + w2 * cc
}

/// Graph counterparts of the losses above; GAN terms take logits and use
/// `softplus` so they stay finite at saturated scores.
pub mod graph {
    use super::*;

    pub fn d_phi(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::InvalidInput(format!(
                "latent shapes differ: {:?} vs {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        g.mean_abs_diff(a, b)
    }

    pub fn d_psi(g: &mut Graph, a: Var, b: Var, alpha: f64) -> Result<Var> {
        check_alpha(alpha)?;
        let d = d_phi(g, a, b)?;
        let d = g.scale(d, 1.0 / (alpha * alpha));
        let d = g.add_scalar(d, -alpha.exp() / alpha);
        Ok(g.sigmoid(d))
    }

    pub fn loss_ss(g: &mut Graph, x_codes: &[Var], own_codes: &[Var], w: &LossWeights) -> Result<Var> {
        if x_codes.len() != own_codes.len() || x_codes.len() < 2 {
            return Err(Error::InvalidInput("need matching code lists of at least two streams".into()));
        }
        let mut terms = Vec::new();
        for (k, (&fx, &fo)) in x_codes.iter().zip(own_codes).enumerate() {
            let d = d_phi(g, fo, fx)?;
            terms.push(g.scale(d, w.ss_weight(k)));
        }
        let n_pairs = x_codes.len() * (x_codes.len() - 1) / 2;
        let c = w.lambda3 / n_pairs as f64;
        for i in 0..x_codes.len() {
            for j in i + 1..x_codes.len() {
                let p = d_psi(g, x_codes[i], x_codes[j], w.alpha)?;
                let p = g.scale(p, -c);
                terms.push(g.add_scalar(p, c));
            }
        }
        sum(g, &terms)
    }

    /// Mean over the batch of `-lambda0 * log sigmoid(logit)`.
    pub fn gan_generator(g: &mut Graph, fake_logit: Var, lambda0: f64) -> Var {
        let neg = g.scale(fake_logit, -1.0);
        let sp = g.softplus(neg);
        let m = g.mean(sp);
        g.scale(m, lambda0)
    }

    /// Mean over the batch of `-lambda0 * (log D(real) + log(1 - D(fake)))`.
    pub fn gan_discriminator(g: &mut Graph, real_logit: Var, fake_logit: Var, lambda0: f64) -> Result<Var> {
        let neg = g.scale(real_logit, -1.0);
        let r = g.softplus(neg);
        let r = g.mean(r);
        let f = g.softplus(fake_logit);
        let f = g.mean(f);
        let s = g.add(r, f)?;
        Ok(g.scale(s, lambda0))
    }

    /// Returns `(cc_x, per-layer cc)`.
    pub fn loss_cc(g: &mut Graph, x: Var, preds: &[Var], repreds: &[Var], w: &LossWeights) -> Result<(Var, Vec<Var>)> {
        if preds.len() != repreds.len() || preds.is_empty() {
            return Err(Error::InvalidInput("prediction lists differ in length".into()));
        }
        let recomposed = sum(g, preds)?;
        let cx = g.mean_abs_diff(recomposed, x)?;
        let cc_x = g.scale(cx, w.lambda4);
        let mut cc = Vec::with_capacity(preds.len());
        for (k, (&p, &r)) in preds.iter().zip(repreds).enumerate() {
            let d = g.mean_abs_diff(r, p)?;
            cc.push(g.scale(d, w.cc_weight(k)));
        }
        Ok((cc_x, cc))
    }

    pub fn sum(g: &mut Graph, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidInput("empty sum".into()))?;
        rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RangeTag;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([1, v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn d_phi_examples() {
        let a = t(&[0.0; 4]);
        let b = t(&[1.0; 4]);
        assert_eq!(d_phi(&a, &a).unwrap(), 0.0);
        assert_eq!(d_phi(&a, &b).unwrap(), 1.0);
        assert!(matches!(d_phi(&a, &t(&[0.0; 3])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn d_psi_examples() {
        let alpha: f64 = 1.4;
        let mid = alpha * alpha.exp();
        assert!((mid - 5.677_279_953_582_544).abs() < 1e-6);
        let a = t(&[0.0; 3]);
        let b = t(&[mid; 3]);
        assert!((d_psi(&a, &b, alpha).unwrap() - 0.5).abs() < 1e-9);
        // 1 / (1 + e^{e^1.4 / 1.4}) evaluated independently
        assert!((d_psi(&a, &a, alpha).unwrap() - 0.052_323_311_250_524).abs() < 1e-6);
        assert!(matches!(d_psi(&a, &a, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(d_psi(&a, &a, -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn loss_ss_examples() {
        let w = LossWeights::default();
        let c = t(&[0.3, -0.2]);
        let v = loss_ss(&c, &c, &c, &c, &w).unwrap();
        assert!((v - (1.0 - 0.052_323_311_250_524)).abs() < 1e-6);
        let far = t(&[1e6, 1e6]);
        assert!(loss_ss(&c, &c, &far, &far, &w).unwrap() < 1e-12);

        let w3 = LossWeights { lambda3: 3.0, ..w };
        let fy_x = t(&[0.1, 0.4]);
        let fy_y = t(&[0.3, 0.1]);
        let base = loss_ss(&fy_x, &fy_y, &c, &c, &w).unwrap();
        let scaled = loss_ss(&fy_x, &fy_y, &c, &c, &w3).unwrap();
        let third = 1.0 - d_psi(&fy_x, &c, w.alpha).unwrap();
        assert!((scaled - base - 2.0 * third).abs() < 1e-12);
    }

    #[test]
    fn gan_examples() {
        let d = loss_gan_discriminator(0.5, 0.5, 5.0).unwrap();
        assert!((d - 10.0 * 2f64.ln()).abs() < 1e-9);
        assert_eq!(loss_gan_discriminator(0.3, 0.8, 0.0).unwrap(), 0.0);
        assert_eq!(loss_gan_generator(0.3, 0.0).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let v = loss_gan_generator(i as f64 / 100.0, 5.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(loss_gan_generator(1.0, 5.0).is_err());
        assert!(loss_gan_discriminator(0.0, 0.5, 5.0).is_err());
    }

    fn img(v: f64) -> Image {
        Image::filled(2, 2, 3, v, RangeTag::Linear).unwrap()
    }

    #[test]
    fn cc_examples() {
        let w = LossWeights::default();
        let (cx, cy, cz) = loss_cc(&img(0.7), &img(0.3), &img(0.4), &img(0.3), &img(0.4), &w).unwrap();
        assert!(cx.abs() < 1e-15 && cy == 0.0 && cz == 0.0);

        let w10 = LossWeights {
            lambda4: 10.0,
            lambda5: 10.0,
            lambda6: 10.0,
            ..w
        };
        let (cx, cy, cz) = loss_cc(&img(0.71), &img(0.3), &img(0.4), &img(0.31), &img(0.39), &w10).unwrap();
        for v in [cx, cy, cz] {
            assert!((v - 0.1).abs() < 1e-12, "{v}");
        }
        let small = Image::filled(1, 2, 3, 0.0, RangeTag::Linear).unwrap();
        assert!(loss_cc(&img(0.7), &small, &img(0.4), &img(0.3), &img(0.4), &w).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 1.0, 1.0), 6.0);
        assert_eq!(total_loss(123.0, 2.0, 3.0, 0.0, 10.0), 32.0);
        let w = LossWeights::default();
        assert_eq!((w.w1, w.w2), (1.0, 10.0));
        assert!(LossWeights { alpha: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { lambda3: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn graph_losses_match_scalar_forms() {
        let w = LossWeights::default();
        let codes: Vec<Tensor> = (0..4)
            .map(|i| t(&[0.1 * i as f64, -0.3 + i as f64, 2.0 - 0.5 * i as f64]))
            .collect();
        let scalar = loss_ss(&codes[0], &codes[1], &codes[2], &codes[3], &w).unwrap();
        let mut g = Graph::default();
        let v: Vec<Var> = codes.iter().map(|c| g.constant(c.clone())).collect();
        let s = graph::loss_ss(&mut g, &[v[0], v[2]], &[v[1], v[3]], &w).unwrap();
        assert!((g.scalar(s) - scalar).abs() < 1e-12);

        let real = g.constant(Tensor::new([2, 1, 1, 1], vec![0.3, -1.2]).unwrap());
        let fake = g.constant(Tensor::new([2, 1, 1, 1], vec![2.0, 0.1]).unwrap());
        let gd = graph::gan_discriminator(&mut g, real, fake, 5.0).unwrap();
        let gg = graph::gan_generator(&mut g, fake, 5.0);
        let sig = crate::graph::sigmoid;
        let expect_d = (loss_gan_discriminator(sig(0.3), sig(2.0), 5.0).unwrap()
            + loss_gan_discriminator(sig(-1.2), sig(0.1), 5.0).unwrap())
            / 2.0;
        let expect_g = (loss_gan_generator(sig(2.0), 5.0).unwrap() + loss_gan_generator(sig(0.1), 5.0).unwrap()) / 2.0;
        assert!((g.scalar(gd) - expect_d).abs() < 1e-12);
        assert!((g.scalar(gg) - expect_g).abs() < 1e-12);

        // saturated logits stay finite
        let huge = g.constant(Tensor::full([1, 1, 1, 1], -800.0));
        let sat = graph::gan_generator(&mut g, huge, 5.0);
        assert!((g.scalar(sat) - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn zero_lambda3_removes_the_inter_gradient() {
        let w = LossWeights {
            lambda3: 0.0,
            ..LossWeights::default()
        };
        let mut g = Graph::default();
        let a = g.param(t(&[0.5, 1.0]));
        let b = g.param(t(&[0.1, -1.0]));
        let own_a = g.constant(t(&[0.5, 1.0]));
        let own_b = g.constant(t(&[0.1, -1.0]));
        let s = graph::loss_ss(&mut g, &[a, b], &[own_a, own_b], &w).unwrap();
        // own codes coincide with the blend codes, so only the inter term
        // could contribute; with lambda3 = 0 nothing is left
        let grads = g.grad(s, &[a, b]).unwrap();
        assert!(g.value(grads[0]).data().iter().all(|&v| v == 0.0));
        assert!(g.value(grads[1]).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn d_psi_is_bounded_and_increasing(alpha in 0.05f64..5.0, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            // keep the squashed argument within +-30 so f64 does not round to 0 or 1
            let mid = alpha * alpha.exp();
            let lo_d = (mid - 30.0 * alpha * alpha).max(0.0);
            let span = mid + 30.0 * alpha * alpha - lo_d;
            let (d0, d1) = (lo_d + span * u.min(v), lo_d + span * u.max(v));
            let p0 = d_psi_of_distance(d0, alpha).unwrap();
            let p1 = d_psi_of_distance(d1, alpha).unwrap();
            prop_assert!(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0);
            if d1 > d0 {
                prop_assert!(p1 > p0);
            }
        }

        #[test]
        fn d_phi_is_symmetric(v in proptest::collection::vec(-10.0f64..10.0, 8), u in proptest::collection::vec(-10.0f64..10.0, 8)) {
            let (a, b) = (t(&v), t(&u));
            prop_assert_eq!(d_phi(&a, &b).unwrap(), d_phi(&b, &a).unwrap());
        }

        #[test]
        fn report_total_matches_components(ss in 0.0f64..5.0, gy in 0.0f64..5.0, gz in 0.0f64..5.0, cx in 0.0f64..1.0, cy in 0.0f64..1.0, cz in 0.0f64..1.0) {
            let w = LossWeights::default();
            let r = LossReport { ss, gan: vec![gy, gz], cc_x: cx, cc: vec![cy, cz], total: 0.0 };
            let direct = w.w1 * ss + gy + gz + w.w2 * (cx + cy + cz);
            prop_assert!((r.weighted_total(&w) - direct).abs() < 1e-12);
        }
    }
}
