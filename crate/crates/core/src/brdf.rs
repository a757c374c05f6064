//! Cook-Torrance reflectance: a Lambertian lobe `ρd/π` plus a microfacet
//! lobe `ρs·D·G·F / (4 (n·wi)(n·wo))`.
//!
//! The microfacet terms are written over [`Scalar`] and expressed through
//! three cosines (`n·wi`, `n·wo`, `wi·wo`), so the same code serves plain
//! evaluation, roughness derivatives and the geometry derivative replay.

use std::f64::consts::{FRAC_1_PI, FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::math::{Frame, Vec3};
use crate::scalar::{Dual, Scalar};
use crate::spectrum::Spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Beckmann,
    #[default]
    Ggx,
}

/// Reflectance parameters at a surface point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialSample {
    pub rho_d: Spectrum,
    pub rho_s: Spectrum,
    pub alpha: f64,
    pub f0: f64,
    pub distribution: Distribution,
}

/// Microfacet normal density as a function of `cos θh = n·h`.
pub fn distribution_cos<S: Scalar>(dist: Distribution, alpha: S, cos_h: S) -> S {
    if cos_h.value() <= 0.0 {
        return S::cst(0.0);
    }
    let a2 = alpha * alpha;
    let c2 = cos_h * cos_h;
    let d = match dist {
        Distribution::Beckmann => {
            let tan2 = (S::cst(1.0) - c2) / c2;
            (-(tan2 / a2)).exp() / (a2 * c2 * c2).scale(PI)
        }
        Distribution::Ggx => {
            let t = c2 * (a2 - S::cst(1.0)) + S::cst(1.0);
            a2 / (t * t).scale(PI)
        }
    };
    if d.is_finite() {
        d
    } else {
        S::cst(0.0)
    }
}

/// Monodirectional Smith shadowing for a direction with `cos θ = n·w`.
pub fn smith_g1<S: Scalar>(dist: Distribution, alpha: S, cos: S) -> S {
    let c = cos.value();
    if c <= 0.0 {
        return S::cst(0.0);
    }
    match dist {
        Distribution::Ggx => {
            let a2 = alpha * alpha;
            let root = (a2 + (S::cst(1.0) - a2) * cos * cos).sqrt();
            cos.scale(2.0) / (cos + root)
        }
        Distribution::Beckmann => {
            let s2 = S::cst(1.0) - cos * cos;
            if s2.value() <= 0.0 {
                return S::cst(1.0);
            }
            // Rational approximation of the Beckmann Smith term.
            let a = cos / (alpha * s2.sqrt());
            if a.value() >= 1.6 {
                S::cst(1.0)
            } else {
                let num = a.scale(3.535) + (a * a).scale(2.181);
                let den = S::cst(1.0) + a.scale(2.276) + (a * a).scale(2.577);
                num / den
            }
        }
    }
}

/// Schlick Fresnel for `cos = h·wi`.
pub fn fresnel_schlick<S: Scalar>(f0: f64, cos: S) -> S {
    let c = cos.max_val(S::cst(0.0));
    let m = S::cst(1.0) - c;
    let m2 = m * m;
    S::cst(f0) + (m2 * m2 * m).scale(1.0 - f0)
}

/// `D·G·F / (4 (n·wi)(n·wo))`, the specular lobe without its albedo, from
/// the three cosines `n·wi`, `n·wo`, `wi·wo`. Zero below either horizon.
pub fn specular_factor<S: Scalar>(
    dist: Distribution,
    alpha: S,
    f0: f64,
    cos_i: S,
    cos_o: S,
    cos_io: S,
) -> S {
    if cos_i.value() <= 0.0 || cos_o.value() <= 0.0 {
        return S::cst(0.0);
    }
    let half_len = (S::cst(2.0) + cos_io.scale(2.0)).sqrt();
    let cos_h = (cos_i + cos_o) / half_len;
    let cos_hi = (S::cst(1.0) + cos_io) / half_len;
    let d = distribution_cos(dist, alpha, cos_h);
    let g = smith_g1(dist, alpha, cos_i) * smith_g1(dist, alpha, cos_o);
    let f = fresnel_schlick(f0, cos_hi);
    let out = d * g * f / (cos_i * cos_o).scale(4.0);
    if out.is_finite() {
        out
    } else {
        S::cst(0.0)
    }
}

/// Spectral BRDF from cosines. Zero below either horizon.
pub fn eval_cos(mat: &MaterialSample, cos_i: f64, cos_o: f64, cos_io: f64) -> Spectrum {
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return Spectrum::ZERO;
    }
    let spec = specular_factor(mat.distribution, mat.alpha, mat.f0, cos_i, cos_o, cos_io);
    mat.rho_d * FRAC_1_PI + mat.rho_s * spec
}

/// `fr(x, wi, wo)`. `wi` points toward the light, `wo` toward the viewer.
pub fn eval_brdf(mat: &MaterialSample, frame: &Frame, wi: Vec3, wo: Vec3) -> Spectrum {
    eval_cos(mat, frame.normal.dot(wi), frame.normal.dot(wo), wi.dot(wo))
}

pub fn microfacet_d(dist: Distribution, alpha: f64, frame: &Frame, h: Vec3) -> f64 {
    distribution_cos(dist, alpha, frame.normal.dot(h))
}

/// Separable Smith shadowing-masking `G1(wi)·G1(wo)`.
pub fn smith_g(dist: Distribution, alpha: f64, frame: &Frame, wi: Vec3, wo: Vec3) -> f64 {
    smith_g1(dist, alpha, frame.normal.dot(wi)) * smith_g1(dist, alpha, frame.normal.dot(wo))
}

pub fn fresnel(f0: f64, h: Vec3, wi: Vec3) -> f64 {
    fresnel_schlick(f0, h.dot(wi))
}

/// Cosine-weighted hemisphere sample about the frame normal via the
/// concentric disk mapping. Returns the world direction and its density
/// `cos θ / π`; the density is zero only on the exact horizon.
pub fn sample_cosine_hemisphere(frame: &Frame, u1: f64, u2: f64) -> (Vec3, f64) {
    let local = cosine_hemisphere_local(u1, u2);
    (frame.to_world(local), local.z / PI)
}

fn cosine_hemisphere_local(u1: f64, u2: f64) -> Vec3 {
    let a = 2.0 * u1 - 1.0;
    let b = 2.0 * u2 - 1.0;
    let (x, y) = if a == 0.0 && b == 0.0 {
        (0.0, 0.0)
    } else if a.abs() > b.abs() {
        let phi = FRAC_PI_4 * (b / a);
        (a * phi.cos(), a * phi.sin())
    } else {
        let phi = FRAC_PI_2 - FRAC_PI_4 * (a / b);
        (b * phi.cos(), b * phi.sin())
    };
    let z = (1.0 - x * x - y * y).max(0.0).sqrt();
    Vec3::new(x, y, z)
}

/// Partial derivatives of the BRDF with respect to its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrdfGradient {
    /// `∂fr_c/∂ρd_c` per channel.
    pub d_rho_d: [f64; 3],
    /// `∂fr_c/∂ρs_c` per channel.
    pub d_rho_s: [f64; 3],
    pub d_alpha: Spectrum,
}

impl BrdfGradient {
    pub const ZERO: BrdfGradient = BrdfGradient {
        d_rho_d: [0.0; 3],
        d_rho_s: [0.0; 3],
        d_alpha: Spectrum::ZERO,
    };
}

pub fn d_brdf_d_params_cos(mat: &MaterialSample, cos_i: f64, cos_o: f64, cos_io: f64) -> BrdfGradient {
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return BrdfGradient::ZERO;
    }
    let alpha = Dual::<1>::variable(mat.alpha, 0);
    let c = Dual::<1>::constant;
    let spec = specular_factor(mat.distribution, alpha, mat.f0, c(cos_i), c(cos_o), c(cos_io));
    BrdfGradient {
        d_rho_d: [FRAC_1_PI; 3],
        d_rho_s: [spec.v; 3],
        d_alpha: mat.rho_s * spec.d[0],
    }
}

pub fn d_brdf_d_params(mat: &MaterialSample, frame: &Frame, wi: Vec3, wo: Vec3) -> BrdfGradient {
    d_brdf_d_params_cos(mat, frame.normal.dot(wi), frame.normal.dot(wo), wi.dot(wo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rho_d: Spectrum, rho_s: Spectrum, alpha: f64, dist: Distribution) -> MaterialSample {
        MaterialSample {
            rho_d,
            rho_s,
            alpha,
            f0: 0.04,
            distribution: dist,
        }
    }

    fn up() -> Frame {
        Frame::from_normal(Vec3::Z)
    }

    fn random_upper(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            );
            let l = v.length();
            if l > 0.1 && l <= 1.0 && v.z > 0.05 {
                return v / l;
            }
        }
    }

    #[test]
    fn lambertian_value_is_albedo_over_pi() {
        let m = mat(Spectrum::new(1.0, 0.0, 0.0), Spectrum::ZERO, 0.1, Distribution::Ggx);
        let wi = Vec3::new(0.3, 0.1, 0.9).normalize();
        let wo = Vec3::new(-0.5, 0.2, 0.7).normalize();
        let f = eval_brdf(&m, &up(), wi, wo);
        assert!((f.r - 0.318_309_886_183_790_7).abs() < 1e-15);
        assert_eq!((f.g, f.b), (0.0, 0.0));
    }

    #[test]
    fn below_horizon_is_black() {
        let m = mat(Spectrum::ONE * 0.5, Spectrum::ONE * 0.5, 0.1, Distribution::Ggx);
        let wi = Vec3::new(0.866, 0.0, -0.5);
        assert_eq!(eval_brdf(&m, &up(), wi, Vec3::Z), Spectrum::ZERO);
        assert_eq!(d_brdf_d_params(&m, &up(), wi, Vec3::Z), BrdfGradient::ZERO);
    }

    #[test]
    fn peak_density_at_normal() {
        for dist in [Distribution::Beckmann, Distribution::Ggx] {
            let d = microfacet_d(dist, 0.1, &up(), Vec3::Z);
            assert!((d - 31.830_988_618_379_07).abs() < 1e-10, "{dist:?}: {d}");
            assert_eq!(microfacet_d(dist, 0.1, &up(), Vec3::X), 0.0);
        }
    }

    /// Scalar reference written directly from the textbook formulas.
    fn reference_specular(alpha: f64, f0: f64, n: Vec3, wi: Vec3, wo: Vec3) -> f64 {
        let h = (wi + wo).normalize();
        let nh = n.dot(h);
        let d = alpha * alpha / (PI * (nh * nh * (alpha * alpha - 1.0) + 1.0).powi(2));
        let g1 = |c: f64| 2.0 * c / (c + (alpha * alpha + (1.0 - alpha * alpha) * c * c).sqrt());
        let g = g1(n.dot(wi)) * g1(n.dot(wo));
        let f = f0 + (1.0 - f0) * (1.0 - h.dot(wi).max(0.0)).powi(5);
        d * g * f / (4.0 * n.dot(wi) * n.dot(wo))
    }

    #[test]
    fn specular_lobe_matches_scalar_reference() {
        let m = mat(Spectrum::ZERO, Spectrum::ONE, 0.1, Distribution::Ggx);
        let f = eval_brdf(&m, &up(), Vec3::Z, Vec3::Z);
        let want = reference_specular(0.1, 0.04, Vec3::Z, Vec3::Z, Vec3::Z);
        assert!((want - 31.830_988_618_379_07 * 0.04 / 4.0).abs() < 1e-9);
        assert!((f.r - want).abs() < 1e-12 * want);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (wi, wo) = (random_upper(&mut rng), random_upper(&mut rng));
            let alpha = rng.random_range(0.05..1.0);
            let m = mat(Spectrum::ZERO, Spectrum::ONE, alpha, Distribution::Ggx);
            let got = eval_brdf(&m, &up(), wi, wo).g;
            let want = reference_specular(alpha, 0.04, Vec3::Z, wi, wo);
            assert!((got - want).abs() <= 1e-10 * want.max(1e-6), "{got} vs {want}");
        }
    }

    #[test]
    fn smith_terms() {
        for dist in [Distribution::Beckmann, Distribution::Ggx] {
            assert!((smith_g(dist, 0.3, &up(), Vec3::Z, Vec3::Z) - 1.0).abs() < 1e-12);
        }
        let grazing = Vec3::new(1.0, 0.0, 1e-9).normalize();
        assert!(smith_g(Distribution::Ggx, 0.5, &up(), Vec3::Z, grazing) < 1e-8);
        let c = 0.5;
        let a: f64 = 0.3;
        let want = 2.0 * c / (c + (a * a + (1.0 - a * a) * c * c).sqrt());
        assert!((smith_g1(Distribution::Ggx, a, c) - want).abs() < 1e-15);
    }

    #[test]
    fn schlick_endpoints() {
        assert_eq!(fresnel(0.04, Vec3::Z, Vec3::Z), 0.04);
        assert_eq!(fresnel(0.04, Vec3::Z, Vec3::X), 1.0);
        assert!((fresnel_schlick(0.04, 0.5) - 0.07).abs() < 1e-15);
    }

    #[test]
    fn reciprocity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dist in [Distribution::Beckmann, Distribution::Ggx] {
            let m = mat(Spectrum::new(0.2, 0.3, 0.4), Spectrum::new(0.5, 0.4, 0.3), 0.2, dist);
            for _ in 0..500 {
                let (wi, wo) = (random_upper(&mut rng), random_upper(&mut rng));
                assert_eq!(eval_brdf(&m, &up(), wi, wo), eval_brdf(&m, &up(), wo, wi));
            }
        }
    }

    #[test]
    fn outputs_are_finite_at_grazing() {
        let dirs = [
            Vec3::Z,
            Vec3::X,
            -Vec3::X,
            Vec3::new(1.0, 0.0, 1e-300).normalize(),
            Vec3::new(0.0, 1.0, f64::MIN_POSITIVE),
            Vec3::new(0.6, 0.0, 0.8),
            Vec3::new(-0.6, 0.0, 0.8),
        ];
        for dist in [Distribution::Beckmann, Distribution::Ggx] {
            for alpha in [0.01, 0.1, 1.0] {
                let m = mat(Spectrum::ONE * 0.5, Spectrum::ONE * 0.5, alpha, dist);
                for &wi in &dirs {
                    for &wo in &dirs {
                        assert!(eval_brdf(&m, &up(), wi, wo).is_valid());
                        let g = d_brdf_d_params(&m, &up(), wi, wo);
                        assert!(g.d_alpha.is_finite() && g.d_rho_s[0].is_finite());
                    }
                    assert!(microfacet_d(dist, alpha, &up(), wi).is_finite());
                }
            }
        }
    }

    #[test]
    fn cosine_samples_report_exact_pdf() {
        let f = Frame::from_normal(Vec3::new(0.2, -0.3, 0.9).normalize());
        let n = 100;
        let mut mean_cos = 0.0;
        for i in 0..n {
            for j in 0..n {
                let (u1, u2) = ((i as f64 + 0.5) / n as f64, (j as f64 + 0.5) / n as f64);
                let (d, pdf) = sample_cosine_hemisphere(&f, u1, u2);
                let local = cosine_hemisphere_local(u1, u2);
                assert_eq!(pdf, local.z / PI);
                assert!((d.length() - 1.0).abs() < 1e-12);
                mean_cos += f.normal.dot(d);
            }
        }
        mean_cos /= (n * n) as f64;
        assert!((mean_cos - 2.0 / 3.0).abs() < 0.01, "{mean_cos}");
    }

    #[test]
    fn parameter_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for k in 0..100 {
            let dist = if k % 2 == 0 { Distribution::Ggx } else { Distribution::Beckmann };
            let (wi, wo) = (random_upper(&mut rng), random_upper(&mut rng));
            let m = mat(
                Spectrum::new(rng.random(), rng.random(), rng.random()) * 0.5,
                Spectrum::new(rng.random(), rng.random(), rng.random()) * 0.5,
                rng.random_range(0.2..0.8),
                dist,
            );
            let g = d_brdf_d_params(&m, &up(), wi, wo);
            assert_eq!(g.d_rho_d, [FRAC_1_PI; 3]);
            for c in 0..3 {
                let mut p = m;
                let mut q = m;
                p.rho_s[c] += h;
                q.rho_s[c] -= h;
                let fd = (eval_brdf(&p, &up(), wi, wo)[c] - eval_brdf(&q, &up(), wi, wo)[c]) / (2.0 * h);
                assert!((fd - g.d_rho_s[c]).abs() <= 1e-4 * fd.abs().max(1e-3));
            }
            let (mut p, mut q) = (m, m);
            p.alpha += h;
            q.alpha -= h;
            let fp = eval_brdf(&p, &up(), wi, wo);
            let fq = eval_brdf(&q, &up(), wi, wo);
            for c in 0..3 {
                let fd = (fp[c] - fq[c]) / (2.0 * h);
                let an = g.d_alpha[c];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                    "case {k} {dist:?}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
