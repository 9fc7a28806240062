//! Distillation and adversarial losses.
//!
//! The free functions evaluate each term on plain slices (used for scoring
//! and as test oracles); [`build_objective`] records the same terms on a
//! [`Tape`] so the student objective can be differentiated.

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::config::{CriticalLayer, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{adapt_features, Bound, GanPair, Mode};
use crate::tensor::Tensor;

/// Probability clamp for the log terms of the adversarial loss.
pub const PROB_EPS: f64 = 1e-7;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty activation".into()));
    }
    Ok(())
}

/// Mean squared difference over all activations.
pub fn loss_val(a_s: &[f64], a_t: &[f64]) -> Result<f64> {
    same_len(a_s, a_t)?;
    Ok(a_s.iter().zip(a_t).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / a_s.len() as f64)
}

/// `1 - cos(a_s, a_t)`; a zero vector has no direction and is an error.
pub fn loss_dir(a_s: &[f64], a_t: &[f64]) -> Result<f64> {
    same_len(a_s, a_t)?;
    let (mut dot, mut ns, mut nt) = (0.0, 0.0, 0.0);
    for (s, t) in a_s.iter().zip(a_t) {
        dot += s * t;
        ns += s * s;
        nt += t * t;
    }
    if ns == 0.0 {
        return Err(Error::ZeroNorm("student activation"));
    }
    if nt == 0.0 {
        return Err(Error::ZeroNorm("teacher activation"));
    }
    Ok((1.0 - dot / (ns.sqrt() * nt.sqrt())).clamp(0.0, 2.0))
}

/// Ratio that puts the direction term on the value term's scale, measured
/// before any update. Falls back to 1 when the direction term is zero.
pub fn calibrate_alpha(val_0: f64, dir_0: f64) -> f64 {
    if dir_0 > 0.0 && dir_0.is_finite() && val_0.is_finite() {
        val_0 / dir_0
    } else {
        log::warn!("direction loss is {dir_0} before training; using alpha = 1");
        1.0
    }
}

/// Distillation loss on the generated images.
pub fn loss_kg(xhat_s: &[f64], xhat_t: &[f64], alpha_g: f64) -> Result<f64> {
    let val = loss_val(xhat_s, xhat_t)?;
    if alpha_g == 0.0 {
        return Ok(val);
    }
    Ok(val + alpha_g * loss_dir(xhat_s, xhat_t)?)
}

/// Distillation loss on discriminator features of the generated image
/// (already brought to a common width).
pub fn loss_kd(f_s_xhat: &[f64], f_t_xhat: &[f64], alpha_d: f64) -> Result<f64> {
    let val = loss_val(f_s_xhat, f_t_xhat)?;
    if alpha_d == 0.0 {
        return Ok(val);
    }
    Ok(val + alpha_d * loss_dir(f_s_xhat, f_t_xhat)?)
}

fn mean_neg_log(p: &[f64], complement: bool) -> f64 {
    let s: f64 = p
        .iter()
        .map(|&v| {
            let q = v.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if complement {
                (1.0 - q).ln()
            } else {
                q.ln()
            }
        })
        .sum();
    -s / p.len().max(1) as f64
}

/// `(generator term, discriminator term)` from sigmoid outputs on real and
/// generated images. The generator term is the non-saturating form.
pub fn loss_adv(p_real: &[f64], p_fake: &[f64]) -> (f64, f64) {
    let gen = mean_neg_log(p_fake, false);
    let disc = mean_neg_log(p_real, false) + mean_neg_log(p_fake, true);
    (gen, disc)
}

/// Mean absolute reconstruction error.
pub fn loss_con(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    same_len(x, x_hat)?;
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Mean squared gap between discriminator features of real and generated images.
pub fn loss_lat(f_x: &[f64], f_xhat: &[f64]) -> Result<f64> {
    loss_val(f_x, f_xhat)
}

/// Per-layer scale factors between the value and direction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub g: f64,
    pub d: f64,
    pub z: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Generator-side adversarial term.
    pub l_adv: f64,
    /// Discriminator minimax term (not part of the student objective).
    pub l_disc: f64,
    pub l_con: f64,
    pub l_lat: f64,
    pub l_kg: f64,
    pub l_kd: f64,
    /// Bottleneck distillation term, weighted like `l_kd`; zero unless the
    /// bottleneck is a critical layer.
    pub l_kz: f64,
    pub total: f64,
    pub alpha_g: f64,
    pub alpha_d: f64,
    pub alpha_z: f64,
}

/// Weighted sum of the student objective's terms.
pub fn total_loss(parts: &LossBreakdown, config: &ExperimentConfig) -> f64 {
    config.lambda_adv * parts.l_adv
        + config.lambda_con * parts.l_con
        + config.lambda_lat * parts.l_lat
        + config.lambda_kg * parts.l_kg
        + config.lambda_kd * parts.l_kd
        + config.lambda_kd * parts.l_kz
}

/// Teacher side of the objective.
pub struct TeacherView<'a> {
    pub pair: &'a GanPair,
    /// Needed only when `cached` is `None`.
    pub gen: Option<&'a Bound>,
    pub disc: &'a Bound,
    pub mode: Mode,
    /// Teacher reconstruction and latent of `x` when they are constant
    /// (frozen teacher, no gradient needed through them).
    pub cached: Option<(Tensor, Tensor)>,
}

pub struct ObjectiveInputs<'a> {
    pub config: &'a ExperimentConfig,
    pub student: &'a GanPair,
    pub student_gen: &'a Bound,
    pub student_disc: &'a Bound,
    pub student_mode: Mode,
    pub teacher: Option<TeacherView<'a>>,
    pub x: Var,
    /// `None` calibrates from this graph's initial values.
    pub alphas: Option<Alphas>,
}

pub struct Objective {
    pub total: Var,
    pub parts: LossBreakdown,
    pub alphas: Alphas,
    pub x_hat: Var,
    pub generator_stats: Vec<BatchStats>,
}

/// Value/direction pair on one critical layer.
struct Pair {
    val: Var,
    dir: Var,
}

fn val_dir(tape: &mut Tape, s: Var, t: Var) -> Result<Pair> {
    Ok(Pair { val: tape.mean_squared_diff(s, t)?, dir: tape.cosine_distance(s, t)? })
}

fn combine(tape: &mut Tape, p: &Pair, alpha: f64) -> Result<Var> {
    let d = tape.scale(p.dir, alpha);
    tape.add(p.val, d)
}

fn alpha_for(tape: &Tape, p: &Pair, fixed: Option<f64>) -> f64 {
    fixed.unwrap_or_else(|| calibrate_alpha(tape.value(p.val).item(), tape.value(p.dir).item()))
}

/// Record the weighted student objective on `tape`.
///
/// Without a teacher the distillation terms are zero, which is the plain
/// adversarial objective used to pretrain a teacher.
pub fn build_objective(tape: &mut Tape, inp: ObjectiveInputs<'_>) -> Result<Objective> {
    let cfg = inp.config;
    let s_out = inp.student.generator.forward(tape, inp.student_gen, inp.x, inp.student_mode)?;
    let x_hat = s_out.x_hat;
    let real = inp.student.discriminator.forward(tape, inp.student_disc, inp.x, inp.student_mode)?;
    let fake = inp.student.discriminator.forward(tape, inp.student_disc, x_hat, inp.student_mode)?;

    let adv = tape.mean_neg_log(fake.prob, false, PROB_EPS);
    let con = tape.mean_abs_diff(inp.x, x_hat)?;
    let lat = tape.mean_squared_diff(real.features, fake.features)?;

    let mut terms = vec![(adv, cfg.lambda_adv), (con, cfg.lambda_con), (lat, cfg.lambda_lat)];
    let mut parts = LossBreakdown {
        l_adv: tape.value(adv).item(),
        l_con: tape.value(con).item(),
        l_lat: tape.value(lat).item(),
        ..Default::default()
    };
    let mut alphas = inp.alphas.unwrap_or(Alphas { g: 1.0, d: 1.0, z: 1.0 });

    if let Some(t) = inp.teacher {
        let layers = &cfg.critical_layers;
        let (t_xhat, t_z) = match t.cached {
            Some((xh, z)) => (tape.leaf(xh, false), tape.leaf(z, false)),
            None => {
                let gen = t.gen.ok_or_else(|| Error::Invalid("teacher generator is not bound".into()))?;
                let o = t.pair.generator.forward(tape, gen, inp.x, t.mode)?;
                (o.x_hat, o.z)
            }
        };
        if layers.contains(&CriticalLayer::GeneratedImage) {
            let p = val_dir(tape, x_hat, t_xhat)?;
            alphas.g = alpha_for(tape, &p, inp.alphas.map(|a| a.g));
            let kg = combine(tape, &p, alphas.g)?;
            parts.l_kg = tape.value(kg).item();
            terms.push((kg, cfg.lambda_kg));
        }
        if layers.contains(&CriticalLayer::DiscriminatorFeatures) {
            let tf = t.pair.discriminator.forward(tape, t.disc, x_hat, t.mode)?;
            let (fs, ft) = adapt_features(tape, fake.features, tf.features)?;
            let p = val_dir(tape, fs, ft)?;
            alphas.d = alpha_for(tape, &p, inp.alphas.map(|a| a.d));
            let kd = combine(tape, &p, alphas.d)?;
            parts.l_kd = tape.value(kd).item();
            terms.push((kd, cfg.lambda_kd));
        }
        if layers.contains(&CriticalLayer::BottleneckZ) {
            let p = val_dir(tape, s_out.z, t_z)?;
            alphas.z = alpha_for(tape, &p, inp.alphas.map(|a| a.z));
            let kz = combine(tape, &p, alphas.z)?;
            parts.l_kz = tape.value(kz).item();
            terms.push((kz, cfg.lambda_kd));
        }
    }

    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let scaled = tape.scale(v, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("objective has terms");
    parts.total = tape.value(total).item();
    parts.alpha_g = alphas.g;
    parts.alpha_d = alphas.d;
    parts.alpha_z = alphas.z;
    let mut generator_stats = s_out.stats;
    generator_stats.shrink_to_fit();
    Ok(Objective { total, parts, alphas, x_hat, generator_stats })
}

/// Discriminator minimax term on real `x` and (detached) generated `x_hat`.
pub fn build_discriminator_loss(
    tape: &mut Tape,
    pair: &GanPair,
    disc: &Bound,
    x: Var,
    x_hat: Var,
) -> Result<(Var, Vec<BatchStats>)> {
    let real = pair.discriminator.forward(tape, disc, x, Mode::Train)?;
    let fake = pair.discriminator.forward(tape, disc, x_hat, Mode::Train)?;
    let a = tape.mean_neg_log(real.prob, false, PROB_EPS);
    let b = tape.mean_neg_log(fake.prob, true, PROB_EPS);
    let loss = tape.add(a, b)?;
    // Running statistics follow the real-image pass.
    Ok((loss, real.stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9
    }

    #[test]
    fn value_loss_examples() {
        assert_eq!(loss_val(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(loss_val(&[0.0, 0.0], &[2.0, 2.0]).unwrap(), 4.0);
        assert_eq!(loss_val(&[1.0], &[-1.0]).unwrap(), 4.0);
        assert!(loss_val(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn direction_loss_examples() {
        assert!(close(loss_dir(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0));
        assert!(close(loss_dir(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0));
        assert!(close(loss_dir(&[1.0, 1.0], &[-1.0, -1.0]).unwrap(), 2.0));
        assert!(matches!(loss_dir(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn alpha_calibration() {
        assert_eq!(calibrate_alpha(0.5, 0.5), 1.0);
        assert_eq!(calibrate_alpha(2.0, 0.5), 4.0);
        assert_eq!(calibrate_alpha(0.0, 0.3), 0.0);
        assert_eq!(calibrate_alpha(1.0, 0.0), 1.0);
    }

    #[test]
    fn distillation_examples() {
        let a = [0.2, -0.4, 0.9];
        assert_eq!(loss_kg(&a, &a, 3.0).unwrap(), 0.0 + 3.0 * loss_dir(&a, &a).unwrap());
        // val 4, dir 1, alpha 2 -> 6
        let s = [2.0, 0.0];
        let t = [0.0, 2.0];
        assert_eq!(loss_val(&s, &t).unwrap(), 4.0);
        assert!(close(loss_dir(&s, &t).unwrap(), 1.0));
        assert!(close(loss_kg(&s, &t, 2.0).unwrap(), 6.0));
        assert_eq!(loss_kg(&s, &t, 0.0).unwrap(), loss_val(&s, &t).unwrap());
        let f = [0.5, 1.5, -2.0, 0.25];
        let c = 0.75;
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        assert!(close(loss_val(&f, &shifted).unwrap(), c * c));
        assert_eq!(loss_kd(&f, &f, 5.0).unwrap(), 5.0 * loss_dir(&f, &f).unwrap());
        assert_eq!(loss_kd(&f, &shifted, 0.0).unwrap(), loss_val(&f, &shifted).unwrap());
    }

    #[test]
    fn adversarial_examples() {
        let (_, d) = loss_adv(&[1.0 - PROB_EPS], &[PROB_EPS]);
        assert!(d < 1e-6);
        let (g, d) = loss_adv(&[0.5], &[0.5]);
        assert!(close(d, 2.0 * std::f64::consts::LN_2));
        assert!(close(g, std::f64::consts::LN_2));
        let (g, d) = loss_adv(&[1.0], &[0.0]);
        assert!(g.is_finite() && d.is_finite());
    }

    #[test]
    fn reconstruction_and_latent_examples() {
        assert_eq!(loss_con(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(loss_con(&[1.0; 5], &[0.0; 5]).unwrap(), 1.0);
        assert_eq!(loss_con(&[-1.0, 1.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert_eq!(loss_lat(&[0.4, 0.2], &[0.4, 0.2]).unwrap(), 0.0);
        assert_eq!(loss_lat(&[3.0; 4], &[0.0; 4]).unwrap(), 9.0);
        assert_eq!(loss_lat(&[2.0], &[-1.0]).unwrap(), 9.0);
    }

    #[test]
    fn total_examples() {
        let cfg = default_config();
        assert_eq!(total_loss(&LossBreakdown::default(), &cfg), 0.0);
        let ones = LossBreakdown { l_adv: 1.0, l_con: 1.0, l_lat: 1.0, l_kg: 1.0, l_kd: 1.0, ..Default::default() };
        assert_eq!(total_loss(&ones, &cfg), 73.0);
        let parts = LossBreakdown { l_kg: 0.37, l_con: 0.2, ..Default::default() };
        let doubled = ExperimentConfig { lambda_kg: 100.0, ..default_config() };
        assert!(close(total_loss(&parts, &doubled) - total_loss(&parts, &cfg), 0.37 * 50.0));
    }

    #[test]
    fn graph_terms_agree_with_free_functions() {
        let mut tape = Tape::new();
        let a = Tensor::new(vec![2, 3], vec![0.5, -0.1, 0.3, 0.9, 0.2, -0.7]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.1, 0.4, -0.3, 0.2, 0.2, 0.1]).unwrap();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.leaf(b.clone(), false);
        let mse = tape.mean_squared_diff(av, bv).unwrap();
        let l1 = tape.mean_abs_diff(av, bv).unwrap();
        let cos = tape.cosine_distance(av, bv).unwrap();
        assert!(close(tape.value(mse).item(), loss_val(a.data(), b.data()).unwrap()));
        assert!(close(tape.value(l1).item(), loss_con(a.data(), b.data()).unwrap()));
        let per_sample =
            (loss_dir(a.sample(0), b.sample(0)).unwrap() + loss_dir(a.sample(1), b.sample(1)).unwrap()) / 2.0;
        assert!(close(tape.value(cos).item(), per_sample));
    }

    #[test]
    fn weighted_objective_gradient_matches_finite_differences() {
        let cfg = default_config();
        let b = [0.4, -0.3, 0.9, 0.1, -0.8, 0.5];
        let c = [0.2, 0.2, -0.6, 0.7, 0.3, -0.1];
        let alpha = 1.7;
        let value = |a: &[f64]| {
            let parts = LossBreakdown {
                l_kg: loss_kg(a, &b, alpha).unwrap(),
                l_con: loss_con(a, &c).unwrap(),
                l_lat: loss_lat(a, &c).unwrap(),
                l_kd: loss_kd(a, &c, alpha).unwrap(),
                ..Default::default()
            };
            total_loss(&parts, &cfg)
        };
        let a0 = vec![0.3, -0.5, 0.2, 0.8, -0.1, 0.6];
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::new(vec![1, 6], a0.clone()).unwrap(), true);
        let bv = tape.leaf(Tensor::new(vec![1, 6], b.to_vec()).unwrap(), false);
        let cv = tape.leaf(Tensor::new(vec![1, 6], c.to_vec()).unwrap(), false);
        let (kg_val, kg_dir) = (tape.mean_squared_diff(av, bv).unwrap(), tape.cosine_distance(av, bv).unwrap());
        let kg_dir = tape.scale(kg_dir, alpha);
        let kg = tape.add(kg_val, kg_dir).unwrap();
        let (kd_val, kd_dir) = (tape.mean_squared_diff(av, cv).unwrap(), tape.cosine_distance(av, cv).unwrap());
        let kd_dir = tape.scale(kd_dir, alpha);
        let kd = tape.add(kd_val, kd_dir).unwrap();
        let con = tape.mean_abs_diff(av, cv).unwrap();
        let lat = tape.mean_squared_diff(av, cv).unwrap();
        let terms = [(kg, cfg.lambda_kg), (kd, cfg.lambda_kd), (con, cfg.lambda_con), (lat, cfg.lambda_lat)];
        let mut total = tape.scale(terms[0].0, terms[0].1);
        for &(t, w) in &terms[1..] {
            let t = tape.scale(t, w);
            total = tape.add(total, t).unwrap();
        }
        assert!((tape.value(total).item() - value(&a0)).abs() < 1e-12);
        let grads = tape.backward(total).unwrap();
        let g = grads.get(av).unwrap().data().to_vec();
        let h = 1e-6;
        for i in 0..6 {
            let (mut ap, mut am) = (a0.clone(), a0.clone());
            ap[i] += h;
            am[i] -= h;
            let fd = (value(&ap) - value(&am)) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs() < 1e-4, "element {i}: fd {fd} vs {}", g[i]);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (1usize..16)
                .prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, n)))
        }

        proptest! {
            #[test]
            fn value_loss_is_a_symmetric_nonnegative_gap((a, b) in pair()) {
                let v = loss_val(&a, &b).unwrap();
                prop_assert!(v >= 0.0);
                prop_assert_eq!(v, loss_val(&b, &a).unwrap());
                prop_assert_eq!(loss_val(&a, &a).unwrap(), 0.0);
                prop_assert_eq!(v == 0.0, a == b);
            }

            #[test]
            fn direction_loss_ignores_positive_scale((a, b) in pair(), c in 1e-3f64..1e3) {
                prop_assume!(a.iter().any(|&v| v != 0.0) && b.iter().any(|&v| v != 0.0));
                let d = loss_dir(&a, &b).unwrap();
                prop_assert!((0.0..=2.0).contains(&d));
                let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
                let cb: Vec<f64> = b.iter().map(|v| v * c).collect();
                prop_assert!((loss_dir(&ca, &b).unwrap() - d).abs() < 1e-12);
                prop_assert!((loss_dir(&a, &cb).unwrap() - d).abs() < 1e-12);
            }

            #[test]
            fn total_is_linear_in_each_weight(
                parts in prop::array::uniform5(0.0f64..10.0),
                k in 0usize..5,
                dl in -10.0f64..10.0,
            ) {
                let p = LossBreakdown { l_adv: parts[0], l_con: parts[1], l_lat: parts[2], l_kg: parts[3], l_kd: parts[4], ..Default::default() };
                let base = default_config();
                let mut c = base.clone();
                let lam = [&mut c.lambda_adv, &mut c.lambda_con, &mut c.lambda_lat, &mut c.lambda_kg, &mut c.lambda_kd];
                *lam.into_iter().nth(k).unwrap() += dl;
                let delta = total_loss(&p, &c) - total_loss(&p, &base);
                prop_assert!((delta - dl * parts[k]).abs() < 1e-9);
            }
        }
    }
}
