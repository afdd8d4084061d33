//! Central finite-difference checks of every analytic gradient on micro
//! configurations.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::classifier::{ClassifierBatch, ClassifierHead, Encoder, EncoderConfig, HeadConfig, Input, LossWeights, TextClassifier};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Trajectory};
use crate::nn::Parameters;
use crate::reward::{IrlBatch, RewardConfig, RewardMode, RewardNet};
use crate::rng::from_seed;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Component {
    Generator,
    Reward,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Generator, Component::Reward, Component::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Component::Generator => "generator",
            Component::Reward => "reward",
            Component::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component {s:?}; expected generator, reward, classifier or all")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub component: Component,
    pub coordinates: usize,
    pub worst_relative_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `params`.
/// `corrupt` perturbs the analytic gradient as a negative control.
pub fn compare<P: Parameters>(
    component: Component,
    params: &P,
    analytic: &P,
    corrupt: bool,
    f: impl Fn(&P) -> Result<f64>,
) -> Result<GradcheckReport> {
    let mut a = analytic.flatten();
    if corrupt {
        if let Some(x) = a.first_mut() {
            *x = *x * 1.5 + 0.1;
        }
    }
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + STEP;
        probe.assign_flat(&flat);
        let up = f(&probe)?;
        flat[i] = base[i] - STEP;
        probe.assign_flat(&flat);
        let down = f(&probe)?;
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(a[i], numeric));
    }
    Ok(GradcheckReport {
        component,
        coordinates: base.len(),
        worst_relative_error: worst,
    })
}

fn micro_generator(seed: u64) -> Generator {
    Generator::new(
        GeneratorConfig {
            vocab_size: 6,
            embed_dim: 3,
            state_dim: 4,
            ff_width: 5,
            ff_layers: 2,
            dropout: 0.0,
            bos: 0,
            eos: Some(1),
        },
        &mut from_seed(seed),
    )
}

/// Weighted sequence log-likelihood `sum_t w_t log q(a_t | s_t)`.
pub fn check_generator(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let g = micro_generator(seed);
    let tokens = [3, 5, 2, 4, 1];
    let weights = [0.7, -1.3, 0.4, 2.0, 0.9];
    let (grad, _) = g.log_prob_gradient(&tokens, &weights)?;
    compare(Component::Generator, &g, &grad, corrupt, |p: &Generator| {
        Ok(p.log_prob_gradient(&tokens, &weights)?.1)
    })
}

/// The IRL objective over a small batch of real and generated
/// trajectories.
pub fn check_reward(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let g = micro_generator(seed);
    let real: Vec<Trajectory> = [vec![3, 4, 1], vec![5, 5, 2, 1], vec![2, 3]]
        .iter()
        .map(|t| g.teacher_force(t))
        .collect::<Result<_>>()?;
    let generated = g.sample_trajectories(4, 5, seed, 1.0)?;
    let gen_log_probs: Vec<f64> = generated.iter().map(Trajectory::log_prob).collect();
    let r = RewardNet::new(
        RewardConfig {
            state_dim: 4,
            vocab_size: 6,
            embed_dim: 3,
            hidden: 5,
            layers: 2,
            dropout: 0.0,
        },
        &mut from_seed(seed ^ 0x5eed),
    );
    let p_real = [0.1, 0.3, 0.05];
    let p_gen = [0.8, 0.6, 0.9, 0.4];
    let batch = IrlBatch {
        real: &real,
        generated: &generated,
        gen_log_probs: &gen_log_probs,
        p_fake_real: &p_real,
        p_fake_gen: &p_gen[..generated.len()],
    };
    let (grad, _) = r.irl_gradient(&batch, RewardMode::Read, None)?;
    compare(Component::Reward, &r, &grad, corrupt, |p: &RewardNet| p.irl_objective(&batch, RewardMode::Read))
}

/// Weighted `L_l + L_u + L_f` of the encoder and head.
pub fn check_classifier(seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let mut rng = from_seed(seed);
    let encoder = Encoder::new(
        EncoderConfig {
            vocab_size: 9,
            embed_dim: 4,
            d: 3,
        },
        &mut rng,
    );
    let head = ClassifierHead::new(HeadConfig { d: 3, hidden: 4, k: 3 }, &mut rng);
    let clf = TextClassifier::new(Some(encoder), head);
    let seqs: [&[usize]; 4] = [&[4, 5, 3], &[6, 7, 8, 3], &[5, 5, 0], &[8, 4, 3]];
    let feature = [0.3, -0.2, 0.5];
    let batch = ClassifierBatch {
        labeled: vec![(Input::Tokens(seqs[0]), 0), (Input::Tokens(seqs[1]), 2)],
        real: vec![Input::Tokens(seqs[1]), Input::Tokens(seqs[2])],
        fake: vec![Input::Tokens(seqs[3]), Input::Features(&feature)],
    };
    let weights = LossWeights {
        labeled: 1.0,
        real: 0.7,
        fake: 1.3,
    };
    let (grad, _) = clf.loss_and_gradient(&batch, weights)?;
    compare(Component::Classifier, &clf, &grad, corrupt, |p: &TextClassifier| {
        Ok(p.loss_and_gradient(&batch, weights)?.1.total)
    })
}

pub fn check(component: Component, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    match component {
        Component::Generator => check_generator(seed, corrupt),
        Component::Reward => check_reward(seed, corrupt),
        Component::Classifier => check_classifier(seed, corrupt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        for c in Component::ALL {
            let r = check(c, 7, false).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn corruption_is_detected() {
        for c in Component::ALL {
            assert!(!check(c, 7, true).unwrap().passed());
        }
    }
}
