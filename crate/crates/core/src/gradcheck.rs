//! Central finite-difference check of every model parameter gradient.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::StoryRecord;
use crate::error::Result;
use crate::glocal::Phase;
use crate::model::GlacNet;
use crate::tape::Tape;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub worst_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Total teacher-forced loss (summed, not averaged) in training mode with a
/// dropout mask fixed by `dropout_seed`. Running statistics are not kept.
pub fn total_story_loss(model: &GlacNet, stories: &[&StoryRecord], dropout_seed: u64) -> Result<f64> {
    let (value, _) = loss_with_tape(model, stories, dropout_seed, false)?;
    Ok(value)
}

fn loss_with_tape(
    model: &GlacNet,
    stories: &[&StoryRecord],
    dropout_seed: u64,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, with_grads);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut stats = model.bn_stats().to_vec();
    let mut phase = Phase::Train {
        rng: &mut rng,
        stats: &mut stats,
    };
    let (_, loss) = model.story_loss(&mut tape, &bound, stories, &mut phase)?;
    let value = tape.value(loss.total).data()[0];
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss.total)?;
    Ok((value, bound.grads(&tape)))
}

/// Analytic gradients of [`total_story_loss`].
pub fn analytic_gradients(model: &GlacNet, stories: &[&StoryRecord], dropout_seed: u64) -> Result<Vec<Vec<f64>>> {
    loss_with_tape(model, stories, dropout_seed, true).map(|(_, g)| g)
}

/// Central-difference derivative of `f` at 0 refined by Ridders' polynomial
/// extrapolation. Starts at step `h` and shrinks it by 1.4 per round; returns
/// the estimate with the smallest internal error estimate, together with
/// that estimate.
pub fn ridders_derivative(mut f: impl FnMut(f64) -> Result<f64>, h: f64) -> Result<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const SHRINK2: f64 = SHRINK * SHRINK;
    const ROUNDS: usize = 10;
    const SAFE: f64 = 2.0;
    let mut table = [[0.0f64; ROUNDS]; ROUNDS];
    let mut step = h;
    table[0][0] = (f(step)? - f(-step)?) / (2.0 * step);
    let mut best = (table[0][0], f64::INFINITY);
    for i in 1..ROUNDS {
        step /= SHRINK;
        table[0][i] = (f(step)? - f(-step)?) / (2.0 * step);
        let mut fac = SHRINK2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK2;
            let err = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if err <= best.1 {
                best = (table[j][i], err);
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= SAFE * best.1 {
            break;
        }
    }
    Ok(best)
}

/// Compares analytic gradients with a numerical derivative of the summed
/// loss for every scalar parameter. The numerical derivative is
/// [`ridders_derivative`] started from `step` and from `10 * step`, keeping
/// whichever has the smaller error estimate. Errors are relative to
/// `max(|analytic|, |numeric|, 1e-8 · max(1, |loss|))`.
pub fn check_model_gradients(
    model: &GlacNet,
    stories: &[&StoryRecord],
    step: f64,
    tolerance: f64,
    dropout_seed: u64,
) -> Result<GradCheckReport> {
    let (loss, analytic) = loss_with_tape(model, stories, dropout_seed, true)?;
    let floor = 1e-8 * loss.abs().max(1.0);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        worst_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for p in 0..analytic.len() {
        for i in 0..analytic[p].len() {
            let original = probe.params().tensors()[p].data()[i];
            let mut estimate = |h: f64| {
                ridders_derivative(
                    |offset| {
                        probe.params_mut().tensors_mut()[p].data_mut()[i] = original + offset;
                        total_story_loss(&probe, stories, dropout_seed)
                    },
                    h,
                )
            };
            let fine = estimate(step)?;
            let coarse = estimate(10.0 * step)?;
            let numeric = if coarse.1 < fine.1 { coarse.0 } else { fine.0 };
            probe.params_mut().tensors_mut()[p].data_mut()[i] = original;

            let err = relative_error(analytic[p][i], numeric, floor);
            report.checked += 1;
            if err >= tolerance {
                report.failures += 1;
            }
            if err > report.worst_relative_error || report.checked == 1 {
                report.worst_relative_error = err;
                report.worst_param = model.params().iter().nth(p).unwrap().0.to_string();
                report.worst_index = i;
                report.worst_analytic = analytic[p][i];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Finite-difference step used by [`check_tiny`].
pub const TINY_STEP: f64 = 1e-3;
/// Relative-error threshold used by [`check_tiny`].
pub const TINY_TOLERANCE: f64 = 1e-4;

/// Two deterministic three-image stories for [`ModelConfig::tiny`](crate::ModelConfig::tiny).
pub fn tiny_stories() -> Vec<StoryRecord> {
    use alloc::vec;
    use crate::special::{END, START};
    let sentences = [
        vec![vec![START, 4, 5, END], vec![START, 6, 7, 4, END], vec![START, 3, END]],
        vec![vec![START, 7, END], vec![START, 5, 5, 6, END], vec![START, 4, 6, 7, 5, END]],
    ];
    sentences
        .into_iter()
        .enumerate()
        .map(|(b, sentences)| StoryRecord {
            story_id: alloc::format!("tiny-{b}"),
            features: (0..3)
                .map(|t| {
                    (0..6)
                        .map(|j| libm::sin(((t * 7 + j * 3 + b) as f64) * 0.37))
                        .collect()
                })
                .collect(),
            sentences,
        })
        .collect()
}

/// Full gradient check of the tiny configuration.
pub fn check_tiny(model_seed: u64) -> Result<GradCheckReport> {
    let model = GlacNet::new(crate::ModelConfig::tiny(), model_seed)?;
    let stories = tiny_stories();
    let refs: Vec<&StoryRecord> = stories.iter().collect();
    check_model_gradients(&model, &refs, TINY_STEP, TINY_TOLERANCE, 11)
}
