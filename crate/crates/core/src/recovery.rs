//! Mining a returned update: average features, target counts, analytic
//! input inversion and the catch criterion used for evaluation.

use alloc::vec::Vec;

use crate::error::{param, shape, Error, Result};
use crate::linalg::{self, Vector};
use crate::model::GradientUpdate;

/// Below this |∂L/∂b_c| no target-class example answered.
pub const NO_SIGNAL_THRESHOLD: f64 = 1e-12;
/// First-layer rows with a smaller bias gradient are not inverted.
pub const ROW_THRESHOLD: f64 = 1e-8;
/// Relative candidate spread above which a recovery is flagged as mixed.
pub const MIXED_THRESHOLD: f64 = 1e-6;
/// Cosine needed to count a prefix of examples as caught.
pub const CATCH_COSINE: f64 = 0.95;
/// Prefix cosines this close to the best are treated as equal.
pub const COSINE_TIE: f64 = 1e-9;

/// Outcome of mining one user's update.
#[derive(Debug, Clone, PartialEq)]
pub struct CatchReport {
    pub user_id: usize,
    pub n_caught: usize,
    pub best_cosine: f64,
    pub isolated_gradient: Option<GradientUpdate>,
    pub recovered_input: Option<Vector>,
    pub queries_used: usize,
    /// Max absolute error of `recovered_input` against the example it
    /// should equal (evaluation only).
    pub input_recovery_error: Option<f64>,
}

/// f̄ = ∇_{W_c} L / ∇_{b_c} L.
pub fn recover_avg_feature(g: &GradientUpdate, c: usize) -> Result<Vector> {
    if c >= g.head_bias.len() {
        return Err(param(alloc::format!("class {c} out of range")));
    }
    let db = g.head_bias[c];
    if db.abs() <= NO_SIGNAL_THRESHOLD {
        return Err(Error::NoSignal(db));
    }
    Ok(g.head_weight.row(c).iter().map(|w| w / db).collect::<Vec<_>>().into())
}

/// Each target example adds ≈ −1/batch to ∂L/∂b_c under fishing, others ≈ 0.
pub fn estimate_target_count(g: &GradientUpdate, c: usize) -> Result<usize> {
    if c >= g.head_bias.len() {
        return Err(param(alloc::format!("class {c} out of range")));
    }
    let raw = -(g.batch_size as f64) * g.head_bias[c];
    if raw < -0.5 || !raw.is_finite() {
        return Err(Error::InconsistentCount(raw));
    }
    Ok(libm::round(raw) as usize)
}

/// Input reconstructed from the first fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InputRecovery {
    pub input: Vector,
    /// Max pairwise distance between per-row candidates.
    pub disagreement: f64,
    pub rows_used: usize,
    /// Candidates disagree: the update mixes several examples.
    pub mixed: bool,
}

/// For a single example, every first-layer row r gives x = ∇_{W1,r} / ∇_{b1,r}.
///
/// Candidates are averaged with weights (∇_{b1,r})², which is exact for a
/// true single-example gradient and least-squares optimal when the update
/// carries noise.
pub fn analytic_input_recovery(g: &GradientUpdate) -> Result<InputRecovery> {
    let first = g
        .layers
        .first()
        .ok_or_else(|| shape("model has no fully connected first layer"))?;
    let d = first.weight.cols();
    let mut candidates: Vec<(f64, Vector)> = Vec::new();
    for r in 0..first.weight.rows() {
        let db = first.bias[r];
        if db.abs() > ROW_THRESHOLD {
            let cand: Vec<f64> = first.weight.row(r).iter().map(|w| w / db).collect();
            candidates.push((db * db, cand.into()));
        }
    }
    if candidates.is_empty() {
        return Err(Error::Unrecoverable);
    }
    let total: f64 = candidates.iter().map(|(w, _)| w).sum();
    let mut input = Vector::zeros(d);
    for (w, cand) in &candidates {
        for (o, v) in input.iter_mut().zip(cand.iter()) {
            *o += w / total * v;
        }
    }
    let mut disagreement: f64 = 0.0;
    for (i, (_, a)) in candidates.iter().enumerate() {
        for (_, b) in &candidates[i + 1..] {
            let dist: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            disagreement = disagreement.max(libm::sqrt(dist));
        }
    }
    let mixed = disagreement > MIXED_THRESHOLD * (input.norm() + 1e-12);
    Ok(InputRecovery {
        input,
        disagreement,
        rows_used: candidates.len(),
        mixed,
    })
}

/// Flattened cosine; 0 when either side has norm below 1e-15.
pub fn cosine_similarity(a: &GradientUpdate, b: &GradientUpdate) -> Result<f64> {
    a.check_shape(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na < 1e-15 || nb < 1e-15 {
        return Ok(0.0);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn vector_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (libm::sqrt(linalg::dot(a, a)), libm::sqrt(linalg::dot(b, b)));
    if na < 1e-15 || nb < 1e-15 {
        return 0.0;
    }
    (linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatchCount {
    pub n_caught: usize,
    pub best_cosine: f64,
}

/// Among prefix sums of `per_example` (sorted ascending by attacked
/// feature), the length whose sum has the highest cosine with `g_c`, if that
/// cosine reaches [`CATCH_COSINE`]; otherwise 0. Lengths whose cosine is
/// within [`COSINE_TIE`] of the best count as ties and the shortest wins, so
/// trailing examples with vanishing gradients are not counted as caught.
pub fn count_caught(g_c: &GradientUpdate, per_example: &[GradientUpdate]) -> Result<CatchCount> {
    let mut cosines = Vec::with_capacity(per_example.len());
    let mut prefix: Option<GradientUpdate> = None;
    for g in per_example {
        match prefix.as_mut() {
            None => prefix = Some(g.clone()),
            Some(p) => {
                p.check_shape(g)?;
                p.add_scaled(g, 1.0);
            }
        }
        cosines.push(cosine_similarity(g_c, prefix.as_ref().expect("set above"))?);
    }
    let best_cosine = cosines.iter().copied().fold(-1.0, f64::max);
    let n_caught = if best_cosine < CATCH_COSINE {
        0
    } else {
        cosines
            .iter()
            .position(|&c| c >= best_cosine - COSINE_TIE)
            .map_or(0, |i| i + 1)
    };
    Ok(CatchCount { n_caught, best_cosine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RandomSource;
    use crate::model::{self, Architecture, Example, ModelParams};

    fn setup() -> (ModelParams, Vec<Example>) {
        let p = ModelParams::init(&Architecture::default(), RandomSource::new(10, 0)).unwrap();
        let xs = linalg::gaussian_sample(RandomSource::new(10, 1), 0.0, 1.0, 32 * 4).unwrap();
        let batch = xs.chunks(32).enumerate().map(|(i, x)| Example::new(x, i % 3)).collect();
        (p, batch)
    }

    #[test]
    fn cosine_basics() {
        let (p, batch) = setup();
        let a = model::example_gradient(&p, &batch[0]).unwrap();
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.clone().scaled(-1.0);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let zero = a.clone().scaled(0.0);
        assert_eq!(cosine_similarity(&a, &zero).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_flattened_oracle() {
        let (p, batch) = setup();
        let a = model::example_gradient(&p, &batch[0]).unwrap();
        let b = model::example_gradient(&p, &batch[1]).unwrap();
        let (va, vb) = (a.values(), b.values());
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((cosine_similarity(&a, &b).unwrap() - dot / (na * nb)).abs() < 1e-12);
    }

    #[test]
    fn cosine_shape_mismatch() {
        let (p, batch) = setup();
        let a = model::example_gradient(&p, &batch[0]).unwrap();
        let mut b = a.clone();
        b.layers.pop();
        assert!(cosine_similarity(&a, &b).is_err());
    }

    #[test]
    fn count_caught_prefixes() {
        let (p, batch) = setup();
        let per: Vec<_> = batch.iter().map(|e| model::example_gradient(&p, e).unwrap()).collect();
        assert_eq!(count_caught(&per[0], &per).unwrap().n_caught, 1);
        let two = GradientUpdate::mean_of(&per[..2]).unwrap();
        assert_eq!(count_caught(&two, &per).unwrap().n_caught, 2);
        // Positive rescaling never changes the count.
        let scaled = two.clone().scaled(1e-7);
        assert_eq!(count_caught(&scaled, &per).unwrap().n_caught, 2);
        // Opposite direction is never caught.
        let opposite = per[0].clone().scaled(-1.0);
        assert_eq!(count_caught(&opposite, &per).unwrap().n_caught, 0);
    }

    #[test]
    fn exact_single_example_inversion() {
        let (p, batch) = setup();
        for e in &batch {
            let g = model::example_gradient(&p, e).unwrap();
            let rec = analytic_input_recovery(&g).unwrap();
            assert!(!rec.mixed);
            for (a, b) in rec.input.iter().zip(e.x.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixed_gradient_is_flagged() {
        let (p, batch) = setup();
        let single = analytic_input_recovery(&model::example_gradient(&p, &batch[0]).unwrap()).unwrap();
        let mixed = analytic_input_recovery(&model::batch_gradient(&p, &batch[..2]).unwrap()).unwrap();
        assert!(mixed.mixed);
        assert!(mixed.disagreement > 10.0 * single.disagreement);
    }

    #[test]
    fn dead_first_layer_is_unrecoverable() {
        let (p, batch) = setup();
        let g = model::example_gradient(&p, &batch[0]).unwrap().scaled(0.0);
        assert_eq!(analytic_input_recovery(&g), Err(Error::Unrecoverable));
    }

    #[test]
    fn no_signal_on_zero_bias_gradient() {
        let (p, batch) = setup();
        let mut g = model::example_gradient(&p, &batch[0]).unwrap();
        g.head_bias[1] = 0.0;
        assert!(matches!(recover_avg_feature(&g, 1), Err(Error::NoSignal(_))));
    }

    #[test]
    fn count_estimate_flags_inconsistency() {
        let (p, batch) = setup();
        let mut g = model::example_gradient(&p, &batch[0]).unwrap();
        g.head_bias[0] = 3.0;
        assert!(matches!(estimate_target_count(&g, 0), Err(Error::InconsistentCount(_))));
        g.head_bias[0] = 0.0;
        assert_eq!(estimate_target_count(&g, 0), Ok(0));
    }
}
