//! Entropy-based evaluation of generated clip sets.
//!
//! All three scores come from the evaluation classifier's conditional
//! joint-label distributions. Intra-entropy is the mean conditional
//! entropy (low = recognizable clips), inter-entropy the entropy of the
//! induced hard-label distribution (high = diverse set), and the score
//! `exp(E[KL(p(y|x) || p(y))])` rises with both. Natural logarithms
//! throughout; reductions run in f64.

use crate::attributes::{AttributeClassifier, ProbVector};
use crate::sprites::VideoClip;
use crate::{Result, VvError};

/// Evaluation summary for one clip set.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub n_clips: usize,
    /// Mean conditional entropy in nats (headline intra-entropy).
    pub intra_e: f64,
    /// Summed variant (the set-size-dependent form).
    pub intra_e_sum: f64,
    /// Entropy of the hard argmax label distribution.
    pub inter_e: f64,
    /// Entropy of the mean conditional distribution.
    pub inter_e_soft: f64,
    pub i_score: f64,
    pub classifier_id: String,
}

impl MetricsReport {
    /// Range bounds and the exp identity; every evaluation must satisfy
    /// these.
    pub fn validate(&self, joint_classes: usize) -> Result<()> {
        let ln_k = (joint_classes as f64).ln();
        let eps = 1e-9 + 1e-12 * ln_k;
        let in_range = |v: f64, lo: f64, hi: f64| v >= lo - eps && v <= hi + eps;
        if !in_range(self.intra_e, 0.0, ln_k)
            || !in_range(self.inter_e, 0.0, ln_k)
            || !in_range(self.inter_e_soft, 0.0, ln_k)
            || !in_range(self.i_score, 1.0, joint_classes as f64)
        {
            return Err(VvError::Numerical(format!(
                "metrics out of range for K={joint_classes}: {self:?}"
            )));
        }
        let identity = (self.inter_e_soft - self.intra_e).exp();
        if (self.i_score - identity).abs() > 1e-6 * self.i_score.max(1.0) {
            return Err(VvError::Numerical(format!(
                "score identity violated: {} vs exp(inter_soft - intra) = {identity}",
                self.i_score
            )));
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "n,intra_e,intra_e_sum,inter_e,inter_e_soft,i_score"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.n_clips,
            self.intra_e,
            self.intra_e_sum,
            self.inter_e,
            self.inter_e_soft,
            self.i_score
        )
    }

    pub fn table(&self) -> String {
        format!(
            "clips        {}\n\
             Intra-E      {:.4} nats (sum {:.2})\n\
             Inter-E      {:.4} nats (soft {:.4})\n\
             I-Score      {:.4}\n\
             classifier   {}",
            self.n_clips,
            self.intra_e,
            self.intra_e_sum,
            self.inter_e,
            self.inter_e_soft,
            self.i_score,
            self.classifier_id
        )
    }
}

fn distributions(
    clips: &[&VideoClip],
    classifier: &AttributeClassifier,
) -> Result<Vec<ProbVector>> {
    if clips.is_empty() {
        return Err(VvError::Parameter("empty clip set".into()));
    }
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(128) {
        out.extend(classifier.classify_distribution_batch(chunk)?);
    }
    Ok(out)
}

fn entropy_of(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Mean conditional label entropy over the set, in nats.
pub fn intra_entropy(clips: &[&VideoClip], classifier: &AttributeClassifier) -> Result<f64> {
    let dists = distributions(clips, classifier)?;
    Ok(dists.iter().map(ProbVector::entropy).sum::<f64>() / dists.len() as f64)
}

/// Entropy of the empirical hard-label distribution: each clip votes its
/// argmax joint label.
pub fn inter_entropy(clips: &[&VideoClip], classifier: &AttributeClassifier) -> Result<f64> {
    let dists = distributions(clips, classifier)?;
    let k = dists[0].len();
    let mut counts = vec![0usize; k];
    for d in &dists {
        counts[d.argmax()] += 1;
    }
    let n = dists.len() as f64;
    Ok(entropy_of(
        &counts.iter().map(|c| *c as f64 / n).collect::<Vec<f64>>(),
    ))
}

/// exp of the mean KL between conditional and marginal distributions.
pub fn i_score(clips: &[&VideoClip], classifier: &AttributeClassifier) -> Result<f64> {
    let dists = distributions(clips, classifier)?;
    Ok(i_score_from(&dists))
}

fn mean_distribution(dists: &[ProbVector]) -> Vec<f64> {
    let k = dists[0].len();
    let mut mean = vec![0.0f64; k];
    for d in dists {
        for (m, p) in mean.iter_mut().zip(d.probs()) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= dists.len() as f64;
    }
    mean
}

fn i_score_from(dists: &[ProbVector]) -> f64 {
    let mean = mean_distribution(dists);
    let mut kl_sum = 0.0f64;
    for d in dists {
        for (p, m) in d.probs().iter().zip(&mean) {
            if *p > 0.0 {
                kl_sum += p * (p.ln() - m.ln());
            }
        }
    }
    (kl_sum / dists.len() as f64).exp()
}

/// Full evaluation of a clip set.
pub fn evaluate_clips(
    clips: &[&VideoClip],
    classifier: &AttributeClassifier,
    classifier_id: &str,
) -> Result<MetricsReport> {
    let dists = distributions(clips, classifier)?;
    let n = dists.len();
    let intra_sum: f64 = dists.iter().map(ProbVector::entropy).sum();
    let intra = intra_sum / n as f64;

    let k = dists[0].len();
    let mut counts = vec![0usize; k];
    for d in &dists {
        counts[d.argmax()] += 1;
    }
    let hard: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();

    let report = MetricsReport {
        n_clips: n,
        intra_e: intra,
        intra_e_sum: intra_sum,
        inter_e: entropy_of(&hard),
        inter_e_soft: entropy_of(&mean_distribution(&dists)),
        i_score: i_score_from(&dists),
        classifier_id: classifier_id.to_string(),
    };
    report.validate(classifier.spec.joint_classes())?;
    Ok(report)
}

/// The Table-style bound: the same three metrics evaluated on real test
/// clips instead of generated ones.
pub fn compute_bounds(
    test_clips: &[&VideoClip],
    classifier: &AttributeClassifier,
    classifier_id: &str,
) -> Result<MetricsReport> {
    evaluate_clips(test_clips, classifier, classifier_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_assignment_entropy(k: usize, per_class: usize) -> f64 {
        // hard-label entropy of a perfectly uniform assignment
        let n = k * per_class;
        let counts = vec![per_class as f64 / n as f64; k];
        entropy_of(&counts)
    }

    #[test]
    fn uniform_two_class_assignment_is_ln_two() {
        let h = uniform_assignment_entropy(2, 10);
        assert!((h - 0.693147).abs() < 1e-6, "{h}");
    }

    #[test]
    fn uniform_ninety_class_assignment_is_ln_ninety() {
        let h = uniform_assignment_entropy(90, 3);
        assert!((h - 4.4998).abs() < 1e-4, "{h}");
    }

    #[test]
    fn entropy_of_uniform_vector_is_ln_k() {
        for k in [2usize, 16, 90] {
            let v = vec![1.0 / k as f64; k];
            assert!((entropy_of(&v) - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_entropy_of_mixed_set() {
        // one one-hot clip (entropy 0) and one two-way uniform (ln 2):
        // mean is ln 2 / 2
        let d1 = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let d2 = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let mean = (d1.entropy() + d2.entropy()) / 2.0;
        assert!((mean - 0.5 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_confident_classifier_scores_k() {
        // n clips, uniformly many per class, all one-hot: KL = ln K each
        let k = 4;
        let mut dists = Vec::new();
        for cls in 0..k {
            for _ in 0..8 {
                let mut p = vec![0.0f64; k];
                p[cls] = 1.0;
                dists.push(ProbVector::new(p).unwrap());
            }
        }
        let score = i_score_from(&dists);
        assert!((score - k as f64).abs() < 1e-6, "{score}");
    }

    #[test]
    fn identical_conditionals_score_one() {
        let dists: Vec<ProbVector> = (0..10)
            .map(|_| ProbVector::new(vec![0.25; 4]).unwrap())
            .collect();
        let score = i_score_from(&dists);
        assert!((score - 1.0).abs() < 1e-9, "{score}");
    }

    #[test]
    fn chair_bound_structure_exp_of_inter() {
        // exp(1.386) reproduces the I-Score bound shape of a 4-class set
        assert!((1.386f64.exp() - 4.0).abs() < 0.01);
    }

    #[test]
    fn score_identity_holds_on_random_distributions() {
        let mut rng = crate::tensor::RngStream::new(77);
        let k = 6;
        let dists: Vec<ProbVector> = (0..50)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
                let sum: f64 = raw.iter().sum();
                ProbVector::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
            })
            .collect();
        let intra = dists.iter().map(ProbVector::entropy).sum::<f64>() / dists.len() as f64;
        let soft = entropy_of(&mean_distribution(&dists));
        let score = i_score_from(&dists);
        assert!(
            (score - (soft - intra).exp()).abs() <= 1e-9 * score,
            "identity: {score} vs {}",
            (soft - intra).exp()
        );
    }
}
