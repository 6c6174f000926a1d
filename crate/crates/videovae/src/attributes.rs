//! Holistic attribute inference: per-attribute classifier heads over a
//! dedicated frame encoder, connected through time by their own LSTM.
//!
//! The classifier is self-contained: its encoder, recurrence, and heads
//! live in their own parameter store, trained in stage 1 and frozen
//! afterwards, never sharing storage with the generative model. The same
//! architecture doubles as the evaluation classifier when trained on a
//! fully labeled split.

use std::path::Path;

use crate::model::{stack_clip_frames, Conv2d, Dense, Init, LstmCell, MlpBlock, Profile};
use crate::sprites::{
    load_clip, save_clip, AttributeSet, AttributeSpec, DatasetManifest, Split, VideoClip,
};
use crate::tensor::{no_grad, ParameterStore, RngStream, Tensor};
use crate::{Result, VvError};

/// Probabilities over the joint label space; nonnegative, sums to one.
#[derive(Debug, Clone)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(VvError::Numerical(format!(
                "probability vector sums to {sum}, not 1"
            )));
        }
        Ok(ProbVector { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Entropy in nats; 0 ln 0 reads as 0.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub struct AttributeClassifier {
    pub profile: Profile,
    pub spec: AttributeSpec,
    pub store: ParameterStore,
    enc_convs: Vec<Conv2d>,
    enc_head1: Dense,
    enc_head2: Dense,
    recurrence: LstmCell,
    heads: Vec<MlpBlock>,
    dropout_rate: f32,
}

impl AttributeClassifier {
    pub fn new(profile: Profile, spec: AttributeSpec, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::derive(seed, 0xa77);
        let d = profile.latent_dim;
        let hidden = profile.hidden_dim;
        let flat = profile.flatten_len();

        let mut enc_convs = Vec::new();
        let mut in_ch = profile.geom.c;
        for (i, conv) in profile.conv_chain.iter().enumerate() {
            enc_convs.push(Conv2d::new(
                &mut store,
                &format!("enc.conv{i}"),
                in_ch,
                conv.channels,
                conv.kernel,
                conv.stride,
                &mut rng,
            )?);
            in_ch = conv.channels;
        }
        let enc_head1 =
            Dense::new(&mut store, "enc.head1", flat, profile.head_hidden, Init::Uniform, &mut rng)?;
        let enc_head2 =
            Dense::new(&mut store, "enc.head2", profile.head_hidden, d, Init::Uniform, &mut rng)?;
        let recurrence = LstmCell::new(&mut store, "recurrence", d, hidden, &mut rng)?;
        let mut heads = Vec::new();
        for (i, (name, k)) in spec.iter().enumerate() {
            let _ = name;
            heads.push(MlpBlock::new(
                &mut store,
                &format!("head{i}"),
                hidden,
                hidden,
                k,
                Init::Uniform,
                &mut rng,
            )?);
        }
        Ok(AttributeClassifier {
            profile,
            spec,
            store,
            enc_convs,
            enc_head1,
            enc_head2,
            recurrence,
            heads,
            dropout_rate: 0.5,
        })
    }

    fn encode(&self, x: &Tensor, training: bool, rng: &mut RngStream) -> Result<Tensor> {
        let mut y = x.clone();
        for conv in &self.enc_convs {
            y = conv.forward(&y)?.relu();
        }
        y = y.dropout(self.dropout_rate, rng, training)?;
        let n = y.shape()[0];
        let flat = y.reshape(&[n, self.profile.flatten_len()])?;
        self.enc_head2.forward(&self.enc_head1.forward(&flat)?.relu())
    }

    /// Per-attribute logits at the final timestep, after the recurrence
    /// has seen the whole clip.
    pub fn forward_logits(
        &self,
        frames: &[Tensor],
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Vec<Tensor>> {
        let n = frames
            .first()
            .ok_or_else(|| VvError::Parameter("empty frame sequence".into()))?
            .shape()[0];
        let mut h = Tensor::zeros(&[n, self.profile.hidden_dim]);
        let mut c = Tensor::zeros(&[n, self.profile.hidden_dim]);
        for frame in frames {
            let features = self.encode(frame, training, rng)?;
            let (h2, c2) = self.recurrence.forward(&features, &h, &c)?;
            h = h2;
            c = c2;
        }
        self.heads.iter().map(|head| head.forward(&h)).collect()
    }

    /// Argmax per attribute at the final timestep; ties break toward the
    /// lower index. Deterministic: dropout is disabled.
    pub fn infer(&self, clip: &VideoClip) -> Result<AttributeSet> {
        Ok(self.infer_batch(&[clip])?.pop().unwrap())
    }

    pub fn infer_batch(&self, clips: &[&VideoClip]) -> Result<Vec<AttributeSet>> {
        let frames = stack_clip_frames(clips)?;
        self.check_geometry(&frames)?;
        let mut rng = RngStream::new(0);
        let logits =
            no_grad(|| self.forward_logits(&frames, false, &mut rng))?;
        let n = clips.len();
        let mut out = vec![Vec::with_capacity(self.spec.len()); n];
        for head in &logits {
            let k = head.shape()[1];
            let data = head.data();
            for (i, indices) in out.iter_mut().enumerate() {
                let row = &data[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                indices.push(best);
            }
        }
        Ok(out.into_iter().map(AttributeSet::new).collect())
    }

    /// Joint conditional distribution: outer product of per-attribute
    /// softmaxes (heads are conditionally independent by construction).
    pub fn classify_distribution(&self, clip: &VideoClip) -> Result<ProbVector> {
        Ok(self.classify_distribution_batch(&[clip])?.pop().unwrap())
    }

    pub fn classify_distribution_batch(&self, clips: &[&VideoClip]) -> Result<Vec<ProbVector>> {
        let frames = stack_clip_frames(clips)?;
        self.check_geometry(&frames)?;
        let mut rng = RngStream::new(0);
        let logits = no_grad(|| self.forward_logits(&frames, false, &mut rng))?;
        let n = clips.len();
        // per-attribute softmax in f64
        let mut per_attr: Vec<Vec<Vec<f64>>> = Vec::with_capacity(logits.len());
        for head in &logits {
            let k = head.shape()[1];
            let data = head.data();
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let row = &data[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f64> = row.iter().map(|v| f64::from(v - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                rows.push(exps.into_iter().map(|e| e / denom).collect());
            }
            per_attr.push(rows);
        }
        (0..n)
            .map(|i| {
                let mut joint = vec![1.0f64];
                for rows in &per_attr {
                    let probs = &rows[i];
                    let mut next = Vec::with_capacity(joint.len() * probs.len());
                    for a in &joint {
                        for p in probs {
                            next.push(a * p);
                        }
                    }
                    joint = next;
                }
                ProbVector::new(joint)
            })
            .collect()
    }

    fn check_geometry(&self, frames: &[Tensor]) -> Result<()> {
        let shape = frames[0].shape();
        let g = self.profile.geom;
        if shape[1] != g.c || shape[2] != g.h || shape[3] != g.w {
            return Err(VvError::Dimension(format!(
                "clip geometry {:?} does not match the classifier profile [{},{},{}]",
                &shape[1..],
                g.c,
                g.h,
                g.w
            )));
        }
        Ok(())
    }

    /// Train encoder, recurrence and heads jointly on labeled clips with
    /// summed per-attribute cross-entropy at the final timestep.
    pub fn train(
        &mut self,
        clips: &[&VideoClip],
        labels: &[AttributeSet],
        epochs: usize,
        batch_size: usize,
        lr: f32,
        seed: u64,
    ) -> Result<()> {
        if clips.is_empty() {
            return Err(VvError::Data("no labeled clips to train on".into()));
        }
        for l in labels {
            self.spec.validate(l)?;
        }
        let mut order_rng = RngStream::derive(seed, 0xda7a);
        let mut noise_rng = RngStream::derive(seed, 0x2015e);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..clips.len()).collect();
            order_rng.shuffle(&mut order);
            for chunk in order.chunks(batch_size.max(1)) {
                let batch: Vec<&VideoClip> = chunk.iter().map(|&i| clips[i]).collect();
                let frames = stack_clip_frames(&batch)?;
                let logits = self.forward_logits(&frames, true, &mut noise_rng)?;
                let mut loss: Option<Tensor> = None;
                for (a, head_logits) in logits.iter().enumerate() {
                    let targets: Vec<usize> =
                        chunk.iter().map(|&i| labels[i].get(a)).collect();
                    let l = head_logits.cross_entropy_with_logits(&targets)?;
                    loss = Some(match loss {
                        Some(acc) => acc.add(&l)?,
                        None => l,
                    });
                }
                loss.unwrap().backward()?;
                self.store.adam_step(lr)?;
            }
        }
        Ok(())
    }

    /// Fraction of clips whose inferred joint label matches.
    pub fn joint_accuracy(&self, clips: &[&VideoClip], labels: &[AttributeSet]) -> Result<f64> {
        if clips.is_empty() {
            return Err(VvError::Parameter("empty evaluation set".into()));
        }
        let inferred = self.infer_batch(clips)?;
        let hits = inferred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / clips.len() as f64)
    }
}

/// Fill in inferred labels for every unlabeled train clip. Given labels
/// are untouched and the `labeled` flag keeps recording provenance
/// (given vs inferred), so a second application is a no-op. Clip files
/// are rewritten so no file carries the unlabeled sentinel afterwards.
pub fn pseudo_label_dataset(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    classifier: &AttributeClassifier,
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    for entry in &mut out.entries {
        if entry.split != Split::Train || entry.labels.is_some() {
            continue;
        }
        let path = dataset_dir.join(&entry.path);
        let mut clip = load_clip(&path)?;
        let inferred = classifier.infer(&clip)?;
        clip.labels = Some(inferred.clone());
        save_clip(&clip, manifest.spec.len(), &path)?;
        entry.labels = Some(inferred);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::generate_clip;

    fn micro_classifier() -> AttributeClassifier {
        AttributeClassifier::new(Profile::micro(), AttributeSpec::sprites(4, 4).unwrap(), 3)
            .unwrap()
    }

    fn micro_clip(joint: usize, seed: u64) -> VideoClip {
        let spec = AttributeSpec::sprites(4, 4).unwrap();
        let attrs = spec.from_joint_index(joint).unwrap();
        generate_clip(&spec, &attrs, 3, Profile::micro().geom, seed, "c").unwrap()
    }

    #[test]
    fn logits_match_attribute_cardinalities() {
        let clf = micro_classifier();
        let clip = micro_clip(5, 1);
        let frames = stack_clip_frames(&[&clip]).unwrap();
        let mut rng = RngStream::new(0);
        let logits = clf.forward_logits(&frames, false, &mut rng).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].shape(), &[1, 4]);
        assert_eq!(logits[1].shape(), &[1, 4]);
    }

    #[test]
    fn inference_is_deterministic() {
        let clf = micro_classifier();
        let clip = micro_clip(7, 2);
        let a = clf.infer(&clip).unwrap();
        let b = clf.infer(&clip).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distribution_sums_to_one_with_joint_width() {
        let clf = micro_classifier();
        let clip = micro_clip(3, 4);
        let p = clf.classify_distribution(&clip).unwrap();
        assert_eq!(p.len(), 16);
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_heads_give_uniform_joint_entropy() {
        // two uniform (0.5, 0.5) attributes -> joint uniform over 4, ln 4
        let p = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((p.entropy() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_heads_give_low_joint_entropy() {
        // max per-attribute prob 0.99 on two binary heads: the product
        // distribution's entropy is 2 * H(0.99) = 0.112 <= 0.12 nats
        let per = [0.99, 0.01];
        let mut joint = Vec::new();
        for a in per {
            for b in per {
                joint.push(a * b);
            }
        }
        let p = ProbVector::new(joint).unwrap();
        assert!(p.entropy() <= 0.12, "entropy {}", p.entropy());
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let mut clf = micro_classifier();
        assert!(matches!(
            clf.train(&[], &[], 1, 4, 1e-3, 1),
            Err(VvError::Data(_))
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let clips: Vec<VideoClip> = (0..8).map(|i| micro_clip(i % 16, 50 + i as u64)).collect();
        let refs: Vec<&VideoClip> = clips.iter().collect();
        let labels: Vec<AttributeSet> =
            clips.iter().map(|c| c.labels.clone().unwrap()).collect();
        let run = || {
            let mut clf = micro_classifier();
            clf.train(&refs, &labels, 2, 4, 1e-3, 9).unwrap();
            clf.store
                .iter()
                .flat_map(|(_, t)| t.to_vec())
                .map(f32::to_bits)
                .collect::<Vec<u32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn geometry_mismatch_is_dimension_error() {
        let clf = micro_classifier();
        let spec = AttributeSpec::sprites(4, 4).unwrap();
        let attrs = spec.from_joint_index(0).unwrap();
        let clip = generate_clip(
            &spec,
            &attrs,
            3,
            crate::sprites::FrameGeometry { h: 32, w: 32, c: 1 },
            1,
            "big",
        )
        .unwrap();
        assert!(matches!(clf.infer(&clip), Err(VvError::Dimension(_))));
    }
}
