//! Procedurally generated attributed sprite clips.
//!
//! A clip shows one sprite whose shape and shade are fixed by the
//! `identity` attribute and whose trajectory is fixed by the `action`
//! attribute. Rendering is closed-form and deterministic in
//! (attributes, seed, frame index), which makes trajectories directly
//! testable and clip generation safely parallel.

mod format;
mod render;

pub use format::{ingest_frame_dir, load_clip, load_manifest, save_clip, save_manifest};
pub use render::{render_frame, sprite_pose, MotionState};

use crate::tensor::RngStream;
use crate::{Result, VvError};

/// Ordered attribute names with category counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpec {
    attrs: Vec<(String, usize)>,
}

impl AttributeSpec {
    pub fn new(attrs: Vec<(String, usize)>) -> Result<Self> {
        if attrs.is_empty() {
            return Err(VvError::Parameter("attribute spec must be non-empty".into()));
        }
        for (name, k) in &attrs {
            if *k < 2 {
                return Err(VvError::Parameter(format!(
                    "attribute {name} must have at least 2 categories, got {k}"
                )));
            }
        }
        Ok(AttributeSpec { attrs })
    }

    /// The default identity x action sprite attributes.
    pub fn sprites(identities: usize, actions: usize) -> Result<Self> {
        Self::new(vec![
            ("identity".into(), identities),
            ("action".into(), actions),
        ])
    }

    pub fn len(&self) -> usize {
        self.attrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attrs.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.attrs[i].0
    }

    pub fn cardinality(&self, i: usize) -> usize {
        self.attrs[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.attrs.iter().map(|(n, k)| (n.as_str(), *k))
    }

    /// Total joint class count K = prod K_i.
    pub fn joint_classes(&self) -> usize {
        self.attrs.iter().map(|(_, k)| k).product()
    }

    /// Width of the concatenated one-hot encoding, sum K_i.
    pub fn one_hot_dim(&self) -> usize {
        self.attrs.iter().map(|(_, k)| k).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|(n, _)| n == name)
    }

    /// Row-major joint index of an attribute combination.
    pub fn joint_index(&self, set: &AttributeSet) -> Result<usize> {
        self.validate(set)?;
        let mut idx = 0;
        for (i, (_, k)) in self.attrs.iter().enumerate() {
            idx = idx * k + set.indices[i];
        }
        Ok(idx)
    }

    pub fn from_joint_index(&self, mut joint: usize) -> Result<AttributeSet> {
        if joint >= self.joint_classes() {
            return Err(VvError::Parameter(format!(
                "joint index {joint} out of range for {} classes",
                self.joint_classes()
            )));
        }
        let mut indices = vec![0; self.attrs.len()];
        for (i, (_, k)) in self.attrs.iter().enumerate().rev() {
            indices[i] = joint % k;
            joint /= k;
        }
        Ok(AttributeSet { indices })
    }

    pub fn validate(&self, set: &AttributeSet) -> Result<()> {
        if set.indices.len() != self.attrs.len() {
            return Err(VvError::Parameter(format!(
                "attribute set has {} entries, spec has {}",
                set.indices.len(),
                self.attrs.len()
            )));
        }
        for (i, (name, k)) in self.attrs.iter().enumerate() {
            if set.indices[i] >= *k {
                return Err(VvError::Parameter(format!(
                    "attribute {name} index {} out of range (< {k})",
                    set.indices[i]
                )));
            }
        }
        Ok(())
    }

    /// Concatenated one-hot vector of an attribute set.
    pub fn one_hot(&self, set: &AttributeSet) -> Result<Vec<f32>> {
        self.validate(set)?;
        let mut v = vec![0.0f32; self.one_hot_dim()];
        let mut base = 0;
        for (i, (_, k)) in self.attrs.iter().enumerate() {
            v[base + set.indices[i]] = 1.0;
            base += k;
        }
        Ok(v)
    }
}

/// One category index per attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeSet {
    indices: Vec<usize>,
}

impl AttributeSet {
    pub fn new(indices: Vec<usize>) -> Self {
        AttributeSet { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn get(&self, i: usize) -> usize {
        self.indices[i]
    }

    pub fn set(&mut self, i: usize, value: usize) {
        self.indices[i] = value;
    }
}

/// T ordered frames with optional ground-truth attributes.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// `t * c * h * w` values in [0, 1], t-major then C, H, W row-major.
    pub frames: Vec<f32>,
    pub labels: Option<AttributeSet>,
    pub clip_id: String,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let plane = self.c * self.h * self.w;
        &self.frames[t * plane..(t + 1) * plane]
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(VvError::Data("clip must have at least one frame".into()));
        }
        if self.frames.len() != self.t * self.frame_len() {
            return Err(VvError::Data(format!(
                "clip {}: frame buffer length {} does not match {}x{}x{}x{}",
                self.clip_id,
                self.frames.len(),
                self.t,
                self.c,
                self.h,
                self.w
            )));
        }
        if self.frames.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VvError::Data(format!(
                "clip {}: frame values outside [0,1]",
                self.clip_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// Clip path relative to the manifest file.
    pub path: String,
    pub split: Split,
    /// True when the label was given at dataset build time (as opposed to
    /// inferred later by pseudo-labeling).
    pub labeled: bool,
    pub labels: Option<AttributeSet>,
}

/// Clip index for one dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub spec: AttributeSpec,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    /// Fraction of train clips whose labels were given (not inferred).
    pub fn labeled_fraction(&self) -> f64 {
        let train: Vec<_> = self.train_entries().collect();
        if train.is_empty() {
            return 0.0;
        }
        train.iter().filter(|e| e.labeled).count() as f64 / train.len() as f64
    }
}

/// Frame geometry of a dataset or model profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Deterministic clip from attributes and a seed: initial pose is drawn
/// from the seeded stream, frames follow the closed-form trajectory.
pub fn generate_clip(
    spec: &AttributeSpec,
    attrs: &AttributeSet,
    t: usize,
    geom: FrameGeometry,
    seed: u64,
    clip_id: &str,
) -> Result<VideoClip> {
    spec.validate(attrs)?;
    if spec.len() != 2 {
        return Err(VvError::Parameter(
            "sprite generator expects exactly (identity, action) attributes".into(),
        ));
    }
    if t < 1 {
        return Err(VvError::Parameter("clip length must be >= 1".into()));
    }
    let mut rng = RngStream::new(seed);
    let state = MotionState::sample(&mut rng, geom);
    let identity = attrs.get(0);
    let action = attrs.get(1);
    let mut frames = Vec::with_capacity(t * geom.c * geom.h * geom.w);
    for ti in 0..t {
        frames.extend_from_slice(&render_frame(identity, action, ti, geom, &state));
    }
    let clip = VideoClip {
        t,
        h: geom.h,
        w: geom.w,
        c: geom.c,
        frames,
        labels: Some(attrs.clone()),
        clip_id: clip_id.to_string(),
    };
    clip.validate()?;
    Ok(clip)
}

/// Balanced dataset: `clips_per_class` train clips for every joint class
/// plus `ceil(clips_per_class / 4)` test clips per class, written under
/// `dir/clips/`. Exactly `ceil(labeled_fraction * n_train)` train clips
/// keep their labels; the rest are written with the unlabeled sentinel.
///
/// Two manifests are written: `manifest.vvmf` is the semi-supervised
/// view the pipeline trains from, `truth.vvmf` keeps every generated
/// label for evaluation (metric-classifier training, pseudo-label
/// agreement). Clip files carry only the semi-supervised view.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    spec: &AttributeSpec,
    clips_per_class: usize,
    t: usize,
    geom: FrameGeometry,
    labeled_fraction: f64,
    seed: u64,
    dir: &std::path::Path,
) -> Result<DatasetManifest> {
    if clips_per_class < 1 {
        return Err(VvError::Parameter("clips_per_class must be >= 1".into()));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(VvError::Parameter(format!(
            "labeled_fraction must be in (0,1], got {labeled_fraction}"
        )));
    }
    let clip_dir = dir.join("clips");
    std::fs::create_dir_all(&clip_dir)?;

    let k = spec.joint_classes();
    let n_train = k * clips_per_class;
    let test_per_class = clips_per_class.div_ceil(4);

    // which train clips keep their labels, chosen uniformly without replacement
    let n_labeled = (labeled_fraction * n_train as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    RngStream::derive(seed, 0x1abe1).shuffle(&mut order);
    let mut keep_label = vec![false; n_train];
    for &i in order.iter().take(n_labeled) {
        keep_label[i] = true;
    }

    let mut entries = Vec::new();
    let mut truth_entries = Vec::new();
    let mut train_idx = 0;
    for joint in 0..k {
        let attrs = spec.from_joint_index(joint)?;
        for rep in 0..clips_per_class {
            let clip_id = format!("train_{joint:03}_{rep:03}");
            let mut clip = generate_clip(
                spec,
                &attrs,
                t,
                geom,
                RngStream::derive(seed, (1 + joint * 1000 + rep) as u64).seed(),
                &clip_id,
            )?;
            let rel = format!("clips/{clip_id}.vvcl");
            truth_entries.push(ManifestEntry {
                path: rel.clone(),
                split: Split::Train,
                labeled: true,
                labels: clip.labels.clone(),
            });
            let labeled = keep_label[train_idx];
            if !labeled {
                clip.labels = None;
            }
            save_clip(&clip, spec.len(), &dir.join(&rel))?;
            entries.push(ManifestEntry {
                path: rel,
                split: Split::Train,
                labeled,
                labels: clip.labels.clone(),
            });
            train_idx += 1;
        }
    }
    for joint in 0..k {
        let attrs = spec.from_joint_index(joint)?;
        for rep in 0..test_per_class {
            let clip_id = format!("test_{joint:03}_{rep:03}");
            let clip = generate_clip(
                spec,
                &attrs,
                t,
                geom,
                RngStream::derive(seed, (0x7e57_0000 + joint * 1000 + rep) as u64).seed(),
                &clip_id,
            )?;
            let rel = format!("clips/{clip_id}.vvcl");
            save_clip(&clip, spec.len(), &dir.join(&rel))?;
            let entry = ManifestEntry {
                path: rel,
                split: Split::Test,
                labeled: true,
                labels: clip.labels.clone(),
            };
            truth_entries.push(entry.clone());
            entries.push(entry);
        }
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
    };
    save_manifest(&manifest, &dir.join("manifest.vvmf"))?;
    save_manifest(
        &DatasetManifest {
            spec: spec.clone(),
            entries: truth_entries,
        },
        &dir.join("truth.vvmf"),
    )?;
    Ok(manifest)
}
