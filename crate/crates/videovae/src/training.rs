//! Two-stage semi-supervised pipeline.
//!
//! Stage 1 trains the attribute classifier on the given-label subset and
//! pseudo-labels the remaining train clips. Stage 2 optimizes the
//! generative model against the timestep-wise bound with every clip's
//! attributes held fixed. The stages keep disjoint parameter stores.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attributes::{pseudo_label_dataset, AttributeClassifier};
use crate::checkpoint::{
    check_profile, load_into_store, read_checkpoint, write_checkpoint, CheckpointRole,
    RawCheckpoint,
};
use crate::config::RunConfig;
use crate::model::{ClipBatch, Profile, VariantKind, VideoVae};
use crate::objective::sequence_elbo;
use crate::sprites::{load_clip, save_manifest, AttributeSet, DatasetManifest, VideoClip};
use crate::tensor::RngStream;
use crate::{Result, VvError};

/// Resolved training hyperparameters plus the config echo that produced
/// them; the echo is embedded into every checkpoint.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub profile: Profile,
    pub variant: VariantKind,
    pub epochs: usize,
    pub classifier_epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub beta: f32,
    pub kl_warmup_steps: usize,
    pub seed: u64,
    pub snapshot_interval: usize,
    pub config_echo: String,
}

/// Profile named by the config, with optional width overrides.
pub fn profile_from_config(cfg: &RunConfig) -> Result<Profile> {
    let mut profile = Profile::by_name(cfg.require("model.profile")?)?;
    if let Some(d) = cfg.get("model.latent_dim") {
        if !d.is_empty() {
            profile.latent_dim = d.parse().map_err(|_| {
                VvError::Parameter("model.latent_dim must be an integer".into())
            })?;
        }
    }
    if let Some(h) = cfg.get("model.hidden_dim") {
        if !h.is_empty() {
            profile.hidden_dim = h.parse().map_err(|_| {
                VvError::Parameter("model.hidden_dim must be an integer".into())
            })?;
        }
    }
    Ok(profile)
}

pub fn variant_from_config(cfg: &RunConfig) -> Result<VariantKind> {
    Ok(VariantKind::Recurrent {
        conditional: cfg.get_bool("model.C")?,
        structured: cfg.get_bool("model.S")?,
    })
}

impl TrainConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Result<Self> {
        let cfg = cfg.resolve();
        Ok(TrainConfig {
            profile: profile_from_config(&cfg)?,
            variant: variant_from_config(&cfg)?,
            epochs: cfg.get_usize("train.epochs")?,
            classifier_epochs: cfg.get_usize("train.classifier_epochs")?,
            batch: cfg.get_usize("train.batch")?.max(1),
            lr: cfg.get_f32("train.lr")?,
            beta: cfg.get_f32("train.beta")?,
            kl_warmup_steps: cfg.get_usize("train.kl_warmup_steps")?,
            seed: cfg.get_u64("train.seed")?,
            snapshot_interval: cfg.get_usize("train.snapshot_interval")?.max(1),
            config_echo: cfg.to_text(),
        })
    }

    fn echo_with_steps(&self, steps: u64) -> String {
        format!("# steps = {steps}\n{}", self.config_echo)
    }
}

fn load_entries(
    manifest: &DatasetManifest,
    dir: &Path,
    filter: impl Fn(&crate::sprites::ManifestEntry) -> bool,
) -> Result<(Vec<VideoClip>, Vec<Option<AttributeSet>>)> {
    let mut clips = Vec::new();
    let mut labels = Vec::new();
    for entry in manifest.entries.iter().filter(|e| filter(e)) {
        clips.push(load_clip(&dir.join(&entry.path))?);
        labels.push(entry.labels.clone());
    }
    Ok((clips, labels))
}

pub struct Stage1Output {
    pub classifier: AttributeClassifier,
    pub checkpoint_path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Stage 1: train the attribute classifier on clips whose labels were
/// given, pseudo-label the rest, and persist both artifacts.
pub fn train_stage1(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage1Output> {
    fs::create_dir_all(out_dir)?;
    let (clips, labels) = load_entries(manifest, dataset_dir, |e| {
        e.split == crate::sprites::Split::Train && e.labeled && e.labels.is_some()
    })?;
    if clips.is_empty() {
        return Err(VvError::Data("stage 1 requires labeled train clips".into()));
    }
    let labels: Vec<AttributeSet> = labels.into_iter().map(Option::unwrap).collect();
    let refs: Vec<&VideoClip> = clips.iter().collect();

    let mut classifier =
        AttributeClassifier::new(cfg.profile.clone(), manifest.spec.clone(), cfg.seed)?;
    classifier.train(
        &refs,
        &labels,
        cfg.classifier_epochs,
        cfg.batch,
        cfg.lr,
        cfg.seed,
    )?;

    let checkpoint_path = out_dir.join("classifier_attribute.vvck");
    let steps = (cfg.classifier_epochs * clips.len().div_ceil(cfg.batch)) as u64;
    write_checkpoint(
        &checkpoint_path,
        CheckpointRole::Attribute,
        VariantKind::Static,
        &cfg.profile,
        &cfg.echo_with_steps(steps),
        &classifier.store,
        false,
    )?;

    let relabeled = pseudo_label_dataset(manifest, dataset_dir, &classifier)?;
    save_manifest(&relabeled, &dataset_dir.join("manifest.vvmf"))?;

    Ok(Stage1Output {
        classifier,
        checkpoint_path,
        manifest: relabeled,
    })
}

/// Train the evaluation classifier on the fully labeled truth manifest,
/// with a seed independent of stage 1.
pub fn train_metric_classifier(
    truth: &DatasetManifest,
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(AttributeClassifier, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let (clips, labels) = load_entries(truth, dataset_dir, |e| {
        e.split == crate::sprites::Split::Train && e.labels.is_some()
    })?;
    if clips.is_empty() {
        return Err(VvError::Data(
            "metric classifier requires labeled train clips".into(),
        ));
    }
    let labels: Vec<AttributeSet> = labels.into_iter().map(Option::unwrap).collect();
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let seed = RngStream::derive(cfg.seed, 0x3e7).seed();
    let mut classifier =
        AttributeClassifier::new(cfg.profile.clone(), truth.spec.clone(), seed)?;
    classifier.train(&refs, &labels, cfg.classifier_epochs, cfg.batch, cfg.lr, seed)?;
    let path = out_dir.join("classifier_metric.vvck");
    let steps = (cfg.classifier_epochs * clips.len().div_ceil(cfg.batch)) as u64;
    write_checkpoint(
        &path,
        CheckpointRole::Metric,
        VariantKind::Static,
        &cfg.profile,
        &cfg.echo_with_steps(steps),
        &classifier.store,
        false,
    )?;
    Ok((classifier, path))
}

pub struct Stage2Output {
    pub model: VideoVae,
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
    pub first_total: f32,
    pub final_total: f32,
    pub steps: u64,
}

/// Stage 2: optimize the generative model on the pseudo-labeled manifest.
/// Every train clip must carry labels (given or inferred) by now.
pub fn train_stage2(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Stage2Output> {
    fs::create_dir_all(out_dir)?;
    let (clips, labels) = load_entries(manifest, dataset_dir, |e| {
        e.split == crate::sprites::Split::Train
    })?;
    if clips.is_empty() {
        return Err(VvError::Data("stage 2 requires train clips".into()));
    }
    if labels.iter().any(Option::is_none) {
        return Err(VvError::Contract(
            "stage 2 found unlabeled train clips; run stage 1 first".into(),
        ));
    }
    let labels: Vec<AttributeSet> = labels.into_iter().map(Option::unwrap).collect();

    let mut model = VideoVae::new(
        cfg.profile.clone(),
        manifest.spec.clone(),
        cfg.variant,
        cfg.seed,
    )?;

    let loss_csv_path = out_dir.join("loss.csv");
    let mut csv = String::from("step,total,recon,kl\n");

    let mut order_rng = RngStream::derive(cfg.seed, 0xda7a);
    let mut noise_rng = RngStream::derive(cfg.seed, 0x7015e);
    let mut step = 0u64;
    let mut first_total = f32::NAN;
    let mut last_total = f32::NAN;
    let mut best_total = f32::INFINITY;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let batch_clips: Vec<&VideoClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let batch_attrs: Vec<AttributeSet> =
                chunk.iter().map(|&i| labels[i].clone()).collect();
            let batch = ClipBatch::new(&batch_clips, &batch_attrs, &manifest.spec)?;
            let records = model.forward_train(&batch, &mut noise_rng, true)?;
            let beta = if cfg.kl_warmup_steps > 0 && (step as usize) < cfg.kl_warmup_steps {
                cfg.beta * step as f32 / cfg.kl_warmup_steps as f32
            } else {
                cfg.beta
            };
            let report = sequence_elbo(&records, &batch, beta)?;
            let total = report.total.item()?;
            if !total.is_finite() {
                return Err(VvError::Numerical(format!(
                    "non-finite loss at step {step}"
                )));
            }
            if report.kl_per_t.iter().any(|k| *k < -1e-6) {
                return Err(VvError::Numerical(format!(
                    "negative KL at step {step}: {:?}",
                    report.kl_per_t
                )));
            }
            report.total.backward()?;
            model.store.adam_step(cfg.lr)?;

            csv.push_str(&format!(
                "{step},{total},{},{}\n",
                report.recon_sum(),
                report.kl_sum()
            ));
            if step == 0 {
                first_total = total;
            }
            last_total = total;
            step += 1;

            if step % cfg.snapshot_interval as u64 == 0 {
                write_checkpoint(
                    &out_dir.join("snapshot_last.vvck"),
                    CheckpointRole::VideoVae,
                    cfg.variant,
                    &cfg.profile,
                    &cfg.echo_with_steps(step),
                    &model.store,
                    true,
                )?;
                if total < best_total {
                    best_total = total;
                    write_checkpoint(
                        &out_dir.join("snapshot_best.vvck"),
                        CheckpointRole::VideoVae,
                        cfg.variant,
                        &cfg.profile,
                        &cfg.echo_with_steps(step),
                        &model.store,
                        false,
                    )?;
                }
            }
        }
    }

    fs::write(&loss_csv_path, csv)?;
    let checkpoint_path = out_dir.join("model.vvck");
    write_checkpoint(
        &checkpoint_path,
        CheckpointRole::VideoVae,
        cfg.variant,
        &cfg.profile,
        &cfg.echo_with_steps(step),
        &model.store,
        true,
    )?;

    Ok(Stage2Output {
        model,
        checkpoint_path,
        loss_csv_path,
        first_total,
        final_total: last_total,
        steps: step,
    })
}

fn rebuild_profile(raw: &RawCheckpoint) -> Result<(Profile, RunConfig)> {
    let echo = RunConfig::parse(&raw.config_echo)?;
    let resolved = echo.resolve();
    let profile = profile_from_config(&resolved)?;
    check_profile(raw, &profile)?;
    Ok((profile, resolved))
}

fn attr_spec_from_config(cfg: &RunConfig) -> Result<crate::sprites::AttributeSpec> {
    crate::sprites::AttributeSpec::sprites(
        cfg.get_usize("dataset.identities")?,
        cfg.get_usize("dataset.actions")?,
    )
}

/// Restore a generative model; the checkpoint's role byte must say it is
/// one.
pub fn load_model(path: &Path) -> Result<VideoVae> {
    let raw = read_checkpoint(path)?;
    if raw.role != CheckpointRole::VideoVae {
        return Err(VvError::Data(format!(
            "checkpoint role is {:?}, expected a generative model",
            raw.role.as_str()
        )));
    }
    let (profile, cfg) = rebuild_profile(&raw)?;
    let spec = attr_spec_from_config(&cfg)?;
    let mut model = VideoVae::new(profile, spec, raw.variant, 0)?;
    load_into_store(&raw, &mut model.store)?;
    Ok(model)
}

/// Restore a classifier; `expected_role` of `None` accepts either the
/// attribute or the metric role.
pub fn load_classifier(
    path: &Path,
    expected_role: Option<CheckpointRole>,
) -> Result<AttributeClassifier> {
    let raw = read_checkpoint(path)?;
    match (raw.role, expected_role) {
        (CheckpointRole::VideoVae, _) => {
            return Err(VvError::Data(
                "checkpoint role is a generative model, expected a classifier".into(),
            ))
        }
        (actual, Some(expected)) if actual != expected => {
            return Err(VvError::Data(format!(
                "checkpoint role is {:?}, expected {:?}",
                actual.as_str(),
                expected.as_str()
            )))
        }
        _ => {}
    }
    let (profile, cfg) = rebuild_profile(&raw)?;
    let spec = attr_spec_from_config(&cfg)?;
    let mut classifier = AttributeClassifier::new(profile, spec, 0)?;
    load_into_store(&raw, &mut classifier.store)?;
    Ok(classifier)
}
