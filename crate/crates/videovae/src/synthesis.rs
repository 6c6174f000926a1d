//! Test-time generation: sample the learned prior at every step, decode,
//! re-encode the decoded frame to drive the recurrence forward.
//!
//! Two initializations: attributes-only starts from a randomly drawn
//! recurrent state and samples frame 1 from the prior; first-frame mode
//! starts from a zero state and emits the reconstruction of the given
//! frame first. Attribute schedules switch the controls at chosen frames
//! for transient control.

use std::path::{Path, PathBuf};

use crate::model::{GaussianParams, HiddenState, VideoVae};
use crate::sprites::{AttributeSet, AttributeSpec, VideoClip};
use crate::tensor::{no_grad, RngStream, Tensor};
use crate::{Result, VvError};

/// Piecewise-constant attribute controls: entry k applies from its start
/// frame (1-based) until the next entry.
#[derive(Debug, Clone)]
pub struct AttributeSchedule {
    entries: Vec<(usize, AttributeSet)>,
}

impl AttributeSchedule {
    pub fn new(entries: Vec<(usize, AttributeSet)>) -> Result<Self> {
        match entries.first() {
            None => return Err(VvError::Parameter("empty attribute schedule".into())),
            Some((start, _)) if *start != 1 => {
                return Err(VvError::Parameter(
                    "attribute schedule must start at frame 1".into(),
                ))
            }
            _ => {}
        }
        if entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(VvError::Parameter(
                "attribute schedule frames must be strictly increasing".into(),
            ));
        }
        Ok(AttributeSchedule { entries })
    }

    pub fn constant(attrs: AttributeSet) -> Self {
        AttributeSchedule {
            entries: vec![(1, attrs)],
        }
    }

    /// Parse `"1:action=0,5:action=3"` on top of base attributes; each
    /// entry carries the previous entry's values for unnamed attributes.
    pub fn parse(text: &str, base: &AttributeSet, spec: &AttributeSpec) -> Result<Self> {
        let mut entries: Vec<(usize, AttributeSet)> = Vec::new();
        let mut current = base.clone();
        for piece in text.split(',') {
            let (frame, assign) = piece.split_once(':').ok_or_else(|| {
                VvError::Parameter(format!("schedule entry {piece:?} must be frame:attr=value"))
            })?;
            let frame: usize = frame.trim().parse().map_err(|_| {
                VvError::Parameter(format!("bad frame number in schedule entry {piece:?}"))
            })?;
            let (name, value) = assign.split_once('=').ok_or_else(|| {
                VvError::Parameter(format!("schedule entry {piece:?} must be frame:attr=value"))
            })?;
            let idx = spec.index_of(name.trim()).ok_or_else(|| {
                VvError::Parameter(format!("unknown attribute {name:?} in schedule"))
            })?;
            let value: usize = value.trim().parse().map_err(|_| {
                VvError::Parameter(format!("bad category index in schedule entry {piece:?}"))
            })?;
            current.set(idx, value);
            spec.validate(&current)?;
            if let Some(last) = entries.last_mut() {
                if last.0 == frame {
                    last.1 = current.clone();
                    continue;
                }
            }
            entries.push((frame, current.clone()));
        }
        Self::new(entries)
    }

    /// Controls active at 1-based frame `t`.
    pub fn at(&self, t: usize) -> &AttributeSet {
        let mut active = &self.entries[0].1;
        for (start, attrs) in &self.entries {
            if *start <= t {
                active = attrs;
            }
        }
        active
    }

    pub fn entries(&self) -> &[(usize, AttributeSet)] {
        &self.entries
    }

    pub fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|(t, a)| {
                format!(
                    "{t}:{}",
                    a.indices()
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join("/")
                )
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub enum GenerationMode {
    AttributesOnly,
    /// Conditioning frame, `C*H*W` row-major in [0, 1].
    FirstFrame(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub mode: GenerationMode,
    pub schedule: AttributeSchedule,
    pub frames: usize,
    pub seed: u64,
    /// Scales the prior sigma during sampling; 1.0 reproduces training
    /// behavior.
    pub temperature: f32,
}

/// Generate one clip.
pub fn generate(model: &VideoVae, request: &GenerationRequest) -> Result<VideoClip> {
    Ok(generate_many(model, request, 1)?.pop().unwrap())
}

/// Generate `count` clips under one request (one shared noise stream, so
/// the whole set is reproducible from the seed).
pub fn generate_many(
    model: &VideoVae,
    request: &GenerationRequest,
    count: usize,
) -> Result<Vec<VideoClip>> {
    if request.frames < 1 {
        return Err(VvError::Parameter("frame count must be >= 1".into()));
    }
    if count < 1 {
        return Err(VvError::Parameter("clip count must be >= 1".into()));
    }
    if !(request.temperature > 0.0) {
        return Err(VvError::Parameter("temperature must be > 0".into()));
    }
    no_grad(|| generate_inner(model, request, count))
}

fn generate_inner(
    model: &VideoVae,
    request: &GenerationRequest,
    n: usize,
) -> Result<Vec<VideoClip>> {
    let mut rng = RngStream::new(request.seed);
    let g = model.profile.geom;
    let d = model.latent_dim();
    let temp = request.temperature;
    let mut decoded_frames: Vec<Tensor> = Vec::with_capacity(request.frames);

    if model.variant.is_static() {
        // per-frame independence: every frame decodes a fresh N(0,I) draw
        for _ in 0..request.frames {
            let mut zd = vec![0.0f32; n * d];
            rng.fill_normal(&mut zd);
            let z = Tensor::from_vec(zd, &[n, d])?.scale(temp);
            decoded_frames.push(model.decode_frame(&z)?);
        }
        return assemble(model, request, decoded_frames, n);
    }

    let one_hot_at = |t: usize| -> Result<Tensor> {
        let row = model.attr_spec.one_hot(request.schedule.at(t))?;
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        Tensor::from_vec(data, &[n, model.attr_spec.one_hot_dim()])
    };

    let mut dropout_rng = RngStream::derive(request.seed, 0xd0);
    let hidden = model.profile.hidden_dim;

    let (mut state, mut z_prev, first) = match &request.mode {
        GenerationMode::AttributesOnly => {
            // random initial state; frame 1 comes straight from the prior
            let state = HiddenState::random(n, hidden, &mut rng);
            let prior = model.prior(&state, &one_hot_at(1)?)?;
            let z = model.sample_latent(&scaled(&prior, temp)?, &mut rng, 1.0)?;
            let x = model.decode_frame(&z)?;
            (state, z, x)
        }
        GenerationMode::FirstFrame(frame) => {
            if frame.len() != g.c * g.h * g.w {
                return Err(VvError::Dimension(format!(
                    "conditioning frame has {} values, profile needs {}",
                    frame.len(),
                    g.c * g.h * g.w
                )));
            }
            let mut data = Vec::with_capacity(n * frame.len());
            for _ in 0..n {
                data.extend_from_slice(frame);
            }
            let x0 = Tensor::from_vec(data, &[n, g.c, g.h, g.w])?;
            let state = HiddenState::zeros(n, hidden);
            // frame 1 is the reconstruction of the input
            let features = model.encode_frame(&x0, false, &mut dropout_rng)?;
            let residual = model.residual_posterior(&features)?;
            let stage = if model.variant.is_structured() {
                model.attribute_posterior(&residual, &one_hot_at(1)?)?
            } else {
                residual
            };
            let dynamic = model.dynamic_posterior(&stage, &state)?;
            let z = model.sample_latent(&dynamic, &mut rng, 1.0)?;
            let x = model.decode_frame(&z)?;
            (state, z, x)
        }
    };
    decoded_frames.push(first);

    for t in 2..=request.frames {
        // re-encode the decoded frame to obtain the residual posterior
        // that drives the recurrence
        let prev = decoded_frames.last().unwrap();
        let features = model.encode_frame(prev, false, &mut dropout_rng)?;
        let residual = model.residual_posterior(&features)?;
        state = model.recurrence_step(&residual, &z_prev, &state)?;
        let prior = model.prior(&state, &one_hot_at(t)?)?;
        z_prev = model.sample_latent(&scaled(&prior, temp)?, &mut rng, 1.0)?;
        decoded_frames.push(model.decode_frame(&z_prev)?);
    }
    assemble(model, request, decoded_frames, n)
}

fn scaled(psi: &GaussianParams, temperature: f32) -> Result<GaussianParams> {
    if temperature == 1.0 {
        return Ok(psi.clone());
    }
    // sigma' = temperature * sigma, i.e. log_var' = log_var + 2 ln(temp)
    Ok(GaussianParams {
        mu: psi.mu.clone(),
        log_var: psi.log_var.add_scalar(2.0 * temperature.ln()),
    })
}

fn assemble(
    model: &VideoVae,
    request: &GenerationRequest,
    decoded: Vec<Tensor>,
    n: usize,
) -> Result<Vec<VideoClip>> {
    let g = model.profile.geom;
    let plane = g.c * g.h * g.w;
    let labels = if model.variant.is_structured() {
        Some(request.schedule.at(1).clone())
    } else {
        None
    };
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let mut frames = Vec::with_capacity(request.frames * plane);
        for tensor in &decoded {
            let data = tensor.data();
            frames.extend_from_slice(&data[i * plane..(i + 1) * plane]);
        }
        // sigmoid keeps values in (0,1); clamp guards the boundary
        for v in &mut frames {
            *v = v.clamp(0.0, 1.0);
        }
        clips.push(VideoClip {
            t: request.frames,
            h: g.h,
            w: g.w,
            c: g.c,
            frames,
            labels: labels.clone(),
            clip_id: format!("gen_{:016x}_{i:04}", request.seed),
        });
    }
    Ok(clips)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
}

impl ImageFormat {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "ppm" => Ok(ImageFormat::Ppm),
            other => Err(VvError::Parameter(format!(
                "unknown image format {other:?} (expected pgm or ppm)"
            ))),
        }
    }

    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Ppm => "ppm",
        }
    }
}

/// One image per frame under `dir`, named `frame_0000.<ext>` onward.
/// PGM (P5) carries single-channel clips, PPM (P6) three-channel ones;
/// pixel values are quantized exactly as the clip file format.
pub fn export_frames(clip: &VideoClip, dir: &Path, format: ImageFormat) -> Result<Vec<PathBuf>> {
    clip.validate()?;
    match (format, clip.c) {
        (ImageFormat::Pgm, 1) | (ImageFormat::Ppm, 3) => {}
        _ => {
            return Err(VvError::Parameter(format!(
                "{} export needs {} channels, clip has {}",
                format.extension(),
                if format == ImageFormat::Pgm { 1 } else { 3 },
                clip.c
            )))
        }
    }
    std::fs::create_dir_all(dir)?;
    let plane = clip.h * clip.w;
    let mut paths = Vec::with_capacity(clip.t);
    for t in 0..clip.t {
        let frame = clip.frame(t);
        let magic = if format == ImageFormat::Pgm { "P5" } else { "P6" };
        let mut buf = format!("{magic}\n{} {}\n255\n", clip.w, clip.h).into_bytes();
        for px in 0..plane {
            for ch in 0..clip.c {
                buf.push((frame[ch * plane + px] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        let path = dir.join(format!("frame_{t:04}.{}", format.extension()));
        std::fs::write(&path, buf)?;
        paths.push(path);
    }
    Ok(paths)
}
