//! The generative video model: frame encoder, hierarchical conditional
//! posteriors, learned temporal prior, decoder, and the recurrence that
//! couples them, with ablation variants.
//!
//! Per frame the latent hierarchy runs residual -> attribute -> dynamic:
//! the residual posterior comes from the encoded frame alone, the
//! attribute posterior merges in the holistic controls, and the dynamic
//! posterior merges in the recurrent state. The prior is a function of
//! the recurrent state (and the controls), so at generation time it
//! predicts the next latent from history alone.

mod layers;

pub use layers::{Conv2d, ConvTranspose2d, Dense, Init, LstmCell, MlpBlock};

use crate::sprites::{AttributeSet, AttributeSpec, FrameGeometry, VideoClip};
use crate::tensor::{ParameterStore, RngStream, Tensor};
use crate::{Result, VvError};

/// One conv layer of an encoder chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Architecture profile: geometry plus layer widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub name: String,
    pub geom: FrameGeometry,
    /// Latent dimension d, shared by every distribution in the hierarchy.
    pub latent_dim: usize,
    /// LSTM hidden width; also the hidden width of the small MLP heads.
    pub hidden_dim: usize,
    /// Hidden width of the encoder/decoder fully-connected head.
    pub head_hidden: usize,
    pub conv_chain: Vec<ConvSpec>,
}

impl Profile {
    /// 64x64x3 profile with the full-scale encoder
    /// conv(9,10,1) -> conv(7,20,3) -> conv(5,40,1) -> conv(3,80,3),
    /// flatten 1280 -> 1024 -> 512, latent 512, LSTM hidden 512.
    pub fn paper() -> Self {
        Profile {
            name: "paper".into(),
            geom: FrameGeometry { h: 64, w: 64, c: 3 },
            latent_dim: 512,
            hidden_dim: 512,
            head_hidden: 1024,
            conv_chain: vec![
                ConvSpec { kernel: 9, channels: 10, stride: 1 },
                ConvSpec { kernel: 7, channels: 20, stride: 3 },
                ConvSpec { kernel: 5, channels: 40, stride: 1 },
                ConvSpec { kernel: 3, channels: 80, stride: 3 },
            ],
        }
    }

    /// 32x32x1 desk-scale profile: latent 64, LSTM hidden 128.
    pub fn desk() -> Self {
        Profile {
            name: "desk".into(),
            geom: FrameGeometry { h: 32, w: 32, c: 1 },
            latent_dim: 64,
            hidden_dim: 128,
            head_hidden: 256,
            conv_chain: vec![
                ConvSpec { kernel: 5, channels: 16, stride: 1 },
                ConvSpec { kernel: 5, channels: 32, stride: 2 },
                ConvSpec { kernel: 3, channels: 64, stride: 2 },
            ],
        }
    }

    /// 8x8x1 profile, small enough for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Profile {
            name: "micro".into(),
            geom: FrameGeometry { h: 8, w: 8, c: 1 },
            latent_dim: 8,
            hidden_dim: 16,
            head_hidden: 16,
            conv_chain: vec![
                ConvSpec { kernel: 3, channels: 4, stride: 1 },
                ConvSpec { kernel: 3, channels: 8, stride: 2 },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            other => Err(VvError::Parameter(format!("unknown profile {other:?}"))),
        }
    }

    /// Spatial sizes along the encoder: `[H, h1, ..., hn]`.
    pub fn spatial_chain(&self) -> Vec<usize> {
        let mut dims = vec![self.geom.h];
        for conv in &self.conv_chain {
            let prev = *dims.last().unwrap();
            dims.push((prev - conv.kernel) / conv.stride + 1);
        }
        dims
    }

    /// Flattened feature count after the last conv.
    pub fn flatten_len(&self) -> usize {
        let side = *self.spatial_chain().last().unwrap();
        self.conv_chain.last().unwrap().channels * side * side
    }
}

/// Which ablation row a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    /// Per-frame VAE with a fixed standard-normal prior and no recurrence;
    /// generated frames are independent.
    Static,
    Recurrent {
        /// +C: the drawn latent sample feeds the recurrence.
        conditional: bool,
        /// +S: attribute-structured latent hierarchy.
        structured: bool,
    },
}

impl VariantKind {
    pub fn full() -> Self {
        VariantKind::Recurrent {
            conditional: true,
            structured: true,
        }
    }

    pub fn is_structured(&self) -> bool {
        matches!(
            self,
            VariantKind::Recurrent {
                structured: true,
                ..
            }
        )
    }

    pub fn is_conditional(&self) -> bool {
        matches!(
            self,
            VariantKind::Recurrent {
                conditional: true,
                ..
            }
        )
    }

    pub fn is_static(&self) -> bool {
        matches!(self, VariantKind::Static)
    }

    /// Report label: "static", "-C-S", "+C-S", "-C+S", "+C+S".
    pub fn label(&self) -> String {
        match self {
            VariantKind::Static => "static".into(),
            VariantKind::Recurrent {
                conditional,
                structured,
            } => format!(
                "{}C{}S",
                if *conditional { "+" } else { "-" },
                if *structured { "+" } else { "-" }
            ),
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "static" => Ok(VariantKind::Static),
            "-C-S" => Ok(VariantKind::Recurrent { conditional: false, structured: false }),
            "+C-S" => Ok(VariantKind::Recurrent { conditional: true, structured: false }),
            "-C+S" => Ok(VariantKind::Recurrent { conditional: false, structured: true }),
            "+C+S" => Ok(VariantKind::Recurrent { conditional: true, structured: true }),
            other => Err(VvError::Parameter(format!("unknown variant {other:?}"))),
        }
    }

    /// All five ablation rows in report order.
    pub fn ablation_grid() -> Vec<VariantKind> {
        vec![
            VariantKind::Static,
            VariantKind::Recurrent { conditional: false, structured: false },
            VariantKind::Recurrent { conditional: true, structured: false },
            VariantKind::Recurrent { conditional: false, structured: true },
            VariantKind::Recurrent { conditional: true, structured: true },
        ]
    }
}

/// Diagonal Gaussian over a batch: `mu`, `log_var` of shape [N, d].
/// `log_var` is clamped to [-10, 10], so sigma stays in [e^-5, e^5].
#[derive(Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_var: Tensor,
}

pub const LOG_VAR_CLAMP: f32 = 10.0;

impl GaussianParams {
    /// Split a raw `[N, 2d]` head output into (mu, clamped log-var).
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let dims = raw.shape();
        if dims.len() != 2 || dims[1] % 2 != 0 {
            return Err(VvError::Dimension(format!(
                "distribution head output must be [N, 2d], got {dims:?}"
            )));
        }
        let d = dims[1] / 2;
        Ok(GaussianParams {
            mu: raw.narrow(1, 0, d)?,
            log_var: raw.narrow(1, d, d)?.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP),
        })
    }

    /// Standard normal N(0, I) for a batch.
    pub fn standard(n: usize, d: usize) -> Self {
        GaussianParams {
            mu: Tensor::zeros(&[n, d]),
            log_var: Tensor::zeros(&[n, d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    /// `mu ++ log_var` along the feature axis: how a distribution enters
    /// another network.
    pub fn as_features(&self) -> Result<Tensor> {
        Tensor::concat(&[self.mu.clone(), self.log_var.clone()], 1)
    }

    pub fn sigma(&self) -> Tensor {
        self.log_var.scale(0.5).exp()
    }
}

/// Recurrent state (hidden and cell vectors).
#[derive(Clone)]
pub struct HiddenState {
    pub h: Tensor,
    pub c: Tensor,
}

impl HiddenState {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        HiddenState {
            h: Tensor::zeros(&[n, hidden]),
            c: Tensor::zeros(&[n, hidden]),
        }
    }

    pub fn random(n: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut h = vec![0.0f32; n * hidden];
        let mut c = vec![0.0f32; n * hidden];
        rng.fill_normal(&mut h);
        rng.fill_normal(&mut c);
        HiddenState {
            h: Tensor::from_vec(h, &[n, hidden]).unwrap(),
            c: Tensor::from_vec(c, &[n, hidden]).unwrap(),
        }
    }
}

/// Everything recorded at one timestep of a training forward pass.
pub struct StepRecord {
    pub residual: GaussianParams,
    pub attribute: Option<GaussianParams>,
    pub dynamic: GaussianParams,
    pub prior: GaussianParams,
    pub z: Tensor,
    pub decoded: Tensor,
}

/// A batch of equal-length clips staged as per-timestep tensors.
pub struct ClipBatch {
    pub frames: Vec<Tensor>,
    pub one_hot: Tensor,
    pub n: usize,
    pub t: usize,
}

/// Stack equal-geometry clips into per-timestep `[N,C,H,W]` tensors.
pub fn stack_clip_frames(clips: &[&VideoClip]) -> Result<Vec<Tensor>> {
    let first = clips
        .first()
        .ok_or_else(|| VvError::Parameter("empty clip batch".into()))?;
    let (t, h, w, c) = (first.t, first.h, first.w, first.c);
    for clip in clips {
        if (clip.t, clip.h, clip.w, clip.c) != (t, h, w, c) {
            return Err(VvError::Contract(format!(
                "clip {} geometry mismatch within batch",
                clip.clip_id
            )));
        }
    }
    let n = clips.len();
    let plane = c * h * w;
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let mut data = Vec::with_capacity(n * plane);
        for clip in clips {
            data.extend_from_slice(clip.frame(ti));
        }
        frames.push(Tensor::from_vec(data, &[n, c, h, w])?);
    }
    Ok(frames)
}

impl ClipBatch {
    pub fn new(
        clips: &[&VideoClip],
        attrs: &[AttributeSet],
        spec: &AttributeSpec,
    ) -> Result<Self> {
        if clips.len() != attrs.len() {
            return Err(VvError::Contract(format!(
                "{} clips but {} attribute sets",
                clips.len(),
                attrs.len()
            )));
        }
        let frames = stack_clip_frames(clips)?;
        let n = clips.len();
        let t = frames.len();
        let mut oh = Vec::with_capacity(n * spec.one_hot_dim());
        for a in attrs {
            oh.extend(spec.one_hot(a)?);
        }
        let one_hot = Tensor::from_vec(oh, &[n, spec.one_hot_dim()])?;
        Ok(ClipBatch {
            frames,
            one_hot,
            n,
            t,
        })
    }
}

/// The model. Owns its parameters; all forward methods build (or skip, in
/// inference mode) the reverse-mode graph.
pub struct VideoVae {
    pub profile: Profile,
    pub attr_spec: AttributeSpec,
    pub variant: VariantKind,
    pub store: ParameterStore,

    enc_convs: Vec<Conv2d>,
    enc_head1: Dense,
    enc_head2: Dense,

    residual_head: MlpBlock,
    attribute_head: Option<MlpBlock>,
    dynamic_state_embed: Option<MlpBlock>,
    dynamic_head: Option<MlpBlock>,
    prior_state_embed: Option<MlpBlock>,
    prior_head: Option<MlpBlock>,
    recurrence: Option<LstmCell>,

    dec_head1: Dense,
    dec_head2: Dense,
    dec_deconvs: Vec<ConvTranspose2d>,
    dec_proj: Conv2d,

    pub dropout_rate: f32,
}

impl VideoVae {
    pub fn new(
        profile: Profile,
        attr_spec: AttributeSpec,
        variant: VariantKind,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParameterStore::new();
        let mut rng = RngStream::derive(seed, 0x0de1);
        let d = profile.latent_dim;
        let hidden = profile.hidden_dim;
        let onehot = attr_spec.one_hot_dim();
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
        let enc_head1 = Dense::new(&mut store, "enc.head1", flat, profile.head_hidden, Init::Uniform, &mut rng)?;
        let enc_head2 = Dense::new(&mut store, "enc.head2", profile.head_hidden, d, Init::Uniform, &mut rng)?;

        let residual_head = MlpBlock::new(
            &mut store, "posterior.residual", d, hidden, 2 * d, Init::Zero, &mut rng,
        )?;

        let structured = variant.is_structured();
        let recurrent = !variant.is_static();

        let attribute_head = structured
            .then(|| {
                MlpBlock::new(
                    &mut store, "posterior.attribute", 2 * d + onehot, hidden, 2 * d, Init::Zero, &mut rng,
                )
            })
            .transpose()?;

        let (dynamic_state_embed, dynamic_head, prior_state_embed, prior_head, recurrence) =
            if recurrent {
                let dse = MlpBlock::new(
                    &mut store, "posterior.state_embed", hidden, hidden, d, Init::Uniform, &mut rng,
                )?;
                let dh = MlpBlock::new(
                    &mut store, "posterior.dynamic", 2 * d + d, hidden, 2 * d, Init::Zero, &mut rng,
                )?;
                let pse = MlpBlock::new(
                    &mut store, "prior.state_embed", hidden, hidden, d, Init::Uniform, &mut rng,
                )?;
                let prior_in = if structured { d + onehot } else { d };
                let ph = MlpBlock::new(
                    &mut store, "prior.head", prior_in, hidden, 2 * d, Init::Zero, &mut rng,
                )?;
                let lstm = LstmCell::new(&mut store, "recurrence", 3 * d, hidden, &mut rng)?;
                (Some(dse), Some(dh), Some(pse), Some(ph), Some(lstm))
            } else {
                (None, None, None, None, None)
            };

        // decoder mirrors the encoder: reversed kernels/strides, output
        // padding chosen so each stage lands exactly on the encoder size
        let dims = profile.spatial_chain();
        let n_convs = profile.conv_chain.len();
        let mut dec_deconvs = Vec::new();
        let mut ch = profile.conv_chain.last().unwrap().channels;
        for i in 0..n_convs {
            let conv = &profile.conv_chain[n_convs - 1 - i];
            let src = dims[n_convs - i];
            let dst = dims[n_convs - 1 - i];
            let output_padding = dst - ((src - 1) * conv.stride + conv.kernel);
            let out_ch = conv.channels;
            dec_deconvs.push(ConvTranspose2d::new(
                &mut store,
                &format!("dec.deconv{i}"),
                ch,
                out_ch,
                conv.kernel,
                conv.stride,
                output_padding,
                &mut rng,
            )?);
            ch = out_ch;
        }
        let dec_head1 = Dense::new(&mut store, "dec.head1", d, profile.head_hidden, Init::Uniform, &mut rng)?;
        let dec_head2 = Dense::new(&mut store, "dec.head2", profile.head_hidden, flat, Init::Uniform, &mut rng)?;
        let dec_proj = Conv2d::new(&mut store, "dec.proj", ch, profile.geom.c, 1, 1, &mut rng)?;

        Ok(VideoVae {
            profile,
            attr_spec,
            variant,
            store,
            enc_convs,
            enc_head1,
            enc_head2,
            residual_head,
            attribute_head,
            dynamic_state_embed,
            dynamic_head,
            prior_state_embed,
            prior_head,
            recurrence,
            dec_head1,
            dec_head2,
            dec_deconvs,
            dec_proj,
            dropout_rate: 0.5,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.profile.latent_dim
    }

    /// Frame batch `[N,C,H,W]` to features `[N,d]`. Dropout is live only
    /// in training mode, so eval-mode encoding is deterministic.
    pub fn encode_frame(
        &self,
        x: &Tensor,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        let shape = x.shape();
        let g = self.profile.geom;
        if shape.len() != 4 || shape[1] != g.c || shape[2] != g.h || shape[3] != g.w {
            return Err(VvError::Dimension(format!(
                "encode_frame: expected [N,{},{},{}], got {shape:?}",
                g.c, g.h, g.w
            )));
        }
        let mut y = x.clone();
        for conv in &self.enc_convs {
            y = conv.forward(&y)?.relu();
        }
        y = y.dropout(self.dropout_rate, rng, training)?;
        let n = y.shape()[0];
        let flat = y.reshape(&[n, self.profile.flatten_len()])?;
        self.enc_head2.forward(&self.enc_head1.forward(&flat)?.relu())
    }

    /// Residual posterior from frame features alone.
    pub fn residual_posterior(&self, features: &Tensor) -> Result<GaussianParams> {
        GaussianParams::from_raw(&self.residual_head.forward(features)?)
    }

    /// Attribute-conditioned posterior (structured variants only).
    pub fn attribute_posterior(
        &self,
        residual: &GaussianParams,
        one_hot: &Tensor,
    ) -> Result<GaussianParams> {
        let head = self.attribute_head.as_ref().ok_or_else(|| {
            VvError::Contract(
                "attribute_posterior called on a variant without a structured latent space".into(),
            )
        })?;
        let input = Tensor::concat(
            &[residual.mu.clone(), residual.log_var.clone(), one_hot.clone()],
            1,
        )?;
        GaussianParams::from_raw(&head.forward(&input)?)
    }

    /// Dynamic posterior: merges the previous recurrent state into the
    /// given posterior stage (attribute stage when structured, residual
    /// stage otherwise).
    pub fn dynamic_posterior(
        &self,
        stage: &GaussianParams,
        state: &HiddenState,
    ) -> Result<GaussianParams> {
        let embed = self
            .dynamic_state_embed
            .as_ref()
            .ok_or_else(|| VvError::Contract("dynamic_posterior on the static variant".into()))?;
        let head = self.dynamic_head.as_ref().unwrap();
        let h_feat = embed.forward(&state.h)?;
        let input = Tensor::concat(&[stage.mu.clone(), stage.log_var.clone(), h_feat], 1)?;
        GaussianParams::from_raw(&head.forward(&input)?)
    }

    /// Learned prior from the previous state (and, when structured, the
    /// attribute controls). The static variant's prior is fixed N(0, I).
    pub fn prior(&self, state: &HiddenState, one_hot: &Tensor) -> Result<GaussianParams> {
        if self.variant.is_static() {
            return Ok(GaussianParams::standard(
                state.h.shape()[0],
                self.latent_dim(),
            ));
        }
        let embed = self.prior_state_embed.as_ref().unwrap();
        let head = self.prior_head.as_ref().unwrap();
        let h_feat = embed.forward(&state.h)?;
        let input = if self.variant.is_structured() {
            Tensor::concat(&[h_feat, one_hot.clone()], 1)?
        } else {
            h_feat
        };
        GaussianParams::from_raw(&head.forward(&input)?)
    }

    /// Reparameterized draw: z = mu + temperature * sigma * eps.
    pub fn sample_latent(
        &self,
        psi: &GaussianParams,
        rng: &mut RngStream,
        temperature: f32,
    ) -> Result<Tensor> {
        let n = psi.batch() * psi.dim();
        let mut eps = vec![0.0f32; n];
        rng.fill_normal(&mut eps);
        let eps = Tensor::from_vec(eps, psi.mu.shape())?;
        psi.mu.add(&psi.sigma().scale(temperature).mul(&eps)?)
    }

    /// Latent `[N,d]` to mean frame `[N,C,H,W]` in [0,1].
    pub fn decode_frame(&self, z: &Tensor) -> Result<Tensor> {
        let n = z.shape()[0];
        let y = self.dec_head2.forward(&self.dec_head1.forward(z)?.relu())?;
        let side = *self.profile.spatial_chain().last().unwrap();
        let ch = self.profile.conv_chain.last().unwrap().channels;
        let mut y = y.reshape(&[n, ch, side, side])?;
        for deconv in &self.dec_deconvs {
            y = deconv.forward(&y)?.relu();
        }
        Ok(self.dec_proj.forward(&y)?.sigmoid())
    }

    /// One recurrence update. The LSTM input is mu ++ log_var ++ z; in
    /// -C variants the z slot is zero-fed, so the state is literally a
    /// constant function of the sample.
    pub fn recurrence_step(
        &self,
        residual: &GaussianParams,
        z: &Tensor,
        state: &HiddenState,
    ) -> Result<HiddenState> {
        let lstm = self
            .recurrence
            .as_ref()
            .ok_or_else(|| VvError::Contract("recurrence_step on the static variant".into()))?;
        let z_slot = if self.variant.is_conditional() {
            z.clone()
        } else {
            Tensor::zeros(z.shape())
        };
        let input = Tensor::concat(
            &[residual.mu.clone(), residual.log_var.clone(), z_slot],
            1,
        )?;
        let (h, c) = lstm.forward(&input, &state.h, &state.c)?;
        Ok(HiddenState { h, c })
    }

    /// Teacher-forced pass over a batch: encode each ground-truth frame,
    /// run the hierarchy, sample the dynamic posterior, decode, advance
    /// the recurrence. The prior at each step is recorded for the KL term.
    pub fn forward_train(
        &self,
        batch: &ClipBatch,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Vec<StepRecord>> {
        if self.variant.is_structured() && batch.one_hot.shape()[1] != self.attr_spec.one_hot_dim()
        {
            return Err(VvError::Contract(
                "attribute one-hot width does not match the model's attribute spec".into(),
            ));
        }
        let mut records = Vec::with_capacity(batch.t);
        let mut state = HiddenState::zeros(batch.n, self.profile.hidden_dim);
        for frame in &batch.frames {
            let features = self.encode_frame(frame, training, rng)?;
            let residual = self.residual_posterior(&features)?;
            let (attribute, dynamic, prior) = if self.variant.is_static() {
                (
                    None,
                    residual.clone(),
                    GaussianParams::standard(batch.n, self.latent_dim()),
                )
            } else {
                let attribute = self
                    .variant
                    .is_structured()
                    .then(|| self.attribute_posterior(&residual, &batch.one_hot))
                    .transpose()?;
                let stage = attribute.as_ref().unwrap_or(&residual);
                let dynamic = self.dynamic_posterior(stage, &state)?;
                let prior = self.prior(&state, &batch.one_hot)?;
                (attribute, dynamic, prior)
            };
            let z = self.sample_latent(&dynamic, rng, 1.0)?;
            let decoded = self.decode_frame(&z)?;
            if !self.variant.is_static() {
                state = self.recurrence_step(&residual, &z, &state)?;
            }
            records.push(StepRecord {
                residual,
                attribute,
                dynamic,
                prior,
                z,
                decoded,
            });
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::generate_clip;
    use crate::tensor::no_grad;

    fn micro_model(variant: VariantKind) -> VideoVae {
        let spec = AttributeSpec::sprites(4, 4).unwrap();
        VideoVae::new(Profile::micro(), spec, variant, 7).unwrap()
    }

    fn micro_batch(model: &VideoVae, n: usize, t: usize) -> ClipBatch {
        let spec = model.attr_spec.clone();
        let clips: Vec<VideoClip> = (0..n)
            .map(|i| {
                let attrs = spec.from_joint_index(i % 16).unwrap();
                generate_clip(&spec, &attrs, t, model.profile.geom, 40 + i as u64, "m").unwrap()
            })
            .collect();
        let refs: Vec<&VideoClip> = clips.iter().collect();
        let attrs: Vec<AttributeSet> = clips
            .iter()
            .map(|c| c.labels.clone().unwrap())
            .collect();
        ClipBatch::new(&refs, &attrs, &spec).unwrap()
    }

    #[test]
    fn paper_profile_matches_reference_dims() {
        let p = Profile::paper();
        assert_eq!(p.spatial_chain(), vec![64, 56, 17, 13, 4]);
        assert_eq!(p.flatten_len(), 1280);
        assert_eq!(p.latent_dim, 512);
        assert_eq!(p.hidden_dim, 512);
    }

    #[test]
    fn desk_profile_feature_dim() {
        let p = Profile::desk();
        assert_eq!(p.spatial_chain(), vec![32, 28, 12, 5]);
        assert_eq!(p.flatten_len(), 1600);
        assert_eq!(p.latent_dim, 64);
    }

    #[test]
    fn encoder_eval_mode_is_repeatable() {
        let model = micro_model(VariantKind::full());
        let batch = micro_batch(&model, 2, 1);
        let mut rng1 = RngStream::new(1);
        let mut rng2 = RngStream::new(2);
        let a = no_grad(|| model.encode_frame(&batch.frames[0], false, &mut rng1).unwrap());
        let b = no_grad(|| model.encode_frame(&batch.frames[0], false, &mut rng2).unwrap());
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn zero_initialized_heads_start_standard_normal() {
        let model = micro_model(VariantKind::full());
        let feats = Tensor::from_vec(vec![0.3; 8], &[1, 8]).unwrap();
        let psi = model.residual_posterior(&feats).unwrap();
        assert_eq!(psi.mu.to_vec(), vec![0.0; 8]);
        assert_eq!(psi.log_var.to_vec(), vec![0.0; 8]);
        assert_eq!(psi.sigma().to_vec(), vec![1.0; 8]);
    }

    #[test]
    fn log_var_clamp_bounds_sigma() {
        let raw = Tensor::from_vec(vec![0.0, 0.0, 50.0, -50.0], &[1, 4]).unwrap();
        let psi = GaussianParams::from_raw(&raw).unwrap();
        assert_eq!(psi.log_var.to_vec(), vec![10.0, -10.0]);
        let sig = psi.sigma().to_vec();
        assert!((sig[0] - 5.0f32.exp()).abs() < 1e-3);
        assert!((sig[1] - (-5.0f32).exp()).abs() < 1e-6);
    }

    #[test]
    fn hierarchy_dims_agree() {
        let model = micro_model(VariantKind::full());
        let batch = micro_batch(&model, 3, 2);
        let mut rng = RngStream::new(5);
        let records = model.forward_train(&batch, &mut rng, true).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            let d = model.latent_dim();
            assert_eq!(r.residual.dim(), d);
            assert_eq!(r.attribute.as_ref().unwrap().dim(), d);
            assert_eq!(r.dynamic.dim(), d);
            assert_eq!(r.prior.dim(), d);
            assert_eq!(r.z.shape(), &[3, d]);
            let g = model.profile.geom;
            assert_eq!(r.decoded.shape(), &[3, g.c, g.h, g.w]);
        }
    }

    #[test]
    fn sample_with_zero_sigma_bias_is_reparameterized() {
        let model = micro_model(VariantKind::full());
        // mu = 1, log_var = -10 clamp floor: sigma tiny, z ~ mu
        let psi = GaussianParams {
            mu: Tensor::full(&[1, 8], 1.0),
            log_var: Tensor::full(&[1, 8], -10.0),
        };
        let mut rng = RngStream::new(9);
        let z = model.sample_latent(&psi, &mut rng, 1.0).unwrap();
        for v in z.to_vec() {
            assert!((v - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn unconditional_variant_state_ignores_sample() {
        let model = micro_model(VariantKind::Recurrent {
            conditional: false,
            structured: false,
        });
        let psi = GaussianParams::standard(1, 8);
        let state = HiddenState::zeros(1, 16);
        let z1 = Tensor::full(&[1, 8], 1.0);
        let z2 = Tensor::full(&[1, 8], -3.0);
        let s1 = model.recurrence_step(&psi, &z1, &state).unwrap();
        let s2 = model.recurrence_step(&psi, &z2, &state).unwrap();
        assert_eq!(s1.h.to_vec(), s2.h.to_vec());
        assert_eq!(s1.c.to_vec(), s2.c.to_vec());
    }

    #[test]
    fn conditional_variant_state_tracks_sample() {
        let model = micro_model(VariantKind::full());
        let psi = GaussianParams::standard(1, 8);
        let state = HiddenState::zeros(1, 16);
        let z1 = Tensor::full(&[1, 8], 1.0);
        let z2 = Tensor::full(&[1, 8], -3.0);
        let s1 = model.recurrence_step(&psi, &z1, &state).unwrap();
        let s2 = model.recurrence_step(&psi, &z2, &state).unwrap();
        assert_ne!(s1.h.to_vec(), s2.h.to_vec());
    }

    #[test]
    fn attribute_posterior_rejected_without_structure() {
        let model = micro_model(VariantKind::Recurrent {
            conditional: true,
            structured: false,
        });
        let psi = GaussianParams::standard(1, 8);
        let oh = Tensor::zeros(&[1, 8]);
        assert!(matches!(
            model.attribute_posterior(&psi, &oh),
            Err(VvError::Contract(_))
        ));
    }

    #[test]
    fn full_variant_parameter_names_superset_by_attribute_block() {
        let full = micro_model(VariantKind::full());
        let bare = micro_model(VariantKind::Recurrent {
            conditional: false,
            structured: false,
        });
        let full_names: std::collections::BTreeSet<String> =
            full.store.names().map(String::from).collect();
        let bare_names: std::collections::BTreeSet<String> =
            bare.store.names().map(String::from).collect();
        assert!(full_names.is_superset(&bare_names));
        let extra: Vec<&String> = full_names.difference(&bare_names).collect();
        assert!(extra.iter().all(|n| n.starts_with("posterior.attribute.")));
        assert!(!extra.is_empty());
        // same LSTM input width in both
        assert_eq!(
            full.store.get("recurrence.w_input").unwrap().shape(),
            bare.store.get("recurrence.w_input").unwrap().shape()
        );
    }

    #[test]
    fn static_variant_prior_is_standard_normal() {
        let model = micro_model(VariantKind::Static);
        let batch = micro_batch(&model, 2, 3);
        let mut rng = RngStream::new(3);
        let records = model.forward_train(&batch, &mut rng, true).unwrap();
        for r in &records {
            assert_eq!(r.prior.mu.to_vec(), vec![0.0; 16]);
            assert_eq!(r.prior.log_var.to_vec(), vec![0.0; 16]);
        }
    }

    #[test]
    fn decoded_frames_stay_in_unit_range() {
        let model = micro_model(VariantKind::full());
        let mut rng = RngStream::new(11);
        let mut zd = vec![0.0f32; 2 * 8];
        rng.fill_normal(&mut zd);
        let z = Tensor::from_vec(zd, &[2, 8]).unwrap();
        let frame = model.decode_frame(&z).unwrap();
        assert_eq!(frame.shape(), &[2, 1, 8, 8]);
        assert!(frame.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn paper_scale_decoder_mirrors_encoder() {
        let spec = AttributeSpec::sprites(4, 4).unwrap();
        let model = VideoVae::new(Profile::paper(), spec, VariantKind::full(), 1).unwrap();
        let z = Tensor::zeros(&[1, 512]);
        let frame = no_grad(|| model.decode_frame(&z).unwrap());
        assert_eq!(frame.shape(), &[1, 3, 64, 64]);
    }
}
