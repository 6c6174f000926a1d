//! Versioned binary checkpoint: named tensor table plus variant flags,
//! profile block, a config echo, and optional optimizer state.
//!
//! Layout, little-endian: `"VVCK" | version u32 | role u8 | flags u8
//! (bit0 = conditional sampling, bit1 = structured latent, bit2 = static
//! baseline) | H,W,C,d,hidden as u16 | config echo (u32 length + UTF-8) |
//! tensor table | optional optimizer tensor table`. A tensor table is a
//! u32 count followed by `name-len u16 | name | rank u8 | dims u32 x rank
//! | values f32`. Optimizer entries reuse the table with `#m`, `#v`, `#t`
//! suffixes on parameter names.

use std::fs;
use std::path::Path;

use crate::model::{Profile, VariantKind};
use crate::tensor::ParameterStore;
use crate::{Result, VvError};

const MAGIC: &[u8; 4] = b"VVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRole {
    VideoVae,
    Attribute,
    Metric,
}

impl CheckpointRole {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointRole::VideoVae => 0,
            CheckpointRole::Attribute => 1,
            CheckpointRole::Metric => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(CheckpointRole::VideoVae),
            1 => Ok(CheckpointRole::Attribute),
            2 => Ok(CheckpointRole::Metric),
            other => Err(VvError::Format {
                offset: 8,
                msg: format!("unknown checkpoint role {other}"),
            }),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointRole::VideoVae => "videovae",
            CheckpointRole::Attribute => "attribute",
            CheckpointRole::Metric => "metric",
        }
    }
}

fn variant_flags(variant: VariantKind) -> u8 {
    match variant {
        VariantKind::Static => 0b100,
        VariantKind::Recurrent {
            conditional,
            structured,
        } => u8::from(conditional) | (u8::from(structured) << 1),
    }
}

fn variant_from_flags(flags: u8) -> VariantKind {
    if flags & 0b100 != 0 {
        VariantKind::Static
    } else {
        VariantKind::Recurrent {
            conditional: flags & 0b001 != 0,
            structured: flags & 0b010 != 0,
        }
    }
}

#[derive(Debug)]
pub struct RawTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug)]
pub struct RawCheckpoint {
    pub role: CheckpointRole,
    pub variant: VariantKind,
    pub geom_h: usize,
    pub geom_w: usize,
    pub geom_c: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub config_echo: String,
    pub tensors: Vec<RawTensor>,
    pub optimizer: Option<Vec<RawTensor>>,
}

impl RawCheckpoint {
    /// Value of a `# key = value` annotation line in the config echo.
    pub fn annotation(&self, key: &str) -> Option<&str> {
        let prefix = format!("# {key} = ");
        self.config_echo
            .lines()
            .find_map(|l| l.strip_prefix(prefix.as_str()))
    }

    pub fn step_count(&self) -> u64 {
        self.annotation("steps")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    }
}

fn push_tensor_table(buf: &mut Vec<u8>, entries: &[(String, Vec<usize>, Vec<f32>)]) {
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, dims, values) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VvError::Format {
                offset: self.buf.len() as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor_table(&mut self) -> Result<Vec<RawTensor>> {
        let count = self.u32("tensor count")? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u16("tensor name length")? as usize;
            let name = String::from_utf8(self.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| VvError::Format {
                    offset: self.pos as u64,
                    msg: "tensor name is not UTF-8".into(),
                })?;
            let rank = self.u8("tensor rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32("tensor dim")? as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = self.take(4 * numel, "tensor values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(RawTensor { name, dims, values });
        }
        Ok(out)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn write_checkpoint(
    path: &Path,
    role: CheckpointRole,
    variant: VariantKind,
    profile: &Profile,
    config_echo: &str,
    store: &ParameterStore,
    with_optimizer: bool,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(role.to_byte());
    buf.push(variant_flags(variant));
    for dim in [
        profile.geom.h,
        profile.geom.w,
        profile.geom.c,
        profile.latent_dim,
        profile.hidden_dim,
    ] {
        buf.extend_from_slice(&(dim as u16).to_le_bytes());
    }
    buf.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_echo.as_bytes());

    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.to_vec()))
        .collect();
    push_tensor_table(&mut buf, &tensors);

    if with_optimizer {
        let mut entries = Vec::new();
        for (name, m, v, t) in store.adam_snapshot() {
            let dims = vec![m.len()];
            entries.push((format!("{name}#m"), dims.clone(), m));
            entries.push((format!("{name}#v"), dims, v));
            entries.push((format!("{name}#t"), vec![1], vec![t as f32]));
        }
        push_tensor_table(&mut buf, &entries);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(VvError::Format {
            offset: 0,
            msg: "bad magic, expected \"VVCK\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(VvError::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let role = CheckpointRole::from_byte(r.u8("role")?)?;
    let variant = variant_from_flags(r.u8("flags")?);
    let geom_h = r.u16("profile H")? as usize;
    let geom_w = r.u16("profile W")? as usize;
    let geom_c = r.u16("profile C")? as usize;
    let latent_dim = r.u16("profile d")? as usize;
    let hidden_dim = r.u16("profile hidden")? as usize;
    let echo_len = r.u32("config echo length")? as usize;
    let config_echo = String::from_utf8(r.take(echo_len, "config echo")?.to_vec())
        .map_err(|_| VvError::Format {
            offset: r.pos as u64,
            msg: "config echo is not UTF-8".into(),
        })?;
    let tensors = r.tensor_table()?;
    let optimizer = if r.pos < buf.len() {
        Some(r.tensor_table()?)
    } else {
        None
    };
    Ok(RawCheckpoint {
        role,
        variant,
        geom_h,
        geom_w,
        geom_c,
        latent_dim,
        hidden_dim,
        config_echo,
        tensors,
        optimizer,
    })
}

/// Copy raw tensors into an existing store by name. Every checkpoint
/// tensor must match a registered parameter, and every parameter must be
/// covered. Restores Adam state when present.
pub fn load_into_store(raw: &RawCheckpoint, store: &mut ParameterStore) -> Result<()> {
    let mut seen = 0usize;
    for t in &raw.tensors {
        let param = store.get(&t.name).ok_or_else(|| VvError::Format {
            offset: 0,
            msg: format!("unknown tensor name {:?} in checkpoint", t.name),
        })?;
        if param.shape() != t.dims.as_slice() {
            return Err(VvError::Format {
                offset: 0,
                msg: format!(
                    "tensor {:?} shape {:?} does not match expected {:?}",
                    t.name,
                    t.dims,
                    param.shape()
                ),
            });
        }
        param.set_data(|d| d.copy_from_slice(&t.values));
        seen += 1;
    }
    if seen != store.len() {
        return Err(VvError::Format {
            offset: 0,
            msg: format!(
                "checkpoint covers {seen} of {} model parameters",
                store.len()
            ),
        });
    }
    if let Some(opt) = &raw.optimizer {
        for chunk in opt.chunks(3) {
            let [m, v, t] = chunk else {
                return Err(VvError::Format {
                    offset: 0,
                    msg: "optimizer block must hold m/v/t triples".into(),
                });
            };
            let name = m.name.strip_suffix("#m").ok_or_else(|| VvError::Format {
                offset: 0,
                msg: format!("unexpected optimizer entry {:?}", m.name),
            })?;
            store.restore_adam(
                name,
                m.values.clone(),
                v.values.clone(),
                t.values[0] as u64,
            )?;
        }
    }
    Ok(())
}

/// Cross-check the checkpoint's profile block against a reconstructed
/// profile.
pub fn check_profile(raw: &RawCheckpoint, profile: &Profile) -> Result<()> {
    let block = (
        raw.geom_h,
        raw.geom_w,
        raw.geom_c,
        raw.latent_dim,
        raw.hidden_dim,
    );
    let expected = (
        profile.geom.h,
        profile.geom.w,
        profile.geom.c,
        profile.latent_dim,
        profile.hidden_dim,
    );
    if block != expected {
        return Err(VvError::Format {
            offset: 10,
            msg: format!("profile block {block:?} does not match {expected:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.register("a.weight", Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap())
            .unwrap();
        s.register("a.bias", Tensor::param(vec![-1.0, 0.5], &[2]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_bits_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvck");
        let store = tiny_store();
        let profile = Profile::micro();
        write_checkpoint(
            &p,
            CheckpointRole::VideoVae,
            VariantKind::full(),
            &profile,
            "# steps = 42\nmodel.profile = micro\n",
            &store,
            false,
        )
        .unwrap();
        let raw = read_checkpoint(&p).unwrap();
        assert_eq!(raw.role, CheckpointRole::VideoVae);
        assert_eq!(raw.variant, VariantKind::full());
        assert_eq!(raw.step_count(), 42);
        assert_eq!(raw.tensors.len(), 2);
        assert_eq!(raw.tensors[0].name, "a.weight");
        assert_eq!(raw.tensors[0].dims, vec![2, 2]);
        assert_eq!(raw.tensors[0].values, vec![1.0, 2.0, 3.0, 4.0]);

        let mut store2 = tiny_store();
        store2.get("a.weight").unwrap().set_data(|d| d.fill(0.0));
        load_into_store(&raw, &mut store2).unwrap();
        assert_eq!(
            store2.get("a.weight").unwrap().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn variant_flags_cover_all_rows() {
        for v in VariantKind::ablation_grid() {
            assert_eq!(variant_from_flags(variant_flags(v)), v);
        }
    }

    #[test]
    fn unknown_tensor_name_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvck");
        let store = tiny_store();
        write_checkpoint(
            &p,
            CheckpointRole::VideoVae,
            VariantKind::Static,
            &Profile::micro(),
            "",
            &store,
            false,
        )
        .unwrap();
        let raw = read_checkpoint(&p).unwrap();
        let mut other = ParameterStore::new();
        other
            .register("different", Tensor::param(vec![0.0; 4], &[2, 2]).unwrap())
            .unwrap();
        assert!(matches!(
            load_into_store(&raw, &mut other),
            Err(VvError::Format { .. })
        ));
    }

    #[test]
    fn truncation_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvck");
        write_checkpoint(
            &p,
            CheckpointRole::Metric,
            VariantKind::Static,
            &Profile::micro(),
            "",
            &tiny_store(),
            false,
        )
        .unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&p),
            Err(VvError::Format { .. })
        ));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vvck");
        let mut store = tiny_store();
        // take one optimizer step so the state is nonzero
        for (_, t) in store.iter() {
            let loss = t.reshape(&[t.numel()]).unwrap().sum_all();
            loss.backward().unwrap();
        }
        store.adam_step(0.01).unwrap();
        write_checkpoint(
            &p,
            CheckpointRole::VideoVae,
            VariantKind::full(),
            &Profile::micro(),
            "",
            &store,
            true,
        )
        .unwrap();
        let raw = read_checkpoint(&p).unwrap();
        assert!(raw.optimizer.is_some());
        let mut store2 = tiny_store();
        load_into_store(&raw, &mut store2).unwrap();
        let snap1 = store.adam_snapshot();
        let snap2 = store2.adam_snapshot();
        assert_eq!(snap1.len(), snap2.len());
        for ((n1, m1, v1, t1), (n2, m2, v2, t2)) in snap1.iter().zip(&snap2) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2);
            assert_eq!(v1, v2);
            assert_eq!(t1, t2);
        }
    }
}
