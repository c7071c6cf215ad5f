//! Checkpoint directories: `manifest.json` plus one raw blob of
//! little-endian `f32` values, row-major, in inventory order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::pretzel::Pretzel;
use crate::tensor::Matrix;
use crate::training::UnderstandingScore;
use crate::vocab::{word, BOS, END_IMG, EOS, IMG, PAD};

pub const FORMAT: &str = "pretzel-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const CODEC_GROUP: &str = "codec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stages_completed: Vec<u8>,
    pub config: Option<RunConfig>,
    pub reserved_tokens: BTreeMap<String, usize>,
    pub stub_score: Option<UnderstandingScore>,
    pub group_checksums: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    pub blob_sha256: String,
}

/// A trained (or partially trained) model with its codec.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stages_completed: Vec<u8>,
    pub stub_score: Option<UnderstandingScore>,
    pub store: ParamStore<f32>,
    pub codec: LatentCodec,
}

fn reserved_tokens() -> BTreeMap<String, usize> {
    [PAD, BOS, EOS, IMG, END_IMG]
        .into_iter()
        .map(|id| (word(id).unwrap_or_default().to_string(), id))
        .collect()
}

fn write_dir(dir: &Path, mut manifest: Manifest, tensors: &[(String, String, &Matrix<f32>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    for (name, group, m) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            group: group.clone(),
            shape: [m.rows, m.cols],
            offset: blob.len(),
        });
        for v in &m.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.blob_bytes = blob.len();
    manifest.blob_sha256 = hex::encode(Sha256::digest(&blob));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))
}

fn read_dir(dir: &Path) -> Result<(Manifest, Vec<(TensorEntry, Matrix<f32>)>)> {
    let man_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&man_path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            &man_path,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != manifest.blob_bytes || hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::format(&blob_path, "blob does not match the manifest"));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut expect = 0;
    for t in &manifest.tensors {
        let len = t.shape[0] * t.shape[1] * 4;
        if t.offset != expect || t.offset + len > blob.len() {
            return Err(Error::format(&man_path, format!("tensor {} has a bad offset", t.name)));
        }
        let data = blob[t.offset..t.offset + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((t.clone(), Matrix { rows: t.shape[0], cols: t.shape[1], data }));
        expect += len;
    }
    if expect != blob.len() {
        return Err(Error::format(&blob_path, "blob has trailing bytes"));
    }
    Ok((manifest, out))
}

fn codec_from(entries: &mut Vec<(TensorEntry, Matrix<f32>)>, path: &Path) -> Result<LatentCodec> {
    let (codec, rest): (Vec<_>, Vec<_>) = entries.drain(..).partition(|(t, _)| t.group == CODEC_GROUP);
    *entries = rest;
    LatentCodec::from_tensors(codec.into_iter().map(|(t, m)| (t.name, m)).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

fn empty_manifest() -> Manifest {
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        stages_completed: Vec::new(),
        config: None,
        reserved_tokens: reserved_tokens(),
        stub_score: None,
        group_checksums: BTreeMap::new(),
        tensors: Vec::new(),
        blob_bytes: 0,
        blob_sha256: String::new(),
    }
}

pub fn save_codec(dir: &Path, codec: &LatentCodec) -> Result<()> {
    let tensors = codec.tensors();
    let refs: Vec<_> = tensors.iter().map(|(n, m)| (n.clone(), CODEC_GROUP.to_string(), m)).collect();
    write_dir(dir, empty_manifest(), &refs)
}

pub fn load_codec(dir: &Path) -> Result<LatentCodec> {
    let (_, mut entries) = read_dir(dir)?;
    let codec = codec_from(&mut entries, dir)?;
    if !entries.is_empty() {
        return Err(Error::format(dir, "codec checkpoint holds model tensors"));
    }
    Ok(codec)
}

impl Checkpoint {
    /// A freshly initialized model for `config`.
    pub fn init(config: RunConfig, codec: LatentCodec) -> Result<(Pretzel, Checkpoint)> {
        config.validate()?;
        let (model, store) = Pretzel::init::<f32>(&config.model, config.seed)?;
        Ok((model, Checkpoint { config, stages_completed: Vec::new(), stub_score: None, store, codec }))
    }

    pub fn has_stage(&self, stage: u8) -> bool {
        self.stages_completed.contains(&stage)
    }

    pub fn mark_stage(&mut self, stage: u8) {
        if !self.has_stage(stage) {
            self.stages_completed.push(stage);
            self.stages_completed.sort_unstable();
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut m = empty_manifest();
        m.stages_completed = self.stages_completed.clone();
        m.config = Some(self.config.clone());
        m.stub_score = self.stub_score;
        m.group_checksums = Group::ALL.iter().map(|g| (g.name().to_string(), self.store.checksum(*g))).collect();
        let codec = self.codec.tensors();
        let mut refs: Vec<_> = codec.iter().map(|(n, t)| (n.clone(), CODEC_GROUP.to_string(), t)).collect();
        refs.extend(self.store.iter().map(|(_, p)| (p.name.clone(), p.group.name().to_string(), &p.value)));
        write_dir(dir, m, &refs)
    }

    pub fn load(dir: &Path) -> Result<(Pretzel, Checkpoint)> {
        let (manifest, mut entries) = read_dir(dir)?;
        let man_path = dir.join(MANIFEST);
        let config = manifest
            .config
            .clone()
            .ok_or_else(|| Error::format(&man_path, "not a model checkpoint (no config)"))?;
        config.validate()?;
        if manifest.reserved_tokens != reserved_tokens() {
            return Err(Error::format(&man_path, "reserved token ids differ from this build"));
        }
        let codec = codec_from(&mut entries, dir)?;
        let (model, mut store) = Pretzel::init::<f32>(&config.model, config.seed)?;
        if entries.len() != store.len() {
            return Err(Error::format(
                &man_path,
                format!("{} tensors stored, model has {}", entries.len(), store.len()),
            ));
        }
        for (t, m) in entries {
            let id = store
                .find(&t.name)
                .ok_or_else(|| Error::format(&man_path, format!("unknown tensor {}", t.name)))?;
            let p = store.param(id);
            if p.group.name() != t.group || p.value.shape() != m.shape() {
                return Err(Error::format(&man_path, format!("tensor {} does not match the model", t.name)));
            }
            *store.get_mut(id) = m;
        }
        for g in Group::ALL {
            if manifest.group_checksums.get(g.name()) != Some(&store.checksum(g)) {
                return Err(Error::format(&man_path, format!("checksum mismatch for group {g}")));
            }
        }
        let ck = Checkpoint {
            config,
            stages_completed: manifest.stages_completed,
            stub_score: manifest.stub_score,
            store,
            codec,
        };
        Ok((model, ck))
    }

    /// Stage-3 entry: the stub from `self`, flow-side groups from `flow`,
    /// the adapter from `adapter`, and both skip projections zeroed.
    pub fn prepare_stage3(&self, flow: Option<&Checkpoint>, adapter: Option<&Checkpoint>) -> Result<Checkpoint> {
        let flow = flow
            .filter(|c| c.has_stage(1))
            .ok_or_else(|| Error::MissingPrerequisite("stage 3 needs a stage-1 flow checkpoint".into()))?;
        let adapter = adapter
            .filter(|c| c.has_stage(2))
            .ok_or_else(|| Error::MissingPrerequisite("stage 3 needs a stage-2 adapter checkpoint".into()))?;
        let stub = self.store.checksum(Group::Stub);
        if flow.store.checksum(Group::Stub) != stub || adapter.store.checksum(Group::Stub) != stub {
            return Err(Error::State("checkpoints were trained against different stubs".into()));
        }
        if adapter.store.checksum(Group::Shallow) != flow.store.checksum(Group::Shallow) {
            return Err(Error::State("the adapter was aligned to a different shallow flow".into()));
        }
        if flow.config.model != self.config.model || adapter.config.model != self.config.model {
            return Err(Error::State("checkpoints have different model shapes".into()));
        }
        let mut out = self.clone();
        let copy = |dst: &mut ParamStore<f32>, src: &ParamStore<f32>, g: Group| {
            dst.copy_group_from(src, g).map_err(Error::State)
        };
        for g in [Group::Deep, Group::Shallow, Group::NgpHead] {
            copy(&mut out.store, &flow.store, g)?;
        }
        copy(&mut out.store, &adapter.store, Group::Adapter)?;
        let ids: Vec<_> = out
            .store
            .iter()
            .filter(|(_, p)| matches!(p.group, Group::SkipVlm | Group::SkipD))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            out.store.get_mut(id).data.fill(0.0);
        }
        for s in [1, 2] {
            out.mark_stage(s);
        }
        Ok(out)
    }

    /// Checks that `stage` can start from this checkpoint.
    pub fn require_for_stage(&self, stage: u8) -> Result<()> {
        match stage {
            0 => Ok(()),
            1 if self.has_stage(0) => Ok(()),
            1 => Err(Error::MissingPrerequisite("stage 1 needs a pretrained stub (stage 0)".into())),
            // The adapter is aligned to the frozen stage-1 shallow flow.
            2 if self.has_stage(1) => Ok(()),
            2 => Err(Error::MissingPrerequisite("stage 2 needs a stage-1 checkpoint".into())),
            3 if self.has_stage(1) && self.has_stage(2) => Ok(()),
            _ => Err(Error::MissingPrerequisite("stage 3 needs stage-1 flow and stage-2 adapter weights".into())),
        }
    }
}
