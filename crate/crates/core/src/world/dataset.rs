// SPDX-License-Identifier: Apache-2.0

//! On-disk dataset: `manifest.json` indexes little-endian `f32` payloads
//! concatenated in `episodes.bin`, one CRC32 per episode.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_episode, make_scene, EpisodeRecord, Profile, Scene, WorldConfig};
use crate::seed::derive_seed;
use crate::{Error, LoadError, Result};

pub const DATASET_FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EPISODES_FILE: &str = "episodes.bin";

/// Parameters of one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub scenes: usize,
    pub episodes: usize,
    pub length: usize,
    pub profile: Profile,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            scenes: 16,
            episodes: 256,
            length: 40,
            profile: Profile::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub scene_id: String,
    pub seed: u64,
    pub length: usize,
    pub offset: u64,
    pub bytes: u64,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u64,
    pub seed: u64,
    pub profile: Profile,
    pub retina_len: usize,
    pub world: WorldConfig,
    pub scenes: Vec<SceneEntry>,
    pub episodes: Vec<EpisodeEntry>,
}

/// Episodes together with the scenes they were generated in.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub profile: Profile,
    pub world: WorldConfig,
    pub scenes: Vec<SceneEntry>,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn retina_len(&self) -> usize {
        self.world.retina_len()
    }

    /// Shortest episode length, 0 for an empty dataset.
    pub fn min_length(&self) -> usize {
        self.episodes.iter().map(|e| e.length).min().unwrap_or(0)
    }

    pub fn scene(&self, id: &str) -> Result<Scene> {
        let entry = self
            .scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Input(format!("unknown scene `{id}`")))?;
        make_scene(entry.seed, &self.world)
    }
}

/// Generates scenes and episodes; episode `i` lives in scene `i % scenes`.
pub fn generate_dataset(world: &WorldConfig, cfg: &DataConfig) -> Result<Dataset> {
    world.validate()?;
    if cfg.scenes == 0 {
        return Err(Error::Config("data.scenes must be at least 1".into()));
    }
    if cfg.length == 0 {
        return Err(Error::Config("data.length must be at least 1".into()));
    }
    let scenes = (0..cfg.scenes as u64)
        .map(|i| make_scene(derive_seed(cfg.seed, "scene", i), world))
        .collect::<Result<Vec<_>>>()?;
    let episodes = (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let scene = &scenes[i % scenes.len()];
            generate_episode(
                scene,
                world,
                derive_seed(cfg.seed, "episode", i as u64),
                cfg.length,
                cfg.profile,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed: cfg.seed,
        profile: cfg.profile,
        world: world.clone(),
        scenes: scenes
            .iter()
            .map(|s| SceneEntry {
                id: s.id.clone(),
                seed: s.rng_seed,
            })
            .collect(),
        episodes,
    })
}

/// Serializes the float payload of one episode.
pub fn encode_episode(ep: &EpisodeRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(ep.payload_len() * 4);
    let mut put = |v: f32| out.extend_from_slice(&v.to_le_bytes());
    ep.poses.iter().flatten().for_each(|&v| put(v));
    ep.retinas.iter().for_each(|&v| put(v));
    ep.odometry.iter().flatten().for_each(|&v| put(v));
    ep.alt_poses.iter().flatten().for_each(|&v| put(v));
    ep.alt_retinas.iter().for_each(|&v| put(v));
    out
}

fn episode_label(index: usize, entry: &EpisodeEntry) -> String {
    format!("episode {index} (scene {}, seed {})", entry.scene_id, entry.seed)
}

/// Decodes episode `index` of `manifest` from the full contents of
/// `episodes.bin`, verifying bounds and checksum.
pub fn decode_episode(
    manifest: &DatasetManifest,
    index: usize,
    blob: &[u8],
) -> std::result::Result<EpisodeRecord, LoadError> {
    let entry = manifest
        .episodes
        .get(index)
        .ok_or_else(|| LoadError::Manifest(format!("episode index {index} out of range")))?;
    let what = episode_label(index, entry);
    if entry.length == 0 {
        return Err(LoadError::Manifest(format!("{what} has zero length")));
    }
    let expected = EpisodeRecord::checked_payload_len(entry.length, manifest.retina_len)
        .and_then(|n| (n as u64).checked_mul(4))
        .ok_or_else(|| LoadError::Manifest(format!("{what} shape overflows")))?;
    if entry.bytes != expected {
        return Err(LoadError::Manifest(format!(
            "{what} declares {} bytes, its shape requires {expected}",
            entry.bytes
        )));
    }
    let end = entry
        .offset
        .checked_add(entry.bytes)
        .ok_or_else(|| LoadError::Manifest(format!("{what} offset overflows")))?;
    if end > blob.len() as u64 {
        return Err(LoadError::Truncated {
            what,
            start: entry.offset,
            end,
            available: blob.len() as u64,
        });
    }
    let bytes = &blob[entry.offset as usize..end as usize];
    let computed = crc32fast::hash(bytes);
    if computed != entry.crc32 {
        return Err(LoadError::Checksum {
            what,
            stored: entry.crc32,
            computed,
        });
    }
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
    let (t, k) = (entry.length, manifest.retina_len);
    let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let poses = triples(take((t + 1) * 3));
    let retinas = take(t * k);
    let odometry = take(t * 4).chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let alt_poses = triples(take(t * 3));
    let alt_retinas = take(t * k);
    Ok(EpisodeRecord {
        scene_id: entry.scene_id.clone(),
        seed: entry.seed,
        length: t,
        retina_len: k,
        poses,
        retinas,
        odometry,
        alt_poses,
        alt_retinas,
    })
}

/// Parses and validates `manifest.json`. The version is checked before the
/// rest of the schema so that future formats fail with a version error.
pub fn decode_manifest(text: &[u8]) -> std::result::Result<DatasetManifest, LoadError> {
    let value: serde_json::Value = serde_json::from_slice(text).map_err(|e| LoadError::Manifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| LoadError::Manifest("missing integer `format_version`".into()))?;
    if found != DATASET_FORMAT_VERSION {
        return Err(LoadError::Version {
            found,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let manifest: DatasetManifest = serde_json::from_value(value).map_err(|e| LoadError::Manifest(e.to_string()))?;
    if manifest.retina_len != manifest.world.retina_len() {
        return Err(LoadError::Manifest(format!(
            "retina_len {} disagrees with world ({} bins x {} features)",
            manifest.retina_len, manifest.world.bins, manifest.world.feature_dim
        )));
    }
    let mut next = 0u64;
    for (i, e) in manifest.episodes.iter().enumerate() {
        if e.offset != next {
            return Err(LoadError::Manifest(format!(
                "episode {i} offset {} should be {next}",
                e.offset
            )));
        }
        next = e.offset.saturating_add(e.bytes);
        if !manifest.scenes.iter().any(|s| s.id == e.scene_id) {
            return Err(LoadError::Manifest(format!(
                "episode {i} refers to unknown scene {}",
                e.scene_id
            )));
        }
    }
    Ok(manifest)
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(data.episodes.len());
    for ep in &data.episodes {
        if ep.retina_len != data.world.retina_len() {
            return Err(Error::Input(format!(
                "episode seed {} has retina length {}, dataset expects {}",
                ep.seed,
                ep.retina_len,
                data.world.retina_len()
            )));
        }
        let bytes = encode_episode(ep);
        entries.push(EpisodeEntry {
            scene_id: ep.scene_id.clone(),
            seed: ep.seed,
            length: ep.length,
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: data.seed,
        profile: data.profile,
        retina_len: data.world.retina_len(),
        world: data.world.clone(),
        scenes: data.scenes.clone(),
        episodes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    let bin_path = dir.join(EPISODES_FILE);
    fs::write(&bin_path, &blob).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, text + "\n").map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest = decode_manifest(&text)?;
    let bin_path = dir.join(EPISODES_FILE);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let episodes = (0..manifest.episodes.len())
        .map(|i| decode_episode(&manifest, i, &blob))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Dataset {
        seed: manifest.seed,
        profile: manifest.profile,
        world: manifest.world,
        scenes: manifest.scenes,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(episodes: usize) -> Dataset {
        let cfg = DataConfig {
            seed: 3,
            scenes: 2,
            episodes,
            length: 12,
            profile: Profile::Train,
        };
        generate_dataset(&WorldConfig::default(), &cfg).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = small(10);
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        for (a, b) in back.episodes.iter().zip(&data.episodes) {
            assert!(a
                .retinas
                .iter()
                .zip(&b.retinas)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let data = small(0);
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(fs::metadata(dir.path().join(EPISODES_FILE)).unwrap().len(), 0);
        assert!(read_dataset(dir.path()).unwrap().episodes.is_empty());
    }

    #[test]
    fn corrupted_byte_names_the_episode() {
        let dir = tempfile::tempdir().unwrap();
        let data = small(4);
        write_dataset(dir.path(), &data).unwrap();
        let man = decode_manifest(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let path = dir.path().join(EPISODES_FILE);
        let mut blob = fs::read(&path).unwrap();
        blob[man.episodes[2].offset as usize + 17] ^= 0x40;
        fs::write(&path, &blob).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Load(LoadError::Checksum { what, .. })) => assert!(what.starts_with("episode 2 "), "{what}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_version_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &small(3)).unwrap();
        let bin = dir.path().join(EPISODES_FILE);
        let blob = fs::read(&bin).unwrap();
        fs::write(&bin, &blob[..blob.len() - 5]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Load(LoadError::Truncated { .. }))
        ));

        let man = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&man)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&man, text).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Load(LoadError::Version { found: 2, expected: 1 }))
        ));
        fs::write(&man, b"{ not json").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(Error::Load(LoadError::Manifest(_)))
        ));
    }

    #[test]
    fn writes_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &small(3)).unwrap();
        write_dataset(b.path(), &small(3)).unwrap();
        for f in [MANIFEST_FILE, EPISODES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
