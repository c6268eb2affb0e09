// SPDX-License-Identifier: Apache-2.0
//! Fuzz entry points. Each takes raw bytes, must never panic, and asserts
//! that anything it accepts survives an encode/decode roundtrip. The
//! cargo-fuzz targets in `fuzz/` and the corpus replay test share them.

use crate::config::{Config, Format};
use crate::eval::sweep;
use crate::train::checkpoint::{decode_checkpoint_manifest, decode_tensor, TensorEntry};
use crate::train::parse_log_line;
use crate::world::{
    decode_episode, decode_manifest, encode_episode, DatasetManifest, EpisodeEntry, EpisodeRecord, Profile,
    WorldConfig, DATASET_FORMAT_VERSION,
};

/// `manifest.json` of a dataset.
pub fn dataset_manifest(data: &[u8]) {
    if let Ok(m) = decode_manifest(data) {
        let text = serde_json::to_vec(&m).expect("manifest serializes");
        assert_eq!(decode_manifest(&text).expect("re-encoded manifest decodes"), m);
    }
}

/// One episode of `episodes.bin`. Leading bytes pick the shape and how the
/// manifest entry relates to the blob, the rest is the blob.
pub fn dataset_episode(data: &[u8]) {
    let [a, b, flags, shift, blob @ ..] = data else {
        return;
    };
    let length = 1 + (*a as usize % 8);
    let retina_len = 1 + (*b as usize % 8);
    let offset = if flags & 1 != 0 {
        (*shift as usize).min(blob.len())
    } else {
        0
    };
    let bytes = if flags & 2 != 0 {
        EpisodeRecord::payload_len_for(length, retina_len) * 4
    } else {
        blob.len() - offset
    };
    let crc32 = match blob.get(offset..offset + bytes) {
        Some(slice) if flags & 4 == 0 => crc32fast::hash(slice),
        _ => u32::from_le_bytes([*a, *b, *flags, *shift]),
    };
    let world = WorldConfig {
        bins: retina_len,
        feature_dim: 1,
        ..WorldConfig::default()
    };
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed: 0,
        profile: Profile::Train,
        retina_len,
        world,
        scenes: Vec::new(),
        episodes: vec![EpisodeEntry {
            scene_id: "scene-0".into(),
            seed: 0,
            length,
            offset: offset as u64,
            bytes: bytes as u64,
            crc32,
        }],
    };
    if let Ok(ep) = decode_episode(&manifest, 0, blob) {
        assert_eq!((ep.length, ep.retina_len), (length, retina_len));
        assert_eq!(encode_episode(&ep), &blob[offset..offset + bytes]);
    }
    assert!(decode_episode(&manifest, 1, blob).is_err());
}

/// `manifest.json` of a checkpoint.
pub fn checkpoint_manifest(data: &[u8]) {
    if let Ok(m) = decode_checkpoint_manifest(data) {
        let text = serde_json::to_vec(&m).expect("manifest serializes");
        assert_eq!(
            decode_checkpoint_manifest(&text).expect("re-encoded manifest decodes"),
            m
        );
    }
}

/// One tensor of a checkpoint blob. The first byte is the rank, then one
/// byte per dimension, a flag byte and an offset byte; the rest is the blob.
pub fn checkpoint_tensor(data: &[u8]) {
    let Some((&rank, rest)) = data.split_first() else {
        return;
    };
    let rank = rank as usize % 4;
    if rest.len() < rank + 2 {
        return;
    }
    let (dims, rest) = rest.split_at(rank);
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize % 6).collect();
    let (flags, shift, blob) = (rest[0], rest[1], &rest[2..]);
    let offset = (shift as usize).min(blob.len());
    let bytes = if flags & 1 != 0 {
        shape.iter().product::<usize>() * 4
    } else {
        blob.len() - offset
    };
    let crc32 = match blob.get(offset..offset + bytes) {
        Some(slice) if flags & 2 == 0 => crc32fast::hash(slice),
        _ => u32::from_le_bytes([flags, shift, 0, 0]),
    };
    let entry = TensorEntry {
        name: "w".into(),
        shape: shape.clone(),
        offset: offset as u64,
        bytes: bytes as u64,
        crc32,
    };
    if let Ok(t) = decode_tensor(&entry, blob, "params.bin") {
        assert_eq!(t.shape(), &shape[..]);
        let raw: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(raw, &blob[offset..offset + bytes]);
    }
}

/// A config file. The first byte picks TOML or JSON. The same text is also
/// read as one `--set` override per line.
pub fn config(data: &[u8]) {
    let Some((&kind, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let format = if kind & 1 == 0 { Format::Toml } else { Format::Json };
    if let Ok(cfg) = Config::parse(text, format) {
        // TOML integers are i64, so a JSON config may not be writable.
        if let Ok(written) = cfg.to_toml() {
            let again = Config::parse(&written, Format::Toml).expect("written config parses");
            assert_eq!(again.to_toml().expect("config writes twice"), written);
        }
        let _ = cfg.resolve();
    }
    let overrides: Vec<&str> = text.lines().collect();
    if let Ok(cfg) = Config::default().with_overrides(&overrides) {
        let _ = cfg.resolve();
    }
}

/// A sweep CSV.
pub fn sweep_csv(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = sweep::from_csv(text) {
        let again = sweep::from_csv(&sweep::to_csv(&rows)).expect("written sweep parses");
        assert_eq!(again.len(), rows.len());
        for (x, y) in again.iter().zip(&rows) {
            assert_eq!(
                (&x.model, x.length, &x.threshold, x.hits, x.count),
                (&y.model, y.length, &y.threshold, y.hits, y.count)
            );
        }
    }
}

/// One line of `train_log.jsonl`.
pub fn train_log(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = parse_log_line(text) {
        let line = serde_json::to_string(&r).expect("record serializes");
        assert_eq!(parse_log_line(&line).expect("written record parses"), r);
    }
}

/// Every entry point with its corpus directory name.
pub const TARGETS: &[(&str, fn(&[u8]))] = &[
    ("dataset_manifest", dataset_manifest),
    ("dataset_episode", dataset_episode),
    ("checkpoint_manifest", checkpoint_manifest),
    ("checkpoint_tensor", checkpoint_tensor),
    ("config", config),
    ("sweep_csv", sweep_csv),
    ("train_log", train_log),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_tiny_inputs_are_rejected_quietly() {
        for (_, f) in TARGETS {
            for data in [&b""[..], b"\0", b"{", b"\xff\xff\xff\xff\xff"] {
                f(data);
            }
        }
    }
}
