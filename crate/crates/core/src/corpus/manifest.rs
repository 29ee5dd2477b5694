//! On-disk corpus layout: a JSON-lines manifest plus one tensor file per
//! image and pose map.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CaptionKind, Corpus, CorpusConfig, CorpusRecord, CorpusReport, IdentityRecords, IdentitySpec, PairIndex, Split, Variant};
use crate::config::content_hash;
use crate::error::{Error, Result};
use crate::model::{ImageInput, Keypoint, PoseInput, TextInput};
use crate::numerics::{read_tensor, write_tensor};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    schema_version: u32,
    config_hash: String,
    record_id: u32,
    identity_id: u32,
    split: Split,
    variant: Variant,
    caption_kind: CaptionKind,
    caption: TextInput,
    prompt: TextInput,
    action: String,
    scene: String,
    keypoints: Vec<Keypoint>,
    image: String,
    pose: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    for sub in ["images", "poses"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    corpus.records.par_iter().try_for_each(|r| {
        write_tensor(&dir.join(image_path(r.record_id)), &r.image.pixels)?;
        write_tensor(&dir.join(pose_path(r.record_id)), &r.pose.heatmaps)
    })?;

    let path = dir.join("manifest.jsonl");
    let hash = corpus.config_hash();
    let mut out = Vec::new();
    for r in &corpus.records {
        let line = ManifestLine {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_hash: hash.clone(),
            record_id: r.record_id,
            identity_id: r.identity_id,
            split: r.split,
            variant: r.variant,
            caption_kind: r.caption_kind,
            caption: r.caption.clone(),
            prompt: r.prompt.clone(),
            action: r.action.clone(),
            scene: r.scene.clone(),
            keypoints: r.pose.keypoints.clone(),
            image: image_path(r.record_id),
            pose: pose_path(r.record_id),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&path, e))?;

    write_json(&dir.join("corpus.json"), &corpus.config)?;
    write_json(&dir.join("identities.json"), &corpus.identities)?;
    write_json(&dir.join("pair_index.json"), &corpus.index.to_sorted())?;
    write_json(&dir.join("report.json"), &corpus.report)
}

fn image_path(id: u32) -> String {
    format!("images/{id:06}.cmpt")
}

fn pose_path(id: u32) -> String {
    format!("poses/{id:06}.cmpt")
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let config: CorpusConfig = read_json(&dir.join("corpus.json"))?;
    let identities: Vec<IdentitySpec> = read_json(&dir.join("identities.json"))?;
    let index_map: BTreeMap<u32, IdentityRecords> = read_json(&dir.join("pair_index.json"))?;
    let report: CorpusReport = read_json(&dir.join("report.json"))?;

    let hash = content_hash(&config);
    let path = dir.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Format { path: path.clone(), msg: format!("line {}: {e}", n + 1) })?;
        if parsed.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.clone(),
                msg: format!("line {}: unsupported schema version {}", n + 1, parsed.schema_version),
            });
        }
        if parsed.config_hash != hash {
            return Err(Error::HashMismatch { what: "corpus manifest", expected: hash, found: parsed.config_hash });
        }
        lines.push(parsed);
    }
    let records: Vec<CorpusRecord> = lines
        .into_par_iter()
        .map(|l| {
            let image = ImageInput::new(read_tensor(&dir.join(&l.image))?)?;
            let pose = PoseInput::from_parts(l.keypoints, read_tensor(&dir.join(&l.pose))?)?;
            Ok(CorpusRecord {
                record_id: l.record_id,
                identity_id: l.identity_id,
                split: l.split,
                variant: l.variant,
                caption_kind: l.caption_kind,
                image,
                pose,
                caption: l.caption,
                prompt: l.prompt,
                action: l.action,
                scene: l.scene,
            })
        })
        .collect::<Result<_>>()?;
    let index = PairIndex::from_sorted(index_map);
    if index != PairIndex::build(&records) {
        return Err(Error::Format {
            path: dir.join("pair_index.json"),
            msg: "pair index disagrees with the manifest".into(),
        });
    }
    Ok(Corpus { config, identities, records, index, report })
}
