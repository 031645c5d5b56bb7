//! JSONL dataset manifests.
//!
//! Line 1 is a header `{"task","d_A","d_V","d_L","episodes"}`; every further
//! line is one clip `{"episode_id","clip_id","speaker_id","acoustic",
//! "visual","language","meta","label"}` with sequences as arrays of rows.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use adafuse_core::data::{DatasetManifest, FeatureClip, FeatureDims, Task};
use adafuse_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: Task,
    #[serde(rename = "d_A")]
    d_a: usize,
    #[serde(rename = "d_V")]
    d_v: usize,
    #[serde(rename = "d_L")]
    d_l: usize,
    episodes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    episode_id: String,
    clip_id: String,
    speaker_id: String,
    acoustic: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    language: Vec<Vec<f64>>,
    meta: [f64; 2],
    label: f64,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl From<&FeatureClip> for ClipRecord {
    fn from(c: &FeatureClip) -> Self {
        ClipRecord {
            episode_id: c.episode_id.clone(),
            clip_id: c.clip_id.clone(),
            speaker_id: c.speaker_id.clone(),
            acoustic: rows(&c.acoustic),
            visual: rows(&c.visual),
            language: rows(&c.language),
            meta: c.meta,
            label: c.label,
        }
    }
}

impl ClipRecord {
    fn into_clip(self) -> adafuse_core::Result<FeatureClip> {
        let seq = |name: &str, r: &[Vec<f64>]| {
            Tensor::from_rows(r).map_err(|e| adafuse_core::Error::Clip {
                clip_id: self.clip_id.clone(),
                reason: format!("{name}: {e}"),
            })
        };
        Ok(FeatureClip {
            acoustic: seq("acoustic", &self.acoustic)?,
            visual: seq("visual", &self.visual)?,
            language: seq("language", &self.language)?,
            episode_id: self.episode_id,
            clip_id: self.clip_id,
            speaker_id: self.speaker_id,
            meta: self.meta,
            label: self.label,
        })
    }
}

/// Parses a manifest. `origin` only labels error messages.
pub fn read_manifest<R: Read>(reader: R, origin: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(reader).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing header line".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(origin, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(i + 1, format!("header: {e}")))?;
            }
        }
    };
    let mut clips = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ClipRecord = serde_json::from_str(&line).map_err(|e| {
            // name the clip when the line is at least valid JSON
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("clip_id").and_then(|c| c.as_str()).map(str::to_owned));
            match id {
                Some(id) => parse_err(i + 1, format!("clip `{id}`: {e}")),
                None => parse_err(i + 1, e.to_string()),
            }
        })?;
        clips.push(record.into_clip()?);
    }
    let dims = FeatureDims {
        acoustic: header.d_a,
        visual: header.d_v,
        language: header.d_l,
    };
    Ok(DatasetManifest::new(header.task, dims, header.episodes, clips)?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file, path)
}

pub fn write_manifest<W: Write>(manifest: &DatasetManifest, mut out: W) -> std::io::Result<()> {
    let header = Header {
        task: manifest.task,
        d_a: manifest.dims.acoustic,
        d_v: manifest.dims.visual,
        d_l: manifest.dims.language,
        episodes: manifest.episodes.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for clip in &manifest.clips {
        serde_json::to_writer(&mut out, &ClipRecord::from(clip))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(manifest, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use adafuse_core::synth::{generate, PerModality, SynthConfig};

    const HEADER: &str = r#"{"task":"IPP","d_A":2,"d_V":2,"d_L":2,"episodes":["e1"]}"#;

    fn clip(id: &str, label: f64) -> String {
        format!(
            r#"{{"episode_id":"e1","clip_id":"{id}","speaker_id":"s","acoustic":[[0.1,0.2]],"visual":[[1,2],[3,4]],"language":[[0,0]],"meta":[0.4,90],"label":{label}}}"#
        )
    }

    fn parse(text: &str) -> Result<DatasetManifest> {
        read_manifest(text.as_bytes(), Path::new("mem.jsonl"))
    }

    #[test]
    fn three_clip_file() {
        let text = [HEADER.to_string(), clip("c1", 0.1), clip("c2", -0.5), clip("c3", 1.0)].join("\n");
        let m = parse(&text).unwrap();
        assert_eq!(m.clips.len(), 3);
        assert_eq!(m.clips[0].visual.shape(), &[2, 2]);
        assert_eq!(m.clips[2].label, 1.0);
    }

    #[test]
    fn label_out_of_range_names_clip() {
        let text = [HEADER.to_string(), clip("c1", 0.1), clip("bad", 1.5)].join("\n");
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(err.exit_code(), crate::error::exit::DATA);
    }

    #[test]
    fn empty_dataset() {
        let err = parse(HEADER).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
        assert!(parse("").is_err());
    }

    #[test]
    fn malformed_and_mismatched() {
        let text = format!("{HEADER}\n{{\"clip_id\":\"x\",");
        assert!(matches!(parse(&text), Err(Error::Parse { line: 2, .. })));
        let wrong_dim = clip("c1", 0.0).replace("[[0,0]]", "[[0,0,0]]");
        let err = parse(&format!("{HEADER}\n{wrong_dim}")).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
        let extra = clip("c1", 0.0).replace("\"label\"", "\"extra\":1,\"label\"");
        let err = parse(&format!("{HEADER}\n{extra}")).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn write_read_round_trip() {
        let m = generate(&SynthConfig {
            n_episodes: 2,
            clips_per_episode: 3,
            seq_len: PerModality::splat([1, 4]),
            ..SynthConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_manifest(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"task\":\"IPP\""));
        assert_eq!(text.lines().count(), 7);
        let back = read_manifest(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }
}
