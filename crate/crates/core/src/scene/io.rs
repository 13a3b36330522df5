//! Line-delimited JSON scene files.
//!
//! Each non-empty line is one scene record: a JSON object with a mandatory
//! `schema_version` followed by the [`Scene`] fields. Absent vehicle
//! positions are `null`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Label, MapSpec, Point, Scene, Track};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct RecordOut<'a> {
    schema_version: u32,
    #[serde(flatten)]
    scene: &'a Scene,
}

pub fn write_scenes<W: Write>(scenes: &[Scene], mut out: W) -> Result<()> {
    for scene in scenes {
        let line = serde_json::to_string(&RecordOut {
            schema_version: SCENE_SCHEMA_VERSION,
            scene,
        })
        .map_err(|e| Error::json(format!("scene `{}`", scene.scene_id), e))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<scene writer>", e))?;
    }
    Ok(())
}

pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_scenes(scenes, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Best-effort scene id for error messages when a line is not valid JSON.
fn sniff_scene_id(line: &str) -> String {
    let key = "\"scene_id\":\"";
    line.find(key)
        .and_then(|i| {
            let rest = &line[i + key.len()..];
            rest.find('"').map(|end| rest[..end].to_string())
        })
        .unwrap_or_else(|| "<unknown>".into())
}

fn parse_record(line: &str, line_no: usize) -> Result<Scene> {
    let mut value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::SceneLoad {
            scene_id: sniff_scene_id(line),
            reason: format!("line {line_no}: {e}"),
        })?;
    let scene_id = value
        .get("scene_id")
        .and_then(|v| v.as_str())
        .unwrap_or("<unknown>")
        .to_string();
    let obj = value.as_object_mut().ok_or_else(|| Error::SceneLoad {
        scene_id: scene_id.clone(),
        reason: format!("line {line_no}: record is not an object"),
    })?;
    let version = obj
        .remove("schema_version")
        .ok_or_else(|| Error::SceneLoad {
            scene_id: scene_id.clone(),
            reason: format!("line {line_no}: missing schema_version"),
        })?
        .as_u64()
        .unwrap_or(0) as u32;
    if version != SCENE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCENE_SCHEMA_VERSION,
        });
    }
    let scene: Scene = serde_json::from_value(value).map_err(|e| Error::SceneLoad {
        scene_id: scene_id.clone(),
        reason: format!("line {line_no}: {e}"),
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn read_scenes<R: BufRead>(input: R) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<scene reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(parse_record(&line, i + 1)?);
    }
    Ok(scenes)
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scenes(BufReader::new(file))
}

/// Per-timestep label as found in MAAD-style exports: integer codes
/// (`0` normal, `1` abnormal, `-1` or `2` ignored) or label names.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum MaadLabel {
    Code(i64),
    Name(String),
}

impl MaadLabel {
    fn to_label(&self) -> Option<Label> {
        match self {
            MaadLabel::Code(0) => Some(Label::Normal),
            MaadLabel::Code(1) => Some(Label::Abnormal),
            MaadLabel::Code(-1) | MaadLabel::Code(2) => Some(Label::Ignored),
            MaadLabel::Code(_) => None,
            MaadLabel::Name(s) => match s.to_ascii_lowercase().as_str() {
                "normal" => Some(Label::Normal),
                "abnormal" | "anomaly" | "anomalous" => Some(Label::Abnormal),
                "ignored" | "ignore" => Some(Label::Ignored),
                _ => None,
            },
        }
    }
}

/// One externally prepared sequence: coordinate arrays per vehicle plus a
/// label array. A `null` entry or a pair containing `null` marks absence.
#[derive(Debug, Clone, Deserialize)]
pub struct MaadSequence {
    pub scene_id: String,
    #[serde(default)]
    pub anomaly_type: Option<String>,
    #[serde(default)]
    pub timestep_dt: Option<f64>,
    /// `coordinates[vehicle][t]`.
    pub coordinates: Vec<Vec<Option<[Option<f64>; 2]>>>,
    pub labels: Vec<MaadLabel>,
}

/// Converts external sequences into scenes on `map`.
pub fn import_maad(sequences: &[MaadSequence], map: &MapSpec, default_dt: f64) -> Result<Vec<Scene>> {
    map.validate()?;
    sequences
        .iter()
        .map(|seq| {
            let fail = |reason: String| Error::SceneLoad {
                scene_id: seq.scene_id.clone(),
                reason,
            };
            let labels = seq
                .labels
                .iter()
                .enumerate()
                .map(|(t, l)| l.to_label().ok_or_else(|| fail(format!("unknown label {l:?} at t={t}"))))
                .collect::<Result<Vec<_>>>()?;
            let tracks = seq
                .coordinates
                .iter()
                .enumerate()
                .map(|(i, coords)| Track {
                    vehicle_id: i as u32,
                    positions: coords
                        .iter()
                        .map(|c| match c {
                            Some([Some(x), Some(y)]) if x.is_finite() && y.is_finite() => {
                                Some::<Point>([*x, *y])
                            }
                            _ => None,
                        })
                        .collect(),
                })
                .collect();
            let scene = Scene {
                scene_id: seq.scene_id.clone(),
                timestep_dt: seq.timestep_dt.unwrap_or(default_dt),
                anomaly_type: seq.anomaly_type.clone(),
                map: map.clone(),
                labels,
                tracks,
            };
            scene.validate()?;
            Ok(scene)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Scene {
        Scene {
            scene_id: "scene-7".into(),
            timestep_dt: 0.1,
            anomaly_type: Some("wrong_way".into()),
            map: MapSpec::default(),
            labels: vec![Label::Normal, Label::Ignored, Label::Abnormal],
            tracks: vec![
                Track {
                    vehicle_id: 0,
                    positions: vec![Some([0.1, -5.25]), Some([2.6, -5.2]), None],
                },
                Track {
                    vehicle_id: 1,
                    positions: vec![Some([40.0, 1.75]), Some([37.5, 1.75]), Some([35.0, 1.8])],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut first = Vec::new();
        write_scenes(&[sample(), sample()], &mut first).unwrap();
        let loaded = read_scenes(first.as_slice()).unwrap();
        assert_eq!(loaded, vec![sample(), sample()]);
        let mut second = Vec::new();
        write_scenes(&loaded, &mut second).unwrap();
        assert_eq!(first, second);
        assert!(String::from_utf8(first).unwrap().starts_with("{\"schema_version\":1,"));
    }

    #[test]
    fn empty_input_gives_no_scenes() {
        assert!(read_scenes(&b""[..]).unwrap().is_empty());
        assert!(read_scenes(&b"\n\n"[..]).unwrap().is_empty());
    }

    #[test]
    fn nan_coordinate_names_the_scene() {
        let mut buf = Vec::new();
        write_scenes(&[sample()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("-5.2]", "NaN]");
        match read_scenes(text.as_bytes()) {
            Err(Error::SceneLoad { scene_id, .. }) => assert_eq!(scene_id, "scene-7"),
            other => panic!("expected scene load error, got {other:?}"),
        }
        // NaN serialized by a lenient writer as null inside a coordinate pair.
        let mut buf = Vec::new();
        write_scenes(&[sample()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("-5.2]", "null]");
        assert!(matches!(
            read_scenes(text.as_bytes()),
            Err(Error::SceneLoad { scene_id, .. }) if scene_id == "scene-7"
        ));
    }

    #[test]
    fn schema_errors() {
        let mut buf = Vec::new();
        write_scenes(&[sample()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let bumped = text.replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(matches!(
            read_scenes(bumped.as_bytes()),
            Err(Error::SchemaVersion { found: 9, .. })
        ));
        let missing = text.replace("\"labels\"", "\"labelz\"");
        assert!(matches!(read_scenes(missing.as_bytes()), Err(Error::SceneLoad { .. })));
        let unversioned = text.replace("\"schema_version\":1,", "");
        assert!(matches!(read_scenes(unversioned.as_bytes()), Err(Error::SceneLoad { .. })));
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut s = sample();
        s.labels.pop();
        let mut buf = Vec::new();
        write_scenes(&[s], &mut buf).unwrap();
        assert!(read_scenes(buf.as_slice()).is_err());
    }

    #[test]
    fn maad_import() {
        let json = r#"{"scene_id":"m1","anomaly_type":"off_road",
            "coordinates":[[[0.0,-5.0],[1.0,-5.0],null],[[9.0,2.0],[null,null],[7.0,2.0]]],
            "labels":[0,"ignored",1]}"#;
        let seq: MaadSequence = serde_json::from_str(json).unwrap();
        let scenes = import_maad(&[seq], &MapSpec::default(), 0.1).unwrap();
        let s = &scenes[0];
        assert_eq!(s.labels, vec![Label::Normal, Label::Ignored, Label::Abnormal]);
        assert_eq!(s.tracks[0].positions[2], None);
        assert_eq!(s.tracks[1].positions[1], None);
        assert_eq!(s.tracks[1].positions[2], Some([7.0, 2.0]));

        let bad: MaadSequence =
            serde_json::from_str(r#"{"scene_id":"m2","coordinates":[[[0,0]]],"labels":[7]}"#).unwrap();
        assert!(import_maad(&[bad], &MapSpec::default(), 0.1).is_err());
    }
}
