//! On-disk dataset: `meta.json`, `tracklets.jsonl` and `relations.jsonl`,
//! plus the derived training samples and ground-truth relation instances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{RelationInstance, Trajectory, Triplet, VideoInstances};
use crate::expert::PairLabels;
use crate::features::{enumerate_pairs, BBox, SegmentConfig, SegmentIndex, Tracklet, TrackletPair};
use crate::model::TrainingSample;

pub const META_FILE: &str = "meta.json";
pub const TRACKLETS_FILE: &str = "tracklets.jsonl";
pub const RELATIONS_FILE: &str = "relations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub id: String,
    pub num_frames: u32,
    /// Latent generator mode, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub entity_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
    pub feature_dim: usize,
    pub segment: SegmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<usize>,
    pub videos: Vec<VideoMeta>,
}

/// One line of `tracklets.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub video_id: String,
    pub tracklet_id: u32,
    #[serde(default)]
    pub class_label: Option<usize>,
    pub boxes: Vec<BBox>,
    pub feature: Vec<f64>,
}

/// One line of `relations.jsonl`; frames `[begin_frame, end_frame)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRelation {
    pub video_id: String,
    pub triplet: Triplet,
    pub subject_tracklet_id: u32,
    pub object_tracklet_id: u32,
    pub begin_frame: u32,
    pub end_frame: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub meta: VideoMeta,
    pub tracklets: Vec<Tracklet>,
}

impl Video {
    pub fn tracklet(&self, id: u32) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.id == id)
    }

    pub fn segments(&self, config: SegmentConfig) -> Result<SegmentIndex> {
        SegmentIndex::build(&self.tracklets, self.meta.num_frames, config)
    }

    /// Every ordered pair of every segment, in segment order.
    pub fn segment_pairs(&self, config: SegmentConfig) -> Result<Vec<Vec<TrackletPair>>> {
        self.segments(config)?.segments.iter().map(enumerate_pairs).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// In `meta.videos` order.
    pub videos: Vec<Video>,
    pub relations: Vec<GtRelation>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        let line = serde_json::to_string(&row).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_owned(),
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.entity_classes.len() < 2 || m.predicate_classes.is_empty() {
            return Err(Error::Data("dataset needs at least 2 entity and 1 predicate class".into()));
        }
        m.segment.validate()?;
        if self.videos.len() != m.videos.len() {
            return Err(Error::Data("video list does not match metadata".into()));
        }
        let mut seen_videos = BTreeSet::new();
        for (v, vm) in self.videos.iter().zip(&m.videos) {
            if v.meta != *vm || !seen_videos.insert(vm.id.as_str()) {
                return Err(Error::Data(format!("video `{}` duplicated or out of order", vm.id)));
            }
            let mut ids = BTreeSet::new();
            for t in &v.tracklets {
                t.validate()?;
                if !ids.insert(t.id) {
                    return Err(Error::Data(format!("video `{}` repeats tracklet id {}", vm.id, t.id)));
                }
                if t.feature.len() != m.feature_dim {
                    return Err(Error::Data(format!(
                        "video `{}` tracklet {} has feature dim {}, expected {}",
                        vm.id,
                        t.id,
                        t.feature.len(),
                        m.feature_dim
                    )));
                }
                if t.class_label.is_some_and(|c| c >= m.entity_classes.len()) {
                    return Err(Error::Data(format!("video `{}` tracklet {} class out of range", vm.id, t.id)));
                }
                if t.end() > vm.num_frames {
                    return Err(Error::Data(format!("video `{}` tracklet {} runs past the last frame", vm.id, t.id)));
                }
            }
        }
        let index: HashMap<&str, &Video> = self.videos.iter().map(|v| (v.meta.id.as_str(), v)).collect();
        for r in &self.relations {
            let v = index
                .get(r.video_id.as_str())
                .ok_or_else(|| Error::Data(format!("relation refers to unknown video `{}`", r.video_id)))?;
            let Triplet(s, p, o) = r.triplet;
            if s >= m.entity_classes.len() || o >= m.entity_classes.len() || p >= m.predicate_classes.len() {
                return Err(Error::Data(format!("relation triplet {:?} outside the vocabulary", r.triplet)));
            }
            for id in [r.subject_tracklet_id, r.object_tracklet_id] {
                let t = v
                    .tracklet(id)
                    .ok_or_else(|| Error::Data(format!("relation refers to unknown tracklet {id} in `{}`", r.video_id)))?;
                if r.begin_frame < t.start() || r.end_frame > t.end() || r.begin_frame >= r.end_frame {
                    return Err(Error::Data(format!(
                        "relation frames [{}, {}) outside tracklet {id} of `{}`",
                        r.begin_frame, r.end_frame, r.video_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(META_FILE), &self.meta)?;
        let records = self.videos.iter().flat_map(|v| {
            v.tracklets.iter().map(move |t| TrackletRecord {
                video_id: v.meta.id.clone(),
                tracklet_id: t.id,
                class_label: t.class_label,
                boxes: t.boxes.clone(),
                feature: t.feature.clone(),
            })
        });
        write_jsonl(&dir.join(TRACKLETS_FILE), records)?;
        write_jsonl(&dir.join(RELATIONS_FILE), self.relations.iter())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join(META_FILE))?;
        let records: Vec<TrackletRecord> = read_jsonl(&dir.join(TRACKLETS_FILE))?;
        let relations: Vec<GtRelation> = read_jsonl(&dir.join(RELATIONS_FILE))?;
        let pos: HashMap<&str, usize> = meta.videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
        let mut videos: Vec<Video> = meta
            .videos
            .iter()
            .map(|vm| Video {
                meta: vm.clone(),
                tracklets: Vec::new(),
            })
            .collect();
        for r in records {
            let i = *pos
                .get(r.video_id.as_str())
                .ok_or_else(|| Error::Data(format!("tracklet record for unknown video `{}`", r.video_id)))?;
            videos[i].tracklets.push(Tracklet::new(r.tracklet_id, r.class_label, r.boxes, r.feature)?);
        }
        let ds = Self { meta, videos, relations };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_tracklets(&self) -> usize {
        self.videos.iter().map(|v| v.tracklets.len()).sum()
    }

    /// Ground-truth relations as scored instances (score 1), grouped by video.
    /// Every video appears, possibly with an empty list.
    pub fn ground_truth(&self) -> Result<VideoInstances> {
        let mut out: VideoInstances = self.videos.iter().map(|v| (v.meta.id.clone(), Vec::new())).collect();
        let index: HashMap<&str, &Video> = self.videos.iter().map(|v| (v.meta.id.as_str(), v)).collect();
        for r in &self.relations {
            let v = index
                .get(r.video_id.as_str())
                .ok_or_else(|| Error::Data(format!("relation refers to unknown video `{}`", r.video_id)))?;
            let traj = |id: u32| -> Result<Trajectory> {
                v.tracklet(id)
                    .and_then(|t| Trajectory::from_tracklet(t, r.begin_frame, r.end_frame))
                    .ok_or_else(|| Error::Data(format!("relation tracklet {id} missing in `{}`", r.video_id)))
            };
            out.get_mut(&r.video_id).expect("video listed").push(RelationInstance {
                video_id: r.video_id.clone(),
                triplet: r.triplet,
                score: 1.0,
                subject_traj: traj(r.subject_tracklet_id)?,
                object_traj: traj(r.object_tracklet_id)?,
            });
        }
        Ok(out)
    }

    /// Labelled pairs of every segment of every video.
    ///
    /// A predicate is on for a pair when some ground-truth relation of the
    /// same subject/object tracklets with that predicate spans the pair's
    /// whole co-visible window.
    pub fn training_samples(&self) -> Result<Vec<TrainingSample>> {
        let mut by_pair: HashMap<(&str, u32, u32), Vec<&GtRelation>> = HashMap::new();
        for r in &self.relations {
            by_pair
                .entry((r.video_id.as_str(), r.subject_tracklet_id, r.object_tracklet_id))
                .or_default()
                .push(r);
        }
        let cp = self.meta.predicate_classes.len();
        let mut out = Vec::new();
        for v in &self.videos {
            for seg in v.segment_pairs(self.meta.segment)? {
                for pair in seg {
                    let (Some(s), Some(o)) = (pair.subject.class_label, pair.object.class_label) else {
                        return Err(Error::Data(format!(
                            "video `{}` has unlabelled tracklets; cannot build training samples",
                            v.meta.id
                        )));
                    };
                    let mut predicates = vec![0.0; cp];
                    let key = (v.meta.id.as_str(), pair.subject.id, pair.object.id);
                    for r in by_pair.get(&key).into_iter().flatten() {
                        if r.begin_frame <= pair.span.0 && r.end_frame >= pair.span.1 {
                            predicates[r.triplet.1] = 1.0;
                        }
                    }
                    out.push(TrainingSample {
                        labels: PairLabels {
                            subject: s,
                            object: o,
                            predicates,
                        },
                        pair,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Segment pair counts per latent mode (`None` for videos without one).
    pub fn mode_split_report(&self) -> Result<BTreeMap<Option<usize>, usize>> {
        let mut out = BTreeMap::new();
        for v in &self.videos {
            let n: usize = v.segment_pairs(self.meta.segment)?.iter().map(Vec::len).sum();
            *out.entry(v.meta.mode).or_insert(0) += n;
        }
        Ok(out)
    }

    /// Relation instances per predicate name.
    pub fn predicate_counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self.meta.predicate_classes.iter().map(|p| (p.clone(), 0)).collect();
        for r in &self.relations {
            *out.entry(self.meta.predicate_classes[r.triplet.1].clone()).or_insert(0) += 1;
        }
        out
    }
}

/// Writes predictions as line-delimited JSON.
pub fn write_predictions(path: &Path, preds: &VideoInstances) -> Result<()> {
    write_jsonl(path, preds.values().flatten())
}

pub fn read_predictions(path: &Path) -> Result<VideoInstances> {
    let rows: Vec<RelationInstance> = read_jsonl(path)?;
    for r in &rows {
        r.validate()?;
    }
    Ok(crate::eval::group_by_video(rows))
}
