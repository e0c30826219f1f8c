//! Deterministic synthetic relation world.
//!
//! Entities move along scripted straight or circular paths; some videos
//! contain a follower that retraces another entity's path a few frames
//! behind. Predicates are decided per sliding window by kinematic rules and
//! consecutive positive windows are merged into one ground-truth relation.
//! Appearance features are Gaussian around a class embedding shifted by a
//! per-mode offset, with the class-to-embedding assignment permuted per mode.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, GtRelation, Video, VideoMeta};
use crate::error::{Error, Result};
use crate::eval::Triplet;
use crate::features::{BBox, SegmentConfig, Tracklet};
use crate::rng::stream_rng;

pub const PREDICATE_NAMES: [&str; 5] = ["approaches", "departs", "above", "below", "follows"];
pub const APPROACHES: usize = 0;
pub const DEPARTS: usize = 1;
pub const ABOVE: usize = 2;
pub const BELOW: usize = 3;
pub const FOLLOWS: usize = 4;

const ENTITY_NAMES: [&str; 8] = ["person", "dog", "car", "ball", "bicycle", "bird", "horse", "cat"];
/// Frames by which a follower trails its leader.
const FOLLOW_LAG: f64 = 4.0;

/// Thresholds of the kinematic predicate rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuleConfig {
    /// Vertical separation, as a fraction of the object's height, for above/below.
    pub vertical_margin: f64,
    /// Fraction of co-visible frames on which above/below must hold.
    pub vertical_fraction: f64,
    pub follow_angle_deg: f64,
    /// Fraction of frame steps on which follows must hold.
    pub follow_fraction: f64,
    /// Minimum per-frame speed of both entities for follows.
    pub min_speed: f64,
    /// Co-visible frames needed before any predicate is decided.
    pub min_frames: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            vertical_margin: 0.5,
            vertical_fraction: 0.8,
            follow_angle_deg: 15.0,
            follow_fraction: 0.8,
            min_speed: 0.3,
            min_frames: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub num_frames: u32,
    pub entities_per_video: usize,
    pub entity_classes: usize,
    pub predicate_classes: usize,
    pub feature_dim: usize,
    /// Feature noise standard deviation.
    pub feature_noise: f64,
    /// Number of latent modes; video `i` belongs to mode `i % modes`.
    pub modes: usize,
    /// Standard deviation of the per-mode feature offset.
    pub mode_offset: f64,
    pub follow_probability: f64,
    pub frame_width: f64,
    pub frame_height: f64,
    pub segment: SegmentConfig,
    pub rules: RuleConfig,
    /// Root seed; taken from the run seed rather than the `[synth]` table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 200,
            num_test_videos: 60,
            num_frames: 60,
            entities_per_video: 4,
            entity_classes: 5,
            predicate_classes: 5,
            feature_dim: 16,
            feature_noise: 0.5,
            modes: 4,
            mode_offset: 1.5,
            follow_probability: 0.5,
            frame_width: 320.0,
            frame_height: 240.0,
            segment: SegmentConfig::default(),
            rules: RuleConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.entity_classes < 2 {
            return bad(format!("entity_classes must be >= 2, got {}", self.entity_classes));
        }
        if !(2..=PREDICATE_NAMES.len()).contains(&self.predicate_classes) {
            return bad(format!("predicate_classes must be in 2..={}, got {}", PREDICATE_NAMES.len(), self.predicate_classes));
        }
        if self.modes == 0 || self.feature_dim == 0 || self.entities_per_video < 2 || self.num_frames < 2 {
            return bad("modes, feature_dim must be >= 1; entities_per_video and num_frames >= 2".into());
        }
        if !(self.feature_noise >= 0.0) || !(self.mode_offset >= 0.0) {
            return bad("feature_noise and mode_offset must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.follow_probability) {
            return bad("follow_probability must lie in [0, 1]".into());
        }
        if !(self.frame_width >= 200.0 && self.frame_height >= 160.0) {
            return bad("frame must be at least 200x160".into());
        }
        self.segment.validate()
    }

    pub fn entity_names(&self) -> Vec<String> {
        (0..self.entity_classes)
            .map(|i| ENTITY_NAMES.get(i).map_or_else(|| format!("entity{i}"), |s| s.to_string()))
            .collect()
    }

    pub fn predicate_names(&self) -> Vec<String> {
        PREDICATE_NAMES[..self.predicate_classes].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Quantities shared by every video of every split.
#[derive(Debug, Clone)]
pub struct World {
    pub embeddings: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    /// `perms[m][c]` is the embedding used by class `c` in mode `m`.
    pub perms: Vec<Vec<usize>>,
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, "world", 0);
        let d = cfg.feature_dim;
        let embeddings = (0..cfg.entity_classes)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let (offsets, perms) = if cfg.modes == 1 {
            (vec![vec![0.0; d]], vec![(0..cfg.entity_classes).collect()])
        } else {
            let offsets = (0..cfg.modes)
                .map(|_| (0..d).map(|_| cfg.mode_offset * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect();
            let perms = (0..cfg.modes)
                .map(|m| {
                    let mut p: Vec<usize> = (0..cfg.entity_classes).collect();
                    if m > 0 {
                        p.shuffle(&mut rng);
                    }
                    p
                })
                .collect();
            (offsets, perms)
        };
        Self {
            embeddings,
            offsets,
            perms,
        }
    }

    /// Noise-free feature mean of class `c` in mode `m`.
    pub fn feature_mean(&self, c: usize, m: usize) -> Vec<f64> {
        self.embeddings[self.perms[m][c]].iter().zip(&self.offsets[m]).map(|(e, o)| e + o).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Motion {
    Linear { c0: (f64, f64), v: (f64, f64) },
    Circular { center: (f64, f64), radius: f64, omega: f64, phase: f64 },
}

impl Motion {
    fn at(&self, t: f64) -> (f64, f64) {
        match *self {
            Motion::Linear { c0, v } => (c0.0 + v.0 * t, c0.1 + v.1 * t),
            Motion::Circular {
                center,
                radius,
                omega,
                phase,
            } => {
                let a = phase + omega * t;
                (center.0 + radius * a.cos(), center.1 + radius * a.sin())
            }
        }
    }
}

struct Bounds {
    lo: (f64, f64),
    hi: (f64, f64),
}

fn pick_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        (lo + hi) / 2.0
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_motion(rng: &mut ChaCha8Rng, mode: usize, b: &Bounds, t0: f64, t1: f64) -> Motion {
    match mode % 4 {
        0 | 2 => {
            let speed = rng.random_range(0.8..2.5);
            let angle = if mode.is_multiple_of(4) {
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
            } else {
                let base = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * std::f64::consts::FRAC_PI_2;
                base + rng.random_range(-0.4..0.4)
            };
            let mut v = (speed * angle.cos(), speed * angle.sin());
            loop {
                // start so that the whole [t0, t1] path stays inside the bounds
                let range = |lo: f64, hi: f64, vel: f64| (lo - (vel * t0).min(vel * t1), hi - (vel * t0).max(vel * t1));
                let (xl, xh) = range(b.lo.0, b.hi.0, v.0);
                let (yl, yh) = range(b.lo.1, b.hi.1, v.1);
                if xl <= xh && yl <= yh {
                    return Motion::Linear {
                        c0: (pick_in(rng, xl, xh), pick_in(rng, yl, yh)),
                        v,
                    };
                }
                v = (v.0 * 0.5, v.1 * 0.5);
            }
        }
        m => {
            let (radius, omega): (f64, f64) = if m == 1 {
                (rng.random_range(25.0..45.0), rng.random_range(0.03..0.05))
            } else {
                (rng.random_range(45.0..70.0), rng.random_range(0.015..0.03))
            };
            let max_r = ((b.hi.0 - b.lo.0) / 2.0).min((b.hi.1 - b.lo.1) / 2.0) - 1.0;
            let radius = radius.min(max_r);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Motion::Circular {
                center: (
                    pick_in(rng, b.lo.0 + radius, b.hi.0 - radius),
                    pick_in(rng, b.lo.1 + radius, b.hi.1 - radius),
                ),
                radius,
                omega: sign * omega,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        }
    }
}

fn make_video(cfg: &SynthConfig, world: &World, split: Split, index: usize) -> Result<Video> {
    let mut rng = stream_rng(cfg.seed, &format!("video-{}", split.name()), index as u64);
    let mode = index % cfg.modes;
    // the largest box is 40 px; keep every box corner at least 1 px inside the frame
    let margin = 21.0;
    let b = Bounds {
        lo: (margin, margin),
        hi: (cfg.frame_width - margin, cfg.frame_height - margin),
    };
    let frames = cfg.num_frames;
    let mut motions: Vec<(Motion, f64)> = (0..cfg.entities_per_video)
        .map(|_| (sample_motion(&mut rng, mode, &b, -FOLLOW_LAG, frames as f64), 0.0))
        .collect();
    if rng.random_bool(cfg.follow_probability) {
        motions[1] = (motions[0].0, FOLLOW_LAG);
    }
    let mut tracklets = Vec::with_capacity(cfg.entities_per_video);
    for (e, (motion, lag)) in motions.iter().enumerate() {
        let class = rng.random_range(0..cfg.entity_classes);
        let (w, h) = (rng.random_range(20.0..40.0), rng.random_range(20.0..40.0));
        let boxes = (0..frames)
            .map(|t| {
                let (x, y) = motion.at(t as f64 - lag);
                let x = x.clamp(w / 2.0 + 1.0, cfg.frame_width - w / 2.0 - 1.0);
                let y = y.clamp(h / 2.0 + 1.0, cfg.frame_height - h / 2.0 - 1.0);
                BBox::new(t, x, y, w, h)
            })
            .collect();
        let mut feature = world.feature_mean(class, mode);
        if cfg.feature_noise > 0.0 {
            for f in &mut feature {
                *f += cfg.feature_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        tracklets.push(Tracklet::new(e as u32, Some(class), boxes, feature)?);
    }
    Ok(Video {
        meta: VideoMeta {
            id: format!("{}_{index:04}", split.name()),
            num_frames: frames,
            mode: Some(mode),
        },
        tracklets,
    })
}

fn centers(s: &Tracklet, o: &Tracklet, start: u32, end: u32) -> Vec<(BBox, BBox)> {
    (start..end)
        .filter_map(|t| Some((*s.box_at(t)?, *o.box_at(t)?)))
        .collect()
}

/// Predicates holding for subject `s` and object `o` on their co-visible frames within `[start, end)`.
pub fn window_predicates(s: &Tracklet, o: &Tracklet, start: u32, end: u32, predicate_classes: usize, rules: &RuleConfig) -> Vec<usize> {
    let fr = centers(s, o, start, end);
    let n = fr.len();
    if n < rules.min_frames.max(2) {
        return Vec::new();
    }
    let dist: Vec<f64> = fr.iter().map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()).collect();
    let mut out = Vec::new();
    if dist.windows(2).all(|d| d[1] < d[0]) {
        out.push(APPROACHES);
    }
    if dist.windows(2).all(|d| d[1] > d[0]) {
        out.push(DEPARTS);
    }
    let need = rules.vertical_fraction * n as f64;
    let above = fr.iter().filter(|(a, b)| a.y < b.y - rules.vertical_margin * b.h).count();
    if above as f64 >= need {
        out.push(ABOVE);
    }
    let below = fr.iter().filter(|(a, b)| a.y > b.y + rules.vertical_margin * b.h).count();
    if below as f64 >= need {
        out.push(BELOW);
    }
    let cos_max = rules.follow_angle_deg.to_radians().cos();
    let good = fr
        .windows(2)
        .filter(|w| {
            let (s0, o0) = w[0];
            let (s1, o1) = w[1];
            let vs = (s1.x - s0.x, s1.y - s0.y);
            let vo = (o1.x - o0.x, o1.y - o0.y);
            let (ns, no) = (vs.0.hypot(vs.1), vo.0.hypot(vo.1));
            if ns < rules.min_speed || no < rules.min_speed {
                return false;
            }
            let aligned = (vs.0 * vo.0 + vs.1 * vo.1) / (ns * no) >= cos_max;
            let trails = (o0.x - s0.x) * vo.0 + (o0.y - s0.y) * vo.1 > 0.0;
            aligned && trails
        })
        .count();
    if good as f64 >= rules.follow_fraction * (n - 1) as f64 {
        out.push(FOLLOWS);
    }
    out.retain(|&p| p < predicate_classes);
    out
}

/// Applies the predicate rules window by window and merges runs of
/// consecutive positive windows into relations.
pub fn derive_relations(video: &Video, segment: SegmentConfig, predicate_classes: usize, rules: &RuleConfig) -> Result<Vec<GtRelation>> {
    let windows = segment.windows(video.meta.num_frames);
    let mut order: Vec<&Tracklet> = video.tracklets.iter().collect();
    order.sort_by_key(|t| t.id);
    let mut out = Vec::new();
    for s in &order {
        for o in &order {
            if s.id == o.id {
                continue;
            }
            let (Some(cs), Some(co)) = (s.class_label, o.class_label) else {
                return Err(Error::Data(format!("video `{}` has unlabelled tracklets", video.meta.id)));
            };
            let spans: Vec<Option<(u32, u32)>> = windows
                .iter()
                .map(|&(ws, we)| {
                    let (a, b) = s.overlap(o)?;
                    let (a, b) = (a.max(ws), b.min(we));
                    (a < b).then_some((a, b))
                })
                .collect();
            let hits: Vec<Vec<usize>> = windows
                .iter()
                .map(|&(ws, we)| window_predicates(s, o, ws, we, predicate_classes, rules))
                .collect();
            for p in 0..predicate_classes {
                let mut w = 0;
                while w < windows.len() {
                    if !hits[w].contains(&p) {
                        w += 1;
                        continue;
                    }
                    let first = w;
                    while w + 1 < windows.len() && hits[w + 1].contains(&p) {
                        w += 1;
                    }
                    let (begin, _) = spans[first].expect("positive window is co-visible");
                    let (_, end) = spans[w].expect("positive window is co-visible");
                    out.push(GtRelation {
                        video_id: video.meta.id.clone(),
                        triplet: Triplet(cs, p, co),
                        subject_tracklet_id: s.id,
                        object_tracklet_id: o.id,
                        begin_frame: begin,
                        end_frame: end,
                    });
                    w += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Generates one split.
pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let world = World::new(cfg);
    let n = match split {
        Split::Train => cfg.num_videos,
        Split::Test => cfg.num_test_videos,
    };
    let videos: Vec<Video> = (0..n)
        .into_par_iter()
        .map(|i| make_video(cfg, &world, split, i))
        .collect::<Result<_>>()?;
    let relations: Vec<GtRelation> = videos
        .par_iter()
        .map(|v| derive_relations(v, cfg.segment, cfg.predicate_classes, &cfg.rules))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let ds = Dataset {
        meta: DatasetMeta {
            entity_classes: cfg.entity_names(),
            predicate_classes: cfg.predicate_names(),
            feature_dim: cfg.feature_dim,
            segment: cfg.segment,
            modes: Some(cfg.modes),
            videos: videos.iter().map(|v| v.meta.clone()).collect(),
        },
        videos,
        relations,
    };
    ds.validate()?;
    Ok(ds)
}

/// The training split.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    generate_split(cfg, Split::Train)
}
