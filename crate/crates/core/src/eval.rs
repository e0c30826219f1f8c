//! Relation scoring: trajectory overlap, cross-segment association, and the
//! tagging (P@K) and detection (mAP, R@K) metrics.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BBox, Tracklet};

/// A frame-contiguous box sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    pub boxes: Vec<BBox>,
}

impl Trajectory {
    pub fn new(boxes: Vec<BBox>) -> Result<Self> {
        let t = Self { boxes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Data("empty trajectory".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate()?;
            if i > 0 && b.t != self.boxes[i - 1].t + 1 {
                return Err(Error::Data(format!("trajectory not frame-contiguous at frame {}", b.t)));
            }
        }
        Ok(())
    }

    /// Frames `[start, end)` of a tracklet.
    pub fn from_tracklet(tracklet: &Tracklet, start: u32, end: u32) -> Option<Self> {
        tracklet.clip(start, end).map(|c| Self { boxes: c.boxes })
    }

    pub fn start(&self) -> u32 {
        self.boxes[0].t
    }

    /// Exclusive end frame.
    pub fn end(&self) -> u32 {
        self.boxes[self.boxes.len() - 1].t + 1
    }

    pub fn box_at(&self, t: u32) -> Option<&BBox> {
        let s = self.start();
        if t < s {
            return None;
        }
        self.boxes.get((t - s) as usize)
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(BBox::area).sum()
    }

    /// Frame-wise average on shared frames, union of extents otherwise.
    pub fn merge(&self, other: &Trajectory) -> Trajectory {
        let (s, e) = (self.start().min(other.start()), self.end().max(other.end()));
        let boxes = (s..e)
            .filter_map(|t| match (self.box_at(t), other.box_at(t)) {
                (Some(a), Some(b)) => Some(BBox::new(
                    t,
                    (a.x + b.x) / 2.0,
                    (a.y + b.y) / 2.0,
                    (a.w + b.w) / 2.0,
                    (a.h + b.h) / 2.0,
                )),
                (Some(a), None) => Some(*a),
                (None, Some(b)) => Some(*b),
                (None, None) => None,
            })
            .collect();
        Trajectory { boxes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViouMode {
    /// Frames covered by only one trajectory add that box's area to the union.
    #[default]
    Volumetric,
    /// Both sums run over co-visible frames only.
    SharedExtent,
}

/// Voluminal IoU: summed per-frame intersection over summed per-frame union.
pub fn viou(a: &Trajectory, b: &Trajectory, mode: ViouMode) -> f64 {
    let (s, e) = (a.start().max(b.start()), a.end().min(b.end()));
    let mut inter = 0.0;
    let mut shared_union = 0.0;
    for t in s..e.max(s) {
        if let (Some(x), Some(y)) = (a.box_at(t), b.box_at(t)) {
            // coordinate round-off would otherwise keep identical boxes below 1
            let i = if x == y { x.area() } else { x.intersection_area(y) };
            inter += i;
            shared_union += x.area() + y.area() - i;
        }
    }
    let union = match mode {
        ViouMode::SharedExtent => shared_union,
        ViouMode::Volumetric => {
            let only = |tr: &Trajectory| -> f64 {
                tr.boxes.iter().filter(|bx| bx.t < s || bx.t >= e).map(BBox::area).sum()
            };
            shared_union + only(a) + only(b)
        }
    };
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).min(1.0)
}

/// `(subject, predicate, object)` class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet(pub usize, pub usize, pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationInstance {
    pub video_id: String,
    pub triplet: Triplet,
    pub score: f64,
    pub subject_traj: Trajectory,
    pub object_traj: Trajectory,
}

impl RelationInstance {
    pub fn validate(&self) -> Result<()> {
        self.subject_traj.validate()?;
        self.object_traj.validate()?;
        if !self.score.is_finite() {
            return Err(Error::Data(format!("non-finite score in video `{}`", self.video_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub viou_threshold: f64,
    pub viou_mode: ViouMode,
    /// Shared-frame vIoU needed to stitch instances across segments.
    pub association_threshold: f64,
    pub tagging_ks: Vec<usize>,
    pub recall_ks: Vec<usize>,
    /// Entity classes tried per subject and per object when forming candidates.
    pub entity_top: usize,
    /// Predicate classes tried per pair.
    pub predicate_top: usize,
    pub triplets_per_pair: usize,
    pub max_predictions_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            viou_threshold: 0.5,
            viou_mode: ViouMode::Volumetric,
            association_threshold: 0.5,
            tagging_ks: vec![1, 5, 10],
            recall_ks: vec![50, 100],
            entity_top: 2,
            predicate_top: 3,
            triplets_per_pair: 5,
            max_predictions_per_video: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("viou_threshold", self.viou_threshold), ("association_threshold", self.association_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if self.tagging_ks.iter().chain(&self.recall_ks).any(|&k| k == 0) {
            return Err(Error::Config("metric cutoffs must be positive".into()));
        }
        if self.entity_top == 0 || self.predicate_top == 0 || self.triplets_per_pair == 0 || self.max_predictions_per_video == 0 {
            return Err(Error::Config("candidate limits must be positive".into()));
        }
        Ok(())
    }
}

struct Track {
    inst: RelationInstance,
    score_sum: f64,
    members: usize,
    last_segment: usize,
}

/// Stitches per-segment predictions of one video into video-level instances.
///
/// Instances of consecutive segments with the same triplet are candidate
/// links when subject and object shared-frame vIoU both exceed `threshold`.
/// Links are taken greedily by decreasing `min(vIoU_s, vIoU_o)`, ties by
/// track then instance order, each side used at most once.
pub fn greedy_associate(segments: &[Vec<RelationInstance>], threshold: f64) -> Vec<RelationInstance> {
    let mut tracks: Vec<Track> = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let mut edges: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, tr) in tracks.iter().enumerate() {
            if tr.last_segment + 1 != si {
                continue;
            }
            for (ni, inst) in seg.iter().enumerate() {
                if inst.triplet != tr.inst.triplet || inst.video_id != tr.inst.video_id {
                    continue;
                }
                let vs = viou(&tr.inst.subject_traj, &inst.subject_traj, ViouMode::SharedExtent);
                let vo = viou(&tr.inst.object_traj, &inst.object_traj, ViouMode::SharedExtent);
                if vs > threshold && vo > threshold {
                    edges.push((vs.min(vo), ti, ni));
                }
            }
        }
        edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut inst_used = vec![false; seg.len()];
        for (_, ti, ni) in edges {
            if track_used[ti] || inst_used[ni] {
                continue;
            }
            track_used[ti] = true;
            inst_used[ni] = true;
            let tr = &mut tracks[ti];
            let inst = &seg[ni];
            tr.inst.subject_traj = tr.inst.subject_traj.merge(&inst.subject_traj);
            tr.inst.object_traj = tr.inst.object_traj.merge(&inst.object_traj);
            tr.score_sum += inst.score;
            tr.members += 1;
            tr.last_segment = si;
        }
        for (ni, inst) in seg.iter().enumerate() {
            if !inst_used[ni] {
                tracks.push(Track {
                    inst: inst.clone(),
                    score_sum: inst.score,
                    members: 1,
                    last_segment: si,
                });
            }
        }
    }
    tracks
        .into_iter()
        .map(|t| {
            let mut inst = t.inst;
            if t.members > 1 {
                inst.score = t.score_sum / t.members as f64;
            }
            inst
        })
        .collect()
}

/// Instances grouped by video id.
pub type VideoInstances = BTreeMap<String, Vec<RelationInstance>>;

pub fn group_by_video(instances: Vec<RelationInstance>) -> VideoInstances {
    let mut out = VideoInstances::new();
    for inst in instances {
        out.entry(inst.video_id.clone()).or_default().push(inst);
    }
    out
}

/// Indices of `preds` by decreasing score, ties by position.
pub fn rank_order(preds: &[RelationInstance]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    idx
}

/// P@K for one video: distinct predicted triplets ranked by their best
/// score, hits among the first `min(K, #distinct)` divided by that count.
pub fn video_tagging_precision(preds: &[RelationInstance], gt: &[RelationInstance], ks: &[usize]) -> Vec<f64> {
    let truth: BTreeSet<Triplet> = gt.iter().map(|g| g.triplet).collect();
    let mut seen = BTreeSet::new();
    let ranked: Vec<Triplet> = rank_order(preds)
        .into_iter()
        .map(|i| preds[i].triplet)
        .filter(|t| seen.insert(*t))
        .collect();
    ks.iter()
        .map(|&k| {
            let cut = k.min(ranked.len());
            if cut == 0 {
                return 0.0;
            }
            let hits = ranked[..cut].iter().filter(|t| truth.contains(t)).count();
            hits as f64 / cut as f64
        })
        .collect()
}

/// True-positive flags of `preds` in rank order.
///
/// Walking down the ranking, a prediction claims the still-unmatched ground
/// truth instance with the same triplet whose `min(vIoU_s, vIoU_o)` is
/// largest, provided both exceed the threshold.
pub fn match_detections(preds: &[RelationInstance], gt: &[RelationInstance], threshold: f64, mode: ViouMode) -> Vec<bool> {
    let mut taken = vec![false; gt.len()];
    rank_order(preds)
        .into_iter()
        .map(|pi| {
            let p = &preds[pi];
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gt.iter().enumerate() {
                if taken[gi] || g.triplet != p.triplet {
                    continue;
                }
                let vs = viou(&p.subject_traj, &g.subject_traj, mode);
                let vo = viou(&p.object_traj, &g.object_traj, mode);
                if vs > threshold && vo > threshold {
                    let m = vs.min(vo);
                    if best.is_none_or(|(bm, _)| m > bm) {
                        best = Some((m, gi));
                    }
                }
            }
            match best {
                Some((_, gi)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision of a ranked TP/FP list.
///
/// Recall advances by `1/n_gt` at each true positive; each step is weighted
/// by the best precision reached at that rank or later.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let prec: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            hits += t as usize;
            hits as f64 / (i + 1) as f64
        })
        .collect();
    let mut best_after = vec![0.0; prec.len()];
    let mut running = 0.0f64;
    for i in (0..prec.len()).rev() {
        running = running.max(prec[i]);
        best_after[i] = running;
    }
    let mut sum = 0.0;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            sum += best_after[i];
        }
    }
    sum / n_gt as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub ap: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

pub fn score_video(preds: &[RelationInstance], gt: &[RelationInstance], cfg: &EvalConfig) -> VideoScores {
    let tp = match_detections(preds, gt, cfg.viou_threshold, cfg.viou_mode);
    let recall = cfg
        .recall_ks
        .iter()
        .map(|&k| tp.iter().take(k).filter(|&&t| t).count() as f64 / gt.len() as f64)
        .collect();
    VideoScores {
        ap: average_precision(&tp, gt.len()),
        recall,
        precision: video_tagging_precision(preds, gt, &cfg.tagging_ks),
    }
}

/// The headline numbers, averaged over videos with at least one ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub mean_ap: f64,
    /// Detection recall keyed by cutoff.
    pub recall: BTreeMap<usize, f64>,
    /// Tagging precision keyed by cutoff.
    pub precision: BTreeMap<usize, f64>,
    pub videos: usize,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.precision.get(&k).copied()
    }

    pub fn table(&self) -> String {
        let mut head = vec!["mAP".to_owned()];
        let mut vals = vec![self.mean_ap];
        for (k, v) in &self.recall {
            head.push(format!("R@{k}"));
            vals.push(*v);
        }
        for (k, v) in &self.precision {
            head.push(format!("P@{k}"));
            vals.push(*v);
        }
        let head: Vec<String> = head.iter().map(|h| format!("{h:>8}")).collect();
        let vals: Vec<String> = vals.iter().map(|v| format!("{:>8.4}", v)).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

/// Scores predictions against ground truth, video by video.
pub fn evaluate(preds: &VideoInstances, gt: &VideoInstances, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let videos: Vec<(&String, &Vec<RelationInstance>)> = gt.iter().filter(|(_, g)| !g.is_empty()).collect();
    let empty = Vec::new();
    let per_video: Vec<VideoScores> = videos
        .par_iter()
        .map(|(vid, g)| score_video(preds.get(*vid).unwrap_or(&empty), g, cfg))
        .collect();
    let n = per_video.len();
    let mean = |f: &dyn Fn(&VideoScores) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_video.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(MetricsReport {
        mean_ap: mean(&|s| s.ap),
        recall: cfg.recall_ks.iter().enumerate().map(|(j, &k)| (k, mean(&|s| s.recall[j]))).collect(),
        precision: cfg.tagging_ks.iter().enumerate().map(|(j, &k)| (k, mean(&|s| s.precision[j]))).collect(),
        videos: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(start: u32, n: u32, x: f64) -> Trajectory {
        Trajectory::new((start..start + n).map(|t| BBox::new(t, x, 5.0, 4.0, 4.0)).collect()).unwrap()
    }

    fn inst(vid: &str, tri: Triplet, score: f64, s: Trajectory, o: Trajectory) -> RelationInstance {
        RelationInstance {
            video_id: vid.into(),
            triplet: tri,
            score,
            subject_traj: s,
            object_traj: o,
        }
    }

    #[test]
    fn viou_unit_truths() {
        let a = traj(0, 5, 1.0);
        assert_eq!(viou(&a, &a, ViouMode::Volumetric), 1.0);
        assert_eq!(viou(&a, &traj(10, 3, 1.0), ViouMode::Volumetric), 0.0);
        let unit = |ts: &[u32]| Trajectory::new(ts.iter().map(|&t| BBox::new(t, 1.0, 1.0, 1.0, 1.0)).collect()).unwrap();
        let v = viou(&unit(&[1, 2]), &unit(&[2, 3]), ViouMode::Volumetric);
        assert_eq!(v, 1.0 / 3.0);
        assert_eq!(viou(&unit(&[1, 2]), &unit(&[2, 3]), ViouMode::SharedExtent), 1.0);
    }

    #[test]
    fn trajectory_must_be_contiguous() {
        let gap = vec![BBox::new(0, 1.0, 1.0, 1.0, 1.0), BBox::new(2, 1.0, 1.0, 1.0, 1.0)];
        assert!(Trajectory::new(gap).is_err());
        assert!(Trajectory::new(vec![]).is_err());
    }

    #[test]
    fn single_segment_association_is_identity() {
        let seg = vec![
            inst("v", Triplet(0, 1, 2), 0.5, traj(0, 10, 1.0), traj(0, 10, 3.0)),
            inst("v", Triplet(0, 1, 2), 0.7, traj(0, 10, 1.5), traj(0, 10, 3.0)),
        ];
        assert_eq!(greedy_associate(std::slice::from_ref(&seg), 0.5), seg);
    }

    #[test]
    fn aligned_segments_merge_into_one() {
        let a = inst("v", Triplet(0, 1, 2), 0.4, traj(0, 30, 1.0), traj(0, 30, 9.0));
        let b = inst("v", Triplet(0, 1, 2), 0.8, traj(15, 30, 1.0), traj(15, 30, 9.0));
        let out = greedy_associate(&[vec![a], vec![b]], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].subject_traj.start(), out[0].subject_traj.end()), (0, 45));
        assert!((out[0].score - 0.6).abs() < 1e-15);
        out[0].subject_traj.validate().unwrap();
    }

    #[test]
    fn different_triplets_do_not_merge() {
        let a = inst("v", Triplet(0, 1, 2), 0.4, traj(0, 30, 1.0), traj(0, 30, 9.0));
        let b = inst("v", Triplet(0, 2, 2), 0.8, traj(15, 30, 1.0), traj(15, 30, 9.0));
        assert_eq!(greedy_associate(&[vec![a], vec![b]], 0.5).len(), 2);
    }

    #[test]
    fn tagging_examples() {
        let g = vec![inst("v", Triplet(1, 1, 1), 1.0, traj(0, 3, 1.0), traj(0, 3, 1.0))];
        let mut preds: Vec<RelationInstance> = (0..5)
            .map(|i| inst("v", Triplet(0, i, 0), 1.0 - i as f64 * 0.1, traj(0, 3, 1.0), traj(0, 3, 1.0)))
            .collect();
        preds[3].triplet = Triplet(1, 1, 1);
        assert_eq!(video_tagging_precision(&preds, &g, &[5]), vec![0.2]);
        assert_eq!(video_tagging_precision(&[], &g, &[1, 5]), vec![0.0, 0.0]);
        assert_eq!(video_tagging_precision(&g, &g, &[1, 5, 10]), vec![1.0; 3]);
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[], 3), 0.0);
        // a late hit lifts the precision credited to an earlier one
        let ap = average_precision(&[false, true, true], 2);
        assert!((ap - 2.0 / 3.0).abs() < 1e-15);
    }

    fn toy_gt() -> VideoInstances {
        let mut gt = VideoInstances::new();
        gt.insert(
            "a".into(),
            vec![
                inst("a", Triplet(0, 1, 2), 1.0, traj(0, 20, 1.0), traj(0, 20, 20.0)),
                inst("a", Triplet(2, 0, 1), 1.0, traj(5, 20, 40.0), traj(5, 20, 60.0)),
            ],
        );
        gt.insert("b".into(), vec![inst("b", Triplet(1, 1, 1), 1.0, traj(0, 10, 3.0), traj(0, 10, 30.0))]);
        gt
    }

    #[test]
    fn ground_truth_as_predictions_scores_one() {
        let gt = toy_gt();
        let r = evaluate(&gt, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert!(r.recall.values().chain(r.precision.values()).all(|&v| v == 1.0));
        assert_eq!(r.videos, 2);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let r = evaluate(&VideoInstances::new(), &toy_gt(), &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 0.0);
        assert!(r.recall.values().chain(r.precision.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn report_table_has_six_columns() {
        let r = evaluate(&toy_gt(), &toy_gt(), &EvalConfig::default()).unwrap();
        let t = r.table();
        assert!(t.contains("mAP") && t.contains("R@100") && t.contains("P@10"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mAP\""));
    }

    fn arb_traj() -> impl Strategy<Value = Trajectory> {
        (0u32..10, 1u32..8, 1.0f64..20.0, 1.0f64..20.0, 1.0f64..10.0, 1.0f64..10.0).prop_map(|(s, n, x, y, w, h)| {
            Trajectory::new((s..s + n).map(|t| BBox::new(t, x + t as f64 * 0.5, y, w, h)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn viou_symmetric_and_bounded(a in arb_traj(), b in arb_traj()) {
            for mode in [ViouMode::Volumetric, ViouMode::SharedExtent] {
                let (x, y) = (viou(&a, &b, mode), viou(&b, &a, mode));
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
            }
            prop_assert_eq!(viou(&a, &a, ViouMode::Volumetric), 1.0);
        }

        #[test]
        fn metrics_are_rank_only(scores in prop::collection::vec(0.01f64..1.0, 1..8), c in 0.1f64..10.0, seed in 0u32..5) {
            let gt = toy_gt();
            let mut preds = VideoInstances::new();
            let base: Vec<RelationInstance> = gt["a"].iter().chain(&gt["b"]).cloned().collect();
            for (i, s) in scores.iter().enumerate() {
                let mut p = base[(i + seed as usize) % base.len()].clone();
                p.score = *s;
                if i % 3 == 1 {
                    p.subject_traj = traj(i as u32, 6, 2.0);
                }
                preds.entry(p.video_id.clone()).or_insert_with(Vec::new).push(p);
            }
            let cfg = EvalConfig { recall_ks: vec![1, 2], ..EvalConfig::default() };
            let r1 = evaluate(&preds, &gt, &cfg).unwrap();
            for v in preds.values_mut() {
                for p in v.iter_mut() {
                    p.score *= c;
                }
            }
            let r2 = evaluate(&preds, &gt, &cfg).unwrap();
            prop_assert_eq!(&r1, &r2);
            prop_assert!(r1.recall[&1] <= r1.recall[&2]);
        }
    }
}
