//! Segment-level inference, triplet candidates and video-level stitching.

use rayon::prelude::*;

use crate::data::{Dataset, Video};
use crate::error::{Error, Result};
use crate::eval::{evaluate, greedy_associate, rank_order, EvalConfig, MetricsReport, RelationInstance, Trajectory, Triplet, VideoInstances};
use crate::expert::EntityProbs;
use crate::features::SegmentConfig;
use crate::gate::top_k_indices;
use crate::model::MoEModel;

/// Highest-scoring `(triplet, p_s · p_p · p_o)` combinations of one pair.
pub fn triplet_candidates(probs: &EntityProbs, cfg: &EvalConfig) -> Vec<(Triplet, f64)> {
    let subj = top_k_indices(&probs.subject, cfg.entity_top.min(probs.subject.len()));
    let obj = top_k_indices(&probs.object, cfg.entity_top.min(probs.object.len()));
    let pred = top_k_indices(&probs.predicate, cfg.predicate_top.min(probs.predicate.len()));
    let mut out = Vec::with_capacity(subj.len() * obj.len() * pred.len());
    for &s in &subj {
        for &p in &pred {
            for &o in &obj {
                out.push((Triplet(s, p, o), probs.subject[s] * probs.predicate[p] * probs.object[o]));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.truncate(cfg.triplets_per_pair);
    out
}

/// Per-segment instances of one video, then stitched, ranked and capped.
pub fn predict_video(model: &MoEModel, video: &Video, segment: SegmentConfig, cfg: &EvalConfig) -> Result<Vec<RelationInstance>> {
    let mut per_segment = Vec::new();
    for pairs in video.segment_pairs(segment)? {
        let mut seg = Vec::new();
        for pair in &pairs {
            let probs = model.predict(pair)?;
            let (s, e) = pair.span;
            let traj = |t| {
                Trajectory::from_tracklet(t, s, e).ok_or_else(|| Error::contract("pair span outside its tracklets"))
            };
            let (st, ot) = (traj(&pair.subject)?, traj(&pair.object)?);
            for (triplet, score) in triplet_candidates(&probs, cfg) {
                seg.push(RelationInstance {
                    video_id: video.meta.id.clone(),
                    triplet,
                    score,
                    subject_traj: st.clone(),
                    object_traj: ot.clone(),
                });
            }
        }
        per_segment.push(seg);
    }
    let merged = greedy_associate(&per_segment, cfg.association_threshold);
    let mut ranked: Vec<RelationInstance> = rank_order(&merged).into_iter().map(|i| merged[i].clone()).collect();
    ranked.truncate(cfg.max_predictions_per_video);
    Ok(ranked)
}

/// Checks that the model's vocabularies and feature size fit the dataset.
pub fn check_compatible(model: &MoEModel, ds: &Dataset) -> Result<()> {
    let c = &model.config;
    let m = &ds.meta;
    if c.entity_classes != m.entity_classes.len() || c.predicate_classes != m.predicate_classes.len() || c.feature_dim != m.feature_dim {
        return Err(Error::Config(format!(
            "model expects {} entity classes, {} predicate classes, feature dim {}; dataset has {}, {}, {}",
            c.entity_classes,
            c.predicate_classes,
            c.feature_dim,
            m.entity_classes.len(),
            m.predicate_classes.len(),
            m.feature_dim
        )));
    }
    Ok(())
}

pub fn predict_dataset(model: &MoEModel, ds: &Dataset, cfg: &EvalConfig) -> Result<VideoInstances> {
    check_compatible(model, ds)?;
    cfg.validate()?;
    let per_video: Vec<Vec<RelationInstance>> = ds
        .videos
        .par_iter()
        .map(|v| predict_video(model, v, ds.meta.segment, cfg))
        .collect::<Result<_>>()?;
    Ok(ds.videos.iter().map(|v| v.meta.id.clone()).zip(per_video).collect())
}

/// Predictions and their metrics on a dataset.
pub fn evaluate_model(model: &MoEModel, ds: &Dataset, cfg: &EvalConfig) -> Result<(VideoInstances, MetricsReport)> {
    let preds = predict_dataset(model, ds, cfg)?;
    let report = evaluate(&preds, &ds.ground_truth()?, cfg)?;
    Ok((preds, report))
}
