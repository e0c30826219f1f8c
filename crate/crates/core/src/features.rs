//! Tracklets, sliding-window segments, subject/object pairs and the
//! relative positional features fed to the experts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{affine, affine_backward, init_weight, softplus, softplus_grad, Matrix, ParamId, ParamStore};

/// Boxes whose object-side center coordinate is this close to zero are rejected.
pub const EPS_POS: f64 = 1e-6;
/// Frame-difference normalizer of the temporal component.
pub const TIME_NORM: f64 = 30.0;
/// Length of one relative positional feature.
pub const RELPOS_DIM: usize = 6;

/// Center-format box at frame `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub t: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(t: u32, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { t, x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w / 2.0).min(other.x + other.w / 2.0) - (self.x - self.w / 2.0).max(other.x - other.w / 2.0);
        let iy = (self.y + self.h / 2.0).min(other.y + other.h / 2.0) - (self.y - self.h / 2.0).max(other.y - other.h / 2.0);
        ix.max(0.0) * iy.max(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::Data(format!("invalid box at frame {}: {self:?}", self.t)));
        }
        if self.x.abs() <= EPS_POS || self.y.abs() <= EPS_POS {
            return Err(Error::DegenerateGeometry(format!(
                "box center ({}, {}) at frame {} is within {EPS_POS} of an axis",
                self.x, self.y, self.t
            )));
        }
        Ok(())
    }
}

/// One entity's time-contiguous boxes plus a pooled appearance descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u32,
    pub class_label: Option<usize>,
    pub boxes: Vec<BBox>,
    pub feature: Vec<f64>,
}

impl Tracklet {
    pub fn new(id: u32, class_label: Option<usize>, boxes: Vec<BBox>, feature: Vec<f64>) -> Result<Self> {
        let t = Self {
            id,
            class_label,
            boxes,
            feature,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::Data(format!("tracklet {} has no boxes", self.id)));
        }
        for pair in self.boxes.windows(2) {
            if pair[1].t != pair[0].t + 1 {
                return Err(Error::Data(format!(
                    "tracklet {} is not frame-contiguous ({} -> {})",
                    self.id, pair[0].t, pair[1].t
                )));
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("tracklet {} feature is not finite", self.id)));
        }
        Ok(())
    }

    /// First frame.
    pub fn start(&self) -> u32 {
        self.boxes[0].t
    }

    /// One past the last frame.
    pub fn end(&self) -> u32 {
        self.boxes[self.boxes.len() - 1].t + 1
    }

    pub fn box_at(&self, t: u32) -> Option<&BBox> {
        if t < self.start() || t >= self.end() {
            return None;
        }
        Some(&self.boxes[(t - self.start()) as usize])
    }

    /// Frames `[start, end)` where both tracklets exist.
    pub fn overlap(&self, other: &Tracklet) -> Option<(u32, u32)> {
        let s = self.start().max(other.start());
        let e = self.end().min(other.end());
        (s < e).then_some((s, e))
    }

    /// Restriction to frames `[start, end)`, if any remain.
    pub fn clip(&self, start: u32, end: u32) -> Option<Tracklet> {
        let s = self.start().max(start);
        let e = self.end().min(end);
        if s >= e {
            return None;
        }
        let off = (s - self.start()) as usize;
        Some(Tracklet {
            id: self.id,
            class_label: self.class_label,
            boxes: self.boxes[off..off + (e - s) as usize].to_vec(),
            feature: self.feature.clone(),
        })
    }
}

/// Subject-relative-to-object geometry of two boxes.
pub fn relative_positional_feature(subject: &BBox, object: &BBox, time_norm: f64) -> Result<[f64; RELPOS_DIM]> {
    if object.x.abs() <= EPS_POS || object.y.abs() <= EPS_POS {
        return Err(Error::DegenerateGeometry(format!(
            "object center ({}, {}) too close to zero",
            object.x, object.y
        )));
    }
    for b in [subject, object] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::Data(format!("non-positive box size {b:?}")));
        }
    }
    Ok([
        (subject.x - object.x) / object.x,
        (subject.y - object.y) / object.y,
        (subject.w / object.w).ln(),
        (subject.h / object.h).ln(),
        (subject.w * subject.h / (object.w * object.h)).ln(),
        (subject.t as f64 - object.t as f64) / time_norm,
    ])
}

/// Ordered subject/object pair with its assembled features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletPair {
    pub subject: Tracklet,
    pub object: Tracklet,
    pub f_e1: Vec<f64>,
    pub f_e3: Vec<f64>,
    pub f_r_b: [f64; RELPOS_DIM],
    pub f_r_e: [f64; RELPOS_DIM],
    /// Co-visible frames `[start, end)`.
    pub span: (u32, u32),
}

impl TrackletPair {
    /// Predicate visual feature: subject and object features concatenated.
    pub fn f_e2(&self) -> Vec<f64> {
        [self.f_e1.as_slice(), self.f_e3.as_slice()].concat()
    }

    /// `[f_e1, f_e3, f_r_b, f_r_e]`, the vector seen by the gate and the fusion network.
    pub fn input(&self) -> Vec<f64> {
        [self.f_e1.as_slice(), &self.f_e3, &self.f_r_b, &self.f_r_e].concat()
    }

    pub fn input_dim(feature_dim: usize) -> usize {
        2 * feature_dim + 2 * RELPOS_DIM
    }
}

/// Assembles a pair. Begin/end positional features use the first and last
/// co-visible boxes for geometry and each tracklet's own first/last frame
/// for the temporal offset.
pub fn build_pair(subject: &Tracklet, object: &Tracklet) -> Result<TrackletPair> {
    if subject.id == object.id {
        return Err(Error::Pairing(format!("tracklet {} paired with itself", subject.id)));
    }
    if subject.feature.len() != object.feature.len() {
        return Err(Error::Pairing("subject and object feature dims differ".into()));
    }
    let (s, e) = subject
        .overlap(object)
        .ok_or_else(|| Error::Pairing(format!("tracklets {} and {} never co-occur", subject.id, object.id)))?;
    let at = |t: &Tracklet, frame: u32, own: u32| {
        let mut b = *t.box_at(frame).expect("frame inside overlap");
        b.t = own;
        b
    };
    let f_r_b = relative_positional_feature(
        &at(subject, s, subject.start()),
        &at(object, s, object.start()),
        TIME_NORM,
    )?;
    let f_r_e = relative_positional_feature(
        &at(subject, e - 1, subject.end() - 1),
        &at(object, e - 1, object.end() - 1),
        TIME_NORM,
    )?;
    Ok(TrackletPair {
        subject: subject.clone(),
        object: object.clone(),
        f_e1: subject.feature.clone(),
        f_e3: object.feature.clone(),
        f_r_b,
        f_r_e,
        span: (s, e),
    })
}

/// One-hidden-layer fusion of visual and positional features (softplus units).
#[derive(Debug, Clone, Copy)]
pub struct FusionNet {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Pre-activations and outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionCache {
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

impl FusionNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}/fusion/weight"), init_weight(rng, input_dim, width))?;
        let bias = store.add(format!("{prefix}/fusion/bias"), Matrix::zeros(1, width))?;
        Ok(Self { weight, bias })
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64]) -> Result<FusionCache> {
        let w = store.value(self.weight);
        if input.len() != w.rows() {
            return Err(Error::contract(format!(
                "fusion input has {} values, expected {}",
                input.len(),
                w.rows()
            )));
        }
        let pre = affine(input, w, store.value(self.bias).as_slice());
        let out = pre.iter().map(|&z| softplus(z, 1.0)).collect();
        Ok(FusionCache { pre, out })
    }

    /// Fused feature of a pair.
    pub fn fuse(&self, store: &ParamStore, pair: &TrackletPair) -> Result<Vec<f64>> {
        Ok(self.forward(store, &pair.input())?.out)
    }

    pub fn backward(&self, store: &mut ParamStore, input: &[f64], cache: &FusionCache, grad_out: &[f64]) {
        let dz: Vec<f64> = grad_out.iter().zip(&cache.pre).map(|(g, &z)| g * softplus_grad(z, 1.0)).collect();
        let mut gb = std::mem::replace(store.grad_mut(self.bias), Matrix::zeros(0, 0));
        let (w, gw) = store.value_and_grad_mut(self.weight);
        affine_backward(input, w, &dz, gw, Some(&mut gb), None);
        *store.grad_mut(self.bias) = gb;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub length: u32,
    pub stride: u32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { length: 30, stride: 15 }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.stride == 0 || self.stride > self.length {
            return Err(Error::Config(format!(
                "segment stride must satisfy 1 <= stride <= length, got length={} stride={}",
                self.length, self.stride
            )));
        }
        Ok(())
    }

    /// Windows `[start, end)` covering `[0, num_frames)`; the last window ends at `num_frames`.
    pub fn windows(&self, num_frames: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        if num_frames == 0 {
            return out;
        }
        let mut start = 0;
        loop {
            let end = (start + self.length).min(num_frames);
            out.push((start, end));
            if end >= num_frames {
                return out;
            }
            start += self.stride;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub start: u32,
    pub end: u32,
    /// Tracklets clipped to the window, in input order.
    pub tracklets: Vec<Tracklet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentIndex {
    pub config: SegmentConfig,
    pub segments: Vec<Segment>,
}

impl SegmentIndex {
    pub fn build(tracklets: &[Tracklet], num_frames: u32, config: SegmentConfig) -> Result<Self> {
        config.validate()?;
        let segments = config
            .windows(num_frames)
            .into_iter()
            .enumerate()
            .map(|(index, (start, end))| Segment {
                index,
                start,
                end,
                tracklets: tracklets.iter().filter_map(|t| t.clip(start, end)).collect(),
            })
            .collect();
        Ok(Self { config, segments })
    }
}

/// All ordered co-occurring pairs `(s, o)`, `s ≠ o`, sorted by `(s.id, o.id)`.
pub fn enumerate_pairs(segment: &Segment) -> Result<Vec<TrackletPair>> {
    let mut order: Vec<&Tracklet> = segment.tracklets.iter().collect();
    order.sort_by_key(|t| t.id);
    let mut out = Vec::new();
    for s in &order {
        for o in &order {
            if s.id != o.id && s.overlap(o).is_some() {
                out.push(build_pair(s, o)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn static_tracklet(id: u32, start: u32, end: u32, x: f64) -> Tracklet {
        let boxes = (start..end).map(|t| BBox::new(t, x, 50.0 + t as f64, 10.0, 20.0)).collect();
        Tracklet::new(id, Some(0), boxes, vec![id as f64, 1.0]).unwrap()
    }

    #[test]
    fn relpos_identical_boxes_is_zero() {
        let b = BBox::new(4, 3.0, 7.0, 2.0, 5.0);
        assert_eq!(relative_positional_feature(&b, &b, TIME_NORM).unwrap(), [0.0; 6]);
    }

    #[test]
    fn relpos_hand_values() {
        let s = BBox::new(60, 2.0, 2.0, 4.0, 2.0);
        let o = BBox::new(30, 1.0, 1.0, 2.0, 2.0);
        let ln2 = std::f64::consts::LN_2;
        let f = relative_positional_feature(&s, &o, TIME_NORM).unwrap();
        let want = [1.0, 1.0, ln2, 0.0, ln2, 1.0];
        for (a, b) in f.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = relative_positional_feature(&o, &s, TIME_NORM).unwrap();
        let want = [-0.5, -0.5, -ln2, 0.0, -ln2, -1.0];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn relpos_rejects_degenerate_object() {
        let s = BBox::new(0, 2.0, 2.0, 1.0, 1.0);
        let o = BBox::new(0, 0.0, 2.0, 1.0, 1.0);
        assert!(matches!(
            relative_positional_feature(&s, &o, TIME_NORM),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn tracklet_validation() {
        let gap = vec![BBox::new(0, 5.0, 5.0, 1.0, 1.0), BBox::new(2, 5.0, 5.0, 1.0, 1.0)];
        assert!(Tracklet::new(0, None, gap, vec![]).is_err());
        assert!(Tracklet::new(0, None, vec![], vec![]).is_err());
        let bad = vec![BBox::new(0, 5.0, 5.0, 0.0, 1.0)];
        assert!(Tracklet::new(0, None, bad, vec![]).is_err());
        let nan = vec![BBox::new(0, 5.0, 5.0, 1.0, 1.0)];
        assert!(Tracklet::new(0, None, nan, vec![f64::NAN]).is_err());
    }

    #[test]
    fn pair_concatenates_features() {
        let mut a = static_tracklet(1, 0, 5, 10.0);
        let mut b = static_tracklet(2, 2, 8, 20.0);
        a.feature = vec![1.0, 2.0];
        b.feature = vec![3.0, 4.0];
        let p = build_pair(&a, &b).unwrap();
        assert_eq!(p.f_e2(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.span, (2, 5));
        // temporal components use each tracklet's own begin/end frame
        assert!((p.f_r_b[5] - (0.0 - 2.0) / 30.0).abs() < 1e-15);
        assert!((p.f_r_e[5] - (4.0 - 7.0) / 30.0).abs() < 1e-15);
        assert_eq!(p.input().len(), TrackletPair::input_dim(2));
    }

    #[test]
    fn pair_preconditions() {
        let a = static_tracklet(1, 0, 5, 10.0);
        assert!(matches!(build_pair(&a, &a), Err(Error::Pairing(_))));
        let b = static_tracklet(2, 5, 9, 10.0);
        assert!(matches!(build_pair(&a, &b), Err(Error::Pairing(_))));
    }

    #[test]
    fn fused_feature_shape_and_finiteness() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let mut store = ParamStore::new();
        let net = FusionNet::new(&mut store, "e", TrackletPair::input_dim(d), 64, &mut rng).unwrap();
        for i in 0..100 {
            let mk = |id: u32, rng: &mut rand_chacha::ChaCha8Rng| {
                let s = rng.random_range(0..10u32);
                let len = rng.random_range(12..20u32);
                let boxes = (s..s + len)
                    .map(|t| {
                        BBox::new(
                            t,
                            rng.random_range(1.0..600.0),
                            rng.random_range(1.0..400.0),
                            rng.random_range(5.0..80.0),
                            rng.random_range(5.0..80.0),
                        )
                    })
                    .collect();
                Tracklet::new(id, None, boxes, (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
            };
            let a = mk(2 * i, &mut rng);
            let b = mk(2 * i + 1, &mut rng);
            let pair = build_pair(&a, &b).unwrap();
            let fused = net.fuse(&store, &pair).unwrap();
            assert_eq!(fused.len(), 64);
            assert!(fused.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn windows_cover_every_frame_at_most_twice() {
        let cfg = SegmentConfig::default();
        for n in [1u32, 29, 30, 31, 45, 60, 61, 97, 300] {
            let w = cfg.windows(n);
            for f in 0..n {
                let c = w.iter().filter(|(s, e)| *s <= f && f < *e).count();
                assert!((1..=2).contains(&c), "frame {f} of {n} covered {c} times");
            }
        }
        assert_eq!(cfg.windows(60), vec![(0, 30), (15, 45), (30, 60)]);
        assert!(SegmentConfig { length: 10, stride: 11 }.validate().is_err());
    }

    #[test]
    fn pair_counts() {
        let seg = |ts: Vec<Tracklet>| Segment {
            index: 0,
            start: 0,
            end: 30,
            tracklets: ts,
        };
        assert!(enumerate_pairs(&seg(vec![static_tracklet(0, 0, 30, 5.0)])).unwrap().is_empty());
        let three = seg((0..3).map(|i| static_tracklet(i, 0, 30, 5.0 + i as f64)).collect());
        let pairs = enumerate_pairs(&three).unwrap();
        assert_eq!(pairs.len(), 6);
        let ids: Vec<_> = pairs.iter().map(|p| (p.subject.id, p.object.id)).collect();
        assert_eq!(ids, vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }

    proptest::proptest! {
        #[test]
        fn enumeration_matches_double_loop(seed in proptest::prelude::any::<u64>(), n in 0usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ts: Vec<Tracklet> = (0..n)
                .map(|i| {
                    let s = rng.random_range(0..25u32);
                    let e = rng.random_range(s + 1..=30);
                    static_tracklet(i as u32 * 3 + 1, s, e, 10.0)
                })
                .collect();
            let seg = Segment { index: 0, start: 0, end: 30, tracklets: ts.clone() };
            let pairs = enumerate_pairs(&seg).unwrap();
            let mut brute = 0;
            for a in &ts {
                for b in &ts {
                    if a.id != b.id && a.start().max(b.start()) < a.end().min(b.end()) {
                        brute += 1;
                    }
                }
            }
            proptest::prop_assert_eq!(pairs.len(), brute);
            for p in &pairs {
                proptest::prop_assert!(pairs.iter().any(|q| q.subject.id == p.object.id && q.object.id == p.subject.id));
            }
        }
    }
}
