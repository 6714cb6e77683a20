//! Cross-service face unification.
//!
//! Each service returns its own boxes for an image. Boxes from different
//! services that overlap are joined through a minimum spanning forest over
//! `1 - IoU` edge weights; forest edges at or below the IoU threshold are cut
//! and the remaining components become faces.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{Comparison, TransportError};
use crate::types::{FaceId, ImageId, ServiceId};
use crate::union_find::UnionFind;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("iou threshold must be in (0, 1), got {0}")]
    Threshold(f64),
    #[error("boxes from several images passed to a per-image grouping ({0} and {1})")]
    MixedImages(ImageId, ImageId),
    #[error("comparator transport failure on ({0}, {1}): {2}")]
    Transport(ImageId, ImageId, #[source] TransportError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub image_id: ImageId,
    #[serde(rename = "service_id")]
    pub service: ServiceId,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn validate(&self) -> Result<(), DetectionError> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(DetectionError::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Area of intersection over area of union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceGroup {
    pub face_id: FaceId,
    pub image_id: ImageId,
    pub members: BTreeMap<ServiceId, BoundingBox>,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    a: usize,
    b: usize,
    iou: f64,
}

/// Groups one image's boxes into faces. Returned groups carry local face ids
/// `0..n`, ordered by their first box in canonical `(service, x, y, w, h)` order.
pub fn group_detections(
    boxes: &[BoundingBox],
    iou_threshold: f64,
) -> Result<Vec<FaceGroup>, DetectionError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(DetectionError::Threshold(iou_threshold));
    }
    let Some(first) = boxes.first() else {
        return Ok(Vec::new());
    };
    for b in boxes {
        b.validate()?;
        if b.image_id != first.image_id {
            return Err(DetectionError::MixedImages(first.image_id, b.image_id));
        }
    }

    let mut sorted: Vec<&BoundingBox> = boxes.iter().collect();
    sorted.sort_by(|p, q| {
        p.service
            .cmp(&q.service)
            .then(p.x.total_cmp(&q.x))
            .then(p.y.total_cmp(&q.y))
            .then(p.w.total_cmp(&q.w))
            .then(p.h.total_cmp(&q.h))
    });
    let n = sorted.len();

    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if sorted[a].service != sorted[b].service {
                edges.push(Edge {
                    a,
                    b,
                    iou: iou(sorted[a], sorted[b]),
                });
            }
        }
    }
    // Ascending weight (1 - IoU); endpoints index the canonical order.
    edges.sort_by(|e, f| {
        (1.0 - e.iou)
            .total_cmp(&(1.0 - f.iou))
            .then(e.a.cmp(&f.a))
            .then(e.b.cmp(&f.b))
    });

    let mut uf = UnionFind::new(n);
    let mut forest: Vec<Edge> = Vec::new();
    for e in edges {
        if uf.union(e.a, e.b) {
            forest.push(e);
        }
    }
    forest.retain(|e| e.iou > iou_threshold);

    loop {
        let components = components_of(n, &forest);
        let conflict = components.iter().find_map(|c| same_service_pair(c, &sorted));
        let Some((u, v)) = conflict else {
            return Ok(components
                .into_iter()
                .enumerate()
                .map(|(k, members)| FaceGroup {
                    face_id: FaceId(k as u32),
                    image_id: first.image_id,
                    members: members
                        .into_iter()
                        .map(|i| (sorted[i].service.clone(), sorted[i].clone()))
                        .collect(),
                })
                .collect());
        };
        let path = tree_path(n, &forest, u, v).expect("conflicting boxes share a component");
        let weakest = path
            .into_iter()
            .min_by(|&i, &j| forest[i].iou.total_cmp(&forest[j].iou).then(j.cmp(&i)))
            .expect("distinct boxes are joined by at least one edge");
        forest.remove(weakest);
    }
}

fn components_of(n: usize, forest: &[Edge]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for e in forest {
        uf.union(e.a, e.b);
    }
    uf.components()
}

fn same_service_pair(component: &[usize], sorted: &[&BoundingBox]) -> Option<(usize, usize)> {
    let mut seen: BTreeMap<&ServiceId, usize> = BTreeMap::new();
    for &i in component {
        if let Some(&j) = seen.get(&sorted[i].service) {
            return Some((j, i));
        }
        seen.insert(&sorted[i].service, i);
    }
    None
}

/// Indices into `forest` of the edges on the tree path from `u` to `v`.
fn tree_path(n: usize, forest: &[Edge], u: usize, v: usize) -> Option<Vec<usize>> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, e) in forest.iter().enumerate() {
        adj[e.a].push((e.b, k));
        adj[e.b].push((e.a, k));
    }
    let mut via: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut queue = VecDeque::from([u]);
    let mut visited = vec![false; n];
    visited[u] = true;
    while let Some(x) = queue.pop_front() {
        if x == v {
            break;
        }
        for &(y, k) in &adj[x] {
            if !visited[y] {
                visited[y] = true;
                via[y] = Some((x, k));
                queue.push_back(y);
            }
        }
    }
    if !visited[v] {
        return None;
    }
    let mut path = Vec::new();
    let mut x = v;
    while let Some((prev, k)) = via[x] {
        path.push(k);
        x = prev;
    }
    Some(path)
}

/// The image's single face, if every listed service found exactly one face
/// and those boxes form one group.
pub fn filter_eligible(
    image_boxes: &[BoundingBox],
    groups: &[FaceGroup],
    services: &[ServiceId],
) -> Option<FaceGroup> {
    let exactly_one = services
        .iter()
        .all(|s| image_boxes.iter().filter(|b| &b.service == s).count() == 1);
    if !exactly_one || groups.len() != 1 {
        return None;
    }
    let group = &groups[0];
    services
        .iter()
        .all(|s| group.members.contains_key(s))
        .then(|| group.clone())
}

/// Groups every image and keeps only eligible single-face images. Face ids are
/// assigned sequentially in image order, starting at zero.
pub fn unify_single_face_images(
    boxes: &[BoundingBox],
    services: &[ServiceId],
    iou_threshold: f64,
) -> Result<Vec<FaceGroup>, DetectionError> {
    let mut by_image: BTreeMap<ImageId, Vec<BoundingBox>> = BTreeMap::new();
    for b in boxes {
        by_image.entry(b.image_id).or_default().push(b.clone());
    }
    let mut out = Vec::new();
    for image_boxes in by_image.values() {
        let groups = group_detections(image_boxes, iou_threshold)?;
        if let Some(mut g) = filter_eligible(image_boxes, &groups, services) {
            g.face_id = FaceId(out.len() as u32);
            out.push(g);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SingleFaceDiscovery {
    pub valid: BTreeSet<ImageId>,
    pub invalid: BTreeSet<ImageId>,
    /// Images that never took part in a successful comparison nor were proven
    /// invalid.
    pub unresolved: BTreeSet<ImageId>,
    pub scores: Vec<(ImageId, ImageId, f64)>,
    pub calls: usize,
}

/// Finds single-face images using only a pairwise comparator.
///
/// Pairs touching a known-invalid image are skipped. A "multiple faces" answer
/// only convicts an image whose partner is already known to be valid.
pub fn discover_single_face_images<F>(
    images: &[ImageId],
    pairs: impl IntoIterator<Item = (ImageId, ImageId)>,
    mut compare: F,
) -> Result<SingleFaceDiscovery, DetectionError>
where
    F: FnMut(ImageId, ImageId) -> Result<Comparison, TransportError>,
{
    let mut out = SingleFaceDiscovery::default();
    for (i1, i2) in pairs {
        if out.invalid.contains(&i1) || out.invalid.contains(&i2) {
            continue;
        }
        out.calls += 1;
        match compare(i1, i2).map_err(|e| DetectionError::Transport(i1, i2, e))? {
            Comparison::Invalid => {
                if out.valid.contains(&i1) {
                    out.invalid.insert(i2);
                }
                if out.valid.contains(&i2) {
                    out.invalid.insert(i1);
                }
            }
            Comparison::Score(c) => {
                out.scores.push((i1, i2, c));
                out.valid.insert(i1);
                out.valid.insert(i2);
            }
        }
    }
    out.unresolved = images
        .iter()
        .filter(|i| !out.valid.contains(i) && !out.invalid.contains(i))
        .copied()
        .collect();
    Ok(out)
}

/// All unordered pairs of `images` in ascending `(i, j)` order.
pub fn ascending_pairs(images: &[ImageId]) -> Vec<(ImageId, ImageId)> {
    let mut ids = images.to_vec();
    ids.sort();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Row of the group dump CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub face_id: FaceId,
    pub image_id: ImageId,
    pub service_id: ServiceId,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn group_rows(groups: &[FaceGroup]) -> Vec<GroupRow> {
    groups
        .iter()
        .flat_map(|g| {
            g.members.values().map(|b| GroupRow {
                face_id: g.face_id,
                image_id: g.image_id,
                service_id: b.service.clone(),
                x: b.x,
                y: b.y,
                w: b.w,
                h: b.h,
            })
        })
        .collect()
}

pub fn groups_from_rows(rows: &[GroupRow]) -> Vec<FaceGroup> {
    let mut groups: BTreeMap<FaceId, FaceGroup> = BTreeMap::new();
    for r in rows {
        let g = groups.entry(r.face_id).or_insert_with(|| FaceGroup {
            face_id: r.face_id,
            image_id: r.image_id,
            members: BTreeMap::new(),
        });
        g.members.insert(
            r.service_id.clone(),
            BoundingBox {
                image_id: r.image_id,
                service: r.service_id.clone(),
                x: r.x,
                y: r.y,
                w: r.w,
                h: r.h,
            },
        );
    }
    groups.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(service: &str, x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox {
            image_id: ImageId(1),
            service: ServiceId::new(service),
            x,
            y,
            w,
            h,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx("a", 0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx("b", 5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = bx("b", 1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        // Touching edges do not intersect.
        assert_eq!(iou(&a, &bx("b", 2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn five_services_one_face() {
        let boxes: Vec<_> = ["a", "b", "c", "d", "e"]
            .iter()
            .enumerate()
            .map(|(i, s)| bx(s, 10.0 + i as f64 * 0.1, 10.0, 50.0, 50.0))
            .collect();
        let groups = group_detections(&boxes, 0.2).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 5);
    }

    #[test]
    fn two_faces_far_apart() {
        let mut boxes = Vec::new();
        for s in ["a", "b", "c"] {
            boxes.push(bx(s, 0.0, 0.0, 10.0, 10.0));
            boxes.push(bx(s, 100.0, 100.0, 10.0, 10.0));
        }
        let groups = group_detections(&boxes, 0.2).unwrap();
        assert_eq!(groups.len(), 2);
        assert!(groups.iter().all(|g| g.members.len() == 3));
    }

    #[test]
    fn same_service_boxes_never_join() {
        let boxes = vec![bx("a", 0.0, 0.0, 10.0, 10.0), bx("a", 0.2, 0.0, 10.0, 10.0)];
        let groups = group_detections(&boxes, 0.2).unwrap();
        assert_eq!(groups.len(), 2);
    }

    #[test]
    fn chained_same_service_conflict_is_split() {
        // a1 - b - a2 chain: b overlaps both a boxes; the weaker link is cut.
        let boxes = vec![
            bx("a", 0.0, 0.0, 10.0, 10.0),
            bx("b", 3.0, 0.0, 10.0, 10.0),
            bx("a", 7.0, 0.0, 10.0, 10.0),
        ];
        let groups = group_detections(&boxes, 0.2).unwrap();
        assert_eq!(groups.len(), 2);
        let joined = groups.iter().find(|g| g.members.len() == 2).unwrap();
        assert_eq!(joined.members[&ServiceId::new("a")].x, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 1/7 with threshold 1/7 is cut.
        let boxes = vec![bx("a", 0.0, 0.0, 2.0, 2.0), bx("b", 1.0, 1.0, 2.0, 2.0)];
        assert_eq!(group_detections(&boxes, 1.0 / 7.0).unwrap().len(), 2);
        assert_eq!(group_detections(&boxes, 0.14).unwrap().len(), 1);
    }

    #[test]
    fn invalid_input_is_rejected() {
        assert!(group_detections(&[bx("a", 0.0, 0.0, 0.0, 1.0)], 0.2).is_err());
        assert!(group_detections(&[bx("a", 0.0, 0.0, 1.0, 1.0)], 1.0).is_err());
        let mut other = bx("b", 0.0, 0.0, 1.0, 1.0);
        other.image_id = ImageId(2);
        assert!(matches!(
            group_detections(&[bx("a", 0.0, 0.0, 1.0, 1.0), other], 0.2),
            Err(DetectionError::MixedImages(..))
        ));
    }

    #[test]
    fn eligibility() {
        let services: Vec<ServiceId> = ["a", "b"].iter().map(|s| ServiceId::new(*s)).collect();
        let single = vec![bx("a", 0.0, 0.0, 10.0, 10.0), bx("b", 1.0, 0.0, 10.0, 10.0)];
        let g = group_detections(&single, 0.2).unwrap();
        assert!(filter_eligible(&single, &g, &services).is_some());

        let mut double = single.clone();
        double.push(bx("a", 50.0, 50.0, 10.0, 10.0));
        let g = group_detections(&double, 0.2).unwrap();
        assert!(filter_eligible(&double, &g, &services).is_none());

        let missed = vec![bx("a", 0.0, 0.0, 10.0, 10.0)];
        let g = group_detections(&missed, 0.2).unwrap();
        assert!(filter_eligible(&missed, &g, &services).is_none());

        // One box per service but they do not overlap: two groups.
        let apart = vec![bx("a", 0.0, 0.0, 10.0, 10.0), bx("b", 50.0, 0.0, 10.0, 10.0)];
        let g = group_detections(&apart, 0.2).unwrap();
        assert!(filter_eligible(&apart, &g, &services).is_none());
    }

    #[test]
    fn discovery_hand_trace() {
        let (a, b, c) = (ImageId(0), ImageId(1), ImageId(2));
        let multi = BTreeSet::from([b]);
        let out = discover_single_face_images(&[a, b, c], ascending_pairs(&[a, b, c]), |i, j| {
            Ok(if multi.contains(&i) || multi.contains(&j) {
                Comparison::Invalid
            } else {
                Comparison::Score(0.5)
            })
        })
        .unwrap();
        assert_eq!(out.valid, BTreeSet::from([a, c]));
        assert_eq!(out.invalid, BTreeSet::from([b]));
        assert_eq!(out.scores, vec![(a, c, 0.5)]);
    }

    #[test]
    fn discovery_first_pair_convicts_nobody() {
        let (a, b) = (ImageId(0), ImageId(1));
        let out = discover_single_face_images(&[a, b], [(a, b)], |_, _| {
            Ok(Comparison::Invalid)
        })
        .unwrap();
        assert!(out.valid.is_empty() && out.invalid.is_empty());
        assert_eq!(out.unresolved, BTreeSet::from([a, b]));
    }

    #[test]
    fn discovery_all_single_face() {
        let ids: Vec<ImageId> = (0..6).map(ImageId).collect();
        let out = discover_single_face_images(&ids, ascending_pairs(&ids), |_, _| {
            Ok(Comparison::Score(1.0))
        })
        .unwrap();
        assert_eq!(out.valid.len(), 6);
        assert_eq!(out.scores.len(), 15);
    }

    #[test]
    fn discovery_propagates_transport_errors() {
        let ids = [ImageId(0), ImageId(1)];
        let err = discover_single_face_images(&ids, ascending_pairs(&ids), |_, _| {
            Err(TransportError::new("timeout"))
        })
        .unwrap_err();
        assert!(matches!(err, DetectionError::Transport(..)));
    }

    #[test]
    fn group_rows_round_trip() {
        let boxes = vec![bx("a", 0.0, 0.0, 10.0, 10.0), bx("b", 1.0, 0.0, 10.0, 10.0)];
        let groups = group_detections(&boxes, 0.2).unwrap();
        assert_eq!(groups_from_rows(&group_rows(&groups)), groups);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
            prop::collection::vec(
                (0usize..4, 0.0f64..40.0, 0.0f64..40.0, 1.0f64..20.0, 1.0f64..20.0),
                0..14,
            )
            .prop_map(|v| {
                v.into_iter()
                    .map(|(s, x, y, w, h)| bx(["a", "b", "c", "d"][s], x, y, w, h))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(bs in boxes()) {
                for a in &bs {
                    prop_assert!((iou(a, a) - 1.0).abs() < 1e-12);
                    for b in &bs {
                        let v = iou(a, b);
                        prop_assert!((0.0..=1.0).contains(&v));
                        prop_assert_eq!(v, iou(b, a));
                    }
                }
            }

            #[test]
            fn groups_are_service_disjoint_and_order_invariant(bs in boxes(), thr in 0.05f64..0.6) {
                let groups = group_detections(&bs, thr).unwrap();
                let total: usize = groups.iter().map(|g| g.members.len()).sum();
                // Members are keyed by service, so a lost box would reveal a
                // same-service collision.
                prop_assert_eq!(total, bs.len());
                let mut rev = bs.clone();
                rev.reverse();
                prop_assert_eq!(group_detections(&rev, thr).unwrap(), groups);
            }
        }
    }
}
