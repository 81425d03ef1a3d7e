//! Per-vessel centerline evaluation: point correspondence, sensitivity,
//! false positive rate, overlap (OV), overlap until first error (OF),
//! clinically relevant overlap (OT) and accuracy inside the vessel (AI).
//!
//! Both polylines are resampled to a common spacing first. A reference point
//! is a true positive (TPR) when some tracked point lies within its radius,
//! otherwise a false negative (FN). A tracked point is a true positive (TPM)
//! when it lies within the radius of some reference point, otherwise a false
//! positive (FP). Sensitivity and FPR use a fixed 1 mm radius; the overlap
//! scores and AI use the annotated radius.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{resample_polyline, WorldPoint};
use crate::spatial::PointGrid;
use crate::tracker::{extract_vessel, nearest_root};
use crate::tree::{CenterlineTree, Vessel};
use crate::{Error, Result};

pub const DEFAULT_SPACING: f64 = 0.5;
pub const FIXED_RADIUS: f64 = 1.0;
pub const CLINICAL_RADIUS: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusRule {
    Annotated,
    Fixed(f64),
}

/// A fraction together with whether its denominator was non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub defined: bool,
}

impl Ratio {
    fn of(num: usize, den: usize) -> Ratio {
        if den == 0 {
            Ratio { value: 0.0, defined: false }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }

    fn zero() -> Ratio {
        Ratio { value: 0.0, defined: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tpr: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tpm: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// `true` marks TPR, `false` marks FN.
    pub reference: Vec<bool>,
    /// `true` marks TPM, `false` marks FP.
    pub tracked: Vec<bool>,
    /// Distance from each reference point to the nearest tracked point;
    /// infinite when nothing was tracked.
    pub distances: Vec<f64>,
}

impl Correspondence {
    pub fn counts(&self) -> Counts {
        let tpr = self.reference.iter().filter(|&&m| m).count();
        let tpm = self.tracked.iter().filter(|&&m| m).count();
        Counts {
            tpr,
            fn_: self.reference.len() - tpr,
            tpm,
            fp: self.tracked.len() - tpm,
        }
    }
}

fn rule_radii(n: usize, radii: Option<&[f64]>, rule: RadiusRule) -> Result<Vec<f64>> {
    match rule {
        RadiusRule::Fixed(r) if r > 0.0 && r.is_finite() => Ok(vec![r; n]),
        RadiusRule::Fixed(r) => Err(Error::InvalidArgument(format!(
            "fixed radius must be positive, got {r}"
        ))),
        RadiusRule::Annotated => match radii {
            Some(r) if r.len() == n => Ok(r.to_vec()),
            Some(r) => Err(Error::InvalidArgument(format!(
                "{} radii for {n} reference points",
                r.len()
            ))),
            None => Err(Error::InvalidArgument(
                "annotated radius rule needs reference radii".into(),
            )),
        },
    }
}

/// Labels every reference and tracked point under `rule`.
pub fn correspond(
    reference: &[WorldPoint],
    radii: Option<&[f64]>,
    tracked: &[WorldPoint],
    rule: RadiusRule,
) -> Result<Correspondence> {
    let reach = rule_radii(reference.len(), radii, rule)?;
    let max_reach = reach.iter().copied().fold(0.0, f64::max);

    let tracked_grid = PointGrid::from_points(1.0, tracked.iter().copied());
    let distances: Vec<f64> = reference
        .iter()
        .map(|&p| tracked_grid.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .collect();
    let ref_matched = distances.iter().zip(&reach).map(|(d, r)| d <= r).collect();

    let ref_grid = PointGrid::from_points(max_reach.max(0.25), reference.iter().copied());
    let tracked_matched = tracked
        .iter()
        .map(|&t| {
            let mut hit = false;
            ref_grid.for_each_within(t, max_reach, |j, d2| {
                if d2.sqrt() <= reach[j] {
                    hit = true;
                }
            });
            hit
        })
        .collect();

    Ok(Correspondence {
        reference: ref_matched,
        tracked: tracked_matched,
        distances,
    })
}

/// TPR / (TPR + FN).
pub fn sensitivity(c: &Correspondence) -> Ratio {
    let k = c.counts();
    Ratio::of(k.tpr, k.tpr + k.fn_)
}

/// FP / (TPM + FP).
pub fn false_positive_rate(c: &Correspondence) -> Ratio {
    let k = c.counts();
    Ratio::of(k.fp, k.tpm + k.fp)
}

/// (TPR + TPM) / (TPR + TPM + FN + FP).
pub fn overlap(c: &Correspondence) -> Ratio {
    let k = c.counts();
    Ratio::of(k.tpr + k.tpm, k.tpr + k.tpm + k.fn_ + k.fp)
}

/// Fraction of the reference, counted from its proximal end, that is matched
/// before the first false negative.
pub fn overlap_until_first_error(c: &Correspondence) -> Ratio {
    let k = c.reference.iter().take_while(|&&m| m).count();
    Ratio::of(k, c.reference.len())
}

/// Mean distance from TPR points to the tracked line; `None` without TPR.
pub fn accuracy_inside(c: &Correspondence) -> Option<f64> {
    let matched: Vec<f64> = c
        .reference
        .iter()
        .zip(&c.distances)
        .filter(|(&m, _)| m)
        .map(|(_, &d)| d)
        .collect();
    if matched.is_empty() {
        None
    } else {
        Some(matched.iter().sum::<f64>() / matched.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClinicalOverlap {
    pub overlap: Ratio,
    /// No reference point exceeded the clinical radius, so the whole vessel
    /// was used.
    pub full_vessel: bool,
}

/// Overlap restricted to the reference up to its last point wider than
/// 0.75 mm, and to the tracked points whose nearest reference point falls in
/// that part.
pub fn clinically_relevant_overlap(
    reference: &[WorldPoint],
    radii: &[f64],
    tracked: &[WorldPoint],
) -> Result<ClinicalOverlap> {
    if radii.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "{} radii for {} reference points",
            radii.len(),
            reference.len()
        )));
    }
    let last = radii.iter().rposition(|&r| r > CLINICAL_RADIUS);
    let end = last.map_or(reference.len(), |i| i + 1);
    let grid = PointGrid::from_points(1.0, reference.iter().copied());
    let kept: Vec<WorldPoint> = tracked
        .iter()
        .copied()
        .filter(|&t| grid.nearest(t).is_some_and(|(j, _)| j < end))
        .collect();
    let c = correspond(
        &reference[..end],
        Some(&radii[..end]),
        &kept,
        RadiusRule::Annotated,
    )?;
    Ok(ClinicalOverlap {
        overlap: overlap(&c),
        full_vessel: last.is_none(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub spacing: f64,
    pub fixed_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            spacing: DEFAULT_SPACING,
            fixed_radius: FIXED_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselMetrics {
    pub detected: bool,
    pub sensitivity: Ratio,
    pub fpr: Ratio,
    pub ov: Ratio,
    pub of: Ratio,
    pub ot: Ratio,
    pub ai: Option<f64>,
    /// Counts under the annotated-radius rule.
    pub counts: Counts,
    pub reference_points: usize,
    pub tracked_points: usize,
    pub ot_full_vessel: bool,
}

impl VesselMetrics {
    fn missed(reference_points: usize) -> Self {
        VesselMetrics {
            detected: false,
            sensitivity: Ratio::zero(),
            fpr: Ratio::zero(),
            ov: Ratio::zero(),
            of: Ratio::zero(),
            ot: Ratio::zero(),
            ai: None,
            counts: Counts {
                fn_: reference_points,
                ..Counts::default()
            },
            reference_points,
            tracked_points: 0,
            ot_full_vessel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sensitivity: f64,
    pub fpr: f64,
    pub ov: f64,
    pub of: f64,
    pub ot: f64,
    pub ai: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub vessels: Vec<VesselMetrics>,
    pub mean: Summary,
    pub detected: usize,
    pub detection_rate: f64,
    /// Wall-clock tracking time in seconds, when known.
    pub time_s: Option<f64>,
}

fn resample(v: &Vessel, spacing: f64) -> Result<Vessel> {
    if v.points.len() < 2 {
        return Ok(v.clone());
    }
    let r = resample_polyline(&v.points, v.radii.as_deref(), spacing)?;
    Ok(Vessel {
        points: r.points,
        radii: r.radii,
    })
}

/// Scores one tracked polyline against one reference vessel with radii.
pub fn evaluate_vessel(reference: &Vessel, tracked: &Vessel, cfg: &EvalConfig) -> Result<VesselMetrics> {
    let reference = resample(reference, cfg.spacing)?;
    let tracked = resample(tracked, cfg.spacing)?;
    let radii = reference
        .radii
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("reference vessel has no radii".into()))?;

    let fixed = correspond(
        &reference.points,
        None,
        &tracked.points,
        RadiusRule::Fixed(cfg.fixed_radius),
    )?;
    let annotated = correspond(&reference.points, Some(radii), &tracked.points, RadiusRule::Annotated)?;
    let ot = clinically_relevant_overlap(&reference.points, radii, &tracked.points)?;
    Ok(VesselMetrics {
        detected: true,
        sensitivity: sensitivity(&fixed),
        fpr: false_positive_rate(&fixed),
        ov: overlap(&annotated),
        of: overlap_until_first_error(&annotated),
        ot: ot.overlap,
        ai: accuracy_inside(&annotated),
        counts: annotated.counts(),
        reference_points: reference.points.len(),
        tracked_points: tracked.points.len(),
        ot_full_vessel: ot.full_vessel,
    })
}

/// One vessel per leaf of `tree`: the path from its root to the leaf.
pub fn reference_vessels(tree: &CenterlineTree) -> Vec<Vessel> {
    tree.leaf_endpoints()
        .into_iter()
        .map(|leaf| Vessel::from_tree_path(tree, &tree.path_to(leaf)))
        .collect()
}

/// Distal end of every reference vessel, in `reference_vessels` order.
pub fn default_selections(tree: &CenterlineTree) -> Vec<WorldPoint> {
    tree.leaf_endpoints().into_iter().map(|i| tree.position(i)).collect()
}

/// Scores `tracked` against every root-to-leaf vessel of `reference`.
///
/// Vessel `i` is located in the tracked tree with `selections[i]`, starting
/// from the tracked root nearest the reference root. Vessels that cannot be
/// located count as missed.
pub fn evaluate_case(
    reference: &CenterlineTree,
    tracked: &CenterlineTree,
    selections: &[WorldPoint],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let vessels = reference_vessels(reference);
    if vessels.len() != selections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} selections for {} reference vessels",
            selections.len(),
            vessels.len()
        )));
    }
    let scored = vessels
        .par_iter()
        .zip(selections.par_iter())
        .map(|(rv, &sel)| {
            let found = nearest_root(tracked, rv.points[0])
                .ok_or_else(|| Error::NotFound("tracked tree is empty".into()))
                .and_then(|root| extract_vessel(tracked, root, sel));
            match found {
                Ok(tv) => evaluate_vessel(rv, &tv, cfg),
                Err(Error::NotFound(_)) => {
                    let n = resample(rv, cfg.spacing)?.points.len();
                    Ok(VesselMetrics::missed(n))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(scored))
}

pub fn summarize(vessels: Vec<VesselMetrics>) -> MetricsReport {
    let n = vessels.len().max(1) as f64;
    let mean = |f: fn(&VesselMetrics) -> f64| vessels.iter().map(f).sum::<f64>() / n;
    let ai: Vec<f64> = vessels.iter().filter_map(|v| v.ai).collect();
    let detected = vessels.iter().filter(|v| v.detected).count();
    MetricsReport {
        mean: Summary {
            sensitivity: mean(|v| v.sensitivity.value),
            fpr: mean(|v| v.fpr.value),
            ov: mean(|v| v.ov.value),
            of: mean(|v| v.of.value),
            ot: mean(|v| v.ot.value),
            ai: (!ai.is_empty()).then(|| ai.iter().sum::<f64>() / ai.len() as f64),
        },
        detected,
        detection_rate: if vessels.is_empty() {
            0.0
        } else {
            detected as f64 / vessels.len() as f64
        },
        time_s: None,
        vessels,
    }
}

impl MetricsReport {
    /// Fixed-column table with one row per vessel and a closing mean row.
    pub fn table(&self) -> String {
        fn ai(v: Option<f64>) -> String {
            v.map_or("-".into(), |a| format!("{a:.3}"))
        }
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}",
            "vessel", "OV", "OF", "OT", "AI(mm)", "S", "FPR", "T(s)"
        );
        for (i, v) in self.vessels.iter().enumerate() {
            let name = if v.detected { i.to_string() } else { format!("{i}*") };
            let _ = writeln!(
                out,
                "{:<8} {:>7.3} {:>7.3} {:>7.3} {:>7} {:>7.3} {:>7.3} {:>8}",
                name,
                v.ov.value,
                v.of.value,
                v.ot.value,
                ai(v.ai),
                v.sensitivity.value,
                v.fpr.value,
                "-"
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            out,
            "{:<8} {:>7.3} {:>7.3} {:>7.3} {:>7} {:>7.3} {:>7.3} {:>8}",
            "mean",
            m.ov,
            m.of,
            m.ot,
            ai(m.ai),
            m.sensitivity,
            m.fpr,
            self.time_s.map_or("-".into(), |t| format!("{t:.2}"))
        );
        let _ = writeln!(
            out,
            "detected {}/{} vessels ({:.1}%)",
            self.detected,
            self.vessels.len(),
            100.0 * self.detection_rate
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn line(n: usize, spacing: f64, offset: Vec3) -> Vec<WorldPoint> {
        (0..n)
            .map(|i| Vec3::new(0.0, 0.0, i as f64 * spacing) + offset)
            .collect()
    }

    /// Quadratic-time reference implementation of `correspond`.
    fn brute(reference: &[WorldPoint], reach: &[f64], tracked: &[WorldPoint]) -> (Vec<bool>, Vec<bool>, Vec<f64>) {
        let dist: Vec<f64> = reference
            .iter()
            .map(|r| tracked.iter().map(|t| r.distance(*t)).fold(f64::INFINITY, f64::min))
            .collect();
        let rm = dist.iter().zip(reach).map(|(d, r)| d <= r).collect();
        let tm = tracked
            .iter()
            .map(|t| reference.iter().zip(reach).any(|(r, &rad)| r.distance(*t) <= rad))
            .collect();
        (rm, tm, dist)
    }

    #[test]
    fn identical_lines_match_everywhere() {
        let r = line(40, 0.5, Vec3::ZERO);
        let c = correspond(&r, None, &r, RadiusRule::Fixed(1.0)).unwrap();
        assert_eq!(c.counts(), Counts { tpr: 40, fn_: 0, tpm: 40, fp: 0 });
        assert_eq!(sensitivity(&c).value, 1.0);
        assert_eq!(false_positive_rate(&c).value, 0.0);
        assert_eq!(overlap(&c).value, 1.0);
        assert_eq!(overlap_until_first_error(&c).value, 1.0);
        assert_eq!(accuracy_inside(&c), Some(0.0));
    }

    #[test]
    fn offset_beyond_radius_matches_nothing() {
        let r = line(40, 0.5, Vec3::ZERO);
        let t = line(40, 0.5, Vec3::new(2.0, 0.0, 0.0));
        let c = correspond(&r, Some(&[1.0; 40]), &t, RadiusRule::Annotated).unwrap();
        assert_eq!(c.counts(), Counts { tpr: 0, fn_: 40, tpm: 0, fp: 40 });
        assert_eq!(overlap(&c).value, 0.0);
        assert_eq!(false_positive_rate(&c).value, 1.0);
        assert_eq!(accuracy_inside(&c), None);
    }

    #[test]
    fn empty_tracked_is_all_false_negative() {
        let r = line(10, 0.5, Vec3::ZERO);
        let c = correspond(&r, None, &[], RadiusRule::Fixed(1.0)).unwrap();
        assert_eq!(c.counts(), Counts { tpr: 0, fn_: 10, tpm: 0, fp: 0 });
        assert_eq!(sensitivity(&c), Ratio { value: 0.0, defined: true });
        assert_eq!(false_positive_rate(&c), Ratio { value: 0.0, defined: false });
    }

    #[test]
    fn half_coverage_against_brute_force() {
        let r = line(41, 0.5, Vec3::ZERO);
        let t = line(21, 0.5, Vec3::ZERO);
        let c = correspond(&r, None, &t, RadiusRule::Fixed(1.0)).unwrap();
        let (rm, tm, _) = brute(&r, &[1.0; 41], &t);
        assert_eq!(c.reference, rm);
        assert_eq!(c.tracked, tm);
        let tpr = rm.iter().filter(|&&m| m).count();
        // Points 0..=20 are covered and 21, 22 are within 1 mm of point 20.
        assert_eq!(tpr, 23);
        assert!((sensitivity(&c).value - 0.5).abs() <= 3.0 / 41.0);
        let k = c.counts();
        assert_eq!(overlap(&c).value, (23 + 21) as f64 / (23 + 21 + 18) as f64);
        assert_eq!(k.fp, 0);
    }

    #[test]
    fn half_overlapping_fpr_matches_hand_count() {
        // Tracked runs from z = 10 to z = 30 along a reference spanning 0..20.
        let r = line(41, 0.5, Vec3::ZERO);
        let t = line(41, 0.5, Vec3::new(0.0, 0.0, 10.0));
        let c = correspond(&r, None, &t, RadiusRule::Fixed(1.0)).unwrap();
        // Tracked points at z <= 21 lie within 1 mm of the reference end.
        let tpm = (0..41).filter(|&i| 10.0 + 0.5 * i as f64 <= 21.0).count();
        assert_eq!(tpm, 23);
        assert_eq!(false_positive_rate(&c).value, 18.0 / 41.0);
    }

    #[test]
    fn first_error_at_midpoint() {
        let r = line(41, 0.5, Vec3::ZERO);
        let mut t = line(41, 0.5, Vec3::ZERO);
        // Tracked points at z in [9, 12] move 3 mm sideways; the last
        // unshifted one sits at z = 8.5, so reference z = 9.5 is still
        // within 1 mm and z = 10.0 (index 20) is the first miss.
        for p in t.iter_mut().filter(|p| (9.0..=12.0).contains(&p.z)) {
            p.x += 3.0;
        }
        let c = correspond(&r, Some(&[1.0; 41]), &t, RadiusRule::Annotated).unwrap();
        let first_fn = c.reference.iter().position(|&m| !m).unwrap();
        assert_eq!(first_fn, 20);
        assert_eq!(overlap_until_first_error(&c).value, 20.0 / 41.0);
        assert!((overlap_until_first_error(&c).value - 0.5).abs() <= 1.0 / 41.0);
        assert!(overlap(&c).value < 1.0);

        let all_bad = line(41, 0.5, Vec3::new(5.0, 0.0, 0.0));
        let c = correspond(&r, Some(&[1.0; 41]), &all_bad, RadiusRule::Annotated).unwrap();
        assert_eq!(overlap_until_first_error(&c).value, 0.0);
    }

    #[test]
    fn parallel_offset_accuracy() {
        let r = line(30, 0.5, Vec3::ZERO);
        let t = line(30, 0.5, Vec3::new(0.3, 0.0, 0.0));
        let c = correspond(&r, Some(&[1.0; 30]), &t, RadiusRule::Annotated).unwrap();
        assert!((accuracy_inside(&c).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn clinical_overlap_ignores_thin_tail() {
        // Radius tapers from 2.0 to 0.4 mm over 40 points.
        let r = line(41, 0.5, Vec3::ZERO);
        let radii: Vec<f64> = (0..41).map(|i| 2.0 - 1.6 * i as f64 / 40.0).collect();
        let cut = radii.iter().rposition(|&x| x > CLINICAL_RADIUS).unwrap();
        let t = r[..=cut].to_vec();
        let ot = clinically_relevant_overlap(&r, &radii, &t).unwrap();
        assert!(!ot.full_vessel);
        assert_eq!(ot.overlap.value, 1.0);
        let c = correspond(&r, Some(&radii), &t, RadiusRule::Annotated).unwrap();
        assert!(overlap(&c).value < 1.0);

        let wide = vec![1.0; 41];
        let ot = clinically_relevant_overlap(&r, &wide, &t).unwrap();
        let c = correspond(&r, Some(&wide), &t, RadiusRule::Annotated).unwrap();
        assert_eq!(ot.overlap, overlap(&c));

        let thin = vec![0.5; 41];
        assert!(clinically_relevant_overlap(&r, &thin, &r).unwrap().full_vessel);
        assert_eq!(clinically_relevant_overlap(&r, &radii, &[]).unwrap().overlap.value, 0.0);
    }

    #[test]
    fn annotated_rule_needs_radii() {
        let r = line(5, 0.5, Vec3::ZERO);
        assert!(correspond(&r, None, &r, RadiusRule::Annotated).is_err());
        assert!(correspond(&r, None, &r, RadiusRule::Fixed(0.0)).is_err());
    }

    fn fork() -> CenterlineTree {
        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        let mut prev = None;
        for i in 0..=20 {
            prev = Some(t.push_point(Vec3::new(0.0, 0.0, i as f64 * 0.5), Some(1.5), s, prev));
        }
        let fork = prev;
        for side in [-1.0, 1.0] {
            let s = t.new_segment();
            let mut prev = fork;
            for i in 1..=20 {
                let q = Vec3::new(side * i as f64 * 0.35, 0.0, 10.0 + i as f64 * 0.35);
                prev = Some(t.push_point(q, Some(1.0), s, prev));
            }
        }
        t
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let t = fork();
        let rep = evaluate_case(&t, &t, &default_selections(&t), &EvalConfig::default()).unwrap();
        assert_eq!(rep.vessels.len(), 2);
        assert_eq!(rep.detection_rate, 1.0);
        for v in &rep.vessels {
            assert_eq!((v.ov.value, v.of.value, v.ot.value), (1.0, 1.0, 1.0));
            assert_eq!(v.sensitivity.value, 1.0);
            assert_eq!(v.fpr.value, 0.0);
            assert!(v.ai.unwrap() < 1e-9);
        }
        let table = rep.table();
        assert!(table.contains("mean"));
        assert!(table.contains("detected 2/2"));
    }

    #[test]
    fn missed_vessel_counts_against_detection() {
        let t = fork();
        let mut sel = default_selections(&t);
        sel[1] = Vec3::new(100.0, 0.0, 0.0);
        let rep = evaluate_case(&t, &t, &sel, &EvalConfig::default()).unwrap();
        assert_eq!(rep.detected, 1);
        assert_eq!(rep.detection_rate, 0.5);
        assert!(!rep.vessels[1].detected);
        assert_eq!(rep.vessels[1].ov.value, 0.0);
        assert_eq!(rep.mean.ov, 0.5);
        assert!(rep.table().contains("1*"));

        assert!(evaluate_case(&t, &t, &sel[..1], &EvalConfig::default()).is_err());
        let rep = evaluate_case(&t, &CenterlineTree::new(), &sel, &EvalConfig::default()).unwrap();
        assert_eq!(rep.detected, 0);
    }

    #[test]
    fn report_serializes() {
        let t = fork();
        let rep = evaluate_case(&t, &t, &default_selections(&t), &EvalConfig::default()).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    fn cloud(max: usize) -> impl Strategy<Value = Vec<WorldPoint>> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64), 1..max)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force(
            r in cloud(120),
            t in cloud(120),
            seed in 0u64..1000,
        ) {
            let reach: Vec<f64> = (0..r.len())
                .map(|i| 0.3 + ((i as u64 * 7919 + seed) % 100) as f64 / 50.0)
                .collect();
            let c = correspond(&r, Some(&reach), &t, RadiusRule::Annotated).unwrap();
            let (rm, tm, dist) = brute(&r, &reach, &t);
            prop_assert_eq!(&c.reference, &rm);
            prop_assert_eq!(&c.tracked, &tm);
            for (a, b) in c.distances.iter().zip(&dist) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let tpr = rm.iter().filter(|&&m| m).count();
            let tpm = tm.iter().filter(|&&m| m).count();
            let ov = (tpr + tpm) as f64 / (r.len() + t.len()) as f64;
            prop_assert!((overlap(&c).value - ov).abs() < 1e-12);
            let mean: Vec<f64> = rm.iter().zip(&dist).filter(|(m, _)| **m).map(|(_, d)| *d).collect();
            match accuracy_inside(&c) {
                Some(a) => prop_assert!((a - mean.iter().sum::<f64>() / mean.len() as f64).abs() < 1e-12),
                None => prop_assert!(mean.is_empty()),
            }
        }

        #[test]
        fn matching_points_never_lower_overlap(
            r in cloud(60),
            t in cloud(60),
            pick in prop::collection::vec(0usize..1000, 1..20),
        ) {
            let reach = vec![1.0; r.len()];
            let before = overlap(&correspond(&r, Some(&reach), &t, RadiusRule::Annotated).unwrap()).value;
            let mut more = t.clone();
            more.extend(pick.iter().map(|&i| r[i % r.len()] + Vec3::new(0.1, 0.0, 0.0)));
            let after = overlap(&correspond(&r, Some(&reach), &more, RadiusRule::Annotated).unwrap()).value;
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn fractions_stay_in_unit_interval(r in cloud(60), t in cloud(60)) {
            let c = correspond(&r, None, &t, RadiusRule::Fixed(1.0)).unwrap();
            for x in [sensitivity(&c), false_positive_rate(&c), overlap(&c), overlap_until_first_error(&c)] {
                prop_assert!((0.0..=1.0).contains(&x.value));
            }
            if overlap_until_first_error(&c).value == 1.0 {
                prop_assert_eq!(c.counts().fn_, 0);
            }
        }
    }
}
