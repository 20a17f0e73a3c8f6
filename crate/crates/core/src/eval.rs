//! Click decoding and Element Accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Point};
use crate::head::AttentionMap;
use crate::scalar::Scalar;
use crate::synth::SizeClass;

pub const GAMMA_PRO: f64 = 0.95;
pub const GAMMA_V2: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Centre of the most attended patch.
    Argmax,
    /// Attention-weighted centroid of patch centres with `a_i ≥ γ · max a`.
    ThresholdCentroid,
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Argmax => "argmax",
            DecodeMode::ThresholdCentroid => "threshold-centroid",
        })
    }
}

pub fn decode_click<T: Scalar>(attn: &AttentionMap<T>, mode: DecodeMode, gamma: T) -> Point<T> {
    let grid = &attn.grid;
    let peak = attn.argmax();
    match mode {
        DecodeMode::Argmax => grid.patch_center(peak).expect("argmax in range"),
        DecodeMode::ThresholdCentroid => {
            let cut = gamma * attn.probs[peak];
            let (mut wx, mut wy, mut w) = (T::zero(), T::zero(), T::zero());
            for (i, &a) in attn.probs.iter().enumerate() {
                if a >= cut {
                    let c: Point<T> = grid.patch_center(i).expect("index in range");
                    wx += a * c.x;
                    wy += a * c.y;
                    w += a;
                }
            }
            if w > T::zero() {
                Point::new(wx / w, wy / w)
            } else {
                grid.patch_center(peak).expect("argmax in range")
            }
        }
    }
}

/// Boundary-inclusive hit test.
pub fn is_hit<T: Scalar>(p: Point<T>, target: &BoundingBox<T>) -> bool {
    target.contains(p)
}

pub fn element_accuracy<T: Scalar>(predictions: &[Point<T>], targets: &[BoundingBox<T>]) -> Result<T> {
    if predictions.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(T::zero());
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| is_hit(**p, t))
        .count();
    Ok(T::from_count(hits) / T::from_count(targets.len()))
}

/// Size classes from area terciles: below the value at rank ⌊n/3⌋ is small,
/// below the value at rank ⌊2n/3⌋ is medium, the rest large.
pub fn area_terciles(areas: &[f64]) -> Vec<SizeClass> {
    if areas.is_empty() {
        return Vec::new();
    }
    let mut sorted = areas.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let t1 = sorted[n / 3];
    let t2 = sorted[(2 * n) / 3];
    areas
        .iter()
        .map(|&a| {
            if a < t1 {
                SizeClass::Small
            } else if a < t2 {
                SizeClass::Medium
            } else {
                SizeClass::Large
            }
        })
        .collect()
}

/// One evaluated target.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub target: BoundingBox<f64>,
    /// Known class (synthetic data); `None` means derive from area terciles.
    pub size_class: Option<SizeClass>,
    pub category: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub accuracy: f64,
    pub hits: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: f64,
    pub count: usize,
    /// Classes with no samples are omitted.
    pub per_size: BTreeMap<SizeClass, GroupAccuracy>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_category: BTreeMap<String, GroupAccuracy>,
    pub decode_mode: DecodeMode,
    pub gamma: Option<f64>,
}

impl EvalReport {
    pub fn size_accuracy(&self, class: SizeClass) -> Option<f64> {
        self.per_size.get(&class).map(|g| g.accuracy)
    }

    /// Aligned-column text rendering.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let gamma = self.gamma.map(|g| format!(", gamma {g}")).unwrap_or_default();
        let _ = writeln!(s, "decode: {}{gamma}", self.decode_mode);
        let _ = writeln!(s, "{:<16} {:>8} {:>6} {:>6}", "group", "accuracy", "hits", "n");
        let hits = (self.overall * self.count as f64).round() as usize;
        let _ = writeln!(s, "{:<16} {:>8.4} {:>6} {:>6}", "overall", self.overall, hits, self.count);
        for (c, g) in &self.per_size {
            let _ = writeln!(s, "{:<16} {:>8.4} {:>6} {:>6}", c.name(), g.accuracy, g.hits, g.count);
        }
        for (c, g) in &self.per_category {
            let _ = writeln!(s, "{:<16} {:>8.4} {:>6} {:>6}", c, g.accuracy, g.hits, g.count);
        }
        s
    }
}

fn bump<K: Ord>(map: &mut BTreeMap<K, GroupAccuracy>, key: K, hit: bool) {
    let g = map.entry(key).or_insert(GroupAccuracy {
        accuracy: 0.0,
        hits: 0,
        count: 0,
    });
    g.count += 1;
    g.hits += hit as usize;
    g.accuracy = g.hits as f64 / g.count as f64;
}

pub fn size_stratified_report(
    items: &[EvalItem],
    predictions: &[Point<f64>],
    decode_mode: DecodeMode,
    gamma: Option<f64>,
) -> Result<EvalReport> {
    if items.len() != predictions.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} samples",
            predictions.len(),
            items.len()
        )));
    }
    let needs_terciles = items.iter().any(|it| it.size_class.is_none());
    let derived = if needs_terciles {
        area_terciles(&items.iter().map(|it| it.target.area()).collect::<Vec<_>>())
    } else {
        Vec::new()
    };
    let mut per_size = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    let mut hits = 0;
    for (k, (it, p)) in items.iter().zip(predictions).enumerate() {
        let hit = is_hit(*p, &it.target);
        hits += hit as usize;
        let class = it.size_class.unwrap_or_else(|| derived[k]);
        bump(&mut per_size, class, hit);
        if let Some(cat) = &it.category {
            bump(&mut per_category, cat.clone(), hit);
        }
    }
    Ok(EvalReport {
        overall: if items.is_empty() { 0.0 } else { hits as f64 / items.len() as f64 },
        count: items.len(),
        per_size,
        per_category,
        decode_mode,
        gamma,
    })
}

/// `image_id,pred_x,pred_y,hit` rows.
pub fn predictions_csv(items: &[EvalItem], predictions: &[Point<f64>]) -> String {
    let mut s = String::from("image_id,pred_x,pred_y,hit\n");
    for (it, p) in items.iter().zip(predictions) {
        let _ = writeln!(s, "{},{},{},{}", it.id, p.x, p.y, is_hit(*p, &it.target) as u8);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PatchGrid;
    use proptest::prelude::*;

    fn grid() -> PatchGrid {
        PatchGrid::new(64, 64, 16).unwrap()
    }

    fn one_hot(k: usize) -> AttentionMap<f64> {
        let mut p = vec![0.0; 16];
        p[k] = 1.0;
        AttentionMap::new(grid(), p).unwrap()
    }

    #[test]
    fn single_peak_decodes_to_patch_centre() {
        for mode in [DecodeMode::Argmax, DecodeMode::ThresholdCentroid] {
            assert_eq!(decode_click(&one_hot(6), mode, 0.8), Point::new(40.0, 24.0));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut p = vec![0.0; 16];
        p[9] = 0.5;
        p[3] = 0.5;
        let m = AttentionMap::new(grid(), p).unwrap();
        assert_eq!(decode_click(&m, DecodeMode::Argmax, 1.0), Point::new(56.0, 8.0));
    }

    #[test]
    fn centroid_of_two_equal_neighbours() {
        let mut p = vec![0.0; 16];
        p[5] = 0.5;
        p[6] = 0.5;
        let m = AttentionMap::new(grid(), p).unwrap();
        let c = decode_click(&m, DecodeMode::ThresholdCentroid, 0.8);
        assert_eq!(c, Point::new(32.0, 24.0));
    }

    #[test]
    fn accuracy_counts_boundary_hits() {
        let t = BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert_eq!(element_accuracy(&[t.center(), t.center()], &[t, t]).unwrap(), 1.0);
        assert_eq!(element_accuracy(&[Point::new(0.0, 0.0)], &[t]).unwrap(), 0.0);
        assert_eq!(element_accuracy(&[Point::new(20.0, 15.0)], &[t]).unwrap(), 1.0);
        assert_eq!(element_accuracy(&[Point::new(20.0, 20.0)], &[t]).unwrap(), 1.0);
        assert!(element_accuracy(&[Point::new(0.0, 0.0)], &[t, t]).is_err());
    }

    #[test]
    fn terciles_split_evenly() {
        let areas: Vec<f64> = (1..=9).map(|a| a as f64).collect();
        let c = area_terciles(&areas);
        for (i, class) in c.iter().enumerate() {
            assert_eq!(*class, SizeClass::ALL[i / 3]);
        }
    }

    fn item(class: Option<SizeClass>, b: [f64; 4]) -> EvalItem {
        EvalItem {
            id: "x".into(),
            target: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            size_class: class,
            category: None,
        }
    }

    #[test]
    fn stratified_report_counts() {
        let items = vec![
            item(Some(SizeClass::Small), [0., 0., 10., 10.]),
            item(Some(SizeClass::Medium), [0., 0., 10., 10.]),
            item(Some(SizeClass::Large), [0., 0., 10., 10.]),
        ];
        let preds = vec![Point::new(5., 5.), Point::new(50., 50.), Point::new(1., 1.)];
        let r = size_stratified_report(&items, &preds, DecodeMode::Argmax, None).unwrap();
        assert_eq!(r.size_accuracy(SizeClass::Small), Some(1.0));
        assert_eq!(r.size_accuracy(SizeClass::Medium), Some(0.0));
        assert_eq!(r.size_accuracy(SizeClass::Large), Some(1.0));
        assert!((r.overall - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.to_table().contains("medium"));
    }

    #[test]
    fn single_class_matches_overall_and_absent_classes_are_omitted() {
        let items = vec![item(Some(SizeClass::Medium), [0., 0., 10., 10.]); 4];
        let preds = vec![Point::new(5., 5.), Point::new(50., 50.), Point::new(1., 1.), Point::new(11., 1.)];
        let r = size_stratified_report(&items, &preds, DecodeMode::Argmax, None).unwrap();
        assert_eq!(r.size_accuracy(SizeClass::Medium), Some(r.overall));
        assert_eq!(r.size_accuracy(SizeClass::Small), None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_size"].get("small").is_none());
    }

    #[test]
    fn real_data_uses_area_terciles() {
        let items: Vec<EvalItem> = (1..=6)
            .map(|k| item(None, [0., 0., k as f64, 1.0]))
            .collect();
        let preds = vec![Point::new(0.5, 0.5); 6];
        let r = size_stratified_report(&items, &preds, DecodeMode::Argmax, None).unwrap();
        for c in SizeClass::ALL {
            assert_eq!(r.per_size[&c].count, 2);
        }
    }

    proptest! {
        #[test]
        fn argmax_point_lies_in_argmax_patch(p in proptest::collection::vec(0.0..1.0f64, 16)) {
            let m = AttentionMap::new(grid(), p).unwrap();
            let c = decode_click(&m, DecodeMode::Argmax, 1.0);
            prop_assert!(grid().patch_region::<f64>(m.argmax()).unwrap().contains(c));
        }

        #[test]
        fn gamma_one_matches_argmax(p in proptest::collection::vec(0.0..1.0f64, 16)) {
            let m = AttentionMap::new(grid(), p).unwrap();
            let peak = m.probs[m.argmax()];
            prop_assume!(m.probs.iter().filter(|&&v| v == peak).count() == 1);
            let a = decode_click(&m, DecodeMode::ThresholdCentroid, 1.0);
            let b = decode_click(&m, DecodeMode::Argmax, 1.0);
            prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }

        #[test]
        fn accuracy_is_permutation_invariant(hits in proptest::collection::vec(any::<bool>(), 1..40), seed in 0u64..1000) {
            let t = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
            let mut preds: Vec<Point<f64>> = hits.iter().map(|&h| if h { Point::new(5.0, 5.0) } else { Point::new(50.0, 5.0) }).collect();
            let targets = vec![t; preds.len()];
            let before = element_accuracy(&preds, &targets).unwrap();
            crate::rng::Rng::new(seed, 0).shuffle(&mut preds);
            prop_assert_eq!(before, element_accuracy(&preds, &targets).unwrap());
        }
    }
}
