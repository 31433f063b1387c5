//! Confusion counts and IoU/F1 under named aggregation schemes.
//!
//! Land is the positive class. Both scores are defined as 1.0 when their
//! denominator is zero, which happens only when prediction and truth agree
//! that there is no land.

use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_io::{LabelMask, LAND};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// The same counts seen with water as the positive class.
    pub fn water_view(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    /// Counts with prediction and truth exchanged.
    pub fn transposed(&self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tn,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Count agreement between a predicted and a reference mask.
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
        match (p == LAND, g == LAND) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    c.f1()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Pool land counts over all images, then score.
    MicroLand,
    /// Score land per image, then average.
    #[default]
    MacroImageLand,
    /// Pool counts, score land and water separately, average the two.
    MacroClass,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::MicroLand, Scheme::MacroImageLand, Scheme::MacroClass];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::MicroLand => "micro-land",
            Scheme::MacroImageLand => "macro-image-land",
            Scheme::MacroClass => "macro-class",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub scene_id: String,
    pub iou: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub iou: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_image: Option<Vec<ImageScore>>,
}

/// Combine per-image counts into one score pair.
pub fn aggregate(per_image: &[(String, ConfusionCounts)], scheme: Scheme) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::invalid("cannot aggregate metrics over zero images"));
    }
    let pooled: ConfusionCounts = per_image.iter().map(|(_, c)| *c).sum();
    let (iou, f1) = match scheme {
        Scheme::MicroLand => (pooled.iou(), pooled.f1()),
        Scheme::MacroImageLand => {
            let n = per_image.len() as f64;
            (
                per_image.iter().map(|(_, c)| c.iou()).sum::<f64>() / n,
                per_image.iter().map(|(_, c)| c.f1()).sum::<f64>() / n,
            )
        }
        Scheme::MacroClass => {
            let water = pooled.water_view();
            ((pooled.iou() + water.iou()) / 2.0, (pooled.f1() + water.f1()) / 2.0)
        }
    };
    let per_image = (scheme == Scheme::MacroImageLand).then(|| {
        per_image
            .iter()
            .map(|(id, c)| ImageScore {
                scene_id: id.clone(),
                iou: c.iou(),
                f1: c.f1(),
            })
            .collect()
    });
    Ok(MetricsReport {
        scheme,
        iou,
        f1,
        per_image,
    })
}

/// Reports under every scheme, in [`Scheme::ALL`] order.
pub fn aggregate_all(per_image: &[(String, ConfusionCounts)]) -> Result<Vec<MetricsReport>> {
    Scheme::ALL.iter().map(|&s| aggregate(per_image, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, v: Vec<u8>) -> LabelMask {
        LabelMask::new("m", h, w, v).unwrap()
    }

    #[test]
    fn uniform_masks() {
        let land = mask(4, 4, vec![1; 16]);
        let water = mask(4, 4, vec![0; 16]);
        assert_eq!(confusion(&land, &land).unwrap(), ConfusionCounts::new(16, 0, 0, 0));
        assert_eq!(confusion(&land, &water).unwrap(), ConfusionCounts::new(0, 16, 0, 0));
        assert!(confusion(&land, &mask(2, 8, vec![0; 16])).is_err());
    }

    #[test]
    fn constructed_four_by_four() {
        let mut gt = vec![0u8; 16];
        let mut pred = vec![0u8; 16];
        for i in [0, 1, 2] {
            gt[i] = 1;
            pred[i] = 1;
        }
        pred[5] = 1;
        gt[9] = 1;
        gt[10] = 1;
        let c = confusion(&mask(4, 4, pred), &mask(4, 4, gt)).unwrap();
        assert_eq!(c, ConfusionCounts::new(3, 1, 2, 10));
        assert_eq!(c.iou(), 0.5);
        assert!((c.f1() - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn empty_class_conventions() {
        assert_eq!(ConfusionCounts::new(0, 0, 0, 9).iou(), 1.0);
        assert_eq!(ConfusionCounts::new(0, 0, 0, 9).f1(), 1.0);
        assert_eq!(ConfusionCounts::new(0, 2, 1, 9).f1(), 0.0);
    }

    #[test]
    fn single_image_schemes_coincide_for_land() {
        let c = vec![("a".to_string(), ConfusionCounts::new(5, 2, 1, 8))];
        let micro = aggregate(&c, Scheme::MicroLand).unwrap();
        let macro_ = aggregate(&c, Scheme::MacroImageLand).unwrap();
        assert_eq!((micro.iou, micro.f1), (macro_.iou, macro_.f1));
        assert!(aggregate(&[], Scheme::MicroLand).is_err());
    }

    #[test]
    fn macro_image_averages_per_image_scores() {
        // IoU 0.4 and 0.8 with equal denominators of 10.
        let c = vec![
            ("a".to_string(), ConfusionCounts::new(4, 3, 3, 90)),
            ("b".to_string(), ConfusionCounts::new(8, 1, 1, 90)),
        ];
        let r = aggregate(&c, Scheme::MacroImageLand).unwrap();
        assert!((r.iou - 0.6).abs() < 1e-12);
        assert_eq!(r.per_image.as_ref().unwrap().len(), 2);
        let micro = aggregate(&c, Scheme::MicroLand).unwrap();
        assert_eq!(micro.iou, 12.0 / 20.0);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let c = vec![
            ("a".to_string(), ConfusionCounts::new(7, 0, 0, 9)),
            ("b".to_string(), ConfusionCounts::new(0, 0, 0, 16)),
        ];
        for r in aggregate_all(&c).unwrap() {
            assert_eq!((r.iou, r.f1), (1.0, 1.0), "{}", r.scheme);
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.as_str()), Some(s));
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
    }

    fn counts() -> impl Strategy<Value = ConfusionCounts> {
        (0u64..10_000, 0u64..10_000, 0u64..10_000, 0u64..10_000)
            .prop_map(|(a, b, c, d)| ConfusionCounts::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn micro_f1_iou_identity(cs in prop::collection::vec(counts(), 1..8)) {
            let per: Vec<_> = cs.iter().enumerate().map(|(i, c)| (i.to_string(), *c)).collect();
            let r = aggregate(&per, Scheme::MicroLand).unwrap();
            prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&r.iou) && (0.0..=1.0).contains(&r.f1));
        }

        #[test]
        fn adding_a_true_positive_never_hurts(c in counts()) {
            let better = ConfusionCounts { tp: c.tp + 1, ..c };
            prop_assert!(better.iou() >= c.iou());
            prop_assert!(better.f1() >= c.f1());
        }

        #[test]
        fn iou_is_symmetric_in_pred_and_gt(c in counts()) {
            prop_assert_eq!(c.iou(), c.transposed().iou());
        }

        #[test]
        fn micro_over_copies_equals_single(c in counts(), k in 1usize..6) {
            let per: Vec<_> = (0..k).map(|i| (i.to_string(), c)).collect();
            let r = aggregate(&per, Scheme::MicroLand).unwrap();
            prop_assert!((r.iou - c.iou()).abs() < 1e-12);
            prop_assert!((r.f1 - c.f1()).abs() < 1e-12);
        }
    }
}
