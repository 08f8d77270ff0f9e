//! Confusion matrices, per-class IoU, seen/unseen mIoU and their harmonic mean.

use std::fmt::Write as _;

use crate::embeddings::SplitSpec;
use crate::error::{Error, Result};

/// `counts[g * n + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, predicted: &[u16], truth: &[u16]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                predicted.len(),
                truth.len()
            )));
        }
        let n = self.n;
        if let Some(&bad) = predicted.iter().chain(truth).find(|&&l| l as usize >= n) {
            return Err(Error::invalid(format!("label {bad} outside {n} classes")));
        }
        for (&p, &g) in predicted.iter().zip(truth) {
            self.counts[g as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::shape("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class never occurs in
    /// either the ground truth or the predictions.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.n;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean IoU over the present classes of `classes`, never counting background.
pub fn miou(ious: &[Option<f64>], classes: impl IntoIterator<Item = usize>) -> Option<f64> {
    let vals: Vec<f64> = classes
        .into_iter()
        .filter(|&c| c != 0)
        .filter_map(|c| ious.get(c).copied().flatten())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `2 s u / (s + u)`, or 0 when both are 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> Result<f64> {
    if !(seen >= 0.0 && unseen >= 0.0) {
        return Err(Error::invalid(format!(
            "harmonic mean needs non-negative inputs, got {seen} and {unseen}"
        )));
    }
    if seen + unseen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * seen * unseen / (seen + unseen))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub harmonic_mean: Option<f64>,
    /// Ground-truth pixel count per class.
    pub pixel_counts: Vec<u64>,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String], split: &SplitSpec) -> Self {
        let ious = cm.iou_per_class();
        let seen = miou(&ious, split.seen().iter().copied());
        let unseen = miou(&ious, split.unseen().iter().copied());
        let h = match (seen, unseen) {
            (Some(s), Some(u)) => harmonic_mean(s, u).ok(),
            _ => None,
        };
        let n = cm.num_classes();
        MetricsReport {
            class_names: class_names.to_vec(),
            pixel_counts: (0..n).map(|g| (0..n).map(|p| cm.get(g, p)).sum()).collect(),
            per_class_iou: ious,
            seen_miou: seen,
            unseen_miou: unseen,
            harmonic_mean: h,
        }
    }

    /// `class_name,iou` rows for every class, then the three summary rows.
    pub fn to_csv_generalized(&self) -> String {
        let mut out = String::from("class_name,iou\n");
        for (name, iou) in self.class_names.iter().zip(&self.per_class_iou) {
            writeln!(out, "{name},{}", fmt_opt(*iou)).unwrap();
        }
        writeln!(out, "seen_miou,{}", fmt_opt(self.seen_miou)).unwrap();
        writeln!(out, "unseen_miou,{}", fmt_opt(self.unseen_miou)).unwrap();
        writeln!(out, "harmonic_mean,{}", fmt_opt(self.harmonic_mean)).unwrap();
        out
    }

    /// Unseen-class rows and the unseen mIoU only.
    pub fn to_csv_conventional(&self, split: &SplitSpec) -> String {
        let mut out = String::from("class_name,iou\n");
        for c in split.unseen() {
            writeln!(
                out,
                "{},{}",
                self.class_names[*c],
                fmt_opt(self.per_class_iou[*c])
            )
            .unwrap();
        }
        writeln!(out, "unseen_miou,{}", fmt_opt(self.unseen_miou)).unwrap();
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_masks_fill_the_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(cm.get(g, p), 0);
                }
            }
        }
        assert_eq!(cm.get(2, 2), 2);
        assert!(cm.iou_per_class().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn empty_masks_change_nothing() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.accumulate(&[0], &[]).is_err());
        assert!(cm.accumulate(&[5], &[0]).is_err());
    }

    #[test]
    fn two_class_hand_example() {
        // Ground truth A A B B, prediction A A A A.
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[1, 1, 1, 1], &[1, 1, 2, 2]).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[1], Some(0.5));
        assert_eq!(iou[2], Some(0.0));
        assert_eq!(iou[0], None);
        assert_eq!(miou(&iou, [0, 1, 2]), Some(0.25));
    }

    #[test]
    fn miou_rules() {
        let ious = vec![Some(0.9), Some(0.2), Some(0.4), None];
        assert_eq!(miou(&ious, [1, 2]), Some(0.30000000000000004));
        assert_eq!(miou(&ious, [0, 1, 2]), miou(&ious, [1, 2]));
        assert_eq!(miou(&ious, [3]), None);
        let same = vec![Some(0.7); 4];
        assert!((miou(&same, 1..4).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn harmonic_mean_cases() {
        assert!((harmonic_mean(60.1, 7.0).unwrap() - 12.5).abs() <= 0.1);
        assert!((harmonic_mean(0.4, 0.4).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(harmonic_mean(0.4, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!(harmonic_mean(-0.1, 0.5).is_err());
    }

    #[test]
    fn report_csv_schemas() {
        let split = SplitSpec::from_unseen(3, [2]).unwrap();
        let names: Vec<String> = ["background", "a", "b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 2], &[0, 1, 2, 2]).unwrap();
        let r = MetricsReport::from_confusion(&cm, &names, &split);
        let g = r.to_csv_generalized();
        assert!(g.starts_with("class_name,iou\nbackground,1.000000\n"));
        for key in ["seen_miou,", "unseen_miou,", "harmonic_mean,"] {
            assert!(g.contains(key));
        }
        let c = r.to_csv_conventional(&split);
        assert_eq!(c, "class_name,iou\nb,0.500000\nunseen_miou,0.500000\n");
    }

    fn mask(n: usize) -> impl Strategy<Value = (Vec<u16>, Vec<u16>)> {
        (0usize..40).prop_flat_map(move |len| {
            (
                prop::collection::vec(0..n as u16, len),
                prop::collection::vec(0..n as u16, len),
            )
        })
    }

    proptest! {
        #[test]
        fn accumulate_is_additive((p1, g1) in mask(4), (p2, g2) in mask(4)) {
            let mut split = ConfusionMatrix::new(4);
            split.accumulate(&p1, &g1).unwrap();
            split.accumulate(&p2, &g2).unwrap();
            let mut joint = ConfusionMatrix::new(4);
            let p: Vec<u16> = p1.iter().chain(&p2).copied().collect();
            let g: Vec<u16> = g1.iter().chain(&g2).copied().collect();
            joint.accumulate(&p, &g).unwrap();
            prop_assert_eq!(&split, &joint);
            prop_assert_eq!(joint.total(), p.len() as u64);
            for v in joint.iou_per_class().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn merge_commutes_and_associates((p1, g1) in mask(3), (p2, g2) in mask(3), (p3, g3) in mask(3)) {
            let cm = |p: &[u16], g: &[u16]| { let mut m = ConfusionMatrix::new(3); m.accumulate(p, g).unwrap(); m };
            let (a, b, c) = (cm(&p1, &g1), cm(&p2, &g2), cm(&p3, &g3));
            let mut ab = a.clone(); ab.merge(&b).unwrap();
            let mut ba = b.clone(); ba.merge(&a).unwrap();
            prop_assert_eq!(&ab, &ba);
            let mut ab_c = ab.clone(); ab_c.merge(&c).unwrap();
            let mut bc = b.clone(); bc.merge(&c).unwrap();
            let mut a_bc = a.clone(); a_bc.merge(&bc).unwrap();
            prop_assert_eq!(ab_c, a_bc);
        }

        #[test]
        fn harmonic_mean_bounds(s in 0.0f64..1.0, u in 0.0f64..1.0) {
            let h = harmonic_mean(s, u).unwrap();
            prop_assert!(h <= 2.0 * s.min(u) + 1e-15);
            prop_assert!(h <= s.max(u) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert_eq!(h, harmonic_mean(u, s).unwrap());
        }
    }
}
