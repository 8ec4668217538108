//! Data-fit loss on labeled pixels and segmentation scores.
//!
//! The loss is softmax cross-entropy averaged over the selected pixels. The
//! score is intersection-over-union per class and its mean (mIoU), counted
//! only where the ground truth is labeled.

use std::io::Write;

use crate::error::{Error, Result};

/// Per-pixel class ids, `None` marks an unlabeled pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    ids: Vec<Option<usize>>,
}

impl ClassMap {
    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![None; height * width],
        }
    }

    pub fn from_ids(height: usize, width: usize, ids: Vec<Option<usize>>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} ids for a {height}x{width} class map",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    /// Fully labeled map from dense ids.
    pub fn dense(height: usize, width: usize, ids: Vec<usize>) -> Result<Self> {
        Self::from_ids(height, width, ids.into_iter().map(Some).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.ids[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, id: Option<usize>) {
        self.ids[row * self.width + col] = id;
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.ids.iter().copied()
    }

    pub fn labeled_count(&self) -> usize {
        self.ids.iter().filter(|v| v.is_some()).count()
    }

    /// Number of labeled pixels carrying each class id, up to the largest id seen.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for id in self.ids.iter().flatten() {
            if *id >= counts.len() {
                counts.resize(id + 1, 0);
            }
            counts[*id] += 1;
        }
        counts
    }
}

/// Mean softmax cross-entropy over `(logits, class)` pairs and its gradient
/// with respect to each logit vector (already divided by the pair count).
pub fn softmax_xent(selected: &[(Vec<f64>, usize)]) -> Result<(f64, Vec<Vec<f64>>)> {
    if selected.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let count = selected.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(selected.len());
    for (logits, class) in selected {
        if *class >= logits.len() {
            return Err(Error::Index(format!(
                "class {class} with only {} logits",
                logits.len()
            )));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (logits[*class] - max);
        let g = exps
            .iter()
            .enumerate()
            .map(|(k, e)| (e / sum - if k == *class { 1.0 } else { 0.0 }) / count)
            .collect();
        grads.push(g);
    }
    Ok((total / count, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIoU {
    pub class_id: usize,
    pub intersection: usize,
    pub union: usize,
    /// `None` when the class appears in neither map.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    pub per_class: Vec<ClassIoU>,
    pub miou: f64,
}

impl IoUReport {
    /// Appends `alpha,class_id,iou,miou` rows; undefined IoUs are left empty.
    pub fn write_csv_rows<W: Write>(&self, alpha: f64, writer: &mut csv::Writer<W>) -> Result<()> {
        for c in &self.per_class {
            writer.write_record([
                alpha.to_string(),
                c.class_id.to_string(),
                c.iou.map(|v| v.to_string()).unwrap_or_default(),
                self.miou.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// Per-class IoU of `pred` against `truth`, counted over pixels labeled in
/// `truth`. Classes absent from both maps are left out of the mean.
pub fn iou(pred: &ClassMap, truth: &ClassMap) -> Result<IoUReport> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut intersection: Vec<usize> = Vec::new();
    let mut union: Vec<usize> = Vec::new();
    let grow = |v: &mut Vec<usize>, k: usize| {
        if k >= v.len() {
            v.resize(k + 1, 0);
        }
    };
    for (p, t) in pred.ids.iter().zip(&truth.ids) {
        let Some(t) = *t else { continue };
        grow(&mut intersection, t);
        grow(&mut union, t);
        match *p {
            Some(p) if p == t => {
                intersection[t] += 1;
                union[t] += 1;
            }
            Some(p) => {
                grow(&mut intersection, p);
                grow(&mut union, p);
                union[t] += 1;
                union[p] += 1;
            }
            None => union[t] += 1,
        }
    }
    let per_class: Vec<ClassIoU> = union
        .iter()
        .enumerate()
        .map(|(k, &u)| ClassIoU {
            class_id: k,
            intersection: intersection[k],
            union: u,
            iou: (u > 0).then(|| intersection[k] as f64 / u as f64),
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(IoUReport { per_class, miou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn saturated_correct_prediction() {
        let (loss, grads) = softmax_xent(&[(vec![1e3, 0.0], 0)]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(grads[0].iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let sel = vec![(vec![0.3; 4], 1), (vec![0.3; 4], 3)];
        let (loss, grads) = softmax_xent(&sel).unwrap();
        assert_eq!(loss, 4f64.ln());
        for (g, (_, class)) in grads.iter().zip(&sel) {
            for (k, v) in g.iter().enumerate() {
                let expected = (0.25 - if k == *class { 1.0 } else { 0.0 }) / 2.0;
                assert!((v - expected).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn two_logit_closed_form() {
        let (loss, grads) = softmax_xent(&[(vec![1.0, 2.0], 0)]).unwrap();
        assert!((loss - 1.3132616875182228).abs() < 1e-15);
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((grads[0][0] - (1.0 - p1 - 1.0)).abs() < 1e-15);
        assert!((grads[0][1] - p1).abs() < 1e-15);
        assert!((p1 - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn empty_selection_is_an_error() {
        assert!(matches!(softmax_xent(&[]), Err(Error::EmptyLabels)));
        assert!(softmax_xent(&[(vec![0.0, 1.0], 2)]).is_err());
    }

    #[test]
    fn xent_gradient_matches_finite_differences() {
        let sel = vec![(vec![0.4, -1.2, 2.0], 2), (vec![-0.3, 0.8, 0.1], 0)];
        let (_, grads) = softmax_xent(&sel).unwrap();
        let step = 1e-6;
        for e in 0..sel.len() {
            for k in 0..3 {
                let mut plus = sel.clone();
                plus[e].0[k] += step;
                let mut minus = sel.clone();
                minus[e].0[k] -= step;
                let fd = (softmax_xent(&plus).unwrap().0 - softmax_xent(&minus).unwrap().0) / (2.0 * step);
                assert!((fd - grads[e][k]).abs() < 1e-8, "{fd} vs {}", grads[e][k]);
            }
        }
    }

    #[test]
    fn identical_maps_score_one() {
        let m = ClassMap::dense(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let r = iou(&m, &m).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.per_class.iter().all(|c| c.iou == Some(1.0)));
    }

    #[test]
    fn complement_scores_zero() {
        let truth = ClassMap::dense(2, 2, vec![0, 1, 1, 0]).unwrap();
        let pred = ClassMap::dense(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(iou(&pred, &truth).unwrap().miou, 0.0);
    }

    #[test]
    fn two_by_two_counts() {
        let truth = ClassMap::dense(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::dense(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = iou(&pred, &truth).unwrap();
        assert_eq!((r.per_class[0].intersection, r.per_class[0].union), (1, 2));
        assert_eq!((r.per_class[1].intersection, r.per_class[1].union), (2, 3));
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn unlabeled_truth_pixels_are_skipped_and_absent_classes_excluded() {
        let truth = ClassMap::from_ids(1, 4, vec![Some(0), None, Some(2), None]).unwrap();
        let pred = ClassMap::dense(1, 4, vec![0, 1, 2, 1]).unwrap();
        let r = iou(&pred, &truth).unwrap();
        assert_eq!(r.per_class[1].iou, None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(iou(&ClassMap::unlabeled(2, 2), &ClassMap::unlabeled(2, 3)).is_err());
    }

    #[test]
    fn csv_rows() {
        let truth = ClassMap::dense(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::dense(2, 2, vec![0, 1, 1, 1]).unwrap();
        let r = iou(&pred, &truth).unwrap();
        let mut w = csv::Writer::from_writer(Vec::new());
        r.write_csv_rows(0.5, &mut w).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0.5,0,0.5,0.58"));
    }

    proptest! {
        #[test]
        fn xent_is_bounded_by_ln_k_at_uniform_and_positive(logits in prop::collection::vec(-20.0f64..20.0, 2..6), class in 0usize..2) {
            let (loss, grads) = softmax_xent(&[(logits.clone(), class)]).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert!(grads[0].iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn miou_of_map_with_itself_is_one(ids in prop::collection::vec(0usize..4, 1..40)) {
            let m = ClassMap::dense(1, ids.len(), ids).unwrap();
            prop_assert_eq!(iou(&m, &m).unwrap().miou, 1.0);
        }

        #[test]
        fn intersection_never_exceeds_union(
            a in prop::collection::vec(0usize..3, 16),
            b in prop::collection::vec(prop::option::of(0usize..3), 16),
        ) {
            let pred = ClassMap::dense(4, 4, a).unwrap();
            let truth = ClassMap::from_ids(4, 4, b).unwrap();
            let r = iou(&pred, &truth).unwrap();
            for c in &r.per_class {
                prop_assert!(c.intersection <= c.union);
            }
            prop_assert!((0.0..=1.0).contains(&r.miou));
        }
    }
}
