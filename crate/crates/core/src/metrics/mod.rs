//! Accuracy matrix, forgetting and transfer measures, task similarity,
//! clustering NMI and the two composite scores.

mod clustering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use clustering::{fusion_nmi, kmeans, nmi, KMeans, KMEANS_RESTARTS};

fn check_fraction(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Config(format!("{what} {x} is not a fraction in [0, 1]")));
    }
    Ok(())
}

/// Lower-triangular `R[t][i]`: accuracy on task `i` after training task `t`
/// (both 1-based), plus the zero-shot and pre-task accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
    zero_shot: Vec<f64>,
    pre_task: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    /// `zero_shot[t-1]` is the untrained model's accuracy on task `t`.
    pub fn new(zero_shot: Vec<f64>) -> Result<Self> {
        for &b in &zero_shot {
            check_fraction(b, "zero-shot accuracy")?;
        }
        let n = zero_shot.len();
        Ok(Self {
            rows: Vec::new(),
            zero_shot,
            pre_task: vec![None; n],
        })
    }

    pub fn tasks(&self) -> usize {
        self.zero_shot.len()
    }

    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn zero_shot(&self) -> &[f64] {
        &self.zero_shot
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.rows[t - 1][i - 1]
    }

    pub fn pre_task(&self, t: usize) -> Option<f64> {
        self.pre_task.get(t - 1).copied().flatten()
    }

    /// Records the accuracy on task `t` before it is trained.
    pub fn set_pre_task(&mut self, t: usize, acc: f64) -> Result<()> {
        check_fraction(acc, "pre-task accuracy")?;
        if t != self.rows.len() + 1 || t > self.tasks() {
            return Err(Error::Protocol(format!(
                "pre-task evaluation of task {t} after {} trained stages",
                self.rows.len()
            )));
        }
        self.pre_task[t - 1] = Some(acc);
        Ok(())
    }

    /// Appends the row for the next stage.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len() + 1;
        if t > self.tasks() {
            return Err(Error::Protocol(format!("stage {t} exceeds {} tasks", self.tasks())));
        }
        if row.len() != t {
            return Err(shape_err(format!("stage {t} row has {} entries", row.len())));
        }
        for &x in &row {
            check_fraction(x, "accuracy")?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Mean of the pooled stage accuracies.
pub fn avg_accuracy(stage_acc: &[f64]) -> Result<f64> {
    if stage_acc.is_empty() {
        return Err(Error::EmptyLedger);
    }
    Ok(stage_acc.iter().sum::<f64>() / stage_acc.len() as f64)
}

/// Average drop from each earlier task's best accuracy, in percent.
pub fn forgetting(m: &AccuracyMatrix, t: usize) -> f64 {
    assert!(t >= 1 && t <= m.stages(), "stage {t} not recorded");
    if t == 1 {
        return 0.0;
    }
    let total: f64 = (1..t)
        .map(|i| {
            let best = (i..t).map(|j| m.get(j, i)).fold(f64::NEG_INFINITY, f64::max);
            best - m.get(t, i)
        })
        .sum();
    (100.0 * total / (t - 1) as f64).clamp(0.0, 100.0)
}

/// Backward and forward transfer at stage `t`, as signed fractions.
pub fn bwt_fwt(m: &AccuracyMatrix, t: usize) -> Result<(f64, f64)> {
    if t < 1 || t > m.stages() {
        return Err(Error::Protocol(format!("stage {t} not recorded")));
    }
    if t == 1 {
        return Ok((0.0, 0.0));
    }
    let bwt = (1..t).map(|i| m.get(t, i) - m.get(i, i)).sum::<f64>() / (t - 1) as f64;
    let pre = m
        .pre_task(t)
        .ok_or_else(|| Error::Protocol(format!("no pre-task evaluation for task {t}")))?;
    Ok((bwt, pre - m.zero_shot[t - 1]))
}

/// `(½(c_sem + c_feat) + 1) / 2`.
pub fn similarity_weight(c_sem: f64, c_feat: f64) -> f64 {
    ((0.5 * (c_sem + c_feat) + 1.0) / 2.0).clamp(0.0, 1.0)
}

fn mean_row(m: ArrayView2<f64>, what: &str) -> Result<Vec<f64>> {
    if m.nrows() == 0 {
        return Err(Error::DegeneratePrototype(format!("no {what} rows")));
    }
    Ok(m.mean_axis(ndarray::Axis(0)).expect("rows").to_vec())
}

fn cosine_of_means(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<f64> {
    let x = mean_row(a, what)?;
    let y = mean_row(b, what)?;
    if x.len() != y.len() {
        return Err(shape_err(format!("{what} widths differ")));
    }
    let nx = x.iter().map(|z| z * z).sum::<f64>().sqrt();
    let ny = y.iter().map(|z| z * z).sum::<f64>().sqrt();
    if nx < 1e-12 || ny < 1e-12 {
        return Err(Error::DegeneratePrototype(format!("zero-norm mean {what}")));
    }
    Ok((x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)).clamp(-1.0, 1.0))
}

/// Similarity of task `t` to tasks `1..t`: semantic from class prototypes,
/// distributional from fused test features.
pub fn task_similarity(
    t: usize,
    new_prototypes: ArrayView2<f64>,
    old_prototypes: ArrayView2<f64>,
    new_features: ArrayView2<f64>,
    old_features: ArrayView2<f64>,
) -> Result<f64> {
    if t <= 1 {
        return Ok(0.0);
    }
    let c_sem = cosine_of_means(new_prototypes, old_prototypes, "prototype")?;
    let c_feat = cosine_of_means(new_features, old_features, "feature")?;
    Ok(similarity_weight(c_sem, c_feat))
}

/// `½·acc + (1/2T) Σ_t (1 − w_t)(100 − For_t)`, with `acc` and `For_t` in
/// percent.
pub fn m1_from(acc_avg_percent: f64, forgetting: &[f64], w: &[f64]) -> Result<f64> {
    if forgetting.is_empty() {
        return Err(Error::EmptyLedger);
    }
    if forgetting.len() != w.len() {
        return Err(shape_err("forgetting and similarity lengths differ"));
    }
    let t = forgetting.len() as f64;
    let tail: f64 = forgetting
        .iter()
        .zip(w)
        .map(|(f, w)| (1.0 - w.clamp(0.0, 1.0)) * (100.0 - f.clamp(0.0, 100.0)))
        .sum();
    Ok((0.5 * acc_avg_percent + tail / (2.0 * t)).clamp(0.0, 100.0))
}

/// `¼·acc + (1/4T) Σ_t (max(0, BWT_t) + max(0, FWT_t)) + ¼·½(NMI_v + NMI_a)`
/// with every input a fraction.
pub fn m2_from(acc_avg: f64, bwt: &[f64], fwt: &[f64], nmi_v: f64, nmi_a: f64) -> Result<f64> {
    if bwt.is_empty() {
        return Err(Error::EmptyLedger);
    }
    if bwt.len() != fwt.len() {
        return Err(shape_err("BWT and FWT lengths differ"));
    }
    let t = bwt.len() as f64;
    let transfer: f64 = bwt.iter().zip(fwt).map(|(b, f)| b.max(0.0) + f.max(0.0)).sum();
    Ok((0.25 * acc_avg + transfer / (4.0 * t) + 0.125 * (nmi_v + nmi_a)).clamp(0.0, 1.0))
}

/// `M[i][j]` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(shape_err("predictions and labels differ in length"));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(shape_err(format!("class index {} out of range 0..{classes}", p.max(y))));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// Confusion matrix of one stage over the seen classes, in `classes` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfusion {
    pub t: usize,
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub t: usize,
    pub acc: f64,
    #[serde(rename = "For")]
    pub forgetting: f64,
    pub w: f64,
    #[serde(rename = "BWT")]
    pub bwt: f64,
    #[serde(rename = "FWT")]
    pub fwt: f64,
}

/// Append-only evaluation record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub matrix: AccuracyMatrix,
    /// Pooled accuracy over all seen test samples after each stage.
    pub stage_acc: Vec<f64>,
    pub similarity: Vec<f64>,
    pub confusion: Vec<StageConfusion>,
    pub nmi_fv: Option<f64>,
    pub nmi_fa: Option<f64>,
}

impl MetricsLedger {
    pub fn new(matrix: AccuracyMatrix) -> Self {
        Self {
            matrix,
            stage_acc: Vec::new(),
            similarity: Vec::new(),
            confusion: Vec::new(),
            nmi_fv: None,
            nmi_fa: None,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_acc.len()
    }

    pub fn record_stage(&mut self, row: Vec<f64>, pooled_acc: f64, w: f64, confusion: StageConfusion) -> Result<()> {
        check_fraction(pooled_acc, "stage accuracy")?;
        check_fraction(w, "task similarity")?;
        self.matrix.push_row(row)?;
        self.stage_acc.push(pooled_acc);
        self.similarity.push(w);
        self.confusion.push(confusion);
        Ok(())
    }

    pub fn set_nmi(&mut self, nmi_fv: f64, nmi_fa: f64) -> Result<()> {
        check_fraction(nmi_fv, "NMI")?;
        check_fraction(nmi_fa, "NMI")?;
        self.nmi_fv = Some(nmi_fv);
        self.nmi_fa = Some(nmi_fa);
        Ok(())
    }

    pub fn per_stage(&self) -> Result<Vec<StageMetrics>> {
        (1..=self.stages())
            .map(|t| {
                let (bwt, fwt) = bwt_fwt(&self.matrix, t)?;
                Ok(StageMetrics {
                    t,
                    acc: self.stage_acc[t - 1],
                    forgetting: forgetting(&self.matrix, t),
                    w: self.similarity[t - 1],
                    bwt,
                    fwt,
                })
            })
            .collect()
    }

    pub fn acc_avg(&self) -> Result<f64> {
        avg_accuracy(&self.stage_acc)
    }

    pub fn last_acc(&self) -> Result<f64> {
        self.stage_acc.last().copied().ok_or(Error::EmptyLedger)
    }

    pub fn m1(&self) -> Result<f64> {
        let stages = self.per_stage()?;
        let f: Vec<f64> = stages.iter().map(|s| s.forgetting).collect();
        m1_from(100.0 * self.acc_avg()?, &f, &self.similarity)
    }

    pub fn m2(&self) -> Result<f64> {
        let stages = self.per_stage()?;
        let (Some(nv), Some(na)) = (self.nmi_fv, self.nmi_fa) else {
            return Err(Error::Protocol("NMI terms have not been computed".into()));
        };
        let b: Vec<f64> = stages.iter().map(|s| s.bwt).collect();
        let f: Vec<f64> = stages.iter().map(|s| s.fwt).collect();
        m2_from(self.acc_avg()?, &b, &f, nv, na)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]], pre: &[f64], zero: &[f64]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(zero.to_vec()).unwrap();
        for (t, r) in rows.iter().enumerate() {
            if t > 0 {
                m.set_pre_task(t + 1, pre[t]).unwrap();
            }
            m.push_row(r.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn avg_accuracy_examples() {
        assert_eq!(avg_accuracy(&[0.8]).unwrap(), 0.8);
        assert_eq!(avg_accuracy(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(matches!(avg_accuracy(&[]), Err(Error::EmptyLedger)));
    }

    #[test]
    fn forgetting_and_transfer_examples() {
        let m = matrix(&[&[0.8], &[0.6, 0.9]], &[0.0, 0.3], &[0.2, 0.3]);
        assert_eq!(forgetting(&m, 1), 0.0);
        assert!((forgetting(&m, 2) - 20.0).abs() < 1e-12);
        let (b, f) = bwt_fwt(&m, 2).unwrap();
        assert!((b + 0.2).abs() < 1e-12);
        assert_eq!(f, 0.0);
        let up = matrix(&[&[0.6], &[0.8, 0.9]], &[0.0, 0.5], &[0.2, 0.3]);
        assert_eq!(forgetting(&up, 2), 0.0);
        assert!((bwt_fwt(&up, 2).unwrap().1 - 0.2).abs() < 1e-12);
        let same = matrix(&[&[0.7], &[0.7, 0.4]], &[0.0, 0.1], &[0.2, 0.3]);
        assert_eq!(bwt_fwt(&same, 2).unwrap().0, 0.0);
        assert_eq!(bwt_fwt(&same, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn missing_pre_task_is_a_protocol_error() {
        let mut m = AccuracyMatrix::new(vec![0.1, 0.1]).unwrap();
        m.push_row(vec![0.9]).unwrap();
        m.push_row(vec![0.5, 0.8]).unwrap();
        assert!(matches!(bwt_fwt(&m, 2), Err(Error::Protocol(_))));
        assert!(matches!(m.set_pre_task(1, 0.5), Err(Error::Protocol(_))));
        assert!(matches!(m.push_row(vec![0.1, 0.1, 0.1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn three_stage_hand_matrix() {
        let m = matrix(&[&[0.9], &[0.7, 0.8], &[0.5, 0.85, 0.6]], &[0.0, 0.2, 0.25], &[0.1, 0.15, 0.2]);
        // Task 1 best 0.9 → 0.5; task 2 best 0.8 → 0.85 contributes −0.05.
        assert!((forgetting(&m, 3) - 100.0 * (0.4 - 0.05) / 2.0).abs() < 1e-12);
        assert!((forgetting(&m, 2) - 20.0).abs() < 1e-12);
        let (b, f) = bwt_fwt(&m, 3).unwrap();
        assert!((b - ((0.5 - 0.9) + (0.85 - 0.8)) / 2.0).abs() < 1e-12);
        assert!((f - (0.25 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn similarity_examples() {
        let p = array![[1.0, 0.0], [1.0, 0.0]];
        assert!((task_similarity(2, p.view(), p.view(), p.view(), p.view()).unwrap() - 1.0).abs() < 1e-12);
        let q = array![[0.0, 1.0]];
        assert!((task_similarity(2, p.view(), q.view(), p.view(), q.view()).unwrap() - 0.5).abs() < 1e-12);
        let neg = array![[-2.0, 0.0]];
        assert!((task_similarity(2, p.view(), p.view(), p.view(), neg.view()).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(task_similarity(1, p.view(), q.view(), p.view(), q.view()).unwrap(), 0.0);
        let z = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!(matches!(task_similarity(2, z.view(), p.view(), p.view(), p.view()), Err(Error::DegeneratePrototype(_))));
    }

    #[test]
    fn composite_examples() {
        assert_eq!(m1_from(100.0, &[0.0], &[0.0]).unwrap(), 100.0);
        assert!((m1_from(50.0, &[20.0], &[0.5]).unwrap() - 45.0).abs() < 1e-12);
        assert!((m1_from(64.0, &[10.0, 30.0], &[1.0, 1.0]).unwrap() - 32.0).abs() < 1e-12);
        assert!((m2_from(1.0, &[1.0, 1.0], &[1.0, 1.0], 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m2_from(0.0, &[0.0], &[0.0], 0.0, 0.0).unwrap(), 0.0);
        assert!((m2_from(0.6, &[0.0, 0.2], &[0.0, 0.4], 0.5, 0.7).unwrap() - 0.375).abs() < 1e-12);
        assert!(matches!(m1_from(50.0, &[], &[]), Err(Error::EmptyLedger)));
    }

    #[test]
    fn confusion_examples() {
        let y = [0, 1, 2, 2, 1];
        let perfect = confusion_matrix(&y, &y, 3).unwrap();
        for (i, row) in perfect.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c > 0, i == j);
            }
        }
        let zeros = confusion_matrix(&[0; 5], &y, 3).unwrap();
        assert!(zeros.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert_eq!(zeros.iter().map(|r| r[0]).sum::<u64>(), 5);
        assert!(matches!(confusion_matrix(&[3], &[0], 3), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
        let l: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
        let m = confusion_matrix(&p, &l, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let tally = p.iter().zip(&l).filter(|&(&a, &b)| b == i && a == j).count() as u64;
                assert_eq!(m[i][j], tally);
            }
        }
        assert_eq!(m.iter().flatten().sum::<u64>(), 300);
    }

    /// A random ledger with `t` stages.
    fn random_ledger(rng: &mut ChaCha8Rng, t: usize) -> MetricsLedger {
        let zero: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let mut ledger = MetricsLedger::new(AccuracyMatrix::new(zero).unwrap());
        for s in 1..=t {
            if s > 1 {
                ledger.matrix.set_pre_task(s, rng.random()).unwrap();
            }
            let row: Vec<f64> = (0..s).map(|_| rng.random()).collect();
            let w = if s == 1 { 0.0 } else { rng.random() };
            let conf = StageConfusion { t: s, classes: vec![], counts: vec![] };
            ledger.record_stage(row, rng.random(), w, conf).unwrap();
        }
        ledger.set_nmi(rng.random(), rng.random()).unwrap();
        ledger
    }

    #[test]
    fn fuzzed_ledgers_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..1000 {
            let t = rng.random_range(1..=8);
            let ledger = random_ledger(&mut rng, t);
            for s in ledger.per_stage().unwrap() {
                assert!((0.0..=100.0).contains(&s.forgetting));
                assert!((0.0..=1.0).contains(&s.w));
            }
            assert!((0.0..=100.0).contains(&ledger.m1().unwrap()));
            assert!((0.0..=1.0).contains(&ledger.m2().unwrap()));
        }
    }

    #[test]
    fn composites_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.random_range(1..=6);
            let f: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..100.0)).collect();
            let w: Vec<f64> = (0..t).map(|_| rng.random()).collect();
            let acc = rng.random_range(0.0..100.0);
            let base = m1_from(acc, &f, &w).unwrap();
            assert!(m1_from((acc + 1.0).min(100.0), &f, &w).unwrap() >= base);
            for k in 0..t {
                let mut g = f.clone();
                g[k] = (g[k] + 5.0).min(100.0);
                assert!(m1_from(acc, &g, &w).unwrap() <= base);
            }
            let b: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fw: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (nv, na, a) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
            let base = m2_from(a, &b, &fw, nv, na).unwrap();
            for k in 0..t {
                let mut bb = b.clone();
                bb[k] += 0.1;
                assert!(m2_from(a, &bb, &fw, nv, na).unwrap() >= base);
                let mut ff = fw.clone();
                ff[k] += 0.1;
                assert!(m2_from(a, &b, &ff, nv, na).unwrap() >= base);
            }
            assert!(m2_from((a + 0.1).min(1.0), &b, &fw, nv, na).unwrap() >= base);
            assert!(m2_from(a, &b, &fw, (nv + 0.1).min(1.0), na).unwrap() >= base);
        }
    }
}
