//! Fine-grained evaluation indicators: per-type and summed TP/TN/AC, plus
//! trial averaging.
//!
//! TP asks whether every performed operation was flagged (any nonzero
//! level counts, the exact level is ignored); TN whether every absent
//! operation was cleared; AC whether the prediction matches the annotation
//! exactly. Each indicator is also computed per type, and zero-denominator
//! cells are reported as undefined rather than coerced to 0.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Annotation, RetouchType};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("aggregate requires a nonempty record list")]
    EmptyRecords,
    #[error("trial averaging requires exactly 5 reports, got {0}")]
    WrongTrialCount(usize),
    #[error("defined-cells mismatch across trials in {0}")]
    DefinednessMismatch(String),
}

/// A prediction paired with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: u32,
    pub truth: Annotation,
    pub pred: Annotation,
}

/// JSON-lines form of a prediction record: class indices in canonical type
/// order (Smooth, EyeEnlarge, FaceLift, Whiten).
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: u32,
    pub pred: [u8; 4],
    pub truth: [u8; 4],
}

impl PredictionLine {
    pub fn into_record(self) -> Result<PredictionRecord, crate::labels::LabelError> {
        Ok(PredictionRecord {
            id: self.id,
            truth: Annotation::from_classes(self.truth)?,
            pred: Annotation::from_classes(self.pred)?,
        })
    }

    pub fn from_record(r: &PredictionRecord) -> Self {
        PredictionLine {
            id: r.id,
            pred: r.pred.classes(),
            truth: r.truth.classes(),
        }
    }
}

/// A rational indicator value in [0, 1], or undefined when its denominator
/// is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub num: u64,
    pub den: u64,
}

impl Cell {
    pub const UNDEFINED: Cell = Cell { num: 0, den: 0 };

    pub fn counts(num: u64, den: u64) -> Cell {
        debug_assert!(num <= den || den == 0);
        Cell { num, den }
    }

    pub fn is_defined(&self) -> bool {
        self.den != 0
    }

    pub fn ratio(&self) -> Option<Ratio<u64>> {
        self.is_defined().then(|| Ratio::new(self.num, self.den))
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.is_defined().then(|| self.num as f64 / self.den as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorBlock {
    pub tp: Cell,
    pub tn: Cell,
    pub ac: Cell,
}

/// Per-type blocks in canonical order plus the summed block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_type: [IndicatorBlock; 4],
    pub sum: IndicatorBlock,
}

impl MetricsReport {
    pub fn block(&self, t: RetouchType) -> &IndicatorBlock {
        &self.per_type[t.index()]
    }

    fn cells(&self) -> [(&'static str, Cell); 15] {
        let mut out = [("", Cell::UNDEFINED); 15];
        let names = ["smooth", "eye_enlarge", "face_lift", "whiten", "sum"];
        for (bi, block) in self
            .per_type
            .iter()
            .chain(std::iter::once(&self.sum))
            .enumerate()
        {
            out[bi * 3] = (names[bi], block.tp);
            out[bi * 3 + 1] = (names[bi], block.tn);
            out[bi * 3 + 2] = (names[bi], block.ac);
        }
        out
    }
}

/// Per-image indicator flags. TP is undefined when no operation is on,
/// TN when none is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFlags {
    pub tp: Option<bool>,
    pub tn: Option<bool>,
    pub ac: bool,
}

pub fn image_flags(truth: &Annotation, pred: &Annotation) -> ImageFlags {
    let on: Vec<RetouchType> = RetouchType::ALL
        .into_iter()
        .filter(|t| truth.level(*t).is_on())
        .collect();
    let off: Vec<RetouchType> = RetouchType::ALL
        .into_iter()
        .filter(|t| !truth.level(*t).is_on())
        .collect();
    let tp = (!on.is_empty()).then(|| on.iter().all(|t| pred.level(*t).is_on()));
    let tn = (!off.is_empty()).then(|| off.iter().all(|t| !pred.level(*t).is_on()));
    let ac = RetouchType::ALL
        .into_iter()
        .all(|t| pred.level(t) == truth.level(t));
    ImageFlags { tp, tn, ac }
}

/// Aggregate predictions into the full indicator report.
pub fn aggregate(records: &[PredictionRecord]) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let total = records.len() as u64;
    let mut per_type = [IndicatorBlock {
        tp: Cell::UNDEFINED,
        tn: Cell::UNDEFINED,
        ac: Cell::UNDEFINED,
    }; 4];
    for t in RetouchType::ALL {
        let mut tp = (0u64, 0u64);
        let mut tn = (0u64, 0u64);
        let mut ac_num = 0u64;
        for r in records {
            let y = r.truth.level(t);
            let p = r.pred.level(t);
            if y.is_on() {
                tp.1 += 1;
                if p.is_on() {
                    tp.0 += 1;
                }
            } else {
                tn.1 += 1;
                if !p.is_on() {
                    tn.0 += 1;
                }
            }
            if p == y {
                ac_num += 1;
            }
        }
        per_type[t.index()] = IndicatorBlock {
            tp: Cell::counts(tp.0, tp.1),
            tn: Cell::counts(tn.0, tn.1),
            ac: Cell::counts(ac_num, total),
        };
    }
    let mut tp = (0u64, 0u64);
    let mut tn = (0u64, 0u64);
    let mut ac_num = 0u64;
    for r in records {
        let flags = image_flags(&r.truth, &r.pred);
        if let Some(v) = flags.tp {
            tp.1 += 1;
            if v {
                tp.0 += 1;
            }
        }
        if let Some(v) = flags.tn {
            tn.1 += 1;
            if v {
                tn.0 += 1;
            }
        }
        if flags.ac {
            ac_num += 1;
        }
    }
    Ok(MetricsReport {
        per_type,
        sum: IndicatorBlock {
            tp: Cell::counts(tp.0, tp.1),
            tn: Cell::counts(tn.0, tn.1),
            ac: Cell::counts(ac_num, total),
        },
    })
}

fn average_cell(cells: &[Cell], what: &str) -> Result<Cell, MetricsError> {
    let defined = cells[0].is_defined();
    if cells.iter().any(|c| c.is_defined() != defined) {
        return Err(MetricsError::DefinednessMismatch(what.to_string()));
    }
    if !defined {
        return Ok(Cell::UNDEFINED);
    }
    let sum: Ratio<u64> = cells.iter().map(|c| c.ratio().unwrap()).sum();
    let mean = sum / Ratio::from_integer(cells.len() as u64);
    Ok(Cell {
        num: *mean.numer(),
        den: *mean.denom(),
    })
}

/// Arithmetic mean of reports cell by cell; undefined cells must be
/// undefined in every trial and stay undefined.
pub fn average_reports(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let pick =
        |f: &dyn Fn(&MetricsReport) -> Cell| -> Vec<Cell> { reports.iter().map(f).collect() };
    let mut per_type = [IndicatorBlock {
        tp: Cell::UNDEFINED,
        tn: Cell::UNDEFINED,
        ac: Cell::UNDEFINED,
    }; 4];
    for t in RetouchType::ALL {
        let i = t.index();
        per_type[i] = IndicatorBlock {
            tp: average_cell(&pick(&|r| r.per_type[i].tp), &format!("tp[{}]", t.name()))?,
            tn: average_cell(&pick(&|r| r.per_type[i].tn), &format!("tn[{}]", t.name()))?,
            ac: average_cell(&pick(&|r| r.per_type[i].ac), &format!("ac[{}]", t.name()))?,
        };
    }
    let sum = IndicatorBlock {
        tp: average_cell(&pick(&|r| r.sum.tp), "tp[sum]")?,
        tn: average_cell(&pick(&|r| r.sum.tn), "tn[sum]")?,
        ac: average_cell(&pick(&|r| r.sum.ac), "ac[sum]")?,
    };
    Ok(MetricsReport { per_type, sum })
}

/// Five-trial averaging; exactly five reports.
pub fn average_trials(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    if reports.len() != 5 {
        return Err(MetricsError::WrongTrialCount(reports.len()));
    }
    average_reports(reports)
}

/// All defined values lie in [0, 1]; used by tests and validation.
pub fn report_in_unit_interval(report: &MetricsReport) -> bool {
    report
        .cells()
        .iter()
        .all(|(_, c)| !c.is_defined() || c.num <= c.den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn ann(classes: [u8; 4]) -> Annotation {
        Annotation::from_classes(classes).unwrap()
    }

    fn rec(truth: [u8; 4], pred: [u8; 4]) -> PredictionRecord {
        PredictionRecord {
            id: 0,
            truth: ann(truth),
            pred: ann(pred),
        }
    }

    #[test]
    fn flags_on_the_worked_annotation() {
        let f = image_flags(&ann([0, 2, 0, 3]), &ann([0, 1, 0, 3]));
        assert_eq!(f.tp, Some(true));
        assert_eq!(f.tn, Some(true));
        assert!(!f.ac);
    }

    #[test]
    fn exact_match_sets_all_defined_flags() {
        for classes in [[0, 2, 0, 3], [1, 1, 1, 1], [0, 0, 0, 0]] {
            let f = image_flags(&ann(classes), &ann(classes));
            assert!(f.ac);
            assert!(f.tp.unwrap_or(true));
            assert!(f.tn.unwrap_or(true));
        }
    }

    #[test]
    fn denominator_cases() {
        let f = image_flags(&ann([0, 0, 0, 0]), &ann([1, 0, 0, 0]));
        assert_eq!(f.tp, None);
        assert_eq!(f.tn, Some(false));
        let g = image_flags(&ann([1, 2, 3, 1]), &ann([0, 0, 0, 0]));
        assert_eq!(g.tp, Some(false));
        assert_eq!(g.tn, None);
    }

    #[test]
    fn hand_derived_three_record_example() {
        let records = vec![
            rec([0, 2, 0, 3], [0, 1, 0, 3]),
            rec([1, 0, 0, 0], [0, 0, 0, 0]),
            rec([0, 0, 0, 0], [0, 0, 1, 0]),
        ];
        let r = aggregate(&records).unwrap();
        assert_eq!(r.sum.tp, Cell::counts(1, 2));
        assert_eq!(r.sum.tn, Cell::counts(2, 3));
        assert_eq!(r.sum.ac, Cell::counts(0, 3));
        assert_eq!(r.block(RetouchType::Smooth).tp, Cell::counts(0, 1));
        assert_eq!(r.block(RetouchType::EyeEnlarge).tp, Cell::counts(1, 1));
        assert_eq!(r.block(RetouchType::FaceLift).tn, Cell::counts(2, 3));
        assert_eq!(r.block(RetouchType::Whiten).ac, Cell::counts(3, 3));
    }

    #[test]
    fn perfect_predictions_give_ones() {
        let mut rng = RngStream::new(4, "perfect");
        let records: Vec<PredictionRecord> = (0..64)
            .map(|_| {
                let c = [
                    rng.next_below(4) as u8,
                    rng.next_below(4) as u8,
                    rng.next_below(4) as u8,
                    rng.next_below(4) as u8,
                ];
                rec(c, c)
            })
            .collect();
        let r = aggregate(&records).unwrap();
        for (_, cell) in r.cells() {
            if cell.is_defined() {
                assert_eq!(cell.num, cell.den);
            }
        }
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut rng = RngStream::new(5, "perm");
        let mut records: Vec<PredictionRecord> = (0..50)
            .map(|_| {
                rec(
                    [
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                    ],
                    [
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                        rng.next_below(4) as u8,
                    ],
                )
            })
            .collect();
        let before = aggregate(&records).unwrap();
        rng.shuffle(&mut records);
        assert_eq!(aggregate(&records).unwrap(), before);
    }

    #[test]
    fn ac_implies_defined_tp_and_tn() {
        let mut rng = RngStream::new(6, "imply");
        for _ in 0..2000 {
            let t = [
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
            ];
            let p = [
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
                rng.next_below(4) as u8,
            ];
            let f = image_flags(&ann(t), &ann(p));
            if f.ac {
                assert!(f.tp.unwrap_or(true));
                assert!(f.tn.unwrap_or(true));
            }
        }
    }

    #[test]
    fn average_trials_idempotent_and_mean() {
        let records = vec![rec([1, 0, 0, 0], [1, 0, 0, 0])];
        let r = aggregate(&records).unwrap();
        let avg = average_trials(&vec![r.clone(); 5]).unwrap();
        assert_eq!(avg, r);

        // TP trials {0.2, 0.3, 0.4, 0.5, 0.6} -> 0.4
        let cells: Vec<Cell> = [(1u64, 5u64), (3, 10), (2, 5), (1, 2), (3, 5)]
            .iter()
            .map(|&(n, d)| Cell::counts(n, d))
            .collect();
        let mean = average_cell(&cells, "tp").unwrap();
        assert_eq!(mean.ratio().unwrap(), Ratio::new(2u64, 5u64));
    }

    #[test]
    fn undefined_everywhere_stays_undefined() {
        let cells = vec![Cell::UNDEFINED; 5];
        assert_eq!(average_cell(&cells, "x").unwrap(), Cell::UNDEFINED);
    }

    #[test]
    fn mismatched_definedness_is_an_error() {
        let cells = vec![
            Cell::UNDEFINED,
            Cell::counts(1, 2),
            Cell::UNDEFINED,
            Cell::UNDEFINED,
            Cell::UNDEFINED,
        ];
        assert!(average_cell(&cells, "x").is_err());
    }

    #[test]
    fn wrong_trial_count_is_rejected() {
        let r = aggregate(&[rec([1, 0, 0, 0], [1, 0, 0, 0])]).unwrap();
        assert!(average_trials(&vec![r; 4]).is_err());
    }
}
