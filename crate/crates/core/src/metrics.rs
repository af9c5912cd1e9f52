//! Mel-cepstral distortion, MCD reduction, learning-curve smoothing and the
//! staircase stage table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{infer, ParameterSet};
use crate::strategies::{ExperimentResult, StrategyKind};

/// `10 / ln 10`.
pub const DB_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Frame-averaged MCD between two time-aligned row-major frame matrices:
/// `(10 / ln 10) * mean_t sqrt(2 * sum_d (a_td - b_td)^2)`.
pub fn mcd(reference: &[f64], hypothesis: &[f64], frame_dim: usize) -> Result<f64> {
    if frame_dim == 0 || reference.len() != hypothesis.len() || !reference.len().is_multiple_of(frame_dim) {
        return Err(Error::Usage(format!(
            "MCD shape mismatch: {} vs {} values with frame_dim {frame_dim}",
            reference.len(),
            hypothesis.len()
        )));
    }
    let frames = reference.len() / frame_dim;
    if frames == 0 {
        return Err(Error::Usage("MCD of zero frames".into()));
    }
    let total: f64 = reference
        .chunks_exact(frame_dim)
        .zip(hypothesis.chunks_exact(frame_dim))
        .map(|(r, h)| {
            let sq: f64 = r.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
            (2.0 * sq).sqrt()
        })
        .sum();
    Ok(DB_SCALE * total / frames as f64)
}

/// MCD reduction in percent relative to the fine-tune baseline.
pub fn mcdr(mcd_finetune: f64, mcd_method: f64) -> Result<f64> {
    if !(mcd_finetune > 0.0) {
        return Err(Error::Usage(format!("MCDR baseline must be positive, got {mcd_finetune}")));
    }
    Ok(100.0 * (mcd_finetune - mcd_method) / mcd_finetune)
}

/// Exponential moving average `s_t = f s_{t-1} + (1 - f) x_t`, `s_0 = x_0`.
pub fn smooth_curve(series: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&factor) {
        return Err(Error::Usage(format!("smoothing factor {factor} outside [0, 1)")));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut prev = None;
    for &x in series {
        let s = match prev {
            None => x,
            Some(p) => factor * p + (1.0 - factor) * x,
        };
        out.push(s);
        prev = Some(s);
    }
    Ok(out)
}

/// MCD of every language seen at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdReport {
    pub stage_language: u32,
    /// In task order.
    pub per_language: Vec<(u32, f64)>,
    pub average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcdr_vs_finetune: Option<f64>,
}

impl McdReport {
    pub fn from_cells(stage_language: u32, per_language: Vec<(u32, f64)>) -> Self {
        let average = per_language.iter().map(|(_, v)| v).sum::<f64>() / per_language.len() as f64;
        Self {
            stage_language,
            per_language,
            average,
            mcdr_vs_finetune: None,
        }
    }

    pub fn language(&self, id: u32) -> Option<f64> {
        self.per_language.iter().find(|(l, _)| *l == id).map(|(_, v)| *v)
    }
}

/// Mean MCD of `infer` against targets over each task's `split`, in the order given.
pub fn stage_eval(params: &ParameterSet, tasks: &[&TaskDataset], split: Split) -> Result<McdReport> {
    stage_eval_with(Exec::default(), params, tasks, split)
}

pub fn stage_eval_with(exec: Exec, params: &ParameterSet, tasks: &[&TaskDataset], split: Split) -> Result<McdReport> {
    let Some(last) = tasks.last() else {
        return Err(Error::Usage("stage evaluation needs at least one task".into()));
    };
    let mut cells = Vec::with_capacity(tasks.len());
    for task in tasks {
        let samples = task.split(split);
        if samples.is_empty() {
            return Err(Error::Usage(format!("language {} has an empty {split:?} split", task.language_id)));
        }
        let scores = exec.map(samples, |s| {
            infer(params, s).and_then(|hyp| mcd(&s.frames, &hyp, s.frame_dim))
        });
        let mut sum = 0.0;
        for s in scores {
            sum += s?;
        }
        cells.push((task.language_id, sum / samples.len() as f64));
    }
    Ok(McdReport::from_cells(last.language_id, cells))
}

/// Per-language dev-MCD series across a whole run, for the curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub smoothing: f64,
    /// Global epoch (1-based, counting across stages) and raw value, per language.
    pub series: BTreeMap<u32, Vec<(usize, f64)>>,
}

impl LearningCurve {
    pub fn new(smoothing: f64) -> Self {
        Self {
            smoothing,
            series: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, language: u32, epoch: usize, value: f64) {
        self.series.entry(language).or_default().push((epoch, value));
    }

    /// `epoch,language,raw,smoothed` rows, grouped by language.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("epoch,language,raw,smoothed\n");
        for (lang, points) in &self.series {
            let raw: Vec<f64> = points.iter().map(|p| p.1).collect();
            let smoothed = smooth_curve(&raw, self.smoothing)?;
            for ((epoch, r), s) in points.iter().zip(smoothed) {
                writeln!(out, "{epoch},L{lang},{r:.6},{s:.6}").unwrap();
            }
        }
        Ok(out)
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Renders results as a staircase table: one row per method, one column group
/// per stage holding each seen language's MCD, the average and the MCDR against
/// the fine-tune row of the same seed. Rows are tagged `@s<seed>` when the
/// results span several seeds. The first stage has a single cell. MCDR is computed from
/// the printed (2-decimal) averages, so every MCDR cell can be recomputed from
/// the table itself.
pub fn render_table(results: &[ExperimentResult]) -> Result<String> {
    let Some(first) = results.first() else {
        return Err(Error::Usage("no results to render".into()));
    };
    let order = &first.task_order;
    if let Some(r) = results.iter().find(|r| &r.task_order != order) {
        return Err(Error::Usage(format!(
            "result for {} uses task order {:?}, expected {order:?}",
            r.strategy.name(),
            r.task_order
        )));
    }
    let stages = results.iter().map(|r| r.stages.len()).max().unwrap_or(0);
    let mut rows: Vec<&ExperimentResult> = results.iter().collect();
    rows.sort_by_key(|r| (r.seed, r.strategy.table_rank()));
    let multi_seed = rows.iter().any(|r| r.seed != rows[0].seed);

    let mut out = String::from("method");
    for k in 0..stages {
        for lang in &order[..=k] {
            write!(out, ",s{}_L{lang}", k + 1).unwrap();
        }
        if k > 0 {
            write!(out, ",s{0}_avg,s{0}_mcdr", k + 1).unwrap();
        }
    }
    out.push('\n');

    for &row in &rows {
        let baseline = rows
            .iter()
            .copied()
            .find(|r| r.strategy == StrategyKind::FineTune && r.seed == row.seed);
        out.push_str(row.strategy.name());
        if multi_seed {
            write!(out, "@s{}", row.seed).unwrap();
        }
        for k in 0..stages {
            let Some(report) = row.stages.get(k) else {
                let cells = k + 1 + if k > 0 { 2 } else { 0 };
                out.push_str(&",".repeat(cells));
                continue;
            };
            for lang in &order[..=k] {
                match report.language(*lang) {
                    Some(v) => write!(out, ",{v:.2}").unwrap(),
                    None => out.push(','),
                }
            }
            if k > 0 {
                write!(out, ",{:.2}", report.average).unwrap();
                let base = baseline
                    .filter(|_| row.strategy != StrategyKind::FineTune)
                    .and_then(|b| b.stages.get(k));
                match base {
                    Some(b) => {
                        let pct = mcdr(round2(b.average), round2(report.average))?;
                        write!(out, ",{pct:.2}%").unwrap();
                    }
                    None => out.push_str(",N/A"),
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Row label and its cells, as read back by [`parse_table`].
pub type TableRow = (String, Vec<Cell>);

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Value(f64),
    Percent(f64),
    NotApplicable,
    Empty,
}

/// Parses a table produced by [`render_table`] into `(header, rows)`.
pub fn parse_table(csv: &str) -> Result<(Vec<String>, Vec<TableRow>)> {
    let mut lines = csv.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Usage("empty table".into()))?
        .split(',')
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let method = fields.next().unwrap_or_default().to_owned();
        let cells = fields
            .map(|f| {
                if f.is_empty() {
                    Ok(Cell::Empty)
                } else if f == "N/A" {
                    Ok(Cell::NotApplicable)
                } else if let Some(p) = f.strip_suffix('%') {
                    p.parse().map(Cell::Percent)
                } else {
                    f.parse().map(Cell::Value)
                }
                .map_err(|_| Error::Usage(format!("row {}: bad cell {f:?}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.len() + 1 != header.len() {
            return Err(Error::Usage(format!("row {} has {} cells", n + 1, cells.len() + 1)));
        }
        rows.push((method, cells));
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_have_zero_mcd() {
        let a = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(mcd(&a, &a, 2).unwrap(), 0.0);
    }

    #[test]
    fn unit_difference_single_frame() {
        let got = mcd(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 3).unwrap();
        assert!((got - DB_SCALE * 2f64.sqrt()).abs() < 1e-12);
        assert!((got - 6.1418).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        assert!(mcd(&[1.0, 2.0], &[1.0], 1).is_err());
        assert!(mcd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn mcdr_table_cells() {
        assert!((mcdr(5.97, 3.79).unwrap() - 36.52).abs() < 0.005);
        assert!((mcdr(7.04, 4.02).unwrap() - 42.90).abs() < 0.005);
        assert_eq!(mcdr(4.2, 4.2).unwrap(), 0.0);
        assert!(mcdr(0.0, 1.0).is_err());
        assert!(mcdr(-1.0, 1.0).is_err());
    }

    #[test]
    fn smoothing() {
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(smooth_curve(&xs, 0.0).unwrap(), xs);
        assert_eq!(smooth_curve(&[2.0; 4], 0.5).unwrap(), vec![2.0; 4]);
        assert_eq!(smooth_curve(&[0.0, 1.0], 0.5).unwrap(), vec![0.0, 0.5]);
        assert!(smooth_curve(&xs, 1.0).is_err());
    }

    #[test]
    fn report_average_is_mean_of_cells() {
        let r = McdReport::from_cells(2, vec![(0, 7.60), (1, 7.55), (2, 9.66), (3, 3.35)]);
        assert!((r.average - (7.60 + 7.55 + 9.66 + 3.35) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_rows() {
        let mut c = LearningCurve::new(0.5);
        c.push(0, 1, 4.0);
        c.push(0, 2, 2.0);
        c.push(1, 2, 6.0);
        assert_eq!(
            c.to_csv().unwrap(),
            "epoch,language,raw,smoothed\n1,L0,4.000000,4.000000\n2,L0,2.000000,3.000000\n2,L1,6.000000,6.000000\n"
        );
    }
}
