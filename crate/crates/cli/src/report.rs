//! Tables, curves and plots computed from transcript records alone.

use boxworld_core::genesis::{InstanceSettings, InstructionVariant};
use boxworld_core::metrics::{aggregate_curves, stable_mean, CurvePoint, Transition, TransitionCounts};
use plotters::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::records::TrialRecord;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: InstanceSettings,
    /// Trials the protocol could run on.
    pub trials: usize,
    /// Trials whose scored query got a response.
    pub responded: usize,
    /// Instances the protocol could not be applied to.
    pub skipped: usize,
    pub step_em: f64,
    pub state_em: f64,
}

impl CellSummary {
    pub fn response_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.responded as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellCurves {
    pub cell: InstanceSettings,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<CellSummary>,
    pub curves: Vec<CellCurves>,
}

/// Groups by cell in first-seen order.
fn by_cell(records: &[TrialRecord]) -> Vec<(InstanceSettings, Vec<&TrialRecord>)> {
    let mut order: Vec<(InstanceSettings, Vec<&TrialRecord>)> = Vec::new();
    for r in records {
        match order.iter_mut().find(|(c, _)| *c == r.cell) {
            Some((_, v)) => v.push(r),
            None => order.push((r.cell, vec![r])),
        }
    }
    order
}

pub fn compute(records: &[TrialRecord]) -> Result<Report, Error> {
    if records.is_empty() {
        return Err(Error::EmptyInput(PathBuf::from("<transcripts>")));
    }
    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    for (cell, recs) in by_cell(records) {
        let trials: Vec<_> = recs.iter().filter_map(|r| r.trial.as_ref()).collect();
        // the table scores the test step: the last query of each trial
        let scores: Vec<_> = trials
            .iter()
            .filter_map(|t| t.queries.last().and_then(|q| q.score))
            .collect();
        let mut step: Vec<f64> = scores.iter().map(|s| s.step_em_value()).collect();
        let mut state: Vec<f64> = scores.iter().map(|s| s.state_em).collect();
        summaries.push(CellSummary {
            cell,
            trials: trials.len(),
            responded: scores.len(),
            skipped: recs.len() - trials.len(),
            step_em: stable_mean(&mut step),
            state_em: stable_mean(&mut state),
        });
        let observations: Vec<_> = trials.iter().map(|t| t.observations()).collect();
        curves.push(CellCurves {
            cell,
            points: aggregate_curves(&observations),
        });
    }
    Ok(Report { summaries, curves })
}

pub fn percent_pair(step_em: f64, state_em: f64) -> String {
    format!("{:.0}% / {:.0}%", step_em * 100.0, state_em * 100.0)
}

fn block_label(variant: InstructionVariant, distractors: bool) -> String {
    match (variant, distractors) {
        (v, false) => v.label().to_string(),
        (InstructionVariant::Normal, true) => "Actions w/ Distractor".to_string(),
        (v, true) => format!("{}, Actions w/ Distractor", v.label()),
    }
}

/// Rows of the grid: block headers carry the shot columns, setting rows carry
/// `Step-EM / State-EM` cells.
pub fn grid_rows(summaries: &[CellSummary]) -> Vec<Vec<String>> {
    let mut shots: Vec<usize> = summaries.iter().map(|s| s.cell.n_shots).collect();
    shots.sort_unstable();
    shots.dedup();

    let mut blocks: Vec<(InstructionVariant, bool)> = Vec::new();
    for s in summaries {
        let key = (s.cell.variant, s.cell.distractors);
        if !blocks.contains(&key) {
            blocks.push(key);
        }
    }
    let variant_rank = |v: InstructionVariant| InstructionVariant::ALL.iter().position(|&x| x == v);
    blocks.sort_by_key(|&(v, d)| (d, variant_rank(v)));

    let mut rows = Vec::new();
    for (variant, distract) in blocks {
        let mut header = vec![block_label(variant, distract)];
        header.extend(shots.iter().map(|n| format!("{n}-shot")));
        rows.push(header);
        let in_block: Vec<_> = summaries
            .iter()
            .filter(|s| s.cell.variant == variant && s.cell.distractors == distract)
            .collect();
        let mut modes = Vec::new();
        for s in &in_block {
            if !modes.contains(&s.cell.mode) {
                modes.push(s.cell.mode);
            }
        }
        for mode in modes {
            let mut row = vec![mode.label().to_string()];
            for &n in &shots {
                let cell = in_block.iter().find(|s| s.cell.mode == mode && s.cell.n_shots == n);
                row.push(match cell {
                    Some(s) if s.responded > 0 => percent_pair(s.step_em, s.state_em),
                    _ => String::new(),
                });
            }
            rows.push(row);
        }
    }
    rows
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Error> {
    csv::Writer::from_path(path).map_err(|e| Error::Report(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Report(format!("{}: {e}", path.display()))
}

pub fn write_table(path: &Path, summaries: &[CellSummary]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    for row in grid_rows(summaries) {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, summaries: &[CellSummary]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "cell",
        "mode",
        "variant",
        "n_shots",
        "distractors",
        "trials",
        "responded",
        "skipped",
        "response_rate",
        "step_em",
        "state_em",
    ])
    .map_err(csv_err(path))?;
    for s in summaries {
        w.write_record([
            s.cell.cell_tag(),
            s.cell.mode.tag().to_string(),
            s.cell.variant.tag().to_string(),
            s.cell.n_shots.to_string(),
            s.cell.distractors.to_string(),
            s.trials.to_string(),
            s.responded.to_string(),
            s.skipped.to_string(),
            format!("{:.6}", s.response_rate()),
            format!("{:.6}", s.step_em),
            format!("{:.6}", s.state_em),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_curves(path: &Path, curves: &[CellCurves]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "cell",
        "step",
        "demo_window",
        "scored",
        "failed",
        "response_rate",
        "step_em",
        "state_em",
    ])
    .map_err(csv_err(path))?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.cell.cell_tag(),
                p.step.to_string(),
                c.cell.n_shots.to_string(),
                p.scored.to_string(),
                p.failed.to_string(),
                format!("{:.6}", p.response_rate()),
                format!("{:.6}", p.mean_step_em),
                format!("{:.6}", p.mean_state_em),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_transitions(path: &Path, curves: &[CellCurves]) -> Result<(), Error> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["cell".to_string(), "step".to_string()];
    header.extend(Transition::ALL.iter().map(|t| t.code().to_string()));
    w.write_record(&header).map_err(csv_err(path))?;
    for c in curves {
        for p in &c.points {
            if p.transitions.total() == 0 {
                continue;
            }
            let mut row = vec![c.cell.cell_tag(), p.step.to_string()];
            row.extend(Transition::ALL.iter().map(|&t| p.transitions.get(t).to_string()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Report(format!("plot: {e}"))
}

/// State-EM and Step-EM per step, one line per cell, with demo-window markers.
pub fn plot_curves(path: &Path, curves: &[CellCurves]) -> Result<(), Error> {
    let max_step = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.step))
        .max()
        .unwrap_or(1)
        .max(1);
    let root = SVGBackend::new(path, (960, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 1));
    let mut windows: Vec<usize> = curves.iter().map(|c| c.cell.n_shots).collect();
    windows.sort_unstable();
    windows.dedup();

    for (area, (title, pick)) in panels.iter().zip([
        ("State-EM", (|p: &CurvePoint| p.mean_state_em) as fn(&CurvePoint) -> f64),
        ("Step-EM", |p: &CurvePoint| p.mean_step_em),
    ]) {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(32)
            .y_label_area_size(48)
            .build_cartesian_2d(0.5f64..max_step as f64 + 0.5, 0f64..1.05)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("step")
            .y_desc(title)
            .disable_x_mesh()
            .draw()
            .map_err(plot_err)?;
        for &w in &windows {
            let x = w as f64 + 0.5;
            chart
                .draw_series(LineSeries::new(
                    [(x, 0.0), (x, 1.05)],
                    RGBColor(128, 0, 160).stroke_width(2),
                ))
                .map_err(plot_err)?;
        }
        for (i, c) in curves.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let pts: Vec<(f64, f64)> = c
                .points
                .iter()
                .filter(|p| p.scored > 0)
                .map(|p| (p.step as f64, pick(p)))
                .collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(plot_err)?
                .label(c.cell.cell_tag())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .label_font(("sans-serif", 11))
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Transition category counts per step, summed over cells.
pub fn plot_transitions(path: &Path, curves: &[CellCurves]) -> Result<(), Error> {
    let mut per_step: BTreeMap<usize, TransitionCounts> = BTreeMap::new();
    for c in curves {
        for p in &c.points {
            per_step.entry(p.step).or_default().merge(&p.transitions);
        }
    }
    let max_step = per_step.keys().copied().max().unwrap_or(1).max(1);
    let categories: Vec<Transition> = Transition::ALL
        .into_iter()
        .filter(|&t| t != Transition::Unresolved)
        .collect();
    let max_fraction = 1.0;

    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("State transitions (fraction of resolved states)", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0.5f64..max_step as f64 + 0.5, 0f64..max_fraction)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("fraction")
        .disable_x_mesh()
        .draw()
        .map_err(plot_err)?;
    for (i, &t) in categories.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = per_step
            .iter()
            .filter(|(_, c)| c.resolved() > 0)
            .map(|(&s, c)| (s as f64, c.get(t) as f64 / c.resolved() as f64))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(t.code())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use boxworld_core::genesis::LexiconMode;

    fn summary(mode: LexiconMode, variant: InstructionVariant, n: usize, step: f64, state: f64) -> CellSummary {
        CellSummary {
            cell: InstanceSettings::new(mode, variant, n),
            trials: 50,
            responded: 50,
            skipped: 0,
            step_em: step,
            state_em: state,
        }
    }

    #[test]
    fn grid_layout() {
        let mut s = Vec::new();
        for v in [InstructionVariant::CounterOutputFormat, InstructionVariant::Normal] {
            for m in [LexiconMode::NATURAL, LexiconMode::SYNTHETIC] {
                for n in [5, 2] {
                    s.push(summary(m, v, n, 0.22, 0.92));
                }
            }
        }
        let rows = grid_rows(&s);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0], ["Normal Instruction", "2-shot", "5-shot"]);
        assert_eq!(rows[1], ["NL Functor + NL Argument", "22% / 92%", "22% / 92%"]);
        assert_eq!(rows[2][0], "SL Functor + SL Argument");
        assert_eq!(rows[3][0], "Counter-Intuitive Instruction (Truth Values Switching)");
    }

    #[test]
    fn percent_format() {
        assert_eq!(percent_pair(1.0, 1.0), "100% / 100%");
        assert_eq!(percent_pair(0.0, 0.9), "0% / 90%");
    }
}
