use std::collections::BTreeSet;

use anyhow::{bail, Context};
use serde::Serialize;
use tastetrace::calendar::{Month, Week};
use tastetrace::econ::{standardize, DidObservation, DidPanel, Panel, PanelObservation};
use tastetrace::table::Table;

use crate::config::{DidConfig, ModelConfig};

/// Integer period from a `YYYY-MM` month, `YYYY-Www` week or plain integer.
pub fn parse_period(s: &str) -> anyhow::Result<i64> {
    if let Ok(m) = s.parse::<Month>() {
        return Ok(i64::from(m.0));
    }
    if let Ok(w) = s.parse::<Week>() {
        return Ok(w.0);
    }
    s.parse::<i64>().with_context(|| format!("unrecognised period `{s}`"))
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SampleReport {
    pub rows_read: usize,
    pub incomplete_rows: usize,
    pub short_unit_rows: usize,
    pub rows_used: usize,
}

fn ln1p_all(values: &mut [f64], name: &str) -> anyhow::Result<()> {
    for v in values.iter_mut() {
        if *v <= -1.0 {
            bail!("`{name}`: ln(1 + {v}) undefined");
        }
        *v = v.ln_1p();
    }
    Ok(())
}

/// Listwise-complete estimation panel for `model`, transformed as
/// configured.
pub fn model_panel(table: &Table, model: &ModelConfig) -> anyhow::Result<(Panel, SampleReport)> {
    let vars = model.base_variables()?;
    let unit = table.column(&model.unit_column)?;
    let period = table.column(&model.period_column)?;
    let outcome = table.column(&model.outcome)?;
    let cols: Vec<usize> = vars.iter().map(|v| table.column(v)).collect::<Result<_, _>>()?;
    let mut panel = Panel::new(&model.outcome, vars.iter().cloned());
    let mut report = SampleReport {
        rows_read: table.rows.len(),
        ..SampleReport::default()
    };
    'rows: for (r, row) in table.rows.iter().enumerate() {
        let Some(y) = table.number(r, outcome)? else {
            report.incomplete_rows += 1;
            continue;
        };
        let mut xs = Vec::with_capacity(cols.len());
        for &c in &cols {
            match table.number(r, c)? {
                Some(x) => xs.push(x),
                None => {
                    report.incomplete_rows += 1;
                    continue 'rows;
                }
            }
        }
        panel.push(PanelObservation {
            unit_id: row[unit].clone(),
            period: parse_period(&row[period])?,
            outcome: y,
            regressors: xs,
            cluster_id: None,
        })?;
    }
    if model.unit_effects {
        report.short_unit_rows = panel.drop_short_units(2);
    }
    report.rows_used = panel.len();
    let mut all = vec![model.outcome.clone()];
    all.extend(vars.iter().cloned());
    for name in &model.log_transform {
        if all.contains(name) {
            let mut v = panel.variable(name)?.to_vec();
            ln1p_all(&mut v, name)?;
            set_variable(&mut panel, name, v);
        }
    }
    let targets = model.standardize.clone().unwrap_or(all);
    panel.standardize(&targets, &[])?;
    Ok((panel, report))
}

fn set_variable(panel: &mut Panel, name: &str, values: Vec<f64>) {
    if name == panel.outcome_name {
        panel.outcome = values;
    } else if let Some((_, col)) = panel.variables.iter_mut().find(|(n, _)| n == name) {
        *col = values;
    }
}

/// Weekly treatment panel from a user-week table.
pub fn did_panel(table: &Table, config: &DidConfig) -> anyhow::Result<(DidPanel, SampleReport)> {
    let treatment: Week = config.treatment_week.parse()?;
    let unit = table.column(&config.unit_column)?;
    let period = table.column(&config.period_column)?;
    let country = table.column(&config.country_column)?;
    let outcome = table.column(&config.outcome)?;
    let controls: Vec<usize> = config
        .controls
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<_, _>>()?;
    let mut report = SampleReport {
        rows_read: table.rows.len(),
        ..SampleReport::default()
    };
    let lo = treatment.0 - config.window_weeks;
    let hi = treatment.0 + config.window_weeks;
    let mut units = Vec::new();
    let mut weeks = Vec::new();
    let mut treated = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); controls.len() + 1];
    'rows: for (r, row) in table.rows.iter().enumerate() {
        let c = row[country].as_str();
        let is_treated = config.treated_countries.iter().any(|t| t == c);
        let is_control = if config.control_countries.is_empty() {
            !c.is_empty() && !is_treated
        } else {
            config.control_countries.iter().any(|t| t == c)
        };
        if !is_treated && !is_control {
            continue;
        }
        let w: Week = row[period].parse()?;
        if w.0 < lo || w.0 >= hi {
            continue;
        }
        let mut values = Vec::with_capacity(columns.len());
        for &col in std::iter::once(&outcome).chain(&controls) {
            match table.number(r, col)? {
                Some(v) => values.push(v),
                None => {
                    report.incomplete_rows += 1;
                    continue 'rows;
                }
            }
        }
        units.push(row[unit].clone());
        weeks.push(w.0);
        treated.push(is_treated);
        for (col, v) in columns.iter_mut().zip(values) {
            col.push(v);
        }
    }
    if units.is_empty() {
        bail!("no complete rows for the treated or control countries");
    }
    let names: Vec<String> = std::iter::once(&config.outcome).chain(&config.controls).cloned().collect();
    for (col, name) in columns.iter_mut().zip(&names) {
        if config.log_transform.contains(name) {
            ln1p_all(col, name)?;
        }
        if config.standardize {
            *col = standardize(col, false, name)?;
        }
    }
    let observations = (0..units.len())
        .map(|i| DidObservation {
            unit_id: units[i].clone(),
            period: weeks[i],
            outcome: columns[0][i],
            treated: treated[i],
            controls: columns[1..].iter().map(|c| c[i]).collect(),
        })
        .collect::<Vec<_>>();
    report.rows_used = observations.len();
    let distinct: BTreeSet<&String> = units.iter().collect();
    log::info!(
        "treatment panel: {} rows, {} units, weeks {}..{}",
        observations.len(),
        distinct.len(),
        Week(lo),
        Week(hi - 1)
    );
    Ok((
        DidPanel {
            control_names: config.controls.clone(),
            observations,
            treatment_period: treatment.0,
        },
        report,
    ))
}
