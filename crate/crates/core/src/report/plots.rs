//! Long-format series files for external plotting.

use std::str::FromStr;

use crate::metrics::MetricRow;

use super::ReportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    TauHr,
    ETot,
    Q,
    TokRate,
    Per1k,
    QualityEff,
    SqScore,
}

impl Figure {
    pub const ALL: [Figure; 7] = [
        Figure::TauHr,
        Figure::ETot,
        Figure::Q,
        Figure::TokRate,
        Figure::Per1k,
        Figure::QualityEff,
        Figure::SqScore,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Figure::TauHr => "tau_hr",
            Figure::ETot => "E_tot",
            Figure::Q => "Q",
            Figure::TokRate => "TokRate",
            Figure::Per1k => "per1k",
            Figure::QualityEff => "quality_eff",
            Figure::SqScore => "sqscore",
        }
    }
}

impl FromStr for Figure {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let keys: Vec<_> = Figure::ALL.iter().map(|f| f.key()).collect();
                ReportError::UnknownFigure(s.to_string(), keys.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFile {
    /// File name relative to the plots directory.
    pub name: String,
    pub content: String,
}

type Getter = fn(&MetricRow) -> Option<f64>;

fn series(name: &str, metric: &str, rows: &[&MetricRow], get: Getter) -> PlotFile {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "strategy", metric]).expect("in-memory write");
    for r in rows {
        let v = get(r).map(|v| format!("{v:.16e}")).unwrap_or_default();
        w.write_record([r.model.as_str(), r.strategy.display_name(), &v])
            .expect("in-memory write");
    }
    PlotFile {
        name: format!("{name}.csv"),
        content: String::from_utf8(w.into_inner().expect("flush")).expect("utf8"),
    }
}

/// One or more files with model, strategy and metric columns; models and
/// strategies appear in summary order.
pub fn emit_plot_data(rows: &[MetricRow], figure: Figure) -> Vec<PlotFile> {
    let mut rows: Vec<&MetricRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.strategy.order().cmp(&b.strategy.order())));
    match figure {
        Figure::TauHr => vec![series("tau_hr", "tau_hr", &rows, |r| Some(r.tau_hr))],
        Figure::ETot => vec![series("E_tot", "E_tot", &rows, |r| Some(r.e_tot))],
        Figure::Q => vec![series("Q", "Q", &rows, |r| r.q)],
        Figure::TokRate => vec![series("TokRate", "TokRate", &rows, |r| Some(r.tok_rate))],
        Figure::Per1k => vec![
            series("per1k_time", "SecPer1KTok", &rows, |r| Some(r.sec_per_1k_tok)),
            series("per1k_carbon", "CO2Per1KTok", &rows, |r| Some(r.co2_per_1k_tok)),
            series("per1k_energy", "EPer1KTok", &rows, |r| Some(r.e_per_1k_tok)),
        ],
        Figure::QualityEff => vec![
            series("quality_eff_per1k", "QPer1KTok", &rows, |r| r.q_per_1k_tok),
            series("quality_eff_per_kwh", "QPerkWh", &rows, |r| r.q_per_kwh),
            series("quality_eff_per_co2", "QPerCO2", &rows, |r| r.q_per_co2),
        ],
        Figure::SqScore => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["model", "strategy", "alpha", "sq_normalized", "sq_literal"])
                .expect("in-memory write");
            let f = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
            for r in &rows {
                for e in &r.sq {
                    w.write_record([
                        r.model.clone(),
                        r.strategy.display_name().to_string(),
                        format!("{}", e.alpha),
                        f(e.normalized),
                        f(e.literal),
                    ])
                    .expect("in-memory write");
                }
            }
            vec![PlotFile {
                name: "sqscore.csv".into(),
                content: String::from_utf8(w.into_inner().expect("flush")).expect("utf8"),
            }]
        }
    }
}
