use std::fmt::Write as _;
use std::str::FromStr;

use crate::metrics::{check_identities, MetricRow, SqEntry};
use crate::strategy::StrategyId;

use super::ReportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaryFormat {
    Table,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SqMode {
    Literal,
    Normalized,
    #[default]
    Both,
}

impl FromStr for SqMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(SqMode::Literal),
            "normalized" => Ok(SqMode::Normalized),
            "both" => Ok(SqMode::Both),
            other => Err(format!(
                "unknown SQ mode {other:?}; expected literal, normalized or both"
            )),
        }
    }
}

impl SqMode {
    fn literal(self) -> bool {
        matches!(self, SqMode::Literal | SqMode::Both)
    }

    fn normalized(self) -> bool {
        matches!(self, SqMode::Normalized | SqMode::Both)
    }
}

/// Facts about the measurements printed under the table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportContext {
    pub backends: Vec<String>,
    /// Total emissions over total energy.
    pub implied_intensity: Option<f64>,
    pub missing_coverage: usize,
    pub orphan_records: usize,
    pub corpus_wrapped: Option<bool>,
}

pub const SUMMARY_FIXED_COLUMNS: [&str; 18] = [
    "model",
    "strategy",
    "T",
    "tau",
    "CO2",
    "E_cpu",
    "E_gpu",
    "E_ram",
    "Q",
    "E_tot",
    "tau_hr",
    "TokRate",
    "SecPer1KTok",
    "CO2Per1KTok",
    "EPer1KTok",
    "QPer1KTok",
    "QPerkWh",
    "QPerCO2",
];

/// Fixed-point rendering with `sig` significant digits, keeping trailing
/// zeros (0.0010 rather than 0.001).
pub fn format_sig(x: f64, sig: i32) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{:.*}", (sig - 1).max(0) as usize, x);
    }
    let decimals = |v: f64| (sig - 1 - v.abs().log10().floor() as i32).max(0);
    let mut d = decimals(x);
    let rounded: f64 = format!("{x:.*}", d as usize).parse().expect("formatted float parses");
    // Rounding can carry into a new leading digit (0.00099996 -> 0.0010).
    if rounded != 0.0 {
        d = decimals(rounded);
    }
    format!("{x:.*}", d as usize)
}

fn full(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_full(x: Option<f64>) -> String {
    x.map(full).unwrap_or_default()
}

fn alpha_label(a: f64) -> String {
    let s = format!("{a}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Renders the per-pair summary. Rows are sorted by model then strategy
/// order, and every row is checked against the metric identities first.
pub fn emit_summary(
    rows: &[MetricRow],
    format: SummaryFormat,
    mode: SqMode,
    ctx: &ReportContext,
) -> Result<String, ReportError> {
    for r in rows {
        check_identities(r)?;
    }
    let mut rows: Vec<&MetricRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.model.cmp(&b.model).then(a.strategy.order().cmp(&b.strategy.order())));
    let alphas = rows
        .first()
        .map(|r| r.sq.iter().map(|e| e.alpha).collect::<Vec<_>>())
        .unwrap_or_default();
    Ok(match format {
        SummaryFormat::Csv => csv(&rows, &alphas),
        SummaryFormat::Table => table(&rows, &alphas, mode, ctx),
    })
}

fn csv(rows: &[&MetricRow], alphas: &[f64]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = SUMMARY_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    for a in alphas {
        header.push(format!("sq_normalized_a{}", alpha_label(*a)));
        header.push(format!("sq_literal_a{}", alpha_label(*a)));
    }
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let mut rec = vec![
            r.model.clone(),
            r.strategy.as_str().to_string(),
            r.t.to_string(),
            full(r.tau),
            full(r.co2),
            full(r.e_cpu),
            full(r.e_gpu),
            full(r.e_ram),
            opt_full(r.q),
            full(r.e_tot),
            full(r.tau_hr),
            full(r.tok_rate),
            full(r.sec_per_1k_tok),
            full(r.co2_per_1k_tok),
            full(r.e_per_1k_tok),
            opt_full(r.q_per_1k_tok),
            opt_full(r.q_per_kwh),
            opt_full(r.q_per_co2),
        ];
        for a in alphas {
            let e = r.sq_at(*a);
            rec.push(opt_full(e.and_then(|e| e.normalized)));
            rec.push(opt_full(e.and_then(|e| e.literal)));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

fn table(rows: &[&MetricRow], alphas: &[f64], mode: SqMode, ctx: &ReportContext) -> String {
    let mut header = vec![
        "Model".to_string(),
        "Strategy".into(),
        "Q".into(),
        "E_1K".into(),
        "C_1K".into(),
    ];
    for a in alphas {
        if mode.normalized() {
            header.push(format!("SQ(a={a})"));
        }
        if mode.literal() {
            header.push(format!("SQlit(a={a})"));
        }
    }
    let mut cells: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line = vec![
            r.model.clone(),
            r.strategy.display_name().to_string(),
            r.q.map_or("-".into(), |q| format!("{q:.2}")),
            format_sig(r.e_per_1k_tok, 2),
            format_sig(r.co2_per_1k_tok, 2),
        ];
        for a in alphas {
            let e = r.sq_at(*a).copied().unwrap_or(SqEntry {
                alpha: *a,
                literal: None,
                normalized: None,
            });
            if mode.normalized() {
                line.push(e.normalized.map_or("-".into(), |v| format!("{v:.2}")));
            }
            if mode.literal() {
                line.push(e.literal.map_or("-".into(), |v| format!("{v:.2e}")));
            }
        }
        cells.push(line);
    }
    let ncol = cells[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            if c < 2 {
                let _ = write!(line, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(line, "{cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (ncol - 1)));
            out.push('\n');
        }
    }
    out.push('\n');
    out.push_str(&footer(mode, ctx));
    out
}

fn footer(mode: SqMode, ctx: &ReportContext) -> String {
    let mut f = String::new();
    let backends = if ctx.backends.is_empty() {
        "unknown".to_string()
    } else {
        ctx.backends.join("; ")
    };
    let _ = writeln!(f, "meter backends: {backends}");
    match ctx.implied_intensity {
        Some(ci) => {
            let _ = writeln!(
                f,
                "carbon intensity: {ci:.4} kg CO2-eq/kWh (emissions / energy over all batches)"
            );
        }
        None => {
            let _ = writeln!(f, "carbon intensity: unknown (no energy recorded)");
        }
    }
    let _ = writeln!(f, "E_1K: kWh per 1000 tokens; C_1K: kg CO2-eq per 1000 tokens");
    let _ = writeln!(
        f,
        "Q: mean per-execution statement coverage / 100; unextractable or unparsable scripts count as 0; '-' marks missing coverage records"
    );
    if mode.normalized() {
        let _ = writeln!(
            f,
            "SQ (normalized): Q^a / (1 + c), c = CO2*E_tot*tau_hr divided by its mean over the model's strategies; bounded in (0, 1), comparable only within a model"
        );
    }
    if mode.literal() {
        let _ = writeln!(f, "SQlit (literal): a*Q / (CO2*E_tot*tau_hr) in raw units; not bounded");
    }
    let _ = writeln!(f, "energy is gross: no idle baseline is subtracted");
    if ctx.missing_coverage > 0 {
        let _ = writeln!(f, "executions without coverage records: {}", ctx.missing_coverage);
    }
    if ctx.orphan_records > 0 {
        let _ = writeln!(f, "coverage records matching no batch: {}", ctx.orphan_records);
    }
    if ctx.corpus_wrapped == Some(true) {
        let _ = writeln!(
            f,
            "corpus wrapped around: some tasks were executed more than once per pair"
        );
    }
    f
}

fn parse_opt(s: &str, line: usize, col: &str) -> Result<Option<f64>, ReportError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| ReportError::SummaryParse {
        line,
        reason: format!("{col}: {e}"),
    })
}

/// Reads a summary written by [`emit_summary`] in CSV format.
pub fn parse_summary_csv(text: &str) -> Result<Vec<MetricRow>, ReportError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| ReportError::SummaryParse {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(String::from)
        .collect();
    if header.len() < SUMMARY_FIXED_COLUMNS.len()
        || header[..SUMMARY_FIXED_COLUMNS.len()] != SUMMARY_FIXED_COLUMNS
        || !(header.len() - SUMMARY_FIXED_COLUMNS.len()).is_multiple_of(2)
    {
        return Err(ReportError::SummaryParse {
            line: 1,
            reason: "not a summary header".into(),
        });
    }
    let mut alphas = Vec::new();
    for pair in header[SUMMARY_FIXED_COLUMNS.len()..].chunks(2) {
        let a = pair[0]
            .strip_prefix("sq_normalized_a")
            .filter(|a| pair[1].strip_prefix("sq_literal_a") == Some(*a))
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| ReportError::SummaryParse {
                line: 1,
                reason: format!("bad SQ columns {pair:?}"),
            })?;
        alphas.push(a);
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| ReportError::SummaryParse {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(ReportError::SummaryParse {
                line,
                reason: format!("{} fields, expected {}", rec.len(), header.len()),
            });
        }
        let num = |c: usize| -> Result<f64, ReportError> {
            parse_opt(&rec[c], line, &header[c])?.ok_or_else(|| ReportError::SummaryParse {
                line,
                reason: format!("{} is empty", header[c]),
            })
        };
        let opt = |c: usize| parse_opt(&rec[c], line, &header[c]);
        let strategy: StrategyId = rec[1].parse().map_err(|e| ReportError::SummaryParse {
            line,
            reason: format!("{e}"),
        })?;
        let t = rec[2].parse().map_err(|e| ReportError::SummaryParse {
            line,
            reason: format!("T: {e}"),
        })?;
        let mut sq = Vec::new();
        for (k, a) in alphas.iter().enumerate() {
            let c = SUMMARY_FIXED_COLUMNS.len() + 2 * k;
            sq.push(SqEntry {
                alpha: *a,
                normalized: opt(c)?,
                literal: opt(c + 1)?,
            });
        }
        rows.push(MetricRow {
            model: rec[0].to_string(),
            strategy,
            t,
            tau: num(3)?,
            co2: num(4)?,
            e_cpu: num(5)?,
            e_gpu: num(6)?,
            e_ram: num(7)?,
            q: opt(8)?,
            e_tot: num(9)?,
            tau_hr: num(10)?,
            tok_rate: num(11)?,
            sec_per_1k_tok: num(12)?,
            co2_per_1k_tok: num(13)?,
            e_per_1k_tok: num(14)?,
            q_per_1k_tok: opt(15)?,
            q_per_kwh: opt(16)?,
            q_per_co2: opt(17)?,
            sq,
        });
    }
    Ok(rows)
}
