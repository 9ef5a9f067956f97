use dmt_core::pseudo_label::ErrorReport;
use dmt_core::RunRecord;

/// Right-aligned fixed-width columns; the first column is left-aligned.
pub struct Table {
    header: Vec<&'static str>,
    widths: Vec<usize>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[(&'static str, usize)]) -> Self {
        Table {
            header: columns.iter().map(|c| c.0).collect(),
            widths: columns.iter().map(|c| c.1.max(c.0.len())).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    fn line(&self, cells: &[String]) -> String {
        let mut out = String::new();
        for (i, (cell, &w)) in cells.iter().zip(&self.widths).enumerate() {
            if i == 0 {
                out.push_str(&format!("{cell:<w$}"));
            } else {
                out.push_str(&format!("  {cell:>w$}"));
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let header: Vec<String> = self.header.iter().map(|h| h.to_string()).collect();
        let mut out = self.line(&header);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&self.line(row));
            out.push('\n');
        }
        out
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn records(records: &[RunRecord]) -> String {
    let mut t = Table::new(&[
        ("run", 10),
        ("seed", 4),
        ("iter", 4),
        ("model", 5),
        ("alpha", 5),
        ("selected", 8),
        ("acc/miou", 8),
        ("ema", 6),
        ("fine", 6),
        ("loss", 7),
        ("seconds", 7),
    ]);
    for r in records {
        let m = &r.metrics;
        t.push(vec![
            r.run.clone(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.model.clone(),
            m.alpha.map_or_else(|| "-".into(), |a| format!("{a:.2}")),
            m.selected.to_string(),
            opt(m.accuracy.or(m.mean_iou)),
            opt(m.ema_accuracy.or(m.ema_mean_iou)),
            opt(m.fine_grained),
            format!("{:.4}", m.final_loss),
            format!("{:.1}", r.timing.seconds),
        ]);
    }
    t.render()
}

pub fn error_report(label: &str, report: &ErrorReport) -> String {
    let mut t = Table::new(&[
        ("labels", 14),
        ("subset", 8),
        ("count", 7),
        ("errors", 7),
        ("rate", 7),
    ]);
    t.push(vec![
        label.to_string(),
        "all".into(),
        report.total.to_string(),
        report.errors.to_string(),
        opt(report.overall_error_rate),
    ]);
    for q in &report.quantiles {
        t.push(vec![
            label.to_string(),
            format!("top-{:.0}%", 100.0 * q.fraction),
            q.count.to_string(),
            q.errors.to_string(),
            opt(q.error_rate),
        ]);
    }
    t.render()
}
