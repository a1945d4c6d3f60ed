//! The CSV report shared by every mode.
//!
//! Columns, in order: `mode, kind, name, n_sources, n_receivers, l_max, p,
//! nodes, units_per_node, value, unit, passed, detail`. `kind` is one of
//! `timing`, `count`, `metric` or `check`. `passed` is `true`/`false` on
//! check rows and empty elsewhere.

use std::io::Write;

pub const HEADER: [&str; 13] = [
    "mode",
    "kind",
    "name",
    "n_sources",
    "n_receivers",
    "l_max",
    "p",
    "nodes",
    "units_per_node",
    "value",
    "unit",
    "passed",
    "detail",
];

/// Run parameters repeated on every row.
#[derive(Clone, Debug)]
pub struct Context {
    pub mode: &'static str,
    pub n_sources: usize,
    pub n_receivers: usize,
    pub l_max: u32,
    pub p: usize,
    pub nodes: usize,
    pub units_per_node: usize,
}

#[derive(Clone, Debug)]
pub struct Row {
    pub ctx: Context,
    pub kind: &'static str,
    pub name: String,
    pub value: f64,
    pub unit: &'static str,
    pub passed: Option<bool>,
    pub detail: String,
}

impl Row {
    fn new(ctx: &Context, kind: &'static str, name: &str, value: f64, unit: &'static str) -> Self {
        Self { ctx: ctx.clone(), kind, name: name.into(), value, unit, passed: None, detail: String::new() }
    }

    fn record(&self) -> [String; 13] {
        let c = &self.ctx;
        [
            c.mode.to_string(),
            self.kind.to_string(),
            self.name.clone(),
            c.n_sources.to_string(),
            c.n_receivers.to_string(),
            c.l_max.to_string(),
            c.p.to_string(),
            c.nodes.to_string(),
            c.units_per_node.to_string(),
            self.value.to_string(),
            self.unit.to_string(),
            self.passed.map(|b| b.to_string()).unwrap_or_default(),
            self.detail.clone(),
        ]
    }
}

/// Collects rows for one run.
#[derive(Debug, Default)]
pub struct Report {
    pub rows: Vec<Row>,
}

impl Report {
    pub fn timing(&mut self, ctx: &Context, name: &str, seconds: f64) {
        self.rows.push(Row::new(ctx, "timing", name, seconds, "s"));
    }

    pub fn count(&mut self, ctx: &Context, name: &str, n: usize) {
        self.rows.push(Row::new(ctx, "count", name, n as f64, ""));
    }

    pub fn metric(&mut self, ctx: &Context, name: &str, value: f64, unit: &'static str) {
        self.rows.push(Row::new(ctx, "metric", name, value, unit));
    }

    pub fn check(&mut self, ctx: &Context, name: &str, passed: bool, value: f64, detail: String) {
        self.rows.push(Row { passed: Some(passed), detail, ..Row::new(ctx, "check", name, value, "") });
    }

    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed != Some(false))
    }

    pub fn write(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for r in &self.rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }
}
