//! Column-aligned text tables for a market report.

use std::collections::BTreeMap;
use std::fmt::Write;

use regression_markets::market::{mechanism_name, MarketReport};

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn render(&self) -> String {
        let n = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate().take(n) {
                widths[i] = widths[i].max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&self.header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&rule.join("  "));
        out.push('\n');
        for r in &self.rows {
            line(r, &mut out);
        }
        out
    }
}

pub fn money(v: f64) -> String {
    format!("{v:.2}")
}

pub fn percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn loss(v: f64) -> String {
    format!("{v:.6}")
}

pub fn summary(r: &MarketReport) -> String {
    let mut out = String::new();
    let mut t = Table::new(&["quantity", "value"]);
    t.row(vec!["mechanism".into(), mechanism_name(r.mechanism).into()]);
    t.row(vec!["central agent".into(), r.central_agent.to_string()]);
    t.row(vec!["target".into(), r.target.clone()]);
    t.row(vec!["rows".into(), r.rows.to_string()]);
    t.row(vec!["central-only loss".into(), loss(r.central_loss)]);
    t.row(vec!["full-model loss".into(), loss(r.full_loss)]);
    t.row(vec!["loss improvement".into(), loss(r.surplus)]);
    t.row(vec!["central payment".into(), money(r.central_payment)]);
    t.row(vec!["total paid to support".into(), money(r.total_paid)]);
    t.row(vec![
        "audit".into(),
        if r.audit.passed() { "pass".into() } else { "fail".into() },
    ]);
    out.push_str(&t.render());
    if r.no_surplus {
        let _ = writeln!(out, "note: no loss improvement, market cleared at zero");
    }
    if let Some(c) = &r.consistency {
        let _ = writeln!(out, "windows improved: {}", percent(c.improved_fraction()));
    }
    out
}

pub fn per_feature(r: &MarketReport) -> String {
    let mut t = Table::new(&["feature", "owner", "share", "payment"]);
    for f in &r.support {
        let share = r.share(&f.name).map(percent).unwrap_or_else(|| "-".into());
        t.row(vec![
            f.name.clone(),
            f.owner.to_string(),
            share,
            money(r.payment(&f.name)),
        ]);
    }
    t.row(vec![
        "total".into(),
        String::new(),
        percent(r.support_share_sum()),
        money(r.total_paid),
    ]);
    t.render()
}

pub fn per_agent(r: &MarketReport) -> String {
    let mut shares: BTreeMap<String, f64> = BTreeMap::new();
    for f in &r.support {
        *shares.entry(f.owner.to_string()).or_default() += r.share(&f.name).unwrap_or(0.0);
    }
    let mut t = Table::new(&["agent", "share", "revenue"]);
    for (agent, revenue) in &r.agent_revenues {
        let share = shares.get(&agent.to_string()).copied().unwrap_or(0.0);
        t.row(vec![agent.to_string(), percent(share), money(*revenue)]);
    }
    t.row(vec![
        "total".into(),
        percent(r.support_share_sum()),
        money(r.total_paid),
    ]);
    t.render()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let mut t = Table::new(&["a", "value"]);
        t.row(vec!["long name".into(), "1.00".into()]);
        t.row(vec!["b".into(), "123.45".into()]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "a           value");
        assert_eq!(lines[2], "long name    1.00");
        assert_eq!(lines[3], "b          123.45");
    }

    #[test]
    fn formats() {
        assert_eq!(money(250.704), "250.70");
        assert_eq!(percent(0.2273), "22.73%");
    }
}
