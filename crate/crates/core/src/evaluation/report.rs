use std::fs;
use std::path::Path;

use crate::error::Result;

/// Protocol output: headline values, per-item rows, and the settings used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub protocol: String,
    /// `None` marks an undefined value.
    pub aggregates: Vec<(String, Option<f64>)>,
    pub config: Vec<(String, String)>,
    pub item_columns: Vec<String>,
    pub items: Vec<Vec<String>>,
}

pub(crate) fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "NA".to_string(),
    }
}

impl MetricReport {
    pub fn new(protocol: &str) -> Self {
        Self {
            protocol: protocol.to_string(),
            ..Default::default()
        }
    }

    pub fn aggregate(&self, key: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| *v)
    }

    pub fn set(&mut self, key: &str, value: Option<f64>) {
        match self.aggregates.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.aggregates.push((key.to_string(), value)),
        }
    }

    pub fn echo(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    /// `metric<TAB>value` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("protocol\t{}\n", self.protocol);
        for (k, v) in &self.aggregates {
            out.push_str(&format!("{k}\t{}\n", fmt_value(*v)));
        }
        out
    }

    pub fn items_csv(&self) -> String {
        let mut out = self.item_columns.join(",");
        out.push('\n');
        for row in &self.items {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes `report.tsv`, `<items_name>` and `config.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, items_name: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.tsv"), self.to_tsv())?;
        fs::write(dir.join(items_name), self.items_csv())?;
        fs::write(dir.join("config.txt"), self.config_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_tsv_and_csv() {
        let mut r = MetricReport::new("wsol");
        r.set("maxboxacc", Some(0.5));
        r.set("pxap", None);
        r.set("maxboxacc", Some(0.25));
        r.item_columns = vec!["a".into(), "b".into()];
        r.items.push(vec!["1".into(), "2".into()]);
        assert_eq!(r.to_tsv(), "protocol\twsol\nmaxboxacc\t0.250000\npxap\tNA\n");
        assert_eq!(r.items_csv(), "a,b\n1,2\n");
        assert_eq!(r.aggregate("pxap"), None);
        assert_eq!(r.aggregate("maxboxacc"), Some(0.25));
    }
}
