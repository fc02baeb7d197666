use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_error, Result};

/// Long-format training curve: one `(epoch, component, value)` row per
/// measurement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub rows: Vec<(usize, String, f64)>,
}

impl LossCurve {
    pub fn push(&mut self, epoch: usize, component: &str, value: f64) {
        self.rows.push((epoch, component.to_string(), value));
    }

    /// Values of one component in epoch order.
    pub fn series(&self, component: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|(_, c, _)| c == component)
            .map(|(e, _, v)| (*e, *v))
            .collect()
    }

    pub fn first(&self, component: &str) -> Option<f64> {
        self.series(component).first().map(|x| x.1)
    }

    pub fn last(&self, component: &str) -> Option<f64> {
        self.series(component).last().map(|x| x.1)
    }

    pub fn extend(&mut self, other: &LossCurve) {
        self.rows.extend(other.rows.iter().cloned());
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,component,value\n");
        for (e, c, v) in &self.rows {
            writeln!(out, "{e},{c},{v}").expect("writing to a string");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_error(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut c = LossCurve::default();
        c.push(1, "total", 2.5);
        c.push(1, "kl", 0.125);
        c.push(2, "total", 1.0);
        assert_eq!(
            c.to_csv(),
            "epoch,component,value\n1,total,2.5\n1,kl,0.125\n2,total,1\n"
        );
        assert_eq!(c.series("total"), vec![(1, 2.5), (2, 1.0)]);
        assert_eq!(c.last("total"), Some(1.0));
    }
}
