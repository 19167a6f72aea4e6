//! Text persistence for Q-core tables.
//!
//! ```text
//! qsched-table 1
//! motor <fingerprint>
//! pitch <deg>
//! gamma <discount>
//! theta <n> <node>...
//! current <m> <node>...
//! core <row> <col> <G_xx> <G_xr> <G_xu> <G_rr> <G_ru> <G_uu>
//! ...
//! end
//! ```
//!
//! Cores are row-major (current rows, angle columns). Floats are written in
//! shortest round-trip form, so save → load → save is byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::qlearn::{KernelVec, QKernel, KERNEL_PARAMS};

use super::QCoreTable;

pub const TABLE_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "qsched-table";

pub(super) fn render(table: &QCoreTable) -> String {
    let mut out = String::new();
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "{MAGIC} {TABLE_FORMAT_VERSION}");
    let _ = writeln!(out, "motor {}", table.motor_fingerprint);
    let _ = writeln!(out, "pitch {:e}", table.pitch);
    let _ = writeln!(out, "gamma {:e}", table.gamma);
    let _ = writeln!(out, "theta {} {}", table.theta_nodes.len(), join(&table.theta_nodes));
    let _ = writeln!(out, "current {} {}", table.current_nodes.len(), join(&table.current_nodes));
    for row in 0..table.rows() {
        for col in 0..table.cols() {
            let v = table.core(row, col).to_vec();
            let _ = writeln!(out, "core {row} {col} {}", join(v.as_slice()));
        }
    }
    out.push_str("end\n");
    out
}

pub(super) fn parse(text: &str) -> Result<QCoreTable> {
    let bad = |msg: String| Error::TableFormat(msg);
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
        lines
            .next()
            .map(|(n, l)| (n + 1, l.split_whitespace().collect()))
            .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
    };
    let num = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("line {line}: bad number {s:?}")))
    };
    let idx = |line: usize, s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| bad(format!("line {line}: bad index {s:?}")))
    };

    let (n, header) = next("header")?;
    if header.len() != 2 || header[0] != MAGIC {
        return Err(bad(format!("line {n}: not a Q-core table")));
    }
    if header[1] != TABLE_FORMAT_VERSION.to_string() {
        return Err(bad(format!("line {n}: unsupported table version {}", header[1])));
    }
    let mut keyed = |key: &str| -> Result<(usize, Vec<&str>)> {
        let (n, f) = next(key)?;
        if f.first() != Some(&key) {
            return Err(bad(format!("line {n}: expected `{key}`")));
        }
        Ok((n, f))
    };
    let (n, f) = keyed("motor")?;
    if f.len() != 2 {
        return Err(bad(format!("line {n}: expected `motor <fingerprint>`")));
    }
    let fingerprint = f[1].to_string();
    let (n, f) = keyed("pitch")?;
    let pitch = num(n, f.get(1).copied().unwrap_or(""))?;
    let (n, f) = keyed("gamma")?;
    let gamma = num(n, f.get(1).copied().unwrap_or(""))?;
    let mut grid = |key: &str| -> Result<Vec<f64>> {
        let (n, f) = keyed(key)?;
        let count = idx(n, f.get(1).copied().unwrap_or(""))?;
        if f.len() != count + 2 {
            return Err(bad(format!("line {n}: `{key}` declares {count} nodes, found {}", f.len().saturating_sub(2))));
        }
        f[2..].iter().map(|s| num(n, s)).collect()
    };
    let theta = grid("theta")?;
    let current = grid("current")?;

    let total = theta.len() * current.len();
    let mut cores = Vec::with_capacity(total);
    for expected in 0..total {
        let (n, f) = keyed("core")?;
        if f.len() != 3 + KERNEL_PARAMS {
            return Err(bad(format!("line {n}: core needs row, col and {KERNEL_PARAMS} entries")));
        }
        let (row, col) = (idx(n, f[1])?, idx(n, f[2])?);
        if (row, col) != (expected / theta.len(), expected % theta.len()) {
            return Err(bad(format!("line {n}: core ({row}, {col}) out of row-major order")));
        }
        let mut v = KernelVec::zeros();
        for (j, s) in f[3..].iter().enumerate() {
            v[j] = num(n, s)?;
        }
        cores.push(QKernel::from_vec(&v));
    }
    let (n, f) = next("end")?;
    if f != ["end"] {
        return Err(bad(format!("line {n}: expected `end`")));
    }
    QCoreTable::new(theta, current, pitch, gamma, fingerprint, cores)
        .map_err(|e| bad(format!("inconsistent table: {e}")))
}

pub fn save_table(table: &QCoreTable, path: &Path) -> Result<()> {
    std::fs::write(path, render(table)).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: &Path) -> Result<QCoreTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

impl QCoreTable {
    pub fn to_text(&self) -> String {
        render(self)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        parse(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn sample() -> QCoreTable {
        let cores = (0..6)
            .map(|k| {
                let s = 1.0 + k as f64 / 7.0;
                QKernel::new(Matrix3::new(
                    205.48 * s, -207.09, 0.6676 * s,
                    -207.09, 208.76, -0.6778,
                    0.6676 * s, -0.6778, 0.0052253 * s,
                ))
            })
            .collect();
        QCoreTable::new(vec![0.0, 15.0, 30.0], vec![0.0, 3.5], 45.0, 0.9, "0123abcd".into(), cores).unwrap()
    }

    #[test]
    fn text_round_trip_is_exact() {
        let t = sample();
        let text = t.to_text();
        let back = QCoreTable::from_text(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), 6 + 6 + 1);
    }

    #[test]
    fn rejects_corruption() {
        let text = sample().to_text();
        assert!(QCoreTable::from_text("").is_err());
        assert!(QCoreTable::from_text(&text.replace("qsched-table 1", "qsched-table 9")).is_err());
        assert!(QCoreTable::from_text(&text.replace("core 1 2", "core 2 1")).is_err());
        assert!(QCoreTable::from_text(&text.replace("\nend\n", "\n")).is_err());
        assert!(QCoreTable::from_text(&text.replace("theta 3", "theta 4")).is_err());
        let truncated: String = text.lines().take(8).map(|l| format!("{l}\n")).collect();
        assert!(QCoreTable::from_text(&truncated).is_err());
        let garbled = text.replacen("2.0548e2", "2.0548eX", 1);
        assert!(QCoreTable::from_text(&garbled).is_err());
    }
}
