//! Append-only metrics stream: `epoch step scope stage key value` records,
//! plain text so golden runs diff cleanly.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CsqaError, Result};

pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
    last: Option<(usize, usize)>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| CsqaError::io(path.display().to_string(), e))?;
        Ok(MetricsWriter { out: BufWriter::new(file), last: None })
    }

    /// Append one record. (epoch, step) must be nondecreasing — the stream
    /// stays strictly ordered across step boundaries.
    pub fn record(
        &mut self,
        epoch: usize,
        step: usize,
        scope: &str,
        stage: &str,
        key: &str,
        value: impl std::fmt::Display,
    ) -> Result<()> {
        if let Some(last) = self.last {
            if (epoch, step) < last {
                return Err(CsqaError::Usage(format!(
                    "metrics stream must be nondecreasing: got ({epoch}, {step}) after {last:?}"
                )));
            }
        }
        self.last = Some((epoch, step));
        writeln!(self.out, "{epoch} {step} {scope} {stage} {key} {value}")
            .map_err(|e| CsqaError::io("<metrics>", e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| CsqaError::io("<metrics>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_ordered_and_formatted() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("metrics.txt");
        let mut w = MetricsWriter::create(&p).unwrap();
        w.record(0, 0, "train", "-", "loss", 2.5).unwrap();
        w.record(0, 0, "qp_im", "3", "p", 0.25).unwrap();
        w.record(0, 1, "train", "-", "loss", 2.25).unwrap();
        w.record(1, 0, "train", "-", "loss", 2.0).unwrap();
        assert!(w.record(0, 5, "train", "-", "loss", 1.0).is_err(), "regression must be rejected");
        w.flush().unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0 0 train - loss 2.5");
        assert_eq!(lines[1], "0 0 qp_im 3 p 0.25");
        // stream is sorted by (epoch, step)
        let mut keys = Vec::new();
        for l in &lines {
            let mut it = l.split_whitespace();
            let e: usize = it.next().unwrap().parse().unwrap();
            let s: usize = it.next().unwrap().parse().unwrap();
            keys.push((e, s));
        }
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
