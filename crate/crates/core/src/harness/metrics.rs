use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One logging event. Evaluation and loss columns are empty when the event
/// had none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episode: u64,
    pub episodic_return: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub world_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub active_code_fraction: f64,
}

pub const METRICS_HEADER: [&str; 9] = [
    "env_step",
    "episode",
    "episodic_return",
    "eval_return_mean",
    "eval_return_std",
    "world_loss",
    "critic_loss",
    "actor_loss",
    "active_code_fraction",
];

/// Wall-clock time per logging event, kept apart from the deterministic
/// metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub episode: u64,
    pub wall_clock_s: f64,
}

/// CSV writer flushed after every row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        MetricsWriter {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn write<R: Serialize>(&mut self, row: &R) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opt(v: f64, some: bool) -> Option<f64> {
        some.then_some(v)
    }

    #[test]
    fn header_is_fixed() {
        let mut buf = Vec::new();
        let mut w = MetricsWriter::new(&mut buf);
        w.write(&MetricsRow {
            env_step: 200,
            episode: 1,
            episodic_return: 12.5,
            eval_return_mean: None,
            eval_return_std: None,
            world_loss: Some(0.25),
            critic_loss: None,
            actor_loss: None,
            active_code_fraction: 1.0,
        })
        .unwrap();
        drop(w);
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "200,1,12.5,,,0.25,,,1.0");
    }

    proptest! {
        #[test]
        fn rows_round_trip_exactly(
            rows in proptest::collection::vec(
                (0u64..1_000_000, any::<f64>(), any::<f64>(), any::<bool>(), -1e9f64..1e9, 0.0f64..=1.0),
                0..20,
            )
        ) {
            let logged: Vec<MetricsRow> = rows
                .iter()
                .enumerate()
                .map(|(i, &(step, ret, ev, flag, loss, frac))| MetricsRow {
                    env_step: step,
                    episode: i as u64,
                    episodic_return: if ret.is_finite() { ret } else { 0.0 },
                    eval_return_mean: opt(if ev.is_finite() { ev } else { -1.0 }, flag),
                    eval_return_std: opt(loss.abs(), flag),
                    world_loss: Some(loss),
                    critic_loss: opt(loss * 0.5, !flag),
                    actor_loss: None,
                    active_code_fraction: frac,
                })
                .collect();
            let mut buf = Vec::new();
            {
                let mut w = MetricsWriter::new(&mut buf);
                for r in &logged {
                    w.write(r).unwrap();
                }
            }
            let back = read_metrics(buf.as_slice()).unwrap();
            prop_assert_eq!(back, logged);
        }
    }
}
