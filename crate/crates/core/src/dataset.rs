//! Sequential pose data and its CSV representation.
//!
//! CSV layout: an optional first line `# frame_rate=<Hz>`, then a header row
//! naming every observation channel plus a `seq` column (sequence id) and an
//! optional `phase` column (radians). A new sequence starts whenever the
//! `seq` value changes between consecutive rows.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::dynamics::VelocityChannels;
use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 30.0;

/// Channel names recognised as the forward/lateral velocity and yaw-rate channels.
pub const VELOCITY_CHANNEL_NAMES: [&str; 3] = ["vel_forward", "vel_lateral", "yaw_rate"];

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    /// N x D, one frame per row.
    pub observations: DMatrix<f64>,
    pub sequence_starts: Vec<usize>,
    pub phase: Option<Vec<f64>>,
    pub frame_rate: f64,
    pub channel_names: Vec<String>,
}

impl MotionDataset {
    pub fn new(
        observations: DMatrix<f64>,
        sequence_starts: Vec<usize>,
        phase: Option<Vec<f64>>,
        frame_rate: f64,
    ) -> Result<Self> {
        let names = (0..observations.ncols()).map(|c| format!("ch{c}")).collect();
        Self::with_names(observations, sequence_starts, phase, frame_rate, names)
    }

    pub fn with_names(
        observations: DMatrix<f64>,
        sequence_starts: Vec<usize>,
        phase: Option<Vec<f64>>,
        frame_rate: f64,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            observations,
            sequence_starts,
            phase,
            frame_rate,
            channel_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::invalid("dataset has no frames"));
        }
        if self.sequence_starts.first() != Some(&0) {
            return Err(Error::invalid("first sequence must start at row 0"));
        }
        if self.sequence_starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sequence starts must be strictly increasing"));
        }
        if self.sequences().any(|(s, e)| e - s < 2) {
            return Err(Error::invalid("every sequence needs at least two frames"));
        }
        if self.sequence_starts.iter().any(|&s| s >= n) {
            return Err(Error::invalid("sequence start beyond the last frame"));
        }
        if let Some(p) = &self.phase {
            if p.len() != n {
                return Err(Error::invalid("phase length differs from frame count"));
            }
        }
        if self.channel_names.len() != self.dim() {
            return Err(Error::invalid("channel name count differs from observation dim"));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        if self.observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observations contain non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.observations.ncols()
    }

    /// Half-open `(start, end)` row ranges of each sequence.
    pub fn sequences(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.len();
        self.sequence_starts.iter().enumerate().map(move |(i, &s)| {
            let e = self.sequence_starts.get(i + 1).copied().unwrap_or(n);
            (s, e)
        })
    }

    /// `(from_row, to_row)` for every within-sequence transition.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.sequences()
            .flat_map(|(s, e)| (s..e - 1).map(|i| (i, i + 1)))
            .collect()
    }

    pub fn velocity_channels(&self) -> Option<VelocityChannels> {
        let find = |name: &str| self.channel_names.iter().position(|c| c == name);
        let idx = [
            find(VELOCITY_CHANNEL_NAMES[0])?,
            find(VELOCITY_CHANNEL_NAMES[1])?,
            find(VELOCITY_CHANNEL_NAMES[2])?,
        ];
        VelocityChannels::new(idx, self.dim()).ok()
    }

    pub fn channel_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.observations
            .column_iter()
            .map(|c| {
                let m = c.mean();
                (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
            })
            .collect()
    }

    pub fn read_csv<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut frame_rate = DEFAULT_FRAME_RATE;
        if let Some(first) = text.lines().next() {
            if let Some(rest) = first.trim().strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("frame_rate=") {
                    frame_rate = v.trim().parse().map_err(|_| Error::Parse {
                        line: 1,
                        message: format!("bad frame rate {v:?}"),
                    })?;
                }
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| csv_error(e, 1))?
            .iter()
            .map(str::to_string)
            .collect::<Vec<_>>();
        let seq_col = headers
            .iter()
            .position(|h| h == "seq")
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: "missing `seq` column".into(),
            })?;
        let phase_col = headers.iter().position(|h| h == "phase");
        let channel_cols: Vec<usize> = (0..headers.len())
            .filter(|&c| c != seq_col && Some(c) != phase_col)
            .collect();
        if channel_cols.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: "no observation channels".into(),
            });
        }

        let mut values = Vec::new();
        let mut phase = Vec::new();
        let mut starts = Vec::new();
        let mut last_seq: Option<String> = None;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(e, 0))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != headers.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", headers.len(), rec.len()),
                });
            }
            let parse = |c: usize| -> Result<f64> {
                rec[c].parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("column `{}`: cannot parse {:?}", headers[c], &rec[c]),
                })
            };
            for &c in &channel_cols {
                values.push(parse(c)?);
            }
            if let Some(pc) = phase_col {
                phase.push(parse(pc)?);
            }
            let seq = rec[seq_col].to_string();
            if last_seq.as_deref() != Some(seq.as_str()) {
                starts.push(row);
                last_seq = Some(seq);
            }
        }
        let n = starts.last().map(|_| values.len() / channel_cols.len()).unwrap_or(0);
        let observations = DMatrix::from_row_slice(n, channel_cols.len(), &values);
        let names = channel_cols.iter().map(|&c| headers[c].clone()).collect();
        Self::with_names(
            observations,
            starts,
            phase_col.map(|_| phase),
            frame_rate,
            names,
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# frame_rate={}", self.frame_rate)?;
        let mut header: Vec<String> = self.channel_names.clone();
        header.push("seq".into());
        if self.phase.is_some() {
            header.push("phase".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (seq, (s, e)) in self.sequences().enumerate() {
            for i in s..e {
                let mut fields: Vec<String> =
                    self.observations.row(i).iter().map(|v| v.to_string()).collect();
                fields.push(seq.to_string());
                if let Some(p) = &self.phase {
                    fields.push(p[i].to_string());
                }
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(fallback_line);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MotionDataset {
        let obs = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 0.5, 1.5, 1.0, 2.0, 3.0, 0.1, 3.5, 0.2]);
        MotionDataset::with_names(
            obs,
            vec![0, 3],
            Some(vec![0.0, 0.1, 0.2, 0.3, 0.4]),
            12.5,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn transitions_respect_sequence_boundaries() {
        assert_eq!(tiny().transitions(), vec![(0, 1), (1, 2), (3, 4)]);
    }

    #[test]
    fn csv_round_trip() {
        let ds = tiny();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = MotionDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn bad_value_reports_line() {
        let text = "# frame_rate=10\na,seq\n1.0,0\n2.0,0\nnope,0\n";
        match MotionDataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_single_frame_sequence() {
        let obs = DMatrix::from_element(3, 1, 0.0);
        assert!(MotionDataset::new(obs, vec![0, 2], None, 30.0).is_err());
    }
}
