//! Line-oriented dataset files.
//!
//! ```text
//! #eamat-dataset v1 seed=7 t_min=16 ...
//! #columns query frames d_v start end region_start region_end entity_channels motion_channel features
//! the/other person/entity is/other opens/motion<TAB>20<TAB>32<TAB>4<TAB>9<TAB>2<TAB>12<TAB>3<TAB>10<TAB>0.01,-0.2,...
//! ```
//!
//! Fields are tab-separated. `features` holds the `frames × d_v` matrix row-major,
//! comma-separated. The metadata columns may be `-` for data that did not come from
//! the synthetic generator; this is also the entry point for externally extracted
//! features.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::query::QuerySample;
use crate::synth::{GenConfig, GroundedSample, SampleMeta};
use crate::tensor::Tensor;

pub const MAGIC: &str = "#eamat-dataset v1";
pub const COLUMNS: &str =
    "#columns query frames d_v start end region_start region_end entity_channels motion_channel features";

pub fn format_dataset(samples: &[GroundedSample], generator: Option<&GenConfig>) -> String {
    let mut out = String::new();
    match generator {
        Some(g) => {
            let _ = writeln!(out, "{MAGIC} {}", g.echo());
        }
        None => {
            let _ = writeln!(out, "{MAGIC}");
        }
    }
    let _ = writeln!(out, "{COLUMNS}");
    for s in samples {
        let (rs, re, ents, mc) = match &s.meta {
            Some(m) => (
                m.region_start.to_string(),
                m.region_end.to_string(),
                m.entity_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
                m.motion_channel.to_string(),
            ),
            None => ("-".into(), "-".into(), "-".into(), "-".into()),
        };
        let feats = s.video.data().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{rs}\t{re}\t{ents}\t{mc}\t{feats}",
            s.query.to_tagged_line(),
            s.frames(),
            s.video.cols(),
            s.start,
            s.end
        );
    }
    out
}

pub fn write_dataset(path: &Path, samples: &[GroundedSample], generator: Option<&GenConfig>) -> Result<()> {
    std::fs::write(path, format_dataset(samples, generator)).map_err(|e| Error::io(path, e))
}

pub fn parse_dataset(text: &str, origin: &Path) -> Result<Vec<GroundedSample>> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.peek() {
        Some((_, first)) if first.starts_with(MAGIC) => {}
        _ => return Err(Error::parse(origin, format!("missing `{MAGIC}` header"))),
    }
    let mut samples = Vec::new();
    for (n, line) in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(line).map_err(|m| Error::parse(origin, format!("line {}: {m}", n + 1)))?;
        samples.push(sample);
    }
    Ok(samples)
}

fn parse_record(line: &str) -> std::result::Result<GroundedSample, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 10 {
        return Err(format!("expected 10 tab-separated fields, found {}", fields.len()));
    }
    let int = |i: usize| -> std::result::Result<usize, String> {
        fields[i]
            .parse()
            .map_err(|_| format!("field {} is not an index: `{}`", i + 1, fields[i]))
    };
    let query = QuerySample::from_tagged_line(fields[0]).map_err(|e| e.to_string())?;
    let (frames, d_v, start, end) = (int(1)?, int(2)?, int(3)?, int(4)?);
    let feats = fields[9]
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|_| format!("bad feature value `{v}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let video = Tensor::matrix(frames, d_v, feats).map_err(|e| e.to_string())?;
    let mut sample = GroundedSample::new(video, query, start, end).map_err(|e| e.to_string())?;
    if fields[5] != "-" {
        sample.meta = Some(SampleMeta {
            region_start: int(5)?,
            region_end: int(6)?,
            entity_channels: fields[7]
                .split(',')
                .map(|c| c.parse().map_err(|_| format!("bad channel `{c}`")))
                .collect::<std::result::Result<_, _>>()?,
            motion_channel: int(8)?,
        });
    }
    Ok(sample)
}

pub fn read_dataset(path: &Path) -> Result<Vec<GroundedSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}
