//! Event streams and their voxel-grid representation.
//!
//! An event camera reports per-pixel brightness changes as `(x, y, t, p)`
//! tuples. For learning we accumulate a window of events into a dense
//! `B x H x W` grid: each event lands on its integer pixel and its polarity
//! is split across the two nearest time bins with triangular weights, so the
//! grid is differentiable in time placement and conserves total polarity.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";

/// One brightness-change event. Timestamps are integer microseconds.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: i8) -> Self {
        assert!(p == 1 || p == -1, "polarity must be +1 or -1, got {p}");
        Event { x, y, t, p }
    }
}

/// A time-ordered window of events on a fixed sensor.
///
/// Construction drops out-of-bounds events (counted, not an error; edge noise
/// is normal in recordings) and rejects streams whose timestamps decrease.
#[derive(Clone, Debug)]
pub struct EventStream {
    events: Vec<Event>,
    sensor: (usize, usize),
    dropped: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, sensor: (usize, usize)) -> Result<Self> {
        let (h, w) = sensor;
        let mut kept = Vec::with_capacity(events.len());
        let mut dropped = 0usize;
        let mut last_t = 0u64;
        for (i, e) in events.into_iter().enumerate() {
            if e.p != 1 && e.p != -1 {
                return Err(Error::data(format!(
                    "event {i}: polarity must be +1 or -1, got {}",
                    e.p
                )));
            }
            if i > 0 && e.t < last_t {
                return Err(Error::data(format!(
                    "event {i}: timestamp {} decreases below {}",
                    e.t, last_t
                )));
            }
            last_t = e.t;
            if (e.x as usize) < w && (e.y as usize) < h {
                kept.push(e);
            } else {
                dropped += 1;
            }
        }
        Ok(EventStream {
            events: kept,
            sensor,
            dropped,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn sensor_size(&self) -> (usize, usize) {
        self.sensor
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Count of out-of-bounds events discarded at construction.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Map each timestamp into bin coordinates `[0, B-1]`, endpoints taken
    /// from the stream itself. A window of zero duration (single event or
    /// identical timestamps) maps everything to 0.
    pub fn normalize_timestamps(&self, bins: usize) -> Result<Vec<f64>> {
        assert!(bins >= 2, "need at least 2 time bins, got {bins}");
        if self.events.is_empty() {
            return Err(Error::data("empty event window"));
        }
        let t1 = self.events[0].t;
        let tn = self.events[self.events.len() - 1].t;
        Ok(self.normalized_in(bins, t1, tn))
    }

    fn normalized_in(&self, bins: usize, t0: u64, t1: u64) -> Vec<f64> {
        if t1 <= t0 {
            return vec![0.0; self.events.len()];
        }
        let span = (t1 - t0) as f64;
        let scale = (bins - 1) as f64 / span;
        self.events
            .iter()
            .map(|e| (e.t.saturating_sub(t0)) as f64 * scale)
            .collect()
    }

    /// Accumulate the stream into a voxel grid, normalizing time against the
    /// stream's own first and last event.
    pub fn voxelize(&self, bins: usize) -> Result<VoxelGrid> {
        assert!(bins >= 2, "need at least 2 time bins, got {bins}");
        if self.events.is_empty() {
            return Ok(VoxelGrid::zeros(bins, self.sensor, (0, 0)));
        }
        let t0 = self.events[0].t;
        let t1 = self.events[self.events.len() - 1].t;
        self.voxelize_window(bins, t0, t1)
    }

    /// Accumulate with fixed window endpoints; events outside `[t0, t1]` are
    /// ignored. Fixed endpoints make grids of disjoint sub-streams add up to
    /// the grid of their union.
    pub fn voxelize_window(&self, bins: usize, t0: u64, t1: u64) -> Result<VoxelGrid> {
        assert!(bins >= 2, "need at least 2 time bins, got {bins}");
        assert!(t1 >= t0, "window end before start");
        let mut grid = VoxelGrid::zeros(bins, self.sensor, (t0, t1));
        let span = (t1 - t0) as f64;
        for e in &self.events {
            if e.t < t0 || e.t > t1 {
                continue;
            }
            let tstar = if span > 0.0 {
                (e.t - t0) as f64 * (bins - 1) as f64 / span
            } else {
                0.0
            };
            let b0 = tstar.floor() as usize;
            let frac = tstar - b0 as f64;
            let p = e.p as f64;
            let (y, x) = (e.y as usize, e.x as usize);
            grid.data[[b0, y, x]] += p * (1.0 - frac);
            if frac > 0.0 && b0 + 1 < bins {
                grid.data[[b0 + 1, y, x]] += p * frac;
            }
        }
        Ok(grid)
    }
}

/// Dense `B x H x W` signed-polarity accumulation of one event window.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub data: Array3<f64>,
    pub window: (u64, u64),
}

impl VoxelGrid {
    pub fn zeros(bins: usize, sensor: (usize, usize), window: (u64, u64)) -> Self {
        VoxelGrid {
            data: Array3::zeros((bins, sensor.0, sensor.1)),
            window,
        }
    }

    pub fn bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn sensor_size(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn total(&self) -> f64 {
        self.data.sum()
    }
}

/// Write the binary event format: a 16-byte header (magic `EVT1`, u16 height,
/// u16 width, u64 record count) followed by 16-byte little-endian records
/// ⟨u16 x, u16 y, i8 p, 3 pad bytes, u64 t_µs⟩.
pub fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let (h, w) = stream.sensor_size();
    out.write_all(EVENT_MAGIC)?;
    out.write_all(&(h as u16).to_le_bytes())?;
    out.write_all(&(w as u16).to_le_bytes())?;
    out.write_all(&(stream.len() as u64).to_le_bytes())?;
    for e in stream.events() {
        out.write_all(&e.x.to_le_bytes())?;
        out.write_all(&e.y.to_le_bytes())?;
        out.write_all(&[e.p as u8, 0, 0, 0])?;
        out.write_all(&e.t.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<EventStream> {
    let mut input = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::data(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != EVENT_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            &header[0..4],
            EVENT_MAGIC
        )));
    }
    let h = u16::from_le_bytes([header[4], header[5]]) as usize;
    let w = u16::from_le_bytes([header[6], header[7]]) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;

    let mut events = Vec::with_capacity(count);
    let mut rec = [0u8; 16];
    for i in 0..count {
        let offset = 16 + 16 * i;
        input.read_exact(&mut rec).map_err(|_| {
            Error::data(format!(
                "{}: truncated record at byte offset {offset}",
                path.display()
            ))
        })?;
        let p = rec[4] as i8;
        if p != 1 && p != -1 {
            return Err(Error::data(format!(
                "{}: invalid polarity {p} at byte offset {}",
                path.display(),
                offset + 4
            )));
        }
        events.push(Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: u64::from_le_bytes(rec[8..16].try_into().unwrap()),
            p,
        });
    }
    EventStream::new(events, (h, w))
}
