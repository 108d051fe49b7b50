//! NGSIM-style ingestion, segmentation, neighbor selection, dataset splits
//! and synthetic scene generation.
//!
//! Frame ids stay in the source's 10 Hz tick units throughout; resampling
//! only drops frames, so a 5 Hz track advances `factor` ticks per step.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;

pub const FEET_TO_METERS: f64 = 0.3048;
pub const DEFAULT_RESAMPLE_FACTOR: usize = 2;
pub const DEFAULT_STRIDE: usize = 5;
pub const OBS_FRAMES: usize = 15;
pub const PRED_FRAMES: usize = 25;
pub const SEGMENT_FRAMES: usize = OBS_FRAMES + PRED_FRAMES;

const REQUIRED_COLUMNS: [&str; 4] = ["vehicle_id", "frame_id", "local_x", "local_y"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Feet,
    Meters,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::Feet => FEET_TO_METERS,
            Units::Meters => 1.0,
        }
    }
}

impl FromStr for Units {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feet" => Ok(Units::Feet),
            "meters" => Ok(Units::Meters),
            other => Err(Error::Usage(format!("units must be feet or meters, got {other:?}"))),
        }
    }
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Units::Feet => "feet",
            Units::Meters => "meters",
        })
    }
}

/// One vehicle observation, coordinates in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRecord {
    pub vehicle_id: i64,
    pub frame_id: i64,
    pub x: f64,
    pub y: f64,
}

pub fn parse_trajectory_csv(path: &Path, units: Units) -> Result<Vec<TrackRecord>> {
    let file = std::fs::File::open(path).map_err(Error::file(path))?;
    parse_trajectory_reader(file, units).map_err(|e| match e {
        Error::Format { line, message, .. } => Error::Format {
            path: Some(path.to_path_buf()),
            line,
            message,
        },
        other => other,
    })
}

/// Parses headered CSV text. Column names are matched case-insensitively and
/// extra columns are ignored. Output is sorted by `(vehicle_id, frame_id)`.
pub fn parse_trajectory_reader<R: Read>(reader: R, units: Units) -> Result<Vec<TrackRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::format(Some(1), format!("missing column {name}")))?;
    }
    let scale = units.to_meters();
    let mut records = Vec::new();
    let mut seen: HashMap<(i64, i64), u64> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line());
        let field = |k: usize| {
            let name = REQUIRED_COLUMNS[k];
            row.get(idx[k])
                .ok_or_else(|| Error::format(line, format!("missing value for {name}")))
        };
        let int = |k: usize| -> Result<i64> {
            let raw = field(k)?;
            raw.parse().map_err(|_| {
                Error::format(line, format!("cannot parse {} value {raw:?} as integer", REQUIRED_COLUMNS[k]))
            })
        };
        let float = |k: usize| -> Result<f64> {
            let raw = field(k)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::format(line, format!("cannot parse {} value {raw:?} as a number", REQUIRED_COLUMNS[k]))
                })
        };
        let rec = TrackRecord {
            vehicle_id: int(0)?,
            frame_id: int(1)?,
            x: float(2)? * scale,
            y: float(3)? * scale,
        };
        let here = line.unwrap_or(0);
        if let Some(first) = seen.insert((rec.vehicle_id, rec.frame_id), here) {
            return Err(Error::Data(format!(
                "duplicate record for vehicle {} frame {} (lines {first} and {here})",
                rec.vehicle_id, rec.frame_id
            )));
        }
        records.push(rec);
    }
    records.sort_by_key(|r| (r.vehicle_id, r.frame_id));
    Ok(records)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(line, format!("{other:?}")),
    }
}

/// Keeps every `factor`-th frame of each vehicle, counting from its first frame.
pub fn resample(records: &[TrackRecord], factor: usize) -> Vec<TrackRecord> {
    let factor = factor.max(1) as i64;
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.vehicle_id, r.frame_id));
    let mut out = Vec::with_capacity(sorted.len() / factor as usize + 1);
    let mut anchor: Option<(i64, i64)> = None;
    for r in sorted {
        let first = match anchor {
            Some((v, f)) if v == r.vehicle_id => f,
            _ => {
                anchor = Some((r.vehicle_id, r.frame_id));
                r.frame_id
            }
        };
        if (r.frame_id - first) % factor == 0 {
            out.push(r);
        }
    }
    out
}

/// A window of `len` frames of one target vehicle, `step` ticks apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentWindow {
    pub vehicle_id: i64,
    pub start_frame: i64,
    pub step: i64,
    pub len: usize,
}

impl SegmentWindow {
    pub fn frame(&self, i: usize) -> i64 {
        self.start_frame + self.step * i as i64
    }
}

/// Sliding windows over resampled tracks. Starts advance by `stride` steps
/// from each vehicle's first frame; a window missing any target frame is dropped.
pub fn segment(records: &[TrackRecord], step: usize, stride: usize, len: usize) -> Vec<SegmentWindow> {
    let (step, stride) = (step.max(1) as i64, stride.max(1) as i64);
    let mut by_vehicle: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
    for r in records {
        by_vehicle.entry(r.vehicle_id).or_default().push(r.frame_id);
    }
    let mut out = Vec::new();
    for (vehicle_id, mut frames) in by_vehicle {
        frames.sort_unstable();
        frames.dedup();
        let (first, last) = (frames[0], frames[frames.len() - 1]);
        let span = step * (len as i64 - 1);
        let mut start = first;
        while len > 0 && start + span <= last {
            let complete = (0..len as i64).all(|i| frames.binary_search(&(start + i * step)).is_ok());
            if complete {
                out.push(SegmentWindow {
                    vehicle_id,
                    start_frame: start,
                    step,
                    len,
                });
            }
            start += stride * step;
        }
    }
    out
}

/// How neighbor frames missing inside a window are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Hold the nearest known position (last known, or first known before it appears).
    #[default]
    HoldLast,
    ZeroFill,
}

impl FromStr for Imputation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hold_last" => Ok(Imputation::HoldLast),
            "zero_fill" => Ok(Imputation::ZeroFill),
            other => Err(Error::Usage(format!("imputation must be hold_last or zero_fill, got {other:?}"))),
        }
    }
}

/// Random access to full-rate positions by vehicle and frame.
#[derive(Clone, Debug, Default)]
pub struct TrackIndex {
    tracks: HashMap<i64, BTreeMap<i64, [f64; 2]>>,
    by_frame: HashMap<i64, Vec<i64>>,
}

impl TrackIndex {
    pub fn new(records: &[TrackRecord]) -> Self {
        let mut idx = TrackIndex::default();
        for r in records {
            idx.tracks.entry(r.vehicle_id).or_default().insert(r.frame_id, [r.x, r.y]);
            idx.by_frame.entry(r.frame_id).or_default().push(r.vehicle_id);
        }
        for ids in idx.by_frame.values_mut() {
            ids.sort_unstable();
            ids.dedup();
        }
        idx
    }

    pub fn position(&self, vehicle: i64, frame: i64) -> Option<[f64; 2]> {
        self.tracks.get(&vehicle)?.get(&frame).copied()
    }

    pub fn present_at(&self, frame: i64) -> &[i64] {
        self.by_frame.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Neighbors of `window`'s target at its last observed frame, nearest first,
/// ties broken by lower vehicle id.
pub fn rank_neighbors(window: &SegmentWindow, tracks: &TrackIndex, obs_len: usize) -> Vec<i64> {
    let last = window.frame(obs_len - 1);
    let Some([tx, ty]) = tracks.position(window.vehicle_id, last) else {
        return Vec::new();
    };
    let mut ranked: Vec<(f64, i64)> = tracks
        .present_at(last)
        .iter()
        .filter(|&&v| v != window.vehicle_id)
        .filter_map(|&v| tracks.position(v, last).map(|[x, y]| ((x - tx).hypot(y - ty), v)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|(_, v)| v).collect()
}

/// Builds an `agents`-channel scene for `window`: channel 0 is the target,
/// then up to `agents - 1` nearest neighbors, then masked padding.
pub fn select_neighbors(
    window: &SegmentWindow,
    tracks: &TrackIndex,
    agents: usize,
    obs_len: usize,
    imputation: Imputation,
) -> Result<Scene> {
    if agents == 0 || obs_len == 0 || obs_len > window.len {
        return Err(Error::Config(format!(
            "need agents >= 1 and 1 <= obs_len <= {}",
            window.len
        )));
    }
    let frames = window.len;
    let mut positions = vec![0.0; agents * frames * 2];
    let mut mask = vec![false; agents];
    let mut ids = vec![window.vehicle_id];
    ids.extend(rank_neighbors(window, tracks, obs_len).into_iter().take(agents - 1));
    for (c, &vehicle) in ids.iter().enumerate() {
        let known: Vec<Option<[f64; 2]>> = (0..frames).map(|i| tracks.position(vehicle, window.frame(i))).collect();
        let Some(first_known) = known.iter().flatten().next().copied() else {
            continue;
        };
        let mut held = first_known;
        for (i, p) in known.iter().enumerate() {
            let v = match (p, imputation) {
                (Some(p), _) => {
                    held = *p;
                    *p
                }
                (None, Imputation::HoldLast) => held,
                (None, Imputation::ZeroFill) => [0.0, 0.0],
            };
            let o = (c * frames + i) * 2;
            positions[o] = v[0];
            positions[o + 1] = v[1];
        }
        mask[c] = true;
    }
    Scene::new(agents, frames, positions, mask, 0)
}

/// Translates a scene so the target's last observed position is the origin.
pub fn normalize(scene: &Scene, obs_len: usize) -> Result<Scene> {
    scene.normalized(obs_len - 1)
}

/// Where a segment came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceId {
    pub file: String,
    pub vehicle_id: i64,
    pub start_frame: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSample {
    pub scene: Scene,
    pub source: SourceId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub resample_factor: usize,
    pub stride: usize,
    pub agents: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub imputation: Imputation,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            resample_factor: DEFAULT_RESAMPLE_FACTOR,
            stride: DEFAULT_STRIDE,
            agents: 10,
            obs_len: OBS_FRAMES,
            pred_len: PRED_FRAMES,
            imputation: Imputation::HoldLast,
        }
    }
}

/// Full pipeline from parsed records to normalized samples, ordered by
/// `(vehicle_id, start_frame)`.
pub fn build_samples(records: &[TrackRecord], file: &str, opts: &PipelineOptions) -> Result<Vec<SegmentSample>> {
    let resampled = resample(records, opts.resample_factor);
    let windows = segment(
        &resampled,
        opts.resample_factor,
        opts.stride,
        opts.obs_len + opts.pred_len,
    );
    // Neighbors are looked up at full rate so vehicles whose first frame has
    // the opposite parity to the target's are still found.
    let index = TrackIndex::new(records);
    windows
        .par_iter()
        .map(|w| {
            let scene = select_neighbors(w, &index, opts.agents, opts.obs_len, opts.imputation)?;
            Ok(SegmentSample {
                scene: normalize(&scene, opts.obs_len)?,
                source: SourceId {
                    file: file.to_string(),
                    vehicle_id: w.vehicle_id,
                    start_frame: w.start_frame,
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Linear,
    Turn,
    Interaction,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SynthKind::Linear),
            "turn" => Ok(SynthKind::Turn),
            "interaction" => Ok(SynthKind::Interaction),
            other => Err(Error::Usage(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Linear => "linear",
            SynthKind::Turn => "turn",
            SynthKind::Interaction => "interaction",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub agents: usize,
    /// Real vehicles per scene including the target; clamped to `agents`.
    pub vehicles: usize,
    pub frames: usize,
    pub obs_len: usize,
    /// Standard deviation of per-point Gaussian noise in meters.
    pub noise: f64,
    /// Seconds per frame.
    pub dt: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            agents: 10,
            vehicles: 6,
            frames: SEGMENT_FRAMES,
            obs_len: OBS_FRAMES,
            noise: 0.02,
            dt: 0.2,
        }
    }
}

const LANE_WIDTH: f64 = 3.7;

/// Deterministic parametric scenes, normalized like pipeline output.
pub fn synthesize_scenes(count: usize, kind: SynthKind, seed: u64, opts: &SynthOptions) -> Result<Vec<SegmentSample>> {
    if opts.agents == 0 || opts.frames == 0 || opts.obs_len == 0 || opts.obs_len > opts.frames {
        return Err(Error::Config("synthetic scenes need agents >= 1 and 1 <= obs_len <= frames".into()));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::Config(format!("noise {} must be >= 0", opts.noise)));
    }
    let noise = Normal::new(0.0, opts.noise).map_err(|e| Error::Config(e.to_string()))?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let tracks = synth_tracks(kind, opts, &mut rng);
            let mut tracks: Vec<Vec<[f64; 2]>> = tracks
                .into_iter()
                .map(|t| {
                    t.into_iter()
                        .map(|[x, y]| {
                            if opts.noise > 0.0 {
                                [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
                            } else {
                                [x, y]
                            }
                        })
                        .collect()
                })
                .collect();
            // order neighbors like the pipeline: nearest at the last observed frame
            let last = opts.obs_len - 1;
            let target = tracks[0][last];
            let dist = |t: &Vec<[f64; 2]>| (t[last][0] - target[0]).hypot(t[last][1] - target[1]);
            tracks[1..].sort_by(|a, b| dist(a).total_cmp(&dist(b)));
            tracks.truncate(opts.agents);
            let mut positions = vec![0.0; opts.agents * opts.frames * 2];
            let mut mask = vec![false; opts.agents];
            for (c, t) in tracks.iter().enumerate() {
                mask[c] = true;
                for (f, p) in t.iter().enumerate() {
                    positions[(c * opts.frames + f) * 2] = p[0];
                    positions[(c * opts.frames + f) * 2 + 1] = p[1];
                }
            }
            let scene = Scene::new(opts.agents, opts.frames, positions, mask, 0)?;
            Ok(SegmentSample {
                scene: normalize(&scene, opts.obs_len)?,
                source: SourceId {
                    file: format!("synthetic:{kind}:{seed}"),
                    vehicle_id: i as i64,
                    start_frame: 0,
                },
            })
        })
        .collect()
}

/// Mixed dataset cycling through all three kinds.
pub fn synthesize_mixed(count: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<SegmentSample>> {
    let kinds = [SynthKind::Linear, SynthKind::Turn, SynthKind::Interaction];
    let mut out = Vec::with_capacity(count);
    for (k, kind) in kinds.iter().enumerate() {
        let n = count / 3 + usize::from(k < count % 3);
        out.extend(synthesize_scenes(n, *kind, seed.wrapping_add(k as u64), opts)?);
    }
    Ok(out)
}

/// Noise-free tracks; index 0 is the target. Coordinates: x lateral, y longitudinal.
fn synth_tracks(kind: SynthKind, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 2]>> {
    let frames = opts.frames;
    let dt = opts.dt;
    let vehicles = opts.vehicles.clamp(1, opts.agents);
    let straight = |x0: f64, y0: f64, vx: f64, vy: f64| -> Vec<[f64; 2]> {
        (0..frames)
            .map(|f| {
                let t = f as f64 * dt;
                [x0 + vx * t, y0 + vy * t]
            })
            .collect()
    };
    let mut tracks = Vec::with_capacity(vehicles);
    let speed = rng.random_range(8.0..16.0);
    match kind {
        SynthKind::Linear => {
            let drift = rng.random_range(-0.3..0.3);
            tracks.push(straight(0.0, 0.0, drift, speed));
        }
        SynthKind::Turn => {
            // constant-curvature arc turning through 45..90 degrees over the window
            let total = rng.random_range(45f64..90.0).to_radians();
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let omega = sign * total / ((frames.max(2) - 1) as f64 * dt);
            let r = speed / omega;
            tracks.push(
                (0..frames)
                    .map(|f| {
                        let th = omega * f as f64 * dt;
                        [r * (1.0 - th.cos()), r * th.sin()]
                    })
                    .collect(),
            );
        }
        SynthKind::Interaction => {
            tracks.push(straight(0.0, 0.0, 0.0, speed));
            // a vehicle in the adjacent lane drifts toward the target's lane,
            // then pulls back out once it is alongside
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let other_speed = speed + rng.random_range(1.0..3.0);
            let lead = rng.random_range(-15.0..-8.0);
            let turn_back = rng.random_range(0.35..0.5) * frames as f64;
            let closing = rng.random_range(0.5..1.0);
            tracks.push(
                (0..frames)
                    .map(|f| {
                        let t = f as f64 * dt;
                        let ff = f as f64;
                        let lateral = if ff <= turn_back {
                            LANE_WIDTH - closing * t
                        } else {
                            let peak = LANE_WIDTH - closing * turn_back * dt;
                            peak + 1.5 * closing * (ff - turn_back) * dt
                        };
                        [side * lateral.min(LANE_WIDTH * 1.5), lead + other_speed * t]
                    })
                    .collect(),
            );
        }
    }
    while tracks.len() < vehicles {
        let lane = rng.random_range(-2i32..=2) as f64 * LANE_WIDTH;
        let gap = rng.random_range(-40.0..40.0);
        let v = speed + rng.random_range(-3.0..3.0);
        tracks.push(straight(lane + rng.random_range(-0.5..0.5), gap, 0.0, v));
    }
    tracks
}

/// Disjoint train / validation / test partition of segments.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SegmentSample>,
    pub val: Vec<SegmentSample>,
    pub test: Vec<SegmentSample>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl DatasetSplit {
    /// Seeded shuffle then cut. Train and validation sizes are rounded; the
    /// test split takes the remainder.
    pub fn new(samples: Vec<SegmentSample>, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let f = fractions;
        let valid = [f.train, f.val, f.test].iter().all(|v| v.is_finite() && *v >= 0.0);
        if !valid || (f.train + f.val + f.test - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split fractions {} / {} / {} must be non-negative and sum to 1",
                f.train, f.val, f.test
            )));
        }
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64 * f.train).round() as usize).min(n);
        let n_val = ((n as f64 * f.val).round() as usize).min(n - n_train);
        let mut slots: Vec<Option<SegmentSample>> = samples.into_iter().map(Some).collect();
        let mut take = |range: &[usize]| -> Vec<SegmentSample> {
            range.iter().map(|&i| slots[i].take().expect("index used once")).collect()
        };
        let train = take(&order[..n_train]);
        let val = take(&order[n_train..n_train + n_val]);
        let test = take(&order[n_train + n_val..]);
        Ok(DatasetSplit { train, val, test, seed })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: i64, f: i64, x: f64, y: f64) -> TrackRecord {
        TrackRecord {
            vehicle_id: v,
            frame_id: f,
            x,
            y,
        }
    }

    fn track(v: i64, frames: std::ops::Range<i64>) -> Vec<TrackRecord> {
        frames.map(|f| rec(v, f, 0.0, f as f64)).collect()
    }

    #[test]
    fn feet_are_converted() {
        let text = "vehicle_id,frame_id,local_x,local_y\n7,100,10.0,20.0\n";
        let r = parse_trajectory_reader(text.as_bytes(), Units::Feet).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0].x - 3.048).abs() < 1e-12);
        assert!((r[0].y - 6.096).abs() < 1e-12);
    }

    #[test]
    fn header_only_is_empty() {
        let r = parse_trajectory_reader("Vehicle_ID,Frame_ID,Local_X,Local_Y\n".as_bytes(), Units::Meters);
        assert!(r.unwrap().is_empty());
    }

    #[test]
    fn parse_errors_locate_the_problem() {
        let missing = parse_trajectory_reader("vehicle_id,frame_id,local_x\n".as_bytes(), Units::Meters);
        assert!(missing.unwrap_err().to_string().contains("local_y"));
        let text = "vehicle_id,frame_id,local_x,local_y\n1,1,0,0\n1,2,abc,0\n";
        match parse_trajectory_reader(text.as_bytes(), Units::Meters) {
            Err(Error::Format { line: Some(3), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let dup = "vehicle_id,frame_id,local_x,local_y\n1,1,0,0\n1,1,0,0\n";
        assert!(matches!(
            parse_trajectory_reader(dup.as_bytes(), Units::Meters),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn resample_strides_from_first_frame() {
        let r = resample(&track(1, 0..10), 2);
        let f: Vec<i64> = r.iter().map(|r| r.frame_id).collect();
        assert_eq!(f, [0, 2, 4, 6, 8]);
        assert_eq!(resample(&track(1, 3..9), 1), track(1, 3..9));
        assert_eq!(resample(&track(1, 0..80), 2).len(), 40);
        let odd = resample(&track(2, 5..9), 2);
        assert_eq!(odd.iter().map(|r| r.frame_id).collect::<Vec<_>>(), [5, 7]);
    }

    #[test]
    fn window_counts() {
        assert_eq!(segment(&track(1, 0..40), 1, 5, 40).len(), 1);
        let two = segment(&track(1, 0..45), 1, 5, 40);
        assert_eq!(two.iter().map(|w| w.start_frame).collect::<Vec<_>>(), [0, 5]);
        assert!(segment(&track(1, 0..39), 1, 5, 40).is_empty());
        let mut gappy = track(1, 0..50);
        gappy.retain(|r| r.frame_id != 20);
        assert!(segment(&gappy, 1, 5, 40).is_empty());
    }

    #[test]
    fn nearest_neighbors_with_tie_break() {
        let mut recs = Vec::new();
        for f in 0..3 {
            recs.push(rec(1, f, 0.0, 0.0));
            recs.push(rec(2, f, 1.0, 0.0));
            recs.push(rec(3, f, 5.0, 0.0));
            recs.push(rec(4, f, 2.0, 0.0));
            recs.push(rec(9, f, 0.0, -2.0));
        }
        let idx = TrackIndex::new(&recs);
        let w = SegmentWindow {
            vehicle_id: 1,
            start_frame: 0,
            step: 1,
            len: 3,
        };
        assert_eq!(rank_neighbors(&w, &idx, 3), [2, 4, 9, 3]);
        let s = select_neighbors(&w, &idx, 3, 3, Imputation::HoldLast).unwrap();
        assert_eq!(s.point(1, 0), [1.0, 0.0]);
        assert_eq!(s.point(2, 0), [2.0, 0.0]);
        let padded = select_neighbors(&w, &idx, 7, 3, Imputation::HoldLast).unwrap();
        assert_eq!(padded.real_agents(), 5);
        assert_eq!(padded.channel_mask()[5..], [false, false]);
    }

    #[test]
    fn neighbor_imputation() {
        let mut recs = track(1, 0..4);
        recs.push(rec(2, 2, 3.0, 3.0));
        recs.push(rec(2, 3, 4.0, 4.0));
        let idx = TrackIndex::new(&recs);
        let w = SegmentWindow {
            vehicle_id: 1,
            start_frame: 0,
            step: 1,
            len: 4,
        };
        let s = select_neighbors(&w, &idx, 2, 3, Imputation::HoldLast).unwrap();
        assert_eq!(s.point(1, 0), [3.0, 3.0]);
        assert_eq!(s.point(1, 3), [4.0, 4.0]);
        let z = select_neighbors(&w, &idx, 2, 3, Imputation::ZeroFill).unwrap();
        assert_eq!(z.point(1, 0), [0.0, 0.0]);
    }

    #[test]
    fn linear_synthetic_has_constant_steps() {
        let opts = SynthOptions {
            noise: 0.0,
            ..SynthOptions::default()
        };
        let s = &synthesize_scenes(1, SynthKind::Linear, 3, &opts).unwrap()[0].scene;
        let d0 = [s.point(0, 1)[0] - s.point(0, 0)[0], s.point(0, 1)[1] - s.point(0, 0)[1]];
        for f in 1..40 {
            let d = [s.point(0, f)[0] - s.point(0, f - 1)[0], s.point(0, f)[1] - s.point(0, f - 1)[1]];
            assert!((d[0] - d0[0]).abs() < 1e-9 && (d[1] - d0[1]).abs() < 1e-9);
        }
        assert_eq!(s.point(0, 14), [0.0, 0.0]);
    }

    #[test]
    fn turns_exceed_thirty_degrees() {
        let opts = SynthOptions {
            noise: 0.0,
            ..SynthOptions::default()
        };
        for sample in synthesize_scenes(20, SynthKind::Turn, 11, &opts).unwrap() {
            let s = &sample.scene;
            let h = |f: usize| {
                let (a, b) = (s.point(0, f), s.point(0, f + 1));
                (b[1] - a[1]).atan2(b[0] - a[0])
            };
            let mut delta = (h(38) - h(0)).abs();
            if delta > std::f64::consts::PI {
                delta = 2.0 * std::f64::consts::PI - delta;
            }
            assert!(delta.to_degrees() > 30.0, "heading change {}", delta.to_degrees());
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let samples = synthesize_mixed(23, 1, &SynthOptions::default()).unwrap();
        let a = DatasetSplit::new(samples.clone(), SplitFractions::default(), 5).unwrap();
        let b = DatasetSplit::new(samples.clone(), SplitFractions::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 23);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (16, 2, 5));
        let mut ids: Vec<_> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.source.clone())
            .map(|s| (s.file, s.vehicle_id))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 23);
    }
}
