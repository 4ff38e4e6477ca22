//! KITTI-format ingestion, the synthetic dataset generator and windowing.
//!
//! On-disk layout of one sequence:
//!
//! ```text
//! <root>/<seq>/poses.txt   12 floats per line, row-major 3x4 camera-to-world
//! <root>/<seq>/imu.csv     frame,k,ax,ay,az,wx,wy,wz
//! <root>/<seq>/flow.bin    little-endian f32 [N, 2, H, W]
//! <root>/<seq>/flow.json   {"h": H, "w": W, "frames": N}
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use criticvio_tensor::Tensor;
use nalgebra::SVD;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, rotation_log, Mat3, Pose6, Se3, Trajectory, Vec3};

pub const IMU_HEADER: [&str; 8] = ["frame", "k", "ax", "ay", "az", "wx", "wy", "wz"];

/// IMU readings for one frame interval: `[K, 6]`, accel (m/s^2) then gyro
/// (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct ImuWindow {
    pub samples: Array2<f64>,
}

impl ImuWindow {
    pub fn zeros(k: usize) -> Self {
        Self {
            samples: Array2::zeros((k, 6)),
        }
    }

    pub fn k(&self) -> usize {
        self.samples.nrows()
    }
}

/// Optical flow between two consecutive frames, `[2, H, W]` pixels, stored
/// as f32 to match the on-disk format bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; 2 * h * w],
        }
    }

    /// Channel 0 is horizontal (u), channel 1 vertical (v).
    pub fn at(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(c * self.h + i) * self.w + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Everything known about one recorded (or synthesized) sequence.
/// `imu[k]` and `flows[k]` describe the interval from frame `k` to `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    pub id: String,
    pub trajectory: Trajectory,
    pub imu: Vec<ImuWindow>,
    pub flows: Vec<FlowField>,
}

impl SequenceData {
    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.frames();
        if self.imu.len() + 1 != n || self.flows.len() + 1 != n {
            return Err(Error::ShapeMismatch(format!(
                "sequence {}: {} poses but {} IMU windows and {} flow fields",
                self.id,
                n,
                self.imu.len(),
                self.flows.len()
            )));
        }
        Ok(())
    }
}

/// One training or inference sample: `S - 1` consecutive transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub flows: Vec<FlowField>,
    pub imu: Vec<ImuWindow>,
    pub gt_rel: Vec<Pose6>,
    pub sequence_id: String,
    pub frame_index: usize,
}

impl SampleWindow {
    pub fn transitions(&self) -> usize {
        self.gt_rel.len()
    }
}

// ---------------------------------------------------------------- poses

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a KITTI ground-truth pose file.
pub fn load_kitti_poses(path: &Path) -> Result<Trajectory> {
    let reader = BufReader::new(File::open(path)?);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        if vals.len() != 12 {
            return Err(parse_err(path, lineno, format!("expected 12 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, lineno, "non-finite value"));
        }
        let rot = Mat3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        let det = rot.determinant();
        if (det - 1.0).abs() > 1e-2 {
            return Err(Error::BadRotation {
                path: path.to_path_buf(),
                line: lineno,
                det,
            });
        }
        let mut pose = Se3::new(rot, Vec3::new(vals[3], vals[7], vals[11]));
        if pose.orthonormality_error() > 1e-6 {
            log::warn!("{}:{}: re-orthonormalizing rotation", path.display(), lineno);
            pose.rotation = nearest_rotation(&rot);
        }
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(parse_err(path, 0, "no poses"));
    }
    Trajectory::new(poses)
}

fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// C `printf("%.16e")` formatting, as produced by the KITTI tools.
fn fmt_c_exp(v: f64) -> String {
    let s = format!("{v:.16e}");
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

pub fn write_kitti_poses(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in &traj.poses {
        let r = &p.rotation;
        let t = &p.translation;
        let row = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ];
        let line: Vec<String> = row.iter().map(|v| fmt_c_exp(*v)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

/// Frame-to-frame relative poses; the inverse of
/// [`crate::geometry::integrate_relative`].
pub fn relative_from_trajectory(traj: &Trajectory) -> Vec<Pose6> {
    traj.poses
        .windows(2)
        .map(|w| w[0].inverse().compose(&w[1]).to_pose6())
        .collect()
}

// ---------------------------------------------------------------- IMU

/// Reads an IMU CSV with exactly `k` rows per frame interval.
pub fn load_imu_csv(path: &Path, k: usize) -> Result<Vec<ImuWindow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().map(str::trim).ne(IMU_HEADER) {
        return Err(parse_err(path, 1, format!("unexpected header {:?}", header)));
    }
    let mut windows: Vec<ImuWindow> = Vec::new();
    let mut filled: Vec<usize> = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let lineno = idx + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 8 {
            return Err(parse_err(path, lineno, format!("expected 8 fields, found {}", rec.len())));
        }
        let frame: usize = rec[0].trim().parse().map_err(|_| parse_err(path, lineno, "bad frame index"))?;
        let kk: usize = rec[1].trim().parse().map_err(|_| parse_err(path, lineno, "bad sample index"))?;
        if kk >= k {
            return Err(parse_err(path, lineno, format!("sample index {kk} >= K = {k}")));
        }
        if frame > windows.len() {
            return Err(Error::MissingInterval(windows.len()));
        }
        if frame + 1 < windows.len() {
            return Err(parse_err(path, lineno, "frame rows out of order"));
        }
        if frame == windows.len() {
            if let Some(&n) = filled.last() {
                if n != k {
                    return Err(parse_err(path, lineno, format!("interval {} has {n} rows, expected {k}", frame - 1)));
                }
            }
            windows.push(ImuWindow::zeros(k));
            filled.push(0);
        }
        if filled[frame] != kk {
            return Err(parse_err(path, lineno, format!("expected sample {} of interval {frame}", filled[frame])));
        }
        for c in 0..6 {
            let v: f64 = rec[c + 2].trim().parse().map_err(|_| parse_err(path, lineno, "bad value"))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, "non-finite value"));
            }
            windows[frame].samples[(kk, c)] = v;
        }
        filled[frame] += 1;
    }
    if let Some(&n) = filled.last() {
        if n != k {
            return Err(parse_err(path, 0, format!("last interval has {n} rows, expected {k}")));
        }
    }
    Ok(windows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

/// Writes IMU windows using shortest round-trip float formatting.
pub fn write_imu_csv(path: &Path, imu: &[ImuWindow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(IMU_HEADER).map_err(|e| csv_err(path, e))?;
    for (frame, win) in imu.iter().enumerate() {
        for (kk, row) in win.samples.rows().into_iter().enumerate() {
            let mut rec = vec![frame.to_string(), kk.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- flow

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowHeader {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
}

pub fn write_flow(bin: &Path, json: &Path, flows: &[FlowField]) -> Result<()> {
    let (h, w) = flows.first().map(|f| (f.h, f.w)).unwrap_or((0, 0));
    let mut out = BufWriter::new(File::create(bin)?);
    for f in flows {
        if (f.h, f.w) != (h, w) {
            return Err(Error::ShapeMismatch("flow fields differ in size".into()));
        }
        for v in &f.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    let header = FlowHeader {
        h,
        w,
        frames: flows.len(),
    };
    fs::write(json, serde_json::to_string(&header)?)?;
    Ok(())
}

pub fn load_flow(bin: &Path, json: &Path) -> Result<Vec<FlowField>> {
    let header: FlowHeader = serde_json::from_str(&fs::read_to_string(json)?)?;
    let per = 2 * header.h * header.w;
    let mut bytes = Vec::new();
    File::open(bin)?.read_to_end(&mut bytes)?;
    if bytes.len() != per * header.frames * 4 {
        return Err(parse_err(
            bin,
            0,
            format!("expected {} bytes, found {}", per * header.frames * 4, bytes.len()),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let flows: Vec<FlowField> = vals
        .chunks_exact(per.max(1))
        .take(header.frames)
        .map(|c| FlowField {
            h: header.h,
            w: header.w,
            data: c.to_vec(),
        })
        .collect();
    if flows.iter().any(|f| !f.is_finite()) {
        return Err(parse_err(bin, 0, "non-finite flow value"));
    }
    Ok(flows)
}

/// Bilinear resize (pixel-center aligned). Displacements are rescaled by the
/// per-axis size ratio so they stay in pixels of the new grid.
pub fn resize_flow(f: &FlowField, h: usize, w: usize) -> FlowField {
    if (f.h, f.w) == (h, w) {
        return f.clone();
    }
    let sy = f.h as f64 / h as f64;
    let sx = f.w as f64 / w as f64;
    let mut out = FlowField::zeros(h, w);
    for i in 0..h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (f.h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(f.h - 1);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (f.w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(f.w - 1);
            let fx = x - x0 as f64;
            for c in 0..2 {
                let g = |a, b| f.at(c, a, b) as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1))
                    + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1));
                let scale = if c == 0 { 1.0 / sx } else { 1.0 / sy };
                out.set(c, i, j, (v * scale) as f32);
            }
        }
    }
    out
}

// ---------------------------------------------------------------- dataset I/O

pub fn write_sequence(root: &Path, seq: &SequenceData) -> Result<PathBuf> {
    seq.check()?;
    let dir = root.join(&seq.id);
    fs::create_dir_all(&dir)?;
    write_kitti_poses(&dir.join("poses.txt"), &seq.trajectory)?;
    write_imu_csv(&dir.join("imu.csv"), &seq.imu)?;
    write_flow(&dir.join("flow.bin"), &dir.join("flow.json"), &seq.flows)?;
    Ok(dir)
}

/// Loads one sequence directory, resizing flow to `image` = (H, W) if needed.
pub fn load_sequence(root: &Path, id: &str, k: usize, image: (usize, usize)) -> Result<SequenceData> {
    let dir = root.join(id);
    let trajectory = load_kitti_poses(&dir.join("poses.txt"))?;
    let imu = load_imu_csv(&dir.join("imu.csv"), k)?;
    let flows = load_flow(&dir.join("flow.bin"), &dir.join("flow.json"))?
        .iter()
        .map(|f| resize_flow(f, image.0, image.1))
        .collect();
    let seq = SequenceData {
        id: id.to_string(),
        trajectory,
        imu,
        flows,
    };
    seq.check()?;
    Ok(seq)
}

/// Sequence ids (subdirectory names) under a dataset root, sorted.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && entry.path().join("poses.txt").exists() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

// ---------------------------------------------------------------- split

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl DatasetSplit {
    pub fn new(train: Vec<String>, eval: Vec<String>) -> Result<Self> {
        let t: HashSet<&String> = train.iter().collect();
        if let Some(dup) = eval.iter().find(|e| t.contains(e)) {
            return Err(Error::Config(format!("sequence {dup} is in both train and eval")));
        }
        Ok(Self { train, eval })
    }

    /// KITTI odometry split: train 00-02, 06, 08, 09; eval 05, 07, 10.
    /// Sequence 04 is left out of training.
    pub fn kitti() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            train: s(&["00", "01", "02", "06", "08", "09"]),
            eval: s(&["05", "07", "10"]),
        }
    }
}

// ---------------------------------------------------------------- synthetic

/// Parameters of the synthetic car-like generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Frame period (s).
    pub dt: f64,
    /// IMU samples per frame interval.
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// Mean forward speed (m/s).
    pub speed_mean: f64,
    /// Per-frame std of the speed random-walk increments (m/s).
    pub speed_step: f64,
    /// Random-walk bound around the mean speed (m/s).
    pub speed_range: f64,
    /// Per-frame std of the yaw-rate random-walk increments (rad/s).
    pub yaw_rate_step: f64,
    /// Yaw-rate bound (rad/s).
    pub yaw_rate_range: f64,
    /// Exponential-moving-average factor applied to both walks.
    pub smoothing: f64,
    /// Std of the small roll/pitch wobble (rad).
    pub tilt_sigma: f64,
    pub sigma_a: f64,
    pub sigma_w: f64,
    pub sigma_f: f64,
    /// Depth of the fronto-parallel plane (m).
    pub depth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            k: 11,
            height: 16,
            width: 32,
            speed_mean: 8.0,
            speed_step: 1.0,
            speed_range: 6.0,
            yaw_rate_step: 0.1,
            yaw_rate_range: 0.5,
            smoothing: 0.3,
            tilt_sigma: 0.005,
            sigma_a: 0.05,
            sigma_w: 0.002,
            sigma_f: 0.02,
            depth: 10.0,
        }
    }
}

impl SynthConfig {
    pub fn noiseless(mut self) -> Self {
        self.sigma_a = 0.0;
        self.sigma_w = 0.0;
        self.sigma_f = 0.0;
        self
    }

    pub fn still(mut self) -> Self {
        self.speed_mean = 0.0;
        self.speed_step = 0.0;
        self.speed_range = 0.0;
        self.yaw_rate_step = 0.0;
        self.yaw_rate_range = 0.0;
        self.tilt_sigma = 0.0;
        self
    }
}

/// Instantaneous motion field of a fronto-parallel plane at `depth` for
/// camera translation `t` and rotation `w`, on a normalized grid
/// `u, v in [-1, 1]`, multiplied by `scale` pixels per unit.
pub fn motion_field(t: &Vec3, w: &Vec3, h: usize, wd: usize, depth: f64, scale: f64) -> FlowField {
    let grid = |i: usize, n: usize| if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut f = FlowField::zeros(h, wd);
    for i in 0..h {
        let v = grid(i, h);
        for j in 0..wd {
            let u = grid(j, wd);
            let fu = (-t.x + u * t.z) / depth + u * v * w.x - (1.0 + u * u) * w.y + v * w.z;
            let fv = (-t.y + v * t.z) / depth + (1.0 + v * v) * w.x - u * v * w.y - u * w.z;
            f.set(0, i, j, (fu * scale) as f32);
            f.set(1, i, j, (fv * scale) as f32);
        }
    }
    f
}

fn ry(a: f64) -> Mat3 {
    euler_to_matrix(&Vec3::new(0.0, a, 0.0))
}

/// Generates `n_sequences` deterministic synthetic sequences of
/// `frames_per_seq` frames each. Sequence ids are zero-padded indices.
pub fn synth_dataset(seed: u64, n_sequences: usize, frames_per_seq: usize, cfg: &SynthConfig) -> Result<Vec<SequenceData>> {
    if n_sequences == 0 || frames_per_seq < 2 {
        return Err(Error::Domain("need at least one sequence of two frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sequences)
        .map(|i| Ok(synth_sequence(&mut rng, format!("{i:02}"), frames_per_seq, cfg)))
        .collect()
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

fn synth_sequence(rng: &mut ChaCha8Rng, id: String, n: usize, cfg: &SynthConfig) -> SequenceData {
    let dt = cfg.dt;
    let a = cfg.smoothing;

    // Smoothed random walks for speed and yaw rate.
    let (mut walk_v, mut walk_w) = (0.0f64, 0.0f64);
    let (mut sv, mut sw) = (0.0f64, 0.0f64);
    let (mut tilt_x, mut tilt_z) = (0.0f64, 0.0f64);
    let mut heading = 0.0f64;
    let mut pos = Vec3::zeros();
    let mut poses = Vec::with_capacity(n);
    for _ in 0..n {
        let rot = ry(heading) * euler_to_matrix(&Vec3::new(tilt_x, 0.0, tilt_z));
        poses.push(Se3::new(rot, pos));

        walk_v = (walk_v + gauss(rng, cfg.speed_step)).clamp(-cfg.speed_range, cfg.speed_range);
        walk_w = (walk_w + gauss(rng, cfg.yaw_rate_step)).clamp(-cfg.yaw_rate_range, cfg.yaw_rate_range);
        sv = (1.0 - a) * sv + a * walk_v;
        sw = (1.0 - a) * sw + a * walk_w;
        tilt_x = (1.0 - a) * tilt_x + a * gauss(rng, cfg.tilt_sigma);
        tilt_z = (1.0 - a) * tilt_z + a * gauss(rng, cfg.tilt_sigma);
        let speed = (cfg.speed_mean + sv).max(0.0);
        pos += rot * Vec3::new(0.0, 0.0, speed * dt);
        heading += sw * dt;
    }
    let trajectory = Trajectory {
        poses,
        timestamps: Some((0..n).map(|i| i as f64 * dt).collect()),
    };

    // Frame-level body-frame acceleration from second differences.
    let p = |k: usize| trajectory.poses[k].translation;
    let accel: Vec<Vec3> = (0..n)
        .map(|k| {
            if n < 3 {
                return Vec3::zeros();
            }
            let c = k.clamp(1, n - 2);
            let d2 = (p(c + 1) - 2.0 * p(c) + p(c - 1)) / (dt * dt);
            trajectory.poses[k].rotation.transpose() * d2
        })
        .collect();
    // Interval angular velocity, then averaged onto frames.
    let omega_iv: Vec<Vec3> = trajectory
        .poses
        .windows(2)
        .map(|w| rotation_log(&(w[0].rotation.transpose() * w[1].rotation)) / dt)
        .collect();
    let omega: Vec<Vec3> = (0..n)
        .map(|k| match (k.checked_sub(1).and_then(|j| omega_iv.get(j)), omega_iv.get(k)) {
            (Some(a), Some(b)) => (a + b) / 2.0,
            (Some(a), None) => *a,
            (None, Some(b)) => *b,
            (None, None) => Vec3::zeros(),
        })
        .collect();

    let kk = cfg.k;
    let mut imu = Vec::with_capacity(n - 1);
    let mut flows = Vec::with_capacity(n - 1);
    let scale = cfg.width as f64 / 4.0;
    for k in 0..n - 1 {
        let mut win = ImuWindow::zeros(kk);
        for j in 0..kk {
            let s = if kk > 1 { j as f64 / (kk - 1) as f64 } else { 0.0 };
            let acc = accel[k] * (1.0 - s) + accel[k + 1] * s;
            let gyr = omega[k] * (1.0 - s) + omega[k + 1] * s;
            for c in 0..3 {
                win.samples[(j, c)] = acc[c] + gauss(rng, cfg.sigma_a);
                win.samples[(j, c + 3)] = gyr[c] + gauss(rng, cfg.sigma_w);
            }
        }
        imu.push(win);

        let rel = trajectory.poses[k].inverse().compose(&trajectory.poses[k + 1]);
        let mut f = motion_field(&rel.translation, &rotation_log(&rel.rotation), cfg.height, cfg.width, cfg.depth, scale);
        if cfg.sigma_f > 0.0 {
            for v in f.data.iter_mut() {
                *v += gauss(rng, cfg.sigma_f) as f32;
            }
        }
        flows.push(f);
    }

    SequenceData {
        id,
        trajectory,
        imu,
        flows,
    }
}

// ---------------------------------------------------------------- windows

/// Sliding windows of `s` frames (`s - 1` transitions) with the given stride.
pub fn make_windows(seq: &SequenceData, s: usize, stride: usize) -> Result<Vec<SampleWindow>> {
    seq.check()?;
    if s < 2 || stride == 0 {
        return Err(Error::Domain(format!("window length {s} / stride {stride}")));
    }
    if seq.frames() < s {
        return Err(Error::Domain(format!(
            "sequence {} has {} frames, window needs {s}",
            seq.id,
            seq.frames()
        )));
    }
    let rels = relative_from_trajectory(&seq.trajectory);
    Ok((0..=seq.frames() - s)
        .step_by(stride)
        .map(|f| window_at(seq, &rels, f, s))
        .collect())
}

/// Windows covering every transition once: stride `s - 1`, plus a final
/// window aligned to the sequence end when the stride leaves a remainder.
pub fn covering_windows(seq: &SequenceData, s: usize) -> Result<Vec<SampleWindow>> {
    let mut wins = make_windows(seq, s, s - 1)?;
    let last_start = seq.frames() - s;
    if wins.last().map(|w| w.frame_index) != Some(last_start) {
        let rels = relative_from_trajectory(&seq.trajectory);
        wins.push(window_at(seq, &rels, last_start, s));
    }
    Ok(wins)
}

fn window_at(seq: &SequenceData, rels: &[Pose6], f: usize, s: usize) -> SampleWindow {
    SampleWindow {
        flows: seq.flows[f..f + s - 1].to_vec(),
        imu: seq.imu[f..f + s - 1].to_vec(),
        gt_rel: rels[f..f + s - 1].to_vec(),
        sequence_id: seq.id.clone(),
        frame_index: f,
    }
}

// ---------------------------------------------------------------- normalization

/// Per-channel input statistics, computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub flow_mean: [f64; 2],
    pub flow_std: [f64; 2],
    pub imu_mean: [f64; 6],
    pub imu_std: [f64; 6],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            flow_mean: [0.0; 2],
            flow_std: [1.0; 2],
            imu_mean: [0.0; 6],
            imu_std: [1.0; 6],
        }
    }
}

fn finish_std(sum: f64, sq: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    (mean, if std > 1e-8 { std } else { 1.0 })
}

impl NormStats {
    pub fn compute(seqs: &[SequenceData]) -> Self {
        let mut fs = [0.0; 2];
        let mut fq = [0.0; 2];
        let mut fn_ = 0.0;
        let mut is = [0.0; 6];
        let mut iq = [0.0; 6];
        let mut in_ = 0.0;
        for seq in seqs {
            for f in &seq.flows {
                let hw = f.h * f.w;
                for c in 0..2 {
                    for v in &f.data[c * hw..(c + 1) * hw] {
                        let v = *v as f64;
                        fs[c] += v;
                        fq[c] += v * v;
                    }
                }
                fn_ += hw as f64;
            }
            for w in &seq.imu {
                for row in w.samples.rows() {
                    for c in 0..6 {
                        is[c] += row[c];
                        iq[c] += row[c] * row[c];
                    }
                    in_ += 1.0;
                }
            }
        }
        let mut out = Self::default();
        if fn_ > 0.0 {
            for c in 0..2 {
                (out.flow_mean[c], out.flow_std[c]) = finish_std(fs[c], fq[c], fn_);
            }
        }
        if in_ > 0.0 {
            for c in 0..6 {
                (out.imu_mean[c], out.imu_std[c]) = finish_std(is[c], iq[c], in_);
            }
        }
        out
    }
}

/// Model-ready tensors for a batch of windows.
pub struct Batch {
    /// `[B, S-1, 2, H, W]`, normalized.
    pub flow: Tensor,
    /// `[B, S-1, K, 6]`, normalized.
    pub imu: Tensor,
    /// `[B, S-1, 6]` ground-truth relative poses.
    pub y: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.y.shape()[0]
    }
}

pub fn make_batch(windows: &[&SampleWindow], norm: &NormStats) -> Result<Batch> {
    let first = windows.first().ok_or_else(|| Error::Domain("empty batch".into()))?;
    let b = windows.len();
    let t = first.transitions();
    let (h, w) = (first.flows[0].h, first.flows[0].w);
    let k = first.imu[0].k();
    let mut flow = Vec::with_capacity(b * t * 2 * h * w);
    let mut imu = Vec::with_capacity(b * t * k * 6);
    let mut y = Vec::with_capacity(b * t * 6);
    for win in windows {
        if win.transitions() != t {
            return Err(Error::ShapeMismatch("windows differ in length".into()));
        }
        for s in 0..t {
            let f = &win.flows[s];
            if (f.h, f.w) != (h, w) {
                return Err(Error::ShapeMismatch(format!("flow {}x{} vs {}x{}", f.h, f.w, h, w)));
            }
            for c in 0..2 {
                for v in &f.data[c * h * w..(c + 1) * h * w] {
                    flow.push((*v as f64 - norm.flow_mean[c]) / norm.flow_std[c]);
                }
            }
            let iw = &win.imu[s];
            if iw.k() != k {
                return Err(Error::ShapeMismatch(format!("IMU K {} vs {}", iw.k(), k)));
            }
            for row in iw.samples.rows() {
                for c in 0..6 {
                    imu.push((row[c] - norm.imu_mean[c]) / norm.imu_std[c]);
                }
            }
            y.extend(win.gt_rel[s].to_array());
        }
    }
    let arr = |shape: &[usize], v: Vec<f64>| ArrayD::from_shape_vec(IxDyn(shape), v).expect("batch shape");
    Ok(Batch {
        flow: Tensor::constant(arr(&[b, t, 2, h, w], flow)),
        imu: Tensor::constant(arr(&[b, t, k, 6], imu)),
        y: Tensor::constant(arr(&[b, t, 6], y)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::integrate_relative;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn identity_pose_line() {
        let d = tmp();
        let p = d.path().join("poses.txt");
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let traj = load_kitti_poses(&p).unwrap();
        assert_eq!(traj.len(), 2);
        assert_eq!(traj.poses[0], Se3::identity());
        assert_eq!(relative_from_trajectory(&traj), vec![Pose6::zero()]);
    }

    #[test]
    fn pose_parse_errors() {
        let d = tmp();
        let p = d.path().join("poses.txt");
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0\n").unwrap();
        match load_kitti_poses(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert!(matches!(load_kitti_poses(&p), Err(Error::BadRotation { line: 1, .. })));
        fs::write(&p, "1 0 0 0 0 1 0 0 0 0 1 x\n").unwrap();
        assert!(matches!(load_kitti_poses(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn slightly_skewed_rotation_is_repaired() {
        let d = tmp();
        let p = d.path().join("poses.txt");
        fs::write(&p, "1 0.0001 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let traj = load_kitti_poses(&p).unwrap();
        assert!(traj.poses[0].orthonormality_error() < 1e-12);
    }

    #[test]
    fn pose_file_format_and_roundtrip() {
        assert_eq!(fmt_c_exp(1.0), "1.0000000000000000e+00");
        assert_eq!(fmt_c_exp(-0.00123), "-1.2300000000000000e-03");
        assert_eq!(fmt_c_exp(0.0), "0.0000000000000000e+00");
        assert_eq!(fmt_c_exp(123.5), "1.2350000000000000e+02");
        let seqs = synth_dataset(3, 1, 30, &SynthConfig::default()).unwrap();
        let d = tmp();
        let p = d.path().join("poses.txt");
        write_kitti_poses(&p, &seqs[0].trajectory).unwrap();
        let back = load_kitti_poses(&p).unwrap();
        for (a, b) in back.poses.iter().zip(&seqs[0].trajectory.poses) {
            assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-15);
        }
    }

    #[test]
    fn relative_simple_cases() {
        let traj = Trajectory::new(vec![Se3::identity(); 4]).unwrap();
        assert!(relative_from_trajectory(&traj).iter().all(|p| *p == Pose6::zero()));
        let traj = Trajectory::new(vec![Se3::identity(), Se3::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0))]).unwrap();
        assert_eq!(relative_from_trajectory(&traj), vec![Pose6::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn relative_integrate_roundtrip(raw in proptest::collection::vec(
            (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -PI..PI, -1.4..1.4f64, -PI..PI), 2..40)) {
            let poses: Vec<Se3> = raw.iter()
                .map(|(x, y, z, a, b, c)| Se3::new(euler_to_matrix(&Vec3::new(*a, *b, *c)), Vec3::new(*x, *y, *z) * 10.0))
                .collect();
            let traj = Trajectory::new(poses).unwrap();
            let rels = relative_from_trajectory(&traj);
            let back = integrate_relative(&traj.poses[0], &rels);
            for (a, b) in back.poses.iter().zip(&traj.poses) {
                prop_assert!((a.to_homogeneous() - b.to_homogeneous()).abs().max() < 1e-9);
            }
        }
    }

    #[test]
    fn imu_csv_cases() {
        let d = tmp();
        let p = d.path().join("imu.csv");
        let zeros = vec![ImuWindow::zeros(11); 3];
        write_imu_csv(&p, &zeros).unwrap();
        assert_eq!(load_imu_csv(&p, 11).unwrap(), zeros);

        let mut w = ImuWindow::zeros(11);
        for k in 0..11 {
            w.samples[(k, 0)] = k as f64 * 0.5;
        }
        write_imu_csv(&p, std::slice::from_ref(&w)).unwrap();
        let back = load_imu_csv(&p, 11).unwrap();
        assert_eq!(back[0].samples.column(0).to_vec(), (0..11).map(|k| k as f64 * 0.5).collect::<Vec<_>>());

        let mut text = String::from("frame,k,ax,ay,az,wx,wy,wz\n");
        for f in [0, 2] {
            for k in 0..2 {
                text.push_str(&format!("{f},{k},0,0,0,0,0,0\n"));
            }
        }
        fs::write(&p, text).unwrap();
        assert!(matches!(load_imu_csv(&p, 2), Err(Error::MissingInterval(1))));

        fs::write(&p, "frame,k,ax,ay,az,wx,wy,wz\n0,0,0,0,0,0,0,0\n1,0,0,0,0,0,0,0\n1,1,0,0,0,0,0,0\n").unwrap();
        assert!(matches!(load_imu_csv(&p, 2), Err(Error::Parse { .. })));
        fs::write(&p, "frame,k,ax\n").unwrap();
        assert!(matches!(load_imu_csv(&p, 2), Err(Error::Parse { .. })));
    }

    #[test]
    fn synthetic_roundtrip_is_bitwise() {
        let seqs = synth_dataset(11, 2, 20, &SynthConfig::default()).unwrap();
        let d = tmp();
        for s in &seqs {
            write_sequence(d.path(), s).unwrap();
        }
        assert_eq!(list_sequences(d.path()).unwrap(), vec!["00", "01"]);
        let back = load_sequence(d.path(), "01", 11, (16, 32)).unwrap();
        assert_eq!(back.imu, seqs[1].imu);
        assert_eq!(back.flows, seqs[1].flows);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(5, 2, 15, &SynthConfig::default()).unwrap();
        let b = synth_dataset(5, 2, 15, &SynthConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(6, 2, 15, &SynthConfig::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_motion_gives_zero_signals() {
        let cfg = SynthConfig::default().noiseless().still();
        let seqs = synth_dataset(1, 1, 10, &cfg).unwrap();
        assert!(seqs[0].flows.iter().all(|f| f.data.iter().all(|v| *v == 0.0)));
        assert!(seqs[0].imu.iter().all(|w| w.samples.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn pure_yaw_rate_gives_vortex() {
        let wz = 0.05;
        let (h, w) = (5, 9);
        let scale = w as f64 / 4.0;
        let f = motion_field(&Vec3::zeros(), &Vec3::new(0.0, 0.0, wz), h, w, 10.0, scale);
        for i in 0..h {
            let v = -1.0 + 2.0 * i as f64 / (h - 1) as f64;
            for j in 0..w {
                let u = -1.0 + 2.0 * j as f64 / (w - 1) as f64;
                assert_eq!(f.at(0, i, j), (v * wz * scale) as f32);
                assert_eq!(f.at(1, i, j), (-u * wz * scale) as f32);
            }
        }
    }

    #[test]
    fn imu_double_integration_tracks_positions() {
        let cfg = SynthConfig::default().noiseless();
        let seq = &synth_dataset(9, 1, 40, &cfg).unwrap()[0];
        let dt = cfg.dt;
        let p = |k: usize| seq.trajectory.poses[k].translation;
        let start = 5;
        let mut pos = p(start);
        let mut vel = (p(start) - p(start - 1)) / dt;
        for k in start..start + 10 {
            let acc_body = Vec3::new(seq.imu[k].samples[(0, 0)], seq.imu[k].samples[(0, 1)], seq.imu[k].samples[(0, 2)]);
            vel += seq.trajectory.poses[k].rotation * acc_body * dt;
            pos += vel * dt;
        }
        let truth = p(start + 10);
        let travelled = (truth - p(start)).norm();
        assert!(travelled > 1.0);
        assert!((pos - truth).norm() <= 0.01 * travelled, "{} vs {}", pos, truth);
    }

    #[test]
    fn synthetic_gyro_matches_relative_rotation() {
        let cfg = SynthConfig::default().noiseless();
        let seq = &synth_dataset(2, 1, 20, &cfg).unwrap()[0];
        let rels = relative_from_trajectory(&seq.trajectory);
        // interval-mean gyro integrates to roughly the relative rotation
        for (k, rel) in rels.iter().enumerate().skip(1).take(15) {
            let mean_wy = seq.imu[k].samples.column(4).mean().unwrap();
            assert!((mean_wy * cfg.dt - rel.r.y).abs() < 0.3 * rel.r.y.abs() + 1e-3);
        }
    }

    #[test]
    fn window_counts_and_roundtrip() {
        let seqs = synth_dataset(4, 1, 6, &SynthConfig::default()).unwrap();
        let four = SequenceData {
            id: "x".into(),
            trajectory: Trajectory::new(seqs[0].trajectory.poses[..4].to_vec()).unwrap(),
            imu: seqs[0].imu[..3].to_vec(),
            flows: seqs[0].flows[..3].to_vec(),
        };
        let w = make_windows(&four, 4, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].transitions(), 3);
        let w = make_windows(&seqs[0], 4, 1).unwrap();
        assert_eq!(w.len(), 3);
        for win in &w {
            let start = seqs[0].trajectory.poses[win.frame_index];
            let traj = integrate_relative(&start, &win.gt_rel);
            for (k, pose) in traj.poses.iter().enumerate() {
                let truth = seqs[0].trajectory.poses[win.frame_index + k];
                assert!((pose.to_homogeneous() - truth.to_homogeneous()).abs().max() < 1e-9);
            }
        }
        assert!(make_windows(&seqs[0], 7, 1).is_err());
    }

    #[test]
    fn covering_windows_cover_every_transition_once_or_twice() {
        let seq = &synth_dataset(4, 1, 12, &SynthConfig::default()).unwrap()[0];
        let w = covering_windows(seq, 4).unwrap();
        let starts: Vec<usize> = w.iter().map(|w| w.frame_index).collect();
        assert_eq!(starts, vec![0, 3, 6, 8]);
    }

    #[test]
    fn split_validation() {
        let k = DatasetSplit::kitti();
        assert!(!k.train.contains(&"04".to_string()));
        assert!(DatasetSplit::new(k.train.clone(), k.eval.clone()).is_ok());
        assert!(DatasetSplit::new(vec!["00".into()], vec!["00".into()]).is_err());
    }

    #[test]
    fn resize_rescales_displacements() {
        let mut f = FlowField::zeros(4, 8);
        for i in 0..4 {
            for j in 0..8 {
                f.set(0, i, j, 2.0);
                f.set(1, i, j, -1.0);
            }
        }
        let r = resize_flow(&f, 2, 4);
        assert!(r.data[..8].iter().all(|v| *v == 1.0));
        assert!(r.data[8..].iter().all(|v| *v == -0.5));
        assert_eq!(resize_flow(&f, 4, 8), f);
    }

    #[test]
    fn norm_stats_and_batch() {
        let seqs = synth_dataset(8, 2, 20, &SynthConfig::default()).unwrap();
        let norm = NormStats::compute(&seqs);
        assert!(norm.flow_std.iter().chain(&norm.imu_std).all(|s| *s > 0.0));
        let wins: Vec<SampleWindow> = seqs.iter().flat_map(|s| make_windows(s, 4, 1).unwrap()).collect();
        let refs: Vec<&SampleWindow> = wins.iter().collect();
        let b = make_batch(&refs, &norm).unwrap();
        assert_eq!(b.flow.shape(), &[wins.len(), 3, 2, 16, 32]);
        assert_eq!(b.imu.shape(), &[wins.len(), 3, 11, 6]);
        assert_eq!(b.y.shape(), &[wins.len(), 3, 6]);
        assert_eq!(b.y.value()[[1, 2, 3]], wins[1].gt_rel[2].r.x);
    }
}
