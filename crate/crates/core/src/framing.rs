//! Event framing: per-track start/end lines fitted from anchor points, the
//! per-bin event slice they delimit, centred zero padding to a common length
//! `d_m`, and six-bin spatio-temporal windows.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::sim::{Direction, GroundTruthTrack};
use crate::waterfall::Waterfall;

/// Rows in a 2D window (6 × 0.68 m = 4.08 m of fibre at the default pitch).
pub const WINDOW_BINS: usize = 6;
/// Rows above the centre bin; the window covers `center−2 ..= center+3`.
pub const WINDOW_LEAD: usize = 2;
pub const DEFAULT_BIN_RANGE: (usize, usize) = (250, 750);
pub const ANCHOR_STEP: usize = 50;
pub const DEFAULT_DM_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bin: usize,
    pub s_start: f64,
    pub s_end: f64,
}

impl Anchor {
    pub fn new(bin: usize, s_start: f64, s_end: f64) -> Result<Self> {
        if !(s_end > s_start) {
            return Err(invalid(format!(
                "anchor at bin {bin}: end {s_end} must follow start {s_start}"
            )));
        }
        Ok(Anchor { bin, s_start, s_end })
    }
}

/// Parses an anchor file: one `bin,s_start,s_end` per line, `#` comments.
pub fn parse_anchors(text: &str) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Config { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected bin,s_start,s_end, got {line:?}")));
        }
        let bin = fields[0].parse::<usize>().map_err(|e| bad(e.to_string()))?;
        let s = fields[1].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        let e = fields[2].parse::<f64>().map_err(|e| bad(e.to_string()))?;
        out.push(Anchor::new(bin, s, e).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}

/// Start line `c1·b + c2`, end line `c3·b + c4`, in shots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackFit {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub fit_residual_rms: f64,
}

impl TrackFit {
    pub fn start(&self, bin: usize) -> f64 {
        self.c1 * bin as f64 + self.c2
    }

    pub fn end(&self, bin: usize) -> f64 {
        self.c3 * bin as f64 + self.c4
    }

    /// Inclusive frame at `bin`, rounded half away from zero.
    pub fn frame(&self, bin: usize) -> (i64, i64) {
        (self.start(bin).round() as i64, self.end(bin).round() as i64)
    }
}

impl From<&GroundTruthTrack> for TrackFit {
    fn from(gt: &GroundTruthTrack) -> Self {
        TrackFit {
            c1: gt.c1,
            c2: gt.c2,
            c3: gt.c3,
            c4: gt.c4,
            fit_residual_rms: 0.0,
        }
    }
}

/// Ordinary least squares `y = slope·x + intercept`; returns the fit and the
/// sum of squared residuals.
fn ols(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    (slope, intercept, sse)
}

pub fn fit_track_lines(anchors: &[Anchor]) -> Result<TrackFit> {
    let mut bins: Vec<usize> = anchors.iter().map(|a| a.bin).collect();
    bins.sort_unstable();
    bins.dedup();
    if bins.len() < 2 {
        return Err(Error::Underdetermined(bins.len()));
    }
    // Fitting in anchor order would make rounding depend on that order.
    let mut sorted = anchors.to_vec();
    sorted.sort_by(|a, b| {
        (a.bin, a.s_start, a.s_end)
            .partial_cmp(&(b.bin, b.s_start, b.s_end))
            .unwrap()
    });
    let starts: Vec<(f64, f64)> = sorted.iter().map(|a| (a.bin as f64, a.s_start)).collect();
    let ends: Vec<(f64, f64)> = sorted.iter().map(|a| (a.bin as f64, a.s_end)).collect();
    let (c1, c2, sse_start) = ols(&starts);
    let (c3, c4, sse_end) = ols(&ends);
    let fit = TrackFit {
        c1,
        c2,
        c3,
        c4,
        fit_residual_rms: ((sse_start + sse_end) / (2 * sorted.len()) as f64).sqrt(),
    };
    let (lo, hi) = (bins[0], *bins.last().unwrap());
    if fit.end(lo) <= fit.start(lo) || fit.end(hi) <= fit.start(hi) {
        let crossing = if c1 != c3 { (c4 - c2) / (c1 - c3) } else { lo as f64 };
        return Err(Error::InvertedFrame { bin: crossing });
    }
    Ok(fit)
}

/// Noisy anchors every `step` bins across `range`, drawn around the exact
/// lines of a ground-truth track; stands in for hand-marked anchors.
pub fn anchors_from_truth<R: Rng>(
    gt: &GroundTruthTrack,
    range: (usize, usize),
    step: usize,
    noise_rms: f64,
    rng: &mut R,
) -> Result<Vec<Anchor>> {
    anchors_around(&TrackFit::from(gt), range, step, noise_rms, rng)
}

/// As `anchors_from_truth`, around any pair of exact lines.
pub fn anchors_around<R: Rng>(
    fit: &TrackFit,
    range: (usize, usize),
    step: usize,
    noise_rms: f64,
    rng: &mut R,
) -> Result<Vec<Anchor>> {
    let normal = Normal::new(0.0, noise_rms).map_err(|e| invalid(e.to_string()))?;
    (range.0..=range.1)
        .step_by(step.max(1))
        .map(|b| {
            let s = fit.start(b) + normal.sample(rng);
            let e = fit.end(b) + normal.sample(rng);
            Anchor::new(b, s, e)
        })
        .collect()
}

/// The event slice `ρ(b, start..=end)` at one bin.
pub fn frame_event(w: &Waterfall, fit: &TrackFit, bin: usize) -> Result<Vec<f64>> {
    let (s, e) = fit.frame(bin);
    if bin >= w.bins() || s < 0 || e >= w.shots() as i64 || e < s {
        return Err(Error::FrameOutOfRange {
            bin,
            start: s,
            end: e,
            shots: w.shots(),
        });
    }
    Ok(w.row(bin)[s as usize..=e as usize]
        .iter()
        .map(|&v| v as f64)
        .collect())
}

/// Centres `raw` in `d_m` zeros: `floor((d_m − len)/2)` on the left, the
/// remainder on the right.
pub fn pad_to(raw: &[f64], d_m: usize) -> Result<Vec<f64>> {
    if raw.len() > d_m {
        return Err(Error::SampleTooLong {
            len: raw.len(),
            d_m,
        });
    }
    let left = (d_m - raw.len()) / 2;
    let mut out = vec![0.0; d_m];
    out[left..left + raw.len()].copy_from_slice(raw);
    Ok(out)
}

fn window_rows(w: &Waterfall, center_bin: usize) -> Result<std::ops::Range<usize>> {
    if center_bin < WINDOW_LEAD || center_bin + (WINDOW_BINS - WINDOW_LEAD) > w.bins() {
        return Err(invalid(format!(
            "window centred at bin {center_bin} leaves [0, {})",
            w.bins()
        )));
    }
    let first = center_bin - WINDOW_LEAD;
    Ok(first..first + WINDOW_BINS)
}

/// Six framed-and-padded rows, bins `center−2 ..= center+3`, row-major.
pub fn window_2d(w: &Waterfall, fit: &TrackFit, center_bin: usize, d_m: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(WINDOW_BINS * d_m);
    for b in window_rows(w, center_bin)? {
        out.extend(pad_to(&frame_event(w, fit, b)?, d_m)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleShape {
    OneD { len: usize },
    TwoD { rows: usize, len: usize },
}

impl SampleShape {
    pub fn len(&self) -> usize {
        match *self {
            SampleShape::OneD { len } => len,
            SampleShape::TwoD { rows, len } => rows * len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(height, width)` as seen by a network.
    pub fn hw(&self) -> (usize, usize) {
        match *self {
            SampleShape::OneD { len } => (1, len),
            SampleShape::TwoD { rows, len } => (rows, len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub values: Vec<f64>,
    pub shape: SampleShape,
    /// Class index within the owning dataset's task.
    pub label: u8,
    /// Framed bin (1D) or window centre bin (2D).
    pub bin: usize,
    pub direction: Option<Direction>,
    pub speed_kmh: f64,
    /// Event length before padding (shots); 0 when unknown.
    pub raw_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    OneD,
    TwoD,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramedTrack {
    pub fit: TrackFit,
    pub label: u8,
    pub direction: Option<Direction>,
    pub speed_kmh: f64,
    pub noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    /// Forces the common length instead of taking the longest event.
    pub d_m: Option<usize>,
    pub d_m_cap: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            d_m: None,
            d_m_cap: DEFAULT_DM_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub samples: Vec<LabeledSample>,
    pub d_m: usize,
}

/// Cuts one sample per (track, bin) in `bin_range` (1D), or one six-bin
/// window per centre whose rows all lie in `bin_range`, stride one (2D).
/// Interferer tracks are skipped.
pub fn extract_dataset(
    w: &Waterfall,
    tracks: &[FramedTrack],
    bin_range: (usize, usize),
    mode: ExtractMode,
    opts: ExtractOptions,
) -> Result<Extraction> {
    let (lo, hi) = bin_range;
    if lo > hi {
        return Err(invalid(format!("empty bin range {lo}:{hi}")));
    }
    if hi >= w.bins() {
        return Err(invalid(format!("bin range {lo}:{hi} exceeds {} bins", w.bins())));
    }
    let controlled: Vec<&FramedTrack> = tracks.iter().filter(|t| !t.noise).collect();

    let mut longest = 0usize;
    for t in &controlled {
        for b in lo..=hi {
            let (s, e) = t.fit.frame(b);
            if e < s {
                return Err(Error::FrameOutOfRange {
                    bin: b,
                    start: s,
                    end: e,
                    shots: w.shots(),
                });
            }
            longest = longest.max((e - s + 1) as usize);
        }
    }
    let d_m = opts.d_m.unwrap_or(longest);
    if d_m > opts.d_m_cap {
        return Err(invalid(format!(
            "d_m = {d_m} shots exceeds the cap of {}",
            opts.d_m_cap
        )));
    }
    if longest > d_m {
        return Err(Error::SampleTooLong { len: longest, d_m });
    }

    let mut samples = Vec::new();
    for t in controlled {
        match mode {
            ExtractMode::OneD => {
                for b in lo..=hi {
                    let raw = frame_event(w, &t.fit, b)?;
                    samples.push(LabeledSample {
                        raw_len: raw.len(),
                        values: pad_to(&raw, d_m)?,
                        shape: SampleShape::OneD { len: d_m },
                        label: t.label,
                        bin: b,
                        direction: t.direction,
                        speed_kmh: t.speed_kmh,
                    });
                }
            }
            ExtractMode::TwoD => {
                if hi - lo + 1 < WINDOW_BINS {
                    continue;
                }
                for center in lo + WINDOW_LEAD..=hi - (WINDOW_BINS - WINDOW_LEAD - 1) {
                    let (s, e) = t.fit.frame(center);
                    samples.push(LabeledSample {
                        values: window_2d(w, &t.fit, center, d_m)?,
                        shape: SampleShape::TwoD {
                            rows: WINDOW_BINS,
                            len: d_m,
                        },
                        label: t.label,
                        bin: center,
                        direction: t.direction,
                        speed_kmh: t.speed_kmh,
                        raw_len: (e - s + 1) as usize,
                    });
                }
            }
        }
    }
    Ok(Extraction { samples, d_m })
}
