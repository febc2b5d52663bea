//! Synthetic waterfalls for controlled vehicle passes.
//!
//! Each vehicle leaves a straight constant-speed track. At a given bin the
//! vehicle contributes `A·G(t)·carrier(t)` where `t` is time relative to the
//! moment the vehicle is centred on the bin:
//!
//! * `A = α·(base mass + occupancy·passenger mass)`,
//! * `G` is a raised-cosine envelope supported on `[−T, T]` with
//!   `T = (length + gauge)/speed`; its peak sits `(occupancy − 3)·5 %` of `T`
//!   towards the rear, so occupancy changes the temporal shape too,
//! * the carrier is a seeded sum of sinusoids in the 5–50 Hz band with unit
//!   RMS, fixed per track.
//!
//! Noise is drawn first from per-bin streams keyed by the scene seed, then
//! every track is added, so adding a track never perturbs the others.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{Config, Section};
use crate::error::{invalid, Error, Result};
use crate::parallel;
use crate::rng::{self, TAG_NOISE, TAG_TRACK};
use crate::waterfall::{Waterfall, DEFAULT_BIN_PITCH_M, DEFAULT_SHOT_PERIOD_S};

pub const DEFAULT_BINS: usize = 1000;
pub const DEFAULT_SHOTS: usize = 120_000;
pub const DEFAULT_NOISE_RMS: f64 = 0.02;
pub const PASSENGER_MASS_KG: f64 = 80.0;
pub const MAX_OCCUPANCY: u8 = 5;
pub const SPEED_RANGE_KMH: (f64, f64) = (5.0, 120.0);
pub const ALLCARS_SPEEDS: [u32; 5] = [30, 40, 50, 60, 70];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    East,
    West,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Occupancy,
    Size,
    Noise,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)+
                    other => Err(format!(
                        "unknown {} {other:?} (expected one of: {})",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(SizeClass { Small => "small", Large => "large" });
text_enum!(Direction { East => "east", West => "west" });
text_enum!(LabelKind { Occupancy => "occupancy", Size => "size", Noise => "noise" });

impl SizeClass {
    /// ω label: 1 for small, 2 for large.
    pub fn omega(self) -> u8 {
        match self {
            SizeClass::Small => 1,
            SizeClass::Large => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleProfile {
    pub name: String,
    pub length_m: f64,
    pub base_mass_kg: f64,
    pub size_class: SizeClass,
    pub passenger_mass_kg: f64,
}

impl VehicleProfile {
    fn new(name: &str, length_m: f64, base_mass_kg: f64, size_class: SizeClass) -> Self {
        VehicleProfile {
            name: name.to_string(),
            length_m,
            base_mass_kg,
            size_class,
            passenger_mass_kg: PASSENGER_MASS_KG,
        }
    }

    // The five trial vehicles. Small and Large kerb masses average 1200 kg
    // and 1550 kg, a 350 kg gap.
    pub fn suv() -> Self {
        Self::new("SUV", 4.8, 1500.0, SizeClass::Large)
    }

    pub fn rc() -> Self {
        Self::new("RC", 4.05, 1100.0, SizeClass::Small)
    }

    pub fn compact() -> Self {
        Self::new("compact", 3.9, 1050.0, SizeClass::Small)
    }

    pub fn mpv() -> Self {
        Self::new("MPV", 4.5, 1450.0, SizeClass::Small)
    }

    pub fn lcv() -> Self {
        Self::new("LCV", 5.4, 1600.0, SizeClass::Large)
    }

    pub fn walker() -> Self {
        Self::new("walker", 0.5, 80.0, SizeClass::Small)
    }

    pub fn stray_car() -> Self {
        Self::new("stray", 4.3, 1300.0, SizeClass::Small)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        [
            Self::suv(),
            Self::rc(),
            Self::compact(),
            Self::mpv(),
            Self::lcv(),
            Self::walker(),
            Self::stray_car(),
        ]
        .into_iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
    }

    pub fn total_mass_kg(&self, occupancy: u8) -> f64 {
        self.base_mass_kg + occupancy as f64 * self.passenger_mass_kg
    }

    fn validate(&self) -> Result<()> {
        if !(self.length_m > 0.0 && self.base_mass_kg > 0.0 && self.passenger_mass_kg > 0.0) {
            return Err(invalid(format!(
                "vehicle {:?} needs positive length and masses",
                self.name
            )));
        }
        Ok(())
    }
}

/// Free parameters of the phenomenological signal model.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalModel {
    pub alpha_rad_per_kg: f64,
    pub gauge_m: f64,
    pub band_hz: (f64, f64),
    pub carrier_terms: usize,
    /// Peak offset per passenger above three, as a fraction of `T`.
    pub skew_per_passenger: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        SignalModel {
            alpha_rad_per_kg: 1e-3,
            gauge_m: 10.0,
            band_hz: (5.0, 50.0),
            carrier_terms: 4,
            skew_per_passenger: 0.05,
        }
    }
}

impl SignalModel {
    /// Envelope half-width `T` in seconds.
    pub fn half_width_s(&self, profile: &VehicleProfile, speed_kmh: f64) -> f64 {
        (profile.length_m + self.gauge_m) / (speed_kmh / 3.6)
    }
}

/// Band-limited oscillation multiplying the envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum Carrier {
    Constant(f64),
    /// `(frequency Hz, phase rad, amplitude)` terms.
    Tones(Vec<(f64, f64, f64)>),
}

impl Carrier {
    pub fn random<R: Rng>(rng: &mut R, model: &SignalModel) -> Self {
        let k = model.carrier_terms.max(1);
        let amp = (2.0 / k as f64).sqrt();
        let (lo, hi) = model.band_hz;
        Carrier::Tones(
            (0..k)
                .map(|_| {
                    let f = if hi > lo { rng.gen_range(lo..hi) } else { lo };
                    (f, rng.gen_range(0.0..2.0 * PI), amp)
                })
                .collect(),
        )
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Carrier::Constant(c) => *c,
            Carrier::Tones(terms) => terms
                .iter()
                .map(|&(f, phase, a)| a * (2.0 * PI * f * t + phase).sin())
                .sum(),
        }
    }
}

/// Skewed raised cosine: 1 at `peak`, 0 at `±half_width`, 0 outside.
fn envelope(t: f64, half_width: f64, peak: f64) -> f64 {
    if t.abs() >= half_width {
        return 0.0;
    }
    let x = if t <= peak {
        (t - peak) / (half_width + peak)
    } else {
        (t - peak) / (half_width - peak)
    };
    0.5 * (1.0 + (PI * x).cos())
}

/// Track slope |c1| in shots per bin.
pub fn shots_per_bin(speed_kmh: f64, bin_pitch_m: f64, shot_period_s: f64) -> Result<f64> {
    if !(speed_kmh > 0.0 && speed_kmh.is_finite()) {
        return Err(invalid(format!("speed must be positive, got {speed_kmh}")));
    }
    Ok(bin_pitch_m / (speed_kmh / 3.6) / shot_period_s)
}

/// Contribution of one vehicle at time `t_rel_s` from its centre crossing.
pub fn vehicle_signature(
    profile: &VehicleProfile,
    occupancy: u8,
    speed_kmh: f64,
    t_rel_s: f64,
    carrier: &Carrier,
    model: &SignalModel,
) -> f64 {
    let half = model.half_width_s(profile, speed_kmh);
    if t_rel_s.abs() > half {
        return 0.0;
    }
    let amplitude = model.alpha_rad_per_kg * profile.total_mass_kg(occupancy);
    let peak = (occupancy as f64 - 3.0) * model.skew_per_passenger * half;
    amplitude * envelope(t_rel_s, half, peak) * carrier.value(t_rel_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackSpec {
    /// Keys the track's carrier stream; unique within a scene.
    pub id: u32,
    pub vehicle: VehicleProfile,
    pub occupancy: u8,
    pub speed_kmh: f64,
    pub direction: Direction,
    /// Event start shot at the entry bin (0 for East, B−1 for West).
    pub entry_shot: f64,
    pub label_kind: LabelKind,
    /// Inclusive bin span the vehicle is present on; `None` is the whole fibre.
    pub bin_span: Option<(usize, usize)>,
}

impl TrackSpec {
    /// φ for occupancy tracks, ω for size tracks, 0 for interferers.
    pub fn label(&self) -> u8 {
        match self.label_kind {
            LabelKind::Occupancy => self.occupancy,
            LabelKind::Size => self.vehicle.size_class.omega(),
            LabelKind::Noise => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        if self.occupancy > MAX_OCCUPANCY {
            return Err(invalid(format!(
                "track {}: occupancy {} exceeds {MAX_OCCUPANCY}",
                self.id, self.occupancy
            )));
        }
        if self.occupancy == 0 && self.label_kind != LabelKind::Noise {
            return Err(invalid(format!(
                "track {}: controlled tracks need occupancy >= 1",
                self.id
            )));
        }
        let (lo, hi) = SPEED_RANGE_KMH;
        if !(self.speed_kmh >= lo && self.speed_kmh <= hi) {
            return Err(invalid(format!(
                "track {}: speed {} km/h outside [{lo}, {hi}]",
                self.id, self.speed_kmh
            )));
        }
        if !self.entry_shot.is_finite() {
            return Err(invalid(format!("track {}: non-finite entry shot", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub bins: usize,
    pub shots: usize,
    pub bin_pitch_m: f64,
    pub shot_period_s: f64,
    pub tracks: Vec<TrackSpec>,
    pub noise_rms: f64,
    pub seed: u64,
    pub signal: SignalModel,
}

impl SceneSpec {
    pub fn empty(bins: usize, shots: usize, noise_rms: f64, seed: u64) -> Self {
        SceneSpec {
            bins,
            shots,
            bin_pitch_m: DEFAULT_BIN_PITCH_M,
            shot_period_s: DEFAULT_SHOT_PERIOD_S,
            tracks: Vec::new(),
            noise_rms,
            seed,
            signal: SignalModel::default(),
        }
    }

    /// Exact frame lines of a track in this scene's geometry.
    pub fn ground_truth(&self, track: &TrackSpec) -> Result<GroundTruthTrack> {
        let slope = shots_per_bin(track.speed_kmh, self.bin_pitch_m, self.shot_period_s)?;
        let half_s = self.signal.half_width_s(&track.vehicle, track.speed_kmh);
        let half_shots = (half_s / self.shot_period_s).round();
        let (c1, c2) = match track.direction {
            Direction::East => (slope, track.entry_shot),
            Direction::West => (-slope, track.entry_shot + slope * (self.bins - 1) as f64),
        };
        Ok(GroundTruthTrack {
            track: track.clone(),
            c1,
            c2,
            c3: c1,
            c4: c2 + 2.0 * half_shots,
        })
    }

    fn validate(&self) -> Result<Vec<GroundTruthTrack>> {
        if self.bins == 0 || self.shots == 0 {
            return Err(invalid("scene needs at least one bin and one shot"));
        }
        if !(self.noise_rms >= 0.0 && self.noise_rms.is_finite()) {
            return Err(invalid(format!("noise_rms must be >= 0, got {}", self.noise_rms)));
        }
        if !(self.bin_pitch_m > 0.0 && self.shot_period_s > 0.0) {
            return Err(invalid("bin pitch and shot period must be positive"));
        }
        let mut ids: Vec<u32> = self.tracks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("track ids must be unique"));
        }
        self.tracks
            .iter()
            .map(|t| {
                t.validate()?;
                let gt = self.ground_truth(t)?;
                let (lo, hi) = gt.bin_span(self.bins);
                if lo > hi || hi >= self.bins {
                    return Err(Error::TrackOutOfRange {
                        track: t.id as usize,
                        msg: format!("bin span {lo}..={hi} outside [0, {})", self.bins),
                    });
                }
                for b in [lo, hi] {
                    let (s, e) = gt.frame_shots(b);
                    if s < 0 || e >= self.shots as i64 {
                        return Err(Error::TrackOutOfRange {
                            track: t.id as usize,
                            msg: format!(
                                "frame at bin {b} spans shots {s}..={e}, outside [0, {})",
                                self.shots
                            ),
                        });
                    }
                }
                Ok(gt)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub track: TrackSpec,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl GroundTruthTrack {
    pub fn bin_span(&self, bins: usize) -> (usize, usize) {
        self.track.bin_span.unwrap_or((0, bins.saturating_sub(1)))
    }

    /// Rounded inclusive frame `[start, end]` at `bin`.
    pub fn frame_shots(&self, bin: usize) -> (i64, i64) {
        let b = bin as f64;
        (
            (self.c1 * b + self.c2).round() as i64,
            (self.c3 * b + self.c4).round() as i64,
        )
    }
}

/// Renders the scene: seeded Gaussian noise plus every track's contribution
/// over its frames.
pub fn simulate(scene: &SceneSpec) -> Result<(Waterfall, Vec<GroundTruthTrack>)> {
    let truth = scene.validate()?;
    let carriers: Vec<Carrier> = scene
        .tracks
        .iter()
        .map(|t| Carrier::random(&mut rng::stream(scene.seed, TAG_TRACK, t.id as u64), &scene.signal))
        .collect();

    let shots = scene.shots;
    let period = scene.shot_period_s;
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); scene.bins];
    parallel::for_each_mut(&mut rows, |b, out| {
        let mut row = vec![0.0f64; shots];
        if scene.noise_rms > 0.0 {
            let mut noise = rng::stream(scene.seed, TAG_NOISE, b as u64);
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut noise);
                *v = scene.noise_rms * z;
            }
        }
        for (gt, carrier) in truth.iter().zip(&carriers) {
            let (lo, hi) = gt.bin_span(scene.bins);
            if b < lo || b > hi {
                continue;
            }
            let (s0, s1) = gt.frame_shots(b);
            let half_shots = (gt.c4 - gt.c2) / 2.0;
            let centre = gt.c1 * b as f64 + gt.c2 + half_shots;
            let t = &gt.track;
            for s in s0..=s1 {
                let t_rel = (s as f64 - centre) * period;
                row[s as usize] +=
                    vehicle_signature(&t.vehicle, t.occupancy, t.speed_kmh, t_rel, carrier, &scene.signal);
            }
        }
        *out = row.into_iter().map(|v| v as f32).collect();
    });

    let values = rows.concat();
    let w = Waterfall::new(scene.bins, shots, scene.bin_pitch_m, period, values)?;
    Ok((w, truth))
}

pub const PRESET_NAMES: &str = "rc60mix, rc60-5p, allcars30, allcars40, allcars50, allcars60, allcars70";

/// Trial geometries at the default 1000 bins × 120 000 shots.
///
/// * `rc60mix`: the RC at 60 km/h, occupancy 5,4,3,2,1 eastbound then
///   5,4,3,2,1 westbound, plus a walker (bins 0–200) and a stray car
///   (bins 0–500) late in the recording.
/// * `rc60-5p`: the same passes with five occupants throughout.
/// * `allcarsN` (also `allcars(N)`): SUV, RC, compact, MPV, LCV in an
///   eastbound queue at N km/h, 50 m apart, plus a same-direction stray
///   (bins 0–240) and an oncoming car crossing cars 4 and 5 (bins 760–999).
pub fn preset_scene(name: &str) -> Result<SceneSpec> {
    let key = name.trim().to_ascii_lowercase();
    match key.as_str() {
        "rc60mix" | "rc60-mix" => Ok(rc60(&[5, 4, 3, 2, 1])),
        "rc60-5p" | "rc605p" => Ok(rc60(&[5, 5, 5, 5, 5])),
        _ => {
            let speed = key
                .strip_prefix("allcars")
                .map(|s| s.trim_matches(|c| c == '(' || c == ')' || c == '-'))
                .and_then(|s| s.parse::<u32>().ok());
            match speed {
                Some(v) if ALLCARS_SPEEDS.contains(&v) => allcars(v as f64),
                _ => Err(Error::UnknownPreset {
                    name: name.to_string(),
                    valid: PRESET_NAMES.to_string(),
                }),
            }
        }
    }
}

fn rc60(occupancies: &[u8; 5]) -> SceneSpec {
    let mut scene = SceneSpec::empty(DEFAULT_BINS, DEFAULT_SHOTS, DEFAULT_NOISE_RMS, 0);
    let mut id = 0;
    let mut push = |scene: &mut SceneSpec, vehicle, occupancy, speed_kmh, direction, entry_shot, label_kind, bin_span| {
        scene.tracks.push(TrackSpec {
            id,
            vehicle,
            occupancy,
            speed_kmh,
            direction,
            entry_shot,
            label_kind,
            bin_span,
        });
        id += 1;
    };
    for (k, &occ) in occupancies.iter().enumerate() {
        let entry = 500.0 + 3000.0 * k as f64;
        push(&mut scene, VehicleProfile::rc(), occ, 60.0, Direction::East, entry, LabelKind::Occupancy, None);
    }
    for (k, &occ) in occupancies.iter().enumerate() {
        let entry = 57_000.0 + 3000.0 * k as f64;
        push(&mut scene, VehicleProfile::rc(), occ, 60.0, Direction::West, entry, LabelKind::Occupancy, None);
    }
    push(&mut scene, VehicleProfile::walker(), 0, 5.0, Direction::East, 2000.0, LabelKind::Noise, Some((0, 200)));
    push(&mut scene, VehicleProfile::stray_car(), 0, 60.0, Direction::West, 73_000.0, LabelKind::Noise, Some((0, 500)));
    scene
}

fn allcars(speed_kmh: f64) -> Result<SceneSpec> {
    let mut scene = SceneSpec::empty(DEFAULT_BINS, DEFAULT_SHOTS, DEFAULT_NOISE_RMS, 0);
    let slope = shots_per_bin(speed_kmh, scene.bin_pitch_m, scene.shot_period_s)?;
    let spacing = (50.0 / (speed_kmh / 3.6) / scene.shot_period_s).round();
    let queue = [
        VehicleProfile::suv(),
        VehicleProfile::rc(),
        VehicleProfile::compact(),
        VehicleProfile::mpv(),
        VehicleProfile::lcv(),
    ];
    let entries: Vec<f64> = (0..queue.len()).map(|i| 500.0 + spacing * i as f64).collect();
    for (i, vehicle) in queue.into_iter().enumerate() {
        scene.tracks.push(TrackSpec {
            id: i as u32,
            vehicle,
            occupancy: 1,
            speed_kmh,
            direction: Direction::East,
            entry_shot: entries[i],
            label_kind: LabelKind::Size,
            bin_span: None,
        });
    }
    scene.tracks.push(TrackSpec {
        id: 5,
        vehicle: VehicleProfile::stray_car(),
        occupancy: 0,
        speed_kmh,
        direction: Direction::East,
        entry_shot: entries[1] + (spacing / 2.0).round(),
        label_kind: LabelKind::Noise,
        bin_span: Some((0, 240)),
    });
    // Oncoming: its start line meets car 4's at bin 880.
    let last = (scene.bins - 1) as f64;
    let cross = 880.0;
    scene.tracks.push(TrackSpec {
        id: 6,
        vehicle: VehicleProfile::stray_car(),
        occupancy: 0,
        speed_kmh,
        direction: Direction::West,
        entry_shot: (entries[3] + slope * cross - slope * (last - cross)).round(),
        label_kind: LabelKind::Noise,
        bin_span: Some((760, scene.bins - 1)),
    });
    Ok(scene)
}

const SCENE_KEYS: &[&str] = &[
    "bins",
    "shots",
    "bin_pitch_m",
    "shot_period_s",
    "noise_rms",
    "seed",
    "alpha_rad_per_kg",
    "gauge_m",
    "band_lo_hz",
    "band_hi_hz",
    "carrier_terms",
    "skew_per_passenger",
];

const TRACK_KEYS: &[&str] = &[
    "id",
    "vehicle",
    "length_m",
    "base_mass_kg",
    "size_class",
    "passenger_mass_kg",
    "occupancy",
    "speed_kmh",
    "direction",
    "entry_shot",
    "label_kind",
    "bin_span",
];

fn parse_span(text: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {text:?}"))?;
    let lo = a.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

impl SceneSpec {
    /// Reads a scene from config text: one `[scene]` section and one
    /// `[track]` section per track. A track names a built-in `vehicle` or
    /// gives `length_m`, `base_mass_kg` and `size_class` itself.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let head = cfg.section("scene").ok_or(Error::Config {
            line: 0,
            msg: "missing [scene] section".into(),
        })?;
        head.check_keys(SCENE_KEYS)?;
        let mut scene = SceneSpec::empty(
            head.parse("bins")?.unwrap_or(DEFAULT_BINS),
            head.parse("shots")?.unwrap_or(DEFAULT_SHOTS),
            head.parse("noise_rms")?.unwrap_or(DEFAULT_NOISE_RMS),
            head.parse("seed")?.unwrap_or(0),
        );
        if let Some(v) = head.parse("bin_pitch_m")? {
            scene.bin_pitch_m = v;
        }
        if let Some(v) = head.parse("shot_period_s")? {
            scene.shot_period_s = v;
        }
        let sig = &mut scene.signal;
        if let Some(v) = head.parse("alpha_rad_per_kg")? {
            sig.alpha_rad_per_kg = v;
        }
        if let Some(v) = head.parse("gauge_m")? {
            sig.gauge_m = v;
        }
        if let Some(v) = head.parse("band_lo_hz")? {
            sig.band_hz.0 = v;
        }
        if let Some(v) = head.parse("band_hi_hz")? {
            sig.band_hz.1 = v;
        }
        if let Some(v) = head.parse("carrier_terms")? {
            sig.carrier_terms = v;
        }
        if let Some(v) = head.parse("skew_per_passenger")? {
            sig.skew_per_passenger = v;
        }

        for (i, s) in cfg.sections_named("track").enumerate() {
            s.check_keys(TRACK_KEYS)?;
            let mut vehicle = match s.get("vehicle") {
                Some(e) => VehicleProfile::builtin(&e.value).unwrap_or_else(|| VehicleProfile {
                    name: e.value.clone(),
                    length_m: 0.0,
                    base_mass_kg: 0.0,
                    size_class: SizeClass::Small,
                    passenger_mass_kg: PASSENGER_MASS_KG,
                }),
                None => VehicleProfile::new("custom", 0.0, 0.0, SizeClass::Small),
            };
            if let Some(v) = s.parse("length_m")? {
                vehicle.length_m = v;
            }
            if let Some(v) = s.parse("base_mass_kg")? {
                vehicle.base_mass_kg = v;
            }
            if let Some(v) = s.parse("size_class")? {
                vehicle.size_class = v;
            }
            if let Some(v) = s.parse("passenger_mass_kg")? {
                vehicle.passenger_mass_kg = v;
            }
            let bin_span = match s.get("bin_span") {
                None => None,
                Some(e) => Some(parse_span(&e.value).map_err(|msg| Error::Config { line: e.line, msg })?),
            };
            scene.tracks.push(TrackSpec {
                id: s.parse("id")?.unwrap_or(i as u32),
                vehicle,
                occupancy: s.require("occupancy")?,
                speed_kmh: s.require("speed_kmh")?,
                direction: s.require("direction")?,
                entry_shot: s.require("entry_shot")?,
                label_kind: s.parse("label_kind")?.unwrap_or(LabelKind::Occupancy),
                bin_span,
            });
        }
        Ok(scene)
    }

    pub fn to_config(&self) -> Config {
        let mut head = Section::new("scene");
        head.set("bins", self.bins);
        head.set("shots", self.shots);
        head.set("bin_pitch_m", self.bin_pitch_m);
        head.set("shot_period_s", self.shot_period_s);
        head.set("noise_rms", self.noise_rms);
        head.set("seed", self.seed);
        head.set("alpha_rad_per_kg", self.signal.alpha_rad_per_kg);
        head.set("gauge_m", self.signal.gauge_m);
        head.set("band_lo_hz", self.signal.band_hz.0);
        head.set("band_hi_hz", self.signal.band_hz.1);
        head.set("carrier_terms", self.signal.carrier_terms);
        head.set("skew_per_passenger", self.signal.skew_per_passenger);
        let mut sections = vec![head];
        for t in &self.tracks {
            let mut s = Section::new("track");
            s.set("id", t.id);
            s.set("vehicle", &t.vehicle.name);
            s.set("length_m", t.vehicle.length_m);
            s.set("base_mass_kg", t.vehicle.base_mass_kg);
            s.set("size_class", t.vehicle.size_class);
            s.set("passenger_mass_kg", t.vehicle.passenger_mass_kg);
            s.set("occupancy", t.occupancy);
            s.set("speed_kmh", t.speed_kmh);
            s.set("direction", t.direction);
            s.set("entry_shot", t.entry_shot);
            s.set("label_kind", t.label_kind);
            if let Some((lo, hi)) = t.bin_span {
                s.set("bin_span", format!("{lo}:{hi}"));
            }
            sections.push(s);
        }
        Config { sections }
    }
}

/// One row of a ground-truth CSV, as written by `truth_csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub track_id: u32,
    pub label_kind: LabelKind,
    /// φ, ω, or 0 for interferers.
    pub label: u8,
    pub speed_kmh: f64,
    pub direction: Direction,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub bin_lo: usize,
    pub bin_hi: usize,
    pub vehicle: String,
    pub occupancy: u8,
    pub size_class: SizeClass,
}

pub const TRUTH_HEADER: &str =
    "track_id,label_kind,label,speed_kmh,direction,c1,c2,c3,c4,bin_lo,bin_hi,vehicle,occupancy,size_class";

impl TruthRow {
    pub fn new(gt: &GroundTruthTrack, bins: usize) -> Self {
        let t = &gt.track;
        let (bin_lo, bin_hi) = gt.bin_span(bins);
        TruthRow {
            track_id: t.id,
            label_kind: t.label_kind,
            label: t.label(),
            speed_kmh: t.speed_kmh,
            direction: t.direction,
            c1: gt.c1,
            c2: gt.c2,
            c3: gt.c3,
            c4: gt.c4,
            bin_lo,
            bin_hi,
            vehicle: t.vehicle.name.clone(),
            occupancy: t.occupancy,
            size_class: t.vehicle.size_class,
        }
    }
}

/// Floats are written in shortest round-trip form, so parsing restores
/// them exactly.
pub fn truth_csv(rows: &[TruthRow]) -> String {
    let mut out = format!("{TRUTH_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.track_id,
            r.label_kind,
            r.label,
            r.speed_kmh,
            r.direction,
            r.c1,
            r.c2,
            r.c3,
            r.c4,
            r.bin_lo,
            r.bin_hi,
            r.vehicle.replace(',', " "),
            r.occupancy,
            r.size_class
        ));
    }
    out
}

pub fn parse_truth_csv(text: &str) -> Result<Vec<TruthRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRUTH_HEADER => {}
        _ => return Err(Error::Corrupt(format!("truth CSV must start with header {TRUTH_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Corrupt(format!("truth CSV line {}: bad {what} in {line:?}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 14 {
            return Err(bad("field count"));
        }
        fn num<T: FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        out.push(TruthRow {
            track_id: num(f[0]).ok_or_else(|| bad("track_id"))?,
            label_kind: f[1].parse().map_err(|_| bad("label_kind"))?,
            label: num(f[2]).ok_or_else(|| bad("label"))?,
            speed_kmh: num(f[3]).ok_or_else(|| bad("speed_kmh"))?,
            direction: f[4].parse().map_err(|_| bad("direction"))?,
            c1: num(f[5]).ok_or_else(|| bad("c1"))?,
            c2: num(f[6]).ok_or_else(|| bad("c2"))?,
            c3: num(f[7]).ok_or_else(|| bad("c3"))?,
            c4: num(f[8]).ok_or_else(|| bad("c4"))?,
            bin_lo: num(f[9]).ok_or_else(|| bad("bin_lo"))?,
            bin_hi: num(f[10]).ok_or_else(|| bad("bin_hi"))?,
            vehicle: f[11].to_string(),
            occupancy: num(f[12]).ok_or_else(|| bad("occupancy"))?,
            size_class: f[13].parse().map_err(|_| bad("size_class"))?,
        });
    }
    Ok(out)
}
