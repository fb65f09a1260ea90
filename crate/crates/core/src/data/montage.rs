use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::region::{assign_region, split_label, RegionId};
use super::DataError;

/// Largest scalp radius accepted for an electrode; 1.0 is the head circle.
pub const MAX_RADIUS: f64 = 1.2;

/// Channel counts of the three shipped cap layouts.
pub const SHIPPED_CHANNEL_COUNTS: [usize; 3] = [26, 28, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct Electrode {
    pub name: String,
    /// Azimuthal-equidistant scalp position, nose towards +y, right ear towards +x.
    pub pos: [f64; 2],
    pub region: RegionId,
}

impl Electrode {
    pub fn new(name: &str, pos: [f64; 2]) -> Result<Self, DataError> {
        let region = assign_region(name)?;
        if !(pos[0].is_finite() && pos[1].is_finite()) || pos[0].hypot(pos[1]) > MAX_RADIUS {
            return Err(DataError::Consistency(format!(
                "electrode {name} position ({}, {}) outside radius {MAX_RADIUS}",
                pos[0], pos[1]
            )));
        }
        Ok(Self {
            name: name.to_string(),
            pos,
            region,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Montage {
    pub name: String,
    pub electrodes: Vec<Electrode>,
    // Per-region channel indices, sorted by electrode name.
    members: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct MontageFile {
    name: String,
    electrodes: Vec<ElectrodeEntry>,
}

#[derive(Serialize, Deserialize)]
struct ElectrodeEntry {
    name: String,
    x: f64,
    y: f64,
}

static CAP32_JSON: &str = include_str!("../../montages/cap32.json");
static CAP28_JSON: &str = include_str!("../../montages/cap28.json");
static CAP26_JSON: &str = include_str!("../../montages/cap26.json");

impl Montage {
    /// Builds a montage, rejecting duplicate names and layouts that leave a region empty.
    pub fn new(name: &str, electrodes: Vec<Electrode>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for e in &electrodes {
            if !seen.insert(e.name.to_ascii_lowercase()) {
                return Err(DataError::Consistency(format!(
                    "duplicate electrode {} in montage {name}",
                    e.name
                )));
            }
        }
        let mut members = vec![Vec::new(); RegionId::COUNT];
        for (i, e) in electrodes.iter().enumerate() {
            members[e.region.index()].push(i);
        }
        for (r, m) in members.iter_mut().enumerate() {
            if m.is_empty() {
                return Err(DataError::EmptyRegion(RegionId::ALL[r]));
            }
            m.sort_by(|&a, &b| electrodes[a].name.cmp(&electrodes[b].name));
        }
        if !SHIPPED_CHANNEL_COUNTS.contains(&electrodes.len()) {
            log::warn!(
                "montage {name} has {} channels; shipped layouts use 26, 28 or 32",
                electrodes.len()
            );
        }
        Ok(Self {
            name: name.to_string(),
            electrodes,
            members,
        })
    }

    /// Builds a montage from labels alone, placing each on the standard 10–10 grid.
    pub fn from_labels(name: &str, labels: &[&str]) -> Result<Self, DataError> {
        let electrodes = labels
            .iter()
            .map(|l| {
                let pos = standard_position(l).ok_or_else(|| DataError::UnknownSite(l.to_string()))?;
                Electrode::new(l, pos)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(name, electrodes)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: MontageFile = serde_json::from_str(text).map_err(|e| DataError::Format {
            file: "montage".into(),
            offset: e.column() as u64,
            reason: e.to_string(),
        })?;
        let electrodes = file
            .electrodes
            .iter()
            .map(|e| Electrode::new(&e.name, [e.x, e.y]))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(&file.name, electrodes)
    }

    pub fn to_json(&self) -> String {
        let file = MontageFile {
            name: self.name.clone(),
            electrodes: self
                .electrodes
                .iter()
                .map(|e| ElectrodeEntry {
                    name: e.name.clone(),
                    x: e.pos[0],
                    y: e.pos[1],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("montage serializes")
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    /// One of the shipped layouts: `cap26`, `cap28` or `cap32`.
    pub fn shipped(name: &str) -> Option<Self> {
        let text = match name {
            "cap32" => CAP32_JSON,
            "cap28" => CAP28_JSON,
            "cap26" => CAP26_JSON,
            _ => return None,
        };
        Some(Self::from_json(text).expect("shipped montage is valid"))
    }

    pub fn for_channel_count(n: usize) -> Option<Self> {
        match n {
            26 => Self::shipped("cap26"),
            28 => Self::shipped("cap28"),
            32 => Self::shipped("cap32"),
            _ => None,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.electrodes.len()
    }

    pub fn is_shipped_layout(&self) -> bool {
        SHIPPED_CHANNEL_COUNTS.contains(&self.n_channels())
    }

    /// Channel indices in `region`, in ascending electrode-name order.
    pub fn region_members(&self, region: RegionId) -> &[usize] {
        &self.members[region.index()]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.electrodes
            .iter()
            .position(|e| e.name.eq_ignore_ascii_case(name))
    }

    pub fn names(&self) -> Vec<&str> {
        self.electrodes.iter().map(|e| e.name.as_str()).collect()
    }
}

// Geometry of one 10–10 row: polar angle of its midline site (degrees from Cz),
// whether that site is anterior, and the equator azimuth of its outermost site.
struct Row {
    midline_polar: f64,
    anterior: bool,
    edge_azimuth: f64,
    edge_polar: f64,
    // Rows whose only lateral sites (1/2) sit directly on the row edge.
    edge_only: bool,
}

fn row_of(letters: &str) -> Option<Row> {
    let row = |midline_polar, anterior, edge_azimuth| Row {
        midline_polar,
        anterior,
        edge_azimuth,
        edge_polar: 90.0,
        edge_only: false,
    };
    Some(match letters {
        "fp" => Row {
            edge_only: true,
            ..row(90.0, true, 18.0)
        },
        "af" => row(67.5, true, 36.0),
        "f" => row(45.0, true, 54.0),
        "fc" | "ft" => row(22.5, true, 72.0),
        "c" | "t" => row(0.0, true, 90.0),
        "cp" | "tp" => row(22.5, false, 108.0),
        "p" => row(45.0, false, 126.0),
        "po" => row(67.5, false, 144.0),
        "o" => Row {
            edge_only: true,
            ..row(90.0, false, 162.0)
        },
        "i" => Row {
            edge_only: true,
            edge_polar: 112.5,
            ..row(112.5, false, 162.0)
        },
        _ => return None,
    })
}

fn unit(polar_deg: f64, azimuth_deg: f64) -> [f64; 3] {
    let (p, a) = (polar_deg.to_radians(), azimuth_deg.to_radians());
    [p.sin() * a.sin(), p.sin() * a.cos(), p.cos()]
}

fn slerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    let omega = dot.acos();
    if omega < 1e-12 {
        return a;
    }
    let (wa, wb) = (
        ((1.0 - t) * omega).sin() / omega.sin(),
        (t * omega).sin() / omega.sin(),
    );
    [
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
    ]
}

/// Idealized spherical 10–10 position of a label, projected azimuthal-equidistantly
/// so that the Fpz–T7–Oz–T8 circle has radius 1.
pub fn standard_position(label: &str) -> Option<[f64; 2]> {
    let (letters, suffix) = split_label(label)?;
    let row = row_of(&letters)?;
    let midline = unit(row.midline_polar, if row.anterior { 0.0 } else { 180.0 });
    let p = if suffix.eq_ignore_ascii_case("z") {
        midline
    } else {
        let d: u32 = suffix.parse().ok()?;
        if d == 0 {
            return None;
        }
        let side = if d % 2 == 1 { -1.0 } else { 1.0 };
        let step = f64::from((d + 1) / 2);
        let edge = unit(row.edge_polar, side * row.edge_azimuth);
        if row.edge_only {
            if step > 1.0 {
                return None;
            }
            edge
        } else {
            slerp(midline, edge, step / 4.0)
        }
    };
    let polar = p[2].clamp(-1.0, 1.0).acos().to_degrees();
    let r = polar / 90.0;
    let rho = p[0].hypot(p[1]);
    if rho < 1e-12 {
        return Some([0.0, 0.0]);
    }
    Some([r * p[0] / rho, r * p[1] / rho])
}

/// Labels of the 32-channel cap; the 28- and 26-channel caps are subsets.
pub const CAP32_LABELS: [&str; 32] = [
    "Fp1", "Fpz", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3",
    "Cz", "C4", "T8", "CP5", "CP1", "CP2", "CP6", "P7", "P3", "Pz", "P4", "P8", "PO3", "POz",
    "PO4", "O1", "Oz", "O2",
];

#[cfg(test)]
const CAP28_DROPPED: [&str; 4] = ["F7", "F8", "P7", "P8"];
#[cfg(test)]
const CAP26_DROPPED: [&str; 6] = ["F7", "F8", "P7", "P8", "FC5", "FC6"];
