use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributionResult, ExplainError};
use crate::data::{Montage, TrialKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Global,
    Participant,
    Day,
}

impl GroupBy {
    fn key(self, t: &TrialKey) -> String {
        match self {
            GroupBy::Global => "global".to_string(),
            GroupBy::Participant => format!("participant_{}", t.participant),
            GroupBy::Day => format!("day_{}", t.day),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeRelevance {
    pub electrode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    pub relevance: f64,
}

/// Mean absolute attribution per electrode, scaled so the largest is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub group: String,
    pub trial_count: usize,
    pub electrodes: Vec<ElectrodeRelevance>,
}

impl RelevanceMap {
    pub fn values(&self) -> Vec<f64> {
        self.electrodes.iter().map(|e| e.relevance).collect()
    }

    pub fn get(&self, electrode: &str) -> Option<f64> {
        self.electrodes
            .iter()
            .find(|e| e.electrode.eq_ignore_ascii_case(electrode))
            .map(|e| e.relevance)
    }
}

/// One map per group, in ascending group-key order.
pub fn aggregate_relevance(
    results: &[(TrialKey, AttributionResult)],
    montage: &Montage,
    group_by: GroupBy,
) -> Result<Vec<RelevanceMap>, ExplainError> {
    if results.is_empty() {
        return Err(ExplainError::EmptyGroup(format!("{group_by:?}").to_lowercase()));
    }
    let n = montage.n_channels();
    let mut groups: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for (key, r) in results {
        if r.phi.len() != n {
            return Err(ExplainError::InvalidTree(format!(
                "attribution for {key} has {} electrodes, montage has {n}",
                r.phi.len()
            )));
        }
        let (acc, count) = groups.entry(group_by.key(key)).or_insert_with(|| (vec![0.0; n], 0));
        for (a, p) in acc.iter_mut().zip(&r.phi) {
            *a += p.abs();
        }
        *count += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(group, (acc, count))| {
            let mean: Vec<f64> = acc.iter().map(|a| a / count as f64).collect();
            let max = mean.iter().cloned().fold(0.0, f64::max);
            let electrodes = montage
                .electrodes
                .iter()
                .zip(mean)
                .map(|(e, m)| ElectrodeRelevance {
                    electrode: e.name.clone(),
                    x: Some(e.pos[0]),
                    y: Some(e.pos[1]),
                    relevance: if max > 0.0 { m / max } else { 0.0 },
                })
                .collect();
            RelevanceMap {
                group,
                trial_count: count,
                electrodes,
            }
        })
        .collect())
}

pub fn read_relevance_json(path: &Path) -> Result<RelevanceMap, ExplainError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: impl ToString) -> ExplainError {
    ExplainError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn ramp(r: f64) -> String {
    let c = (255.0 * (1.0 - r.clamp(0.0, 1.0))).round() as u8;
    format!("#ff{c:02x}{c:02x}")
}

fn svg(map: &RelevanceMap, positions: &[[f64; 2]]) -> String {
    const SCALE: f64 = 100.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="-150 -150 300 300" width="300" height="300">"#
    );
    let _ = writeln!(out, r#"  <title>{}</title>"#, escape(&map.group));
    let _ = writeln!(
        out,
        r#"  <polygon class="nose" points="-12,-98 0,-118 12,-98" fill="none" stroke="black" stroke-width="2"/>"#
    );
    let _ = writeln!(
        out,
        r#"  <circle class="head" cx="0" cy="0" r="{SCALE}" fill="none" stroke="black" stroke-width="2"/>"#
    );
    for (e, p) in map.electrodes.iter().zip(positions) {
        let (x, y) = (p[0] * SCALE, -p[1] * SCALE);
        let _ = writeln!(
            out,
            r#"  <circle class="electrode" cx="{x:.2}" cy="{y:.2}" r="7" fill="{}" stroke="black" stroke-width="0.5"/>"#,
            ramp(e.relevance)
        );
        let _ = writeln!(
            out,
            r#"  <text x="{x:.2}" y="{:.2}" font-size="6" text-anchor="middle">{}</text>"#,
            y + 2.0,
            escape(&e.electrode)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `<stem>.json` and `<stem>.svg`. Electrodes without coordinates are
/// placed from `montage` or, failing that, the standard 10–10 grid.
pub fn render_topomap(
    map: &RelevanceMap,
    montage: Option<&Montage>,
    stem: &Path,
) -> Result<(PathBuf, PathBuf), ExplainError> {
    let mut filled = map.clone();
    let mut positions = Vec::with_capacity(map.electrodes.len());
    for e in filled.electrodes.iter_mut() {
        let pos = match (e.x, e.y) {
            (Some(x), Some(y)) => [x, y],
            _ => montage
                .and_then(|m| m.index_of(&e.electrode).map(|i| m.electrodes[i].pos))
                .or_else(|| crate::data::standard_position(&e.electrode))
                .ok_or_else(|| ExplainError::InvalidTree(format!("no scalp position for electrode {}", e.electrode)))?,
        };
        e.x = Some(pos[0]);
        e.y = Some(pos[1]);
        positions.push(pos);
    }
    let json_path = stem.with_extension("json");
    let svg_path = stem.with_extension("svg");
    let text = serde_json::to_string_pretty(&filled).expect("relevance map serializes");
    fs::write(&json_path, text + "\n").map_err(|e| io_err(&json_path, e))?;
    fs::write(&svg_path, svg(&filled, &positions)).map_err(|e| io_err(&svg_path, e))?;
    Ok((json_path, svg_path))
}

/// Long-form `group,electrode,relevance` table of several maps.
pub fn write_relevance_csv(maps: &[RelevanceMap], path: &Path) -> Result<(), ExplainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["group", "electrode", "relevance"]).map_err(|e| io_err(path, e))?;
    for m in maps {
        for e in &m.electrodes {
            w.write_record([m.group.as_str(), e.electrode.as_str(), &e.relevance.to_string()])
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::AttributionMode;
    use super::*;

    fn result(phi: Vec<f64>) -> AttributionResult {
        AttributionResult {
            phi,
            std_err: None,
            base_value: 0.0,
            full_value: 0.0,
            mode: AttributionMode::Exact,
            evaluations: 0,
        }
    }

    fn montage() -> Montage {
        Montage::from_labels("m", &["Fp1", "Fz", "FC1", "Cz", "T7", "CP1", "Pz", "PO3", "Oz"]).unwrap()
    }

    #[test]
    fn single_trial_is_normalized_abs() {
        let phi = vec![0.5, -2.0, 1.0, 0.0, 0.25, -0.5, 1.5, 0.1, -1.0];
        let maps = aggregate_relevance(&[(TrialKey::new("P1", 1, 0), result(phi.clone()))], &montage(), GroupBy::Global).unwrap();
        assert_eq!(maps.len(), 1);
        let want: Vec<f64> = phi.iter().map(|p| p.abs() / 2.0).collect();
        assert_eq!(maps[0].values(), want);
        assert_eq!(maps[0].trial_count, 1);
    }

    #[test]
    fn opposite_signs_give_the_same_map() {
        let phi = vec![0.5, -2.0, 1.0, 0.0, 0.25, -0.5, 1.5, 0.1, -1.0];
        let neg: Vec<f64> = phi.iter().map(|p| -p).collect();
        let m = montage();
        let one = aggregate_relevance(&[(TrialKey::new("P1", 1, 0), result(phi.clone()))], &m, GroupBy::Global).unwrap();
        let two = aggregate_relevance(
            &[(TrialKey::new("P1", 1, 0), result(phi)), (TrialKey::new("P1", 1, 1), result(neg))],
            &m,
            GroupBy::Global,
        )
        .unwrap();
        assert_eq!(one[0].values(), two[0].values());
    }

    #[test]
    fn groups_by_participant_and_day() {
        let m = montage();
        let rs: Vec<(TrialKey, AttributionResult)> = [("P1", 1), ("P1", 2), ("P2", 2)]
            .iter()
            .map(|&(p, d)| (TrialKey::new(p, d, 0), result(vec![1.0; 9])))
            .collect();
        let by_p = aggregate_relevance(&rs, &m, GroupBy::Participant).unwrap();
        assert_eq!(by_p.iter().map(|g| g.group.as_str()).collect::<Vec<_>>(), ["participant_P1", "participant_P2"]);
        let by_d = aggregate_relevance(&rs, &m, GroupBy::Day).unwrap();
        assert_eq!(by_d.iter().map(|g| g.trial_count).collect::<Vec<_>>(), [1, 2]);
        for g in by_p.iter().chain(&by_d) {
            assert!(g.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(g.values().iter().cloned().fold(0.0, f64::max), 1.0);
        }
        assert!(matches!(aggregate_relevance(&[], &m, GroupBy::Day), Err(ExplainError::EmptyGroup(_))));
    }

    #[test]
    fn json_round_trip_and_svg_structure() {
        let m = montage();
        let maps = aggregate_relevance(
            &[(TrialKey::new("P1", 1, 0), result((1..=9).map(f64::from).collect()))],
            &m,
            GroupBy::Global,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (json, svg) = render_topomap(&maps[0], Some(&m), &dir.path().join("relevance_global")).unwrap();
        assert_eq!(read_relevance_json(&json).unwrap(), maps[0]);
        let text = fs::read_to_string(svg).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
        assert_eq!(circles.len(), 10);
        assert_eq!(circles.iter().filter(|c| c.attribute("class") == Some("head")).count(), 1);
        let labels: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("text")).filter_map(|n| n.text()).collect();
        assert!(labels.contains(&"Fp1"));
    }

    #[test]
    fn equal_relevance_gives_identical_fills() {
        let map = RelevanceMap {
            group: "g".into(),
            trial_count: 1,
            electrodes: ["Fz", "Cz", "Pz"]
                .iter()
                .map(|e| ElectrodeRelevance {
                    electrode: e.to_string(),
                    x: None,
                    y: None,
                    relevance: 0.5,
                })
                .collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let (_, svg) = render_topomap(&map, None, &dir.path().join("t")).unwrap();
        let text = fs::read_to_string(svg).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let fills: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("electrode"))
            .map(|n| n.attribute("fill").unwrap().to_string())
            .collect();
        assert_eq!(fills.len(), 3);
        assert!(fills.iter().all(|f| f == "#ff8080"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#ffffff");
        assert_eq!(ramp(1.0), "#ff0000");
    }

    #[test]
    fn csv_long_form() {
        let m = montage();
        let maps = aggregate_relevance(&[(TrialKey::new("P1", 1, 0), result(vec![1.0; 9]))], &m, GroupBy::Day).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_relevance_csv(&maps, &p).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.lines().nth(1).unwrap().starts_with("day_1,Fp1,1"));
    }
}
