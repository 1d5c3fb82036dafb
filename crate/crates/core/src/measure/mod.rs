//! Detection outcomes, distances, derived cardiac measures and the
//! evaluation report.

mod stats;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use stats::{beta_reg, ln_gamma, student_t_two_sided, welch_t};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Point, Sequence, View};

/// Stated in every report: the reference axis of A-RVI angles.
pub const ANGLE_CONVENTION: &str =
    "A-RVI angle: direction of C-LV→A-RVI in mm, degrees counter-clockwise from the image +column axis with rows pointing down (y-up), range (-180, 180]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub success: bool,
    /// Slots present in the truth but not predicted.
    pub missed: Vec<String>,
    /// Slots predicted but absent in the truth.
    pub spurious: Vec<String>,
}

/// Compare presence patterns; coordinates are ignored.
pub fn detection_outcome(pred: &LandmarkSet, truth: &LandmarkSet) -> Result<DetectionOutcome> {
    if pred.view != truth.view {
        return Err(Error::Usage(format!("prediction is {} but truth is {}", pred.view, truth.view)));
    }
    let mut missed = Vec::new();
    let mut spurious = Vec::new();
    for (name, (p, t)) in truth.view.slot_names().iter().zip(pred.points.iter().zip(&truth.points)) {
        match (p.is_some(), t.is_some()) {
            (false, true) => missed.push(name.to_string()),
            (true, false) => spurious.push(name.to_string()),
            _ => {}
        }
    }
    Ok(DetectionOutcome { success: missed.is_empty() && spurious.is_empty(), missed, spurious })
}

pub fn detection_rate(outcomes: &[DetectionOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Usage("detection rate of an empty set".into()));
    }
    Ok(outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64)
}

/// Physical distance between two points of one frame.
pub fn l2_mm(a: Point, b: Point, spacing_mm: (f64, f64)) -> f64 {
    ((a.row - b.row) * spacing_mm.0).hypot((a.col - b.col) * spacing_mm.1)
}

/// Angle of the C-LV → A-RVI vector; see [`ANGLE_CONVENTION`].
pub fn a_rvi_angle(set: &LandmarkSet) -> Result<f64> {
    if set.view != View::Sax {
        return Err(Error::Usage(format!("A-RVI angle needs a SAX landmark set, got {}", set.view)));
    }
    let (Some(a), Some(c)) = (set.points[0], set.points[2]) else {
        return Err(Error::Usage("A-RVI angle needs A-RVI and C-LV".into()));
    };
    let (sr, sc) = set.frame.spacing_mm;
    let (dy, dx) = (-(a.row - c.row) * sr, (a.col - c.col) * sc);
    if dy == 0.0 && dx == 0.0 {
        return Err(Error::Geometry("A-RVI coincides with C-LV".into()));
    }
    let deg = dy.atan2(dx).to_degrees();
    Ok(if deg <= -180.0 { deg + 360.0 } else { deg })
}

/// Signed difference `a − b` wrapped to (−180, 180].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Apex to valve-plane midpoint, in mm.
pub fn lv_length(set: &LandmarkSet) -> Result<f64> {
    if !set.view.is_lax() {
        return Err(Error::Usage(format!("LV length needs a long-axis landmark set, got {}", set.view)));
    }
    let [Some(v1), Some(v2), Some(apex)] = set.points else {
        return Err(Error::Usage("LV length needs both valve points and the apex".into()));
    };
    Ok(l2_mm(apex, v1.midpoint(v2), set.frame.spacing_mm))
}

/// 100·(ED − ES)/ED. Negative values (ES longer than ED) are returned as is.
pub fn longitudinal_shortening(len_ed: f64, len_es: f64) -> Result<f64> {
    if !(len_ed > 0.0) {
        return Err(Error::Usage(format!("end-diastolic length must be positive, got {len_ed}")));
    }
    Ok(100.0 * (len_ed - len_es) / len_ed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkStats {
    pub name: String,
    /// Successful samples contributing a distance.
    pub n: usize,
    pub mean_mm: Option<f64>,
    pub sd_mm: Option<f64>,
}

/// Predicted vs reference comparison of a derived measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedStats {
    pub measure: String,
    pub n: usize,
    /// Mean and sd of the per-sample difference (degrees for the angle,
    /// percent of the reference length for LV length).
    pub mean_diff: Option<f64>,
    pub sd_diff: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub sequence: Sequence,
    pub view: View,
    pub n_tested: usize,
    pub n_success: usize,
    pub detection_rate: Option<f64>,
    pub landmarks: Vec<LandmarkStats>,
    pub derived: DerivedStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub angle_convention: String,
    pub n_tested: usize,
    pub n_success: usize,
    pub detection_rate: Option<f64>,
    pub groups: Vec<GroupStats>,
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.len() > 1).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(m), sd)
}

/// Per-group detection rate, L2 statistics over successful samples, and
/// the view's derived measure (LV length for LAX, A-RVI angle for SAX)
/// compared between prediction and truth with Welch's test.
pub fn build_report(preds: &[LandmarkSet], truths: &[LandmarkSet], sequences: &[Sequence]) -> Result<MetricsReport> {
    if preds.len() != truths.len() || preds.len() != sequences.len() {
        return Err(Error::Usage(format!(
            "{} predictions, {} truths and {} sequence labels are not aligned",
            preds.len(),
            truths.len(),
            sequences.len()
        )));
    }
    let outcomes: Vec<DetectionOutcome> =
        preds.iter().zip(truths).map(|(p, t)| detection_outcome(p, t)).collect::<Result<_>>()?;
    let mut groups = Vec::new();
    for seq in Sequence::ALL {
        for view in View::ALL {
            let members: Vec<usize> =
                (0..preds.len()).filter(|&i| sequences[i] == seq && truths[i].view == view).collect();
            let ok: Vec<usize> = members.iter().copied().filter(|&i| outcomes[i].success).collect();
            let landmarks = view
                .slot_names()
                .iter()
                .enumerate()
                .map(|(k, name)| {
                    let d: Vec<f64> = ok
                        .iter()
                        .filter_map(|&i| match (preds[i].points[k], truths[i].points[k]) {
                            (Some(p), Some(t)) => Some(l2_mm(p, t, truths[i].frame.spacing_mm)),
                            _ => None,
                        })
                        .collect();
                    let (mean_mm, sd_mm) = mean_sd(&d);
                    LandmarkStats { name: name.to_string(), n: d.len(), mean_mm, sd_mm }
                })
                .collect();
            let derived = derived_stats(view, &ok, preds, truths);
            groups.push(GroupStats {
                sequence: seq,
                view,
                n_tested: members.len(),
                n_success: ok.len(),
                detection_rate: (!members.is_empty()).then(|| ok.len() as f64 / members.len() as f64),
                landmarks,
                derived,
            });
        }
    }
    let n_success = outcomes.iter().filter(|o| o.success).count();
    Ok(MetricsReport {
        angle_convention: ANGLE_CONVENTION.into(),
        n_tested: preds.len(),
        n_success,
        detection_rate: detection_rate(&outcomes).ok(),
        groups,
    })
}

fn derived_stats(view: View, ok: &[usize], preds: &[LandmarkSet], truths: &[LandmarkSet]) -> DerivedStats {
    let mut pv = Vec::new();
    let mut tv = Vec::new();
    let mut diffs = Vec::new();
    let measure = if view.is_lax() { "lv_length_pct_diff" } else { "a_rvi_angle_diff_deg" };
    for &i in ok {
        let pair = if view.is_lax() {
            lv_length(&preds[i]).and_then(|p| lv_length(&truths[i]).map(|t| (p, t)))
        } else {
            a_rvi_angle(&preds[i]).and_then(|p| a_rvi_angle(&truths[i]).map(|t| (p, t)))
        };
        let Ok((p, t)) = pair else { continue };
        let d = if view.is_lax() { 100.0 * (p - t).abs() / t } else { angle_diff(p, t) };
        // keep angles on one branch so the test compares like with like
        let p = if view.is_lax() { p } else { t + angle_diff(p, t) };
        pv.push(p);
        tv.push(t);
        diffs.push(d);
    }
    let (mean_diff, sd_diff) = mean_sd(&diffs);
    let (t, p) = match welch_t(&pv, &tv) {
        Ok((t, p)) => (Some(t), Some(p)),
        Err(_) => (None, None),
    };
    DerivedStats { measure: measure.into(), n: diffs.len(), mean_diff, sd_diff, t, p }
}

impl MetricsReport {
    /// One row per group × item, items being the three landmarks and the
    /// group's derived measure.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("sequence,view,item,n_tested,n_success,detection_rate,n,mean,sd,t,p\n");
        for g in &self.groups {
            let head = format!("{},{}", g.sequence, g.view);
            let rate = f(g.detection_rate);
            for l in &g.landmarks {
                writeln!(s, "{head},{},{},{},{rate},{},{},{},,", l.name, g.n_tested, g.n_success, l.n, f(l.mean_mm), f(l.sd_mm))
                    .unwrap();
            }
            let d = &g.derived;
            writeln!(
                s,
                "{head},{},{},{},{rate},{},{},{},{},{}",
                d.measure,
                g.n_tested,
                g.n_success,
                d.n,
                f(d.mean_diff),
                f(d.sd_diff),
                f(d.t),
                f(d.p)
            )
            .unwrap();
        }
        s
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
