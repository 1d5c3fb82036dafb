//! Views, landmark slots and coordinate frames.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Acquisition plane. The three long-axis views share slot roles
/// (valve point, valve point, apex); short-axis has RV insertions + LV centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum View {
    Ch2,
    Ch3,
    Ch4,
    Sax,
}

impl View {
    pub const ALL: [View; 4] = [View::Ch2, View::Ch3, View::Ch4, View::Sax];
    pub const LAX: [View; 3] = [View::Ch2, View::Ch3, View::Ch4];

    /// Slot names in channel order (channel k+1 holds slot k).
    pub fn slot_names(self) -> [&'static str; 3] {
        match self {
            View::Ch2 => ["A-P", "I-P", "APEX"],
            View::Ch3 => ["IL-P", "AS-P", "APEX"],
            View::Ch4 => ["AL-P", "IS-P", "APEX"],
            View::Sax => ["A-RVI", "P-RVI", "C-LV"],
        }
    }

    pub fn slot_index(self, name: &str) -> Option<usize> {
        let norm = name.replace('_', "-");
        self.slot_names().iter().position(|s| *s == norm)
    }

    pub fn is_lax(self) -> bool {
        self != View::Sax
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Ch2 => "CH2",
            View::Ch3 => "CH3",
            View::Ch4 => "CH4",
            View::Sax => "SAX",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CH2" => Ok(View::Ch2),
            "CH3" => Ok(View::Ch3),
            "CH4" => Ok(View::Ch4),
            "SAX" => Ok(View::Sax),
            _ => Err(Error::Usage(format!("unknown view {s:?} (expected CH2, CH3, CH4 or SAX)"))),
        }
    }
}

/// Imaging sequence a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Sequence {
    Cine,
    Lge,
    T1,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::Cine, Sequence::Lge, Sequence::T1];

    pub fn as_str(self) -> &'static str {
        match self {
            Sequence::Cine => "CINE",
            Sequence::Lge => "LGE",
            Sequence::T1 => "T1",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CINE" => Ok(Sequence::Cine),
            "LGE" => Ok(Sequence::Lge),
            "T1" => Ok(Sequence::T1),
            _ => Err(Error::Usage(format!("unknown sequence {s:?} (expected CINE, LGE or T1)"))),
        }
    }
}

/// Pixel position; `row` grows downwards, `col` to the right. Pixel centres
/// sit on integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.row + other.row), 0.5 * (self.col + other.col))
    }
}

/// Pixel grid a set of coordinates refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// (row, col) spacing in millimetres.
    pub spacing_mm: (f64, f64),
}

impl Frame {
    pub fn new(height: usize, width: usize, spacing_mm: (f64, f64)) -> Self {
        Self { height, width, spacing_mm }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.row >= -0.5 && p.col >= -0.5 && p.row <= self.height as f64 - 0.5 && p.col <= self.width as f64 - 0.5
    }
}

/// The three landmark slots of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub view: View,
    pub frame: Frame,
    /// `None` marks an absent slot.
    pub points: [Option<Point>; 3],
}

impl LandmarkSet {
    pub fn empty(view: View, frame: Frame) -> Self {
        Self { view, frame, points: [None; 3] }
    }

    pub fn new(view: View, frame: Frame, points: [Option<Point>; 3]) -> Result<Self> {
        let set = Self { view, frame, points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in self.view.slot_names().iter().zip(&self.points) {
            if let Some(p) = p {
                if !p.row.is_finite() || !p.col.is_finite() || !self.frame.contains(*p) {
                    return Err(Error::Usage(format!(
                        "{} landmark {name} at ({:.2}, {:.2}) lies outside the {}×{} frame",
                        self.view, p.row, p.col, self.frame.height, self.frame.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Point> {
        self.view.slot_index(name).and_then(|i| self.points[i])
    }

    pub fn presence(&self) -> [bool; 3] {
        self.points.map(|p| p.is_some())
    }

    pub fn present_count(&self) -> usize {
        self.points.iter().flatten().count()
    }
}
