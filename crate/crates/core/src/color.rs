//! Per-label coloration of tree nodes.
//!
//! For a target label every node gets `target_count` (members carrying the
//! label, counted over the node's full member set) and a log-scaled
//! intensity `ln(1 + count) / ln(1 + max count)`. In the two-tone scheme the
//! target drives a white-to-blue filter and the remaining members a
//! white-to-orange filter; the filters multiply, so mixed nodes darken
//! toward olive and black.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::tree::{NodeId, SemanticTree};

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("label {0:?} does not occur in the corpus")]
    UnknownLabel(String),
    #[error("label vector has {labels} entries, tree has {points} points")]
    LengthMismatch { labels: usize, points: usize },
    #[error("invalid color {0:?}, expected #RRGGBB")]
    BadColor(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rgb(pub u8, pub u8, pub u8);

impl Rgb {
    pub const WHITE: Rgb = Rgb(0xFF, 0xFF, 0xFF);
}

impl fmt::Display for Rgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{:02X}{:02X}{:02X}", self.0, self.1, self.2)
    }
}

impl FromStr for Rgb {
    type Err = ColorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let hex = s.strip_prefix('#').unwrap_or(s);
        if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(ColorError::BadColor(s.to_string()));
        }
        let byte = |i: usize| u8::from_str_radix(&hex[i..i + 2], 16).unwrap();
        Ok(Rgb(byte(0), byte(2), byte(4)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ColorScheme {
    /// Target white-to-blue plus complement white-to-orange.
    #[default]
    TwoTone,
    /// Target only.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub blue: Rgb,
    pub orange: Rgb,
    pub scheme: ColorScheme,
}

pub const DEFAULT_BLUE: Rgb = Rgb(0x1F, 0x4E, 0x9C);
pub const DEFAULT_ORANGE: Rgb = Rgb(0xE8, 0x82, 0x1E);

impl Default for Palette {
    fn default() -> Self {
        Self {
            blue: DEFAULT_BLUE,
            orange: DEFAULT_ORANGE,
            scheme: ColorScheme::TwoTone,
        }
    }
}

impl Palette {
    /// Multiplicative white-to-anchor filters.
    pub fn mix(&self, target_intensity: f64, complement_intensity: f64) -> Rgb {
        let complement = match self.scheme {
            ColorScheme::TwoTone => complement_intensity,
            ColorScheme::Single => 0.0,
        };
        let channel = |blue: u8, orange: u8| {
            let b = 1.0 - target_intensity * (1.0 - f64::from(blue) / 255.0);
            let o = 1.0 - complement * (1.0 - f64::from(orange) / 255.0);
            (255.0 * b * o).round().clamp(0.0, 255.0) as u8
        };
        Rgb(
            channel(self.blue.0, self.orange.0),
            channel(self.blue.1, self.orange.1),
            channel(self.blue.2, self.orange.2),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorRecord {
    pub node: NodeId,
    pub target_count: usize,
    pub total_count: usize,
    pub intensity: f64,
    pub complement_intensity: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorMap {
    pub target: String,
    pub records: Vec<ColorRecord>,
}

impl ColorMap {
    pub fn get(&self, node: NodeId) -> Option<&ColorRecord> {
        self.records.iter().find(|r| r.node == node)
    }
}

/// `ln(1 + count) / ln(1 + max)`, with 0 when `max` is 0.
pub fn log_intensity(count: usize, max: usize) -> f64 {
    if max == 0 {
        0.0
    } else {
        (count as f64).ln_1p() / (max as f64).ln_1p()
    }
}

pub fn color_by_label<S: AsRef<str>>(
    tree: &SemanticTree,
    labels: &[S],
    target: &str,
    palette: &Palette,
) -> Result<ColorMap, ColorError> {
    if labels.len() != tree.len() {
        return Err(ColorError::LengthMismatch {
            labels: labels.len(),
            points: tree.len(),
        });
    }
    if !labels.iter().any(|l| l.as_ref() == target) {
        return Err(ColorError::UnknownLabel(target.to_string()));
    }
    let counts: Vec<(NodeId, usize, usize)> = tree
        .nodes()
        .map(|node| {
            let members = tree.node_members(node).expect("node from tree");
            let hits = members
                .iter()
                .filter(|&&i| labels[i as usize].as_ref() == target)
                .count();
            (node, hits, members.len())
        })
        .collect();
    let max_target = counts.iter().map(|c| c.1).max().unwrap_or(0);
    let max_complement = counts.iter().map(|c| c.2 - c.1).max().unwrap_or(0);
    let records = counts
        .into_iter()
        .map(|(node, target_count, total_count)| {
            let intensity = log_intensity(target_count, max_target);
            let complement_intensity = log_intensity(total_count - target_count, max_complement);
            ColorRecord {
                node,
                target_count,
                total_count,
                intensity,
                complement_intensity,
                color: palette.mix(intensity, complement_intensity),
            }
        })
        .collect();
    Ok(ColorMap {
        target: target.to_string(),
        records,
    })
}

pub const ANNOTATION_HEADER: &str = "#node_label\tcolor";

/// Annotation body: header then `node_label<TAB>#RRGGBB` per node.
pub fn color_annotations(map: &ColorMap) -> String {
    let mut s = String::from(ANNOTATION_HEADER);
    s.push('\n');
    for r in &map.records {
        s.push_str(&format!("{}\t{}\n", r.node, r.color));
    }
    s
}

pub fn export_color_annotations(map: &ColorMap, path: &Path) -> Result<(), ColorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(color_annotations(map).as_bytes())?;
    w.flush()?;
    Ok(())
}
