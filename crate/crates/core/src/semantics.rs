//! Semantic taxonomy: 30 navigation classes, their RGB encoding and the
//! motion-cost group each class belongs to.
//!
//! Traversable classes sit in the green part of the color space, obstacles in
//! the red and blue parts, so that classes with similar traversability have
//! similar colors.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("unknown semantic class `{0}`")]
    UnknownClass(String),
    #[error("invalid cost table: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("cost table I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("cost table JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Motion-cost group, ordered from cheapest to non-traversable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostGroup {
    Free,
    Mid1,
    Mid2,
    Mid3,
    Obs,
}

impl CostGroup {
    pub const ALL: [CostGroup; 5] = [
        CostGroup::Free,
        CostGroup::Mid1,
        CostGroup::Mid2,
        CostGroup::Mid3,
        CostGroup::Obs,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Costs of the five groups, `c_free < c_mid1 < c_mid2 < c_mid3 < c_obs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupCosts {
    pub free: f64,
    pub mid1: f64,
    pub mid2: f64,
    pub mid3: f64,
    pub obs: f64,
}

impl Default for GroupCosts {
    fn default() -> Self {
        GroupCosts {
            free: 0.0,
            mid1: 0.5,
            mid2: 1.0,
            mid3: 1.5,
            obs: 2.0,
        }
    }
}

impl GroupCosts {
    pub fn get(&self, group: CostGroup) -> f64 {
        self.as_array()[group.index()]
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.free, self.mid1, self.mid2, self.mid3, self.obs]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub name: String,
    pub color: Rgb,
    pub group: CostGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    classes: Vec<SemanticClass>,
    costs: GroupCosts,
}

#[derive(Serialize, Deserialize)]
struct CostTableFile {
    group_costs: GroupCosts,
    classes: Vec<SemanticClass>,
}

pub const NUM_CLASSES: usize = 30;

const DEFAULT_CLASSES: [(&str, Rgb, CostGroup); NUM_CLASSES] = {
    use CostGroup::*;
    [
        ("sidewalk", [0, 255, 0], Free),
        ("crosswalk", [0, 220, 90], Free),
        ("floor", [60, 255, 110], Free),
        ("stairs", [0, 180, 30], Free),
        ("gravel", [130, 230, 60], Mid1),
        ("sand", [170, 250, 110], Mid1),
        ("snow", [200, 255, 200], Mid1),
        ("terrain", [110, 190, 30], Mid2),
        ("road", [100, 140, 90], Mid3),
        ("person", [255, 0, 0], Obs),
        ("animal", [230, 30, 80], Obs),
        ("vehicle", [190, 0, 0], Obs),
        ("trains", [150, 0, 50], Obs),
        ("motorcycle", [255, 80, 60], Obs),
        ("bicycle", [220, 110, 40], Obs),
        ("building", [0, 0, 255], Obs),
        ("wall", [40, 40, 200], Obs),
        ("fence", [80, 0, 220], Obs),
        ("bridge", [0, 70, 170], Obs),
        ("tunnel", [20, 20, 130], Obs),
        ("furniture", [120, 50, 200], Obs),
        ("tree", [0, 110, 210], Obs),
        ("water_surface", [70, 140, 255], Obs),
        ("pole", [255, 0, 255], Obs),
        ("traffic_sign", [255, 110, 190], Obs),
        ("traffic_light", [200, 0, 150], Obs),
        ("bench", [170, 70, 255], Obs),
        ("sky", [140, 200, 250], Obs),
        ("ceiling", [100, 100, 170], Obs),
        ("unknown", [50, 0, 50], Obs),
    ]
};

impl CostTable {
    /// Builds a table, checking every invariant and reporting all violations at once.
    pub fn new(classes: Vec<SemanticClass>, costs: GroupCosts) -> Result<Self, SemanticsError> {
        let mut problems = Vec::new();
        if classes.len() != NUM_CLASSES {
            problems.push(format!(
                "expected {NUM_CLASSES} classes, found {}",
                classes.len()
            ));
        }
        let levels = costs.as_array();
        for (group, cost) in CostGroup::ALL.iter().zip(levels) {
            if !cost.is_finite() || !(0.0..=2.0).contains(&cost) {
                problems.push(format!("cost of group {group:?} = {cost} is outside [0, 2]"));
            }
        }
        for w in CostGroup::ALL.windows(2) {
            let (a, b) = (costs.get(w[0]), costs.get(w[1]));
            if a.partial_cmp(&b) != Some(std::cmp::Ordering::Less) {
                problems.push(format!(
                    "group costs must increase strictly: {:?} = {a} is not below {:?} = {b}",
                    w[0], w[1]
                ));
            }
        }
        let mut names = HashSet::new();
        let mut colors = HashSet::new();
        for c in &classes {
            if c.name.is_empty() {
                problems.push("empty class name".to_string());
            }
            if !names.insert(c.name.as_str()) {
                problems.push(format!("duplicate class name `{}`", c.name));
            }
            if !colors.insert(c.color) {
                problems.push(format!(
                    "duplicate color {:?} (class `{}`)",
                    c.color, c.name
                ));
            }
        }
        if !classes.iter().any(|c| c.name == UNKNOWN) {
            problems.push(format!("missing the `{UNKNOWN}` class"));
        }
        if problems.is_empty() {
            Ok(CostTable { classes, costs })
        } else {
            Err(SemanticsError::Invalid(problems))
        }
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn group_costs(&self) -> &GroupCosts {
        &self.costs
    }

    pub fn c_free(&self) -> f64 {
        self.costs.free
    }

    pub fn c_obs(&self) -> f64 {
        self.costs.obs
    }

    pub fn index_of(&self, name: &str) -> Result<usize, SemanticsError> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| SemanticsError::UnknownClass(name.to_string()))
    }

    pub fn class(&self, name: &str) -> Result<&SemanticClass, SemanticsError> {
        self.index_of(name).map(|i| &self.classes[i])
    }

    pub fn cost_of(&self, name: &str) -> Result<f64, SemanticsError> {
        self.class(name).map(|c| self.costs.get(c.group))
    }

    pub fn is_obstacle(&self, name: &str) -> Result<bool, SemanticsError> {
        self.class(name).map(|c| c.group == CostGroup::Obs)
    }

    pub fn color_of(&self, name: &str) -> Result<Rgb, SemanticsError> {
        self.class(name).map(|c| c.color)
    }

    pub fn unknown_color(&self) -> Rgb {
        self.color_of(UNKNOWN).expect("validated table has an unknown class")
    }

    /// Nearest class in Euclidean RGB distance; ties go to the lowest index.
    pub fn class_of_color(&self, color: Rgb) -> &SemanticClass {
        let dist = |c: &Rgb| -> u32 {
            c.iter()
                .zip(color.iter())
                .map(|(&a, &b)| {
                    let d = a as i32 - b as i32;
                    (d * d) as u32
                })
                .sum()
        };
        let mut best = &self.classes[0];
        let mut best_d = dist(&best.color);
        for c in &self.classes[1..] {
            let d = dist(&c.color);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String, SemanticsError> {
        let file = CostTableFile {
            group_costs: self.costs,
            classes: self.classes.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, SemanticsError> {
        let file: CostTableFile = serde_json::from_str(text)?;
        CostTable::new(file.classes, file.group_costs)
    }

    pub fn load(path: &Path) -> Result<Self, SemanticsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SemanticsError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

impl Default for CostTable {
    fn default() -> Self {
        default_table()
    }
}

pub const UNKNOWN: &str = "unknown";

/// The built-in 30-class table with group costs `{0, 0.5, 1, 1.5, 2}`.
pub fn default_table() -> CostTable {
    let classes = DEFAULT_CLASSES
        .iter()
        .map(|&(name, color, group)| SemanticClass {
            name: name.to_string(),
            color,
            group,
        })
        .collect();
    CostTable::new(classes, GroupCosts::default()).expect("built-in table is valid")
}
