//! The fixed 59-class answer space.
//!
//! Names are synthetic placeholders; only the category sizes are meaningful.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Phase,
    Step,
    Instrument,
    Quantity,
    Position,
    OperationNote,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Phase,
        Category::Step,
        Category::Instrument,
        Category::Quantity,
        Category::Position,
        Category::OperationNote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Phase => "phase",
            Category::Step => "step",
            Category::Instrument => "instrument",
            Category::Quantity => "quantity",
            Category::Position => "position",
            Category::OperationNote => "operation_note",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown category {s:?}")))
    }
}

pub const PHASES: [&str; 4] = ["access", "exposure", "resection", "closure"];

/// Steps per phase; steps are numbered consecutively across phases.
pub const STEPS_PER_PHASE: [usize; 4] = [4, 4, 4, 3];

pub const STEPS: [&str; 15] = [
    "access_1",
    "access_2",
    "access_3",
    "access_4",
    "exposure_1",
    "exposure_2",
    "exposure_3",
    "exposure_4",
    "resection_1",
    "resection_2",
    "resection_3",
    "resection_4",
    "closure_1",
    "closure_2",
    "closure_3",
];

pub const INSTRUMENTS: [&str; 18] = [
    "suction",
    "rongeur",
    "dissector",
    "curette",
    "drill",
    "scissors",
    "forceps",
    "retractor",
    "irrigator",
    "spatula",
    "hook",
    "knife",
    "cautery",
    "stripper",
    "elevator",
    "applicator",
    "clip",
    "probe",
];

pub const QUANTITIES: [&str; 3] = ["zero", "one", "two"];

/// Position names in slot order.
pub const POSITIONS: [&str; 5] = [
    "top left",
    "top right",
    "centre",
    "bottom left",
    "bottom right",
];

pub const NOTES: [&str; 14] = [
    "note_01", "note_02", "note_03", "note_04", "note_05", "note_06", "note_07", "note_08",
    "note_09", "note_10", "note_11", "note_12", "note_13", "note_14",
];

pub const N_CLASSES: usize = 59;

/// Index ↔ (category, name) table over all answer classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    entries: Vec<(Category, &'static str)>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::build()
    }
}

impl Taxonomy {
    pub fn build() -> Self {
        let mut entries = Vec::with_capacity(N_CLASSES);
        for (cat, names) in Self::lists() {
            entries.extend(names.iter().map(|n| (cat, *n)));
        }
        Taxonomy { entries }
    }

    fn lists() -> [(Category, &'static [&'static str]); 6] {
        [
            (Category::Phase, &PHASES),
            (Category::Step, &STEPS),
            (Category::Instrument, &INSTRUMENTS),
            (Category::Quantity, &QUANTITIES),
            (Category::Position, &POSITIONS),
            (Category::OperationNote, &NOTES),
        ]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self, cat: Category) -> &'static [&'static str] {
        Self::lists()
            .into_iter()
            .find(|(c, _)| *c == cat)
            .map(|(_, n)| n)
            .unwrap_or(&[])
    }

    pub fn size(&self, cat: Category) -> usize {
        self.names(cat).len()
    }

    /// First global index of a category.
    pub fn offset(&self, cat: Category) -> usize {
        self.entries
            .iter()
            .position(|(c, _)| *c == cat)
            .unwrap_or(0)
    }

    pub fn global(&self, cat: Category, local: usize) -> usize {
        debug_assert!(local < self.size(cat));
        self.offset(cat) + local
    }

    pub fn entry(&self, class: usize) -> Result<(Category, &'static str)> {
        self.entries
            .get(class)
            .copied()
            .ok_or_else(|| Error::index("taxonomy", format!("class {class} out of range")))
    }

    pub fn category_of(&self, class: usize) -> Result<Category> {
        self.entry(class).map(|(c, _)| c)
    }

    pub fn class_of(&self, cat: Category, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| *e == (cat, name))
    }
}

/// Phase index of a global step number.
pub fn phase_of_step(step: usize) -> usize {
    let mut end = 0;
    for (p, n) in STEPS_PER_PHASE.iter().enumerate() {
        end += n;
        if step < end {
            return p;
        }
    }
    STEPS_PER_PHASE.len() - 1
}

/// Global step numbers belonging to a phase.
pub fn steps_of_phase(phase: usize) -> std::ops::Range<usize> {
    let start: usize = STEPS_PER_PHASE[..phase].iter().sum();
    start..start + STEPS_PER_PHASE[phase]
}
