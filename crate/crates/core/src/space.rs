//! Design spaces, genomes and the one-hot codec.
//!
//! A [`SearchSpace`] is an ordered list of page elements, each with an ordered
//! list of values. Value index 0 of every element is the incumbent design, so
//! the all-zeros [`Genome`] is the Control.
//!
//! Genomes are stored densely as one value index per element. The one-hot bit
//! vector is only a codec view: recombination and mutation work on whole
//! element values and can never produce a malformed segment.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default upper bound on the number of genomes [`SearchSpace::enumerate`] will walk.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1 << 22;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("search space must have at least one element")]
    NoElements,
    #[error("element {element:?}: values must have length ≥ 2")]
    TooFewValues { element: String },
    #[error("element {element:?}: at most {max} values are supported")]
    TooManyValues { element: String, max: usize },
    #[error("duplicate element name {0:?}")]
    DuplicateElement(String),
    #[error("element {element:?}: duplicate value {value:?}")]
    DuplicateValue { element: String, value: String },
    #[error("element name must not be empty")]
    EmptyElementName,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenomeError {
    #[error("genome length mismatch: expected {expected} choices, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("element {element}: value index {index} out of range (element has {count} values)")]
    OutOfRange {
        element: usize,
        index: usize,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OneHotError {
    #[error("one-hot length mismatch: expected {expected} bits, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("segment {segment} has {set_bits} set bits")]
    BadSegment { segment: usize, set_bits: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("space has {size} genomes, above the enumeration cap of {cap}")]
pub struct CapExceeded {
    pub size: u128,
    pub cap: u128,
}

/// One changeable region of the interface and its allowed values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub name: String,
    /// Index 0 is the control value.
    pub values: Vec<String>,
}

impl ElementSpec {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        values: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            values: values.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Deserialize)]
struct RawSpace {
    elements: Vec<ElementSpec>,
}

/// The combinatorial universe of designs. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct SearchSpace {
    elements: Vec<ElementSpec>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        SearchSpace::new(raw.elements)
    }
}

impl SearchSpace {
    pub fn new(elements: Vec<ElementSpec>) -> Result<Self, SpaceError> {
        if elements.is_empty() {
            return Err(SpaceError::NoElements);
        }
        let mut names = HashSet::new();
        for element in &elements {
            if element.name.is_empty() {
                return Err(SpaceError::EmptyElementName);
            }
            if !names.insert(element.name.as_str()) {
                return Err(SpaceError::DuplicateElement(element.name.clone()));
            }
            if element.values.len() < 2 {
                return Err(SpaceError::TooFewValues {
                    element: element.name.clone(),
                });
            }
            if element.values.len() > u16::MAX as usize {
                return Err(SpaceError::TooManyValues {
                    element: element.name.clone(),
                    max: u16::MAX as usize,
                });
            }
            let mut seen = HashSet::new();
            for value in &element.values {
                if !seen.insert(value.as_str()) {
                    return Err(SpaceError::DuplicateValue {
                        element: element.name.clone(),
                        value: value.clone(),
                    });
                }
            }
        }
        let mut offsets = Vec::with_capacity(elements.len());
        let mut acc = 0;
        for element in &elements {
            offsets.push(acc);
            acc += element.values.len();
        }
        Ok(Self { elements, offsets })
    }

    /// Builds a space with generated names (`e0`, `e1`, ... and `v0`, `v1`, ...).
    pub fn from_counts(counts: &[usize]) -> Result<Self, SpaceError> {
        let elements = counts
            .iter()
            .enumerate()
            .map(|(i, &count)| {
                ElementSpec::new(format!("e{i}"), (0..count).map(|v| format!("v{v}")))
            })
            .collect();
        Self::new(elements)
    }

    pub fn elements(&self) -> &[ElementSpec] {
        &self.elements
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn value_count(&self, element: usize) -> usize {
        self.elements[element].values.len()
    }

    pub fn value_counts(&self) -> Vec<usize> {
        self.elements.iter().map(|e| e.values.len()).collect()
    }

    pub fn element_index(&self, name: &str) -> Option<usize> {
        self.elements.iter().position(|e| e.name == name)
    }

    pub fn value_index(&self, element: usize, value: &str) -> Option<usize> {
        self.elements
            .get(element)?
            .values
            .iter()
            .position(|v| v == value)
    }

    /// Number of distinct genomes. Saturates at `u128::MAX`.
    pub fn size(&self) -> u128 {
        self.elements
            .iter()
            .fold(1u128, |acc, e| acc.saturating_mul(e.values.len() as u128))
    }

    /// Total one-hot width: the sum of value counts.
    pub fn one_hot_len(&self) -> usize {
        self.elements.iter().map(|e| e.values.len()).sum()
    }

    /// Number of genomes at Hamming distance 1 from any fixed genome.
    pub fn neighbor_count(&self) -> usize {
        self.elements.iter().map(|e| e.values.len() - 1).sum()
    }

    pub fn control(&self) -> Genome {
        Genome(vec![0; self.elements.len()])
    }

    pub fn validate(&self, genome: &Genome) -> Result<(), GenomeError> {
        if genome.len() != self.elements.len() {
            return Err(GenomeError::LengthMismatch {
                expected: self.elements.len(),
                actual: genome.len(),
            });
        }
        for (element, (&choice, spec)) in genome.0.iter().zip(&self.elements).enumerate() {
            if choice as usize >= spec.values.len() {
                return Err(GenomeError::OutOfRange {
                    element,
                    index: choice as usize,
                    count: spec.values.len(),
                });
            }
        }
        Ok(())
    }

    pub fn encode_one_hot(&self, genome: &Genome) -> Result<Vec<bool>, GenomeError> {
        self.validate(genome)?;
        let mut bits = vec![false; self.one_hot_len()];
        for (&offset, &choice) in self.offsets.iter().zip(&genome.0) {
            bits[offset + choice as usize] = true;
        }
        Ok(bits)
    }

    pub fn decode_one_hot(&self, bits: &[bool]) -> Result<Genome, OneHotError> {
        let expected = self.one_hot_len();
        if bits.len() != expected {
            return Err(OneHotError::WrongLength {
                expected,
                actual: bits.len(),
            });
        }
        let mut choices = Vec::with_capacity(self.elements.len());
        for (segment, (&offset, spec)) in self.offsets.iter().zip(&self.elements).enumerate() {
            let slice = &bits[offset..offset + spec.values.len()];
            let set_bits = slice.iter().filter(|&&b| b).count();
            if set_bits != 1 {
                return Err(OneHotError::BadSegment { segment, set_bits });
            }
            let index = slice.iter().position(|&b| b).expect("one bit set");
            choices.push(index as u16);
        }
        Ok(Genome(choices))
    }

    /// Walks every genome in lexicographic order of choices.
    pub fn enumerate(&self, cap: u128) -> Result<GenomeIter, CapExceeded> {
        let size = self.size();
        if size > cap {
            return Err(CapExceeded { size, cap });
        }
        Ok(GenomeIter {
            counts: self
                .elements
                .iter()
                .map(|e| e.values.len() as u16)
                .collect(),
            next: Some(vec![0; self.elements.len()]),
        })
    }

    /// Element-name → value-name view of a genome.
    pub fn describe<'a>(&'a self, genome: &Genome) -> Vec<(&'a str, &'a str)> {
        self.elements
            .iter()
            .zip(&genome.0)
            .map(|(e, &c)| (e.name.as_str(), e.values[c as usize].as_str()))
            .collect()
    }

    /// Value names joined by `|`, the form used in CSV reports.
    pub fn genome_label(&self, genome: &Genome) -> String {
        self.describe(genome)
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// One value index per element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Genome(Vec<u16>);

impl Genome {
    pub fn new(choices: Vec<u16>) -> Self {
        Self(choices)
    }

    pub fn choices(&self) -> &[u16] {
        &self.0
    }

    pub fn choice(&self, element: usize) -> usize {
        self.0[element] as usize
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_control(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    pub fn with_choice(&self, element: usize, value: usize) -> Genome {
        let mut choices = self.0.clone();
        choices[element] = value as u16;
        Genome(choices)
    }

    pub fn hamming(&self, other: &Genome) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl From<Vec<u16>> for Genome {
    fn from(choices: Vec<u16>) -> Self {
        Self(choices)
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, "]")
    }
}

/// Odometer over all genomes of a space; the last element varies fastest.
#[derive(Debug, Clone)]
pub struct GenomeIter {
    counts: Vec<u16>,
    next: Option<Vec<u16>>,
}

impl Iterator for GenomeIter {
    type Item = Genome;

    fn next(&mut self) -> Option<Genome> {
        let current = self.next.take()?;
        let mut successor = current.clone();
        let mut pos = successor.len();
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            successor[pos] += 1;
            if successor[pos] < self.counts[pos] {
                self.next = Some(successor);
                break;
            }
            successor[pos] = 0;
        }
        Some(Genome(current))
    }
}

/// Renders one-hot bits with a space between element segments, e.g. `10 100`.
pub fn format_one_hot(space: &SearchSpace, bits: &[bool]) -> String {
    let mut out = String::with_capacity(bits.len() + space.element_count());
    let mut pos = 0;
    for (i, count) in space.value_counts().into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        for &b in &bits[pos..pos + count] {
            out.push(if b { '1' } else { '0' });
        }
        pos += count;
    }
    out
}
