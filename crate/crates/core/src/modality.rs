use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One sensor stream. The declaration order is the concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Rgb,
    Depth,
    Ir,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Rgb, ModalityId::Depth, ModalityId::Ir];

    pub fn index(self) -> usize {
        match self {
            ModalityId::Rgb => 0,
            ModalityId::Depth => 1,
            ModalityId::Ir => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::Rgb => "rgb",
            ModalityId::Depth => "depth",
            ModalityId::Ir => "ir",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rgb" => Ok(ModalityId::Rgb),
            "depth" => Ok(ModalityId::Depth),
            "ir" => Ok(ModalityId::Ir),
            other => Err(format!("unknown modality `{other}`")),
        }
    }
}

/// A value for each of the three modalities, indexable by [`ModalityId`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub rgb: T,
    pub depth: T,
    pub ir: T,
}

impl<T> PerModality<T> {
    pub fn new(rgb: T, depth: T, ir: T) -> Self {
        Self { rgb, depth, ir }
    }

    pub fn from_fn(mut f: impl FnMut(ModalityId) -> T) -> Self {
        Self {
            rgb: f(ModalityId::Rgb),
            depth: f(ModalityId::Depth),
            ir: f(ModalityId::Ir),
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(ModalityId, T) -> U) -> PerModality<U> {
        PerModality {
            rgb: f(ModalityId::Rgb, self.rgb),
            depth: f(ModalityId::Depth, self.depth),
            ir: f(ModalityId::Ir, self.ir),
        }
    }

    pub fn as_ref(&self) -> PerModality<&T> {
        PerModality {
            rgb: &self.rgb,
            depth: &self.depth,
            ir: &self.ir,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModalityId, &T)> {
        [
            (ModalityId::Rgb, &self.rgb),
            (ModalityId::Depth, &self.depth),
            (ModalityId::Ir, &self.ir),
        ]
        .into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ModalityId, &mut T)> {
        [
            (ModalityId::Rgb, &mut self.rgb),
            (ModalityId::Depth, &mut self.depth),
            (ModalityId::Ir, &mut self.ir),
        ]
        .into_iter()
    }
}

impl<T> Index<ModalityId> for PerModality<T> {
    type Output = T;

    fn index(&self, m: ModalityId) -> &T {
        match m {
            ModalityId::Rgb => &self.rgb,
            ModalityId::Depth => &self.depth,
            ModalityId::Ir => &self.ir,
        }
    }
}

impl<T> IndexMut<ModalityId> for PerModality<T> {
    fn index_mut(&mut self, m: ModalityId) -> &mut T {
        match m {
            ModalityId::Rgb => &mut self.rgb,
            ModalityId::Depth => &mut self.depth,
            ModalityId::Ir => &mut self.ir,
        }
    }
}
