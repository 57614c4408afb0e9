//! Modality/pathology universe and the binary domain token derived from it.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Fixed, ordered sets of modality and pathology names shared by every
/// dataset of an experiment. Channel `k` of a packed volume always carries
/// `names[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityUniverse {
    pub names: Vec<String>,
    pub pathology_names: Vec<String>,
}

impl Default for ModalityUniverse {
    fn default() -> Self {
        Self {
            names: ["PD", "FLAIR", "T1", "T1c", "T2", "DWI"]
                .map(String::from)
                .to_vec(),
            pathology_names: [
                "Tumor",
                "Stroke lesion",
                "Sclerosis lesions",
                "White matter hyperintensity",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl ModalityUniverse {
    pub fn new(names: Vec<String>, pathology_names: Vec<String>) -> Result<Self> {
        let u = Self {
            names,
            pathology_names,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.names.is_empty(), "universe needs at least one modality");
        ensure!(
            !self.pathology_names.is_empty(),
            "universe needs at least one pathology"
        );
        for (i, n) in self.names.iter().enumerate() {
            ensure!(
                !self.names[..i].contains(n),
                "duplicate modality name {n:?} in universe"
            );
        }
        for (i, n) in self.pathology_names.iter().enumerate() {
            ensure!(
                !self.pathology_names[..i].contains(n),
                "duplicate pathology name {n:?} in universe"
            );
        }
        Ok(())
    }

    /// Number of modalities `m` (= model input channels).
    pub fn m(&self) -> usize {
        self.names.len()
    }

    /// Number of pathologies `d`.
    pub fn d(&self) -> usize {
        self.pathology_names.len()
    }

    pub fn token_len(&self) -> usize {
        self.m() + self.d()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::validation(format!("unknown modality {name:?}")))
    }

    pub fn pathology_index(&self, name: &str) -> Result<usize> {
        self.pathology_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::validation(format!("unknown pathology {name:?}")))
    }
}

/// Binary vector `I^m ⊕ I^d`: modality presence bits followed by a one-hot
/// pathology block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainToken {
    bits: Vec<u8>,
}

impl DomainToken {
    /// Builds the token for a modality set and pathology.
    pub fn build<S: AsRef<str>>(
        modalities: &[S],
        pathology: &str,
        universe: &ModalityUniverse,
    ) -> Result<Self> {
        ensure!(!modalities.is_empty(), "modality set must be non-empty");
        let mut present = vec![false; universe.m()];
        for name in modalities {
            present[universe.modality_index(name.as_ref())?] = true;
        }
        let p = universe.pathology_index(pathology)?;
        Ok(Self::from_parts(&present, p, universe.d()))
    }

    pub(crate) fn from_parts(present: &[bool], pathology: usize, d: usize) -> Self {
        let mut bits: Vec<u8> = present.iter().map(|&p| p as u8).collect();
        bits.extend((0..d).map(|j| (j == pathology) as u8));
        Self { bits }
    }

    /// Validates raw bits against a universe.
    pub fn from_bits(bits: Vec<u8>, universe: &ModalityUniverse) -> Result<Self> {
        ensure!(
            bits.len() == universe.token_len(),
            "token length {} != m+d = {}",
            bits.len(),
            universe.token_len()
        );
        ensure!(bits.iter().all(|&b| b <= 1), "token bits must be 0 or 1");
        let (m, d) = bits.split_at(universe.m());
        ensure!(
            m.iter().any(|&b| b == 1),
            "token needs at least one modality bit"
        );
        ensure!(
            d.iter().filter(|&&b| b == 1).count() == 1,
            "token needs exactly one pathology bit"
        );
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn modality_bits<'a>(&'a self, universe: &ModalityUniverse) -> &'a [u8] {
        &self.bits[..universe.m()]
    }

    pub fn pathology_bits<'a>(&'a self, universe: &ModalityUniverse) -> &'a [u8] {
        &self.bits[universe.m()..]
    }

    /// Replaces the modality block, keeping the pathology block.
    pub(crate) fn with_modalities(&self, present: &[bool]) -> Self {
        let mut bits = self.bits.clone();
        for (b, &p) in bits.iter_mut().zip(present) {
            *b = p as u8;
        }
        Self { bits }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}
