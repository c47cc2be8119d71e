// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled activation samples and concept identifiers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Object,
    Style,
}

/// A labeled concept: an object class or a style, by vocabulary index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub domain: Domain,
    pub id: u16,
}

impl Concept {
    pub fn object(id: u16) -> Self {
        Self {
            domain: Domain::Object,
            id,
        }
    }

    pub fn style(id: u16) -> Self {
        Self {
            domain: Domain::Style,
            id,
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.domain {
            Domain::Object => write!(f, "object:{}", self.id),
            Domain::Style => write!(f, "style:{}", self.id),
        }
    }
}

/// One `d`-dimensional activation with its timestep and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSample {
    pub x: Vec<f32>,
    pub timestep: u16,
    pub object: Option<u16>,
    pub style: Option<u16>,
}

impl ActivationSample {
    pub fn label(&self, domain: Domain) -> Option<u16> {
        match domain {
            Domain::Object => self.object,
            Domain::Style => self.style,
        }
    }

    pub fn has(&self, c: Concept) -> bool {
        self.label(c.domain) == Some(c.id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = Concept> + '_ {
        self.object
            .map(Concept::object)
            .into_iter()
            .chain(self.style.map(Concept::style))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub timesteps: u16,
    pub objects: Vec<String>,
    pub styles: Vec<String>,
    pub samples: Vec<ActivationSample>,
}

impl Dataset {
    /// Checks every invariant: dimensions, label ranges and finiteness.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.d {
                return Err(Error::DimensionMismatch {
                    context: "sample vector",
                    expected: self.d,
                    actual: s.x.len(),
                });
            }
            if let Some(pos) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "sample vector",
                    index: i * self.d + pos,
                });
            }
            if s.timestep >= self.timesteps {
                return Err(Error::IndexOutOfRange {
                    context: "sample timestep",
                    index: usize::from(s.timestep),
                    len: usize::from(self.timesteps),
                });
            }
            for (label, vocab, context) in [
                (s.object, self.objects.len(), "object label"),
                (s.style, self.styles.len(), "style label"),
            ] {
                if let Some(l) = label {
                    if usize::from(l) >= vocab {
                        return Err(Error::IndexOutOfRange {
                            context,
                            index: usize::from(l),
                            len: vocab,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every object concept followed by every style concept.
    pub fn concepts(&self) -> Vec<Concept> {
        (0..self.objects.len() as u16)
            .map(Concept::object)
            .chain((0..self.styles.len() as u16).map(Concept::style))
            .collect()
    }

    pub fn vocabulary(&self, domain: Domain) -> &[String] {
        match domain {
            Domain::Object => &self.objects,
            Domain::Style => &self.styles,
        }
    }

    pub fn concept_name(&self, c: Concept) -> &str {
        self.vocabulary(c.domain)
            .get(usize::from(c.id))
            .map_or("?", String::as_str)
    }

    /// Looks a concept up by vocabulary name or by `object:<id>` / `style:<id>`.
    pub fn find_concept(&self, name: &str) -> Result<Concept> {
        let parse = |prefix: &str, domain: Domain| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<u16>().ok())
                .map(|id| Concept { domain, id })
        };
        let found = parse("object:", Domain::Object)
            .or_else(|| parse("style:", Domain::Style))
            .or_else(|| {
                self.objects
                    .iter()
                    .position(|o| o.eq_ignore_ascii_case(name))
                    .map(|i| Concept::object(i as u16))
            })
            .or_else(|| {
                self.styles
                    .iter()
                    .position(|o| o.eq_ignore_ascii_case(name))
                    .map(|i| Concept::style(i as u16))
            });
        match found {
            Some(c) if usize::from(c.id) < self.vocabulary(c.domain).len() => Ok(c),
            _ => Err(Error::InvalidArgument(format!("unknown concept {name:?}"))),
        }
    }

    pub fn mean(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.d];
        for s in &self.samples {
            for (a, &v) in acc.iter_mut().zip(&s.x) {
                *a += f64::from(v);
            }
        }
        let n = self.samples.len().max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    /// Total variance: mean squared distance to the mean.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let total: f64 = self
            .samples
            .iter()
            .map(|s| {
                s.x.iter()
                    .zip(&mean)
                    .map(|(&a, &m)| (f64::from(a) - f64::from(m)).powi(2))
                    .sum::<f64>()
            })
            .sum();
        total / self.samples.len().max(1) as f64
    }

    /// Rows of the selected samples as a matrix.
    pub fn matrix_of(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].x);
        }
        Matrix::from_vec(indices.len(), self.d, data).expect("validated samples")
    }

    /// A dataset with the same vocabularies holding the selected samples.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    pub fn empty_like(&self) -> Dataset {
        Dataset {
            d: self.d,
            timesteps: self.timesteps,
            objects: self.objects.clone(),
            styles: self.styles.clone(),
            samples: Vec::new(),
        }
    }
}
