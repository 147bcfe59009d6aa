use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered class registry. Class ids are positions in `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSpace", into = "RawLabelSpace")]
pub struct LabelSpace {
    classes: Vec<String>,
    background_id: u8,
    new_class_id: Option<u8>,
}

#[derive(Serialize, Deserialize)]
struct RawLabelSpace {
    classes: Vec<String>,
    background_id: u8,
    new_class_id: Option<u8>,
}

impl TryFrom<RawLabelSpace> for LabelSpace {
    type Error = Error;

    fn try_from(raw: RawLabelSpace) -> Result<Self> {
        let space = LabelSpace {
            classes: raw.classes,
            background_id: raw.background_id,
            new_class_id: raw.new_class_id,
        };
        space.validate()?;
        Ok(space)
    }
}

impl From<LabelSpace> for RawLabelSpace {
    fn from(space: LabelSpace) -> Self {
        RawLabelSpace {
            classes: space.classes,
            background_id: space.background_id,
            new_class_id: space.new_class_id,
        }
    }
}

impl LabelSpace {
    pub fn new<S: Into<String>>(
        classes: impl IntoIterator<Item = S>,
        background: &str,
    ) -> Result<Self> {
        let classes: Vec<String> = classes.into_iter().map(Into::into).collect();
        let background_id = classes
            .iter()
            .position(|c| c == background)
            .ok_or_else(|| {
                Error::Registry(format!("background class {background:?} not declared"))
            })?;
        let space = LabelSpace {
            classes,
            background_id: background_id as u8,
            new_class_id: None,
        };
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > 255 {
            return Err(Error::Registry(format!(
                "class count {} outside 1..=255",
                self.classes.len()
            )));
        }
        for (i, name) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(name) {
                return Err(Error::Registry(format!("duplicate class name {name:?}")));
            }
        }
        if usize::from(self.background_id) >= self.classes.len() {
            return Err(Error::Registry("background id out of range".into()));
        }
        if let Some(new_id) = self.new_class_id {
            if usize::from(new_id) + 1 != self.classes.len() {
                return Err(Error::Registry(
                    "new class must carry the largest id".into(),
                ));
            }
            if new_id == self.background_id {
                return Err(Error::Registry("new class cannot be background".into()));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn names(&self) -> &[String] {
        &self.classes
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.classes.get(usize::from(id)).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().position(|c| c == name).map(|i| i as u8)
    }

    pub fn background_id(&self) -> u8 {
        self.background_id
    }

    pub fn new_class_id(&self) -> Option<u8> {
        self.new_class_id
    }

    pub fn ids(&self) -> impl Iterator<Item = u8> {
        (0..self.classes.len()).map(|i| i as u8)
    }

    /// Every class except background.
    pub fn classes_of_interest(&self) -> Vec<u8> {
        self.ids().filter(|&id| id != self.background_id).collect()
    }

    /// Classes of interest known before the new class was added.
    pub fn old_classes_of_interest(&self) -> Vec<u8> {
        self.ids()
            .filter(|&id| id != self.background_id && Some(id) != self.new_class_id)
            .collect()
    }

    /// Appends `name` as the new class.
    pub fn with_new_class(&self, name: &str) -> Result<Self> {
        if self.id_of(name).is_some() {
            return Err(Error::Registry(format!(
                "class {name:?} already registered"
            )));
        }
        if self.classes.len() >= 255 {
            return Err(Error::Registry("label space is full".into()));
        }
        let mut next = self.clone();
        next.classes.push(name.to_owned());
        next.new_class_id = Some((next.classes.len() - 1) as u8);
        Ok(next)
    }

    /// The space as it was before the new class was appended.
    pub fn without_new_class(&self) -> Self {
        match self.new_class_id {
            None => self.clone(),
            Some(id) => {
                let mut prev = self.clone();
                prev.classes.truncate(usize::from(id));
                prev.new_class_id = None;
                prev
            }
        }
    }
}
