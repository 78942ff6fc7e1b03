use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scene::{color_of, shape_of, Object, Scene};
use super::vocab::*;
use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Recolor,
    Remove,
    Select,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Recolor, Family::Remove, Family::Select];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Recolor => "recolor",
            Family::Remove => "remove",
            Family::Select => "select",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recolor" => Ok(Family::Recolor),
            "remove" => Ok(Family::Remove),
            "select" => Ok(Family::Select),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

/// Parses a comma-separated family list such as `recolor,select`.
pub fn parse_families(s: &str) -> Result<Vec<Family>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let f: Family = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty task family list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Recolor { from: u8, to: u8 },
    Remove { shape: u8 },
    Select { shape: u8, color: u8 },
}

impl Rule {
    pub fn family(&self) -> Family {
        match self {
            Rule::Recolor { .. } => Family::Recolor,
            Rule::Remove { .. } => Family::Remove,
            Rule::Select { .. } => Family::Select,
        }
    }

    /// Argument combinations reserved for evaluation: color shifts by half
    /// the palette, and shape/color descriptors whose indices sum to a
    /// multiple of six.
    pub fn is_holdout(&self) -> bool {
        match *self {
            Rule::Recolor { from, to } => {
                (to as usize + N_COLORS - from as usize) % N_COLORS == N_COLORS / 2
            }
            Rule::Remove { .. } => false,
            Rule::Select { shape, color } => (shape as usize + color as usize).is_multiple_of(6),
        }
    }

    pub fn render(&self) -> Vec<TokenId> {
        match *self {
            Rule::Recolor { from, to } => vec![
                RECOLOR,
                COLOR_BASE + from as TokenId,
                COLOR_BASE + to as TokenId,
            ],
            Rule::Remove { shape } => vec![REMOVE, SHAPE_BASE + shape as TokenId],
            Rule::Select { shape, color } => {
                vec![
                    SELECT,
                    SHAPE_BASE + shape as TokenId,
                    COLOR_BASE + color as TokenId,
                ]
            }
        }
    }

    /// Parses a rule at the start of `tokens`, returning it and the number
    /// of tokens consumed.
    pub fn parse_prefix(tokens: &[TokenId]) -> Result<(Self, usize)> {
        let bad = || Error::Task(format!("malformed rule: {tokens:?}"));
        let arg = |i: usize| tokens.get(i).copied().ok_or_else(bad);
        match tokens.first() {
            Some(&RECOLOR) => {
                let from = color_of(arg(1)?).ok_or_else(bad)?;
                let to = color_of(arg(2)?).ok_or_else(bad)?;
                if from == to {
                    return Err(Error::Task("recolor to the same color".into()));
                }
                Ok((Rule::Recolor { from, to }, 3))
            }
            Some(&REMOVE) => Ok((
                Rule::Remove {
                    shape: shape_of(arg(1)?).ok_or_else(bad)?,
                },
                2,
            )),
            Some(&SELECT) => Ok((
                Rule::Select {
                    shape: shape_of(arg(1)?).ok_or_else(bad)?,
                    color: color_of(arg(2)?).ok_or_else(bad)?,
                },
                3,
            )),
            _ => Err(bad()),
        }
    }

    /// Whether `obj` is touched by this rule.
    pub fn affects(&self, obj: &Object) -> bool {
        match *self {
            Rule::Recolor { from, .. } => obj.color == from,
            Rule::Remove { shape } => obj.shape == shape,
            Rule::Select { shape, color } => obj.shape == shape && obj.color == color,
        }
    }
}

/// Ground-truth semantics of a rule.
pub fn apply_rule(scene: &Scene, rule: &Rule) -> Result<Scene> {
    match *rule {
        Rule::Recolor { from, to } => {
            if from == to {
                return Err(Error::Task("recolor to the same color".into()));
            }
            let objects = scene
                .objects
                .iter()
                .map(|o| {
                    if o.color == from {
                        Object { color: to, ..*o }
                    } else {
                        *o
                    }
                })
                .collect();
            Scene::new(objects)
        }
        Rule::Remove { shape } => {
            let kept: Vec<Object> = scene
                .objects
                .iter()
                .filter(|o| o.shape != shape)
                .copied()
                .collect();
            if kept.is_empty() {
                return Err(Error::Task("remove would leave an empty scene".into()));
            }
            Scene::new(kept)
        }
        Rule::Select { .. } => {
            let mut hits = scene.objects.iter().filter(|o| rule.affects(o));
            match (hits.next(), hits.next()) {
                (Some(o), None) => Scene::new(vec![*o]),
                (None, _) => Err(Error::Task("select descriptor matches no object".into())),
                _ => Err(Error::Task(
                    "select descriptor matches several objects".into(),
                )),
            }
        }
    }
}

/// Query layout: rendered scene followed by the rule.
pub fn render_query(scene: &Scene, rule: &Rule) -> Vec<TokenId> {
    let mut q = scene.render();
    q.extend(rule.render());
    q
}

pub fn parse_query(tokens: &[TokenId]) -> Result<(Scene, Rule)> {
    let (scene, used) = Scene::parse_prefix(tokens)?;
    let (rule, n) = Rule::parse_prefix(&tokens[used..])?;
    if used + n != tokens.len() {
        return Err(Error::Task("trailing tokens after rule".into()));
    }
    Ok((scene, rule))
}
