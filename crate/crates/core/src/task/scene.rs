use super::vocab::*;
use crate::error::{Error, Result};
use crate::model::TokenId;

/// Most objects a scene may hold.
pub const MAX_OBJECTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
}

impl Object {
    pub fn new(shape: u8, color: u8, size: u8) -> Self {
        Self { shape, color, size }
    }

    pub fn tokens(&self) -> [TokenId; 3] {
        [
            SHAPE_BASE + self.shape as TokenId,
            COLOR_BASE + self.color as TokenId,
            SIZE_BASE + self.size as TokenId,
        ]
    }

    fn is_valid(&self) -> bool {
        (self.shape as usize) < N_SHAPES
            && (self.color as usize) < N_COLORS
            && (self.size as usize) < N_SIZES
    }
}

pub(crate) fn shape_of(t: TokenId) -> Option<u8> {
    (SHAPE_BASE..COLOR_BASE)
        .contains(&t)
        .then(|| (t - SHAPE_BASE) as u8)
}

pub(crate) fn color_of(t: TokenId) -> Option<u8> {
    (COLOR_BASE..SIZE_BASE)
        .contains(&t)
        .then(|| (t - COLOR_BASE) as u8)
}

pub(crate) fn size_of(t: TokenId) -> Option<u8> {
    (SIZE_BASE..VOCAB_SIZE as TokenId)
        .contains(&t)
        .then(|| (t - SIZE_BASE) as u8)
}

/// Ordered objects, `1..=MAX_OBJECTS` of them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn new(objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() || objects.len() > MAX_OBJECTS {
            return Err(Error::Task(format!(
                "scene must hold 1..={MAX_OBJECTS} objects, got {}",
                objects.len()
            )));
        }
        if let Some(o) = objects.iter().find(|o| !o.is_valid()) {
            return Err(Error::Task(format!("attribute out of range: {o:?}")));
        }
        Ok(Self { objects })
    }

    /// `SCENE s c z | s c z | ...`
    pub fn render(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(1 + 4 * self.objects.len());
        out.push(SCENE_BEGIN);
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                out.push(OBJ_SEP);
            }
            out.extend_from_slice(&o.tokens());
        }
        out
    }

    /// Inverse of [`Scene::render`]; the whole slice must be one scene.
    pub fn parse(tokens: &[TokenId]) -> Result<Self> {
        let (scene, used) = Self::parse_prefix(tokens)?;
        if used != tokens.len() {
            return Err(Error::Task(format!(
                "trailing tokens after scene at {used}"
            )));
        }
        Ok(scene)
    }

    /// Parses a scene at the start of `tokens`, returning it and the number
    /// of tokens consumed.
    pub fn parse_prefix(tokens: &[TokenId]) -> Result<(Self, usize)> {
        let bad = |msg: &str| Err(Error::Task(format!("malformed scene: {msg}")));
        if tokens.first() != Some(&SCENE_BEGIN) {
            return bad("missing scene marker");
        }
        let mut objects = Vec::new();
        let mut pos = 1;
        loop {
            let Some(t) = tokens.get(pos..pos + 3) else {
                return bad("truncated object");
            };
            match (shape_of(t[0]), color_of(t[1]), size_of(t[2])) {
                (Some(s), Some(c), Some(z)) => objects.push(Object::new(s, c, z)),
                _ => return bad("bad attribute token"),
            }
            pos += 3;
            if tokens.get(pos) == Some(&OBJ_SEP) {
                pos += 1;
            } else {
                break;
            }
        }
        Ok((Self::new(objects)?, pos))
    }
}
