use super::rule::{apply_rule, parse_query, Rule};
use super::scene::Scene;
use super::vocab::*;
use crate::error::{Error, Result};
use crate::model::TokenId;

/// Longest possible oracle rationale: marker, rule, one five-token step per
/// object, result marker and a full scene.
pub const MAX_RATIONALE_LEN: usize = 1 + 3 + 5 * super::MAX_OBJECTS + 1 + (4 * super::MAX_OBJECTS);

/// Deterministic derivation trace:
/// `RATIONALE rule (s c z -> outcome)* [NO_CHANGE] RESULT target`.
///
/// Each affected object yields one step; the outcome is the new color for
/// RECOLOR, `DROP` for REMOVE and `KEEP` for SELECT.
pub fn make_oracle_rationale(scene: &Scene, rule: &Rule, target: &Scene) -> Result<Vec<TokenId>> {
    if apply_rule(scene, rule)? != *target {
        return Err(Error::Task(
            "target is not the rule applied to the scene".into(),
        ));
    }
    let mut out = vec![RATIONALE_BEGIN];
    out.extend(rule.render());
    let mut steps = 0;
    for o in scene.objects.iter().filter(|o| rule.affects(o)) {
        out.extend_from_slice(&o.tokens());
        out.push(ARROW);
        out.push(match *rule {
            Rule::Recolor { to, .. } => COLOR_BASE + to as TokenId,
            Rule::Remove { .. } => DROP,
            Rule::Select { .. } => KEEP,
        });
        steps += 1;
    }
    if steps == 0 {
        out.push(NO_CHANGE);
    }
    out.push(RESULT);
    out.extend(target.render());
    Ok(out)
}

/// The scene stated after the `RESULT` marker of a rationale.
pub fn parse_rationale_result(rationale: &[TokenId]) -> Result<Scene> {
    let pos = rationale
        .iter()
        .position(|&t| t == RESULT)
        .ok_or_else(|| Error::Task("rationale has no result marker".into()))?;
    Scene::parse(&rationale[pos + 1..])
}

/// Whether `rationale` is exactly the oracle derivation for `query`.
pub fn rationale_matches_query(query: &[TokenId], rationale: &[TokenId]) -> bool {
    let Ok((scene, rule)) = parse_query(query) else {
        return false;
    };
    let Ok(target) = apply_rule(&scene, &rule) else {
        return false;
    };
    make_oracle_rationale(&scene, &rule, &target).is_ok_and(|r| r == rationale)
}
