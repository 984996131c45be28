//! Prompt text resources (see `prompts/` in this crate) and their rendering.

use std::sync::OnceLock;

use regex::{Captures, Regex};

pub const POPULATION_SYSTEM: &str = include_str!("../prompts/population_system.txt");
pub const POPULATION_USER: &str = include_str!("../prompts/population_user.txt");
pub const POPULATION_EXAMPLES: &str = include_str!("../prompts/population_examples.txt");
pub const REPAIR: &str = include_str!("../prompts/repair.txt");
pub const BASELINE_SYSTEM: &str = include_str!("../prompts/baseline_system.txt");
pub const BASELINE_USER: &str = include_str!("../prompts/baseline_user.txt");
pub const COVERAGE_SYSTEM: &str = include_str!("../prompts/coverage_system.txt");
pub const COVERAGE_USER: &str = include_str!("../prompts/coverage_user.txt");
pub const COVERAGE_REASK: &str = include_str!("../prompts/coverage_reask.txt");
pub const SYNTHESIS_SYSTEM: &str = include_str!("../prompts/synthesis_system.txt");
pub const SYNTHESIS_USER: &str = include_str!("../prompts/synthesis_user.txt");

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_]+)\}\}").expect("static regex"))
}

/// Substitutes `{{name}}` slots in a single pass, so substituted text is
/// never itself re-expanded. Unknown slots are left untouched.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    placeholder_re()
        .replace_all(template, |caps: &Captures<'_>| {
            let name = &caps[1];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| v.to_string())
                .unwrap_or_else(|| caps[0].to_string())
        })
        .trim_end()
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substituted_text_is_not_reexpanded() {
        let out = render("a={{a}} b={{b}} c={{c}}", &[("a", "{{b}}"), ("b", "2")]);
        assert_eq!(out, "a={{b}} b=2 c={{c}}");
    }

    #[test]
    fn resources_carry_their_slots() {
        for slot in ["contract", "context", "target_path", "definition", "structure", "examples"] {
            assert!(POPULATION_USER.contains(&format!("{{{{{slot}}}}}")), "{slot}");
        }
        assert!(COVERAGE_USER.contains("{{cdm}}"));
        assert!(REPAIR.contains("{{report}}"));
    }
}
