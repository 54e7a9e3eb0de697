mod common;

use common::{first_diff, latex_prompts, sentinel_round_trip, FIDELITY_PAIRS};
use stancedet::{TemplateId, TemplateSet};

#[test]
fn converter_finds_five_prompts() {
    assert_eq!(latex_prompts().len(), 5);
}

#[test]
fn stock_templates_match_latex() {
    let latex = latex_prompts();
    let templates = TemplateSet::stock();
    for (id, title) in FIDELITY_PAIRS {
        let got = sentinel_round_trip(&templates, id);
        assert_eq!(first_diff(&got, &latex[title]), None, "{}", id.as_str());
    }
}

#[test]
fn no_reflection_variant_drops_one_step() {
    let full = &latex_prompts()["Adjudicator Agent Prompt"];
    let expected = full
        .lines()
        .filter(|l| !l.starts_with("2. Critical Self-Reflection"))
        .map(|l| match l.split_once(". ") {
            Some((n, rest)) if n == "3" || n == "4" => format!("{}. {rest}", n.parse::<u32>().unwrap() - 1),
            _ => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n");
    let got = sentinel_round_trip(&TemplateSet::stock(), TemplateId::AdjudicatorNoReflection);
    assert_eq!(first_diff(&got, &expected), None);
}

#[test]
fn rendered_templates_leave_no_placeholders() {
    let templates = TemplateSet::stock();
    for (id, _) in FIDELITY_PAIRS {
        let bindings: std::collections::BTreeMap<&str, &str> =
            stancedet::agents::templates::PLACEHOLDERS.iter().map(|p| (*p, "x")).collect();
        let out = templates.render(id, &bindings).unwrap();
        for p in stancedet::agents::templates::PLACEHOLDERS {
            assert!(!out.contains(&format!("{{{p}}}")), "{} left {p}", id.as_str());
        }
    }
}
