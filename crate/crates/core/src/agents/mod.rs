//! The five agent roles: analysis (text, image, modality conflict), debaters
//! and the adjudicator.

mod parse;
pub mod templates;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use self::parse::{format_adjudicator_output, parse_adjudicator_output};
pub use self::templates::{render_prompt, PromptTemplate, TemplateId, TemplateSet};
use crate::domain::{
    AnalysisBundle, CallTag, CallTrace, DebateRole, DebateRound, DebateTranscript, ImageSource, Instance, Stage,
    StanceLabel, Verdict, Vocabulary, UNPARSEABLE,
};
use crate::error::{Error, Result};
use crate::llm::{complete, ChatBackend, ChatMessage, CompletionParams};
use crate::scalar::Scalar;
use crate::store::ExemplarRecord;

pub const NO_EXEMPLARS: &str = "No contextual examples available.";
pub const EXEMPLAR_HEADER: &str = "Contextual examples from similar instances:";

/// Attempts the adjudicator gets before falling back to Neutral.
pub const ADJUDICATION_ATTEMPTS: u32 = 3;

pub const FORMAT_REMINDER: &str = "Your previous reply did not follow the required output format. \
Reply again using exactly this format:\nStance: [Favor|Neutral|Against]\nJustification: [Your detailed reasoning]";

/// Completion parameters per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub analysis: CompletionParams,
    pub debate: CompletionParams,
    pub adjudication: CompletionParams,
    pub cot: CompletionParams,
}

impl ModelParams {
    /// Same parameters for every stage.
    pub fn uniform(params: CompletionParams) -> ModelParams {
        ModelParams {
            analysis: params.clone(),
            debate: params.clone(),
            adjudication: params.clone(),
            cot: params,
        }
    }
}

/// Everything an agent needs to make a model call.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub templates: &'a TemplateSet,
    pub params: &'a ModelParams,
}

impl<'a> AgentContext<'a> {
    pub fn new(backend: &'a dyn ChatBackend, templates: &'a TemplateSet, params: &'a ModelParams) -> Self {
        AgentContext {
            backend,
            templates,
            params,
        }
    }

    fn call(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
        tag: CallTag,
        trace: &mut CallTrace,
    ) -> Result<String> {
        let completion = complete(self.backend, messages, params, &tag).map_err(|e| e.at_stage(tag.to_string()))?;
        trace.push(completion.trace_entry(&tag));
        Ok(completion.text)
    }
}

fn bindings<'a>(pairs: impl IntoIterator<Item = (&'static str, &'a str)>) -> BTreeMap<&'static str, &'a str> {
    pairs.into_iter().collect()
}

fn require_non_empty(what: &str, value: &str) -> Result<()> {
    if value.trim().is_empty() {
        return Err(Error::InvalidInput(format!("{what} must be non-empty")));
    }
    Ok(())
}

/// Text analysis agent: text-only message, tagged `MA/text`.
pub fn analyze_text(ctx: &AgentContext<'_>, text: &str, target: &str, trace: &mut CallTrace) -> Result<String> {
    require_non_empty("text", text)?;
    require_non_empty("target", target)?;
    let prompt = ctx
        .templates
        .render(TemplateId::TextAnalysis, &bindings([("text", text), ("target", target)]))?;
    ctx.call(
        &[ChatMessage::user_text(prompt)],
        &ctx.params.analysis,
        CallTag::new(Stage::Ma, "text"),
        trace,
    )
}

/// Image analysis agent. The image is decoded before any model call.
pub fn analyze_image(ctx: &AgentContext<'_>, image: &ImageSource, target: &str, trace: &mut CallTrace) -> Result<String> {
    require_non_empty("target", target)?;
    let tag = CallTag::new(Stage::Ma, "image");
    let data = image.load().map_err(|e| e.at_stage(tag.to_string()))?;
    let prompt = ctx
        .templates
        .render(TemplateId::ImageAnalysis, &bindings([("target", target)]))?;
    ctx.call(&[ChatMessage::user_with_image(prompt, data)], &ctx.params.analysis, tag, trace)
}

/// Formats retrieved exemplars for the `{exemplar_info}` slot.
pub fn format_exemplars<'r, S: Scalar>(exemplars: impl IntoIterator<Item = &'r ExemplarRecord<S>>) -> String {
    let mut out = String::new();
    for (i, ex) in exemplars.into_iter().enumerate() {
        if i == 0 {
            out.push_str(EXEMPLAR_HEADER);
        }
        out.push_str(&format!(
            "\nExample {}:\nText: {}\nTarget: {}\nStance: {}\nReasoning: {}",
            i + 1,
            ex.instance.text,
            ex.instance.target,
            ex.label.word(Vocabulary::Canonical),
            ex.cot
        ));
    }
    if out.is_empty() {
        out.push_str(NO_EXEMPLARS);
    }
    out
}

/// Modality conflict agent, guided by the retrieved exemplars' rationales.
pub fn analyze_conflict<'r, S: Scalar>(
    ctx: &AgentContext<'_>,
    instance: &Instance,
    exemplars: impl IntoIterator<Item = &'r ExemplarRecord<S>>,
    trace: &mut CallTrace,
) -> Result<String> {
    instance.validate_text()?;
    let tag = CallTag::new(Stage::Ma, "conflict");
    let data = instance.image.load().map_err(|e| e.at_stage(tag.to_string()))?;
    let exemplar_info = format_exemplars(exemplars);
    let prompt = ctx.templates.render(
        TemplateId::ModalityConflict,
        &bindings([
            ("text", instance.text.as_str()),
            ("target", instance.target.as_str()),
            ("exemplar_info", exemplar_info.as_str()),
        ]),
    )?;
    ctx.call(&[ChatMessage::user_with_image(prompt, data)], &ctx.params.analysis, tag, trace)
}

fn role_word(role: DebateRole) -> &'static str {
    role.label().word(Vocabulary::Adjudicator)
}

/// Renders the previous round for the `{debate_context}` slot.
pub fn format_debate_context(previous: Option<&DebateRound>) -> String {
    let Some(round) = previous else {
        return String::new();
    };
    let mut out = String::from("Previous Round Arguments:");
    for role in DebateRole::ORDER {
        if let Some(arg) = round.get(&role) {
            out.push_str(&format!("\n{} Argument: {}", role_word(role), arg));
        }
    }
    out
}

/// Runs `rounds` debate rounds; each round every role speaks once, in
/// support, oppose, neutral order, seeing only the previous round.
pub fn run_debate(
    ctx: &AgentContext<'_>,
    instance: &Instance,
    bundle: &AnalysisBundle,
    rounds: u32,
    trace: &mut CallTrace,
) -> Result<DebateTranscript> {
    if rounds == 0 {
        return Err(Error::InvalidInput("debate needs at least one round".into()));
    }
    let mut history: Vec<DebateRound> = Vec::with_capacity(rounds as usize);
    for r in 1..=rounds {
        let context = format_debate_context(history.last());
        let mut round = DebateRound::new();
        for role in DebateRole::ORDER {
            let prompt = ctx.templates.render(
                TemplateId::Debater,
                &bindings([
                    ("stance_type", role_word(role)),
                    ("text", instance.text.as_str()),
                    ("target", instance.target.as_str()),
                    ("text_analysis", bundle.text_or_sentinel()),
                    ("image_analysis", bundle.image_or_sentinel()),
                    ("conflict_analysis", bundle.conflict_or_sentinel()),
                    ("debate_context", context.as_str()),
                ]),
            )?;
            let tag = CallTag::new(Stage::Red, format!("{}/r{r}", role.as_str()));
            let argument = ctx.call(&[ChatMessage::user_text(prompt)], &ctx.params.debate, tag, trace)?;
            round.insert(role, argument);
        }
        history.push(round);
    }
    let final_arguments = history.last().cloned().unwrap_or_default();
    Ok(DebateTranscript {
        rounds: history,
        final_arguments,
    })
}

/// Whether the adjudicator is asked to critically reflect before deciding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reflection {
    Enabled,
    Disabled,
}

/// Adjudicator: renders the prompt, parses the structured reply, re-asks up
/// to twice with a format reminder, then falls back to Neutral/UNPARSEABLE.
/// `trace` holds the calls made so far for this instance.
pub fn adjudicate(
    ctx: &AgentContext<'_>,
    instance: &Instance,
    bundle: &AnalysisBundle,
    transcript: &DebateTranscript,
    reflection: Reflection,
    mut trace: CallTrace,
) -> Result<Verdict> {
    let template = match reflection {
        Reflection::Enabled => TemplateId::Adjudicator,
        Reflection::Disabled => TemplateId::AdjudicatorNoReflection,
    };
    let prompt = ctx.templates.render(
        template,
        &bindings([
            ("text", instance.text.as_str()),
            ("target", instance.target.as_str()),
            ("text_analysis", bundle.text_or_sentinel()),
            ("image_analysis", bundle.image_or_sentinel()),
            ("conflict_analysis", bundle.conflict_or_sentinel()),
            ("favor_arg", transcript.argument(DebateRole::Support)),
            ("against_arg", transcript.argument(DebateRole::Oppose)),
            ("neutral_arg", transcript.argument(DebateRole::Neutral)),
        ]),
    )?;
    let mut messages = vec![ChatMessage::user_text(prompt)];
    for attempt in 1..=ADJUDICATION_ATTEMPTS {
        let tag = CallTag::new(Stage::Sra, "adjudicator");
        let reply = ctx.call(&messages, &ctx.params.adjudication, tag, &mut trace)?;
        match parse_adjudicator_output(&reply) {
            Ok((label, justification)) => {
                return Ok(Verdict {
                    label,
                    justification,
                    fallback: false,
                    retrieved: Vec::new(),
                    trace,
                })
            }
            Err(e) => {
                log::debug!("{}: unparseable adjudicator reply (attempt {attempt}): {e}", instance.id);
                if let Some(last) = trace.entries.last_mut() {
                    last.note = Some(format!("unparseable attempt {attempt}"));
                }
                messages.push(ChatMessage::assistant_text(reply));
                messages.push(ChatMessage::user_text(FORMAT_REMINDER));
            }
        }
    }
    log::warn!("{}: adjudicator output unparseable after {ADJUDICATION_ATTEMPTS} attempts; using Neutral fallback", instance.id);
    if let Some(last) = trace.entries.last_mut() {
        last.note = Some("unparseable-fallback".into());
    }
    Ok(Verdict {
        label: StanceLabel::Neutral,
        justification: UNPARSEABLE.to_string(),
        fallback: true,
        retrieved: Vec::new(),
        trace,
    })
}
