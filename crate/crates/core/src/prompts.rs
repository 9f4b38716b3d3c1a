//! Prompt templates and slot filling.

/// Schema generation prompt. Slots: question, ground_truth, mistake_agent,
/// mistake_step, mistake_reason, chat_content.
pub const SCHEMA_GENERATION: &str = r#"Given an error analysis from a multi-agent conversation, create an error schema to help identify similar errors in the future.

Context:

Question: {question}

Ground Truth: {ground_truth}

Error Agent: {mistake_agent}

Error Step: {mistake_step}

Error Reason: {mistake_reason}

Conversation History:
{chat_content}

Based on this error case, please create a error schema that will help IDENTIFY similar errors in future conversations. Focus primarily on recognition patterns rather than mitigation strategies. The schema should include:

1. Error Signatures:
   - What distinctive patterns or signals indicate this type of error is occurring?
   - What are the telltale signs in the agent's behavior or responses?

2. Error Context Analysis:
   - What contextual conditions typically surround this type of error?
   - What sequence of interactions tends to precede this error?

3. Detection Heuristics:
   - What specific questions can be asked to determine if this error is present?
   - What analytical framework can help identify this error pattern?
   - What key phrases or conversation patterns serve as reliable indicators?

Please format your response as a structured schema that focuses specifically on ERROR IDENTIFICATION, not on how to improve agent behavior.

Provide a concise, actionable schema in the following format:

Agent Name: {mistake_agent}

Step Number: {mistake_step}

Reason for Mistake: [Your analysis of why this specific error occurred and how to identify similar patterns]"#;

pub const SCHEMA_FORMAT_REMINDER: &str = "Your previous answer was missing required parts. Reply again with all of these headings, each followed by non-empty text: \"Error Signatures:\", \"Error Context Analysis:\", \"Detection Heuristics:\", then \"Agent Name:\", \"Step Number:\" and \"Reason for Mistake:\". Keep the three analysis sections under {max_chars} characters in total.";

/// Guidance attached to every reference schema in a detection prompt.
pub const REFERENCE_GUIDANCE: &str = "HOW TO USE THIS REFERENCE EXAMPLE:
This template demonstrates one type of error pattern for reference. To apply it to your analysis:
1. Study the ERROR PATTERN shown: What type of mistake does this example identify?
2. Use this as reference to analyze YOUR conversation:
   • Read through your conversation systematically (Step 0, Step 1, Step 2...)
   • At each step, ask: 'Is there an error here, and does it match this pattern or a different one?'
   • The error in your case may follow the same pattern or be completely different
3. Remember this is just a reference example:
   • Your error may occur at any step number
   • Your error may be a different type entirely
   • Use this template to help you recognize what errors look like, not to assume your error matches";

pub const DETECTION_PREAMBLE: &str = "You are analyzing the execution log of a multi-agent system that failed to solve a task. Identify the decisive error: the earliest step whose correction would have let the system succeed. Name the agent that made it and the step number where it happened. Steps are numbered from 0.";

pub const DETECTION_OUTPUT: &str = "Answer in exactly this format:

Agent Name: <name of the agent that made the decisive error>
Step Number: <step number, as shown in the log>
Reason for Mistake: <one or two sentences explaining the error>";

pub const DETECTION_FORMAT_REMINDER: &str = "Your previous answer could not be parsed. Reply with exactly three lines: \"Agent Name: ...\", \"Step Number: <integer>\", \"Reason for Mistake: ...\".";

/// Injection planner prompt. Slots: target_text, target_steps, last_step,
/// seed_text, seed_agent, seed_step, seed_reason.
pub const INJECTION_PLAN: &str = "You are designing a realistic failure for a multi-agent system benchmark.

Below is a SUCCESSFUL trajectory (the target) and a FAILED trajectory (the seed) whose decisive error has been annotated by an expert. Devise a strategy to inject an error of the same kind into the target.

Decide (i) at which step of the target the error should be introduced and (ii) how the seed's error pattern should be adapted to the target while keeping its core semantics.

TARGET (successful, {target_steps} steps, numbered 0 to {last_step}):
{target_text}

SEED (failed):
{seed_text}

Seed decisive error: agent {seed_agent} at step {seed_step}.
Seed error reason: {seed_reason}

Answer in exactly this format:

Injection Step: <integer between 0 and {last_step}>
Adaptation Notes: <how the error should be expressed at that step>";

pub const PLAN_RANGE_REMINDER: &str = "The injection step must be an integer between 0 and {last_step} inclusive. Reply again with \"Injection Step: <integer>\" and \"Adaptation Notes: ...\".";

/// Error injection prompt. Slots: question, prefix_text, step_index,
/// step_agent, step_content, notes, remaining.
pub const INJECTION_REWRITE: &str = "You produced the multi-agent trajectory below. Re-run it from step {step_index}, introducing a realistic error at that step, and continue the conversation naturally from the corrupted state.

Task: {question}

Steps before the injection point (keep them unchanged, do not repeat them):
{prefix_text}

Original step {step_index} by {step_agent}:
{step_content}

How to corrupt it: {notes}

Write step {step_index} again as {step_agent} with the error, then every following step ({remaining} steps in the original run; you may use a different number). Keep the same tone and style.

Reply with JSON only:
{\"error_description\": \"<what the injected error is>\", \"steps\": [{\"agent\": \"...\", \"content\": \"...\", \"result\": \"...\"}]}";

/// Replaces `{name}` slots in one pass. Unknown slots and escaped braces
/// (`\{`, `\}`) are emitted literally.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + slots.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '\\']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(escaped) = tail.strip_prefix("\\{").map(|r| ('{', r)).or_else(|| tail.strip_prefix("\\}").map(|r| ('}', r))) {
            out.push(escaped.0);
            rest = escaped.1;
            continue;
        }
        if let Some(after) = tail.strip_prefix('\\') {
            out.push('\\');
            rest = after;
            continue;
        }
        match tail[1..].find('}') {
            Some(end) => {
                let name = &tail[1..1 + end];
                match slots.iter().find(|(k, _)| *k == name) {
                    Some((_, value)) => out.push_str(value),
                    None => out.push_str(&tail[..end + 2]),
                }
                rest = &tail[end + 2..];
            }
            None => {
                out.push_str(tail);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
