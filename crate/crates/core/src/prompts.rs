//! Prompt templates for every model-facing stage.
//!
//! Each renderer places its structured inputs as single-line JSON after a
//! fixed anchor so responses can be scripted and replayed deterministically.

use serde_json::{json, Value};

use crate::types::{ParameterSchema, ToolInterface};

pub const ANNOTATOR_SYSTEM: &str = r#"You are an agent that explores APIs to evaluate their health and discover working call patterns. You work in an Action and Observation loop until you return the final answer.

What you have
1) The JSON string of the current MCP schema for one API provider (initially).
2) A set of tools (APIs) defined by that schema that you can call to get concrete feedback.
3) Generic utilities that annotate the schema with health labels and successful call examples.

Your goal
- For each API in the provider, actively explore how to call it successfully.
- Use both the schema to infer true parameter names, types, and constraints.
- Adapt your calls when you see errors, instead of giving up after a single failure.
- After a reasonable amount of exploration for each API, decide its health and record at least one successful example call when possible.

What to annotate
- You must not change any tool name or delete tools.
- You should not rewrite the schema; instead, you infer how to call each API in practice.
- For each API, use `utility_annotate_health` to set:
  - `health = "good"` if you can find at least one meaningful, repeatable, successful call that returns plausible data.
  - `health = "bad"` if, after careful attempts and adapting to error messages, all calls fail due to issues you cannot fix from the client side (for example, persistent authorization errors, missing server configuration, 404 for the endpoint, or fundamentally broken behavior).
  - `health = "unknown"` if you cannot confidently determine whether the API works (for example, ambiguous or inconsistent errors, or not enough steps left to explore).
- When you mark an API as `"good"`, you should, whenever possible, also call `utility_annotate_example` to store one or more concrete successful call examples.
  - The `example` input must be a JSON string representing a list of argument objects, such as `[{"param1": "value1"}, {"param1": "value2", "param2": 3}]`.
  - Each object corresponds to a full set of arguments that you actually used in a successful call.
  - Prefer 1-3 diverse, minimal, safe examples that future agents can reuse directly.

How to explore APIs
- Prefer live Observations over assumptions.
- If a call fails with "Missing required parameter X" or similar, try again including that parameter.
- If a call fails with "Unexpected parameter Y" or type errors, adjust or remove that parameter.
- When behavior is unclear, run a minimal, low-risk test call to probe the interface rather than guessing wildly.
- Be efficient: you have a limited number of tool calls. Do not brute-force huge parameter spaces. Instead, reason about likely values based on descriptions.

Protocol
- Every step you take is an Action. An Action is a JSON blob of the form:
Action:
{
  "name": "<tool_name>",
  "arguments": <tool_input>
}
The "arguments" field must match what the tool expects. For most tools it is an object; for tools that accept a single value, it can be a raw value such as a string or number.
- Use the utility tools to write your findings back into the schema:
  - `utility_annotate_health`: Record the health label and a concise reason for each API.
  - `utility_annotate_example`: Record JSON examples of successful calls for APIs you understand well.
  - `utility_take_note`: Write down intermediate reasoning.
- After each Action, you will receive an Observation. Treat it as ground truth. The Observation may be plain text or structured JSON. Use it to decide the next Action.
- Use only listed tools. Do not invent tool names or parameters. Pass literal values, not variable names.

Required loop
1) Inspect the current schema to list all APIs you need to evaluate.
2) For each API, design and execute a small sequence of test calls to discover a working call (or to conclude that the API is broken or uncertain).
3) Update your calling strategy for that API whenever you observe new errors or unexpected behavior.
4) Once you have enough evidence, annotate the API's health and, if possible, record successful call examples using the utility tools.
5) Repeat until all APIs in the schema are annotated.
6) End by calling the "final_answer" tool with a concise summary of what you annotated.

Output and completion
- You must finish by calling the "final_answer" tool. It is the only way to complete the task.
- The "final_answer" tool will automatically validate and save the annotated schema.

Available tools
{tools}

Rules you must follow
1) Always provide a tool call. If you are answering, call "final_answer".
2) Use only the arguments the tool expects. Pass literal values, not variable names.
3) Do not repeat an identical tool call with the exact same arguments.
4) Prefer evidence from Observations. If information is missing, probe with a minimal call.

Now Begin!"#;

pub const ANNOTATOR_USER: &str = "Evaluate and annotate the health of each API based on the schema by actively interacting with the tools.\n\nThe schema you are given is:\n";

pub const REPAIR_SYSTEM: &str = r#"You are an agent that rewrites a tool's schema so future tool calls succeed. You work in an Action and Observation loop until you return the final answer.

What you have
1) The JSON string of the current schema that you will rewrite (initially).
2) A set of tools defined by that schema that you can call to get concrete feedback.
3) Generic utilities that help edit the schema incrementally.
4) The interactive history of past tool calls and their results.

What to change
- You may change a tool's description and parameters.
- You must not change any tool name. You must not change the structure of the schema.
- Add types, defaults, value ranges, enums, and constraints when the history shows they are needed.
- Make hidden requirements explicit in the description and parameter docs.
- Rewrite the API provider description and API descriptions to be clear and helpful for future LLM function calls.

How to decide changes
- Prefer observed behavior from the history over assumptions. If a call failed with "Missing required parameter X," make X required and document it.
- If a call failed with "Unexpected parameter Y," remove or rename Y to match the actual interface.
- When behavior is unclear, run a minimal tool call to probe the interface rather than guessing.
- Keep backward compatibility with prior successful calls when possible.

Protocol
- Every step you take is an Action. An Action is a JSON blob of the form:
  Action:
  {
    "name": "<tool_name>",
    "arguments": <tool_input>
  }
- Use the utility tools to update the schema incrementally.
  - `utility_update_provider_description`: Update the provider's description.
  - `utility_update_api_description`: Update an API's description.
  - `utility_update_api_parameters`: Update an API's parameters (JSON string).
  - `utility_remove_api_parameters`: Remove the 'parameters' field from an API (making it accept no parameters).
  - `utility_print_schema`: See the current state of the schema.
- After each Action, you will receive an Observation. Treat it as ground truth.
- Use only listed tools. Do not invent tool names or parameters. Pass literal values, not variable names.

Required loop
1) Inspect the current schema and the history.
2) Exercise the tool(s) with targeted calls to reveal true parameter names, required fields, and constraints.
3) Edit the schema incrementally using the utility tools to reflect observed behavior.
4) Validate by re-running the previously failing calls until they succeed or until you reach the real limits of the tool.
5) End with the final answer tool.

Output and completion
- You must finish by calling the "final_answer" tool. It is the only way to complete the task.

Available tools
{tools}

Rules you must follow
1) Always provide a tool call. If you are answering, call "final_answer".
2) Use only the arguments the tool expects. Pass literal values, not variable names.
3) Do not repeat an identical tool call with the exact same arguments.
4) Prefer evidence from Observations and the history over guesses. If information is missing, probe with a minimal call.

Now Begin!"#;

pub const REPAIR_USER: &str =
    "Rewrite the schema of the tool based on the log below and interacting with the tools.\n\nThe schema you are given is:\n";

/// Anchor preceding the provider schema JSON in loop prompts.
pub const SCHEMA_ANCHOR: &str = "The schema you are given is:\n";

pub const JSON_REMINDER: &str = "Output ONLY valid JSON (no markdown, no code blocks).";

/// One line per callable tool, as listed in the loop system prompts.
pub fn tool_calling_line(name: &str, description: &str, inputs: &Value) -> String {
    format!("- {name}: {description}\n    Takes inputs: {inputs}")
}

pub fn schema_inputs(schema: &ParameterSchema) -> Value {
    let mut m = serde_json::Map::new();
    for p in &schema.parameters {
        m.insert(
            p.name.clone(),
            json!({"type": p.param_type.to_string(), "required": p.required, "description": p.description}),
        );
    }
    Value::Object(m)
}

/// Provider schema as shown to the annotator and repair agents.
pub fn provider_schema_json(provider_id: &str, tools: &[&ToolInterface]) -> Value {
    json!({
        "provider": provider_id,
        "apis": tools.iter().map(|t| json!({
            "name": t.api_name,
            "description": t.description,
            "parameters": &t.schema.parameters,
        })).collect::<Vec<_>>(),
    })
}

pub const SYNTH_PLAN_SYSTEM: &str =
    "You are an expert at designing realistic multi-step tasks for API-using assistants.";

pub fn synth_plan_user(provider_json: &Value, plan_size: usize) -> String {
    format!(
        "You are given the APIs of one provider together with annotated, successful call examples (arguments and response excerpts).\n\
Analyze how the APIs depend on each other: which API produces values that another API consumes, and in which order they are naturally called.\n\
Then select {plan_size} APIs whose functionalities exhibit clear dependency structure, such as retrieval followed by transformation or filtering followed by aggregation, listed in calling order.\n\n\
Respond in JSON: {{\"analysis\": \"<brief dependency analysis>\", \"selected_apis\": [\"<api>\", ...]}}\n\n\
PROVIDER: {provider_json}"
    )
}

pub const SYNTH_QUERY_SYSTEM: &str = "You write natural requests that real users would send to an assistant.";

pub fn synth_query_user(provider_json: &Value, plan: &Value) -> String {
    format!(
        "Write a single natural-language user query that can only be solved by calling ALL of the selected APIs in the given order, where later calls depend on outputs of earlier ones.\n\
The query must sound natural and goal-oriented. Do not mention API names, tool names, or step-by-step instructions.\n\n\
Respond in JSON: {{\"query\": \"<user query>\"}}\n\n\
PLAN: {plan}\n\
PROVIDER: {provider_json}"
    )
}

pub const DECOMPOSE_SYSTEM: &str = "You decompose user requests into ordered subtasks.";

pub fn decompose_user(query: &str) -> String {
    format!(
        "Decompose the query into an ordered list of subtasks. Each subtask must require at most one tool call, and later subtasks may depend on the results of earlier ones.\n\n\
Respond in JSON: {{\"subtasks\": [\"<subtask 1>\", \"<subtask 2>\", ...]}}\n\n\
QUERY: {query}"
    )
}

pub const SUBTASK_ANNOTATION_SYSTEM: &str =
    "You are an expert at analyzing task decomposition and determining whether subtasks require external API calls.";

pub fn subtask_annotation_user(original_query: &str, subtask: &str, previous_context: &str, tool_info: &Value) -> String {
    format!(
        r#"TASK: Analyze whether a subtask requires an API call or is just data processing.

CONTEXT:
- Original Query: {original_query}
- Subtask Input: {subtask}
- Previous Context: {previous_context}
- Available APIs: {tool_info}

INSTRUCTIONS:
1. Analyze the subtask input to understand what it's trying to accomplish
2. Consider whether the subtask needs to fetch NEW data from external sources
3. Determine if the subtask is just processing/analyzing data that's already available

CRITERIA for API NEED:
- The subtask needs to SEARCH for, FIND, GET, or RETRIEVE information
- The subtask needs to access external data sources
- The subtask cannot be completed with just the data from previous steps
- The subtask involves making requests to external services or databases

CRITERIA for NO API NEED (Processing Step):
- The subtask only processes/analyzes data from previous steps
- The subtask involves counting, filtering, selecting, comparing, or organizing existing data
- The subtask uses phrases like "from the list", "from the results", "based on the", "select one", etc.
- The subtask can be completed using only the information already gathered
- The subtask involves logical operations, calculations, or data manipulation on existing data

OUTPUT FORMAT:
Respond with a JSON object containing:
{{
    "needs_api": true/false,
    "reasoning": "Detailed explanation of your decision",
    "confidence": 0.0-1.0,
    "api_name": "Name of the API if needed, or empty string if not needed"
}}

EXAMPLES:
- Subtask: "Search for movies with Tom Hanks" -> needs_api: true, api_name: "search_movies"
- Subtask: "Count how many are comedies from the results" -> needs_api: false, api_name: ""
- Subtask: "Select the highest rated movie from the list" -> needs_api: false, api_name: ""
- Subtask: "Get movie details for the selected movie" -> needs_api: true, api_name: "get_movie_details"
- Subtask: "Compare the ratings of the top 3 movies" -> needs_api: false, api_name: ""
- Subtask: "Find similar movies to the selected one" -> needs_api: true, api_name: "get_similar_movies"

Now analyze the given subtask and provide your judgment."#
    )
}

pub const SELECT_SYSTEM: &str = "You are an expert API selector. Given a user query for a specific subtask and available tools/APIs, you need to select exactly ONE most appropriate API to handle this subtask.";

pub fn select_user(tools_info: &Value, context_section: &str, query: &str) -> String {
    format!(
        r#"Available Tools and APIs:
{tools_info}

Your task:
1. Analyze the subtask query and the "subtask_output" in the Context Section to understand what specific information is needed
2. Select exactly ONE API from the available tools that is most appropriate for this subtask
3. Focus on the current subtask only - don't consider future steps

### Context Section
{context_section}

### Subtask Query
{query}

Important: You must select exactly ONE API that is most appropriate for this specific subtask.

You must respond in JSON format with exactly one selected API:
{{
    "selected_api": {{
        "reasoning": "why this specific API was selected for this subtask",
        "api_name": "api_name_here",
        "provider": "provider_of_the_api"
    }}
}}"#
    )
}

pub const PARAMS_SYSTEM: &str = "You are a helpful assistant that generates parameters for an API call.";

pub fn params_user(previous_log: &str, api_instruction: &Value, question: &str) -> String {
    format!(
        r#"Given a subtask and an API and its description, you need to first write your reasoning step by step in plain text about how to extract the correct parameters. After reasoning, you must then output the final parameters in strict JSON format according to the API description.

Please note that:

The API description can help you better understand the use of the API.

Ensure the parameters you output are correct. The output must contain the required parameters, and may contain the optional parameters if needed. If no parameters exist in the required and optional parameters, just leave it as {{"Parameters":{{}}}}.

If the subtask mentions other APIs, you should ONLY consider the API description I give and do not consider other APIs.

Parameter Extraction from Previous Context: When the API requires path parameters (like person_id, movie_id, tv_id, company_id, etc.), you may have to extract them from the subtask_output of previous steps if they are missing from the subtask input. Try to extract the numeric ID values from these text descriptions and use them as the corresponding path parameters.

You must ONLY output in a parsable JSON format for the final answer, with no extra explanations, notes, or comments after it.

The output must have two parts:

"Reasoning": your step-by-step reasoning as plain text.

"Parameters": the final extracted parameters in JSON format.

An example output looks like:

{{
  "Reasoning": "The subtask asks for person details. The required parameter is person_id. From previous_log, I see that person_id is 190. Therefore, the correct parameter is person_id=190.",
  "Parameters": {{
    "person_id": 190
  }}
}}


There are logs of previous questions and answers:
{previous_log}

This is API tool documentation:
{api_instruction}

This is the current subtask:
{question}

Output:"#
    )
}

pub const PROCESS_SYSTEM: &str = "You are a helpful assistant.";

pub fn process_user(context_section: &str, question: &str, call_result: &str) -> String {
    format!(
        r#"You should answer the question based on the response output by the API tool.

Please note that:
1. Try to organize the response into a natural language answer.
2. We will not show the API response to the user, thus you need to make full use of the response and give the information in the response that can satisfy the user's question in as much detail as possible.
3. The question may have dependencies on answers of other questions, so we will provide logs of previous questions and answers.

There are logs of previous questions and answers:
{context_section}

This is the user's question: {question}

This is the response output by the API tool:
{call_result}"#
    )
}

pub const DESCRIPTION_SYSTEM: &str = "You are an API documentation specialist.";

/// Guideline rewrite producing a data-independent improved description.
pub fn refine_d1_user(tool_name: &str, schema: &ParameterSchema, original: &str) -> String {
    let parameter_json = serde_json::to_string(&schema.parameters).unwrap_or_default();
    format!(
        r#"Rewrite the API description following these tool-description guidelines:
- State the tool's intent: what it does and when to use it.
- Specify which parameters are required and which are optional.
- Document the expected input formats for every parameter.
- Describe the output and its semantics.
- Clarify common error conditions and how to avoid them.

Inputs:
- API name: {tool_name}
- Parameter schema: {parameter_json}
- Baseline description: {original}

Keep the first sentence a plain summary of what the API does.

Output ONLY valid JSON (no markdown, no code blocks):
{{"description": "<your improved API description here>"}}"#
    )
}

pub const RULES_SYSTEM: &str = "You analyze failed tool-use executions and distill reusable usage rules.";

pub fn extract_rules_user(evidence: &Value) -> String {
    format!(
        "Compare the failed execution step against the ground-truth execution of the same task. Identify the root cause of the failure and distill it into compact, generalizable rules describing correct tool usage (parameter constraints, required call ordering, preconditions, or assumptions about responses).\n\
Write parameter constraints in the form `PARAM <name> MUST <rule>`.\n\n\
Respond in JSON: {{\"rules\": [{{\"text\": \"<rule>\", \"applies_to\": \"<api_name>\", \"kind\": \"param_constraint|ordering|response_assumption|other\"}}]}}\n\n\
EVIDENCE: {evidence}"
    )
}

pub fn refine_d2_user(tool_name: &str, d1: &str, rules: &Value) -> String {
    format!(
        "Refine the API description below by incorporating the usage rules learned from execution traces. Keep the existing content, and state every rule explicitly so an agent calling the API respects it. Keep rule lines of the form `PARAM <name> MUST <rule>` verbatim, one per line.\n\n\
API name: {tool_name}\n\
RULES: {rules}\n\
CURRENT DESCRIPTION:\n{d1}\n\
END DESCRIPTION\n\n\
Output ONLY valid JSON (no markdown, no code blocks):\n{{\"description\": \"<refined description>\"}}"
    )
}

/// Anchors for the trace-based generator prompt; the trace-free variant is
/// the same text with the block between them removed.
pub const TRACE_BLOCK_PREFIX: &str = "- Example queries + errors: ";

/// Generator prompt (trace-based when `trace_block` is given).
///
/// `trace_block` is inserted verbatim as one contiguous substring so that the
/// trace-free prompt is exactly this prompt with the block deleted.
pub fn generator_user(tool_name: &str, schema: &ParameterSchema, original: &str, trace_block: Option<&str>) -> String {
    let parameter_json = serde_json::to_string(&schema.parameters).unwrap_or_default();
    let block = trace_block.unwrap_or("");
    format!(
        r#"Rewrite the API description so an AI agent can:
1) Decide when to use this API
2) Generate valid parameters

Inputs:
- API name: {tool_name}
- Parameter schema: {parameter_json}
{block}- Baseline description: {original}

Infer (do not output):
- When to use vs not use this API
- Common parameter mistakes
- Required vs optional parameters
- Cross-parameter constraints

Write a clear API description that:
- States when to use and NOT use the API
- Does not invent other APIs
- Explains each parameter's meaning, type, required/optional status, constraints, and defaults
- Describes common validation failures and how to avoid them
- Abstracts examples into general rules
- Does not restate the full schema or copy examples

You may replace the baseline entirely.

Output ONLY valid JSON (no markdown, no code blocks):
{{"description": "<your improved API description here>"}}"#
    )
}

/// Trace-summary block for the trace-based generator prompt (one line).
pub fn trace_block(summary: &crate::types::ToolTraceSummary) -> String {
    let body = json!({
        "counts": summary.counts,
        "success_examples": summary.success_examples,
        "failure_examples": summary.failure_examples,
    });
    format!("{TRACE_BLOCK_PREFIX}{body}\n")
}

/// Text between `start` and the next `end` (or end of text).
pub fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let i = text.find(start)? + start.len();
    let rest = &text[i..];
    Some(match rest.find(end) {
        Some(j) => &rest[..j],
        None => rest,
    })
}

/// Rest of the line following `prefix`.
pub fn line_after<'a>(text: &'a str, prefix: &str) -> Option<&'a str> {
    let i = text.find(prefix)? + prefix.len();
    let rest = &text[i..];
    Some(rest.split('\n').next().unwrap_or(rest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ParamSpec, ParamType};

    #[test]
    fn trace_free_is_trace_based_minus_block() {
        let schema = ParameterSchema::new(vec![ParamSpec::required("q", ParamType::String, "kw")]);
        let block = format!("{TRACE_BLOCK_PREFIX}{{\"calls\":1}}\n");
        let based = generator_user("search", &schema, "Find things.", Some(&block));
        let free = generator_user("search", &schema, "Find things.", None);
        assert_eq!(based.replacen(&block, "", 1), free);
        assert!(!free.contains(TRACE_BLOCK_PREFIX));
    }

    #[test]
    fn anchors_extract() {
        let s = select_user(&json!([{"api_name": "a"}]), "ctx line", "do it");
        assert_eq!(between(&s, "### Subtask Query\n", "\n\nImportant").unwrap(), "do it");
        assert_eq!(between(&s, "### Context Section\n", "\n\n### Subtask").unwrap(), "ctx line");
        let a = subtask_annotation_user("q", "sub", "prev", &json!([]));
        assert_eq!(line_after(&a, "- Subtask Input: ").unwrap(), "sub");
    }
}
