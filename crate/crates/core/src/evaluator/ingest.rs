//! Loaders for benchmark-shaped files.
//!
//! `toolbench_json`: a list of tools (or `{"tools": [...]}`, or
//! `{"categories": [{"name", "tools"}]}`), each with `tool_name` and an
//! `api_list` whose entries carry `required_parameters` and
//! `optional_parameters`. An optional top-level `queries` list holds
//! `{query_id, query, relevant APIs: [[tool, api], ...]}`.
//!
//! `restbench_json`: `{"provider", "endpoints": [...], "queries": [{"query",
//! "solution": [endpoint names]}]}`.

use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::types::{
    CollectionError, Health, JsonObject, ParamSpec, ParamType, ParameterSchema, Query, Split, ToolCollection, ToolInterface,
    ToolRef,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchmarkFormat {
    ToolbenchJson,
    RestbenchJson,
}

impl FromStr for BenchmarkFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toolbench_json" | "toolbench" => Ok(Self::ToolbenchJson),
            "restbench_json" | "restbench" => Ok(Self::RestbenchJson),
            other => Err(format!("unknown benchmark format `{other}` (toolbench_json, restbench_json)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{file}: {pointer}: {message}")]
    Schema { file: String, pointer: String, message: String },
    #[error(transparent)]
    Collection(#[from] CollectionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub collection: ToolCollection,
    pub queries: Vec<Query>,
}

struct Ctx<'a> {
    file: &'a str,
}

impl Ctx<'_> {
    fn err(&self, pointer: &str, message: impl Into<String>) -> IngestError {
        IngestError::Schema {
            file: self.file.to_string(),
            pointer: pointer.to_string(),
            message: message.into(),
        }
    }

    fn obj<'v>(&self, v: &'v Value, at: &str) -> Result<&'v Map<String, Value>, IngestError> {
        v.as_object().ok_or_else(|| self.err(at, "expected an object"))
    }

    fn arr<'v>(&self, v: &'v Value, key: &str, at: &str) -> Result<&'v Vec<Value>, IngestError> {
        let at = format!("{at}.{key}");
        match v.get(key) {
            None => Err(self.err(&at, "missing required key")),
            Some(x) => x.as_array().ok_or_else(|| self.err(&at, "expected a list")),
        }
    }

    fn str<'v>(&self, v: &'v Value, key: &str, at: &str) -> Result<&'v str, IngestError> {
        let at = format!("{at}.{key}");
        match v.get(key) {
            None => Err(self.err(&at, "missing required key")),
            Some(x) => x.as_str().ok_or_else(|| self.err(&at, "expected a string")),
        }
    }
}

fn opt_str<'v>(v: &'v Value, key: &str) -> &'v str {
    v.get(key).and_then(Value::as_str).unwrap_or("")
}

fn extras(v: &Map<String, Value>, known: &[&str]) -> JsonObject {
    v.iter()
        .filter(|(k, _)| !known.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn param_type(raw: &str) -> ParamType {
    ParamType::parse_loose(raw).unwrap_or(ParamType::String)
}

fn params(ctx: &Ctx, list: &[Value], required: bool, at: &str) -> Result<Vec<ParamSpec>, IngestError> {
    list.iter()
        .enumerate()
        .map(|(i, p)| {
            let at = format!("{at}[{i}]");
            ctx.obj(p, &at)?;
            Ok(ParamSpec {
                name: ctx.str(p, "name", &at)?.to_string(),
                param_type: param_type(opt_str(p, "type")),
                required,
                description: opt_str(p, "description").to_string(),
                default: p.get("default").filter(|d| !d.is_null() && *d != "").cloned(),
                enum_values: p.get("enum").and_then(Value::as_array).cloned(),
            })
        })
        .collect()
}

fn tool_apis(ctx: &Ctx, tool: &Value, category: &str, at: &str) -> Result<Vec<ToolInterface>, IngestError> {
    ctx.obj(tool, at)?;
    let provider = ctx.str(tool, "tool_name", at)?;
    let category = tool.get("category_name").and_then(Value::as_str).unwrap_or(category);
    let mut out = Vec::new();
    for (i, api) in ctx.arr(tool, "api_list", at)?.iter().enumerate() {
        let at = format!("{at}.api_list[{i}]");
        let m = ctx.obj(api, &at)?;
        let name = ctx.str(api, "name", &at)?;
        let mut ps = params(ctx, ctx.arr(api, "required_parameters", &at)?, true, &format!("{at}.required_parameters"))?;
        ps.extend(params(ctx, ctx.arr(api, "optional_parameters", &at)?, false, &format!("{at}.optional_parameters"))?);
        let schema = ParameterSchema::new(ps);
        schema.validate().map_err(|e| ctx.err(&at, e.to_string()))?;
        let mut ex = extras(m, &["name", "description", "required_parameters", "optional_parameters"]);
        if let Some(d) = tool.get("tool_description") {
            ex.insert("tool_description".into(), d.clone());
        }
        out.push(ToolInterface {
            provider_id: provider.to_string(),
            api_name: name.to_string(),
            description: opt_str(api, "description").to_string(),
            schema,
            category: category.to_string(),
            health: Health::Unannotated,
            examples: Vec::new(),
            extras: ex,
        });
    }
    Ok(out)
}

fn toolbench(ctx: &Ctx, root: &Value) -> Result<Ingested, IngestError> {
    let mut tools = Vec::new();
    let groups: Vec<(String, &Value, String)> = match root {
        Value::Array(list) => list.iter().enumerate().map(|(i, t)| (String::new(), t, format!("$[{i}]"))).collect(),
        Value::Object(m) if m.contains_key("categories") => {
            let mut g = Vec::new();
            for (ci, c) in ctx.arr(root, "categories", "$")?.iter().enumerate() {
                let at = format!("$.categories[{ci}]");
                let name = ctx.str(c, "name", &at)?;
                for (ti, t) in ctx.arr(c, "tools", &at)?.iter().enumerate() {
                    g.push((name.to_string(), t, format!("{at}.tools[{ti}]")));
                }
            }
            g
        }
        Value::Object(_) => ctx
            .arr(root, "tools", "$")?
            .iter()
            .enumerate()
            .map(|(i, t)| (opt_str(root, "category").to_string(), t, format!("$.tools[{i}]")))
            .collect(),
        _ => return Err(ctx.err("$", "expected a list or an object")),
    };
    for (category, t, at) in groups {
        tools.extend(tool_apis(ctx, t, &category, &at)?);
    }
    let collection = ToolCollection::new(tools)?;
    let mut queries = Vec::new();
    if let Some(qs) = root.get("queries") {
        let qs = qs.as_array().ok_or_else(|| ctx.err("$.queries", "expected a list"))?;
        for (i, q) in qs.iter().enumerate() {
            let at = format!("$.queries[{i}]");
            let m = ctx.obj(q, &at)?;
            let text = ctx.str(q, "query", &at)?;
            let rel = ctx.arr(q, "relevant APIs", &at)?;
            let mut gt = Vec::new();
            for (j, pair) in rel.iter().enumerate() {
                let at = format!("{at}.relevant APIs[{j}]");
                let p = pair.as_array().filter(|p| p.len() == 2).ok_or_else(|| ctx.err(&at, "expected [tool_name, api_name]"))?;
                let r = ToolRef::new(p[0].as_str().unwrap_or(""), p[1].as_str().unwrap_or(""));
                if collection.get(&r).is_none() {
                    return Err(ctx.err(&at, format!("unknown api {r}")));
                }
                gt.push(r);
            }
            let id = match q.get("query_id") {
                Some(Value::String(s)) => s.clone(),
                Some(Value::Number(n)) => n.to_string(),
                _ => format!("q{i}"),
            };
            queries.push(query(id, text, gt, &collection, extras(m, &["query_id", "query", "relevant APIs"])));
        }
    }
    Ok(Ingested { collection, queries })
}

fn query(id: String, text: &str, gt: Vec<ToolRef>, collection: &ToolCollection, extras: JsonObject) -> Query {
    let providers: std::collections::BTreeSet<&str> = gt.iter().map(|t| t.provider_id.as_str()).collect();
    let candidate_tools: Vec<ToolRef> = collection
        .iter()
        .filter(|t| providers.contains(t.provider_id.as_str()))
        .map(|t| t.tool_ref())
        .collect();
    let category = gt
        .first()
        .and_then(|t| collection.category_of_provider(&t.provider_id))
        .unwrap_or("")
        .to_string();
    Query {
        query_id: id,
        text: text.to_string(),
        ground_truth_sequence: gt,
        candidate_tools,
        category,
        split: Split::Test,
        extras,
    }
}

fn restbench(ctx: &Ctx, root: &Value) -> Result<Ingested, IngestError> {
    ctx.obj(root, "$")?;
    let provider = ctx.str(root, "provider", "$")?;
    let category = root.get("category").and_then(Value::as_str).unwrap_or(provider);
    let mut tools = Vec::new();
    for (i, e) in ctx.arr(root, "endpoints", "$")?.iter().enumerate() {
        let at = format!("$.endpoints[{i}]");
        let m = ctx.obj(e, &at)?;
        let name = ctx.str(e, "name", &at)?;
        let mut ps = Vec::new();
        for (j, p) in ctx.arr(e, "parameters", &at)?.iter().enumerate() {
            let at = format!("{at}.parameters[{j}]");
            ctx.obj(p, &at)?;
            let ty = p.pointer("/schema/type").or_else(|| p.get("type")).and_then(Value::as_str).unwrap_or("string");
            ps.push(ParamSpec {
                name: ctx.str(p, "name", &at)?.to_string(),
                param_type: param_type(ty),
                required: p.get("required").and_then(Value::as_bool).unwrap_or(false),
                description: opt_str(p, "description").to_string(),
                default: None,
                enum_values: None,
            });
        }
        let schema = ParameterSchema::new(ps);
        schema.validate().map_err(|err| ctx.err(&at, err.to_string()))?;
        tools.push(ToolInterface {
            provider_id: provider.to_string(),
            api_name: name.to_string(),
            description: opt_str(e, "description").to_string(),
            schema,
            category: category.to_string(),
            health: Health::Unannotated,
            examples: Vec::new(),
            extras: extras(m, &["name", "description", "parameters"]),
        });
    }
    let collection = ToolCollection::new(tools)?;
    let mut queries = Vec::new();
    for (i, q) in ctx.arr(root, "queries", "$")?.iter().enumerate() {
        let at = format!("$.queries[{i}]");
        let m = ctx.obj(q, &at)?;
        let text = ctx.str(q, "query", &at)?;
        let mut gt = Vec::new();
        for (j, s) in ctx.arr(q, "solution", &at)?.iter().enumerate() {
            let at = format!("{at}.solution[{j}]");
            let name = s.as_str().ok_or_else(|| ctx.err(&at, "expected an endpoint name"))?;
            let r = ToolRef::new(provider, name);
            if collection.get(&r).is_none() {
                return Err(ctx.err(&at, format!("unknown endpoint `{name}`")));
            }
            gt.push(r);
        }
        let id = q.get("query_id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("{provider}-{i}"));
        queries.push(query(id, text, gt, &collection, extras(m, &["query_id", "query", "solution"])));
    }
    Ok(Ingested { collection, queries })
}

pub fn ingest_benchmark(format: BenchmarkFormat, path: &Path) -> Result<Ingested, IngestError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Read { path: file.clone(), source })?;
    let root: Value = serde_json::from_str(&text).map_err(|source| IngestError::Parse { path: file.clone(), source })?;
    let ctx = Ctx { file: &file };
    match format {
        BenchmarkFormat::ToolbenchJson => toolbench(&ctx, &root),
        BenchmarkFormat::RestbenchJson => restbench(&ctx, &root),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(v: &Value) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), v.to_string()).unwrap();
        f
    }

    fn toolbench_fixture() -> Value {
        json!({"categories": [{"name": "Movies", "tools": [{
            "tool_name": "moviedb",
            "tool_description": "Movie data",
            "api_list": [
                {"name": "search_movie", "description": "Search movies", "method": "GET",
                 "required_parameters": [{"name": "query", "type": "STRING", "description": "title"}],
                 "optional_parameters": [{"name": "page", "type": "NUMBER", "default": ""}]},
                {"name": "movie_details", "description": "Details",
                 "required_parameters": [{"name": "movie_id", "type": "NUMBER"}],
                 "optional_parameters": []}
            ]}]}],
            "queries": [{"query_id": 7, "query": "Find Alien and its details", "relevant APIs": [["moviedb", "search_movie"], ["moviedb", "movie_details"]]}]
        })
    }

    #[test]
    fn toolbench_minimal() {
        let f = write(&toolbench_fixture());
        let got = ingest_benchmark(BenchmarkFormat::ToolbenchJson, f.path()).unwrap();
        assert_eq!(got.collection.len(), 2);
        let t = &got.collection.tools()[0];
        assert_eq!(t.category, "Movies");
        assert_eq!(t.extras["method"], "GET");
        assert_eq!(t.schema.get("page").unwrap().param_type, ParamType::Float);
        assert!(t.schema.get("page").unwrap().default.is_none());
        assert_eq!(got.queries[0].query_id, "7");
        assert_eq!(got.queries[0].ground_truth_sequence.len(), 2);
        got.queries[0].validate().unwrap();
    }

    #[test]
    fn missing_key_names_its_path() {
        let mut v = toolbench_fixture();
        v["categories"][0]["tools"][0]["api_list"][1].as_object_mut().unwrap().remove("required_parameters");
        let f = write(&v);
        let e = ingest_benchmark(BenchmarkFormat::ToolbenchJson, f.path()).unwrap_err().to_string();
        assert!(e.contains("$.categories[0].tools[0].api_list[1].required_parameters"), "{e}");
        assert!(e.contains("missing required key"));
        let e = ingest_benchmark(BenchmarkFormat::ToolbenchJson, Path::new("/nonexistent/x.json")).unwrap_err();
        assert!(e.to_string().starts_with("/nonexistent/x.json"));
    }

    #[test]
    fn restbench_two_step() {
        let v = json!({
            "provider": "tmdb",
            "endpoints": [
                {"name": "GET /search/person", "description": "Search people", "parameters": [{"name": "query", "required": true, "schema": {"type": "string"}}]},
                {"name": "GET /person/{person_id}/movie_credits", "description": "Credits", "parameters": [{"name": "person_id", "in": "path", "required": true, "schema": {"type": "integer"}}]}
            ],
            "queries": [{"query": "What movies has Sofia Coppola directed?", "solution": ["GET /search/person", "GET /person/{person_id}/movie_credits"], "difficulty": 2}]
        });
        let f = write(&v);
        let got = ingest_benchmark(BenchmarkFormat::RestbenchJson, f.path()).unwrap();
        assert_eq!(got.queries[0].ground_truth_sequence.len(), 2);
        assert_eq!(got.queries[0].extras["difficulty"], 2);
        assert_eq!(got.collection.tools()[1].schema.parameters[0].param_type, ParamType::Int);
        let mut bad = v.clone();
        bad["queries"][0]["solution"][1] = json!("GET /nope");
        let e = ingest_benchmark(BenchmarkFormat::RestbenchJson, write(&bad).path()).unwrap_err().to_string();
        assert!(e.contains("$.queries[0].solution[1]"), "{e}");
    }
}
