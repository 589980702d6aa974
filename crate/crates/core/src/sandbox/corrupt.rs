use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ParamSpec, ParamType, ToolCollection, ToolRef};

/// One defect applied to a declared schema. True behavior is never touched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SchemaEdit {
    DropRequired { name: String },
    AddPhantom { name: String, param_type: ParamType },
    FlipType { name: String },
}

impl SchemaEdit {
    pub fn field(&self) -> &str {
        match self {
            SchemaEdit::DropRequired { name } | SchemaEdit::AddPhantom { name, .. } | SchemaEdit::FlipType { name } => {
                name
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SchemaEdit::DropRequired { .. } => "drop_required",
            SchemaEdit::AddPhantom { .. } => "add_phantom",
            SchemaEdit::FlipType { .. } => "flip_type",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionEntry {
    pub tool: ToolRef,
    pub edit: SchemaEdit,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub edits: Vec<CorruptionEntry>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("unknown tool {0}")]
    UnknownTool(ToolRef),
    #[error("{tool}: parameter `{name}` does not exist")]
    MissingParam { tool: ToolRef, name: String },
    #[error("{tool}: parameter `{name}` is not required")]
    NotRequired { tool: ToolRef, name: String },
    #[error("{tool}: phantom parameter `{name}` already exists")]
    PhantomExists { tool: ToolRef, name: String },
}

/// Ground truth for one applied edit: the declared parameter before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionDiff {
    pub tool: ToolRef,
    pub edit: SchemaEdit,
    pub before: Option<ParamSpec>,
    pub after: Option<ParamSpec>,
}

pub fn flipped(t: ParamType) -> ParamType {
    match t {
        ParamType::String => ParamType::Int,
        _ => ParamType::String,
    }
}

impl CorruptionSpec {
    pub fn push(&mut self, tool: ToolRef, edit: SchemaEdit) {
        self.edits.push(CorruptionEntry { tool, edit });
    }

    /// One edit of `kind` per listed provider, on a seeded choice of API and
    /// parameter. Providers without a suitable parameter are skipped.
    pub fn sample(collection: &ToolCollection, providers: &[String], kind: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::default();
        for p in providers {
            let mut tools = collection.provider_tools(p);
            tools.shuffle(&mut rng);
            for t in tools {
                let edit = match kind {
                    "drop_required" => {
                        let req: Vec<_> = t.schema.parameters.iter().filter(|s| s.required).collect();
                        req.choose(&mut rng).map(|s| SchemaEdit::DropRequired { name: s.name.clone() })
                    }
                    "flip_type" => t
                        .schema
                        .parameters
                        .choose(&mut rng)
                        .map(|s| SchemaEdit::FlipType { name: s.name.clone() }),
                    _ => (t.schema.get("verbose").is_none()).then(|| SchemaEdit::AddPhantom {
                        name: "verbose".into(),
                        param_type: ParamType::Bool,
                    }),
                };
                if let Some(edit) = edit {
                    spec.push(t.tool_ref(), edit);
                    break;
                }
            }
        }
        spec
    }
}

/// Applies `spec` to declared schemas and returns the edited collection with
/// a diff ledger.
pub fn corrupt_declared_schema(
    collection: &ToolCollection,
    spec: &CorruptionSpec,
) -> Result<(ToolCollection, Vec<CorruptionDiff>), CorruptionError> {
    let mut out = collection.clone();
    let mut diffs = Vec::new();
    for CorruptionEntry { tool, edit } in &spec.edits {
        let t = out
            .get_mut(tool)
            .ok_or_else(|| CorruptionError::UnknownTool(tool.clone()))?;
        let params = &mut t.schema.parameters;
        let missing = || CorruptionError::MissingParam {
            tool: tool.clone(),
            name: edit.field().to_string(),
        };
        let (before, after) = match edit {
            SchemaEdit::DropRequired { name } => {
                let i = params.iter().position(|p| &p.name == name).ok_or_else(missing)?;
                if !params[i].required {
                    return Err(CorruptionError::NotRequired {
                        tool: tool.clone(),
                        name: name.clone(),
                    });
                }
                (Some(params.remove(i)), None)
            }
            SchemaEdit::AddPhantom { name, param_type } => {
                if params.iter().any(|p| &p.name == name) {
                    return Err(CorruptionError::PhantomExists {
                        tool: tool.clone(),
                        name: name.clone(),
                    });
                }
                let spec = ParamSpec::required(name.clone(), *param_type, "");
                params.push(spec.clone());
                (None, Some(spec))
            }
            SchemaEdit::FlipType { name } => {
                let p = params.iter_mut().find(|p| &p.name == name).ok_or_else(missing)?;
                let before = p.clone();
                p.param_type = flipped(p.param_type);
                (Some(before), Some(p.clone()))
            }
        };
        diffs.push(CorruptionDiff {
            tool: tool.clone(),
            edit: edit.clone(),
            before,
            after,
        });
    }
    Ok((out, diffs))
}
