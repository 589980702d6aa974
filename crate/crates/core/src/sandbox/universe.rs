use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ErrorMode, ResponseTemplate, Sandbox, SandboxError, ToolBehavior};
use crate::types::{Health, ParamSpec, ParamType, ParameterSchema, ToolCollection, ToolInterface, ToolRef};

struct CategorySpec {
    name: &'static str,
    nouns: &'static [&'static str],
    keywords: &'static [&'static str],
}

const CATALOG: &[CategorySpec] = &[
    CategorySpec {
        name: "music",
        nouns: &["track", "album", "artist", "playlist", "label"],
        keywords: &["midnight jazz", "summer anthems", "lofi beats"],
    },
    CategorySpec {
        name: "movies",
        nouns: &["film", "actor", "studio", "trailer", "critic"],
        keywords: &["space opera", "heist thriller", "silent comedy"],
    },
    CategorySpec {
        name: "travel",
        nouns: &["hotel", "city", "airline", "route", "venue"],
        keywords: &["lisbon waterfront", "alpine lodge", "desert camp"],
    },
    CategorySpec {
        name: "finance",
        nouns: &["stock", "company", "fund", "exchange", "analyst"],
        keywords: &["green energy", "chip makers", "regional banks"],
    },
    CategorySpec {
        name: "recipes",
        nouns: &["recipe", "ingredient", "chef", "cuisine", "menu"],
        keywords: &["vegan curry", "sourdough bread", "street tacos"],
    },
    CategorySpec {
        name: "sports",
        nouns: &["team", "player", "league", "stadium", "coach"],
        keywords: &["north derby", "winter cup", "rookie season"],
    },
    CategorySpec {
        name: "books",
        nouns: &["book", "author", "publisher", "saga", "edition"],
        keywords: &["gothic mystery", "space colony", "family memoir"],
    },
    CategorySpec {
        name: "weather",
        nouns: &["station", "region", "forecast", "alert", "sensor"],
        keywords: &["coastal storm", "mountain frost", "heat wave"],
    },
];

const BRANDS: &[&str] = &["hub", "base", "wire", "scope", "deck", "nest", "point", "grid", "forge", "lane"];
const SUFFIXES: &[&str] = &["profile", "summary", "history", "stats"];

pub fn plural(noun: &str) -> String {
    if noun.ends_with('y') && !noun.ends_with("ay") && !noun.ends_with("ey") {
        format!("{}ies", &noun[..noun.len() - 1])
    } else if noun.ends_with('s') || noun.ends_with("ch") || noun.ends_with("sh") || noun.ends_with('x') {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseConfig {
    pub n_providers: usize,
    pub apis_per_provider: usize,
    pub categories: usize,
    pub seed: u64,
    /// Fraction of providers with one permanently failing API.
    #[serde(default)]
    pub broken_fraction: f64,
    /// Fraction of providers that only get two APIs.
    #[serde(default)]
    pub short_fraction: f64,
}

impl UniverseConfig {
    pub fn new(n_providers: usize, apis_per_provider: usize, categories: usize, seed: u64) -> Self {
        Self {
            n_providers,
            apis_per_provider,
            categories,
            seed,
            broken_fraction: 0.0,
            short_fraction: 0.0,
        }
    }

    pub fn with_broken(mut self, fraction: f64) -> Self {
        self.broken_fraction = fraction;
        self
    }

    pub fn with_short(mut self, fraction: f64) -> Self {
        self.short_fraction = fraction;
        self
    }
}

/// `from`'s response carries `field`, which `to` requires.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub from: String,
    pub to: String,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub config: UniverseConfig,
    pub collection: ToolCollection,
    pub behaviors: Vec<ToolBehavior>,
    pub dependencies: BTreeMap<String, Vec<DependencyEdge>>,
}

impl Universe {
    pub fn sandbox(&self) -> Result<Sandbox, SandboxError> {
        Sandbox::new(self.collection.clone(), self.behaviors.clone())
    }

    pub fn behavior(&self, tool: &ToolRef) -> Option<&ToolBehavior> {
        self.behaviors.iter().find(|b| &b.tool == tool)
    }

    /// Health an accurate annotator should assign.
    pub fn expected_health(&self, tool: &ToolRef) -> Health {
        match self.behavior(tool) {
            Some(b) if b.error_mode.is_broken() => Health::Bad,
            Some(_) => Health::Good,
            None => Health::Unknown,
        }
    }

    pub fn broken_providers(&self) -> Vec<String> {
        self.collection
            .providers()
            .into_iter()
            .filter(|p| {
                self.behaviors
                    .iter()
                    .any(|b| &b.tool.provider_id == p && b.error_mode.is_broken())
            })
            .collect()
    }
}

fn exact_count(fraction: f64, n: usize) -> usize {
    ((fraction.clamp(0.0, 1.0) * n as f64) + 0.5 + 1e-9).floor() as usize
}

fn api(
    provider: &str,
    category: &str,
    name: String,
    description: String,
    params: Vec<ParamSpec>,
    template: ResponseTemplate,
) -> (ToolInterface, ToolBehavior) {
    let tool = ToolInterface {
        provider_id: provider.to_string(),
        api_name: name.clone(),
        description,
        schema: ParameterSchema::new(params.clone()),
        category: category.to_string(),
        health: Health::Unannotated,
        examples: Vec::new(),
        extras: Default::default(),
    };
    let behavior = ToolBehavior {
        tool: ToolRef::new(provider, name),
        true_required: params.iter().filter(|p| p.required).map(|p| p.name.clone()).collect(),
        true_types: params.iter().map(|p| (p.name.clone(), p.param_type)).collect(),
        formats: BTreeMap::new(),
        response_template: template,
        error_mode: ErrorMode::None,
        latency_ms: None,
    };
    (tool, behavior)
}

/// Deterministic provider universe. Each provider exposes a chain in which
/// API `k`'s response carries the id that API `k + 1` requires.
pub fn build_synthetic_universe(config: &UniverseConfig) -> Universe {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_cat = config.categories.clamp(1, CATALOG.len());
    let mut order: Vec<usize> = (0..config.n_providers).collect();
    order.shuffle(&mut rng);
    let n_broken = exact_count(config.broken_fraction, config.n_providers);
    let n_short = exact_count(config.short_fraction, config.n_providers);
    let broken: Vec<usize> = order[..n_broken.min(order.len())].to_vec();
    let short: Vec<usize> = order.iter().rev().take(n_short).copied().collect();

    let mut tools = Vec::new();
    let mut behaviors = Vec::new();
    let mut dependencies = BTreeMap::new();
    for i in 0..config.n_providers {
        let cat = &CATALOG[i % n_cat];
        let round = i / n_cat;
        let brand = BRANDS[rng.gen_range(0..BRANDS.len())];
        let provider = format!("{}_{brand}_{i}", cat.name);
        let keyword = cat.keywords[rng.gen_range(0..cat.keywords.len())];
        let n_apis = if short.contains(&i) { 2 } else { config.apis_per_provider.max(1) };
        let nouns: Vec<String> = (0..n_apis)
            .map(|k| {
                let base = cat.nouns[(round + k) % cat.nouns.len()];
                if k < cat.nouns.len() {
                    base.to_string()
                } else {
                    format!("{base}{}", k / cat.nouns.len() + 1)
                }
            })
            .collect();
        let id = |k: usize| format!("{}_id", nouns[k]);
        let mut edges = Vec::new();
        let mut names = Vec::new();
        for k in 0..n_apis {
            let (name, description, params, template) = match k {
                0 => (
                    format!("search_{}", plural(&nouns[0])),
                    format!("Find {} matching a keyword.", plural(&nouns[0])),
                    vec![
                        ParamSpec::required("query", ParamType::String, format!("Search keyword, e.g. '{keyword}'")),
                        ParamSpec::optional("limit", ParamType::Int, "Maximum number of results"),
                    ],
                    ResponseTemplate {
                        list_key: Some("results".into()),
                        list_len: 3,
                        id_fields: vec![id(0)],
                        text_fields: vec!["title".into()],
                        ..Default::default()
                    },
                ),
                1 => (
                    format!("get_{}_details", nouns[0]),
                    format!("Pull up the full record for one {}.", nouns[0]),
                    vec![ParamSpec::required(id(0), ParamType::Int, format!("Identifier of the {}", nouns[0]))],
                    ResponseTemplate {
                        id_fields: if n_apis > 2 { vec![id(1)] } else { vec![] },
                        text_fields: vec!["title".into(), "summary".into()],
                        number_fields: vec!["rating".into()],
                        echo_args: true,
                        ..Default::default()
                    },
                ),
                _ => {
                    let suffix = SUFFIXES[(k - 2) % SUFFIXES.len()];
                    let subject = &nouns[k - 1];
                    (
                        format!("get_{subject}_{suffix}"),
                        format!("Show the {suffix} of one {subject}."),
                        vec![ParamSpec::required(id(k - 1), ParamType::Int, format!("Identifier of the {subject}"))],
                        ResponseTemplate {
                            id_fields: if k + 1 < n_apis { vec![id(k)] } else { vec![] },
                            text_fields: vec!["name".into()],
                            number_fields: vec!["score".into()],
                            echo_args: true,
                            ..Default::default()
                        },
                    )
                }
            };
            names.push(name.clone());
            let (t, b) = api(&provider, cat.name, name, description, params, template);
            tools.push(t);
            behaviors.push(b);
        }
        for k in 1..n_apis {
            edges.push(DependencyEdge {
                from: names[k - 1].clone(),
                to: names[k].clone(),
                field: id(k - 1),
            });
        }
        if broken.contains(&i) {
            let modes = [ErrorMode::Always401, ErrorMode::Always404, ErrorMode::Always500];
            let mode = modes[rng.gen_range(0..modes.len())];
            let victim = rng.gen_range(0..n_apis);
            let start = behaviors.len() - n_apis;
            behaviors[start + victim].error_mode = mode;
        }
        dependencies.insert(provider, edges);
    }
    let collection = ToolCollection::new(tools).expect("generated names are unique");
    Universe {
        config: config.clone(),
        collection,
        behaviors,
        dependencies,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::ToolEnvironment;
    use serde_json::json;

    #[test]
    fn deterministic() {
        let c = UniverseConfig::new(4, 3, 2, 7);
        assert_eq!(build_synthetic_universe(&c), build_synthetic_universe(&c));
        let other = build_synthetic_universe(&UniverseConfig::new(4, 3, 2, 8));
        assert_ne!(build_synthetic_universe(&c).collection, other.collection);
    }

    #[test]
    fn chain_property() {
        let u = build_synthetic_universe(&UniverseConfig::new(4, 3, 2, 7));
        let sb = u.sandbox().unwrap();
        for p in u.collection.providers() {
            let tools = u.collection.provider_tools(&p);
            assert_eq!(tools.len(), 3);
            for e in &u.dependencies[&p] {
                let from = ToolRef::new(&p, &e.from);
                let to = u.behavior(&ToolRef::new(&p, &e.to)).unwrap();
                assert!(to.true_required.contains(&e.field));
                let args = if e.from.starts_with("search_") {
                    json!({"query": "x"})
                } else {
                    let b = u.behavior(&from).unwrap();
                    json!({ b.true_required[0].clone(): 5 })
                };
                let r = sb.invoke(&from, args.as_object().unwrap(), 0).unwrap();
                assert!(r.is_ok());
                assert!(r.observation().contains(&format!("\"{}\"", e.field)));
            }
        }
    }

    #[test]
    fn broken_count_is_exact() {
        let u = build_synthetic_universe(&UniverseConfig::new(4, 3, 2, 7).with_broken(0.25));
        assert_eq!(u.broken_providers().len(), 1);
        let u = build_synthetic_universe(&UniverseConfig::new(20, 3, 4, 1).with_broken(0.3));
        assert_eq!(u.broken_providers().len(), 6);
    }

    #[test]
    fn short_providers() {
        let u = build_synthetic_universe(&UniverseConfig::new(10, 3, 3, 2).with_short(0.2));
        let short = u
            .collection
            .providers()
            .iter()
            .filter(|p| u.collection.provider_tools(p).len() == 2)
            .count();
        assert_eq!(short, 2);
    }

    #[test]
    fn plurals() {
        assert_eq!(plural("city"), "cities");
        assert_eq!(plural("match"), "matches");
        assert_eq!(plural("track"), "tracks");
    }
}
