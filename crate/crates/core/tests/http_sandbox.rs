use std::sync::Arc;

use serde_json::json;
use toolforge_core::sandbox::{build_synthetic_universe, HttpEnvironment, SandboxServer, ToolEnvironment, UniverseConfig};
use toolforge_core::types::{JsonObject, ToolRef};

fn arg_sets() -> Vec<JsonObject> {
    let mut sets = vec![JsonObject::new()];
    for v in [json!({"q": "x"}), json!({"id": 3, "date": "2024-01-02", "code": "ABC"})] {
        sets.push(v.as_object().unwrap().clone());
    }
    sets
}

// Same call sequence against two fresh sandboxes, one behind the REST server.
#[test]
fn server_matches_in_process_sandbox() {
    let u = build_synthetic_universe(&UniverseConfig::new(6, 3, 2, 21).with_broken(0.3));
    let local = u.sandbox().unwrap();
    let mut server = SandboxServer::start(Arc::new(u.sandbox().unwrap()), "127.0.0.1:0").unwrap();
    let remote = HttpEnvironment::new(server.base_url()).unwrap();
    let mut calls = 0;
    for t in u.collection.iter() {
        let tool = t.tool_ref();
        for args in arg_sets() {
            for seed in [0, 9] {
                let a = local.invoke(&tool, &args, seed).unwrap();
                let b = remote.invoke(&tool, &args, seed).unwrap();
                assert_eq!(a, b, "{tool} {args:?} seed {seed}");
                calls += 1;
            }
        }
    }
    assert_eq!(calls, u.collection.len() * 6);
    server.stop();
}

#[test]
fn schema_endpoint_and_unknown_tool() {
    let u = build_synthetic_universe(&UniverseConfig::new(3, 3, 1, 4));
    let sb = Arc::new(u.sandbox().unwrap());
    let server = SandboxServer::start(sb.clone(), "127.0.0.1:0").unwrap();
    let remote = HttpEnvironment::new(server.base_url()).unwrap();
    let p = &u.collection.providers()[0];
    assert_eq!(remote.schema(p).unwrap(), sb.provider_schema(p).unwrap());
    assert!(remote.schema("no_such_provider").is_err());
    assert!(remote.invoke(&ToolRef::new("no_such_provider", "x"), &JsonObject::new(), 0).is_err());
}
