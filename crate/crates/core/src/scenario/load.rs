//! Parsing and static validation of scenario files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};

use super::{op_spec, ActorKind, ActorRef, Expect, ImageSpec, Scenario, ScenarioStep, REALM_ARGS, SCHEMA_VERSION};
use crate::granule::GranuleSpace;
use crate::host::HostPolicy;
use crate::rmm::{MAX_IPA_WIDTH, MIN_IPA_WIDTH};
use crate::types::Ipa;

/// A scenario that failed to parse or validate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseError {
    pub line: Option<usize>,
    /// JSON path of the offending field, e.g. `steps[3].op`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ParseError {}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ParseError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| ParseError {
        line: None,
        field: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario(&src)
}

pub fn parse_scenario(src: &str) -> Result<Scenario, ParseError> {
    let root: Value = serde_json::from_str(src).map_err(|e| ParseError {
        line: Some(e.line()),
        field: "<document>".into(),
        message: e.to_string(),
    })?;
    Loader {
        lines: step_lines(src),
    }
    .scenario(&root)
}

/// Parses `"0x1000"`, `"4096"` or a JSON number.
pub(crate) fn parse_u64(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => parse_u64_str(s),
        _ => None,
    }
}

pub(crate) fn parse_u64_str(s: &str) -> Option<u64> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(&h.replace('_', ""), 16).ok(),
        None => s.replace('_', "").parse().ok(),
    }
}

/// Variable named by a `$var.path` reference.
pub(crate) fn var_name(s: &str) -> Option<&str> {
    let rest = s.strip_prefix('$')?;
    Some(rest.split('.').next().unwrap_or(rest))
}

pub(crate) fn page_bytes(obj: &Map<String, Value>) -> Result<Option<Vec<u8>>, String> {
    match (obj.get("text"), obj.get("hex")) {
        (Some(_), Some(_)) => Err("give either text or hex, not both".into()),
        (Some(Value::String(t)), None) => Ok(Some(t.as_bytes().to_vec())),
        (None, Some(Value::String(h))) => hex::decode(h).map(Some).map_err(|e| format!("bad hex: {e}")),
        (None, None) => Ok(None),
        _ => Err("text/hex must be a string".into()),
    }
}

fn perr(line: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        field: field.into(),
        message: message.into(),
    }
}

struct Loader {
    lines: Vec<usize>,
}

impl Loader {
    fn scenario(&self, root: &Value) -> Result<Scenario, ParseError> {
        let obj = root.as_object().ok_or_else(|| perr(Some(1), "<document>", "expected an object"))?;
        const KEYS: &[&str] = &[
            "schema",
            "name",
            "description",
            "seed",
            "granules",
            "host_policy",
            "auto_service",
            "images",
            "steps",
        ];
        if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(perr(None, k.as_str(), "unknown field"));
        }
        match obj.get("schema").and_then(Value::as_u64) {
            Some(SCHEMA_VERSION) => {}
            Some(v) => return Err(perr(None, "schema", format!("unsupported version {v}"))),
            None => return Err(perr(None, "schema", "missing schema version")),
        }
        let name = match obj.get("name") {
            Some(Value::String(s)) => s.clone(),
            _ => return Err(perr(None, "name", "expected a string")),
        };
        let description = match obj.get("description") {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(perr(None, "description", "expected a string")),
        };
        let seed = match obj.get("seed") {
            None => 0,
            Some(v) => parse_u64(v).ok_or_else(|| perr(None, "seed", "expected an unsigned integer"))?,
        };
        let granules = match obj.get("granules") {
            None => GranuleSpace::DEFAULT_GRANULES,
            Some(v) => parse_u64(v)
                .filter(|&n| (1..=1 << 20).contains(&n))
                .ok_or_else(|| perr(None, "granules", "expected a count in 1..=1048576"))? as usize,
        };
        let policy = match obj.get("host_policy") {
            None => HostPolicy::Cooperative,
            Some(v) => parse_policy(v).ok_or_else(|| perr(None, "host_policy", "unknown policy"))?,
        };
        let auto_service = match obj.get("auto_service") {
            None => true,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(perr(None, "auto_service", "expected a boolean")),
        };
        let images = match obj.get("images") {
            None => BTreeMap::new(),
            Some(Value::Object(m)) => m
                .iter()
                .map(|(k, v)| Ok((k.clone(), image(v, &format!("images.{k}"))?)))
                .collect::<Result<_, ParseError>>()?,
            Some(_) => return Err(perr(None, "images", "expected an object")),
        };
        let raw_steps = obj
            .get("steps")
            .and_then(Value::as_array)
            .ok_or_else(|| perr(None, "steps", "expected an array"))?;

        let mut aliases = BTreeSet::new();
        let mut vars = BTreeSet::new();
        let mut steps = Vec::with_capacity(raw_steps.len());
        for (i, raw) in raw_steps.iter().enumerate() {
            let step = self.step(i, raw, &images, &aliases, &vars)?;
            if let Some(Value::String(a)) = step.args.get("alias") {
                aliases.insert(a.clone());
            }
            if let Some(b) = &step.bind {
                vars.insert(b.clone());
            }
            steps.push(step);
        }
        Ok(Scenario {
            name,
            description,
            seed,
            granules,
            policy,
            auto_service,
            images,
            steps,
        })
    }

    fn step(
        &self,
        i: usize,
        raw: &Value,
        images: &BTreeMap<String, ImageSpec>,
        aliases: &BTreeSet<String>,
        vars: &BTreeSet<String>,
    ) -> Result<ScenarioStep, ParseError> {
        let line = self.lines.get(i).copied();
        let at = |f: &str| format!("steps[{i}].{f}");
        let obj = raw.as_object().ok_or_else(|| perr(line, format!("steps[{i}]"), "expected an object"))?;
        if let Some(k) = obj
            .keys()
            .find(|k| !["actor", "op", "args", "expect", "bind", "note"].contains(&k.as_str()))
        {
            return Err(perr(line, at(k), "unknown field"));
        }

        let actor_s = obj
            .get("actor")
            .and_then(Value::as_str)
            .ok_or_else(|| perr(line, at("actor"), "expected a string"))?;
        let actor = match actor_s.split_once(':') {
            None if actor_s == "host" => ActorRef::Host,
            Some(("realm", a)) => ActorRef::Realm(a.to_string()),
            Some(("owner", a)) => ActorRef::Owner(a.to_string()),
            _ => {
                return Err(perr(
                    line,
                    at("actor"),
                    format!("`{actor_s}` is not host, realm:<alias> or owner:<alias>"),
                ))
            }
        };
        if let ActorRef::Realm(a) | ActorRef::Owner(a) = &actor {
            if !aliases.contains(a) {
                return Err(perr(line, at("actor"), format!("dangling alias `{a}`")));
            }
        }

        let op_name = obj
            .get("op")
            .and_then(Value::as_str)
            .ok_or_else(|| perr(line, at("op"), "expected a string"))?;
        let op = op_spec(op_name).ok_or_else(|| perr(line, at("op"), format!("unknown op `{op_name}`")))?;
        if op.actor != actor.kind() {
            let want = match op.actor {
                ActorKind::Host => "host",
                ActorKind::Realm => "realm:<alias>",
                ActorKind::Owner => "owner:<alias>",
            };
            return Err(perr(line, at("op"), format!("`{op_name}` must be issued by {want}")));
        }

        let args = match obj.get("args") {
            None => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return Err(perr(line, at("args"), "expected an object")),
        };
        for req in op.required {
            if !req.split('|').any(|k| args.contains_key(k)) {
                return Err(perr(line, at("args"), format!("missing `{req}`")));
            }
        }
        for (k, v) in &args {
            let field = at(&format!("args.{k}"));
            let known = op.optional.contains(&k.as_str()) || op.required.iter().any(|r| r.split('|').any(|x| x == k));
            if !known {
                return Err(perr(line, field, format!("`{op_name}` takes no such argument")));
            }
            check_refs(v, vars).map_err(|m| perr(line, &field, m))?;
            if let Value::String(s) = v {
                if REALM_ARGS.contains(&k.as_str()) && !s.starts_with('$') && parse_u64_str(s).is_none() && !aliases.contains(s) {
                    return Err(perr(line, field, format!("dangling alias `{s}`")));
                }
                if k == "image" && !images.contains_key(s) {
                    return Err(perr(line, field, format!("unknown image `{s}`")));
                }
                if k == "policy" && parse_policy(v).is_none() {
                    return Err(perr(line, field, format!("unknown policy `{s}`")));
                }
            }
        }
        if let Some(a) = args.get("alias") {
            if !a.is_string() {
                return Err(perr(line, at("args.alias"), "expected a string"));
            }
        }
        page_bytes(&args).map_err(|m| perr(line, at("args"), m))?;

        let expect = match obj.get("expect") {
            None => Expect::Ok(None),
            Some(Value::String(s)) if s == "ok" => Expect::Ok(None),
            Some(Value::Object(m)) if m.len() == 1 => match m.iter().next().unwrap() {
                (k, p) if k == "ok" => {
                    check_refs(p, vars).map_err(|m| perr(line, at("expect.ok"), m))?;
                    Expect::Ok(Some(p.clone()))
                }
                (k, Value::String(code)) if k == "err" => Expect::Err(code.clone()),
                _ => return Err(perr(line, at("expect"), "expected {\"ok\": pattern} or {\"err\": code}")),
            },
            Some(_) => return Err(perr(line, at("expect"), "expected \"ok\", {\"ok\": pattern} or {\"err\": code}")),
        };

        let bind = match obj.get("bind") {
            None => None,
            Some(Value::String(b)) if !b.is_empty() && !b.contains('.') && !b.starts_with('$') => Some(b.clone()),
            Some(_) => return Err(perr(line, at("bind"), "expected a plain variable name")),
        };

        Ok(ScenarioStep {
            actor,
            op,
            args,
            expect,
            bind,
            line,
        })
    }
}

fn parse_policy(v: &Value) -> Option<HostPolicy> {
    serde_json::from_value(v.clone()).ok()
}

/// Every `$var` inside `v` must already be bound.
fn check_refs(v: &Value, vars: &BTreeSet<String>) -> Result<(), String> {
    match v {
        Value::String(s) => match var_name(s) {
            Some(n) if !vars.contains(n) => Err(format!("dangling variable `${n}`")),
            _ => Ok(()),
        },
        Value::Array(a) => a.iter().try_for_each(|x| check_refs(x, vars)),
        Value::Object(m) => m.values().try_for_each(|x| check_refs(x, vars)),
        _ => Ok(()),
    }
}

fn image(v: &Value, field: &str) -> Result<ImageSpec, ParseError> {
    let obj = v.as_object().ok_or_else(|| perr(None, field, "expected an object"))?;
    let ipa_width = match obj.get("ipa_width") {
        None => 32,
        Some(w) => parse_u64(w)
            .filter(|w| (MIN_IPA_WIDTH as u64..=MAX_IPA_WIDTH as u64).contains(w))
            .ok_or_else(|| perr(None, format!("{field}.ipa_width"), "out of range"))? as u8,
    };
    let mut pages = Vec::new();
    let raw = match obj.get("pages") {
        None => &Vec::new(),
        Some(Value::Array(a)) => a,
        Some(_) => return Err(perr(None, format!("{field}.pages"), "expected an array")),
    };
    for (j, p) in raw.iter().enumerate() {
        let pf = format!("{field}.pages[{j}]");
        let po = p.as_object().ok_or_else(|| perr(None, &pf, "expected an object"))?;
        let ipa = po
            .get("ipa")
            .and_then(parse_u64)
            .map(Ipa)
            .filter(|i| i.is_aligned())
            .ok_or_else(|| perr(None, format!("{pf}.ipa"), "expected a granule-aligned address"))?;
        let bytes = page_bytes(po)
            .map_err(|m| perr(None, &pf, m))?
            .unwrap_or_default();
        if bytes.len() > crate::types::GRANULE_SIZE {
            return Err(perr(None, pf, "content larger than one granule"));
        }
        pages.push((ipa, bytes));
    }
    Ok(ImageSpec { ipa_width, pages })
}

/// Source line on which each element of the top-level `steps` array starts.
fn step_lines(src: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut line = 1;
    let (mut in_str, mut escaped) = (false, false);
    let mut cur = String::new();
    let mut last_str = String::new();
    let mut after_steps_key = false;
    let mut steps_depth = None;
    for c in src.chars() {
        if c == '\n' {
            line += 1;
        }
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => {
                    in_str = false;
                    last_str = std::mem::take(&mut cur);
                }
                _ => cur.push(c),
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            ':' => after_steps_key = depth == 1 && last_str == "steps",
            '{' | '[' => {
                if c == '{' && steps_depth == Some(depth) {
                    out.push(line);
                }
                depth += 1;
                if after_steps_key && c == '[' {
                    steps_depth = Some(depth);
                }
                after_steps_key = false;
            }
            '}' | ']' => {
                if steps_depth == Some(depth) {
                    steps_depth = None;
                }
                depth = depth.saturating_sub(1);
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(steps: &str) -> String {
        format!(
            r#"{{
  "schema": 1,
  "name": "t",
  "steps": [
{steps}
  ]
}}"#
        )
    }

    const LAUNCH: &str = r#"    {"actor": "host", "op": "launch_realm", "args": {"alias": "P"}}"#;

    #[test]
    fn valid_file_loads() {
        let s = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_create\", \"args\": {{\"base\": \"0x10000\", \"size\": 2}}, \"bind\": \"c\"}}"
        )))
        .unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[1].actor, ActorRef::Realm("P".into()));
        assert_eq!(s.steps[1].op.name, "csm_create");
        assert_eq!(s.steps[1].bind.as_deref(), Some("c"));
        assert_eq!(s.steps[0].line, Some(5));
        assert_eq!(s.steps[1].line, Some(6));
        assert_eq!(s.seed, 0);
        assert!(s.auto_service);
    }

    #[test]
    fn unknown_op_is_rejected_with_line() {
        let e = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_steal\"}}"
        )))
        .unwrap_err();
        assert_eq!(e.field, "steps[1].op");
        assert_eq!(e.line, Some(6));
        assert!(e.message.contains("csm_steal"));
    }

    #[test]
    fn dangling_actor_alias_is_rejected() {
        let e = parse_scenario(&doc(r#"    {"actor": "realm:Q", "op": "attestation_token"}"#)).unwrap_err();
        assert_eq!(e.field, "steps[0].actor");
        assert!(e.message.contains("dangling alias"));
    }

    #[test]
    fn dangling_argument_alias_is_rejected() {
        let e = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_share\", \"args\": {{\"csm\": 1, \"consumer\": \"C\"}}}}"
        )))
        .unwrap_err();
        assert_eq!(e.field, "steps[1].args.consumer");
    }

    #[test]
    fn alias_must_precede_use() {
        let e = parse_scenario(&doc(&format!(
            "    {{\"actor\": \"realm:P\", \"op\": \"peers\"}},\n{LAUNCH}"
        )))
        .unwrap_err();
        assert!(e.message.contains("dangling alias"));
    }

    #[test]
    fn dangling_variable_is_rejected() {
        let e = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_attach\", \"args\": {{\"sharing\": \"$s.sharing\"}}}}"
        )))
        .unwrap_err();
        assert!(e.message.contains("$s"));
    }

    #[test]
    fn wrong_actor_kind_is_rejected() {
        let e = parse_scenario(&doc(r#"    {"actor": "host", "op": "csm_create", "args": {"base": 0, "size": 1}}"#)).unwrap_err();
        assert!(e.message.contains("realm"));
    }

    #[test]
    fn missing_and_unknown_args_are_rejected() {
        let e = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_create\", \"args\": {{\"base\": 0}}}}"
        )))
        .unwrap_err();
        assert!(e.message.contains("size"));
        let e = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_create\", \"args\": {{\"base\": 0, \"size\": 1, \"sz\": 1}}}}"
        )))
        .unwrap_err();
        assert_eq!(e.field, "steps[1].args.sz");
    }

    #[test]
    fn syntax_errors_carry_a_line() {
        let e = parse_scenario("{\n  \"schema\": 1,\n  \"name\": \n}").unwrap_err();
        assert_eq!(e.line, Some(4));
    }

    #[test]
    fn schema_version_is_enforced() {
        let e = parse_scenario(r#"{"schema": 2, "name": "x", "steps": []}"#).unwrap_err();
        assert_eq!(e.field, "schema");
        let e = parse_scenario(r#"{"name": "x", "steps": []}"#).unwrap_err();
        assert_eq!(e.field, "schema");
    }

    #[test]
    fn expect_forms() {
        let s = parse_scenario(&doc(&format!(
            "{LAUNCH},\n    {{\"actor\": \"realm:P\", \"op\": \"peers\", \"expect\": {{\"ok\": {{\"peers\": []}}}}}},\n    {{\"actor\": \"realm:P\", \"op\": \"csm_destroy\", \"args\": {{\"csm\": 9}}, \"expect\": {{\"err\": \"NotOwner\"}}}}"
        )))
        .unwrap();
        assert_eq!(s.steps[1].expect, Expect::Ok(Some(serde_json::json!({"peers": []}))));
        assert_eq!(s.steps[2].expect, Expect::Err("NotOwner".into()));
    }

    #[test]
    fn images_are_parsed() {
        let s = parse_scenario(
            r#"{"schema": 1, "name": "x", "images": {"a": {"ipa_width": 30, "pages": [{"ipa": "0x1000", "text": "hi"}]}}, "steps": []}"#,
        )
        .unwrap();
        let img = &s.images["a"];
        assert_eq!(img.ipa_width, 30);
        assert_eq!(img.pages, vec![(Ipa(0x1000), b"hi".to_vec())]);
        let e = parse_scenario(r#"{"schema": 1, "name": "x", "images": {"a": {"pages": [{"ipa": "0x1001"}]}}, "steps": []}"#)
            .unwrap_err();
        assert_eq!(e.field, "images.a.pages[0].ipa");
    }

    #[test]
    fn numbers_parse_in_both_bases() {
        assert_eq!(parse_u64_str("0x1_000"), Some(4096));
        assert_eq!(parse_u64_str("4096"), Some(4096));
        assert_eq!(parse_u64_str("P"), None);
    }

    #[test]
    fn step_lines_ignore_nested_and_string_braces() {
        let src = "{\"x\": {\"steps\": [{}]},\n \"steps\": [\n {\"note\": \"{[\"},\n {\"args\": {\"a\": [{}]}}\n]}";
        assert_eq!(step_lines(src), vec![3, 4]);
    }
}
