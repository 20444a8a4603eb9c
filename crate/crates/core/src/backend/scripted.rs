use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{estimate_usage, ChatBackend, ChatRequest, ChatResponse};
use crate::domain::{parse_transcript, ChatMessage, Role};
use crate::error::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Every needle occurs in the scoped text (case-insensitive).
    ContainsAll(Vec<String>),
    Regex(String),
    Always,
}

/// Which part of the request a rule looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// All message contents joined by newlines.
    #[default]
    All,
    FirstUser,
    LastUser,
    /// All user message contents.
    Users,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EchoSource {
    /// The last user message, verbatim.
    LastUser,
    /// The user blocks of a `[role] ...` transcript embedded in the last user
    /// message, joined by single spaces. Falls back to all user messages when
    /// no transcript is present.
    TranscriptUsers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptResponse {
    Text(String),
    /// Response chosen by `seed mod len`; requests without a seed get the
    /// first entry.
    BySeed(Vec<String>),
    Echo(EchoSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    #[serde(default)]
    pub scope: Scope,
    pub response: ScriptResponse,
    #[serde(default)]
    pub priority: i32,
}

impl ScriptRule {
    pub fn new(matcher: Matcher, response: ScriptResponse) -> Self {
        Self { matcher, scope: Scope::All, response, priority: 0 }
    }

    pub fn text(matcher: Matcher, text: &str) -> Self {
        Self::new(matcher, ScriptResponse::Text(text.to_string()))
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }
}

/// A script file: `{"id": ..., "rules": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default = "default_script_id")]
    pub id: String,
    pub rules: Vec<ScriptRule>,
}

fn default_script_id() -> String {
    "scripted".into()
}

struct CompiledRule {
    rule: ScriptRule,
    regex: Option<Regex>,
    needles: Vec<String>,
}

/// Deterministic test double. The response is a pure function of the rules
/// and the request's messages (and seed, for `by_seed` responses).
pub struct ScriptedBackend {
    id: String,
    // sorted by priority descending, declaration order within a priority
    rules: Vec<CompiledRule>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("id", &self.id)
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>) -> Result<Self, BackendError> {
        let always = rules.iter().filter(|r| r.matcher == Matcher::Always).count();
        if always > 1 {
            return Err(BackendError::Config(format!(
                "script has {always} `always` rules; at most one is allowed"
            )));
        }
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if let ScriptResponse::BySeed(list) = &rule.response {
                if list.is_empty() {
                    return Err(BackendError::Config("by_seed response list is empty".into()));
                }
            }
            let regex = match &rule.matcher {
                Matcher::Regex(p) => Some(
                    Regex::new(p).map_err(|e| BackendError::Config(format!("bad regex {p:?}: {e}")))?,
                ),
                _ => None,
            };
            let needles = match &rule.matcher {
                Matcher::ContainsAll(n) => n.iter().map(|s| s.to_lowercase()).collect(),
                _ => Vec::new(),
            };
            compiled.push(CompiledRule { rule, regex, needles });
        }
        // stable sort keeps declaration order among equal priorities
        compiled.sort_by(|a, b| b.rule.priority.cmp(&a.rule.priority));
        Ok(Self { id: id.into(), rules: compiled })
    }

    pub fn from_script(script: Script) -> Result<Self, BackendError> {
        Self::new(script.id, script.rules)
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let script: Script =
            serde_json::from_str(json).map_err(|e| BackendError::Config(format!("bad script: {e}")))?;
        Self::from_script(script)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Backend answering `text` to everything.
    pub fn constant(text: &str) -> Self {
        Self::new("constant", vec![ScriptRule::text(Matcher::Always, text)]).expect("valid script")
    }

    fn scoped_text(scope: Scope, messages: &[ChatMessage]) -> String {
        let join = |role: Option<Role>| {
            messages
                .iter()
                .filter(|m| role.is_none_or(|r| m.role == r))
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n")
        };
        match scope {
            Scope::All => join(None),
            Scope::Users => join(Some(Role::User)),
            Scope::System => join(Some(Role::System)),
            Scope::FirstUser => messages
                .iter()
                .find(|m| m.role == Role::User)
                .map(|m| m.content.clone())
                .unwrap_or_default(),
            Scope::LastUser => messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| m.content.clone())
                .unwrap_or_default(),
        }
    }

    fn matches(rule: &CompiledRule, text: &str) -> bool {
        match &rule.rule.matcher {
            Matcher::Always => true,
            Matcher::ContainsAll(_) => {
                let hay = text.to_lowercase();
                rule.needles.iter().all(|n| hay.contains(n.as_str()))
            }
            Matcher::Regex(_) => rule.regex.as_ref().is_some_and(|r| r.is_match(text)),
        }
    }

    fn render(response: &ScriptResponse, req: &ChatRequest) -> String {
        match response {
            ScriptResponse::Text(t) => t.clone(),
            ScriptResponse::BySeed(list) => {
                let idx = req.seed.map_or(0, |s| s.rem_euclid(list.len() as i64) as usize);
                list[idx].clone()
            }
            ScriptResponse::Echo(EchoSource::LastUser) => {
                Self::scoped_text(Scope::LastUser, &req.messages)
            }
            ScriptResponse::Echo(EchoSource::TranscriptUsers) => {
                let last = Self::scoped_text(Scope::LastUser, &req.messages);
                let parsed = parse_transcript(&last);
                let users: Vec<String> = if parsed.is_empty() {
                    req.messages
                        .iter()
                        .filter(|m| m.role == Role::User)
                        .map(|m| m.content.trim().to_string())
                        .collect()
                } else {
                    parsed
                        .into_iter()
                        .filter(|m| m.role == Role::User)
                        .map(|m| m.content.trim().to_string())
                        .collect()
                };
                users.join(" ")
            }
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let rule = self
            .rules
            .iter()
            .find(|r| Self::matches(r, &Self::scoped_text(r.rule.scope, &req.messages)))
            .ok_or(BackendError::NoRuleMatched)?;
        let content = Self::render(&rule.rule.response, req);
        Ok(ChatResponse {
            usage: estimate_usage(&req.messages, &content),
            content,
            backend_id: self.id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{count_tokens, SamplingParams};

    fn ask(backend: &ScriptedBackend, messages: Vec<ChatMessage>, seed: Option<i64>) -> Result<ChatResponse, BackendError> {
        backend.complete(&ChatRequest::new(messages, &SamplingParams::default(), seed))
    }

    #[test]
    fn always_rule_answers_constant() {
        let b = ScriptedBackend::constant("42");
        let r = ask(&b, vec![ChatMessage::user("anything at all")], None).unwrap();
        assert_eq!(r.content, "42");
        assert_eq!(r.usage.completion_tokens, count_tokens("42"));
        assert_eq!(r.usage.prompt_tokens, 3);
    }

    #[test]
    fn contains_all_beats_fallback() {
        let b = ScriptedBackend::new(
            "t",
            vec![
                ScriptRule::text(Matcher::ContainsAll(vec!["triangle".into(), "perimeter".into()]), "P=12"),
                ScriptRule::text(Matcher::Always, "unclear"),
            ],
        )
        .unwrap();
        let r = ask(&b, vec![ChatMessage::user("what is the perimeter of the triangle?")], None).unwrap();
        assert_eq!(r.content, "P=12");
        let r = ask(&b, vec![ChatMessage::user("what is the area?")], None).unwrap();
        assert_eq!(r.content, "unclear");
    }

    #[test]
    fn no_rule_matched_without_always() {
        let b = ScriptedBackend::new("t", vec![ScriptRule::text(Matcher::Regex("^x+$".into()), "x")]).unwrap();
        assert_eq!(ask(&b, vec![ChatMessage::user("y")], None), Err(BackendError::NoRuleMatched));
        assert_eq!(ask(&b, vec![ChatMessage::user("xxx")], None).unwrap().content, "x");
    }

    #[test]
    fn priority_then_declaration_order() {
        let b = ScriptedBackend::new(
            "t",
            vec![
                ScriptRule::text(Matcher::Always, "low"),
                ScriptRule::text(Matcher::ContainsAll(vec!["a".into()]), "first").priority(5),
                ScriptRule::text(Matcher::ContainsAll(vec!["a".into()]), "second").priority(5),
            ],
        )
        .unwrap();
        assert_eq!(ask(&b, vec![ChatMessage::user("a")], None).unwrap().content, "first");
        assert_eq!(ask(&b, vec![ChatMessage::user("b")], None).unwrap().content, "low");
    }

    #[test]
    fn two_always_rules_rejected() {
        let err = ScriptedBackend::new(
            "t",
            vec![ScriptRule::text(Matcher::Always, "a"), ScriptRule::text(Matcher::Always, "b")],
        )
        .unwrap_err();
        assert!(matches!(err, BackendError::Config(_)));
    }

    #[test]
    fn scope_first_user_ignores_later_turns() {
        let b = ScriptedBackend::new(
            "t",
            vec![
                ScriptRule::text(Matcher::ContainsAll(vec!["3".into()]), "12").scope(Scope::FirstUser),
                ScriptRule::text(Matcher::Always, "30"),
            ],
        )
        .unwrap();
        let msgs = vec![
            ChatMessage::user("Find the perimeter."),
            ChatMessage::assistant("30"),
            ChatMessage::user("Sides 3, 4, 5."),
        ];
        assert_eq!(ask(&b, msgs, None).unwrap().content, "30");
    }

    #[test]
    fn by_seed_indexes_modulo() {
        let b = ScriptedBackend::new(
            "t",
            vec![ScriptRule::new(
                Matcher::Always,
                ScriptResponse::BySeed(vec!["r".into(), "w".into()]),
            )],
        )
        .unwrap();
        let got: Vec<String> = (0..5)
            .map(|s| ask(&b, vec![ChatMessage::user("q")], Some(s)).unwrap().content)
            .collect();
        assert_eq!(got, ["r", "w", "r", "w", "r"]);
        assert_eq!(ask(&b, vec![ChatMessage::user("q")], Some(-1)).unwrap().content, "w");
        assert_eq!(ask(&b, vec![ChatMessage::user("q")], None).unwrap().content, "r");
    }

    #[test]
    fn echo_transcript_users_concatenates_user_blocks() {
        let b = ScriptedBackend::new(
            "t",
            vec![ScriptRule::new(Matcher::Always, ScriptResponse::Echo(EchoSource::TranscriptUsers))],
        )
        .unwrap();
        let msgs = vec![
            ChatMessage::system("explicate"),
            ChatMessage::user(
                "Conversation:\n[user] Find the perimeter of a triangle.\n[assistant] Which triangle?\n[user] Sides 3, 4, 5.",
            ),
        ];
        assert_eq!(
            ask(&b, msgs, None).unwrap().content,
            "Find the perimeter of a triangle. Sides 3, 4, 5."
        );
    }

    #[test]
    fn script_json_round_trip() {
        let json = r#"{"id": "s", "rules": [
            {"match": {"contains_all": ["a"]}, "scope": "first_user", "response": {"text": "A"}, "priority": 2},
            {"match": {"regex": "^b"}, "response": {"by_seed": ["b0", "b1"]}},
            {"match": "always", "response": {"echo": "last_user"}}
        ]}"#;
        let b = ScriptedBackend::from_json(json).unwrap();
        assert_eq!(b.id(), "s");
        assert_eq!(ask(&b, vec![ChatMessage::user("zzz")], None).unwrap().content, "zzz");
        assert_eq!(ask(&b, vec![ChatMessage::user("bq")], Some(1)).unwrap().content, "b1");
    }
}
