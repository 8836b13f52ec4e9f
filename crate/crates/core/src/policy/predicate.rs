//! Match predicates: compilation from the prefix-notation JSON form and
//! three-valued evaluation.

use crate::ledger::ContextSnapshot;
use crate::model::Action;
use regex::Regex;
use serde_json::Value;
use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

/// Kleene three-valued truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tri {
    True,
    False,
    Indeterminate,
}

impl Tri {
    pub fn from_bool(b: bool) -> Tri {
        if b {
            Tri::True
        } else {
            Tri::False
        }
    }

    pub fn and(self, other: Tri) -> Tri {
        match (self, other) {
            (Tri::False, _) | (_, Tri::False) => Tri::False,
            (Tri::True, Tri::True) => Tri::True,
            _ => Tri::Indeterminate,
        }
    }

    pub fn or(self, other: Tri) -> Tri {
        match (self, other) {
            (Tri::True, _) | (_, Tri::True) => Tri::True,
            (Tri::False, Tri::False) => Tri::False,
            _ => Tri::Indeterminate,
        }
    }
}

impl std::ops::Not for Tri {
    type Output = Tri;

    fn not(self) -> Tri {
        match self {
            Tri::True => Tri::False,
            Tri::False => Tri::True,
            Tri::Indeterminate => Tri::Indeterminate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityField {
    HumanPrincipal,
    ServiceIdentity,
    AgentIdentity,
    SessionId,
    PrivilegeScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextField {
    DataClassification,
    OriginalRequest,
    PriorTools,
    Entities,
    CumulativeDrift,
    Confidence,
    DeferredCount,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldPath {
    Tool,
    Operation,
    Param(Vec<String>),
    Identity(IdentityField),
    Context(ContextField),
}

impl FieldPath {
    pub fn parse(path: &str) -> Option<FieldPath> {
        let (root, rest) = path.split_once('.')?;
        match root {
            "action" => match rest {
                "tool" => Some(FieldPath::Tool),
                "operation" => Some(FieldPath::Operation),
                _ => {
                    let key = rest.strip_prefix("params.")?;
                    let parts: Vec<String> = key.split('.').map(str::to_owned).collect();
                    (!parts.iter().any(String::is_empty)).then_some(FieldPath::Param(parts))
                }
            },
            "identity" => Some(FieldPath::Identity(match rest {
                "human_principal" => IdentityField::HumanPrincipal,
                "service_identity" => IdentityField::ServiceIdentity,
                "agent_identity" => IdentityField::AgentIdentity,
                "session_id" => IdentityField::SessionId,
                "privilege_scope" => IdentityField::PrivilegeScope,
                _ => return None,
            })),
            "context" => Some(FieldPath::Context(match rest {
                "data_classification" => ContextField::DataClassification,
                "original_request" => ContextField::OriginalRequest,
                "prior_tools" => ContextField::PriorTools,
                "entities" => ContextField::Entities,
                "cumulative_drift" => ContextField::CumulativeDrift,
                "confidence" => ContextField::Confidence,
                "deferred_count" => ContextField::DeferredCount,
                _ => return None,
            })),
            _ => None,
        }
    }

    pub fn is_context(&self) -> bool {
        matches!(self, FieldPath::Context(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    NotIn,
    Contains,
    Matches,
}

impl Op {
    fn parse(s: &str) -> Option<Op> {
        Some(match s {
            "==" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" => Op::Le,
            ">" => Op::Gt,
            ">=" => Op::Ge,
            "IN" => Op::In,
            "NOT_IN" | "NOT IN" => Op::NotIn,
            "CONTAINS" => Op::Contains,
            "MATCHES" => Op::Matches,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Operand {
    Literal(Value),
    Field(FieldPath),
    Regex(Regex),
}

#[derive(Debug, Clone)]
pub enum Expr {
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
    Cmp { op: Op, field: FieldPath, rhs: Operand },
}

/// A compile error and the JSON pointer (relative to the predicate root)
/// where it occurred.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompileError {
    pub pointer: String,
    pub message: String,
}

pub type NamedLists = BTreeMap<String, Arc<Value>>;

impl Expr {
    /// Compile, collecting every error rather than stopping at the first.
    pub fn compile(v: &Value, lists: &NamedLists) -> Result<Expr, Vec<CompileError>> {
        let mut errors = Vec::new();
        let mut pointer = String::new();
        let expr = compile(v, lists, &mut pointer, &mut errors);
        match expr {
            Some(e) if errors.is_empty() => Ok(e),
            _ => Err(errors),
        }
    }

    pub fn references_context(&self) -> bool {
        match self {
            Expr::And(xs) | Expr::Or(xs) => xs.iter().any(Expr::references_context),
            Expr::Not(x) => x.references_context(),
            Expr::Cmp { field, rhs, .. } => {
                field.is_context() || matches!(rhs, Operand::Field(f) if f.is_context())
            }
        }
    }

    /// Tools this predicate can possibly match, if it pins `action.tool`.
    pub fn tool_constraint(&self) -> Option<BTreeSet<String>> {
        match self {
            Expr::Cmp { op: Op::Eq, field: FieldPath::Tool, rhs: Operand::Literal(Value::String(s)) } => {
                Some(BTreeSet::from([s.clone()]))
            }
            Expr::Cmp { op: Op::In, field: FieldPath::Tool, rhs: Operand::Literal(Value::Array(xs)) } => {
                xs.iter().map(|x| x.as_str().map(str::to_owned)).collect()
            }
            Expr::And(xs) => xs.iter().find_map(Expr::tool_constraint),
            Expr::Or(xs) => {
                let mut all = BTreeSet::new();
                for x in xs {
                    all.extend(x.tool_constraint()?);
                }
                Some(all)
            }
            _ => None,
        }
    }

    /// Evaluate against an action and a context snapshot. `None` context
    /// means unavailable: every context leaf is indeterminate.
    pub fn eval(&self, action: &Action, ctx: Option<&ContextSnapshot>) -> Tri {
        match self {
            Expr::And(xs) => {
                let mut acc = Tri::True;
                for x in xs {
                    acc = acc.and(x.eval(action, ctx));
                    if acc == Tri::False {
                        break;
                    }
                }
                acc
            }
            Expr::Or(xs) => {
                let mut acc = Tri::False;
                for x in xs {
                    acc = acc.or(x.eval(action, ctx));
                    if acc == Tri::True {
                        break;
                    }
                }
                acc
            }
            Expr::Not(x) => !x.eval(action, ctx),
            Expr::Cmp { op, field, rhs } => {
                let lhs = resolve(field, action, ctx);
                let rhs = match rhs {
                    Operand::Regex(re) => return matches_regex(*op, &lhs, re),
                    Operand::Literal(v) => Resolved::Value(Cow::Borrowed(v)),
                    Operand::Field(f) => resolve(f, action, ctx),
                };
                compare(*op, &lhs, &rhs)
            }
        }
    }
}

fn err<T>(errors: &mut Vec<CompileError>, pointer: &str, message: String) -> Option<T> {
    errors.push(CompileError { pointer: pointer.to_owned(), message });
    None
}

fn compile(v: &Value, lists: &NamedLists, pointer: &mut String, errors: &mut Vec<CompileError>) -> Option<Expr> {
    let Some(items) = v.as_array() else {
        return err(errors, pointer, "expression must be an array [operator, ...]".into());
    };
    let Some(head) = items.first().and_then(Value::as_str) else {
        return err(errors, pointer, "expression must start with an operator string".into());
    };
    let at = |pointer: &str, i: usize| format!("{pointer}/{i}");
    match head {
        "AND" | "OR" | "NOT" => {
            if head == "NOT" && items.len() != 2 {
                return err(errors, pointer, "NOT takes exactly one operand".into());
            }
            if items.len() < 2 {
                return err(errors, pointer, format!("{head} needs at least one operand"));
            }
            let mut children = Vec::new();
            for (i, child) in items.iter().enumerate().skip(1) {
                let len = pointer.len();
                pointer.push_str(&format!("/{i}"));
                if let Some(c) = compile(child, lists, pointer, errors) {
                    children.push(c);
                }
                pointer.truncate(len);
            }
            if children.len() != items.len() - 1 {
                return None;
            }
            Some(match head {
                "AND" => Expr::And(children),
                "OR" => Expr::Or(children),
                _ => Expr::Not(Box::new(children.pop().expect("one operand"))),
            })
        }
        _ => {
            let Some(op) = Op::parse(head) else {
                return err(errors, &at(pointer, 0), format!("unknown operator {head:?}"));
            };
            if items.len() != 3 {
                return err(errors, pointer, format!("{head} takes exactly two operands"));
            }
            let field = match items[1].as_str().map(|s| (s, FieldPath::parse(s))) {
                Some((_, Some(f))) => Some(f),
                Some((s, None)) => err(errors, &at(pointer, 1), format!("unknown field path {s:?}")),
                None => err(errors, &at(pointer, 1), "left operand must be a field path string".into()),
            };
            let rhs = compile_operand(op, &items[2], lists, &at(pointer, 2), errors);
            Some(Expr::Cmp { op, field: field?, rhs: rhs? })
        }
    }
}

fn compile_operand(
    op: Op,
    v: &Value,
    lists: &NamedLists,
    pointer: &str,
    errors: &mut Vec<CompileError>,
) -> Option<Operand> {
    let mut fail = |m: String| {
        errors.push(CompileError { pointer: pointer.to_owned(), message: m });
        None
    };
    if let Some(path) = v.as_object().and_then(|o| (o.len() == 1).then(|| o.get("field")).flatten()) {
        return match path.as_str().and_then(FieldPath::parse) {
            Some(f) => Some(Operand::Field(f)),
            None => fail(format!("unknown field path {path}")),
        };
    }
    let literal = match v {
        Value::String(s) if s.starts_with('@') => match lists.get(&s[1..]) {
            Some(list) => Value::clone(list),
            None => return fail(format!("undefined named list {s:?}")),
        },
        Value::Object(_) => return fail("object operands must be {\"field\": <path>}".into()),
        Value::Null => return fail("null is not a valid operand".into()),
        other => other.clone(),
    };
    match op {
        Op::Matches => match literal.as_str() {
            Some(pattern) => match Regex::new(pattern) {
                Ok(re) => Some(Operand::Regex(re)),
                Err(e) => fail(format!("bad regex: {e}")),
            },
            None => fail("MATCHES needs a regex string".into()),
        },
        Op::In | Op::NotIn if !literal.is_array() => fail(format!("{op:?} needs a list or @named_list")),
        Op::Lt | Op::Le | Op::Gt | Op::Ge if !(literal.is_number() || literal.is_string()) => {
            fail("ordered comparison needs a number or string".into())
        }
        _ => Some(Operand::Literal(literal)),
    }
}

#[derive(Debug)]
enum Resolved<'a> {
    /// An action parameter that is absent.
    Missing,
    /// A context field with no value yet, or no context at all.
    Unpopulated,
    Value(Cow<'a, Value>),
}

fn set_value(set: &BTreeSet<String>) -> Value {
    Value::Array(set.iter().map(|s| Value::String(s.clone())).collect())
}

fn resolve<'a>(field: &FieldPath, action: &'a Action, ctx: Option<&ContextSnapshot>) -> Resolved<'a> {
    let owned = |s: &str| Resolved::Value(Cow::Owned(Value::String(s.to_owned())));
    match field {
        FieldPath::Tool => owned(&action.tool),
        FieldPath::Operation => owned(&action.operation),
        FieldPath::Param(parts) => {
            let mut cur = action.parameters.get(&parts[0]);
            for p in &parts[1..] {
                cur = cur.and_then(|v| v.get(p));
            }
            match cur {
                None | Some(Value::Null) => Resolved::Missing,
                Some(v) => Resolved::Value(Cow::Borrowed(v)),
            }
        }
        FieldPath::Identity(f) => {
            let id = &action.identity;
            match f {
                IdentityField::HumanPrincipal => owned(&id.human_principal),
                IdentityField::ServiceIdentity => owned(&id.service_identity),
                IdentityField::AgentIdentity => owned(&id.agent_identity),
                IdentityField::SessionId => owned(&id.session_id),
                IdentityField::PrivilegeScope => Resolved::Value(Cow::Owned(Value::Array(
                    id.privilege_scope.iter().map(|s| Value::String(s.clone())).collect(),
                ))),
            }
        }
        FieldPath::Context(f) => {
            let Some(ctx) = ctx else {
                return Resolved::Unpopulated;
            };
            let v = match f {
                ContextField::DataClassification => set_value(&ctx.data_classifications),
                ContextField::PriorTools => set_value(&ctx.prior_tools),
                ContextField::Entities => set_value(&ctx.entities),
                ContextField::OriginalRequest => match &ctx.original_request {
                    Some(r) => Value::String(r.clone()),
                    None => return Resolved::Unpopulated,
                },
                ContextField::CumulativeDrift => match ctx.cumulative_drift {
                    Some(d) => Value::from(d),
                    None => return Resolved::Unpopulated,
                },
                // Confidence is only meaningful once drift is measurable.
                ContextField::Confidence => match ctx.cumulative_drift {
                    Some(_) => Value::from(ctx.confidence),
                    None => return Resolved::Unpopulated,
                },
                ContextField::DeferredCount => Value::from(ctx.deferred_count as u64),
            };
            Resolved::Value(Cow::Owned(v))
        }
    }
}

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        _ => a == b,
    }
}

fn ordering(a: &Value, b: &Value) -> Option<std::cmp::Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// Whether `value` is a member of `list`. A bare domain in the list also
/// admits email addresses and hosts at that domain or its subdomains.
fn member(value: &Value, list: &[Value]) -> bool {
    list.iter().any(|item| {
        if json_eq(value, item) {
            return true;
        }
        let (Some(v), Some(d)) = (value.as_str(), item.as_str()) else {
            return false;
        };
        if d.contains('@') || d.is_empty() {
            return false;
        }
        let host = v.rsplit_once('@').map(|(_, h)| h).unwrap_or(v).to_ascii_lowercase();
        let d = d.to_ascii_lowercase();
        host == d || host.ends_with(&format!(".{d}"))
    })
}

fn contains(haystack: &Value, needle: &Value) -> bool {
    match (haystack, needle) {
        (Value::Array(xs), Value::Array(ns)) => ns.iter().any(|n| xs.iter().any(|x| json_eq(x, n))),
        (Value::Array(xs), n) => xs.iter().any(|x| json_eq(x, n)),
        (Value::String(s), Value::String(n)) => s.contains(n.as_str()),
        (Value::String(s), Value::Array(ns)) => ns.iter().any(|n| n.as_str().is_some_and(|n| s.contains(n))),
        _ => false,
    }
}

fn compare(op: Op, lhs: &Resolved<'_>, rhs: &Resolved<'_>) -> Tri {
    let (l, r) = match (lhs, rhs) {
        (Resolved::Unpopulated, _) | (_, Resolved::Unpopulated) => return Tri::Indeterminate,
        (Resolved::Missing, _) | (_, Resolved::Missing) => {
            return match op {
                Op::Ne => Tri::True,
                Op::Lt | Op::Le | Op::Gt | Op::Ge => Tri::Indeterminate,
                _ => Tri::False,
            }
        }
        (Resolved::Value(l), Resolved::Value(r)) => (l.as_ref(), r.as_ref()),
    };
    let b = match op {
        Op::Eq => json_eq(l, r),
        Op::Ne => !json_eq(l, r),
        Op::Lt | Op::Le | Op::Gt | Op::Ge => match ordering(l, r) {
            Some(o) => match op {
                Op::Lt => o.is_lt(),
                Op::Le => o.is_le(),
                Op::Gt => o.is_gt(),
                _ => o.is_ge(),
            },
            None => false,
        },
        Op::In | Op::NotIn => {
            let Some(list) = r.as_array() else {
                return Tri::False;
            };
            let inside = match l {
                Value::Array(xs) => xs.iter().all(|x| member(x, list)),
                x => member(x, list),
            };
            inside == (op == Op::In)
        }
        Op::Contains => contains(l, r),
        Op::Matches => false,
    };
    Tri::from_bool(b)
}

fn matches_regex(op: Op, lhs: &Resolved<'_>, re: &Regex) -> Tri {
    debug_assert_eq!(op, Op::Matches);
    let one = |v: &Value| match v {
        Value::String(s) => re.is_match(s),
        Value::Number(n) => re.is_match(&n.to_string()),
        Value::Bool(b) => re.is_match(if *b { "true" } else { "false" }),
        _ => false,
    };
    match lhs {
        Resolved::Unpopulated => Tri::Indeterminate,
        Resolved::Missing => Tri::False,
        Resolved::Value(v) => Tri::from_bool(match v.as_ref() {
            Value::Array(xs) => xs.iter().any(one),
            other => one(other),
        }),
    }
}
