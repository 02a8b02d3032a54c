//! Per-function extraction of identifiers, code context and annotations
//! from Python 3 sources.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use rustpython_parser::ast::{self, Constant, Expr, Ranged, Stmt};
use rustpython_parser::text_size::{TextRange, TextSize};
use rustpython_parser::{lexer, Mode, Tok};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{normalize_annotation, CanonicalType};
use crate::tokenize::tokenize_identifier;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("syntax error in {path}: {message}")]
    Syntax { path: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgumentRecord {
    pub name: String,
    pub name_tokens: Vec<String>,
    pub raw_annotation: Option<String>,
    pub usage_sequences: Vec<Vec<String>>,
    /// `self`/`cls` of a method: kept for the function's argument list,
    /// never a datapoint of its own.
    pub is_receiver: bool,
    #[serde(default)]
    pub label: Option<CanonicalType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub module_path: String,
    pub qualified_name: String,
    pub name: String,
    pub name_tokens: Vec<String>,
    pub arguments: Vec<ArgumentRecord>,
    pub return_exprs: Vec<Vec<String>>,
    pub return_annotation: Option<String>,
    pub source_span: (usize, usize),
    #[serde(default)]
    pub return_label: Option<CanonicalType>,
    /// Cleared for dunder methods, whose return types are trivial.
    #[serde(default = "default_true")]
    pub emit_return: bool,
}

fn default_true() -> bool {
    true
}

impl FunctionRecord {
    /// Tokens of every argument name in source order, receivers included.
    pub fn all_argument_tokens(&self) -> impl Iterator<Item = &String> {
        self.arguments.iter().flat_map(|a| a.name_tokens.iter())
    }

    pub fn argument(&self, name: &str) -> Option<&ArgumentRecord> {
        self.arguments.iter().find(|a| a.name == name)
    }
}

pub fn is_dunder(name: &str) -> bool {
    name.len() > 4 && name.starts_with("__") && name.ends_with("__")
}

/// An import statement anywhere in a module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportStmt {
    /// `import a.b [as c]`
    Module { module: String, alias: Option<String> },
    /// `from [..]a.b import x [as y], *`
    From {
        module: Option<String>,
        level: usize,
        names: Vec<(String, Option<String>)>,
    },
}

/// Everything a single source file contributes to later stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedModule {
    pub module_path: String,
    pub functions: Vec<FunctionRecord>,
    pub imports: Vec<ImportStmt>,
    /// Top-level classes, type aliases and `NewType`s.
    pub type_definitions: Vec<String>,
    /// Contents of a literal `__all__`, if present.
    pub exports: Option<Vec<String>>,
    /// Dotted names referenced from annotations.
    pub annotation_refs: Vec<String>,
}

pub fn parse_module(source_text: &str, module_path: &str) -> Result<Vec<FunctionRecord>, ExtractError> {
    Ok(parse_source(source_text, module_path)?.functions)
}

pub fn parse_source(source_text: &str, module_path: &str) -> Result<ParsedModule, ExtractError> {
    let syntax = |message: String| ExtractError::Syntax {
        path: module_path.to_string(),
        message,
    };
    let module = match rustpython_parser::parse(source_text, Mode::Module, module_path) {
        Ok(ast::Mod::Module(m)) => m,
        Ok(_) => return Err(syntax("not a module".into())),
        Err(e) => return Err(syntax(e.to_string())),
    };
    let tokens = CodeTokens::lex(source_text).map_err(syntax)?;
    let lines = LineIndex::new(source_text);

    let mut cx = ModuleWalker {
        source: source_text,
        module_path,
        tokens: &tokens,
        lines: &lines,
        functions: Vec::new(),
        imports: Vec::new(),
        annotation_refs: Vec::new(),
    };
    cx.walk_block(&module.body, &Scope::default());

    let mut type_definitions = Vec::new();
    let mut exports = None;
    collect_top_level(&module.body, &mut type_definitions, &mut exports);
    type_definitions.sort();
    type_definitions.dedup();
    cx.annotation_refs.sort();
    cx.annotation_refs.dedup();

    Ok(ParsedModule {
        module_path: module_path.to_string(),
        functions: cx.functions,
        imports: cx.imports,
        type_definitions,
        exports,
        annotation_refs: cx.annotation_refs,
    })
}

struct LineIndex {
    starts: Vec<usize>,
}

impl LineIndex {
    fn new(text: &str) -> Self {
        let mut starts = vec![0];
        starts.extend(text.match_indices('\n').map(|(i, _)| i + 1));
        Self { starts }
    }

    /// 1-based line of a byte offset.
    fn line(&self, offset: TextSize) -> usize {
        self.starts.partition_point(|&s| s <= offset.to_usize())
    }
}

/// Lexer output with the structural tokens removed.
pub struct CodeTokens {
    tokens: Vec<(Tok, TextRange)>,
}

impl CodeTokens {
    pub fn lex(source: &str) -> Result<Self, String> {
        let mut tokens = Vec::new();
        for item in lexer::lex(source, Mode::Module) {
            let (tok, range) = item.map_err(|e| format!("{:?}", e.error))?;
            if !matches!(
                tok,
                Tok::Newline | Tok::Indent | Tok::Dedent | Tok::EndOfFile | Tok::StartModule
            ) {
                tokens.push((tok, range));
            }
        }
        Ok(Self { tokens })
    }

    pub fn within(&self, range: TextRange) -> &[(Tok, TextRange)] {
        let lo = self.tokens.partition_point(|(_, r)| r.start() < range.start());
        let hi = self.tokens.partition_point(|(_, r)| r.end() <= range.end());
        &self.tokens[lo..hi.max(lo)]
    }

    pub fn all(&self) -> &[(Tok, TextRange)] {
        &self.tokens
    }
}

/// Source text of a token, with string literals collapsed to a placeholder.
fn context_token(source: &str, tok: &Tok, range: TextRange) -> String {
    match tok {
        Tok::String { .. } => "<str>".to_string(),
        Tok::Name { name } => name.clone(),
        _ => source[range].to_string(),
    }
}

#[derive(Default, Clone)]
struct Scope {
    path: Vec<String>,
    in_class: bool,
}

impl Scope {
    fn child(&self, name: &str, in_class: bool) -> Self {
        let mut path = self.path.clone();
        path.push(name.to_string());
        Self { path, in_class }
    }
}

struct ModuleWalker<'a> {
    source: &'a str,
    module_path: &'a str,
    tokens: &'a CodeTokens,
    lines: &'a LineIndex,
    functions: Vec<FunctionRecord>,
    imports: Vec<ImportStmt>,
    annotation_refs: Vec<String>,
}

struct FunctionParts<'b> {
    name: &'b str,
    args: &'b ast::Arguments,
    body: &'b [Stmt],
    returns: Option<&'b Expr>,
    range: TextRange,
}

impl<'a> ModuleWalker<'a> {
    fn walk_block(&mut self, body: &[Stmt], scope: &Scope) {
        for stmt in body {
            self.walk_stmt(stmt, scope);
        }
    }

    fn walk_stmt(&mut self, stmt: &Stmt, scope: &Scope) {
        match stmt {
            Stmt::FunctionDef(f) => self.function(
                FunctionParts {
                    name: &f.name,
                    args: &f.args,
                    body: &f.body,
                    returns: f.returns.as_deref(),
                    range: f.range,
                },
                scope,
            ),
            Stmt::AsyncFunctionDef(f) => self.function(
                FunctionParts {
                    name: &f.name,
                    args: &f.args,
                    body: &f.body,
                    returns: f.returns.as_deref(),
                    range: f.range,
                },
                scope,
            ),
            Stmt::ClassDef(c) => self.walk_block(&c.body, &scope.child(&c.name, true)),
            Stmt::Import(i) => {
                for alias in &i.names {
                    self.imports.push(ImportStmt::Module {
                        module: alias.name.to_string(),
                        alias: alias.asname.as_ref().map(|a| a.to_string()),
                    });
                }
            }
            Stmt::ImportFrom(i) => self.imports.push(ImportStmt::From {
                module: i.module.as_ref().map(|m| m.to_string()),
                level: i.level.as_ref().map_or(0, |l| l.to_usize()),
                names: i
                    .names
                    .iter()
                    .map(|a| (a.name.to_string(), a.asname.as_ref().map(|x| x.to_string())))
                    .collect(),
            }),
            Stmt::AnnAssign(a) => collect_refs(&a.annotation, &mut self.annotation_refs),
            _ => {
                for child in child_blocks(stmt) {
                    self.walk_block(child, scope);
                }
            }
        }
    }

    fn function(&mut self, f: FunctionParts<'_>, scope: &Scope) {
        let qualified_name = scope.child(f.name, false).path.join(".");
        let mut arguments = Vec::new();
        let positional = f.args.posonlyargs.iter().chain(&f.args.args).map(|a| &a.def);
        let vararg = f.args.vararg.as_deref();
        let kwonly = f.args.kwonlyargs.iter().map(|a| &a.def);
        let kwarg = f.args.kwarg.as_deref();
        for (i, arg) in positional.chain(vararg).chain(kwonly).chain(kwarg).enumerate() {
            let name = arg.arg.to_string();
            let is_receiver = scope.in_class && i == 0 && (name == "self" || name == "cls");
            if let Some(ann) = &arg.annotation {
                collect_refs(ann, &mut self.annotation_refs);
            }
            arguments.push(ArgumentRecord {
                name_tokens: tokenize_identifier(&name),
                raw_annotation: arg.annotation.as_ref().map(|a| self.source[a.range()].to_string()),
                usage_sequences: Vec::new(),
                is_receiver,
                label: None,
                name,
            });
        }
        if let Some(ret) = f.returns {
            collect_refs(ret, &mut self.annotation_refs);
        }

        let mut statements = Vec::new();
        let mut returns = Vec::new();
        collect_statements(f.body, &mut statements, &mut returns);

        for arg in arguments.iter_mut() {
            for &range in &statements {
                let toks = self.tokens.within(range);
                let mentions = toks.iter().enumerate().any(|(j, (tok, _))| {
                    matches!(tok, Tok::Name { name } if *name == arg.name)
                        && !(j > 0 && matches!(toks[j - 1].0, Tok::Dot))
                });
                if mentions {
                    arg.usage_sequences.push(self.context_tokens(range));
                }
            }
        }
        let return_exprs = returns
            .into_iter()
            .map(|r| self.context_tokens(r))
            .filter(|t| !t.is_empty())
            .collect();

        self.functions.push(FunctionRecord {
            module_path: self.module_path.to_string(),
            qualified_name,
            name: f.name.to_string(),
            name_tokens: tokenize_identifier(f.name),
            arguments,
            return_exprs,
            return_annotation: f.returns.map(|r| self.source[r.range()].to_string()),
            source_span: (self.lines.line(f.range.start()), self.lines.line(f.range.end())),
            return_label: None,
            emit_return: true,
        });

        // Nested definitions are records of their own.
        let inner = scope.child(f.name, false);
        for stmt in f.body {
            self.walk_nested(stmt, &inner);
        }
    }

    /// Looks for definitions and imports below a function body.
    fn walk_nested(&mut self, stmt: &Stmt, scope: &Scope) {
        match stmt {
            Stmt::FunctionDef(_)
            | Stmt::AsyncFunctionDef(_)
            | Stmt::ClassDef(_)
            | Stmt::Import(_)
            | Stmt::ImportFrom(_)
            | Stmt::AnnAssign(_) => self.walk_stmt(stmt, scope),
            _ => {
                for child in child_blocks(stmt) {
                    for s in child {
                        self.walk_nested(s, scope);
                    }
                }
            }
        }
    }

    fn context_tokens(&self, range: TextRange) -> Vec<String> {
        let toks = self.tokens.within(range);
        let toks = match toks.last() {
            Some((Tok::Colon, _)) => &toks[..toks.len() - 1],
            _ => toks,
        };
        toks.iter()
            .map(|(tok, r)| context_token(self.source, tok, *r))
            .collect()
    }
}

/// Statement bodies nested in a compound statement.
fn child_blocks(stmt: &Stmt) -> Vec<&[Stmt]> {
    match stmt {
        Stmt::If(s) => vec![&s.body, &s.orelse],
        Stmt::For(s) => vec![&s.body, &s.orelse],
        Stmt::AsyncFor(s) => vec![&s.body, &s.orelse],
        Stmt::While(s) => vec![&s.body, &s.orelse],
        Stmt::With(s) => vec![&s.body],
        Stmt::AsyncWith(s) => vec![&s.body],
        Stmt::Try(s) => {
            let mut v: Vec<&[Stmt]> = vec![&s.body, &s.orelse, &s.finalbody];
            v.extend(s.handlers.iter().map(|ast::ExceptHandler::ExceptHandler(h)| h.body.as_slice()));
            v
        }
        Stmt::TryStar(s) => {
            let mut v: Vec<&[Stmt]> = vec![&s.body, &s.orelse, &s.finalbody];
            v.extend(s.handlers.iter().map(|ast::ExceptHandler::ExceptHandler(h)| h.body.as_slice()));
            v
        }
        Stmt::Match(s) => s.cases.iter().map(|c| c.body.as_slice()).collect(),
        _ => Vec::new(),
    }
}

fn header_range(start: TextSize, body: &[Stmt]) -> Option<TextRange> {
    body.first().map(|first| TextRange::new(start, first.range().start()))
}

/// Collects the ranges of the simple statements and compound-statement
/// headers of a function body, plus the ranges of returned expressions.
/// Nested function and class bodies are skipped.
fn collect_statements(body: &[Stmt], statements: &mut Vec<TextRange>, returns: &mut Vec<TextRange>) {
    for stmt in body {
        match stmt {
            Stmt::FunctionDef(_) | Stmt::AsyncFunctionDef(_) | Stmt::ClassDef(_) => {}
            Stmt::Return(r) => {
                statements.push(r.range);
                if let Some(value) = &r.value {
                    returns.push(value.range());
                }
            }
            Stmt::If(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
                collect_statements(&s.orelse, statements, returns);
            }
            Stmt::For(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
                collect_statements(&s.orelse, statements, returns);
            }
            Stmt::AsyncFor(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
                collect_statements(&s.orelse, statements, returns);
            }
            Stmt::While(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
                collect_statements(&s.orelse, statements, returns);
            }
            Stmt::With(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
            }
            Stmt::AsyncWith(s) => {
                statements.extend(header_range(s.range.start(), &s.body));
                collect_statements(&s.body, statements, returns);
            }
            Stmt::Match(s) => {
                statements.push(TextRange::new(s.range.start(), s.subject.range().end()));
                for case in &s.cases {
                    collect_statements(&case.body, statements, returns);
                }
            }
            Stmt::Try(_) | Stmt::TryStar(_) => {
                let (body, handlers, orelse, finalbody) = match stmt {
                    Stmt::Try(s) => (&s.body, &s.handlers, &s.orelse, &s.finalbody),
                    Stmt::TryStar(s) => (&s.body, &s.handlers, &s.orelse, &s.finalbody),
                    _ => unreachable!(),
                };
                collect_statements(body, statements, returns);
                for ast::ExceptHandler::ExceptHandler(h) in handlers {
                    statements.extend(header_range(h.range.start(), &h.body));
                    collect_statements(&h.body, statements, returns);
                }
                collect_statements(orelse, statements, returns);
                collect_statements(finalbody, statements, returns);
            }
            other => statements.push(other.range()),
        }
    }
}

/// Dotted names mentioned inside an annotation expression.
fn collect_refs(expr: &Expr, out: &mut Vec<String>) {
    match expr {
        Expr::Name(_) | Expr::Attribute(_) => {
            if let Some(name) = dotted_name(expr) {
                out.push(name);
            }
        }
        Expr::Subscript(s) => {
            collect_refs(&s.value, out);
            collect_refs(&s.slice, out);
        }
        Expr::Tuple(t) => t.elts.iter().for_each(|e| collect_refs(e, out)),
        Expr::List(l) => l.elts.iter().for_each(|e| collect_refs(e, out)),
        Expr::BinOp(b) => {
            collect_refs(&b.left, out);
            collect_refs(&b.right, out);
        }
        _ => {}
    }
}

pub(crate) fn dotted_name(expr: &Expr) -> Option<String> {
    match expr {
        Expr::Name(n) => Some(n.id.to_string()),
        Expr::Attribute(a) => dotted_name(&a.value).map(|base| format!("{base}.{}", a.attr)),
        _ => None,
    }
}

fn starts_uppercase(name: &str) -> bool {
    name.chars().next().is_some_and(char::is_uppercase)
}

fn is_type_alias_value(value: &Expr) -> bool {
    match value {
        Expr::Subscript(_) => true,
        Expr::Call(c) => dotted_name(&c.func).is_some_and(|f| f == "NewType" || f.ends_with(".NewType")),
        _ => false,
    }
}

/// Top-level type definitions and `__all__`. Conditional blocks at module
/// level (`if TYPE_CHECKING:`, `try:`) are searched too.
fn collect_top_level(body: &[Stmt], defs: &mut Vec<String>, exports: &mut Option<Vec<String>>) {
    for stmt in body {
        match stmt {
            Stmt::ClassDef(c) => defs.push(c.name.to_string()),
            Stmt::Assign(a) if a.targets.len() == 1 => {
                let Expr::Name(target) = &a.targets[0] else { continue };
                if target.id.as_str() == "__all__" {
                    *exports = literal_strings(&a.value);
                } else if starts_uppercase(&target.id) && is_type_alias_value(&a.value) {
                    defs.push(target.id.to_string());
                }
            }
            Stmt::AnnAssign(a) => {
                let Expr::Name(target) = a.target.as_ref() else { continue };
                let is_alias = dotted_name(&a.annotation).is_some_and(|n| n == "TypeAlias" || n.ends_with(".TypeAlias"));
                if is_alias {
                    defs.push(target.id.to_string());
                }
            }
            Stmt::TypeAlias(t) => {
                if let Expr::Name(n) = t.name.as_ref() {
                    defs.push(n.id.to_string());
                }
            }
            Stmt::If(_) | Stmt::Try(_) | Stmt::TryStar(_) => {
                for child in child_blocks(stmt) {
                    collect_top_level(child, defs, exports);
                }
            }
            _ => {}
        }
    }
}

fn literal_strings(expr: &Expr) -> Option<Vec<String>> {
    let elts = match expr {
        Expr::List(l) => &l.elts,
        Expr::Tuple(t) => &t.elts,
        _ => return None,
    };
    elts.iter()
        .map(|e| match e {
            Expr::Constant(c) => match &c.value {
                Constant::Str(s) => Some(s.clone()),
                _ => None,
            },
            _ => None,
        })
        .collect()
}

/// Counts of labels removed by [`filter_and_label`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDrops {
    pub dunder_return: usize,
    pub any_or_none: usize,
    pub unparsable: usize,
}

/// Attaches canonical labels and applies the exclusion rules: dunder
/// functions lose their return datapoint, `Any`/`None` annotations and
/// unparsable ones leave the datapoint unlabeled.
pub fn filter_and_label(records: Vec<FunctionRecord>) -> (Vec<FunctionRecord>, LabelDrops) {
    let mut drops = LabelDrops::default();
    let mut label = |raw: &Option<String>| -> Option<CanonicalType> {
        let raw = raw.as_ref()?;
        match normalize_annotation(raw) {
            Ok(t) if t.is_any_or_none() => {
                drops.any_or_none += 1;
                None
            }
            Ok(t) => Some(t),
            Err(e) => {
                log::debug!("{e}");
                drops.unparsable += 1;
                None
            }
        }
    };
    let mut out = Vec::with_capacity(records.len());
    for mut record in records {
        for arg in record.arguments.iter_mut().filter(|a| !a.is_receiver) {
            arg.label = label(&arg.raw_annotation);
        }
        if is_dunder(&record.name) {
            record.emit_return = false;
            record.return_label = None;
            if record.return_annotation.is_some() {
                drops.dunder_return += 1;
            }
        } else {
            record.return_label = label(&record.return_annotation);
        }
        out.push(record);
    }
    (out, drops)
}

/// A `.py` file read from a corpus root.
#[derive(Debug, Clone)]
pub struct SourceFile {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub text: String,
}

pub fn read_corpus(root: &Path) -> Result<Vec<SourceFile>, ExtractError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| ExtractError::Io {
            path: root.display().to_string(),
            source: e.into(),
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().is_none_or(|e| e != "py") {
            continue;
        }
        let rel = path
            .strip_prefix(root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let bytes = std::fs::read(path).map_err(|source| ExtractError::Io {
            path: rel.clone(),
            source,
        })?;
        files.push(SourceFile {
            path: rel,
            text: String::from_utf8_lossy(&bytes).into_owned(),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub files: usize,
    pub parsed_files: usize,
    pub syntax_errors: Vec<String>,
    pub functions: usize,
    pub arguments: usize,
    pub annotated_arguments: usize,
    pub annotated_returns: usize,
    pub labeled_arguments: usize,
    pub labeled_returns: usize,
    pub drops: BTreeMap<String, usize>,
}

pub struct Extraction {
    pub modules: Vec<ParsedModule>,
    pub report: ExtractionReport,
}

/// Parses every file in parallel, labels the functions and merges the
/// results in path order. Files that fail to parse are skipped.
pub fn extract_corpus(files: &[SourceFile]) -> Extraction {
    let results: Vec<_> = files
        .par_iter()
        .map(|f| parse_source(&f.text, &f.path))
        .collect();

    let mut report = ExtractionReport {
        files: files.len(),
        ..Default::default()
    };
    let mut drops = LabelDrops::default();
    let mut modules = Vec::new();
    for result in results {
        match result {
            Ok(mut module) => {
                let (functions, d) = filter_and_label(std::mem::take(&mut module.functions));
                drops.dunder_return += d.dunder_return;
                drops.any_or_none += d.any_or_none;
                drops.unparsable += d.unparsable;
                module.functions = functions;
                modules.push(module);
            }
            Err(ExtractError::Syntax { path, message }) => {
                log::warn!("skipping {path}: {message}");
                report.syntax_errors.push(path);
            }
            Err(e) => log::warn!("{e}"),
        }
    }
    modules.sort_by(|a, b| a.module_path.cmp(&b.module_path));

    report.parsed_files = modules.len();
    for f in modules.iter().flat_map(|m| &m.functions) {
        report.functions += 1;
        let args = f.arguments.iter().filter(|a| !a.is_receiver);
        for a in args {
            report.arguments += 1;
            report.annotated_arguments += usize::from(a.raw_annotation.is_some());
            report.labeled_arguments += usize::from(a.label.is_some());
        }
        report.annotated_returns += usize::from(f.return_annotation.is_some());
        report.labeled_returns += usize::from(f.return_label.is_some());
    }
    report.drops.insert("dunder_return".into(), drops.dunder_return);
    report.drops.insert("any_or_none".into(), drops.any_or_none);
    report.drops.insert("unparsable_annotation".into(), drops.unparsable);
    Extraction { modules, report }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SNIPPET_B: &str = r#"
from parsimonious.grammar import Grammar

class SqlVisitor(NodeVisitor):
    def __init__(self, grammar: Grammar) -> None:
        self.grammar = grammar
        self.parsed = grammar.parse("select 1")

    def __len__(self) -> int:
        return len(self.parsed)
"#;

    #[test]
    fn method_record_from_class() {
        let recs = parse_module(SNIPPET_B, "sql.py").unwrap();
        assert_eq!(recs.len(), 2);
        let init = &recs[0];
        assert_eq!(init.qualified_name, "SqlVisitor.__init__");
        assert_eq!(init.name_tokens, ["init"]);
        assert_eq!(init.arguments.len(), 2);
        assert!(init.arguments[0].is_receiver);
        let grammar = &init.arguments[1];
        assert_eq!(grammar.name, "grammar");
        assert_eq!(grammar.raw_annotation.as_deref(), Some("Grammar"));
        assert_eq!(init.return_annotation.as_deref(), Some("None"));
        assert_eq!(init.source_span, (5, 7));
        assert_eq!(
            grammar.usage_sequences,
            vec![
                vec!["self", ".", "grammar", "=", "grammar"],
                vec!["self", ".", "parsed", "=", "grammar", ".", "parse", "(", "<str>", ")"],
            ]
        );
    }

    #[test]
    fn empty_file() {
        assert!(parse_module("", "e.py").unwrap().is_empty());
    }

    #[test]
    fn unannotated_two_args() {
        let recs = parse_module("def f(a, b):\n    return a + b\n", "f.py").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].arguments.len(), 2);
        assert!(recs[0].arguments.iter().all(|a| a.raw_annotation.is_none() && !a.is_receiver));
        assert_eq!(recs[0].return_exprs, vec![vec!["a", "+", "b"]]);
    }

    #[test]
    fn nested_functions_and_lambdas() {
        let src = "def outer(x):\n    g = lambda y: y\n    def inner(z: int):\n        return z\n    return inner(x)\n";
        let recs = parse_module(src, "n.py").unwrap();
        let names: Vec<_> = recs.iter().map(|r| r.qualified_name.as_str()).collect();
        assert_eq!(names, ["outer", "outer.inner"]);
        // the nested body is not part of the outer function's context
        assert_eq!(recs[0].return_exprs, vec![vec!["inner", "(", "x", ")"]]);
    }

    #[test]
    fn usages_match_whole_identifiers_only() {
        let src = "def f(n, obj):\n    nn = 1\n    obj.n = 2\n    if n > 0:\n        print(n)\n    return nn\n";
        let recs = parse_module(src, "u.py").unwrap();
        let n = recs[0].argument("n").unwrap();
        assert_eq!(
            n.usage_sequences,
            vec![vec!["if", "n", ">", "0"], vec!["print", "(", "n", ")"]]
        );
        for seq in &n.usage_sequences {
            assert!(seq.iter().any(|t| t == "n"));
        }
    }

    #[test]
    fn bare_return_has_no_expression() {
        let recs = parse_module("def f():\n    return\n", "r.py").unwrap();
        assert!(recs[0].return_exprs.is_empty());
    }

    #[test]
    fn syntax_error_is_reported() {
        assert!(matches!(parse_module("def f(:\n", "bad.py"), Err(ExtractError::Syntax { .. })));
    }

    #[test]
    fn module_level_facts() {
        let src = "import numpy as np\nfrom .base import *\nfrom typing import List, NewType\n__all__ = ['Grammar', 'Vec']\nclass Grammar: pass\nVec = List[float]\nUserId = NewType('UserId', int)\nx = 3\ndef f(a: np.ndarray) -> 'Grammar': pass\n";
        let m = parse_source(src, "pkg/mod.py").unwrap();
        assert_eq!(m.type_definitions, ["Grammar", "UserId", "Vec"]);
        assert_eq!(m.exports.as_deref(), Some(&["Grammar".to_string(), "Vec".to_string()][..]));
        assert_eq!(m.annotation_refs, ["np.ndarray"]);
        assert_eq!(
            m.imports[1],
            ImportStmt::From { module: Some("base".into()), level: 1, names: vec![("*".into(), None)] }
        );
    }

    #[test]
    fn labels_and_exclusions() {
        let src = "class A:\n    def __len__(self) -> int:\n        return 0\n    def __init__(self, x: Any, y: int) -> None: pass\ndef foo(x: int) -> Text: pass\ndef bad(x: 'List[') -> None: pass\n";
        let (recs, drops) = filter_and_label(parse_module(src, "a.py").unwrap());
        assert!(!recs[0].emit_return && recs[0].return_label.is_none());
        assert!(recs[1].arguments[1].label.is_none());
        assert_eq!(recs[1].arguments[2].label.as_ref().unwrap().canonical, "int");
        assert!(!recs[1].emit_return);
        assert_eq!(recs[2].arguments[0].label.as_ref().unwrap().canonical, "int");
        assert_eq!(recs[2].return_label.as_ref().unwrap().canonical, "str");
        assert!(recs[2].emit_return);
        assert_eq!(drops, LabelDrops { dunder_return: 2, any_or_none: 2, unparsable: 1 });
    }
}
