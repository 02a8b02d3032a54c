//! Import graph over a corpus and the visible-type vocabulary.
//!
//! A type is visible in a module if the module defines it, imports it, or
//! reaches it through the imports of the corpus modules it depends on
//! (transitively). Names are stored fully qualified, so `tf.Tensor` and
//! `torch.Tensor` stay apart once their module aliases are resolved.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::extract::{ImportStmt, ParsedModule};

/// Dotted module name of a corpus-relative path.
pub fn module_id(module_path: &str) -> String {
    let stem = module_path.strip_suffix(".py").unwrap_or(module_path);
    let stem = stem.strip_suffix("/__init__").unwrap_or(stem);
    if stem == "__init__" {
        return String::new();
    }
    stem.replace('/', ".")
}

fn is_package(module_path: &str) -> bool {
    module_path == "__init__.py" || module_path.ends_with("/__init__.py")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportGraph {
    /// `(importing module, fully-qualified imported type)`.
    pub edges: BTreeSet<(String, String)>,
    /// Per module: local name → fully-qualified name.
    pub alias_map: BTreeMap<String, BTreeMap<String, String>>,
    /// Per module: corpus modules it imports from.
    pub dependencies: BTreeMap<String, BTreeSet<String>>,
    /// Per module: its own type definitions, fully qualified.
    pub local_types: BTreeMap<String, BTreeSet<String>>,
    /// Imports that did not resolve to a corpus module, by literal name.
    pub unresolved: BTreeSet<String>,
}

struct ModuleFacts<'a> {
    defs: BTreeSet<&'a str>,
    exports: Vec<&'a str>,
}

pub fn build_import_graph(modules: &[ParsedModule]) -> ImportGraph {
    let mut facts: BTreeMap<String, ModuleFacts<'_>> = BTreeMap::new();
    for m in modules {
        let defs: BTreeSet<&str> = m.type_definitions.iter().map(String::as_str).collect();
        let exports = match &m.exports {
            Some(all) => all.iter().map(String::as_str).collect(),
            None => defs.iter().copied().collect(),
        };
        facts.insert(
            module_id(&m.module_path),
            ModuleFacts {
                defs,
                exports,
            },
        );
    }

    let mut graph = ImportGraph::default();
    for (id, f) in &facts {
        let fq: BTreeSet<String> = f.defs.iter().map(|d| qualify(id, d)).collect();
        graph.local_types.insert(id.clone(), fq);
        graph.alias_map.insert(id.clone(), BTreeMap::new());
        graph.dependencies.insert(id.clone(), BTreeSet::new());
    }

    // Pass 1: bind every imported name; re-exports are followed in pass 2.
    let mut pending: Vec<(String, String)> = Vec::new(); // (module, fq symbol)
    for m in modules {
        let id = module_id(&m.module_path);
        for import in &m.imports {
            match import {
                ImportStmt::Module { module, alias } => {
                    if facts.contains_key(module) {
                        graph.dependencies.get_mut(&id).unwrap().insert(module.clone());
                    } else {
                        graph.unresolved.insert(module.clone());
                    }
                    let aliases = graph.alias_map.get_mut(&id).unwrap();
                    match alias {
                        Some(a) => {
                            aliases.insert(a.clone(), module.clone());
                        }
                        None => {
                            // `import a.b` binds `a`.
                            let head = module.split('.').next().unwrap_or(module);
                            aliases.insert(head.to_string(), head.to_string());
                        }
                    }
                }
                ImportStmt::From { module, level, names } => {
                    let Some(base) = resolve_from_base(&m.module_path, &id, module.as_deref(), *level) else {
                        let literal = format!("{}{}", ".".repeat(*level), module.as_deref().unwrap_or(""));
                        graph.unresolved.insert(literal);
                        continue;
                    };
                    let base_in_corpus = facts.contains_key(&base);
                    if base_in_corpus {
                        graph.dependencies.get_mut(&id).unwrap().insert(base.clone());
                    } else if !names.iter().all(|(n, _)| facts.contains_key(&qualify(&base, n))) {
                        graph.unresolved.insert(base.clone());
                    }
                    for (name, asname) in names {
                        if name == "*" {
                            let Some(target) = facts.get(&base) else { continue };
                            for export in &target.exports {
                                let fq = qualify(&base, export);
                                graph.alias_map.get_mut(&id).unwrap().insert(export.to_string(), fq.clone());
                                pending.push((id.clone(), fq));
                            }
                            continue;
                        }
                        let fq = qualify(&base, name);
                        let local = asname.as_ref().unwrap_or(name).clone();
                        graph.alias_map.get_mut(&id).unwrap().insert(local, fq.clone());
                        if facts.contains_key(&fq) {
                            // `from pkg import submodule`
                            graph.dependencies.get_mut(&id).unwrap().insert(fq);
                        } else {
                            pending.push((id.clone(), fq));
                        }
                    }
                }
            }
        }
    }

    // Pass 2: decide which imported symbols are types, following re-exports.
    for (id, fq) in pending {
        if let Some(target) = resolve_type_symbol(&fq, &facts, &graph) {
            graph.edges.insert((id, target));
        }
    }

    // Dotted annotation references through module aliases (`np.ndarray`).
    for m in modules {
        let id = module_id(&m.module_path);
        for r in &m.annotation_refs {
            let Some((head, rest)) = r.split_once('.') else { continue };
            let Some(bound) = graph.alias_map[&id].get(head) else { continue };
            let fq = format!("{bound}.{rest}");
            let target = resolve_type_symbol(&fq, &facts, &graph).unwrap_or(fq);
            graph.edges.insert((id.clone(), target));
        }
    }
    graph
}

fn qualify(module: &str, name: &str) -> String {
    if module.is_empty() {
        name.to_string()
    } else {
        format!("{module}.{name}")
    }
}

/// Absolute module named by a `from` import, or `None` when a relative
/// import climbs above the corpus root.
fn resolve_from_base(module_path: &str, id: &str, module: Option<&str>, level: usize) -> Option<String> {
    if level == 0 {
        return module.map(str::to_string);
    }
    let mut package: Vec<&str> = if id.is_empty() { Vec::new() } else { id.split('.').collect() };
    if !is_package(module_path) {
        package.pop()?;
    }
    for _ in 1..level {
        package.pop()?;
    }
    let mut parts: Vec<&str> = package;
    if let Some(m) = module {
        parts.extend(m.split('.'));
    }
    Some(parts.join("."))
}

/// The fully-qualified type a symbol denotes, if it is one: a definition
/// in a corpus module (possibly re-exported through imports), or a
/// capitalized name from a module outside the corpus that is neither a
/// typing helper nor an `UPPER_SNAKE` constant.
fn resolve_type_symbol(fq: &str, facts: &BTreeMap<String, ModuleFacts<'_>>, graph: &ImportGraph) -> Option<String> {
    let mut current = fq.to_string();
    let mut seen = BTreeSet::new();
    while seen.insert(current.clone()) {
        let (module, name) = current.rsplit_once('.').unwrap_or(("", current.as_str()));
        match facts.get(module) {
            Some(target) => {
                if target.defs.contains(name) {
                    return Some(current);
                }
                let next = graph.alias_map.get(module).and_then(|a| a.get(name))?;
                current = next.clone();
            }
            None => {
                return looks_like_external_type(module, name).then_some(current);
            }
        }
    }
    None
}

/// Capitalized names in `typing` that build types rather than being one.
const TYPING_HELPERS: [&str; 6] = ["NewType", "TypeVar", "ParamSpec", "TypeVarTuple", "TypeAlias", "TYPE_CHECKING"];

fn looks_like_external_type(module: &str, name: &str) -> bool {
    let capitalized = name.chars().next().is_some_and(char::is_uppercase);
    let constant = name.contains('_') && !name.chars().any(char::is_lowercase);
    let helper = matches!(module, "typing" | "typing_extensions") && TYPING_HELPERS.contains(&name);
    capitalized && !constant && !helper
}

impl ImportGraph {
    /// Outgoing edges of one module.
    pub fn imported_types<'a>(&'a self, module: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.edges
            .range((module.to_string(), String::new())..)
            .take_while(move |(m, _)| m == module)
            .map(|(_, t)| t)
    }

    /// Local definitions plus the imported types of the module and of
    /// every corpus module reachable through its imports.
    pub fn visible_types_for(&self, module: &str) -> BTreeSet<String> {
        let mut visible: BTreeSet<String> = self.local_types.get(module).cloned().unwrap_or_default();
        let mut seen = BTreeSet::from([module.to_string()]);
        let mut queue = VecDeque::from([module.to_string()]);
        while let Some(m) = queue.pop_front() {
            visible.extend(self.imported_types(&m).cloned());
            for dep in self.dependencies.get(&m).into_iter().flatten() {
                if seen.insert(dep.clone()) {
                    queue.push_back(dep.clone());
                }
            }
        }
        visible
    }

    pub fn all_modules(&self) -> impl Iterator<Item = &String> {
        self.local_types.keys()
    }

    /// Visible sets for every module in the graph.
    pub fn visible_sets(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.all_modules()
            .map(|m| (m.clone(), self.visible_types_for(m)))
            .collect()
    }

    /// Resolves a dotted name as written in `module` to its fully-qualified
    /// form through the module's import aliases.
    pub fn resolve_name(&self, module: &str, dotted: &str) -> String {
        let (head, rest) = dotted.split_once('.').map_or((dotted, None), |(h, r)| (h, Some(r)));
        match self.alias_map.get(module).and_then(|a| a.get(head)) {
            Some(bound) => match rest {
                Some(rest) => format!("{bound}.{rest}"),
                None => bound.clone(),
            },
            None => dotted.to_string(),
        }
    }
}

/// Fixed-size vocabulary of the most frequent visible types. Slot `T` of
/// every mask is the `other` type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleTypeVocab {
    pub entries: Vec<String>,
    pub size: usize,
}

impl VisibleTypeVocab {
    /// Ranks types by the number of modules they are visible in, ties
    /// broken lexicographically, and keeps the first `size`. Corpora with
    /// fewer distinct types leave trailing slots empty.
    pub fn build<'a>(visible_sets: impl IntoIterator<Item = &'a BTreeSet<String>>, size: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for set in visible_sets {
            for t in set {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self {
            entries: ranked.into_iter().take(size).map(|(t, _)| t.to_string()).collect(),
            size,
        }
    }

    /// Mask length: `T` type slots plus `other`.
    pub fn mask_len(&self) -> usize {
        self.size + 1
    }

    pub fn other_index(&self) -> usize {
        self.size
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e == name)
    }

    /// Set bit indices of [`mask_vector`], ascending.
    pub fn mask_indices<'a>(&self, types: impl IntoIterator<Item = &'a String>) -> Vec<usize> {
        mask_vector(types, self)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }
}

/// Binary visible-type vector of length `T + 1`. The `other` slot is set
/// when any input type is outside the vocabulary, or when the input is
/// empty.
pub fn mask_vector<'a>(types: impl IntoIterator<Item = &'a String>, vocab: &VisibleTypeVocab) -> Vec<u8> {
    let mut mask = vec![0u8; vocab.mask_len()];
    let mut empty = true;
    for t in types {
        empty = false;
        match vocab.index_of(t) {
            Some(i) => mask[i] = 1,
            None => mask[vocab.other_index()] = 1,
        }
    }
    if empty {
        mask[vocab.other_index()] = 1;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::parse_source;

    fn graph_of(files: &[(&str, &str)]) -> ImportGraph {
        let modules: Vec<_> = files.iter().map(|(p, s)| parse_source(s, p).unwrap()).collect();
        build_import_graph(&modules)
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn module_ids() {
        assert_eq!(module_id("a/b/c.py"), "a.b.c");
        assert_eq!(module_id("a/__init__.py"), "a");
        assert_eq!(module_id("top.py"), "top");
    }

    #[test]
    fn direct_edges() {
        let g = graph_of(&[
            ("A.py", "from B import Type\nfrom C.D import E\n"),
            ("B.py", "class Type: pass\n"),
        ]);
        let a: Vec<_> = g.imported_types("A").cloned().collect();
        assert_eq!(a, ["B.Type", "C.D.E"]);
        assert_eq!(g.visible_types_for("A"), set(&["B.Type", "C.D.E"]));
        assert!(g.unresolved.contains("C.D"));
    }

    #[test]
    fn no_imports_no_edges() {
        let g = graph_of(&[("solo.py", "def f(x): return x\n")]);
        assert_eq!(g.imported_types("solo").count(), 0);
        assert!(g.visible_types_for("solo").is_empty());
    }

    #[test]
    fn local_definitions_are_visible() {
        let g = graph_of(&[("pkg/gram.py", "class Grammar: pass\n")]);
        assert_eq!(g.visible_types_for("pkg.gram"), set(&["pkg.gram.Grammar"]));
    }

    #[test]
    fn module_alias_resolution() {
        let g = graph_of(&[(
            "m.py",
            "import numpy as np\nimport tensorflow as tf\nimport torch\ndef f(a: np.array, b: tf.Tensor, c: torch.Tensor): pass\n",
        )]);
        assert_eq!(
            g.visible_types_for("m"),
            set(&["numpy.array", "tensorflow.Tensor", "torch.Tensor"])
        );
        assert_eq!(g.resolve_name("m", "np.array"), "numpy.array");
    }

    #[test]
    fn typing_helpers_and_constants_are_not_types() {
        let g = graph_of(&[(
            "m.py",
            "from typing import NewType, TypeVar, TYPE_CHECKING, Mapping, IO\nfrom settings_pkg import MAX_SIZE, Config\n",
        )]);
        assert_eq!(
            g.visible_types_for("m"),
            set(&["settings_pkg.Config", "typing.IO", "typing.Mapping"])
        );
    }

    #[test]
    fn two_hop_wildcard_chain() {
        let g = graph_of(&[
            ("A.py", "from B import *\n"),
            ("B.py", "from C import T\nclass Local: pass\n"),
            ("C.py", "class T: pass\n"),
        ]);
        assert_eq!(g.visible_types_for("A"), set(&["B.Local", "C.T"]));
    }

    #[test]
    fn relative_imports_and_reexports() {
        let g = graph_of(&[
            ("pkg/__init__.py", "from .models import User\n"),
            ("pkg/models.py", "class User: pass\n"),
            ("pkg/api.py", "from . import User as U\nfrom ...outside import X\n"),
        ]);
        assert_eq!(g.visible_types_for("pkg.api"), set(&["pkg.models.User"]));
        assert!(g.unresolved.contains("...outside"));
    }

    #[test]
    fn aliases_of_one_symbol_agree() {
        let g = graph_of(&[
            ("a.py", "from b import K as K1\nfrom b import K as K2\n"),
            ("b.py", "class K: pass\n"),
        ]);
        assert_eq!(g.resolve_name("a", "K1"), g.resolve_name("a", "K2"));
    }

    #[test]
    fn cycles_terminate() {
        let g = graph_of(&[
            ("a.py", "from b import *\nclass A: pass\n"),
            ("b.py", "from a import *\nclass B: pass\n"),
        ]);
        assert_eq!(g.visible_types_for("a"), set(&["a.A", "b.B"]));
    }

    #[test]
    fn vocab_order_and_masks() {
        let sets = vec![set(&["x.B", "x.A"]), set(&["x.B"]), set(&["x.C"])];
        let vocab = VisibleTypeVocab::build(&sets, 2);
        assert_eq!(vocab.entries, ["x.B", "x.A"]);
        assert_eq!(mask_vector(&set(&["x.A"]), &vocab), [0, 1, 0]);
        assert_eq!(mask_vector(&set(&["x.A", "x.C"]), &vocab), [0, 1, 1]);
        assert_eq!(mask_vector(&BTreeSet::new(), &vocab), [0, 0, 1]);
    }
}
