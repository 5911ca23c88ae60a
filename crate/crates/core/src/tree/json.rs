//! Tree JSON format (`"tree_schema": 1`) and the canonical hash.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{ArchitectureTree, DerivationNode, Head};
use crate::grammar::{Nonterminal, Symbol};
use crate::shape::{Mode, ShapeState};
use crate::terminal::{Terminal, TerminalError};

pub const TREE_SCHEMA: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TreeFormatError {
    #[error("parse error at {path} (line {line}, column {column}): {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("unsupported schema: tree_schema {found} (expected {TREE_SCHEMA})")]
    UnsupportedSchema { found: u64 },
    #[error("missing tree_schema field")]
    MissingSchema,
    #[error("node {node_id}: {source}")]
    Terminal {
        node_id: usize,
        #[source]
        source: TerminalError,
    },
    #[error("node {node_id}: {message}")]
    Node { node_id: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct InputRepr {
    shape: Vec<usize>,
    mode: Mode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRepr {
    node_id: usize,
    symbol: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rule_index: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    hyperparams: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<NodeRepr>,
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    tree_schema: u32,
    input: InputRepr,
    head: Head,
    root: NodeRepr,
}

#[derive(Deserialize)]
struct SchemaProbe {
    tree_schema: Option<u64>,
}

fn to_repr(n: &DerivationNode) -> NodeRepr {
    let (symbol, hyperparams) = match &n.symbol {
        Symbol::N(nt) => (nt.name().to_string(), BTreeMap::new()),
        Symbol::T(t) => (t.name().to_string(), t.hyperparams().into_iter().map(|(k, v)| (k.to_string(), v)).collect()),
    };
    NodeRepr {
        node_id: n.node_id,
        symbol,
        rule_index: n.rule_index,
        hyperparams,
        children: n.children.iter().map(to_repr).collect(),
    }
}

fn from_repr(r: NodeRepr) -> Result<DerivationNode, TreeFormatError> {
    let symbol = match Nonterminal::from_name(&r.symbol) {
        Some(nt) => {
            if !r.hyperparams.is_empty() {
                return Err(TreeFormatError::Node {
                    node_id: r.node_id,
                    message: format!("nonterminal {nt} carries hyperparameters"),
                });
            }
            Symbol::N(nt)
        }
        None => Symbol::T(
            Terminal::from_parts(&r.symbol, &r.hyperparams)
                .map_err(|source| TreeFormatError::Terminal { node_id: r.node_id, source })?,
        ),
    };
    if matches!(symbol, Symbol::T(_)) && !r.children.is_empty() {
        return Err(TreeFormatError::Node { node_id: r.node_id, message: "terminal with children".into() });
    }
    let children = r.children.into_iter().map(from_repr).collect::<Result<Vec<_>, _>>()?;
    Ok(DerivationNode { node_id: r.node_id, symbol, rule_index: r.rule_index, children, in_state: None, out_state: None })
}

fn parse_error(path: String, e: serde_json::Error) -> TreeFormatError {
    TreeFormatError::Parse { path, line: e.line(), column: e.column(), message: e.to_string() }
}

fn deserializer(text: &str) -> serde_json::Deserializer<serde_json::de::StrRead<'_>> {
    let mut de = serde_json::Deserializer::from_str(text);
    de.disable_recursion_limit();
    de
}

impl ArchitectureTree {
    fn repr(&self) -> TreeRepr {
        TreeRepr {
            tree_schema: TREE_SCHEMA,
            input: InputRepr { shape: self.input.shape.clone(), mode: self.input.mode },
            head: self.head.clone(),
            root: to_repr(&self.root),
        }
    }

    /// Compact canonical JSON; equal trees give equal bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.repr()).expect("tree serialises")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.repr()).expect("tree serialises")
    }

    /// Parses a tree file. Shape annotations are not restored.
    pub fn from_json(text: &str) -> Result<ArchitectureTree, TreeFormatError> {
        let mut de = deserializer(text);
        let probe: SchemaProbe =
            serde_path_to_error::deserialize(&mut de).map_err(|e| parse_error(e.path().to_string(), e.into_inner()))?;
        match probe.tree_schema {
            None => return Err(TreeFormatError::MissingSchema),
            Some(v) if v != TREE_SCHEMA as u64 => return Err(TreeFormatError::UnsupportedSchema { found: v }),
            _ => {}
        }
        let mut de = deserializer(text);
        let repr: TreeRepr =
            serde_path_to_error::deserialize(&mut de).map_err(|e| parse_error(e.path().to_string(), e.into_inner()))?;
        de.end().map_err(|e| parse_error(String::from("."), e))?;
        let root = from_repr(repr.root)?;
        let input = ShapeState { shape: repr.input.shape, mode: repr.input.mode, branching_factor: 1, pending_im: None };
        Ok(ArchitectureTree { root, input, head: repr.head })
    }

    /// Hex sha256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Blueprint;

    fn small() -> ArchitectureTree {
        use crate::grammar::Nonterminal::*;
        let root = DerivationNode::internal(
            S,
            vec![
                DerivationNode::internal(M, vec![DerivationNode::pre(C, Terminal::Linear { d: 32 })]),
                DerivationNode::internal(M, vec![DerivationNode::pre(C, Terminal::Relu)]),
            ],
        );
        ArchitectureTree::new(
            root,
            &Blueprint { input: ShapeState::col(8, 4), head: Head::Classification { classes: 3 } },
        )
    }

    #[test]
    fn roundtrip() {
        let t = small();
        let back = ArchitectureTree::from_json(&t.to_json_pretty()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.hash(), t.hash());
    }

    #[test]
    fn unknown_terminal_is_named() {
        let text = small().to_json().replace("\"relu\"", "\"swish\"");
        let err = ArchitectureTree::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("swish"), "{err}");
    }

    #[test]
    fn schema_zero_rejected() {
        let text = small().to_json().replace("\"tree_schema\":1", "\"tree_schema\":0");
        let err = ArchitectureTree::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("unsupported schema"));
    }

    #[test]
    fn malformed_has_location() {
        let text = small().to_json().replace("\"node_id\":3", "\"node_id\":\"x\"");
        match ArchitectureTree::from_json(&text).unwrap_err() {
            TreeFormatError::Parse { path, .. } => assert!(path.contains("root.children"), "{path}"),
            other => panic!("{other}"),
        }
    }
}
