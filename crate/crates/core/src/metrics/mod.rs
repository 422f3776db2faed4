//! Task metrics: field trees, their token serialization, tree edit
//! distance, N-TED accuracy, and field-level F1.
//!
//! The parser is deliberately total: a half-trained or pruned model emits
//! arbitrary token soup, and scoring it requires a tree, not an error.
//! Malformed input is repaired — unmatched closes dropped, unclosed opens
//! closed at the end, stray text collected per line under `_orphan` nodes.

mod ted;

pub use ted::tree_edit_distance;

use crate::tokenizer::{TokenKind, Tokenizer};
use crate::{Error, Result};

/// Label of the implicit root every tree shares.
pub const ROOT_LABEL: &str = "_root";
/// Label wrapping stray text that appeared outside any field.
pub const ORPHAN_LABEL: &str = "_orphan";

#[derive(Debug, Clone)]
struct TreeNode {
    label: String,
    children: Vec<usize>,
}

/// Rooted ordered labeled tree. Leaves carry value text as their label;
/// interior nodes carry field keys. A lone root is the empty prediction.
#[derive(Debug, Clone)]
pub struct FieldTree {
    nodes: Vec<TreeNode>,
}

impl Default for FieldTree {
    fn default() -> Self {
        Self::new()
    }
}

impl FieldTree {
    pub fn new() -> Self {
        Self { nodes: vec![TreeNode { label: ROOT_LABEL.to_string(), children: Vec::new() }] }
    }

    pub const ROOT: usize = 0;

    pub fn add_child(&mut self, parent: usize, label: impl Into<String>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode { label: label.into(), children: Vec::new() });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.nodes[id].label
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Convenience for the common two-level shape: root → key → value.
    pub fn from_fields<'a>(fields: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut tree = Self::new();
        for (key, value) in fields {
            let k = tree.add_child(Self::ROOT, key);
            tree.add_child(k, value);
        }
        tree
    }

    fn subtree_eq(&self, a: usize, other: &Self, b: usize) -> bool {
        if self.nodes[a].label != other.nodes[b].label
            || self.nodes[a].children.len() != other.nodes[b].children.len()
        {
            return false;
        }
        self.nodes[a]
            .children
            .iter()
            .zip(&other.nodes[b].children)
            .all(|(&ca, &cb)| self.subtree_eq(ca, other, cb))
    }
}

impl PartialEq for FieldTree {
    /// Structural equality from the root — node ids are an implementation
    /// detail and two equal trees may have been built in different orders.
    fn eq(&self, other: &Self) -> bool {
        self.subtree_eq(Self::ROOT, other, Self::ROOT)
    }
}

impl Eq for FieldTree {}

/// Depth-first serialization: `<s_key>` children `</s_key>` for interior
/// nodes, character tokens for leaves; the root itself emits nothing.
pub fn serialize_tree(tree: &FieldTree, tok: &Tokenizer) -> Result<Vec<usize>> {
    fn emit(tree: &FieldTree, node: usize, tok: &Tokenizer, out: &mut Vec<usize>) -> Result<()> {
        for &child in tree.children(node) {
            if tree.is_leaf(child) {
                out.extend(tok.encode_text(tree.label(child))?);
            } else {
                out.push(tok.open_id(tree.label(child))?);
                emit(tree, child, tok, out)?;
                out.push(tok.close_id(tree.label(child))?);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    emit(tree, FieldTree::ROOT, tok, &mut out)?;
    Ok(out)
}

/// Total parser: always returns a tree, repairing malformed input.
///
/// Repair rules: a close token pops only the matching open (otherwise it is
/// dropped); opens still unclosed at the end close themselves; text inside a
/// field becomes one leaf per uninterrupted run; text at the root is split
/// at newlines, each line wrapped in an `_orphan` node. Special tokens and
/// out-of-vocabulary ids are invisible.
pub fn parse_token_sequence(tokens: &[usize], tok: &Tokenizer) -> FieldTree {
    let mut tree = FieldTree::new();
    let mut stack: Vec<(usize, usize)> = Vec::new(); // (node id, key index)
    let mut run = String::new();

    fn flush(tree: &mut FieldTree, stack: &[(usize, usize)], run: &mut String) {
        if run.is_empty() {
            return;
        }
        if let Some(&(top, _)) = stack.last() {
            tree.add_child(top, run.as_str());
        } else {
            for line in run.split('\n').filter(|l| !l.is_empty()) {
                let orphan = tree.add_child(FieldTree::ROOT, ORPHAN_LABEL);
                tree.add_child(orphan, line);
            }
        }
        run.clear();
    }

    for &id in tokens {
        match tok.kind(id) {
            Ok(TokenKind::Open(k)) => {
                flush(&mut tree, &stack, &mut run);
                let parent = stack.last().map_or(FieldTree::ROOT, |&(n, _)| n);
                let node = tree.add_child(parent, crate::tokenizer::FIELD_KEYS[k]);
                stack.push((node, k));
            }
            Ok(TokenKind::Close(k)) => {
                if stack.last().is_some_and(|&(_, open_k)| open_k == k) {
                    flush(&mut tree, &stack, &mut run);
                    stack.pop();
                }
                // Otherwise: unmatched close, dropped as if never emitted.
            }
            Ok(TokenKind::Char(c)) => run.push(c),
            Ok(TokenKind::Newline) => run.push('\n'),
            Ok(TokenKind::Pad | TokenKind::Bos | TokenKind::Eos) | Err(_) => {}
        }
    }
    flush(&mut tree, &stack, &mut run);
    tree
}

/// N-TED accuracy: 1 − TED/max(|pred|, |gold|), clamped into [0, 1].
pub fn nted_accuracy(pred: &FieldTree, gold: &FieldTree) -> f64 {
    let ted = tree_edit_distance(pred, gold) as f64;
    let denom = pred.node_count().max(gold.node_count()) as f64;
    (1.0 - ted / denom).clamp(0.0, 1.0)
}

/// Multiset of (key-path, value) pairs read off a tree's leaves. The path
/// joins interior labels from just below the root down to the leaf's
/// parent with '.'.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSet {
    pairs: Vec<(String, String)>,
}

impl FieldSet {
    pub fn from_tree(tree: &FieldTree) -> Self {
        fn walk(tree: &FieldTree, node: usize, path: &mut Vec<String>, out: &mut Vec<(String, String)>) {
            for &child in tree.children(node) {
                if tree.is_leaf(child) {
                    out.push((path.join("."), tree.label(child).to_string()));
                } else {
                    path.push(tree.label(child).to_string());
                    walk(tree, child, path, out);
                    path.pop();
                }
            }
        }
        let mut pairs = Vec::new();
        walk(tree, FieldTree::ROOT, &mut Vec::new(), &mut pairs);
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact multiset matching of (key-path, value) pairs: each gold pair can
/// be consumed by at most one prediction.
pub fn field_f1(pred: &FieldSet, gold: &FieldSet) -> F1Scores {
    if pred.is_empty() && gold.is_empty() {
        return F1Scores { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let mut gold_counts: std::collections::BTreeMap<&(String, String), usize> =
        std::collections::BTreeMap::new();
    for pair in &gold.pairs {
        *gold_counts.entry(pair).or_default() += 1;
    }
    let mut tp = 0usize;
    for pair in &pred.pairs {
        if let Some(count) = gold_counts.get_mut(pair) {
            if *count > 0 {
                *count -= 1;
                tp += 1;
            }
        }
    }
    let precision = if pred.is_empty() { 0.0 } else { tp as f64 / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp as f64 / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Scores { precision, recall, f1 }
}

/// Guard used by serializers: interior labels must be real field keys.
pub fn check_label(label: &str, tok: &Tokenizer) -> Result<()> {
    tok.open_id(label).map(|_| ()).map_err(|_| {
        Error::Contract(format!("label {label:?} is not a serializable field key"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok() -> Tokenizer {
        Tokenizer::new()
    }

    #[test]
    fn single_field_serializes_to_delimited_chars() {
        let tree = FieldTree::from_fields([("total", "42")]);
        assert_eq!(tree.node_count(), 3);
        let tokens = serialize_tree(&tree, &tok()).unwrap();
        let t = tok();
        assert_eq!(tokens[0], t.open_id("total").unwrap());
        assert_eq!(tokens[1], t.char_id('4').unwrap());
        assert_eq!(tokens[2], t.char_id('2').unwrap());
        assert_eq!(tokens[3], t.close_id("total").unwrap());
    }

    #[test]
    fn empty_root_serializes_to_nothing_and_parses_back() {
        let tree = FieldTree::new();
        let tokens = serialize_tree(&tree, &tok()).unwrap();
        assert!(tokens.is_empty());
        assert_eq!(parse_token_sequence(&[], &tok()), tree);
    }

    #[test]
    fn unknown_interior_label_is_rejected() {
        let mut tree = FieldTree::new();
        let n = tree.add_child(FieldTree::ROOT, "price");
        tree.add_child(n, "9");
        assert!(serialize_tree(&tree, &tok()).is_err());
    }

    #[test]
    fn unclosed_open_repairs_to_the_field() {
        let t = tok();
        let tokens = vec![t.open_id("total").unwrap(), t.char_id('4').unwrap()];
        let tree = parse_token_sequence(&tokens, &t);
        assert_eq!(tree, FieldTree::from_fields([("total", "4")]));
    }

    #[test]
    fn unmatched_close_is_dropped_without_breaking_the_run() {
        let t = tok();
        let tokens = vec![
            t.char_id('x').unwrap(),
            t.close_id("qty").unwrap(),
            t.char_id('y').unwrap(),
        ];
        let tree = parse_token_sequence(&tokens, &t);
        // Stray text lands under one orphan node: root → _orphan → "xy".
        assert_eq!(tree.node_count(), 3);
        assert_eq!(tree.label(1), ORPHAN_LABEL);
        assert_eq!(tree.label(2), "xy");
    }

    #[test]
    fn mismatched_close_inside_open_field() {
        let t = tok();
        let tokens = vec![
            t.open_id("name").unwrap(),
            t.char_id('a').unwrap(),
            t.close_id("qty").unwrap(), // wrong key: dropped
            t.char_id('b').unwrap(),
        ];
        let tree = parse_token_sequence(&tokens, &t);
        assert_eq!(tree, FieldTree::from_fields([("name", "ab")]));
    }

    #[test]
    fn root_level_text_splits_into_one_orphan_per_line() {
        let t = tok();
        let tokens = t.encode_text("ab\ncd\n").unwrap();
        let tree = parse_token_sequence(&tokens, &t);
        assert_eq!(tree.children(FieldTree::ROOT).len(), 2);
        assert_eq!(tree.node_count(), 5);
        let first = tree.children(FieldTree::ROOT)[0];
        assert_eq!(tree.label(first), ORPHAN_LABEL);
        assert_eq!(tree.label(tree.children(first)[0]), "ab");
    }

    #[test]
    fn specials_and_invalid_ids_are_invisible() {
        let t = tok();
        let mut tokens = vec![crate::tokenizer::BOS];
        tokens.extend(t.encode_text("hi").unwrap());
        tokens.push(9999); // out of vocabulary
        tokens.push(crate::tokenizer::EOS);
        tokens.push(crate::tokenizer::PAD);
        let tree = parse_token_sequence(&tokens, &t);
        assert_eq!(tree.node_count(), 3);
        assert_eq!(tree.label(2), "hi");
    }

    #[test]
    fn nested_fields_round_trip() {
        let mut tree = FieldTree::new();
        let item = tree.add_child(FieldTree::ROOT, "item");
        let name = tree.add_child(item, "name");
        tree.add_child(name, "soap");
        let qty = tree.add_child(item, "qty");
        tree.add_child(qty, "3");
        let total = tree.add_child(FieldTree::ROOT, "total");
        tree.add_child(total, "4.50");
        let t = tok();
        let tokens = serialize_tree(&tree, &t).unwrap();
        assert_eq!(parse_token_sequence(&tokens, &t), tree);
    }

    #[test]
    fn nted_accuracy_limit_cases() {
        let gold = FieldTree::from_fields([("total", "42"), ("qty", "7")]);
        assert_eq!(nted_accuracy(&gold, &gold), 1.0);
        // Lone root vs n+1-node gold: n deletions remain.
        let lone = FieldTree::new();
        let n = (gold.node_count() - 1) as f64;
        let expect = 1.0 - n / (n + 1.0);
        assert!((nted_accuracy(&lone, &gold) - expect).abs() < 1e-12);
    }

    #[test]
    fn field_f1_arithmetic_cases() {
        let gold = FieldSet::from_tree(&FieldTree::from_fields([
            ("addr", "1 elm st"),
            ("date", "2024/01/02"),
            ("qty", "7"),
            ("total", "42"),
        ]));
        let exact = field_f1(&gold, &gold);
        assert_eq!((exact.precision, exact.recall, exact.f1), (1.0, 1.0, 1.0));

        let partial = FieldSet::from_tree(&FieldTree::from_fields([
            ("qty", "7"),
            ("total", "42"),
        ]));
        let scores = field_f1(&partial, &gold);
        assert_eq!(scores.precision, 1.0);
        assert_eq!(scores.recall, 0.5);
        assert!((scores.f1 - 2.0 / 3.0).abs() < 1e-12);

        let disjoint = FieldSet::from_tree(&FieldTree::from_fields([("zip", "99999")]));
        assert_eq!(field_f1(&disjoint, &gold).f1, 0.0);

        let empty = FieldSet::from_tree(&FieldTree::new());
        assert_eq!(field_f1(&empty, &gold).precision, 0.0);
        assert_eq!(field_f1(&empty, &empty).f1, 1.0);
    }

    #[test]
    fn duplicate_gold_pairs_are_consumed_once_each() {
        let gold =
            FieldSet::from_tree(&FieldTree::from_fields([("item", "soap"), ("item", "soap")]));
        let pred = FieldSet::from_tree(&FieldTree::from_fields([("item", "soap")]));
        let scores = field_f1(&pred, &gold);
        assert_eq!(scores.precision, 1.0);
        assert_eq!(scores.recall, 0.5);
    }

    // ---- property tests --------------------------------------------------

    /// Canonical serializable trees: interior nodes are field keys with at
    /// least one child, leaves are non-empty glyph strings, and no two
    /// leaves are adjacent siblings (the parser merges char runs).
    fn canonical_tree() -> impl Strategy<Value = FieldTree> {
        let leaf_text = proptest::collection::vec(0usize..41, 1..6).prop_map(|ids| {
            ids.iter()
                .map(|&i| crate::tokenizer::GLYPHS.as_bytes()[i] as char)
                .collect::<String>()
        });
        // Depth-2 canonical shape: root → key⁺ → (leaf | key → leaf).
        proptest::collection::vec(
            (0usize..10, leaf_text, proptest::option::of(0usize..10)),
            1..5,
        )
        .prop_map(|fields| {
            let mut tree = FieldTree::new();
            for (key, value, nested) in fields {
                let k = tree.add_child(FieldTree::ROOT, crate::tokenizer::FIELD_KEYS[key]);
                match nested {
                    Some(inner) => {
                        let n = tree.add_child(k, crate::tokenizer::FIELD_KEYS[inner]);
                        tree.add_child(n, value);
                    }
                    None => {
                        tree.add_child(k, value);
                    }
                }
            }
            tree
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(tree in canonical_tree()) {
            let t = Tokenizer::new();
            let tokens = serialize_tree(&tree, &t).unwrap();
            prop_assert_eq!(parse_token_sequence(&tokens, &t), tree);
        }

        #[test]
        fn parse_is_total(tokens in proptest::collection::vec(0usize..80, 0..60)) {
            let t = Tokenizer::new();
            let tree = parse_token_sequence(&tokens, &t);
            prop_assert!(tree.node_count() >= 1);
        }

        #[test]
        fn f1_is_order_invariant(
            mut fields in proptest::collection::vec((0usize..10, 0usize..5), 1..6)
        ) {
            let t: Vec<(&str, &str)> = fields
                .iter()
                .map(|&(k, v)| (crate::tokenizer::FIELD_KEYS[k], ["a", "bb", "c7", "d d", "9"][v]))
                .collect();
            let gold = FieldSet::from_tree(&FieldTree::from_fields(t.clone()));
            fields.rotate_left(1);
            let s: Vec<(&str, &str)> = fields
                .iter()
                .map(|&(k, v)| (crate::tokenizer::FIELD_KEYS[k], ["a", "bb", "c7", "d d", "9"][v]))
                .collect();
            let rotated = FieldSet::from_tree(&FieldTree::from_fields(s));
            let f = field_f1(&rotated, &gold);
            prop_assert!((f.f1 - 1.0).abs() < 1e-12);
        }
    }
}
