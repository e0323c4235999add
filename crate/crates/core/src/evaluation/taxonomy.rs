use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaxNode {
    pub parent: Option<String>,
    /// Whether all classes below share one part structure.
    pub hom: bool,
}

/// A rooted class tree whose leaves are attached to class ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Taxonomy {
    pub nodes: BTreeMap<String, TaxNode>,
    /// Class id to the node standing for it.
    pub leaves: BTreeMap<usize, String>,
}

impl Taxonomy {
    pub fn add_node(&mut self, id: &str, parent: Option<&str>, hom: bool) {
        self.nodes.insert(
            id.to_string(),
            TaxNode {
                parent: parent.map(str::to_string),
                hom,
            },
        );
    }

    pub fn add_leaf(&mut self, node: &str, class_id: usize) {
        self.leaves.insert(class_id, node.to_string());
    }

    fn children(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (id, n) in &self.nodes {
            if let Some(p) = &n.parent {
                out.entry(p.as_str()).or_default().push(id.as_str());
            }
        }
        out
    }

    /// Checks for a single root, known parents, and leaves reachable from it.
    pub fn validate(&self) -> Result<()> {
        let roots: Vec<&String> = self
            .nodes
            .iter()
            .filter(|(_, n)| n.parent.is_none())
            .map(|(k, _)| k)
            .collect();
        if self.nodes.is_empty() {
            return if self.leaves.is_empty() {
                Ok(())
            } else {
                Err(Error::Consistency("taxonomy has leaves but no nodes".into()))
            };
        }
        if roots.len() != 1 {
            return Err(Error::Consistency(format!("taxonomy needs one root, found {}", roots.len())));
        }
        for (id, n) in &self.nodes {
            if let Some(p) = &n.parent {
                if !self.nodes.contains_key(p) {
                    return Err(Error::Consistency(format!("node {id} has unknown parent {p}")));
                }
            }
        }
        for (class, node) in &self.leaves {
            let mut cur = Some(node.as_str());
            let mut steps = 0;
            while let Some(c) = cur {
                let n = self
                    .nodes
                    .get(c)
                    .ok_or_else(|| Error::Consistency(format!("class {class} attached to unknown node {c}")))?;
                cur = n.parent.as_deref();
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(Error::Consistency("taxonomy contains a cycle".into()));
                }
            }
        }
        Ok(())
    }

    fn root(&self) -> Option<&str> {
        self.nodes
            .iter()
            .find(|(_, n)| n.parent.is_none())
            .map(|(k, _)| k.as_str())
    }

    /// Class ids attached at or below `node`.
    pub fn classes_under(&self, node: &str) -> BTreeSet<usize> {
        let children = self.children();
        let mut under = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            under.insert(n);
            if let Some(cs) = children.get(n) {
                stack.extend(cs.iter().copied());
            }
        }
        self.leaves
            .iter()
            .filter(|(_, n)| under.contains(n.as_str()))
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Classes under the shallowest `hom` node on the path to `class_id`,
/// found breadth-first from the root; `{class_id}` if there is none.
pub fn superset_from_taxonomy(tax: &Taxonomy, class_id: usize) -> Result<BTreeSet<usize>> {
    let leaf = tax
        .leaves
        .get(&class_id)
        .ok_or_else(|| Error::Argument(format!("class {class_id} is not a taxonomy leaf")))?;
    let children = tax.children();
    let mut queue: VecDeque<&str> = tax.root().into_iter().collect();
    while let Some(node) = queue.pop_front() {
        if tax.nodes[node].hom {
            let members = tax.classes_under(node);
            if members.contains(&class_id) {
                return Ok(members);
            }
            // Descendants of a hom node share its superset.
            continue;
        }
        if node == leaf.as_str() {
            break;
        }
        if let Some(cs) = children.get(node) {
            queue.extend(cs.iter().copied());
        }
    }
    Ok(BTreeSet::from([class_id]))
}
