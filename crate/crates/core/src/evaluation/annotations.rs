//! Tab-separated annotation records:
//!
//! ```text
//! IMG     <path> <class_id>
//! KP      <path> <part_id> <x> <y> <0|1>
//! BOX     <path> <x0> <y0> <x1> <y1>
//! ATTR    <class_id> <attr_id>
//! A2P     <attr_id> <part_id>
//! TAXNODE <node_id> <parent_id|-> <hom|het>
//! TAXLEAF <node_id> <class_id>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::taxonomy::Taxonomy;
use super::{BBox, ClassAttributes, Keypoint};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    /// `(path, class)` in file order.
    pub images: Vec<(String, usize)>,
    pub keypoints: BTreeMap<String, Vec<Keypoint>>,
    pub boxes: BTreeMap<String, Vec<BBox>>,
    pub attrs: ClassAttributes,
    pub taxonomy: Taxonomy,
}

pub fn write_annotations(a: &Annotations) -> String {
    let mut out = String::new();
    for (path, class) in &a.images {
        writeln!(out, "IMG\t{path}\t{class}").unwrap();
        for k in a.keypoints.get(path).into_iter().flatten() {
            writeln!(out, "KP\t{path}\t{}\t{}\t{}\t{}", k.part, k.x, k.y, u8::from(k.visible)).unwrap();
        }
        for b in a.boxes.get(path).into_iter().flatten() {
            writeln!(out, "BOX\t{path}\t{}\t{}\t{}\t{}", b.x0, b.y0, b.x1, b.y1).unwrap();
        }
    }
    for (class, set) in &a.attrs.sets {
        for attr in set {
            writeln!(out, "ATTR\t{class}\t{attr}").unwrap();
        }
    }
    for (attr, part) in &a.attrs.attr_part {
        writeln!(out, "A2P\t{attr}\t{part}").unwrap();
    }
    for (id, n) in &a.taxonomy.nodes {
        let parent = n.parent.as_deref().unwrap_or("-");
        let flag = if n.hom { "hom" } else { "het" };
        writeln!(out, "TAXNODE\t{id}\t{parent}\t{flag}").unwrap();
    }
    for (class, node) in &a.taxonomy.leaves {
        writeln!(out, "TAXLEAF\t{node}\t{class}").unwrap();
    }
    out
}

pub fn read_annotations(text: &str, source: &str) -> Result<Annotations> {
    let mut a = Annotations::default();
    let mut known = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').collect();
        let arity = |n: usize| -> Result<()> {
            if f.len() != n {
                return Err(err(format!("{} record needs {} fields, found {}", f[0], n - 1, f.len() - 1)));
            }
            Ok(())
        };
        fn num<T: FromStr>(s: &str, what: &str, err: &dyn Fn(String) -> Error) -> Result<T> {
            s.parse().map_err(|_| err(format!("invalid {what} '{s}'")))
        }
        match f[0] {
            "IMG" => {
                arity(3)?;
                let class = num(f[2], "class id", &err)?;
                if known.insert(f[1].to_string(), class).is_some() {
                    return Err(err(format!("duplicate image {}", f[1])));
                }
                a.images.push((f[1].to_string(), class));
                a.attrs.sets.entry(class).or_default();
            }
            "KP" => {
                arity(6)?;
                if !known.contains_key(f[1]) {
                    return Err(err(format!("keypoint for undeclared image {}", f[1])));
                }
                let visible = match f[5] {
                    "0" => false,
                    "1" => true,
                    other => return Err(err(format!("visibility must be 0 or 1, got '{other}'"))),
                };
                let k = Keypoint {
                    part: num(f[2], "part id", &err)?,
                    x: num(f[3], "x", &err)?,
                    y: num(f[4], "y", &err)?,
                    visible,
                };
                if !(k.x.is_finite() && k.y.is_finite()) {
                    return Err(err("keypoint coordinates must be finite".into()));
                }
                a.keypoints.entry(f[1].to_string()).or_default().push(k);
            }
            "BOX" => {
                arity(6)?;
                if !known.contains_key(f[1]) {
                    return Err(err(format!("box for undeclared image {}", f[1])));
                }
                let c: Vec<usize> = f[2..]
                    .iter()
                    .map(|s| num(s, "box coordinate", &err))
                    .collect::<Result<_>>()?;
                let b = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string()))?;
                a.boxes.entry(f[1].to_string()).or_default().push(b);
            }
            "ATTR" => {
                arity(3)?;
                let class = num(f[1], "class id", &err)?;
                let attr = num(f[2], "attribute id", &err)?;
                a.attrs.sets.entry(class).or_default().insert(attr);
            }
            "A2P" => {
                arity(3)?;
                let attr = num(f[1], "attribute id", &err)?;
                let part = num(f[2], "part id", &err)?;
                if a.attrs.attr_part.insert(attr, part).is_some() {
                    return Err(err(format!("attribute {attr} mapped twice")));
                }
            }
            "TAXNODE" => {
                arity(4)?;
                let parent = (f[2] != "-").then_some(f[2]);
                let hom = match f[3] {
                    "hom" => true,
                    "het" => false,
                    other => return Err(err(format!("flag must be hom or het, got '{other}'"))),
                };
                a.taxonomy.add_node(f[1], parent, hom);
            }
            "TAXLEAF" => {
                arity(3)?;
                a.taxonomy.add_leaf(f[1], num(f[2], "class id", &err)?);
            }
            other => return Err(err(format!("unknown record type '{other}'"))),
        }
    }
    for set in a.attrs.sets.values() {
        for attr in set {
            if !a.attrs.attr_part.contains_key(attr) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: 0,
                    msg: format!("attribute {attr} has no A2P record"),
                });
            }
        }
    }
    a.taxonomy.validate()?;
    Ok(a)
}
