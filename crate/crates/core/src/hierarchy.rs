//! Multi-granularity class taxonomies and coarse label-map generation by
//! merging fine classes.
//!
//! Levels are ordered coarse → fine. Every level except the finest carries a
//! merge map from the class indices of the next finer level onto its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Built-in three-level face taxonomy (11 → 6 → 3 classes).
pub const HELEN3_HIER: &str = include_str!("../fixtures/helen3.hier");
/// Built-in taxonomy of the synthetic geoscene dataset (8 → 5 → 3 classes).
pub const GEOSCENE_HIER: &str = include_str!("../fixtures/geoscene.hier");

pub const BACKGROUND: u16 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    pub name: String,
    pub class_names: Vec<String>,
    /// Finer-class index → class index at this level. `None` for the finest level.
    pub merge_from_finer: Option<Vec<u16>>,
}

impl Level {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    levels: Vec<Level>,
}

impl LabelHierarchy {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        let h = LabelHierarchy { levels };
        h.validate()?;
        Ok(h)
    }

    pub fn helen() -> Self {
        Self::from_text(HELEN3_HIER).expect("shipped fixture is valid")
    }

    pub fn geoscene() -> Self {
        Self::from_text(GEOSCENE_HIER).expect("shipped fixture is valid")
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_classes(&self, level: usize) -> usize {
        self.levels[level].num_classes()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.levels.iter().map(Level::num_classes).collect()
    }

    /// Checks every structural invariant of the taxonomy.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Hierarchy("empty: no levels".into()));
        }
        for (k, level) in self.levels.iter().enumerate() {
            if level.class_names.first().map(String::as_str) != Some("background") {
                return Err(Error::Hierarchy(format!(
                    "background: class 0 of level '{}' must be 'background'",
                    level.name
                )));
            }
            let finer = match self.levels.get(k + 1) {
                Some(f) => f,
                None => {
                    if level.merge_from_finer.is_some() {
                        return Err(Error::Hierarchy(format!(
                            "finest level '{}' cannot carry a merge map",
                            level.name
                        )));
                    }
                    continue;
                }
            };
            if finer.num_classes() < level.num_classes() {
                return Err(Error::Hierarchy(format!(
                    "decreasing class count: level '{}' has {} classes but finer level '{}' has {}",
                    level.name,
                    level.num_classes(),
                    finer.name,
                    finer.num_classes()
                )));
            }
            let map = level.merge_from_finer.as_ref().ok_or_else(|| {
                Error::Hierarchy(format!("non-total: level '{}' has no merge map", level.name))
            })?;
            if map.len() != finer.num_classes() {
                return Err(Error::Hierarchy(format!(
                    "non-total: merge map into '{}' covers {} of {} finer classes",
                    level.name,
                    map.len(),
                    finer.num_classes()
                )));
            }
            if let Some(bad) = map.iter().find(|&&c| c as usize >= level.num_classes()) {
                return Err(Error::Hierarchy(format!(
                    "merge target {bad} out of range for level '{}'",
                    level.name
                )));
            }
            if map[0] != BACKGROUND {
                return Err(Error::Hierarchy(format!(
                    "background: finer background maps to class {} of level '{}'",
                    map[0], level.name
                )));
            }
            let mut hit = vec![false; level.num_classes()];
            map.iter().for_each(|&c| hit[c as usize] = true);
            if let Some(missing) = hit.iter().position(|&h| !h) {
                return Err(Error::Hierarchy(format!(
                    "non-surjective: class {missing} of level '{}' receives no finer class",
                    level.name
                )));
            }
        }
        Ok(())
    }

    /// Finest-class index → class index at `target`, composed step by step.
    pub fn composed_map(&self, target: usize) -> Result<Vec<u16>> {
        if target >= self.levels.len() {
            return Err(Error::invalid(
                "composed_map",
                format!("level {target} of {}", self.levels.len()),
            ));
        }
        let mut map: Vec<u16> = (0..self.num_classes(self.finest()) as u16).collect();
        for k in (target..self.finest()).rev() {
            let step = self.levels[k].merge_from_finer.as_ref().expect("validated");
            map.iter_mut().for_each(|c| *c = step[*c as usize]);
        }
        Ok(map)
    }

    /// Class map from `from` (finer) to `to` (coarser or equal).
    pub fn map_between(&self, from: usize, to: usize) -> Result<Vec<u16>> {
        if to > from || from >= self.levels.len() {
            return Err(Error::invalid(
                "map_between",
                format!("cannot map level {from} onto level {to}"),
            ));
        }
        let mut map: Vec<u16> = (0..self.num_classes(from) as u16).collect();
        for k in (to..from).rev() {
            let step = self.levels[k].merge_from_finer.as_ref().expect("validated");
            map.iter_mut().for_each(|c| *c = step[*c as usize]);
        }
        Ok(map)
    }

    pub fn from_text(doc: &str) -> Result<Self> {
        struct Draft {
            name: String,
            line: usize,
            classes: BTreeMap<usize, String>,
            merges: BTreeMap<usize, u16>,
        }
        let mut drafts: Vec<Draft> = Vec::new();
        for (i, raw) in doc.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens[0] {
                "level" => {
                    if tokens.len() != 2 {
                        return Err(parse_err("expected `level <name>`".into()));
                    }
                    drafts.push(Draft {
                        name: tokens[1].to_string(),
                        line: line_no,
                        classes: BTreeMap::new(),
                        merges: BTreeMap::new(),
                    });
                }
                "class" => {
                    let cur = drafts
                        .last_mut()
                        .ok_or_else(|| parse_err("`class` before any `level`".into()))?;
                    if tokens.len() != 3 {
                        return Err(parse_err("expected `class <index> <name>`".into()));
                    }
                    let idx: usize = tokens[1]
                        .parse()
                        .map_err(|_| parse_err(format!("bad class index '{}'", tokens[1])))?;
                    if cur.classes.insert(idx, tokens[2].to_string()).is_some() {
                        return Err(parse_err(format!("duplicate class index {idx}")));
                    }
                }
                "merge" => {
                    let cur = drafts
                        .last_mut()
                        .ok_or_else(|| parse_err("`merge` before any `level`".into()))?;
                    if tokens.len() != 4 || tokens[2] != "->" {
                        return Err(parse_err(
                            "expected `merge <fine_index> -> <coarse_index>`".into(),
                        ));
                    }
                    let fine: usize = tokens[1]
                        .parse()
                        .map_err(|_| parse_err(format!("bad index '{}'", tokens[1])))?;
                    let coarse: u16 = tokens[3]
                        .parse()
                        .map_err(|_| parse_err(format!("bad index '{}'", tokens[3])))?;
                    if cur.merges.insert(fine, coarse).is_some() {
                        return Err(parse_err(format!("duplicate merge for class {fine}")));
                    }
                }
                other => return Err(parse_err(format!("unknown directive '{other}'"))),
            }
        }
        if drafts.is_empty() {
            return Err(Error::Hierarchy("empty: no levels".into()));
        }
        let n = drafts.len();
        let mut levels = Vec::with_capacity(n);
        for (k, d) in drafts.into_iter().enumerate() {
            let count = d.classes.len();
            if d.classes.keys().copied().ne(0..count) {
                return Err(Error::Parse {
                    line: d.line,
                    msg: format!("class indices of level '{}' must be 0..{count}", d.name),
                });
            }
            let merge_from_finer = if k + 1 < n {
                let finer_classes = d.merges.keys().max().map_or(0, |m| m + 1);
                let mut map = Vec::with_capacity(finer_classes);
                for f in 0..finer_classes {
                    match d.merges.get(&f) {
                        Some(&c) => map.push(c),
                        None => {
                            return Err(Error::Hierarchy(format!(
                                "non-total: level '{}' has no merge for finer class {f}",
                                d.name
                            )))
                        }
                    }
                }
                Some(map)
            } else {
                if !d.merges.is_empty() {
                    return Err(Error::Parse {
                        line: d.line,
                        msg: format!("finest level '{}' cannot have merge lines", d.name),
                    });
                }
                None
            };
            levels.push(Level {
                name: d.name,
                class_names: d.classes.into_values().collect(),
                merge_from_finer,
            });
        }
        LabelHierarchy::new(levels)
    }

    /// Canonical text form; `from_text(to_text())` reproduces the hierarchy.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, level) in self.levels.iter().enumerate() {
            if k > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "level {}", level.name);
            for (i, name) in level.class_names.iter().enumerate() {
                let _ = writeln!(s, "class {i} {name}");
            }
            if let Some(map) = &level.merge_from_finer {
                for (f, c) in map.iter().enumerate() {
                    let _ = writeln!(s, "merge {f} -> {c}");
                }
            }
        }
        s
    }

    /// Stable 64-bit digest of the canonical text form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Keeps only the `count` finest levels; used when training with fewer
    /// granularity levels than the taxonomy defines.
    pub fn finest_levels(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.levels.len() {
            return Err(Error::invalid(
                "finest_levels",
                format!("cannot keep {count} of {} levels", self.levels.len()),
            ));
        }
        LabelHierarchy::new(self.levels[self.levels.len() - count..].to_vec())
    }
}

/// A single-image integer label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "label map",
                left: vec![height, width],
                right: vec![data.len()],
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u16) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// First pixel whose value is not below `classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(i) => Err(Error::LabelOutOfRange {
                value: self.data[i],
                classes,
                position: vec![i / self.width, i % self.width],
            }),
            None => Ok(()),
        }
    }

    pub fn remap(&self, map: &[u16]) -> Result<LabelMap> {
        self.check_range(map.len())?;
        Ok(LabelMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| map[v as usize]).collect(),
        })
    }
}

/// Pixel-wise application of the composed finest → `target` class map.
pub fn merge_labels(fine: &LabelMap, h: &LabelHierarchy, target: usize) -> Result<LabelMap> {
    fine.remap(&h.composed_map(target)?)
}

/// One label map per hierarchy level, coarse → fine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapSet {
    pub maps: Vec<LabelMap>,
}

impl LabelMapSet {
    pub fn level(&self, k: usize) -> &LabelMap {
        &self.maps[k]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Checks ranges, matching extents, and merge consistency of adjacent levels.
    pub fn validate(&self, h: &LabelHierarchy) -> Result<()> {
        if self.maps.len() != h.num_levels() {
            return Err(Error::invalid(
                "label map set",
                format!("{} maps for {} levels", self.maps.len(), h.num_levels()),
            ));
        }
        let (hh, ww) = (self.maps[0].height, self.maps[0].width);
        for (k, m) in self.maps.iter().enumerate() {
            if (m.height, m.width) != (hh, ww) {
                return Err(Error::ShapeMismatch {
                    op: "label map set",
                    left: vec![hh, ww],
                    right: vec![m.height, m.width],
                });
            }
            m.check_range(h.num_classes(k))?;
        }
        for k in 0..h.finest() {
            let step = h.levels()[k].merge_from_finer.as_ref().expect("validated");
            let (coarse, fine) = (&self.maps[k], &self.maps[k + 1]);
            if let Some(i) = (0..coarse.data.len())
                .find(|&i| coarse.data[i] != step[fine.data[i] as usize])
            {
                return Err(Error::invalid(
                    "label map set",
                    format!(
                        "levels {k} and {} disagree at pixel ({}, {})",
                        k + 1,
                        i / ww,
                        i % ww
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Builds the full coarse-to-fine supervision from a finest-level map.
pub fn expand_sample(fine: &LabelMap, h: &LabelHierarchy) -> Result<LabelMapSet> {
    let maps = (0..h.num_levels())
        .map(|k| merge_labels(fine, h, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabelMapSet { maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_hierarchies() {
        let h = LabelHierarchy::helen();
        assert_eq!(h.class_counts(), vec![3, 6, 11]);
        assert_eq!(h.levels()[0].class_names, ["background", "face", "hair"]);
        let g = LabelHierarchy::geoscene();
        assert_eq!(g.class_counts(), vec![3, 5, 8]);
    }

    #[test]
    fn single_level_is_valid() {
        let h = LabelHierarchy::from_text("level only\nclass 0 background\nclass 1 thing\n").unwrap();
        assert_eq!(h.num_levels(), 1);
        let m = LabelMap::new(1, 3, vec![0, 1, 1]).unwrap();
        let set = expand_sample(&m, &h).unwrap();
        assert_eq!(set.maps, vec![m]);
    }

    #[test]
    fn helen_mouth_parts_merge() {
        let h = LabelHierarchy::helen();
        let fine = LabelMap::new(2, 3, vec![7, 8, 9, 9, 8, 7]).unwrap();
        let medium = merge_labels(&fine, &h, 1).unwrap();
        assert!(medium.data.iter().all(|&v| v == 4), "{:?}", medium.data);
        assert_eq!(h.levels()[1].class_names[4], "mouth");
        assert_eq!(merge_labels(&fine, &h, 2).unwrap(), fine);
    }

    #[test]
    fn diagnostics_are_named() {
        let missing = GEOSCENE_HIER.replace("merge 5 -> 3\n", "");
        let err = LabelHierarchy::from_text(&missing).unwrap_err().to_string();
        assert!(err.contains("non-total"), "{err}");

        let unhit = GEOSCENE_HIER.replace("merge 3 -> 2\n", "merge 3 -> 1\n").replace(
            "merge 2 -> 2\n",
            "merge 2 -> 1\n",
        );
        let err = LabelHierarchy::from_text(&unhit).unwrap_err().to_string();
        assert!(err.contains("non-surjective"), "{err}");

        let bg = GEOSCENE_HIER.replacen("merge 0 -> 0\n", "merge 0 -> 1\n", 1);
        let err = LabelHierarchy::from_text(&bg).unwrap_err().to_string();
        assert!(err.contains("background"), "{err}");

        let decreasing = "level a\nclass 0 background\nclass 1 x\nclass 2 y\nmerge 0 -> 0\nmerge 1 -> 1\n\
                          level b\nclass 0 background\nclass 1 x\n";
        let err = LabelHierarchy::from_text(decreasing).unwrap_err().to_string();
        assert!(err.contains("decreasing"), "{err}");

        assert!(LabelHierarchy::from_text("# nothing\n").is_err());
        let err = LabelHierarchy::from_text("level a\nclass 0 background\nfrob\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
    }

    #[test]
    fn out_of_range_pixel_reports_position() {
        let h = LabelHierarchy::geoscene();
        let fine = LabelMap::new(2, 2, vec![0, 1, 2, 9]).unwrap();
        match merge_labels(&fine, &h, 0).unwrap_err() {
            Error::LabelOutOfRange { value, position, .. } => {
                assert_eq!((value, position), (9, vec![1, 1]));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn map_between_composes() {
        let h = LabelHierarchy::helen();
        assert_eq!(h.map_between(2, 0).unwrap(), h.composed_map(0).unwrap());
        assert_eq!(h.map_between(1, 1).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert!(h.map_between(0, 1).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        assert_eq!(LabelHierarchy::helen().hash(), LabelHierarchy::helen().hash());
        assert_ne!(LabelHierarchy::helen().hash(), LabelHierarchy::geoscene().hash());
    }

    #[test]
    fn finest_levels_drops_coarse_tiers() {
        let h = LabelHierarchy::helen().finest_levels(2).unwrap();
        assert_eq!(h.class_counts(), vec![6, 11]);
        assert!(LabelHierarchy::helen().finest_levels(4).is_err());
    }
}
