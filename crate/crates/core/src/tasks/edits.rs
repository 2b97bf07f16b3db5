//! Edit operations turning an MT hypothesis into its reference.

use crate::error::{Error, Result};

pub const KEEP_TOKEN: &str = "<keep>";
pub const DELETE_TOKEN: &str = "<del>";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EditOp<T> {
    Keep,
    Delete,
    Insert(T),
}

impl EditOp<String> {
    /// Output-vocabulary token: `<keep>`, `<del>`, or the inserted token itself.
    pub fn to_token(&self) -> String {
        match self {
            EditOp::Keep => KEEP_TOKEN.to_string(),
            EditOp::Delete => DELETE_TOKEN.to_string(),
            EditOp::Insert(t) => t.clone(),
        }
    }

    pub fn from_token(token: &str) -> Self {
        match token {
            KEEP_TOKEN => EditOp::Keep,
            DELETE_TOKEN => EditOp::Delete,
            t => EditOp::Insert(t.to_string()),
        }
    }
}

/// Minimal Keep/Delete/Insert script from `mt` to `reference`.
///
/// Keep costs 0 and needs equal tokens; Delete and Insert cost 1. Among
/// minimal scripts the walk prefers Keep, then Delete, then Insert at every
/// cell, so the result is deterministic.
pub fn encode_edits<T: PartialEq + Clone>(mt: &[T], reference: &[T]) -> Vec<EditOp<T>> {
    let (n, m) = (mt.len(), reference.len());
    // cost[i][j]: cheapest script for mt[i..] -> reference[j..].
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i * w + j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let mut c = 1 + cost[(i + 1) * w + j].min(cost[i * w + j + 1]);
                if mt[i] == reference[j] {
                    c = c.min(cost[(i + 1) * w + j + 1]);
                }
                c
            };
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = cost[i * w + j];
        if i < n && j < m && mt[i] == reference[j] && cost[(i + 1) * w + j + 1] == here {
            ops.push(EditOp::Keep);
            i += 1;
            j += 1;
        } else if i < n && cost[(i + 1) * w + j] + 1 == here {
            ops.push(EditOp::Delete);
            i += 1;
        } else {
            ops.push(EditOp::Insert(reference[j].clone()));
            j += 1;
        }
    }
    ops
}

/// Replays `ops` over `mt`: Keep copies, Delete skips, Insert emits.
pub fn apply_edits<T: Clone>(mt: &[T], ops: &[EditOp<T>]) -> Result<Vec<T>> {
    let consumed = ops.iter().filter(|o| !matches!(o, EditOp::Insert(_))).count();
    if consumed != mt.len() {
        return Err(Error::EditMismatch(format!(
            "{consumed} keep/delete ops for {} input tokens",
            mt.len()
        )));
    }
    let mut out = Vec::with_capacity(ops.len());
    let mut src = mt.iter();
    for op in ops {
        match op {
            EditOp::Keep => out.push(src.next().unwrap().clone()),
            EditOp::Delete => {
                src.next();
            }
            EditOp::Insert(t) => out.push(t.clone()),
        }
    }
    Ok(out)
}

/// Applies ops decoded by a model, tolerating a wrong Keep/Delete count:
/// surplus ops are ignored and missing ones keep the remaining input.
pub fn apply_edits_lenient<T: Clone>(mt: &[T], ops: &[EditOp<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(ops.len());
    let mut src = mt.iter();
    for op in ops {
        match op {
            EditOp::Keep => {
                if let Some(t) = src.next() {
                    out.push(t.clone());
                }
            }
            EditOp::Delete => {
                src.next();
            }
            EditOp::Insert(t) => out.push(t.clone()),
        }
    }
    out.extend(src.cloned());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use EditOp::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_is_all_keep() {
        assert_eq!(encode_edits(&toks("a b c"), &toks("a b c")), vec![Keep, Keep, Keep]);
    }

    #[test]
    fn insertion_and_deletion() {
        assert_eq!(encode_edits(&toks("a b"), &toks("a x b")), vec![Keep, Insert("x".to_string()), Keep]);
        assert_eq!(encode_edits(&toks("a b c"), &toks("a c")), vec![Keep, Delete, Keep]);
    }

    #[test]
    fn substitution_is_delete_then_insert() {
        assert_eq!(encode_edits(&toks("a b"), &toks("a c")), vec![Keep, Delete, Insert("c".to_string())]);
    }

    #[test]
    fn empty_sides() {
        assert_eq!(encode_edits::<String>(&[], &[]), vec![]);
        assert_eq!(encode_edits(&[], &toks("x")), vec![Insert("x".to_string())]);
        assert_eq!(encode_edits(&toks("x y"), &[]), vec![Delete, Delete]);
    }

    #[test]
    fn apply_examples() {
        let mt = toks("a b c");
        assert_eq!(apply_edits(&mt, &[Keep, Keep, Keep]).unwrap(), mt);
        assert_eq!(apply_edits(&[], &[Insert("x".to_string())]).unwrap(), toks("x"));
        assert!(apply_edits(&mt, &[Keep, Keep]).is_err());
        assert!(apply_edits(&mt, &[Keep, Keep, Delete, Keep]).is_err());
    }

    #[test]
    fn lenient_apply() {
        let mt = toks("a b c");
        assert_eq!(apply_edits_lenient(&mt, &[Delete]), toks("b c"));
        assert_eq!(apply_edits_lenient(&mt, &[Keep, Keep, Keep, Keep, Delete]), mt);
    }

    #[test]
    fn token_mapping() {
        for op in [Keep, Delete, Insert("w3".to_string())] {
            assert_eq!(EditOp::from_token(&op.to_token()), op);
        }
    }
}
