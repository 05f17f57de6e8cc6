//! Parsers for the interaction and KG file formats.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ConceptIndex, Dataset, InteractionGraph, TypedTripletStore};

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

struct SplitLines {
    /// (user, file-order items) per line; duplicates not yet removed.
    rows: Vec<(u32, Vec<u32>)>,
    max_user: Option<u32>,
    max_item: Option<u32>,
}

fn parse_split(reader: impl BufRead, path: &str) -> Result<SplitLines> {
    let mut rows = Vec::new();
    let mut max_user = None;
    let mut max_item = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else {
            continue; // empty line tolerated
        };
        let user: u32 = first
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad user id {first:?}")))?;
        let mut items = Vec::new();
        for tok in tokens {
            let item: u32 = tok
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad item id {tok:?}")))?;
            max_item = Some(max_item.map_or(item, |m: u32| m.max(item)));
            items.push(item);
        }
        max_user = Some(max_user.map_or(user, |m: u32| m.max(user)));
        rows.push((user, items));
    }
    Ok(SplitLines {
        rows,
        max_user,
        max_item,
    })
}

/// Parse both interaction splits from readers. The item universe is
/// `0 ..= max item id` observed across the two splits; user id gaps are
/// allowed and appear as users with empty histories.
pub fn parse_interactions(
    train: impl BufRead,
    train_name: &str,
    test: impl BufRead,
    test_name: &str,
) -> Result<InteractionGraph> {
    let tr = parse_split(train, train_name)?;
    let te = parse_split(test, test_name)?;

    let max_user = match (tr.max_user, te.max_user) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    let max_item = match (tr.max_item, te.max_item) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    let n_users = max_user.map_or(0, |m| m as usize + 1);
    let n_items = max_item.map_or(0, |m| m as usize + 1);

    let mut train_sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_users];
    let mut train_order: Vec<Vec<u32>> = vec![Vec::new(); n_users];
    let mut test_sets: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_users];
    let mut dup = 0usize;
    for (user, items) in tr.rows {
        for item in items {
            if train_sets[user as usize].insert(item) {
                train_order[user as usize].push(item);
            } else {
                dup += 1;
            }
        }
    }
    for (user, items) in te.rows {
        for item in items {
            if !test_sets[user as usize].insert(item) {
                dup += 1;
            }
        }
    }
    if dup > 0 {
        log::warn!("dropped {dup} duplicate (user, item) pairs");
    }

    Ok(InteractionGraph {
        n_users,
        n_items,
        train: train_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        test: test_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        train_order,
    })
}

/// Load `train.txt` / `test.txt` from disk.
pub fn load_interactions(path_train: &Path, path_test: &Path) -> Result<InteractionGraph> {
    let train = BufReader::new(std::fs::File::open(path_train)?);
    let test = BufReader::new(std::fs::File::open(path_test)?);
    parse_interactions(
        train,
        &path_train.display().to_string(),
        test,
        &path_test.display().to_string(),
    )
}

/// Parse a KG file and classify every triplet. Entity ids in `0..n_items` are
/// items; anything at or above is a tag. `(tag, r, item)` rows are re-oriented
/// to `(item, r + n_relations_raw, tag)`.
pub fn parse_kg(reader: impl BufRead, path: &str, n_items: usize) -> Result<TypedTripletStore> {
    let mut raw: Vec<(u32, u32, u32)> = Vec::new();
    let mut max_rel = None;
    let mut max_entity = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let Some(h) = tokens.next() else { continue };
        let (r, t) = match (tokens.next(), tokens.next()) {
            (Some(r), Some(t)) => (r, t),
            _ => return Err(parse_err(path, lineno, "expected three integers")),
        };
        if tokens.next().is_some() {
            return Err(parse_err(path, lineno, "trailing tokens after triple"));
        }
        let h: u32 = h
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad head id {h:?}")))?;
        let r: u32 = r
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad relation id {r:?}")))?;
        let t: u32 = t
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad tail id {t:?}")))?;
        max_rel = Some(max_rel.map_or(r, |m: u32| m.max(r)));
        max_entity = Some(max_entity.map_or(h.max(t), |m: u32| m.max(h).max(t)));
        raw.push((h, r, t));
    }

    let n_relations_raw = max_rel.map_or(0, |m| m as usize + 1);
    let n_tags = max_entity.map_or(0, |m| (m as usize + 1).saturating_sub(n_items));

    let before = raw.len();
    raw.sort_unstable();
    raw.dedup();
    if raw.len() < before {
        log::warn!("dropped {} duplicate KG triplets", before - raw.len());
    }

    let boundary = n_items as u32;
    let mut store = TypedTripletStore {
        n_items,
        n_tags,
        n_relations_raw,
        n_relations_aug: 2 * n_relations_raw,
        ..Default::default()
    };
    for (h, r, t) in raw {
        match (h < boundary, t < boundary) {
            (true, true) => store.iri.push((h, r, t)),
            (false, false) => store.trt.push((h - boundary, r, t - boundary)),
            (true, false) => store.irt.push((h, r, t - boundary)),
            // inverse relation: predict the item from the tag side
            (false, true) => store
                .irt
                .push((t, r + n_relations_raw as u32, h - boundary)),
        }
    }
    store.irt.sort_unstable();
    store.irt.dedup();
    store.build_indexes();
    Ok(store)
}

/// Load `kg_final.txt` given the item-id boundary.
pub fn load_kg(path_kg: &Path, n_items: usize) -> Result<TypedTripletStore> {
    let reader = BufReader::new(std::fs::File::open(path_kg)?);
    parse_kg(reader, &path_kg.display().to_string(), n_items)
}

/// Load a dataset directory containing `train.txt`, `test.txt`, `kg_final.txt`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    for name in ["train.txt", "test.txt", "kg_final.txt"] {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Contract(format!("missing dataset file {}", p.display())));
        }
    }
    let graph = load_interactions(&dir.join("train.txt"), &dir.join("test.txt"))?;
    let triplets = load_kg(&dir.join("kg_final.txt"), graph.n_items)?;
    let concepts = ConceptIndex::build(&triplets);
    Ok(Dataset {
        graph,
        triplets,
        concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn graph(train: &str, test: &str) -> InteractionGraph {
        parse_interactions(Cursor::new(train), "train", Cursor::new(test), "test").unwrap()
    }

    #[test]
    fn duplicates_dropped_order_kept() {
        let g = graph("0 5 7 5\n", "");
        assert_eq!(g.n_users, 1);
        assert_eq!(g.n_items, 8);
        assert_eq!(g.train[0], vec![5, 7]);
        assert_eq!(g.train_order[0], vec![5, 7]);
        assert!(g.test[0].is_empty());
    }

    #[test]
    fn empty_files_give_empty_graph() {
        let g = graph("", "");
        assert_eq!(g.n_users, 0);
        assert_eq!(g.n_items, 0);
        assert_eq!(g.n_train_pairs(), 0);
    }

    #[test]
    fn user_gaps_and_bare_users_tolerated() {
        let g = graph("0 1\n4\n", "2 0 3");
        assert_eq!(g.n_users, 5);
        assert!(g.train[1].is_empty() && g.train[4].is_empty());
        assert_eq!(g.test[2], vec![0, 3]);
        assert_eq!(g.n_items, 4);
    }

    #[test]
    fn malformed_token_reports_line() {
        let err = parse_interactions(
            Cursor::new("0 1\n1 x\n"),
            "train",
            Cursor::new(""),
            "test",
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn kg(text: &str, n_items: usize) -> TypedTripletStore {
        parse_kg(Cursor::new(text), "kg", n_items).unwrap()
    }

    #[test]
    fn classification_by_boundary() {
        // n_items = 5: ids 0..5 are items, 5.. are tags
        let s = kg("3 0 9\n0 1 2\n7 2 8\n", 5);
        assert_eq!(s.irt, vec![(3, 0, 4)]);
        assert_eq!(s.iri, vec![(0, 1, 2)]);
        assert_eq!(s.trt, vec![(2, 2, 3)]);
        assert_eq!(s.n_tags, 5); // ids 5..=9
        assert_eq!(s.n_relations_raw, 3);
        assert_eq!(s.n_relations_aug, 6);
    }

    #[test]
    fn tag_headed_rows_reoriented_with_inverse_relation() {
        // (tag 9, r 2, item 3) with 4 raw relations -> (3, 6, tag 9)
        let s = kg("9 2 3\n0 3 1\n", 5);
        assert_eq!(s.n_relations_raw, 4);
        assert_eq!(s.irt, vec![(3, 6, 4)]);
        assert_eq!(s.total(), 2);
    }

    #[test]
    fn totals_preserved_and_duplicates_dropped() {
        let s = kg("0 0 9\n0 0 9\n9 0 0\n1 0 8\n", 5);
        // one duplicate dropped; re-orientation keeps the total
        assert_eq!(s.total(), 3);
        assert_eq!(s.answer_count(super::super::TripletClass::Irt, 0, 4), 1);
    }

    #[test]
    fn concept_index_round_trip() {
        let s = kg("0 1 9\n0 0 8\n2 0 8\n1 2 3\n", 5);
        let idx = ConceptIndex::build(&s);
        assert_eq!(idx.concepts_of(0).unwrap(), &[(0, 3), (1, 4)]);
        assert_eq!(idx.concepts_of(2).unwrap(), &[(0, 3)]);
        // item 1 appears only as IRI head
        assert_eq!(idx.concepts_of(1).unwrap(), &[] as &[(u32, u32)]);
        assert!(idx.concepts_of(99).is_err());
        // inverted index agrees with the forward lists
        for item in 0..5u32 {
            for &c in idx.concepts_of(item).unwrap() {
                assert!(idx.items_of(c).contains(&item));
            }
        }
        for (&c, items) in &idx.concept_items {
            for &i in items {
                assert!(idx.concepts_of(i).unwrap().contains(&c));
            }
        }
    }
}
