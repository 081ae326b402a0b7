//! Implicit-feedback interaction data: ingestion, k-core filtering, per-user
//! splits, batching and neighbor sets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// Which side of the bipartite interaction graph an operation runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    User,
    Item,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::User => Side::Item,
            Side::Item => Side::User,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
        }
    }
}

/// Sparse binary user × item matrix with both row (per-user) and column
/// (per-item) adjacency, each sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionMatrix {
    num_users: usize,
    num_items: usize,
    user_ptr: Vec<usize>,
    user_items: Vec<u32>,
    item_ptr: Vec<usize>,
    item_users: Vec<u32>,
}

impl InteractionMatrix {
    /// Builds the matrix from `(user, item)` pairs; duplicates collapse to one entry.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); num_users];
        let mut cols: Vec<Vec<u32>> = vec![Vec::new(); num_items];
        for &(u, i) in pairs {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::Data(format!(
                    "pair ({u}, {i}) out of range for {num_users}x{num_items}"
                )));
            }
            rows[u as usize].push(i);
            cols[i as usize].push(u);
        }
        let (user_ptr, user_items) = compress(rows);
        let (item_ptr, item_users) = compress(cols);
        Ok(InteractionMatrix {
            num_users,
            num_items,
            user_ptr,
            user_items,
            item_ptr,
            item_users,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.user_items.len()
    }

    pub fn user_row(&self, u: usize) -> &[u32] {
        &self.user_items[self.user_ptr[u]..self.user_ptr[u + 1]]
    }

    pub fn item_col(&self, i: usize) -> &[u32] {
        &self.item_users[self.item_ptr[i]..self.item_ptr[i + 1]]
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        self.user_row(u).binary_search(&(i as u32)).is_ok()
    }

    /// Entities on `side` and the count on the opposite side.
    pub fn len(&self, side: Side) -> usize {
        match side {
            Side::User => self.num_users,
            Side::Item => self.num_items,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    /// Neighbors of `entity` on `side`: items of a user, users of an item.
    pub fn neighbors(&self, side: Side, entity: usize) -> &[u32] {
        match side {
            Side::User => self.user_row(entity),
            Side::Item => self.item_col(entity),
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.num_users).flat_map(move |u| self.user_row(u).iter().map(move |&i| (u as u32, i)))
    }

    pub fn transpose(&self) -> InteractionMatrix {
        InteractionMatrix {
            num_users: self.num_items,
            num_items: self.num_users,
            user_ptr: self.item_ptr.clone(),
            user_items: self.item_users.clone(),
            item_ptr: self.user_ptr.clone(),
            item_users: self.user_items.clone(),
        }
    }

    /// Dense `|entities| × other-side` slab of 0/1 rows (user rows or item columns).
    pub fn dense(&self, side: Side, entities: &[usize]) -> Tensor {
        let width = self.len(side.other());
        let mut t = Tensor::zeros(entities.len(), width);
        for (r, &e) in entities.iter().enumerate() {
            let row = t.row_slice_mut(r);
            for &j in self.neighbors(side, e) {
                row[j as usize] = 1.0;
            }
        }
        t
    }

    /// Same id space, only the pairs for which `keep` holds.
    pub fn filter(&self, mut keep: impl FnMut(u32, u32) -> bool) -> InteractionMatrix {
        let pairs: Vec<_> = self.pairs().filter(|&(u, i)| keep(u, i)).collect();
        InteractionMatrix::from_pairs(self.num_users, self.num_items, &pairs).expect("in range")
    }
}

fn compress(lists: Vec<Vec<u32>>) -> (Vec<usize>, Vec<u32>) {
    let mut ptr = Vec::with_capacity(lists.len() + 1);
    let mut flat = Vec::new();
    ptr.push(0);
    for mut l in lists {
        l.sort_unstable();
        l.dedup();
        flat.extend_from_slice(&l);
        ptr.push(flat.len());
    }
    (ptr, flat)
}

/// Interaction matrix plus the original user/item tokens for each index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub matrix: InteractionMatrix,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Delimiter {
    Tab,
    Comma,
    /// `::`, as in MovieLens `.dat` files.
    DoubleColon,
}

impl Delimiter {
    pub fn detect(line: &str) -> Delimiter {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains("::") {
            Delimiter::DoubleColon
        } else {
            Delimiter::Comma
        }
    }

    fn split(self, line: &str) -> Vec<&str> {
        match self {
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Comma => line.split(',').collect(),
            Delimiter::DoubleColon => line.split("::").collect(),
        }
    }
}

impl std::str::FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" | "tab" => Ok(Delimiter::Tab),
            "csv" | "comma" => Ok(Delimiter::Comma),
            "dat" => Ok(Delimiter::DoubleColon),
            other => Err(Error::Config(format!("unknown input format {other:?}"))),
        }
    }
}

const HEADER_WORDS: &[&str] = &[
    "user", "item", "userid", "itemid", "user_id", "item_id", "uid", "iid", "movieid", "movie_id",
];

fn is_numeric(token: &str) -> bool {
    token.trim().parse::<f64>().is_ok()
}

fn looks_like_header(first: &[&str], second: Option<&[&str]>) -> bool {
    let tokens = &first[..first.len().min(2)];
    if tokens.iter().all(|t| is_numeric(t)) {
        return false;
    }
    if tokens
        .iter()
        .any(|t| HEADER_WORDS.contains(&t.trim().to_ascii_lowercase().as_str()))
    {
        return true;
    }
    second.is_some_and(|s| s.len() >= 2 && is_numeric(s[0]) && is_numeric(s[1]))
}

/// Reads `user item [ignored...]` lines, reindexes densely in first-seen
/// order, and applies iterative k-core filtering.
pub fn ingest(
    path: &Path,
    delimiter: Option<Delimiter>,
    min_user_core: usize,
    min_item_core: usize,
) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if !trimmed.trim().is_empty() {
            lines.push((no + 1, trimmed.to_string()));
        }
    }
    let Some((_, first)) = lines.first() else {
        return Err(Error::Data(format!("{}: no interactions", path.display())));
    };
    let delim = delimiter.unwrap_or_else(|| Delimiter::detect(first));
    let first_tokens = delim.split(first);
    let second_tokens = lines.get(1).map(|(_, l)| delim.split(l));
    let skip = usize::from(looks_like_header(&first_tokens, second_tokens.as_deref()));

    let mut raw: Vec<(String, String)> = Vec::with_capacity(lines.len());
    for (no, line) in &lines[skip..] {
        let tokens = delim.split(line);
        let (u, i) = match tokens.as_slice() {
            [u, i, ..] if !u.trim().is_empty() && !i.trim().is_empty() => (u.trim(), i.trim()),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *no,
                    detail: format!("expected `user{delim:?}item`, got {line:?}"),
                })
            }
        };
        raw.push((u.to_string(), i.to_string()));
    }
    from_token_pairs(&raw, min_user_core, min_item_core)
}

/// Reindexes token pairs (first-seen order) after k-core filtering.
pub fn from_token_pairs(
    raw: &[(String, String)],
    min_user_core: usize,
    min_item_core: usize,
) -> Result<Dataset> {
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pairs = Vec::with_capacity(raw.len());
    for (u, i) in raw {
        let uid = *user_index.entry(u).or_insert_with(|| {
            user_ids.push(u.clone());
            (user_ids.len() - 1) as u32
        });
        let iid = *item_index.entry(i).or_insert_with(|| {
            item_ids.push(i.clone());
            (item_ids.len() - 1) as u32
        });
        pairs.push((uid, iid));
    }
    let full = InteractionMatrix::from_pairs(user_ids.len(), item_ids.len(), &pairs)?;
    let (matrix, kept_users, kept_items) = k_core(&full, min_user_core, min_item_core);
    if matrix.nnz() == 0 {
        return Err(Error::Data(format!(
            "no interactions survive {min_user_core}/{min_item_core}-core filtering"
        )));
    }
    Ok(Dataset {
        matrix,
        user_ids: kept_users.iter().map(|&u| user_ids[u].clone()).collect(),
        item_ids: kept_items.iter().map(|&i| item_ids[i].clone()).collect(),
    })
}

/// Repeatedly drops users with fewer than `min_user` items and items with
/// fewer than `min_item` users until nothing changes, then reindexes the
/// survivors in their original order. Returns the filtered matrix and the
/// original indices of the kept users and items.
pub fn k_core(
    matrix: &InteractionMatrix,
    min_user: usize,
    min_item: usize,
) -> (InteractionMatrix, Vec<usize>, Vec<usize>) {
    let mut user_alive = vec![true; matrix.num_users()];
    let mut item_alive = vec![true; matrix.num_items()];
    let mut user_deg: Vec<usize> = (0..matrix.num_users()).map(|u| matrix.user_row(u).len()).collect();
    let mut item_deg: Vec<usize> = (0..matrix.num_items()).map(|i| matrix.item_col(i).len()).collect();
    let mut stack: Vec<(Side, usize)> = Vec::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < min_user {
            stack.push((Side::User, u));
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < min_item {
            stack.push((Side::Item, i));
        }
    }
    while let Some((side, e)) = stack.pop() {
        match side {
            Side::User => {
                if !user_alive[e] {
                    continue;
                }
                user_alive[e] = false;
                for &i in matrix.user_row(e) {
                    let i = i as usize;
                    if item_alive[i] {
                        item_deg[i] -= 1;
                        if item_deg[i] < min_item {
                            stack.push((Side::Item, i));
                        }
                    }
                }
            }
            Side::Item => {
                if !item_alive[e] {
                    continue;
                }
                item_alive[e] = false;
                for &u in matrix.item_col(e) {
                    let u = u as usize;
                    if user_alive[u] {
                        user_deg[u] -= 1;
                        if user_deg[u] < min_user {
                            stack.push((Side::User, u));
                        }
                    }
                }
            }
        }
    }
    // Zero-degree survivors only exist when a threshold is 0; drop them anyway.
    let kept_users: Vec<usize> = (0..matrix.num_users())
        .filter(|&u| user_alive[u] && matrix.user_row(u).iter().any(|&i| item_alive[i as usize]))
        .collect();
    let kept_items: Vec<usize> = (0..matrix.num_items())
        .filter(|&i| item_alive[i] && matrix.item_col(i).iter().any(|&u| user_alive[u as usize]))
        .collect();
    let mut user_map = vec![u32::MAX; matrix.num_users()];
    for (new, &old) in kept_users.iter().enumerate() {
        user_map[old] = new as u32;
    }
    let mut item_map = vec![u32::MAX; matrix.num_items()];
    for (new, &old) in kept_items.iter().enumerate() {
        item_map[old] = new as u32;
    }
    let pairs: Vec<(u32, u32)> = matrix
        .pairs()
        .filter(|&(u, i)| user_alive[u as usize] && item_alive[i as usize])
        .map(|(u, i)| (user_map[u as usize], item_map[i as usize]))
        .collect();
    let filtered = InteractionMatrix::from_pairs(kept_users.len(), kept_items.len(), &pairs).expect("in range");
    (filtered, kept_users, kept_items)
}

impl Dataset {
    /// Writes `interactions.tsv` (index pairs) plus `user_ids.tsv` and
    /// `item_ids.tsv` (`original_id<TAB>index`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut body = String::with_capacity(self.matrix.nnz() * 12);
        for (u, i) in self.matrix.pairs() {
            body.push_str(&format!("{u}\t{i}\n"));
        }
        write_file(&dir.join("interactions.tsv"), body.as_bytes())?;
        write_file(&dir.join("user_ids.tsv"), id_map_text(&self.user_ids).as_bytes())?;
        write_file(&dir.join("item_ids.tsv"), id_map_text(&self.item_ids).as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let inter = dir.join("interactions.tsv");
        if !inter.exists() {
            return Err(Error::Data(format!("missing dataset file {}", inter.display())));
        }
        let user_ids = read_id_map(&dir.join("user_ids.tsv"))?;
        let item_ids = read_id_map(&dir.join("item_ids.tsv"))?;
        let text = fs::read_to_string(&inter).map_err(|e| Error::io(&inter, e))?;
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let parsed = (|| {
                let u = parts.next()?.trim().parse::<u32>().ok()?;
                let i = parts.next()?.trim().parse::<u32>().ok()?;
                Some((u, i))
            })();
            match parsed {
                Some(p) => pairs.push(p),
                None => {
                    return Err(Error::Parse {
                        path: inter.clone(),
                        line: no + 1,
                        detail: "expected `user_index<TAB>item_index`".into(),
                    })
                }
            }
        }
        let matrix = InteractionMatrix::from_pairs(user_ids.len(), item_ids.len(), &pairs)?;
        Ok(Dataset {
            matrix,
            user_ids,
            item_ids,
        })
    }

    /// Hex SHA-256 over both id maps; ties checkpoints to a dataset.
    pub fn id_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(id_map_text(&self.user_ids).as_bytes());
        h.update(b"\x00");
        h.update(id_map_text(&self.item_ids).as_bytes());
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn id_map_text(ids: &[String]) -> String {
    let mut s = String::new();
    for (idx, id) in ids.iter().enumerate() {
        s.push_str(&format!("{id}\t{idx}\n"));
    }
    s
}

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, idx) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            detail: "expected `original_id<TAB>index`".into(),
        })?;
        if idx.trim().parse::<usize>().ok() != Some(ids.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                detail: format!("index {idx:?} out of sequence"),
            });
        }
        ids.push(id.to_string());
    }
    Ok(ids)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Train / validation / test partition of one interaction matrix.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: InteractionMatrix,
    pub validation: InteractionMatrix,
    pub test: InteractionMatrix,
    pub seed: u64,
}

/// Per-user random split. Each user with `k ≥ 2` interactions sends
/// `k - ceil(k · train_ratio)` of them to the test pool (floor rounding for
/// test); users with fewer keep everything in train. A `valid_of_test`
/// fraction of the pooled test interactions, drawn uniformly across users,
/// becomes the validation set and is removed from test.
pub fn split(matrix: &InteractionMatrix, train_ratio: f64, valid_of_test: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!("train_ratio {train_ratio} outside (0, 1)")));
    }
    if !(valid_of_test > 0.0 && valid_of_test < 1.0) {
        return Err(Error::Config(format!("valid_of_test {valid_of_test} outside (0, 1)")));
    }
    let mut rng = RngState::derived(seed, 1);
    let mut train = Vec::with_capacity(matrix.nnz());
    let mut test = Vec::new();
    for u in 0..matrix.num_users() {
        let mut items: Vec<u32> = matrix.user_row(u).to_vec();
        let k = items.len();
        if k < 2 {
            train.extend(items.iter().map(|&i| (u as u32, i)));
            continue;
        }
        rng.shuffle(&mut items);
        let n_train = ((k as f64) * train_ratio - 1e-9).ceil() as usize;
        let n_train = n_train.clamp(1, k);
        for (pos, &i) in items.iter().enumerate() {
            if pos < n_train {
                train.push((u as u32, i));
            } else {
                test.push((u as u32, i));
            }
        }
    }
    rng.shuffle(&mut test);
    let n_valid = ((test.len() as f64) * valid_of_test).round() as usize;
    let validation = test.split_off(test.len() - n_valid);
    let (m, n) = (matrix.num_users(), matrix.num_items());
    Ok(DatasetSplit {
        train: InteractionMatrix::from_pairs(m, n, &train)?,
        validation: InteractionMatrix::from_pairs(m, n, &validation)?,
        test: InteractionMatrix::from_pairs(m, n, &test)?,
        seed,
    })
}

/// One minibatch of entities on a side with its dense interaction slab.
#[derive(Clone, Debug)]
pub struct Batch {
    pub side: Side,
    pub entities: Vec<usize>,
    pub slab: Tensor,
}

/// Seeded per-epoch shuffle of one side's entities, yielding batches whose
/// dense slabs are materialized lazily.
pub struct Batches<'a> {
    matrix: &'a InteractionMatrix,
    side: Side,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn make_batches(
    train: &InteractionMatrix,
    side: Side,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Batches<'_> {
    let mut order: Vec<usize> = (0..train.len(side)).collect();
    let stream = 2 + 2 * epoch + u64::from(side == Side::Item);
    RngState::derived(seed, stream).shuffle(&mut order);
    Batches {
        matrix: train,
        side,
        order,
        batch_size: batch_size.max(1),
        cursor: 0,
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let entities = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let slab = self.matrix.dense(self.side, &entities);
        Some(Batch {
            side: self.side,
            entities,
            slab,
        })
    }
}

/// Train-split adjacency: items of each user, users of each item.
#[derive(Clone, Debug)]
pub struct NeighborSets {
    pub user_items: Vec<BTreeSet<u32>>,
    pub item_users: Vec<BTreeSet<u32>>,
}

pub fn neighbor_sets(train: &InteractionMatrix) -> NeighborSets {
    NeighborSets {
        user_items: (0..train.num_users())
            .map(|u| train.user_row(u).iter().copied().collect())
            .collect(),
        item_users: (0..train.num_items())
            .map(|i| train.item_col(i).iter().copied().collect())
            .collect(),
    }
}

impl NeighborSets {
    pub fn of(&self, side: Side, entity: usize) -> &BTreeSet<u32> {
        match side {
            Side::User => &self.user_items[entity],
            Side::Item => &self.item_users[entity],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    /// Brute-force k-core: delete every under-degree vertex in full sweeps
    /// until a sweep deletes nothing.
    fn brute_k_core(pairs: &[(u32, u32)], ku: usize, ki: usize) -> BTreeSet<(u32, u32)> {
        let mut live: BTreeSet<(u32, u32)> = pairs.iter().copied().collect();
        loop {
            let mut udeg: HashMap<u32, usize> = HashMap::new();
            let mut ideg: HashMap<u32, usize> = HashMap::new();
            for &(u, i) in &live {
                *udeg.entry(u).or_default() += 1;
                *ideg.entry(i).or_default() += 1;
            }
            let next: BTreeSet<_> = live
                .iter()
                .copied()
                .filter(|(u, i)| udeg[u] >= ku && ideg[i] >= ki)
                .collect();
            if next == live {
                return live;
            }
            live = next;
        }
    }

    #[test]
    fn full_block_is_already_two_core() {
        let pairs: Vec<_> = (0..3).flat_map(|u| (0..3).map(move |i| (u, i))).collect();
        let m = InteractionMatrix::from_pairs(3, 3, &pairs).unwrap();
        let (f, ku, ki) = k_core(&m, 2, 2);
        assert_eq!(f, m);
        assert_eq!(f.nnz(), 9);
        assert_eq!((ku.len(), ki.len()), (3, 3));
    }

    #[test]
    fn chain_collapses_under_two_core() {
        // u0-i0, u1-i0, u1-i1: u0 and i1 have degree 1, after which u1 and i0 fall too.
        let pairs = vec![(0, 0), (1, 0), (1, 1)];
        let m = InteractionMatrix::from_pairs(2, 2, &pairs).unwrap();
        let (f, _, _) = k_core(&m, 2, 2);
        assert_eq!(f.nnz(), 0);
        assert!(brute_k_core(&pairs, 2, 2).is_empty());
    }

    proptest! {
        #[test]
        fn k_core_matches_brute_force(
            raw in prop::collection::vec((0u32..12, 0u32..10), 0..80),
            ku in 1usize..4,
            ki in 1usize..4,
        ) {
            let m = InteractionMatrix::from_pairs(12, 10, &raw).unwrap();
            let (f, kept_u, kept_i) = k_core(&m, ku, ki);
            let got: BTreeSet<(u32, u32)> = f
                .pairs()
                .map(|(u, i)| (kept_u[u as usize] as u32, kept_i[i as usize] as u32))
                .collect();
            prop_assert_eq!(got, brute_k_core(&raw, ku, ki));
        }

        #[test]
        fn row_and_column_views_agree(raw in prop::collection::vec((0u32..9, 0u32..7), 0..60)) {
            let m = InteractionMatrix::from_pairs(9, 7, &raw).unwrap();
            let from_rows: BTreeSet<_> = m.pairs().collect();
            let from_cols: BTreeSet<_> = (0..7u32)
                .flat_map(|i| m.item_col(i as usize).iter().map(move |&u| (u, i)))
                .collect();
            prop_assert_eq!(&from_rows, &from_cols);
            let ns = neighbor_sets(&m);
            for u in 0..9u32 {
                for i in 0..7u32 {
                    prop_assert_eq!(ns.user_items[u as usize].contains(&i), ns.item_users[i as usize].contains(&u));
                }
            }
            let su: usize = ns.user_items.iter().map(BTreeSet::len).sum();
            let si: usize = ns.item_users.iter().map(BTreeSet::len).sum();
            prop_assert_eq!(su, m.nnz());
            prop_assert_eq!(si, m.nnz());
        }

        #[test]
        fn split_conserves_and_is_disjoint(
            raw in prop::collection::vec((0u32..15, 0u32..20), 1..200),
            seed in 0u64..1000,
        ) {
            let m = InteractionMatrix::from_pairs(15, 20, &raw).unwrap();
            let s = split(&m, 0.8, 0.1, seed).unwrap();
            prop_assert_eq!(s.train.nnz() + s.validation.nnz() + s.test.nnz(), m.nnz());
            for (u, i) in s.test.pairs().chain(s.validation.pairs()) {
                prop_assert!(!s.train.contains(u as usize, i as usize));
                prop_assert!(m.contains(u as usize, i as usize));
            }
            for (u, i) in s.validation.pairs() {
                prop_assert!(!s.test.contains(u as usize, i as usize));
            }
            let pool = (s.validation.nnz() + s.test.nnz()) as f64;
            prop_assert!((s.validation.nnz() as f64 - 0.1 * pool).abs() <= 1.0);
        }
    }

    #[test]
    fn duplicates_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "a\tx\na\tx\nb\tx\n");
        let ds = ingest(&p, None, 1, 1).unwrap();
        assert_eq!(ds.matrix.nnz(), 2);
        assert_eq!(ds.user_ids, vec!["a", "b"]);
    }

    #[test]
    fn header_detection_and_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.csv", "userId,movieId,rating,timestamp\n1,10,4.0,99\n2,10,3.5,98\n");
        let ds = ingest(&p, None, 1, 1).unwrap();
        assert_eq!(ds.matrix.nnz(), 2);
        assert_eq!(ds.item_ids, vec!["10"]);

        let p = write(dir.path(), "r.dat", "1::1193::5::978300760\n1::661::3::978302109\n");
        let ds = ingest(&p, None, 1, 1).unwrap();
        assert_eq!((ds.matrix.num_users(), ds.matrix.num_items()), (1, 2));
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "1\t2\n3\t4\n5\n");
        match ingest(&p, None, 1, 1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_after_filtering_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.tsv", "1\t2\n3\t4\n");
        assert!(matches!(ingest(&p, None, 2, 2), Err(Error::Data(_))));
    }

    #[test]
    fn save_load_reingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..40).map(|k| format!("u{}\ti{}\n", k % 7, (k * 3) % 11)).collect();
        let p = write(dir.path(), "d.tsv", &body);
        let ds = ingest(&p, None, 2, 2).unwrap();
        ds.save(&dir.path().join("out")).unwrap();
        let back = Dataset::load(&dir.path().join("out")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.id_fingerprint(), ds.id_fingerprint());
    }

    #[test]
    fn split_rounding_examples() {
        let ten: Vec<_> = (0..10).map(|i| (0, i)).chain([(1, 0)]).collect();
        let m = InteractionMatrix::from_pairs(2, 10, &ten).unwrap();
        let s = split(&m, 0.8, 0.1, 3).unwrap();
        assert_eq!(s.train.user_row(0).len(), 8);
        assert_eq!(s.test.user_row(0).len() + s.validation.user_row(0).len(), 2);
        assert_eq!(s.train.user_row(1), &[0]);
        let again = split(&m, 0.8, 0.1, 3).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
        assert!(matches!(split(&m, 1.0, 0.1, 3), Err(Error::Config(_))));
        assert!(matches!(split(&m, 0.8, 0.0, 3), Err(Error::Config(_))));
    }

    #[test]
    fn batch_sizes_and_slabs() {
        let pairs: Vec<_> = (0..300u32).map(|u| (u, u % 17)).collect();
        let m = InteractionMatrix::from_pairs(300, 17, &pairs).unwrap();
        let sizes: Vec<_> = make_batches(&m, Side::User, 128, 1, 0).map(|b| b.entities.len()).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        for b in make_batches(&m, Side::Item, 5, 1, 0) {
            for (r, &i) in b.entities.iter().enumerate() {
                let ones: Vec<u32> = (0..300u32).filter(|&u| b.slab.get(r, u as usize) == 1.0).collect();
                assert_eq!(ones, m.item_col(i));
            }
        }
        let order = |epoch| make_batches(&m, Side::User, 300, 9, epoch).next().unwrap().entities;
        assert_eq!(order(0), order(0));
        assert_ne!(order(0), order(1));
    }

    #[test]
    fn singleton_neighbors() {
        let m = InteractionMatrix::from_pairs(1, 1, &[(0, 0)]).unwrap();
        let ns = neighbor_sets(&m);
        assert_eq!(ns.of(Side::User, 0).iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(ns.of(Side::Item, 0).iter().copied().collect::<Vec<_>>(), vec![0]);
    }
}
