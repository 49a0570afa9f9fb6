//! Hamming ranking and mean average precision for the two cross-modal tasks.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{hamming, CodeMatrix, HashModel};
use crate::error::{Error, Result};
use crate::labels::LabelMatrix;

/// Modality index used for images.
pub const IMAGE: usize = 0;
/// Modality index used for texts.
pub const TEXT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Task {
    /// Image queries against a text database.
    #[serde(rename = "I2T")]
    ImageToText,
    /// Text queries against an image database.
    #[serde(rename = "T2I")]
    TextToImage,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::ImageToText, Task::TextToImage];

    pub fn query_modality(self) -> usize {
        match self {
            Task::ImageToText => IMAGE,
            Task::TextToImage => TEXT,
        }
    }

    pub fn database_modality(self) -> usize {
        match self {
            Task::ImageToText => TEXT,
            Task::TextToImage => IMAGE,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ImageToText => "I2T",
            Task::TextToImage => "T2I",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I2T" => Ok(Task::ImageToText),
            "T2I" => Ok(Task::TextToImage),
            other => Err(Error::InvalidArgument(format!(
                "unknown task {other:?}, expected I2T or T2I"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    pub codes: CodeMatrix,
    pub labels: LabelMatrix,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub per_query: Vec<f64>,
    pub map: f64,
    pub cutoff: usize,
}

/// Database indices by ascending Hamming distance, ties by ascending index.
///
/// Counting sort over the `r + 1` possible distances.
pub fn hamming_rank(query: &[u64], db: &CodeMatrix) -> Result<Vec<usize>> {
    if query.len() != db.words_per_code() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} code words, database codes have {}",
            query.len(),
            db.words_per_code()
        )));
    }
    let distances: Vec<u32> = db.iter().map(|c| hamming(query, c)).collect();
    let mut starts = vec![0usize; db.bits() + 2];
    for &d in &distances {
        starts[d as usize + 1] += 1;
    }
    for i in 1..starts.len() {
        starts[i] += starts[i - 1];
    }
    let mut order = vec![0usize; distances.len()];
    for (j, &d) in distances.iter().enumerate() {
        order[starts[d as usize]] = j;
        starts[d as usize] += 1;
    }
    Ok(order)
}

/// `(1/l) Σ_{k ≤ R} P(k) δ(k)` where `l` counts relevant items in the top `R`,
/// `P(k)` is the precision of the top `k` and `δ(k)` flags relevance at rank `k`.
/// Zero when nothing relevant is retrieved.
pub fn average_precision(relevant: &[bool], cutoff: usize) -> Result<f64> {
    if cutoff > relevant.len() {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff} exceeds the {} ranked items",
            relevant.len()
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in relevant[..cutoff].iter().enumerate().filter(|(_, r)| **r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// Mean of per-query average precision at `cutoff` (the whole database when
/// `None`). A database item is relevant when it shares a category with the query.
pub fn mean_ap(
    queries: &QuerySet,
    db_codes: &CodeMatrix,
    db_labels: &LabelMatrix,
    cutoff: Option<usize>,
) -> Result<ApResult> {
    if queries.codes.bits() != db_codes.bits() {
        return Err(Error::DimensionMismatch(format!(
            "query codes have {} bits, database codes {}",
            queries.codes.bits(),
            db_codes.bits()
        )));
    }
    if queries.codes.len() != queries.labels.len() || db_codes.len() != db_labels.len() {
        return Err(Error::DimensionMismatch(
            "codes and labels disagree on the sample count".into(),
        ));
    }
    if queries.labels.categories() != db_labels.categories() {
        return Err(Error::DimensionMismatch(format!(
            "queries have {} categories, database {}",
            queries.labels.categories(),
            db_labels.categories()
        )));
    }
    let cutoff = cutoff.unwrap_or(db_codes.len());
    let query_masks = queries.labels.masks();
    let db_masks = db_labels.masks();
    let per_query = (0..queries.codes.len())
        .into_par_iter()
        .map(|q| {
            let order = hamming_rank(queries.codes.code(q), db_codes)?;
            let relevant: Vec<bool> = order
                .iter()
                .map(|&j| query_masks[q].iter().zip(&db_masks[j]).any(|(a, b)| a & b != 0))
                .collect();
            average_precision(&relevant, cutoff)
        })
        .collect::<Result<Vec<f64>>>()?;
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    };
    Ok(ApResult { per_query, map, cutoff })
}

/// Encodes queries and database with the model's hash functions for `task`
/// and scores the ranking. Features are raw `d_m × n` matrices indexed by modality.
pub fn evaluate_task(
    model: &HashModel,
    task: Task,
    query_features: &[DMatrix<f64>],
    query_labels: &LabelMatrix,
    db_features: &[DMatrix<f64>],
    db_labels: &LabelMatrix,
    cutoff: Option<usize>,
) -> Result<ApResult> {
    let fetch = |set: &[DMatrix<f64>], m: usize| -> Result<DMatrix<f64>> {
        set.get(m)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("task {task} needs modality {m}, only {} given", set.len())))
    };
    let queries = QuerySet {
        codes: model.encode_batch(&fetch(query_features, task.query_modality())?, task.query_modality())?,
        labels: query_labels.clone(),
        task,
    };
    let db = model.encode_batch(&fetch(db_features, task.database_modality())?, task.database_modality())?;
    mean_ap(&queries, &db, db_labels, cutoff)
}

/// One cell of a results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapEntry {
    pub task: Task,
    pub bits: usize,
    pub map: f64,
}

/// Task-by-code-length MAP table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MapTable {
    pub entries: Vec<MapEntry>,
}

impl MapTable {
    pub fn push(&mut self, task: Task, bits: usize, map: f64) {
        self.entries.push(MapEntry { task, bits, map });
    }

    fn axes(&self) -> (Vec<Task>, Vec<usize>) {
        let mut tasks: Vec<Task> = Vec::new();
        let mut bits: Vec<usize> = Vec::new();
        for e in &self.entries {
            if !tasks.contains(&e.task) {
                tasks.push(e.task);
            }
            if !bits.contains(&e.bits) {
                bits.push(e.bits);
            }
        }
        bits.sort_unstable();
        (tasks, bits)
    }

    fn get(&self, task: Task, bits: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.bits == bits)
            .map(|e| e.map)
    }

    /// Tab-separated table with one row per task and one column per code length.
    pub fn to_text(&self) -> String {
        let (tasks, bits) = self.axes();
        let mut out = String::from("Task");
        for b in &bits {
            out.push_str(&format!("\t{b}"));
        }
        out.push('\n');
        for t in tasks {
            out.push_str(&t.to_string());
            for &b in &bits {
                match self.get(t, b) {
                    Some(v) => out.push_str(&format!("\t{v:.4}")),
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,bits,map\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.task, e.bits, e.map));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::pack;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn codes(rows: &[Vec<i8>]) -> CodeMatrix {
        CodeMatrix::from_codes(rows, rows[0].len()).unwrap()
    }

    #[test]
    fn exact_match_ranks_first_and_complement_last() {
        let q = vec![1, -1, 1, 1];
        let comp: Vec<i8> = q.iter().map(|v| -v).collect();
        let db = codes(&[comp.clone(), vec![1, 1, 1, 1], q.clone(), comp]);
        let order = hamming_rank(&pack(&q), &db).unwrap();
        assert_eq!(order, vec![2, 1, 0, 3]);
        assert_eq!(hamming(&pack(&q), db.code(3)), 4);
    }

    #[test]
    fn rank_rejects_length_mismatch() {
        let db = codes(&[vec![1; 70]]);
        assert!(hamming_rank(&[0], &db).is_err());
    }

    #[test]
    fn rank_matches_naive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<i8>> = (0..100)
            .map(|_| (0..16).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect())
            .collect();
        let db = codes(&rows);
        let q: Vec<i8> = (0..16).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let mut naive: Vec<(usize, usize)> = rows
            .iter()
            .enumerate()
            .map(|(j, r)| (r.iter().zip(&q).filter(|(a, b)| a != b).count(), j))
            .collect();
        naive.sort();
        let expect: Vec<usize> = naive.into_iter().map(|(_, j)| j).collect();
        assert_eq!(hamming_rank(&pack(&q), &db).unwrap(), expect);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true, true, true], 3).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true], 3).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false; 3], 3).unwrap(), 0.0);
        assert!(average_precision(&[true], 2).is_err());
        assert_eq!(average_precision(&[false, true], 1).unwrap(), 0.0);
    }

    #[test]
    fn perfect_self_retrieval() {
        let labels = LabelMatrix::from_indices(&[0, 1, 2, 3], 4).unwrap();
        let c = codes(&[vec![1, 1], vec![1, -1], vec![-1, 1], vec![-1, -1]]);
        let q = QuerySet {
            codes: c.clone(),
            labels: labels.clone(),
            task: Task::ImageToText,
        };
        let res = mean_ap(&q, &c, &labels, None).unwrap();
        assert_eq!(res.map, 1.0);
        assert_eq!(res.cutoff, 4);
    }

    #[test]
    fn zero_relevant_queries_count_as_zero() {
        let db_labels = LabelMatrix::from_indices(&[0, 0], 2).unwrap();
        let q_labels = LabelMatrix::from_indices(&[0, 1], 2).unwrap();
        let c = codes(&[vec![1], vec![-1]]);
        let q = QuerySet {
            codes: c.clone(),
            labels: q_labels,
            task: Task::TextToImage,
        };
        assert_eq!(mean_ap(&q, &c, &db_labels, None).unwrap().map, 0.5);
    }

    #[test]
    fn table_layout() {
        let mut t = MapTable::default();
        t.push(Task::ImageToText, 32, 0.5);
        t.push(Task::ImageToText, 16, 0.25);
        t.push(Task::TextToImage, 16, 0.75);
        assert_eq!(t.to_text(), "Task\t16\t32\nI2T\t0.2500\t0.5000\nT2I\t0.7500\t-\n");
        assert_eq!(t.to_csv().lines().count(), 4);
        assert_eq!("t2i".parse::<Task>().unwrap(), Task::TextToImage);
    }

    proptest! {
        #[test]
        fn moving_a_relevant_item_earlier_never_hurts(
            flags in proptest::collection::vec(any::<bool>(), 2..40),
            pick in any::<proptest::sample::Index>(),
        ) {
            let base = average_precision(&flags, flags.len()).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            let positions: Vec<usize> = (1..flags.len()).filter(|&i| flags[i] && !flags[i - 1]).collect();
            prop_assume!(!positions.is_empty());
            let i = positions[pick.index(positions.len())];
            let mut moved = flags.clone();
            moved.swap(i, i - 1);
            prop_assert!(average_precision(&moved, flags.len()).unwrap() >= base);
        }

        #[test]
        fn relevant_first_is_perfect(n_rel in 1usize..20, n_irr in 0usize..20) {
            let mut flags = vec![true; n_rel];
            flags.extend(vec![false; n_irr]);
            prop_assert_eq!(average_precision(&flags, flags.len()).unwrap(), 1.0);
        }
    }
}
