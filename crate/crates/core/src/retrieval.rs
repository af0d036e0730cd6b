//! Bit-packed binary codes, Hamming ranking and retrieval metrics.
//!
//! Bit `b` of a code lives in byte `b / 8` at position `b % 8` (LSB first);
//! a set bit means `+1`. Internally rows are stored as little-endian `u64`
//! words, which preserves that layout.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::error::{Result, WchError};
use crate::io::{expect_magic, read_u16, read_u64, FORMAT_VERSION};
use crate::tensor::Tensor;

pub const CODE_MAGIC: &[u8; 4] = b"WCHC";

/// Immutable set of packed `±1` codes with item identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSet {
    code_length: usize,
    words_per_row: usize,
    words: Vec<u64>,
    ids: Vec<u64>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn bytes_for(bits: usize) -> usize {
    bits.div_ceil(8)
}

impl CodeSet {
    /// Pack a `count × l` tensor of exact `±1` values; ids are `0..count`.
    pub fn pack(codes: &Tensor) -> Result<Self> {
        let sh = codes.shape();
        if sh.len() != 2 {
            return Err(WchError::dim("pack", sh, &[0, 0]));
        }
        let (count, l) = (sh[0], sh[1]);
        let wpr = words_for(l);
        let mut words = vec![0u64; count * wpr];
        for (r, row) in codes.data().chunks(l.max(1)).take(count).enumerate() {
            for (b, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    words[r * wpr + b / 64] |= 1 << (b % 64);
                } else if v != -1.0 {
                    return Err(WchError::Encoding(format!(
                        "code value {v} at row {r}, bit {b} is not ±1"
                    )));
                }
            }
        }
        Ok(Self {
            code_length: l,
            words_per_row: wpr,
            words,
            ids: (0..count as u64).collect(),
        })
    }

    /// Build from packed bytes (`count × ceil(l/8)`), validating pad bits and ids.
    pub fn from_bytes(code_length: usize, bytes: &[u8], ids: Vec<u64>) -> Result<Self> {
        let bpr = bytes_for(code_length);
        let count = ids.len();
        if bytes.len() != count * bpr {
            return Err(WchError::Format(format!(
                "expected {} packed bytes for {count} codes of {code_length} bits, got {}",
                count * bpr,
                bytes.len()
            )));
        }
        let wpr = words_for(code_length);
        let mut words = vec![0u64; count * wpr];
        for (r, row) in bytes.chunks(bpr.max(1)).take(count).enumerate() {
            for (i, &byte) in row.iter().enumerate() {
                words[r * wpr + i / 8] |= u64::from(byte) << (8 * (i % 8));
            }
            let pad = code_length % 64;
            if pad != 0 && words[r * wpr + wpr - 1] >> pad != 0 {
                return Err(WchError::Format(format!("non-zero pad bits in code {r}")));
            }
        }
        let mut seen = HashSet::with_capacity(count);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(WchError::Format(format!("duplicate id {dup}")));
        }
        Ok(Self {
            code_length,
            words_per_row: wpr,
            words,
            ids,
        })
    }

    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(WchError::dim("with_ids", &[ids.len()], &[self.len()]));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(WchError::Format(format!("duplicate id {dup}")));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_length(&self) -> usize {
        self.code_length
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, index: usize) -> &[u64] {
        &self.words[index * self.words_per_row..(index + 1) * self.words_per_row]
    }

    /// Packed bytes of one row, LSB-first.
    pub fn row_bytes(&self, index: usize) -> Vec<u8> {
        self.row(index)
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(bytes_for(self.code_length))
            .collect()
    }

    /// `count × l` tensor of `±1`.
    pub fn unpack(&self) -> Tensor {
        let l = self.code_length;
        let mut data = Vec::with_capacity(self.len() * l);
        for r in 0..self.len() {
            let row = self.row(r);
            data.extend((0..l).map(|b| if row[b / 64] >> (b % 64) & 1 == 1 { 1.0 } else { -1.0 }));
        }
        Tensor::new(&[self.len(), l], data).expect("shape matches data")
    }

    /// Codes selected by position.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let mut words = Vec::with_capacity(positions.len() * self.words_per_row);
        for &p in positions {
            words.extend_from_slice(self.row(p));
        }
        Self {
            code_length: self.code_length,
            words_per_row: self.words_per_row,
            words,
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }
}

/// Hamming distance between two packed rows of equal width.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(WchError::dim("hamming", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Hamming distance between two byte-packed rows of equal width.
pub fn hamming_bytes(a: &[u8], b: &[u8]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(WchError::dim("hamming", &[a.len()], &[b.len()]));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum())
}

/// Database positions of the `k` nearest codes to `query`, by ascending
/// Hamming distance and then ascending id.
pub fn rank_one(query: &[u64], database: &CodeSet, k: usize) -> Result<Vec<usize>> {
    if query.len() != database.words_per_row {
        return Err(WchError::dim("rank", &[query.len()], &[database.words_per_row]));
    }
    let k = k.min(database.len());
    let mut keyed: Vec<(u32, u64, u32)> = Vec::with_capacity(database.len());
    match database.words_per_row {
        1 => {
            let q = query[0];
            for (pos, (&w, &id)) in database.words.iter().zip(&database.ids).enumerate() {
                keyed.push(((q ^ w).count_ones(), id, pos as u32));
            }
        }
        _ => {
            for (pos, (row, &id)) in database
                .words
                .chunks(database.words_per_row)
                .zip(&database.ids)
                .enumerate()
            {
                let d = row.iter().zip(query).map(|(x, y)| (x ^ y).count_ones()).sum();
                keyed.push((d, id, pos as u32));
            }
        }
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < keyed.len() {
        keyed.select_nth_unstable(k - 1);
        keyed.truncate(k);
    }
    keyed.sort_unstable();
    Ok(keyed.into_iter().map(|(_, _, pos)| pos as usize).collect())
}

/// Top-`k` database positions for every query.
pub fn rank(queries: &CodeSet, database: &CodeSet, k: usize) -> Result<Vec<Vec<usize>>> {
    if queries.code_length != database.code_length {
        return Err(WchError::dim("rank", &[queries.code_length], &[database.code_length]));
    }
    if k > database.len() {
        return Err(WchError::Parameter(format!(
            "k = {k} exceeds database size {}",
            database.len()
        )));
    }
    (0..queries.len())
        .map(|q| rank_one(queries.row(q), database, k))
        .collect()
}

/// Aggregate retrieval metrics; serialized as `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map: f64,
    pub map_at_k: BTreeMap<usize, f64>,
    pub p_at_k: BTreeMap<usize, f64>,
    /// Mean `[recall, precision]` over evaluated queries at every rank.
    pub pr_curve: Vec<[f64; 2]>,
    pub excluded_queries: usize,
}

/// Average precision of a relevance list truncated at `cutoff`, divided by
/// `min(cutoff, total_relevant)`.
pub fn average_precision(relevance: &[bool], total_relevant: usize, cutoff: usize) -> f64 {
    let denom = cutoff.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (r, &rel) in relevance.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (r + 1) as f64;
        }
    }
    acc / denom as f64
}

/// Fraction of relevant items among the first `k` (or fewer, if the list is shorter).
pub fn precision_at(relevance: &[bool], k: usize) -> f64 {
    let k = k.min(relevance.len());
    if k == 0 {
        return 0.0;
    }
    relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64
}

/// Metrics over full-depth relevance lists. `total_relevant[q]` counts all
/// relevant database items for query `q`; queries with none are excluded.
pub fn evaluate(relevance: &[Vec<bool>], total_relevant: &[usize], ks: &[usize]) -> Result<Metrics> {
    if relevance.len() != total_relevant.len() {
        return Err(WchError::dim("evaluate", &[relevance.len()], &[total_relevant.len()]));
    }
    let kept: Vec<usize> = (0..relevance.len()).filter(|&q| total_relevant[q] > 0).collect();
    let excluded_queries = relevance.len() - kept.len();
    let mean = |f: &dyn Fn(usize) -> f64| -> f64 {
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().map(|&q| f(q)).sum::<f64>() / kept.len() as f64
        }
    };
    let map = mean(&|q| average_precision(&relevance[q], total_relevant[q], usize::MAX));
    let mut map_at_k = BTreeMap::new();
    let mut p_at_k = BTreeMap::new();
    for &k in ks {
        map_at_k.insert(k, mean(&|q| average_precision(&relevance[q], total_relevant[q], k)));
        p_at_k.insert(k, mean(&|q| precision_at(&relevance[q], k)));
    }
    let depth = kept.iter().map(|&q| relevance[q].len()).min().unwrap_or(0);
    let mut pr_curve = vec![[0.0; 2]; depth];
    for &q in &kept {
        let mut hits = 0usize;
        for (r, point) in pr_curve.iter_mut().enumerate() {
            hits += usize::from(relevance[q][r]);
            point[0] += hits as f64 / total_relevant[q] as f64;
            point[1] += hits as f64 / (r + 1) as f64;
        }
    }
    for point in &mut pr_curve {
        point[0] /= kept.len() as f64;
        point[1] /= kept.len() as f64;
    }
    Ok(Metrics {
        map,
        map_at_k,
        p_at_k,
        pr_curve,
        excluded_queries,
    })
}

/// Rank every query against the full database and score with label-set
/// intersection as relevance. Labels are indexed by position.
pub fn evaluate_codes(
    queries: &CodeSet,
    query_labels: &[LabelSet],
    database: &CodeSet,
    database_labels: &[LabelSet],
    ks: &[usize],
) -> Result<Metrics> {
    if queries.len() != query_labels.len() {
        return Err(WchError::dim(
            "evaluate_codes queries",
            &[queries.len()],
            &[query_labels.len()],
        ));
    }
    if database.len() != database_labels.len() {
        return Err(WchError::dim(
            "evaluate_codes database",
            &[database.len()],
            &[database_labels.len()],
        ));
    }
    let ranked = rank(queries, database, database.len())?;
    let mut relevance = Vec::with_capacity(queries.len());
    let mut totals = Vec::with_capacity(queries.len());
    for (q, order) in ranked.iter().enumerate() {
        let ql = &query_labels[q];
        relevance.push(order.iter().map(|&p| ql.intersects(&database_labels[p])).collect());
        totals.push(database_labels.iter().filter(|l| ql.intersects(l)).count());
    }
    evaluate(&relevance, &totals, ks)
}

pub fn write_codes(w: &mut impl Write, codes: &CodeSet) -> Result<()> {
    let l = u16::try_from(codes.code_length)
        .map_err(|_| WchError::Encoding(format!("code length {} exceeds u16", codes.code_length)))?;
    w.write_all(CODE_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(codes.len() as u64).to_le_bytes())?;
    w.write_all(&l.to_le_bytes())?;
    for r in 0..codes.len() {
        w.write_all(&codes.row_bytes(r))?;
    }
    Ok(())
}

/// Reads codes with implicit ids `0..count`.
pub fn read_codes(r: &mut impl Read) -> Result<CodeSet> {
    expect_magic(r, CODE_MAGIC)?;
    let count = read_u64(r)? as usize;
    let l = usize::from(read_u16(r)?);
    let mut bytes = vec![0u8; count * bytes_for(l)];
    r.read_exact(&mut bytes)?;
    CodeSet::from_bytes(l, &bytes, (0..count as u64).collect())
}

/// Sidecar id-map path for a code file.
pub fn id_map_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    PathBuf::from(s)
}

/// Writes the code file, plus an id-map sidecar when ids are not `0..count`.
pub fn save_codes(path: impl AsRef<Path>, codes: &CodeSet) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    write_codes(&mut w, codes)?;
    w.flush()?;
    let implicit = codes.ids.iter().enumerate().all(|(i, &id)| id == i as u64);
    let sidecar = id_map_path(path);
    if !implicit {
        std::fs::write(&sidecar, serde_json::to_vec(&codes.ids)?)?;
    } else if sidecar.exists() {
        std::fs::remove_file(&sidecar)?;
    }
    Ok(())
}

/// Reads a code file and its id-map sidecar if present.
pub fn load_codes(path: impl AsRef<Path>) -> Result<CodeSet> {
    let path = path.as_ref();
    let codes = read_codes(&mut BufReader::new(File::open(path)?))?;
    let sidecar = id_map_path(path);
    if sidecar.exists() {
        let ids: Vec<u64> = serde_json::from_slice(&std::fs::read(sidecar)?)?;
        return codes.with_ids(ids);
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(rows: &[&[f64]]) -> CodeSet {
        let rows: Vec<Vec<crate::tensor::Real>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v as crate::tensor::Real).collect())
            .collect();
        CodeSet::pack(&Tensor::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn packs_lsb_first() {
        let c = codes(&[&[1.0, 1.0, -1.0, -1.0]]);
        assert_eq!(c.row_bytes(0), vec![0b0000_0011]);
        let z = codes(&[&[-1.0; 12]]);
        assert_eq!(z.row_bytes(0), vec![0, 0]);
    }

    #[test]
    fn rejects_non_sign_values() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(CodeSet::pack(&t), Err(WchError::Encoding(_))));
    }

    #[test]
    fn hamming_examples() {
        let c = codes(&[&[1.0, 1.0, -1.0, -1.0], &[1.0, -1.0, -1.0, 1.0]]);
        assert_eq!(hamming(c.row(0), c.row(1)).unwrap(), 2);
        assert_eq!(hamming(c.row(0), c.row(0)).unwrap(), 0);
        assert!(hamming(&[0], &[0, 0]).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        let ap = average_precision(&[true, false, true], 2, usize::MAX);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true, true], 3, 2), 1.0);
        assert_eq!(precision_at(&[false, false, true], 2), 0.0);
        assert!(average_precision(&[false, false, true], 1, usize::MAX) > 0.0);
    }

    #[test]
    fn queries_without_relevant_items_are_excluded() {
        let m = evaluate(&[vec![true, false], vec![false, false]], &[1, 0], &[1]).unwrap();
        assert_eq!(m.excluded_queries, 1);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.p_at_k[&1], 1.0);
        assert_eq!(m.pr_curve, vec![[1.0, 1.0], [1.0, 0.5]]);
    }

    #[test]
    fn rank_breaks_ties_by_id() {
        let db = codes(&[&[1.0, -1.0], &[-1.0, 1.0], &[1.0, 1.0], &[-1.0, -1.0]])
            .with_ids(vec![30, 20, 10, 0])
            .unwrap();
        let q = codes(&[&[1.0, 1.0]]);
        // distances 1,1,0,2; ids 30,20 tie at distance 1
        assert_eq!(rank(&q, &db, 4).unwrap(), vec![vec![2, 1, 0, 3]]);
        assert_eq!(rank(&q, &db, 2).unwrap(), vec![vec![2, 1]]);
        assert!(rank(&q, &db, 5).is_err());
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wchc");
        let c = codes(&[&[1.0; 10], &[-1.0; 10]]).with_ids(vec![7, 3]).unwrap();
        save_codes(&path, &c).unwrap();
        assert_eq!(load_codes(&path).unwrap(), c);
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"WCHC");
        assert_eq!(raw.len(), 4 + 1 + 8 + 2 + 2 * 2);
    }

    #[test]
    fn pad_bits_must_be_zero() {
        let r = CodeSet::from_bytes(4, &[0b1001_0000], vec![0]);
        assert!(matches!(r, Err(WchError::Format(_))));
    }
}
