//! TF-IDF document vectors over subword ids.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tokenizer::{TokenSequence, SPECIALS};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot fit TF-IDF on zero documents")]
    EmptyCorpus,
    #[error("malformed tfidf file: {0}")]
    Format(String),
    #[error("tfidf i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfModel {
    /// Vocabulary size; also the output dimensionality.
    pub dim: usize,
    pub documents: usize,
    /// Document frequency per term id (specials always 0).
    pub df: Vec<usize>,
    /// Smoothed idf per term id.
    pub idf: Vec<f64>,
    /// Use `1 + ln(tf)` instead of raw counts.
    pub sublinear_tf: bool,
}

fn term_counts(doc: &TokenSequence) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for id in doc.content_ids() {
        *counts.entry(id as usize).or_default() += 1;
    }
    counts
}

/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`, over unmasked non-special ids.
pub fn fit_tfidf(docs: &[TokenSequence], vocab_size: usize) -> Result<TfIdfModel> {
    if docs.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut df = vec![0usize; vocab_size];
    for doc in docs {
        for (&t, _) in term_counts(doc).iter() {
            if t < vocab_size {
                df[t] += 1;
            }
        }
    }
    Ok(TfIdfModel::from_df(df, docs.len()))
}

impl TfIdfModel {
    pub fn from_df(df: Vec<usize>, documents: usize) -> Self {
        let n = documents as f64;
        let idf = df
            .iter()
            .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self {
            dim: df.len(),
            documents,
            df,
            idf,
            sublinear_tf: false,
        }
    }

    /// Weighted, L2-normalized vector. Terms unseen in training (df = 0)
    /// and out-of-range ids contribute nothing.
    pub fn transform(&self, doc: &TokenSequence) -> SparseVector {
        let mut entries: Vec<(usize, f64)> = term_counts(doc)
            .into_iter()
            .filter(|&(t, _)| t < self.dim && self.df[t] > 0)
            .map(|(t, c)| {
                let tf = if self.sublinear_tf {
                    1.0 + (c as f64).ln()
                } else {
                    c as f64
                };
                (t, tf * self.idf[t])
            })
            .collect();
        let norm = entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        SparseVector {
            dim: self.dim,
            entries,
        }
    }

    /// `tfidf.tsv`: header line with the document count, then one
    /// `term_id<TAB>idf<TAB>df` line per seen term.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# dim={} documents={} sublinear_tf={}\nterm_id\tidf\tdf\n",
            self.dim, self.documents, self.sublinear_tf
        );
        for t in SPECIALS.len()..self.dim {
            if self.df[t] > 0 {
                s.push_str(&format!("{t}\t{:?}\t{}\n", self.idf[t], self.df[t]));
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: &str| FeatureError::Format(m.to_string());
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut dim = None;
        let mut documents = None;
        let mut sublinear = false;
        for kv in meta.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("dim", v)) => dim = v.parse().ok(),
                Some(("documents", v)) => documents = v.parse().ok(),
                Some(("sublinear_tf", v)) => sublinear = v == "true",
                _ => {}
            }
        }
        let (dim, documents): (usize, usize) = (
            dim.ok_or_else(|| bad("missing dim"))?,
            documents.ok_or_else(|| bad("missing documents"))?,
        );
        if lines.next() != Some("term_id\tidf\tdf") {
            return Err(bad("missing column header"));
        }
        let mut df = vec![0usize; dim];
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(&format!("bad row `{line}`")));
            }
            let t: usize = cols[0].parse().map_err(|_| bad("bad term id"))?;
            if t >= dim {
                return Err(bad("term id out of range"));
            }
            df[t] = cols[2].parse().map_err(|_| bad("bad df"))?;
        }
        let mut model = TfIdfModel::from_df(df, documents);
        model.sublinear_tf = sublinear;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u32 = 10;
    const B: u32 = 11;
    const C: u32 = 12;

    fn doc(ids: &[u32]) -> TokenSequence {
        let mut v = vec![2];
        v.extend_from_slice(ids);
        v.push(3);
        let mut mask = vec![1; v.len()];
        v.extend([0, 0]);
        mask.extend([0, 0]);
        TokenSequence { ids: v, mask }
    }

    #[test]
    fn idf_values() {
        // ln(3/3)+1 and ln(3/2)+1
        let m = fit_tfidf(&[doc(&[A, B]), doc(&[A, C])], 16).unwrap();
        assert_eq!(m.idf[A as usize], 1.0);
        assert!((m.idf[B as usize] - 1.405_465_108_108_164_4).abs() < 1e-12);
        assert_eq!(m.df[2], 0, "specials never counted");
    }

    #[test]
    fn transform_normalizes() {
        let m = fit_tfidf(&[doc(&[A, B]), doc(&[A, C])], 16).unwrap();
        let v = m.transform(&doc(&[A, B]));
        // (1, 1.405465) / 1.724924
        assert!((v.get(A as usize) - 0.579_738_671_537_665_7).abs() < 1e-9);
        assert!((v.get(B as usize) - 0.814_802_474_667_168_9).abs() < 1e-9);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_count_twice() {
        let m = fit_tfidf(&[doc(&[A, B]), doc(&[A, C])], 16).unwrap();
        let v = m.transform(&doc(&[A, A, B]));
        let ratio = v.get(A as usize) / v.get(B as usize);
        assert!((ratio - 2.0 / m.idf[B as usize]).abs() < 1e-12);
    }

    #[test]
    fn empty_and_unknown() {
        assert!(matches!(fit_tfidf(&[], 8), Err(FeatureError::EmptyCorpus)));
        let m = fit_tfidf(&[doc(&[])], 16).unwrap();
        let v = m.transform(&doc(&[A, 200]));
        assert!(v.entries.is_empty());
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn tsv_round_trip() {
        let m = fit_tfidf(&[doc(&[A, B]), doc(&[A, C, C])], 16).unwrap();
        let back = TfIdfModel::from_tsv(&m.to_tsv()).unwrap();
        assert_eq!(back, m);
    }
}
