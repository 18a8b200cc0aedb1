use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::source::SourceSpec;

/// All votes for a dataset: per source a dense column of `n × s_j` values in
/// {−1, 0, +1}, 0 meaning the source abstained on that task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTensor {
    seq_ids: Vec<u64>,
    columns: Vec<SourceColumn>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SourceColumn {
    arity: usize,
    data: Vec<i8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VoteRow {
    seq_id: u64,
    source_id: usize,
    task_index: usize,
    vote: i8,
}

impl VoteTensor {
    /// An all-abstain tensor for `n` sequences with ids `0..n`.
    pub fn new(n: usize, sources: &[SourceSpec]) -> VoteTensor {
        VoteTensor::with_ids((0..n as u64).collect(), sources)
    }

    pub fn with_ids(seq_ids: Vec<u64>, sources: &[SourceSpec]) -> VoteTensor {
        let n = seq_ids.len();
        let columns = sources
            .iter()
            .map(|s| SourceColumn {
                arity: s.arity(),
                data: vec![0; n * s.arity()],
            })
            .collect();
        VoteTensor { seq_ids, columns }
    }

    pub fn n(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn n_sources(&self) -> usize {
        self.columns.len()
    }

    pub fn seq_ids(&self) -> &[u64] {
        &self.seq_ids
    }

    pub fn arity(&self, source: usize) -> usize {
        self.columns[source].arity
    }

    #[inline]
    pub fn get(&self, seq: usize, source: usize, slot: usize) -> i8 {
        let col = &self.columns[source];
        col.data[seq * col.arity + slot]
    }

    pub fn set(&mut self, seq: usize, source: usize, slot: usize, vote: i8) -> Result<()> {
        if !matches!(vote, -1 | 0 | 1) {
            return Err(Error::Validate(format!(
                "vote {vote} outside {{-1, 0, 1}} for sequence {seq}, source {source}"
            )));
        }
        let col = &mut self.columns[source];
        col.data[seq * col.arity + slot] = vote;
        Ok(())
    }

    /// The dense data column of one source, laid out sequence-major.
    #[inline]
    pub fn column(&self, source: usize) -> &[i8] {
        &self.columns[source].data
    }

    /// Reads the vote file format: CSV with header
    /// `seq_id,source_id,task_index,vote`, source and task indices 1-based,
    /// any (seq, source, task) triple absent from the file an abstention.
    pub fn read_csv<R: io::Read>(reader: R, sources: &[SourceSpec]) -> Result<VoteTensor> {
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        {
            let headers = csv
                .headers()
                .map_err(|e| Error::Parse(format!("votes file: {e}")))?;
            let expected = ["seq_id", "source_id", "task_index", "vote"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(Error::Parse(format!(
                    "votes file header {:?} must be {expected:?}",
                    headers.iter().collect::<Vec<_>>()
                )));
            }
        }
        let mut rows: Vec<VoteRow> = Vec::new();
        for record in csv.deserialize() {
            let row: VoteRow = record.map_err(|e| Error::Parse(format!("votes file: {e}")))?;
            rows.push(row);
        }
        let mut ids: Vec<u64> = rows.iter().map(|r| r.seq_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let index_of: BTreeMap<u64, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut tensor = VoteTensor::with_ids(ids, sources);
        let mut filled = std::collections::BTreeSet::new();
        for row in &rows {
            if row.source_id == 0 || row.source_id > sources.len() {
                return Err(Error::Validate(format!(
                    "votes file references source {} (have {} sources, ids are 1-based)",
                    row.source_id,
                    sources.len()
                )));
            }
            let source = &sources[row.source_id - 1];
            if row.task_index == 0 {
                return Err(Error::Validate(
                    "votes file task_index 0: task indices are 1-based".into(),
                ));
            }
            let slot = source.slot_of(row.task_index - 1).ok_or_else(|| {
                Error::Validate(format!(
                    "source {} does not cover task {}",
                    row.source_id, row.task_index
                ))
            })?;
            if !matches!(row.vote, -1 | 0 | 1) {
                return Err(Error::Validate(format!(
                    "vote {} outside {{-1, 0, 1}} (sequence {}, source {})",
                    row.vote, row.seq_id, row.source_id
                )));
            }
            if !filled.insert((row.seq_id, row.source_id, row.task_index)) {
                return Err(Error::Validate(format!(
                    "duplicate vote row for sequence {}, source {}, task {}",
                    row.seq_id, row.source_id, row.task_index
                )));
            }
            let seq = index_of[&row.seq_id];
            tensor.set(seq, row.source_id - 1, slot, row.vote)?;
        }
        Ok(tensor)
    }

    /// Writes every (sequence, source, task) cell, abstentions included, in
    /// canonical (sequence, source, slot) order so output is byte-stable.
    pub fn write_csv<W: io::Write>(&self, writer: W, sources: &[SourceSpec]) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["seq_id", "source_id", "task_index", "vote"])
            .map_err(io_of_csv)?;
        for (seq, &seq_id) in self.seq_ids.iter().enumerate() {
            for (j, source) in sources.iter().enumerate() {
                for (slot, &task) in source.coverage.iter().enumerate() {
                    let vote = self.get(seq, j, slot);
                    csv.write_record(&[
                        seq_id.to_string(),
                        (j + 1).to_string(),
                        (task + 1).to_string(),
                        vote.to_string(),
                    ])
                    .map_err(io_of_csv)?;
                }
            }
        }
        csv.flush()?;
        Ok(())
    }
}

fn io_of_csv(e: csv::Error) -> Error {
    Error::Parse(format!("csv write: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::layout::TaskLayout;

    fn sources() -> (TaskLayout, Vec<SourceSpec>) {
        let layout = TaskLayout::elements_only(3).unwrap();
        let sources = vec![
            SourceSpec::new(0, 1, vec![0, 1], "a", &layout).unwrap(),
            SourceSpec::new(1, 1, vec![2], "b", &layout).unwrap(),
        ];
        (layout, sources)
    }

    #[test]
    fn set_get_roundtrip() {
        let (_, sources) = sources();
        let mut v = VoteTensor::new(2, &sources);
        v.set(0, 0, 1, -1).unwrap();
        v.set(1, 1, 0, 1).unwrap();
        assert_eq!(v.get(0, 0, 1), -1);
        assert_eq!(v.get(0, 0, 0), 0);
        assert_eq!(v.get(1, 1, 0), 1);
        assert!(v.set(0, 0, 0, 2).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let (_, sources) = sources();
        let mut v = VoteTensor::with_ids(vec![5, 9], &sources);
        v.set(0, 0, 0, 1).unwrap();
        v.set(0, 1, 0, -1).unwrap();
        v.set(1, 0, 1, 1).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf, &sources).unwrap();
        let back = VoteTensor::read_csv(&buf[..], &sources).unwrap();
        assert_eq!(v, back);
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2, &sources).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn missing_rows_are_abstentions() {
        let (_, sources) = sources();
        let data = "seq_id,source_id,task_index,vote\n1,1,1,1\n2,2,3,-1\n";
        let v = VoteTensor::read_csv(data.as_bytes(), &sources).unwrap();
        assert_eq!(v.n(), 2);
        assert_eq!(v.get(0, 0, 0), 1);
        assert_eq!(v.get(0, 0, 1), 0);
        assert_eq!(v.get(0, 1, 0), 0);
        assert_eq!(v.get(1, 1, 0), -1);
    }

    #[test]
    fn rejects_malformed_rows() {
        let (_, sources) = sources();
        let bad_header = "sequence,source,task,vote\n1,1,1,1\n";
        assert!(matches!(
            VoteTensor::read_csv(bad_header.as_bytes(), &sources),
            Err(Error::Parse(_))
        ));
        let bad_vote = "seq_id,source_id,task_index,vote\n1,1,1,3\n";
        assert!(matches!(
            VoteTensor::read_csv(bad_vote.as_bytes(), &sources),
            Err(Error::Validate(_))
        ));
        let bad_source = "seq_id,source_id,task_index,vote\n1,7,1,1\n";
        assert!(VoteTensor::read_csv(bad_source.as_bytes(), &sources).is_err());
        let uncovered = "seq_id,source_id,task_index,vote\n1,2,1,1\n";
        assert!(VoteTensor::read_csv(uncovered.as_bytes(), &sources).is_err());
        let duplicate = "seq_id,source_id,task_index,vote\n1,1,1,1\n1,1,1,-1\n";
        assert!(VoteTensor::read_csv(duplicate.as_bytes(), &sources).is_err());
    }
}
