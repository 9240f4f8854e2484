//! Mean ranks from a four-way user study (1 = best).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METHODS: usize = 4;
pub const METRICS: [&str; 3] = ["I-PQ", "L-PQ", "P-PQ"];

/// One participant's answers; `questions[q][metric][method]` is a rank in
/// `1..=4`, and every `[metric]` row must be a permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResponse {
    pub participant: String,
    pub questions: Vec<[[u8; METHODS]; 3]>,
}

impl RankingResponse {
    pub fn validate(&self) -> Result<()> {
        for (q, question) in self.questions.iter().enumerate() {
            for (m, ranks) in question.iter().enumerate() {
                let mut seen = [false; METHODS];
                for &r in ranks {
                    if !(1..=METHODS as u8).contains(&r) || std::mem::replace(&mut seen[r as usize - 1], true) {
                        return Err(Error::data(format!(
                            "participant {}: question {q} {} ranks {ranks:?} are not a permutation of 1..={METHODS}",
                            self.participant, METRICS[m]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    /// `means[metric][method]`.
    pub means: [[f64; METHODS]; 3],
    pub answers: usize,
}

/// Arithmetic mean rank per (method, metric) over every answered question.
pub fn aggregate_rankings(responses: &[RankingResponse]) -> Result<RankSummary> {
    for r in responses {
        r.validate()?;
    }
    let mut sums = [[0u64; METHODS]; 3];
    let mut n = 0usize;
    for q in responses.iter().flat_map(|r| &r.questions) {
        for (m, ranks) in q.iter().enumerate() {
            for (k, &r) in ranks.iter().enumerate() {
                sums[m][k] += r as u64;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::data("no ranking answers to aggregate"));
    }
    Ok(RankSummary {
        means: sums.map(|row| row.map(|s| s as f64 / n as f64)),
        answers: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(id: &str, ranks: [u8; 4]) -> RankingResponse {
        RankingResponse {
            participant: id.into(),
            questions: vec![[ranks; 3]],
        }
    }

    #[test]
    fn two_participants_average() {
        let s = aggregate_rankings(&[resp("a", [1, 2, 3, 4]), resp("b", [2, 1, 3, 4])]).unwrap();
        assert_eq!(s.means[0], [1.5, 1.5, 3.0, 4.0]);
        assert_eq!(s.means[2][0], 1.5);
    }

    #[test]
    fn non_permutation_names_the_participant() {
        let err = aggregate_rankings(&[resp("p7", [1, 1, 3, 4])]).unwrap_err();
        assert!(err.to_string().contains("p7"));
    }
}
