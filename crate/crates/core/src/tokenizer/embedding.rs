use rand::Rng;

use super::{TokenSequence, TokenizerError};
use crate::numerics::{Matrix, Scalar, Tape, Var};

/// Learned token table (vocab × d_model) and learned position table
/// (max_len × d_model). `[CLS]` sits at position 0 and uses that row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub token_matrix: Matrix<T>,
    pub position_matrix: Matrix<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> EmbeddingTable<T> {
    /// Both tables drawn from N(0, 0.02²).
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, max_len: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            token_matrix: Matrix::random_normal(vocab_size, d_model, INIT_STD, rng),
            position_matrix: Matrix::random_normal(max_len, d_model, INIT_STD, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.token_matrix.cols()
    }

    pub fn max_len(&self) -> usize {
        self.position_matrix.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_matrix.rows()
    }

    fn check(&self, seq: &TokenSequence) -> Result<(), TokenizerError> {
        if seq.len() > self.max_len() {
            return Err(TokenizerError::SequenceTooLong { len: seq.len(), max: self.max_len() });
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(TokenizerError::UnknownId { id, size: self.vocab_size() });
        }
        Ok(())
    }

    /// Row i is `token_matrix[ids[i]] + position_matrix[i]`.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Matrix<T>, TokenizerError> {
        self.check(seq)?;
        let d = self.d_model();
        let mut data = Vec::with_capacity(seq.len() * d);
        for (pos, &id) in seq.ids.iter().enumerate() {
            let tok = self.token_matrix.row(id);
            let p = self.position_matrix.row(pos);
            data.extend(tok.iter().zip(p).map(|(&a, &b)| a + b));
        }
        Ok(Matrix::from_vec(seq.len(), d, data)?)
    }

    /// Same as [`EmbeddingTable::embed`], recorded on `tape` against the
    /// table variables `tokens` and `positions`.
    pub fn embed_on_tape(
        &self,
        tape: &mut Tape<T>,
        tokens: Var,
        positions: Var,
        seq: &TokenSequence,
    ) -> Result<Var, TokenizerError> {
        self.check(seq)?;
        let tok = tape.gather_rows(tokens, &seq.ids)?;
        let order: Vec<usize> = (0..seq.len()).collect();
        let pos = tape.gather_rows(positions, &order)?;
        Ok(tape.add(tok, pos)?)
    }
}
