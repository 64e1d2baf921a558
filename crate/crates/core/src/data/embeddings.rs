use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, PAD_ID};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// `V × D` table drawn from uniform(−0.1, 0.1) with a zero padding row.
pub fn random_embeddings(vocab_size: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(&[vocab_size, dim]);
    for v in t.data_mut() {
        *v = rng.gen_range(-0.1..0.1);
    }
    t.row_mut(PAD_ID).fill(0.0);
    t
}

/// Reads a GloVe-style text file (`word f1 … fD` per line) into a table
/// aligned with `vocab`. Words missing from the file keep their seeded
/// random row. Returns the table and the number of vocabulary words found.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = random_embeddings(vocab.len(), dim, seed);
    let mut found = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Config(format!(
                "{}:{}: embedding has {} values, expected dimension {dim}",
                path.display(),
                lineno + 1,
                values.len()
            )));
        }
        let Some(id) = vocab.lookup(word) else { continue };
        let row = table.row_mut(id);
        for (dst, s) in row.iter_mut().zip(&values) {
            *dst = s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("bad float {s:?}"),
            })?;
        }
        found += 1;
    }
    Ok((table, found))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn glove(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn copies_rows_and_zeroes_padding() {
        let vocab = Vocabulary::from_tokens(vec!["cup".into(), "team".into(), "absent".into()]);
        let f = glove("team 0.5 -1.25 3\nother 1 1 1\ncup 0.125 0 -0.75\n");
        let (t, found) = load_pretrained_embeddings(f.path(), &vocab, 3, 7).unwrap();
        assert_eq!(found, 2);
        assert_eq!(t.shape(), &[5, 3]);
        assert_eq!(t.row(vocab.id("team")), &[0.5, -1.25, 3.0]);
        assert_eq!(t.row(vocab.id("cup")), &[0.125, 0.0, -0.75]);
        assert_eq!(t.row(PAD_ID), &[0.0, 0.0, 0.0]);

        let absent = t.row(vocab.id("absent")).to_vec();
        assert!(absent.iter().all(|v| v.abs() < 0.1));
        let (again, _) = load_pretrained_embeddings(f.path(), &vocab, 3, 7).unwrap();
        assert_eq!(again.row(vocab.id("absent")), absent.as_slice());
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        let vocab = Vocabulary::from_tokens(vec!["a".into()]);
        let f = glove("a 1 2\n");
        assert!(matches!(
            load_pretrained_embeddings(f.path(), &vocab, 3, 0),
            Err(Error::Config(_))
        ));
    }
}
