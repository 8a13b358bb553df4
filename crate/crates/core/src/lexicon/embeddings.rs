//! Word-embedding files.
//!
//! Text format: one entry per line, a token followed by `D_emb` whitespace
//! separated decimals. No header line. Blank lines are ignored.
//!
//! Binary format (little endian):
//!
//! ```text
//! b"PTSNEMB1"  u32 count  u32 dim
//! count x { u32 byte_len, UTF-8 token bytes }
//! count * dim f32 values, row major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::ConceptList;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"PTSNEMB1";

/// Concept embeddings, row `i` belonging to `concepts().tokens()[i]`.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    concepts: ConceptList,
    matrix: Tensor,
    missing: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(concepts: ConceptList, matrix: Tensor) -> Result<Self> {
        let (n, _) = matrix.dims2()?;
        if n != concepts.len() {
            return Err(Error::shape(format!(
                "{} concepts but {n} embedding rows",
                concepts.len()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::data("non-finite embedding value"));
        }
        Ok(EmbeddingMatrix {
            concepts,
            matrix,
            missing: Vec::new(),
        })
    }

    /// Concepts that were found, in the requested order.
    pub fn concepts(&self) -> &ConceptList {
        &self.concepts
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Requested concepts absent from the source file.
    pub fn missing(&self) -> &[String] {
        &self.missing
    }

    pub fn dim(&self) -> usize {
        self.matrix.last_dim()
    }
}

/// Reads the rows for `concepts` from a text or binary embedding file (the
/// format is detected from the magic bytes). Concepts absent from the file are
/// dropped and listed in [`EmbeddingMatrix::missing`]; it is an error only when
/// their fraction exceeds `max_miss_rate`. For duplicated tokens the first
/// occurrence wins.
pub fn load_embeddings(
    path: &Path,
    concepts: &ConceptList,
    max_miss_rate: f64,
) -> Result<EmbeddingMatrix> {
    let wanted: HashMap<&str, usize> = concepts
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; concepts.len()];
    let mut keep = |token: &str, values: &dyn Fn() -> Vec<f64>| {
        if let Some(&i) = wanted.get(token) {
            if rows[i].is_none() {
                rows[i] = Some(values());
            }
        }
    };
    let dim = if is_binary(path)? {
        let (tokens, dim, values) = read_binary(path)?;
        for (i, t) in tokens.iter().enumerate() {
            keep(t, &|| values[i * dim..(i + 1) * dim].to_vec());
        }
        dim
    } else {
        let mut dim = None;
        for_each_text_entry(path, |token, values| {
            keep(token, &|| values.to_vec());
            dim = Some(values.len());
        })?;
        dim.unwrap_or(0)
    };

    let mut present = Vec::new();
    let mut data = Vec::new();
    let mut missing = Vec::new();
    for (t, row) in concepts.tokens().iter().zip(rows) {
        match row {
            Some(r) => {
                present.push(t.clone());
                data.extend(r);
            }
            None => missing.push(t.clone()),
        }
    }
    let miss_rate = missing.len() as f64 / concepts.len().max(1) as f64;
    if miss_rate > max_miss_rate || present.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).map(String::as_str).collect();
        return Err(Error::data(format!(
            "{} of {} concepts missing from {} (miss rate {miss_rate:.3} > {max_miss_rate}): {}{}",
            missing.len(),
            concepts.len(),
            path.display(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" },
        )));
    }
    let matrix = Tensor::new(vec![present.len(), dim], data)?;
    Ok(EmbeddingMatrix {
        concepts: ConceptList::from_unchecked(present),
        matrix,
        missing,
    })
}

/// Reads every entry of an embedding file.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let (tokens, dim, values) = if is_binary(path)? {
        read_binary(path)?
    } else {
        let mut tokens = Vec::new();
        let mut values = Vec::new();
        let mut dim = 0;
        for_each_text_entry(path, |t, v| {
            tokens.push(t.to_string());
            values.extend_from_slice(v);
            dim = v.len();
        })?;
        (tokens, dim, values)
    };
    if tokens.is_empty() {
        return Err(Error::data(format!("{} holds no embeddings", path.display())));
    }
    Ok((tokens.clone(), Tensor::new(vec![tokens.len(), dim], values)?))
}

pub fn write_embeddings_text(path: &Path, tokens: &[String], matrix: &Tensor) -> Result<()> {
    check_table(tokens, matrix)?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let io = |e| Error::io(path, e);
    for (i, t) in tokens.iter().enumerate() {
        write!(w, "{t}").map_err(io)?;
        for v in matrix.row(i) {
            write!(w, " {v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Values are stored as `f32`.
pub fn write_embeddings_binary(path: &Path, tokens: &[String], matrix: &Tensor) -> Result<()> {
    check_table(tokens, matrix)?;
    let dim = matrix.last_dim();
    let mut buf = Vec::with_capacity(16 + matrix.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.as_bytes());
    }
    for &v in matrix.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn check_table(tokens: &[String], matrix: &Tensor) -> Result<()> {
    let (n, _) = matrix.dims2()?;
    if n != tokens.len() {
        return Err(Error::shape(format!("{} tokens but {n} rows", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
        return Err(Error::data(format!("token {t:?} cannot be written")));
    }
    Ok(())
}

fn is_binary(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < head.len() {
        match f.read(&mut head[got..]).map_err(|e| Error::io(path, e))? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got == head.len() && &head == EMBEDDING_MAGIC)
}

fn for_each_text_entry(path: &Path, mut f: impl FnMut(&str, &[f64])) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim = None;
    let mut values = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        values.clear();
        for field in fields {
            let v: f64 = field
                .parse()
                .map_err(|_| err(format!("cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        match dim {
            _ if values.is_empty() => return Err(err(format!("token {token:?} has no values"))),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(err(format!("expected {d} values, found {}", values.len())))
            }
            Some(_) => {}
        }
        f(token, &values);
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

fn read_binary(path: &Path) -> Result<(Vec<String>, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::data(format!("{}: truncated or corrupt ({what})", path.display()));
    let mut r = Reader {
        bytes: &bytes,
        pos: EMBEDDING_MAGIC.len(),
    };
    let (Some(count), Some(dim)) = (r.u32(), r.u32()) else {
        return Err(corrupt("header"));
    };
    if dim == 0 {
        return Err(corrupt("zero dimension"));
    }
    let mut tokens = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let raw = r.u32().and_then(|len| r.take(len)).ok_or_else(|| corrupt("token table"))?;
        let t = std::str::from_utf8(raw).map_err(|_| corrupt("token is not UTF-8"))?;
        tokens.push(t.to_string());
    }
    let raw = r.take(count * dim * 4).ok_or_else(|| corrupt("values"))?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite value"));
    }
    Ok((tokens, dim, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Vocabulary;
    use rand::SeedableRng;

    fn concepts(words: &[&str]) -> ConceptList {
        let v = Vocabulary::from_words(words).unwrap();
        ConceptList::all_words(&v).unwrap()
    }

    #[test]
    fn hand_written_file_reads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "cat 1 2 3 4\ndog 0.5 -0.5 0 1e-3\n\nbird -1 -2 -3 -4\n").unwrap();
        let e = load_embeddings(&p, &concepts(&["cat", "dog", "bird"]), 0.0).unwrap();
        assert_eq!(e.matrix().shape(), &[3, 4]);
        assert_eq!(
            e.matrix().data(),
            &[1.0, 2.0, 3.0, 4.0, 0.5, -0.5, 0.0, 1e-3, -1.0, -2.0, -3.0, -4.0]
        );

        fs::write(&p, "bird -1 -2 -3 -4\ncat 1 2 3 4\ndog 0.5 -0.5 0 1e-3\n").unwrap();
        let shuffled = load_embeddings(&p, &concepts(&["cat", "dog", "bird"]), 0.0).unwrap();
        assert_eq!(shuffled.matrix(), e.matrix());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        let c = concepts(&["cat"]);
        for (text, bad) in [
            ("cat 1 2\ndog 1 x\n", 2),
            ("cat 1 2\ndog 1 2 3\n", 2),
            ("cat\n", 1),
            ("cat 1 2\n\nfox 1 inf\n", 3),
        ] {
            fs::write(&p, text).unwrap();
            match load_embeddings(&p, &c, 1.0) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, bad, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn miss_report_and_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "a 1 0\nc 0 1\nd 1 1\n").unwrap();
        let c = concepts(&["a", "b", "c", "d"]);
        let e = load_embeddings(&p, &c, 0.25).unwrap();
        assert_eq!(e.missing(), ["b"]);
        assert_eq!(e.concepts().tokens(), ["a", "c", "d"]);
        assert_eq!(e.matrix().n_rows(), 3);
        assert!(load_embeddings(&p, &c, 0.2).is_err());
    }

    #[test]
    fn round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::randn(&[5, 7], 2.0, &mut rng).map(|v| v as f32 as f64);
        let tokens: Vec<String> = ["v", "w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let c = concepts(&["v", "w", "x", "y", "z"]);
        let dir = tempfile::tempdir().unwrap();

        let bin = dir.path().join("e.bin");
        write_embeddings_binary(&bin, &tokens, &m).unwrap();
        let back = load_embeddings(&bin, &c, 0.0).unwrap();
        assert_eq!(back.matrix().data(), m.data());
        let (all, full) = read_embeddings(&bin).unwrap();
        assert_eq!(all, tokens);
        assert_eq!(full.data(), m.data());

        let txt = dir.path().join("e.txt");
        write_embeddings_text(&txt, &tokens, &m).unwrap();
        let back = load_embeddings(&txt, &c, 0.0).unwrap();
        assert!(back.matrix().max_abs_diff(&m) <= 1e-6);

        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&bin, bytes).unwrap();
        assert!(load_embeddings(&bin, &c, 0.0).is_err());
    }
}
