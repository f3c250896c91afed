//! Sparse text decomposition of neuron directions by orthogonal matching
//! pursuit over a pool of phrase embeddings.
//!
//! Atoms are the unit-normalized pool rows; coefficients are reported in
//! those units. After every selection the coefficients of the whole selected
//! set are refit by least squares, so the residual stays orthogonal to the
//! span of the selected atoms.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::TensorMap;
use crate::error::{Error, Result};
use crate::rank1::NeuronDirection;

pub const ROLE_EMBEDDINGS: &str = "pool.embeddings";
pub const ROLE_PHRASES: &str = "pool.phrases";

/// Ridge added to the Gram diagonal when the selected atoms are close to
/// linearly dependent.
pub const GRAM_RIDGE: f64 = 1e-10;

/// Residuals flagged as exhausted below this norm; no further atoms are added.
const EXHAUSTED: f64 = 1e-13;

const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TextPool {
    pub phrases: Vec<String>,
    /// `M × d` raw embeddings as ingested.
    pub embeddings: Array2<f32>,
    /// `M × d` unit rows.
    pub atoms: Array2<f64>,
}

impl TextPool {
    pub fn new(phrases: Vec<String>, embeddings: Array2<f32>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::arg("text pool is empty"));
        }
        if phrases.len() != embeddings.nrows() {
            return Err(Error::arg(format!(
                "{} phrases but {} embedding rows",
                phrases.len(),
                embeddings.nrows()
            )));
        }
        let mut atoms = embeddings.mapv(f64::from);
        for (j, mut row) in atoms.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::arg(format!(
                    "pool row {j} (`{}`) has zero or non-finite norm",
                    phrases[j]
                )));
            }
            row /= n;
        }
        Ok(TextPool {
            phrases,
            embeddings,
            atoms,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(ROLE_EMBEDDINGS, self.embeddings.clone().into_dyn());
        m.insert_text(ROLE_PHRASES, self.phrases.clone());
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let emb = map
            .get(ROLE_EMBEDDINGS)?
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::container(ROLE_EMBEDDINGS, e.to_string()))?;
        TextPool::new(map.text(ROLE_PHRASES)?.to_vec(), emb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub layer: usize,
    pub neuron: usize,
    /// Selected atoms in selection order.
    pub indices: Vec<usize>,
    pub gamma: Vec<f64>,
    pub r_hat: Array1<f64>,
    pub residual_norm: f64,
    /// The selected atoms were near-dependent and the ridge was applied.
    pub rank_deficient: bool,
}

/// Solves `G x = y` for symmetric positive definite `G` by Cholesky.
/// Returns `None` if a pivot is not safely positive.
fn cholesky_solve(g: &Array2<f64>, y: &Array1<f64>) -> Option<Array1<f64>> {
    let n = g.nrows();
    let scale = (0..n)
        .map(|i| g[[i, i]])
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= GRAM_RIDGE * scale {
                    return None;
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    let mut z = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * z[k];
        }
        z[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    Some(x)
}

/// Least-squares coefficients of `target` on the rows of `basis`.
/// The boolean is true if the ridge had to be applied.
pub fn least_squares(basis: &Array2<f64>, target: &Array1<f64>) -> (Array1<f64>, bool) {
    let gram = basis.dot(&basis.t());
    let rhs = basis.dot(target);
    let (mut x, ridged, gram) = match cholesky_solve(&gram, &rhs) {
        Some(x) => (x, false, gram),
        None => {
            let mut g = gram;
            g.diag_mut().mapv_inplace(|v| v + GRAM_RIDGE);
            let x = cholesky_solve(&g, &rhs).unwrap_or_else(|| Array1::zeros(rhs.len()));
            (x, true, g)
        }
    };
    // one step of iterative refinement
    let residual = target - &basis.t().dot(&x);
    if let Some(dx) = cholesky_solve(&gram, &basis.dot(&residual)) {
        x += &dx;
    }
    (x, ridged)
}

struct Pursuit {
    target: Array1<f64>,
    residual: Array1<f64>,
    indices: Vec<usize>,
    gamma: Array1<f64>,
    rank_deficient: bool,
    done: bool,
}

fn check_m(pool: &TextPool, m: usize) -> Result<()> {
    let limit = pool.len().min(pool.dim());
    if m == 0 || m > limit {
        return Err(Error::arg(format!("m = {m} outside 1..={limit}")));
    }
    Ok(())
}

fn pursue(targets: Vec<Array1<f64>>, pool: &TextPool, m: usize) -> Vec<Pursuit> {
    let mut state: Vec<Pursuit> = targets
        .into_iter()
        .map(|t| Pursuit {
            residual: t.clone(),
            done: t.dot(&t).sqrt() < EXHAUSTED,
            target: t,
            indices: Vec::new(),
            gamma: Array1::zeros(0),
            rank_deficient: false,
        })
        .collect();
    let d = pool.dim();
    for _ in 0..m {
        let active: Vec<usize> = (0..state.len()).filter(|&i| !state[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut res = Array2::<f64>::zeros((d, active.len()));
        for (c, &i) in active.iter().enumerate() {
            res.column_mut(c).assign(&state[i].residual);
        }
        let corr = pool.atoms.dot(&res);
        active
            .par_iter()
            .zip(corr.axis_iter(Axis(1)).into_par_iter())
            .map(|(&i, col)| {
                let st = &state[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, &c) in col.iter().enumerate() {
                    if st.indices.contains(&j) {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| c.abs() > b) {
                        best = Some((j, c.abs()));
                    }
                }
                (i, best)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .for_each(|(i, best)| {
                let st = &mut state[i];
                match best {
                    Some((j, _)) => st.indices.push(j),
                    None => st.done = true,
                }
            });
        state.par_iter_mut().filter(|s| !s.done).for_each(|st| {
            if st.gamma.len() == st.indices.len() {
                return;
            }
            let basis = pool.atoms.select(Axis(0), &st.indices);
            let (gamma, ridged) = least_squares(&basis, &st.target);
            st.rank_deficient |= ridged;
            st.residual = &st.target - &basis.t().dot(&gamma);
            st.gamma = gamma;
            if st.residual.dot(&st.residual).sqrt() < EXHAUSTED {
                st.done = true;
            }
        });
    }
    state
}

fn finish(p: Pursuit, pool: &TextPool, layer: usize, neuron: usize) -> SparseCode {
    let basis = pool.atoms.select(Axis(0), &p.indices);
    let r_hat = if p.indices.is_empty() {
        Array1::zeros(pool.dim())
    } else {
        basis.t().dot(&p.gamma)
    };
    let diff = &p.target - &r_hat;
    SparseCode {
        layer,
        neuron,
        indices: p.indices,
        gamma: p.gamma.to_vec(),
        residual_norm: diff.dot(&diff).sqrt(),
        r_hat,
        rank_deficient: p.rank_deficient,
    }
}

/// Decomposes `r` into at most `m` pool atoms.
///
/// Selection picks the atom with the largest |correlation| with the current
/// residual (lowest index on ties). Stops early once the residual vanishes.
pub fn omp(r: &Array1<f64>, pool: &TextPool, m: usize) -> Result<SparseCode> {
    check_m(pool, m)?;
    if r.len() != pool.dim() {
        return Err(Error::arg(format!(
            "direction has {} dims, pool has {}",
            r.len(),
            pool.dim()
        )));
    }
    let p = pursue(vec![r.clone()], pool, m).pop().expect("one target");
    Ok(finish(p, pool, 0, 0))
}

/// Runs [`omp`] on every direction's `r`, preserving input order.
pub fn decompose_layer(
    directions: &[NeuronDirection],
    pool: &TextPool,
    m: usize,
) -> Result<Vec<SparseCode>> {
    if directions.is_empty() {
        return Ok(Vec::new());
    }
    check_m(pool, m)?;
    let mut out = Vec::with_capacity(directions.len());
    for chunk in directions.chunks(BATCH) {
        for d in chunk {
            if d.r.len() != pool.dim() {
                return Err(Error::arg(format!(
                    "direction of neuron {} has {} dims, pool has {}",
                    d.neuron,
                    d.r.len(),
                    pool.dim()
                )));
            }
        }
        let states = pursue(chunk.iter().map(|d| d.r.clone()).collect(), pool, m);
        out.extend(
            states
                .into_iter()
                .zip(chunk)
                .map(|(p, d)| finish(p, pool, d.layer, d.neuron)),
        );
    }
    Ok(out)
}

/// The `k` largest-|γ| phrases with their signed coefficients. If `k`
/// exceeds the code's support, everything is returned and the flag is set.
pub fn top_phrases(code: &SparseCode, pool: &TextPool, k: usize) -> (Vec<(String, f64)>, bool) {
    let mut order: Vec<usize> = (0..code.indices.len()).collect();
    order.sort_by(|&a, &b| {
        code.gamma[b]
            .abs()
            .total_cmp(&code.gamma[a].abs())
            .then(code.indices[a].cmp(&code.indices[b]))
    });
    let truncated = k > order.len();
    order.truncate(k);
    let list = order
        .into_iter()
        .map(|i| (pool.phrases[code.indices[i]].clone(), code.gamma[i]))
        .collect();
    (list, truncated)
}

/// One line of the codes JSONL export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub layer: usize,
    pub neuron: usize,
    pub indices: Vec<usize>,
    pub gamma: Vec<f64>,
    pub residual_norm: f64,
}

impl From<&SparseCode> for CodeRecord {
    fn from(c: &SparseCode) -> Self {
        CodeRecord {
            layer: c.layer,
            neuron: c.neuron,
            indices: c.indices.clone(),
            gamma: c.gamma.clone(),
            residual_norm: c.residual_norm,
        }
    }
}

impl CodeRecord {
    /// Rebuilds a code; `r_hat` is recomputed from the pool.
    pub fn into_code(self, pool: &TextPool) -> Result<SparseCode> {
        if self.indices.len() != self.gamma.len() {
            return Err(Error::arg(format!(
                "code for neuron {}: indices/gamma length mismatch",
                self.neuron
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&j| j >= pool.len()) {
            return Err(Error::OutOfRange {
                what: "pool atom",
                index: bad,
                limit: pool.len(),
            });
        }
        let mut r_hat = Array1::zeros(pool.dim());
        for (&j, &g) in self.indices.iter().zip(&self.gamma) {
            r_hat.scaled_add(g, &pool.atoms.row(j));
        }
        Ok(SparseCode {
            layer: self.layer,
            neuron: self.neuron,
            indices: self.indices,
            gamma: self.gamma,
            r_hat,
            residual_norm: self.residual_norm,
            rank_deficient: false,
        })
    }
}

pub fn write_codes(path: &Path, codes: &[SparseCode]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for c in codes {
        let line = serde_json::to_string(&CodeRecord::from(c)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_codes(path: &Path, pool: &TextPool) -> Result<Vec<SparseCode>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CodeRecord = serde_json::from_str(&line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        out.push(rec.into_code(pool)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_pool(m: usize) -> TextPool {
        let phrases = (0..m).map(|i| format!("p{i}")).collect();
        TextPool::new(phrases, Array2::eye(m)).unwrap()
    }

    #[test]
    fn atom_recovered_exactly() {
        let pool = orthonormal_pool(8);
        let r = pool.atoms.row(5).to_owned();
        let code = omp(&r, &pool, 1).unwrap();
        assert_eq!(code.indices, vec![5]);
        assert!((code.gamma[0] - 1.0).abs() < 1e-12);
        assert!(code.residual_norm < 1e-12);
    }

    #[test]
    fn full_orthonormal_basis_gives_inner_products() {
        let pool = orthonormal_pool(6);
        let r = ndarray::array![0.1, -0.5, 0.3, 0.7, -0.2, 0.35];
        let code = omp(&r, &pool, 6).unwrap();
        assert!(code.residual_norm < 1e-12);
        for (&j, &g) in code.indices.iter().zip(&code.gamma) {
            assert!((g - r[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn m_out_of_range() {
        let pool = orthonormal_pool(4);
        let r = Array1::from_elem(4, 0.5);
        assert!(omp(&r, &pool, 0).is_err());
        assert!(omp(&r, &pool, 5).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let pool = orthonormal_pool(4);
        let r = Array1::from_elem(4, 0.5);
        assert_eq!(omp(&r, &pool, 1).unwrap().indices, vec![0]);
    }

    #[test]
    fn duplicate_atoms_flag_rank_deficiency() {
        let emb = ndarray::array![[1.0f32, 0.0, 0.0], [1.0, 1e-9, 0.0], [0.0, 1.0, 0.0]];
        let pool = TextPool::new(vec!["a".into(), "a'".into(), "b".into()], emb).unwrap();
        let r = ndarray::array![1.0, 0.0, 1.0];
        let code = omp(&r, &pool, 3).unwrap();
        assert!(code.gamma.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn empty_and_singleton_layers() {
        let pool = orthonormal_pool(4);
        assert!(decompose_layer(&[], &pool, 2).unwrap().is_empty());
        let dir = NeuronDirection {
            layer: 3,
            neuron: 7,
            r: ndarray::array![0.8, 0.0, 0.6, 0.0],
            b: Array1::zeros(4),
            variance_explained: 1.0,
            support_size: 2,
            degenerate: false,
        };
        let codes = decompose_layer(std::slice::from_ref(&dir), &pool, 2).unwrap();
        let single = omp(&dir.r, &pool, 2).unwrap();
        assert_eq!(codes.len(), 1);
        assert_eq!(codes[0].indices, single.indices);
        assert_eq!(codes[0].gamma, single.gamma);
        assert_eq!((codes[0].layer, codes[0].neuron), (3, 7));
    }

    #[test]
    fn top_phrases_sorted_by_magnitude() {
        let pool = orthonormal_pool(4);
        let code = SparseCode {
            layer: 0,
            neuron: 0,
            indices: vec![1, 3],
            gamma: vec![2.0, -3.0],
            r_hat: Array1::zeros(4),
            residual_norm: 0.0,
            rank_deficient: false,
        };
        let (top, truncated) = top_phrases(&code, &pool, 2);
        assert_eq!(top, vec![("p3".to_string(), -3.0), ("p1".to_string(), 2.0)]);
        assert!(!truncated);
        let (all, truncated) = top_phrases(&code, &pool, 5);
        assert_eq!(all.len(), 2);
        assert!(truncated);
        let single = SparseCode {
            indices: vec![2],
            gamma: vec![0.5],
            ..code
        };
        assert_eq!(
            top_phrases(&single, &pool, 1).0,
            vec![("p2".to_string(), 0.5)]
        );
    }

    #[test]
    fn pool_rejects_zero_rows() {
        let emb = ndarray::array![[1.0f32, 0.0], [0.0, 0.0]];
        assert!(TextPool::new(vec!["a".into(), "b".into()], emb).is_err());
        assert!(TextPool::new(vec![], Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn codes_jsonl_round_trip() {
        let pool = orthonormal_pool(4);
        let r = ndarray::array![0.8, 0.0, 0.6, 0.0];
        let mut code = omp(&r, &pool, 2).unwrap();
        code.neuron = 11;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.jsonl");
        write_codes(&path, &[code.clone()]).unwrap();
        let back = read_codes(&path, &pool).unwrap();
        assert_eq!(back[0].indices, code.indices);
        assert_eq!(back[0].gamma, code.gamma);
        assert!((&back[0].r_hat - &code.r_hat).mapv(f64::abs).sum() < 1e-12);
    }
}
