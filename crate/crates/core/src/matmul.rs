//! Row-granulated dense matrix multiplication, the reference divisible
//! workload.
//!
//! Every kernel accumulates `c[i][j]` strictly in ascending `k` starting from
//! `0.0`, so the product of any row block is bit-identical to the
//! corresponding rows of the full product.

use std::fmt;

use crate::error::{Error, Result};
use crate::scheduler::{ProviderId, ScopePlan};

/// Dense row-major matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!("shape {rows}x{cols}")));
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::InvalidMatrix(format!(
                "{} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Matrix { rows: n, cols: n, data }
    }

    /// Fills a `rows x cols` matrix row by row from `rng`.
    pub fn random(rows: usize, cols: usize, rng: &mut Lcg) -> Result<Self> {
        let data = (0..rows * cols).map(|_| rng.next_f64()).collect();
        Matrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copy of rows `range.start..range.end`.
    pub fn row_block(&self, range: RowRange) -> Result<Matrix> {
        if range.is_empty() || range.end > self.rows {
            return Err(Error::PlanMismatch(format!(
                "row range {range} outside 0..{}",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }

    /// Stacks blocks top to bottom.
    pub fn vstack<'a>(blocks: impl IntoIterator<Item = &'a Matrix>) -> Result<Matrix> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        for block in blocks {
            match cols {
                None => cols = Some(block.cols),
                Some(c) if c != block.cols => {
                    return Err(Error::DimensionMismatch(format!(
                        "cannot stack {c}-column and {}-column blocks",
                        block.cols
                    )))
                }
                Some(_) => {}
            }
            rows += block.rows;
            data.extend_from_slice(&block.data);
        }
        Matrix::new(rows, cols.unwrap_or(0), data)
    }
}

/// Half-open row interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowRange {
    pub start: usize,
    pub end: usize,
}

impl RowRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidArgument(format!("row range [{start}, {end})")));
        }
        Ok(RowRange { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn overlaps(&self, other: &RowRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for RowRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// 64-bit linear congruential generator shared by every node so that a seed
/// names the same operands everywhere.
///
/// `state = state * 6364136223846793005 + 1442695040888963407 (mod 2^64)`;
/// each draw advances the state once and maps its top 53 bits to `[0, 1)`.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub const MULTIPLIER: u64 = 6364136223846793005;
    pub const INCREMENT: u64 = 1442695040888963407;

    pub fn new(seed: u64) -> Self {
        Lcg { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(Self::MULTIPLIER).wrapping_add(Self::INCREMENT);
        self.state
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// The operand pair for a seeded square job: `first` then `second`, drawn
/// from one generator in that order.
pub fn seeded_pair(size: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    let mut rng = Lcg::new(seed);
    let first = Matrix::random(size, size, &mut rng)?;
    let second = Matrix::random(size, size, &mut rng)?;
    Ok((first, second))
}

fn check_conformable(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// The textbook three-loop product.
pub fn multiply_reference(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_conformable(a, b)?;
    let (n, inner, m) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut sum = 0.0;
            for k in 0..inner {
                sum += a.data[i * inner + k] * b.data[k * m + j];
            }
            c[i * m + j] = sum;
        }
    }
    Matrix::new(n, m, c)
}

/// Product of a row block of the first operand with the full second operand.
///
/// Loops run i-k-j for locality; each output element still sees its terms
/// added in ascending `k`, so results match [`multiply_reference`] bit for bit.
pub fn multiply_block(block: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_conformable(block, b)?;
    let (n, inner, m) = (block.rows, block.cols, b.cols);
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let out = &mut c[i * m..(i + 1) * m];
        for k in 0..inner {
            let aik = block.data[i * inner + k];
            let brow = &b.data[k * m..(k + 1) * m];
            for (o, &bkj) in out.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::new(n, m, c)
}

/// One provider's share of the first operand.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAssignment {
    pub provider: ProviderId,
    pub range: RowRange,
    pub block: Matrix,
}

/// Contiguous row ranges in plan order; providers with a zero allotment are
/// left out.
pub fn plan_ranges(plan: &ScopePlan) -> Vec<(ProviderId, RowRange)> {
    let mut start = 0usize;
    let mut out = Vec::with_capacity(plan.len());
    for (id, allotment) in plan.allotments() {
        let end = start + *allotment as usize;
        if end > start {
            out.push((id.clone(), RowRange { start, end }));
        }
        start = end;
    }
    out
}

pub fn split_rows(a: &Matrix, plan: &ScopePlan) -> Result<Vec<RowAssignment>> {
    if plan.total_load() != a.rows as u64 {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} rows, matrix has {}",
            plan.total_load(),
            a.rows
        )));
    }
    plan_ranges(plan)
        .into_iter()
        .map(|(provider, range)| {
            Ok(RowAssignment {
                block: a.row_block(range)?,
                provider,
                range,
            })
        })
        .collect()
}

/// What any linearly divisible job must provide: a size in work-units, a
/// way to compute one range of it and a way to merge computed ranges.
///
/// Merging the computed parts of any partition of `0..work_units()` must
/// equal computing the whole range.
pub trait DivisibleWorkload {
    type Part;
    type Output;

    fn work_units(&self) -> u64;
    fn compute(&self, range: RowRange) -> Result<Self::Part>;
    fn merge(&self, parts: Vec<(RowRange, Self::Part)>) -> Result<Self::Output>;
}

/// A matrix product job; one work-unit is one row of the first operand.
#[derive(Debug, Clone)]
pub struct MatMulJob {
    pub first: Matrix,
    pub second: Matrix,
}

impl MatMulJob {
    pub fn new(first: Matrix, second: Matrix) -> Result<Self> {
        check_conformable(&first, &second)?;
        Ok(MatMulJob { first, second })
    }
}

impl DivisibleWorkload for MatMulJob {
    type Part = Matrix;
    type Output = Matrix;

    fn work_units(&self) -> u64 {
        self.first.rows as u64
    }

    fn compute(&self, range: RowRange) -> Result<Matrix> {
        multiply_block(&self.first.row_block(range)?, &self.second)
    }

    fn merge(&self, mut parts: Vec<(RowRange, Matrix)>) -> Result<Matrix> {
        parts.sort_by_key(|(r, _)| *r);
        let mut next = 0;
        for (range, block) in &parts {
            if range.start != next || block.rows != range.len() {
                return Err(Error::PlanMismatch(format!("parts do not tile the rows at {range}")));
            }
            next = range.end;
        }
        if next != self.first.rows {
            return Err(Error::Incomplete(1));
        }
        Matrix::vstack(parts.iter().map(|(_, b)| b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent triple loop over nested vectors.
    fn oracle_product(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
        let a_rows: Vec<Vec<f64>> = (0..a.rows()).map(|i| a.row(i).to_vec()).collect();
        let b_rows: Vec<Vec<f64>> = (0..b.rows()).map(|i| b.row(i).to_vec()).collect();
        let mut out = vec![vec![0.0; b.cols()]; a.rows()];
        for (i, a_row) in a_rows.iter().enumerate() {
            for j in 0..b.cols() {
                let mut acc = 0.0f64;
                for (k, a_ik) in a_row.iter().enumerate() {
                    acc += a_ik * b_rows[k][j];
                }
                out[i][j] = acc;
            }
        }
        out
    }

    fn as_rows(m: &Matrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    #[test]
    fn identity_is_neutral() {
        let b = Matrix::from_rows(&[&[1.5, -2.0, 3.0], &[0.25, 7.0, 1.0]]).unwrap();
        assert_eq!(multiply_reference(&Matrix::identity(2), &b).unwrap(), b);
        assert_eq!(multiply_reference(&b, &Matrix::identity(3)).unwrap(), b);
    }

    #[test]
    fn hand_computed_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let c = multiply_reference(&a, &b).unwrap();
        assert_eq!(as_rows(&c), vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
    }

    #[test]
    fn random_product_matches_oracle() {
        let mut rng = Lcg::new(42);
        let a = Matrix::random(8, 8, &mut rng).unwrap();
        let b = Matrix::random(8, 8, &mut rng).unwrap();
        assert_eq!(as_rows(&multiply_reference(&a, &b).unwrap()), oracle_product(&a, &b));
        assert_eq!(as_rows(&multiply_block(&a, &b).unwrap()), oracle_product(&a, &b));
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::identity(3);
        let b = Matrix::identity(2);
        assert!(matches!(multiply_reference(&a, &b), Err(Error::DimensionMismatch(_))));
        assert!(matches!(multiply_block(&a, &b), Err(Error::DimensionMismatch(_))));
        assert!(MatMulJob::new(a, b).is_err());
    }

    #[test]
    fn matrix_invariants() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[&[1.0], &[1.0, 2.0]]).is_err());
    }

    #[test]
    fn lcg_is_reproducible_and_in_unit_interval() {
        let mut a = Lcg::new(7);
        let mut b = Lcg::new(7);
        for _ in 0..1000 {
            let x = a.next_f64();
            assert_eq!(x, b.next_f64());
            assert!((0.0..1.0).contains(&x));
        }
        // First draw from seed 0 is the increment itself.
        assert_eq!(Lcg::new(0).next_u64(), Lcg::INCREMENT);
    }

    fn plan(total: u64, parts: &[(&str, u64)]) -> ScopePlan {
        ScopePlan::from_allotments(total, parts.iter().map(|(p, a)| ((*p).into(), *a)).collect()).unwrap()
    }

    #[test]
    fn split_rows_examples() {
        let mut rng = Lcg::new(1);
        let a = Matrix::random(800, 2, &mut rng).unwrap();
        let parts = split_rows(&a, &plan(800, &[("a", 400), ("b", 200), ("c", 200)])).unwrap();
        let ranges: Vec<_> = parts.iter().map(|p| (p.range.start, p.range.end)).collect();
        assert_eq!(ranges, vec![(0, 400), (400, 600), (600, 800)]);
        assert_eq!(Matrix::vstack(parts.iter().map(|p| &p.block)).unwrap(), a);

        let parts = split_rows(&a, &plan(800, &[("a", 800), ("b", 0)])).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].provider.as_str(), "a");

        assert!(matches!(
            split_rows(&a, &plan(799, &[("a", 799)])),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn block_edge_cases() {
        let mut rng = Lcg::new(3);
        let a = Matrix::random(5, 4, &mut rng).unwrap();
        let b = Matrix::random(4, 6, &mut rng).unwrap();
        let full = multiply_reference(&a, &b).unwrap();
        assert_eq!(multiply_block(&a, &b).unwrap(), full);
        let row = multiply_block(&a.row_block(RowRange { start: 2, end: 3 }).unwrap(), &b).unwrap();
        assert_eq!(row.data(), full.row(2));
    }

    #[test]
    fn work_units_is_first_operand_rows() {
        for n in [200, 400, 600, 800, 1000] {
            let job = MatMulJob::new(Matrix::identity(n), Matrix::identity(n)).unwrap();
            assert_eq!(job.work_units(), n as u64);
        }
        let job = MatMulJob::new(Matrix::new(1, 9, vec![1.0; 9]).unwrap(), Matrix::identity(9)).unwrap();
        assert_eq!(job.work_units(), 1);
    }

    fn partition(rows: usize, cuts: &[usize]) -> Vec<RowRange> {
        let mut points: Vec<usize> = cuts.iter().map(|c| c % rows).filter(|&c| c > 0).collect();
        points.push(0);
        points.push(rows);
        points.sort_unstable();
        points.dedup();
        points.windows(2).map(|w| RowRange { start: w[0], end: w[1] }).collect()
    }

    proptest! {
        #[test]
        fn any_partition_merges_to_reference(
            rows in 1usize..24, inner in 1usize..12, cols in 1usize..12,
            seed in any::<u64>(), cuts in prop::collection::vec(any::<usize>(), 0..8),
        ) {
            let mut rng = Lcg::new(seed);
            let a = Matrix::random(rows, inner, &mut rng).unwrap();
            let b = Matrix::random(inner, cols, &mut rng).unwrap();
            let job = MatMulJob::new(a.clone(), b.clone()).unwrap();
            let ranges = partition(rows, &cuts);
            let mut parts: Vec<_> = ranges.iter().map(|&r| (r, job.compute(r).unwrap())).collect();
            let units: u64 = ranges.iter().map(|r| r.len() as u64).sum();
            prop_assert_eq!(units, job.work_units());
            parts.reverse();
            let merged = job.merge(parts).unwrap();
            prop_assert_eq!(merged, multiply_reference(&a, &b).unwrap());
        }
    }
}
