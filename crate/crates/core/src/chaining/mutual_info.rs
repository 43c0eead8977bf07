use super::ChainError;

/// Empirical mutual information of a contingency table, in bits.
///
/// `I = Σ p̂(i,j) log2(p̂(i,j) / (p̂(i) p̂(j)))` with `p̂ = count / total`;
/// empty cells contribute nothing.
pub fn mutual_information(table: &[Vec<u64>]) -> Result<f64, ChainError> {
    let cols = table.first().map_or(0, Vec::len);
    if table.iter().any(|r| r.len() != cols) {
        return Err(ChainError::InvalidConfig("contingency table rows differ in length".into()));
    }
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..cols).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total: u64 = row_sums.iter().sum();
    if total == 0 {
        return Err(ChainError::EmptyTable);
    }
    let n = total as f64;
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            // count·total / (row·col) is exact in integers up to u128.
            let num = c as u128 * total as u128;
            let den = row_sums[i] as u128 * col_sums[j] as u128;
            let ratio = if num == den { 1.0 } else { num as f64 / den as f64 };
            mi += (c as f64 / n) * ratio.log2();
        }
    }
    Ok(mi.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_table_has_zero_information() {
        // outer product of marginals (1,3) and (2,5)
        let t = vec![vec![2, 5], vec![6, 15]];
        assert!(mutual_information(&t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn diagonal_table_is_one_bit() {
        assert_eq!(mutual_information(&[vec![1, 0], vec![0, 1]]).unwrap(), 1.0);
    }

    #[test]
    fn two_one_table_matches_hand_sum() {
        // p̂ = 2/6 on the diagonal, 1/6 off it, marginals 1/2 each:
        // 2·(1/3)·log2(4/3) + 2·(1/6)·log2(2/3)
        let want = 2.0 / 3.0 * (4.0f64 / 3.0).log2() + 1.0 / 3.0 * (2.0f64 / 3.0).log2();
        let got = mutual_information(&[vec![2, 1], vec![1, 2]]).unwrap();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn empty_and_ragged_tables_are_errors() {
        assert!(matches!(mutual_information(&[vec![0, 0]]), Err(ChainError::EmptyTable)));
        assert!(matches!(mutual_information(&[]), Err(ChainError::EmptyTable)));
        assert!(matches!(mutual_information(&[vec![1], vec![1, 2]]), Err(ChainError::InvalidConfig(_))));
    }
}
