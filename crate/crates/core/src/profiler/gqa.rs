use crate::scalar::Scalar;

use super::ProfileError;

/// Averages each consecutive group of `group_size` query-head weight vectors
/// into one KV-head vector.
pub fn aggregate_gqa<T: Scalar>(
    query_head_scores: &[Vec<T>],
    group_size: usize,
) -> Result<Vec<Vec<T>>, ProfileError> {
    if group_size == 0 || query_head_scores.len() % group_size != 0 {
        return Err(ProfileError::GqaGrouping {
            query_heads: query_head_scores.len(),
            group_size,
        });
    }
    let denom = T::from_count(group_size);
    query_head_scores
        .chunks(group_size)
        .map(|group| {
            let width = group[0].len();
            if group.iter().any(|v| v.len() != width) {
                return Err(ProfileError::Dimension(
                    "query heads in one KV group have different lengths".into(),
                ));
            }
            Ok((0..width)
                .map(|i| group.iter().map(|v| v[i]).sum::<T>() / denom)
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_for_group_of_one() {
        let q = vec![vec![0.1f64, 0.9], vec![0.7, 0.3]];
        assert_eq!(aggregate_gqa(&q, 1).unwrap(), q);
    }

    #[test]
    fn pair_mean() {
        let q = vec![vec![0.2f64, 0.8], vec![0.6, 0.4]];
        let kv = aggregate_gqa(&q, 2).unwrap();
        assert_eq!(kv.len(), 1);
        assert!((kv[0][0] - 0.4).abs() < 1e-12 && (kv[0][1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn eight_query_heads_in_groups_of_four() {
        let q: Vec<Vec<f64>> = (0..8)
            .map(|h| {
                (0..5)
                    .map(|i| ((h * 7 + i * 3) % 11) as f64 / 11.0)
                    .collect()
            })
            .collect();
        let kv = aggregate_gqa(&q, 4).unwrap();
        assert_eq!(kv.len(), 2);
        for (g, row) in kv.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += q[g * 4 + m][i];
                }
                assert!((v - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_nondivisible_counts() {
        let q = vec![vec![1.0f32]; 3];
        assert!(matches!(
            aggregate_gqa(&q, 2),
            Err(ProfileError::GqaGrouping { .. })
        ));
    }
}
