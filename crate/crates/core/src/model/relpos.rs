/// T5 relative-position bucket for `relative_position = key_pos - query_pos`.
///
/// Bidirectional tables split the buckets between negative and positive
/// offsets; unidirectional (causal) tables only see offsets `<= 0`. Within a
/// half, the first `b/2` distances get their own bucket and larger distances
/// share logarithmically sized buckets up to `max_distance`.
pub fn relative_position_bucket(
    relative_position: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let (offset, b, rp) = if bidirectional {
        let half = num_buckets / 2;
        (if relative_position > 0 { half } else { 0 }, half, relative_position)
    } else {
        (0, num_buckets, relative_position.min(0))
    };
    let m = rp.unsigned_abs() as usize;
    let exact = b / 2;
    let bucket = if m < exact {
        m
    } else {
        let scaled = (m as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln() * (b - exact) as f64;
        (exact + scaled.floor() as usize).min(b - 1)
    };
    offset + bucket
}

/// Buckets for every (query, key) pair, `[Lq × Lk]` row-major.
pub fn bucket_matrix(
    query_positions: &[u32],
    key_positions: &[u32],
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(query_positions.len() * key_positions.len());
    for &q in query_positions {
        for &k in key_positions {
            out.push(relative_position_bucket(
                k as i64 - q as i64,
                bidirectional,
                num_buckets,
                max_distance,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_buckets() {
        assert_eq!(relative_position_bucket(0, true, 8, 16), 0);
        assert_eq!(relative_position_bucket(1, true, 8, 16), 5);
        assert_eq!(relative_position_bucket(-9, true, 8, 16), 3);
    }

    #[test]
    fn matches_t5_defaults() {
        // 32 buckets, max distance 128, bidirectional (encoder defaults).
        let cases = [
            (-1, 1),
            (-8, 8),
            (-9, 8),
            (-20, 10),
            (-127, 15),
            (-500, 15),
            (3, 19),
            (200, 31),
        ];
        for (rp, want) in cases {
            assert_eq!(relative_position_bucket(rp, true, 32, 128), want, "rp={rp}");
        }
        // causal: future positions collapse to bucket 0
        assert_eq!(relative_position_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(-20, false, 32, 128), 17);
    }

    #[test]
    fn buckets_stay_in_range() {
        for nb in [4usize, 8, 16, 32] {
            for rp in -300i64..300 {
                assert!(relative_position_bucket(rp, true, nb, 64) < nb);
                assert!(relative_position_bucket(rp, false, nb, 64) < nb);
            }
        }
    }
}
