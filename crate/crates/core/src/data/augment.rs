//! Truncation and the two training-set augmentations (duplication, sliding
//! windows). Augmentation applies to training prefixes only.

/// Keeps the most recent `max_len` items.
pub fn truncate_sequence(seq: &[u32], max_len: usize) -> &[u32] {
    &seq[seq.len().saturating_sub(max_len)..]
}

/// `k` identical copies. Independent corruption of each copy happens when
/// training examples are built.
pub fn augment_duplicate(seq: &[u32], k: usize) -> Vec<Vec<u32>> {
    vec![seq.to_vec(); k.max(1)]
}

/// Start offsets of the windows produced by [`augment_sliding_window`].
pub fn window_offsets(len: usize, max_len: usize, stride: usize) -> Vec<usize> {
    if len <= max_len {
        return vec![0];
    }
    let stride = stride.max(1);
    let last = len - max_len;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offsets.last().unwrap() != last {
        offsets.push(last);
    }
    offsets
}

/// Windows of exactly `max_len` items starting at `0, stride, 2*stride, ...`,
/// with a final window anchored at the end so the last item is always covered.
/// Sequences no longer than `max_len` come back unchanged.
pub fn augment_sliding_window(seq: &[u32], max_len: usize, stride: usize) -> Vec<Vec<u32>> {
    window_offsets(seq.len(), max_len, stride)
        .into_iter()
        .map(|o| seq[o..(o + max_len).min(seq.len())].to_vec())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncation_keeps_tail() {
        let long: Vec<u32> = (1..=300).collect();
        let t = truncate_sequence(&long, 200);
        assert_eq!(t.len(), 200);
        assert_eq!(t[0], 101);
        assert_eq!(*t.last().unwrap(), 300);
        let short: Vec<u32> = (1..=10).collect();
        assert_eq!(truncate_sequence(&short, 50), &short[..]);
        let exact: Vec<u32> = (1..=50).collect();
        assert_eq!(truncate_sequence(&exact, 50), &exact[..]);
    }

    #[test]
    fn duplication_counts() {
        assert_eq!(augment_duplicate(&[1, 2], 1), vec![vec![1, 2]]);
        assert_eq!(augment_duplicate(&[1, 2], 3).len(), 3);
        let users: Vec<Vec<u32>> = (0..7).map(|u| vec![u, u + 1, u + 2]).collect();
        let total: usize = users.iter().map(|s| augment_duplicate(s, 10).len()).sum();
        assert_eq!(total, 70);
    }

    #[test]
    fn window_offsets_by_hand() {
        let s5 = [1, 2, 3, 4, 5];
        assert_eq!(augment_sliding_window(&s5, 5, 2), vec![s5.to_vec()]);
        assert_eq!(window_offsets(7, 5, 2), vec![0, 2]);
        assert_eq!(window_offsets(6, 5, 4), vec![0, 1]);
        let s6 = [1, 2, 3, 4, 5, 6];
        assert_eq!(
            augment_sliding_window(&s6, 5, 4),
            vec![vec![1, 2, 3, 4, 5], vec![2, 3, 4, 5, 6]]
        );
    }

    proptest! {
        #[test]
        fn windows_full_size_and_cover_last(len in 1usize..80, max_len in 1usize..20, stride in 1usize..10) {
            let seq: Vec<u32> = (1..=len as u32).collect();
            let windows = augment_sliding_window(&seq, max_len, stride);
            let last = *seq.last().unwrap();
            prop_assert!(windows.iter().any(|w| w.last() == Some(&last)));
            if len > max_len {
                prop_assert!(windows.iter().all(|w| w.len() == max_len));
            } else {
                prop_assert_eq!(windows, vec![seq.clone()]);
            }
        }
    }
}
