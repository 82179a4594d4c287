//! Flat index maps used to express broadcasting, slicing, permutation and
//! reduction as gathers and scatters.

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat position of `full`, the flat position in the tensor obtained
/// by removing `axes`.
pub(crate) fn reduce_map(full: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let reduced: Vec<usize> = full
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let rstrides = strides(&reduced);
    // stride of each full axis inside the reduced tensor (0 for removed axes)
    let mut per_axis = vec![0; full.len()];
    let mut r = 0;
    for (i, slot) in per_axis.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *slot = rstrides[r];
            r += 1;
        }
    }
    let n: usize = full.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; full.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        // odometer increment
        for ax in (0..full.len()).rev() {
            coord[ax] += 1;
            pos += per_axis[ax];
            if coord[ax] < full[ax] {
                break;
            }
            pos -= per_axis[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    (map, reduced)
}

/// Right-aligned broadcast of `src` to `dst`: for every flat position of
/// `dst`, the flat source position. `None` if not broadcastable.
pub(crate) fn expand_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let offset = dst.len() - src.len();
    let sstrides = strides(src);
    let mut per_axis = vec![0; dst.len()];
    for (i, &d) in src.iter().enumerate() {
        let target = dst[offset + i];
        if d == target {
            per_axis[offset + i] = sstrides[i];
        } else if d != 1 {
            return None;
        }
    }
    let n: usize = dst.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; dst.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..dst.len()).rev() {
            coord[ax] += 1;
            pos += per_axis[ax];
            if coord[ax] < dst[ax] {
                break;
            }
            pos -= per_axis[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    Some(map)
}

/// Source positions of the tensor whose axes are `perm` of `shape`.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let per_axis: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..out_shape.len()).rev() {
            coord[ax] += 1;
            pos += per_axis[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            pos -= per_axis[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    (map, out_shape)
}

/// Source positions of `shape` restricted to `start..start+len` along `axis`.
pub(crate) fn narrow_map(shape: &[usize], axis: usize, start: usize, len: usize) -> (Vec<usize>, Vec<usize>) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut map = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * shape[axis] + a) * inner;
            map.extend(base..base + inner);
        }
    }
    (map, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_map_middle_axis() {
        let (map, reduced) = reduce_map(&[2, 3, 2], &[1]);
        assert_eq!(reduced, vec![2, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }

    #[test]
    fn expand_channels() {
        let map = expand_map(&[2, 2], &[3, 2, 2]).unwrap();
        assert_eq!(map, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(expand_map(&[3], &[2, 2]).is_none());
        assert_eq!(expand_map(&[], &[2]).unwrap(), vec![0, 0]);
    }

    #[test]
    fn transpose_map() {
        let (map, shape) = permute_map(&[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(map, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn narrow_last_axis() {
        let (map, shape) = narrow_map(&[2, 4], 1, 1, 2);
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(map, vec![1, 2, 5, 6]);
    }
}
