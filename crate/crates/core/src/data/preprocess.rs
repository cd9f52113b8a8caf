use super::SkeletonSequence;
use crate::error::{shape_err, Error, Result};

/// Centres on `center_joint`'s first-frame position and linearly resamples
/// to `target_t` frames. Output frame `i` samples source time
/// `i · T / target_t`, clamped to the last frame, so an unchanged length is
/// an exact fixed point and doubling inserts midpoints.
pub fn preprocess(seq: &SkeletonSequence, target_t: usize, center_joint: usize) -> Result<SkeletonSequence> {
    if seq.n_frames == 0 || target_t == 0 {
        return Err(Error::EmptySequence);
    }
    if center_joint >= seq.n_joints {
        return Err(shape_err(format!(
            "center joint {center_joint} out of range for {} joints",
            seq.n_joints
        )));
    }
    let origin = seq.joint(0, center_joint);
    let width = seq.n_joints * 3;
    let last = seq.n_frames - 1;
    let mut coords = Vec::with_capacity(target_t * width);
    for i in 0..target_t {
        let pos = i as f64 * seq.n_frames as f64 / target_t as f64;
        let lo = (pos.floor() as usize).min(last);
        let hi = (lo + 1).min(last);
        let w = if lo == last { 0.0 } else { pos - lo as f64 };
        let (a, b) = (seq.frame(lo), seq.frame(hi));
        for k in 0..width {
            let v = if w == 0.0 { a[k] } else { a[k] + w * (b[k] - a[k]) };
            coords.push(v - origin[k % 3]);
        }
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(shape_err("sequence contains non-finite coordinates"));
    }
    SkeletonSequence::new(target_t, seq.n_joints, coords, seq.label, seq.meta.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SequenceMeta;

    fn seq(t: usize, n: usize, coords: Vec<f64>) -> SkeletonSequence {
        SkeletonSequence::new(t, n, coords, 0, SequenceMeta::default()).unwrap()
    }

    #[test]
    fn centred_same_length_is_fixed_point() {
        let s = seq(3, 2, vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 4.0, 5.0, 6.0, -1.0, 0.5, 2.0, 7.0, 8.0, 9.0]);
        let p = preprocess(&s, 3, 0).unwrap();
        assert_eq!(p.coords, s.coords);
    }

    #[test]
    fn doubling_inserts_midpoints() {
        let s = seq(2, 1, vec![0.0, 0.0, 0.0, 2.0, 4.0, -6.0]);
        let p = preprocess(&s, 4, 0).unwrap();
        assert_eq!(p.joint(0, 0), [0.0, 0.0, 0.0]);
        assert_eq!(p.joint(1, 0), [1.0, 2.0, -3.0]);
        assert_eq!(p.joint(2, 0), [2.0, 4.0, -6.0]);
        assert_eq!(p.joint(3, 0), [2.0, 4.0, -6.0]);
    }

    #[test]
    fn centre_joint_moves_to_origin() {
        let s = seq(2, 2, vec![5.0, 6.0, 7.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let p = preprocess(&s, 5, 1).unwrap();
        assert_eq!(p.joint(0, 1), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn errors() {
        let empty = seq(0, 2, vec![]);
        assert!(matches!(preprocess(&empty, 4, 0), Err(Error::EmptySequence)));
        let s = seq(1, 1, vec![0.0; 3]);
        assert!(preprocess(&s, 4, 3).is_err());
    }
}
