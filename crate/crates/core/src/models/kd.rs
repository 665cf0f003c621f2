use super::Matrix;
use crate::error::{Error, Result};

/// Squared Euclidean distance between student and teacher logits.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64]) -> Result<f64> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::DimMismatch {
            expected: teacher_logits.len(),
            actual: student_logits.len(),
        });
    }
    Ok(student_logits
        .iter()
        .zip(teacher_logits)
        .map(|(s, t)| (s - t) * (s - t))
        .sum())
}

/// [`kd_loss`] averaged over the rows of a batch.
pub fn kd_loss_batch(student: &Matrix, teacher: &Matrix) -> Result<f64> {
    if student.rows() != teacher.rows() {
        return Err(Error::DimMismatch {
            expected: teacher.rows(),
            actual: student.rows(),
        });
    }
    if student.rows() == 0 {
        return Err(Error::Empty("logit batch"));
    }
    let mut total = 0.0;
    for (s, t) in student.iter_rows().zip(teacher.iter_rows()) {
        total += kd_loss(s, t)?;
    }
    Ok(total / student.rows() as f64)
}

/// `alpha * l_cls + (1 - alpha) * l_kd`.
pub fn combined_loss(alpha: f64, l_cls: f64, l_kd: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * l_cls + (1.0 - alpha) * l_kd)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn kd_examples() {
        assert_eq!(kd_loss(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 0.0);
        assert_eq!(kd_loss(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(kd_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kd_matches_sum_of_squares_oracle() {
        let s = [0.25, -1.5, 3.0, 0.125];
        let t = [1.0, 0.5, -2.0, 0.125];
        // (-0.75)^2 + (-2)^2 + 5^2 + 0
        let expected = 0.5625 + 4.0 + 25.0;
        assert!((kd_loss(&s, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kd_batch_averages_rows() {
        let s = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(kd_loss_batch(&s, &t).unwrap(), (1.0 + 4.0) / 2.0);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(1.0, 2.0, 4.0).unwrap(), 2.0);
        assert_eq!(combined_loss(0.0, 2.0, 4.0).unwrap(), 4.0);
        assert_eq!(combined_loss(0.5, 2.0, 4.0).unwrap(), 3.0);
        assert!(combined_loss(1.5, 2.0, 4.0).is_err());
        assert!(combined_loss(-0.1, 2.0, 4.0).is_err());
    }

    proptest! {
        #[test]
        fn kd_is_symmetric_and_zero_on_diagonal(
            pairs in prop::collection::vec((-100f64..100.0, -100f64..100.0), 1..12)
        ) {
            let s: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let t: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(kd_loss(&s, &t).unwrap(), kd_loss(&t, &s).unwrap());
            prop_assert_eq!(kd_loss(&s, &s).unwrap(), 0.0);
        }

        #[test]
        fn combined_is_monotone(
            alpha in 0.001f64..0.999, cls in 0f64..10.0, kd in 0f64..10.0, bump in 0.001f64..5.0
        ) {
            let base = combined_loss(alpha, cls, kd).unwrap();
            prop_assert!(combined_loss(alpha, cls + bump, kd).unwrap() > base);
            prop_assert!(combined_loss(alpha, cls, kd + bump).unwrap() > base);
        }
    }
}
