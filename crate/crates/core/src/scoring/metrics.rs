//! Detection metrics over labeled scores: equal error rate and the minimum
//! normalized detection cost.

use std::fmt::Write as _;

use crate::{Error, Result};

/// Default target prior of the detection cost.
pub const P_TARGET: f64 = 0.01;

/// Summary of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[(bool, f64)]) -> Result<Self> {
        let (eer, eer_threshold) = compute_eer(scores)?;
        let min_dcf = compute_mindcf(scores, P_TARGET, 1.0, 1.0)?;
        let n_target = scores.iter().filter(|s| s.0).count();
        Ok(Self {
            eer,
            eer_threshold,
            min_dcf,
            n_target,
            n_nontarget: scores.len() - n_target,
        })
    }

    /// Flat `key=value` text.
    pub fn to_text(&self) -> String {
        format!(
            "eer={}\neer_threshold={}\nmin_dcf={}\np_target={}\nn_target={}\nn_nontarget={}\n",
            self.eer, self.eer_threshold, self.min_dcf, P_TARGET, self.n_target, self.n_nontarget
        )
    }
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn counts(scores: &[(bool, f64)]) -> Result<(usize, usize)> {
    if let Some(s) = scores.iter().find(|s| !s.1.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score {}", s.1)));
    }
    let nt = scores.iter().filter(|s| s.0).count();
    let nn = scores.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::InsufficientTrials(format!(
            "need target and nontarget trials, got {nt} and {nn}"
        )));
    }
    Ok((nt, nn))
}

/// FAR and FRR at every distinct score used as threshold, ascending, with a
/// final `+inf` point (FAR 0, FRR 1). A trial is accepted when its score is
/// at least the threshold.
pub fn sweep(scores: &[(bool, f64)]) -> Result<Vec<SweepPoint>> {
    let (nt, nn) = counts(scores)?;
    let mut sorted: Vec<(bool, f64)> = scores.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut out = Vec::new();
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].1;
        out.push(SweepPoint {
            threshold: t,
            far: (nn - non_below) as f64 / nn as f64,
            frr: tgt_below as f64 / nt as f64,
        });
        while i < sorted.len() && sorted[i].1 == t {
            if sorted[i].0 {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    out.push(SweepPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(out)
}

/// Interpolates the FAR = FRR crossing between the last sweep point with
/// FAR > FRR and the first with FAR <= FRR.
pub(crate) fn crossing(points: &[SweepPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("sweep ends at FAR 0, FRR 1");
    if k == 0 {
        return (points[0].far, points[0].threshold);
    }
    let (a, b) = (points[k - 1], points[k]);
    let (da, db) = (a.far - a.frr, b.far - b.frr);
    let alpha = da / (da - db);
    let eer = a.far + alpha * (b.far - a.far);
    let threshold = if b.threshold.is_finite() {
        a.threshold + alpha * (b.threshold - a.threshold)
    } else {
        a.threshold
    };
    (eer, threshold)
}

/// Equal error rate and the threshold where it occurs.
pub fn compute_eer(scores: &[(bool, f64)]) -> Result<(f64, f64)> {
    Ok(crossing(&sweep(scores)?))
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_mindcf(scores: &[(bool, f64)], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(p_target > 0.0 && p_target < 1.0) || !(c_miss > 0.0) || !(c_fa > 0.0) {
        return Err(Error::config("need 0 < p_target < 1 and positive costs"));
    }
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    Ok(sweep(scores)?
        .iter()
        .map(|p| (c_miss * p_target * p.frr + c_fa * (1.0 - p_target) * p.far) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Sweep points as CSV with header `threshold,far,frr`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.far, p.frr).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let s = [(true, 0.8), (true, 0.4), (false, 0.6), (false, 0.2)];
        assert_eq!(compute_eer(&s).unwrap().0, 0.5);
    }

    #[test]
    fn separated_sets_are_perfect() {
        let s = [(true, 0.9), (true, 0.7), (false, 0.3), (false, -0.1)];
        assert_eq!(compute_eer(&s).unwrap().0, 0.0);
        assert_eq!(compute_mindcf(&s, P_TARGET, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn fully_reversed_sets_are_worst() {
        let s = [(true, 0.1), (false, 0.9)];
        assert_eq!(compute_eer(&s).unwrap().0, 1.0);
        assert_eq!(compute_mindcf(&s, P_TARGET, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn missing_class_is_rejected() {
        assert!(matches!(compute_eer(&[(true, 1.0)]), Err(Error::InsufficientTrials(_))));
        assert!(matches!(
            compute_mindcf(&[(false, 1.0)], P_TARGET, 1.0, 1.0),
            Err(Error::InsufficientTrials(_))
        ));
    }

    #[test]
    fn nan_scores_are_rejected() {
        assert!(matches!(
            compute_eer(&[(true, f64::NAN), (false, 0.0)]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn report_text_has_keys() {
        let s = [(true, 0.9), (false, 0.1)];
        let text = EvalReport::from_scores(&s).unwrap().to_text();
        assert!(text.starts_with("eer=0\neer_threshold="));
        assert!(text.contains("min_dcf=0\n"));
        assert!(text.contains("n_target=1\nn_nontarget=1\n"));
    }

    #[test]
    fn sweep_csv_rows() {
        let s = [(true, 1.0), (false, 0.0)];
        let csv = sweep_csv(&sweep(&s).unwrap());
        assert_eq!(csv, "threshold,far,frr\n0,1,0\n1,0,0\ninf,0,1\n");
    }
}
