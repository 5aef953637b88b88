//! Brute-force reference implementations, written from the metric
//! definitions without any of the library's counting structures.

/// One PISA answer: group 0 or 1, whether the true label is the positive
/// one, and the predicted label's positivity (`None` for a format error).
#[derive(Debug, Clone, Copy)]
pub struct Case {
    pub group: u8,
    pub truth: bool,
    pub pred: Option<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Expected {
    pub spd: Option<f64>,
    pub eod: Option<f64>,
    pub aod: Option<f64>,
    pub dir: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub fer: Option<f64>,
    pub overall_accuracy: Option<f64>,
    pub valid_accuracy: Option<f64>,
}

fn frac(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

fn minus(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// P(pred = positive | group, condition) over valid answers.
fn rate(cases: &[Case], group: u8, condition: impl Fn(&Case) -> bool) -> Option<f64> {
    let pool: Vec<&Case> = cases
        .iter()
        .filter(|c| c.group == group && c.pred.is_some() && condition(c))
        .collect();
    frac(pool.iter().filter(|c| c.pred == Some(true)).count(), pool.len())
}

pub fn pisa(cases: &[Case]) -> Expected {
    let valid: Vec<&Case> = cases.iter().filter(|c| c.pred.is_some()).collect();
    let correct = valid.iter().filter(|c| c.pred == Some(c.truth)).count();
    let predicted_pos = valid.iter().filter(|c| c.pred == Some(true)).count();
    let actual_pos = valid.iter().filter(|c| c.truth).count();
    let true_pos = valid.iter().filter(|c| c.truth && c.pred == Some(true)).count();

    let sel = |g| rate(cases, g, |_| true);
    let tpr = |g| rate(cases, g, |c| c.truth);
    let fpr = |g| rate(cases, g, |c| !c.truth);

    let dir = match (sel(0), sel(1)) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let aod = match (minus(fpr(0), fpr(1)), minus(tpr(0), tpr(1))) {
        (Some(f), Some(t)) => Some((f + t) / 2.0),
        _ => None,
    };
    Expected {
        spd: minus(sel(0), sel(1)),
        eod: minus(tpr(0), tpr(1)),
        aod,
        dir,
        accuracy: frac(correct, valid.len()),
        precision: frac(true_pos, predicted_pos),
        recall: frac(true_pos, actual_pos),
        fer: frac(cases.len() - valid.len(), cases.len()),
        overall_accuracy: frac(correct, cases.len()),
        valid_accuracy: frac(correct, valid.len()),
    }
}

/// Counterfactual change rate over pairs of predictions. Returns the rate,
/// the number of usable pairs and the number excluded for a format error.
pub fn cfr(pairs: &[(Option<bool>, Option<bool>)]) -> (Option<f64>, usize, usize) {
    let usable: Vec<_> = pairs.iter().filter(|(a, b)| a.is_some() && b.is_some()).collect();
    let changed = usable.iter().filter(|(a, b)| a != b).count();
    (frac(changed, usable.len()), usable.len(), pairs.len() - usable.len())
}

/// StereoSet outcome of one answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pick {
    Stereo,
    Anti,
    Unrelated,
    Invalid,
}

/// SS, LMS and ICAT (0–100) over the answers `keep` selects.
pub fn stereo<T>(items: &[(T, Pick)], keep: impl Fn(&T) -> bool) -> (Option<f64>, Option<f64>, Option<f64>) {
    let picks: Vec<Pick> = items.iter().filter(|(k, _)| keep(k)).map(|(_, p)| *p).collect();
    let stereo = picks.iter().filter(|p| **p == Pick::Stereo).count();
    let meaningful = picks.iter().filter(|p| matches!(p, Pick::Stereo | Pick::Anti)).count();
    let lms = frac(meaningful, picks.len()).map(|x| x * 100.0);
    let ss = frac(stereo, meaningful).map(|x| x * 100.0);
    let icat = match (ss, lms) {
        (Some(s), Some(l)) => Some(if s > 50.0 { l * (100.0 - s) / 50.0 } else { l * s / 50.0 }),
        _ => None,
    };
    (ss, lms, icat)
}

/// Accuracy over multiple-choice answers: `(overall, valid-only, fer)`.
pub fn choice_accuracy(items: &[(Option<usize>, usize)]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let valid = items.iter().filter(|(p, _)| p.is_some()).count();
    let correct = items.iter().filter(|(p, c)| *p == Some(*c)).count();
    (frac(correct, items.len()), frac(correct, valid), frac(items.len() - valid, items.len()))
}
