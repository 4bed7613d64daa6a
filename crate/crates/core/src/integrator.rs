//! Adaptive Dormand–Prince 8(5,3) integrator with exact landing on requested output times.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("step size underflow at t = {t}")]
    StepSizeTooSmall { t: f64 },
    #[error("maximum step count {steps} reached at t = {t}")]
    MaxSteps { t: f64, steps: usize },
    #[error("right-hand side failed at t = {t}: {message}")]
    Rhs { t: f64, message: String },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid output times: {0}")]
    InvalidOutputTimes(String),
}

impl IntegrationError {
    /// Last epoch at which the solution was known to be good.
    pub fn last_good_epoch(&self) -> Option<f64> {
        match self {
            IntegrationError::StepSizeTooSmall { t }
            | IntegrationError::MaxSteps { t, .. }
            | IntegrationError::Rhs { t, .. }
            | IntegrationError::NonFinite { t } => Some(*t),
            IntegrationError::InvalidOutputTimes(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-12,
            atol: 1e-12,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 0.526001519587677318785587544488E-01;
const C3: f64 = 0.789002279381515978178381316732E-01;
const C4: f64 = 0.118350341907227396726757197510E+00;
const C5: f64 = 0.281649658092772603273242802490E+00;
const C6: f64 = 0.333333333333333333333333333333E+00;
const C7: f64 = 0.25E+00;
const C8: f64 = 0.307692307692307692307692307692E+00;
const C9: f64 = 0.651282051282051282051282051282E+00;
const C10: f64 = 0.6E+00;
const C11: f64 = 0.857142857142857142857142857142E+00;

const A21: f64 = 5.26001519587677318785587544488E-2;
const A31: f64 = 1.97250569845378994544595329183E-2;
const A32: f64 = 5.91751709536136983633785987549E-2;
const A41: f64 = 2.95875854768068491816892993775E-2;
const A43: f64 = 8.87627564304205475450678981324E-2;
const A51: f64 = 2.41365134159266685502369798665E-1;
const A53: f64 = -8.84549479328286085344864962717E-1;
const A54: f64 = 9.24834003261792003115737966543E-1;
const A61: f64 = 3.7037037037037037037037037037E-2;
const A64: f64 = 1.70828608729473871279604482173E-1;
const A65: f64 = 1.25467687566822425016691814123E-1;
const A71: f64 = 3.7109375E-2;
const A74: f64 = 1.70252211019544039314978060272E-1;
const A75: f64 = 6.02165389804559606850219397283E-2;
const A76: f64 = -1.7578125E-2;
const A81: f64 = 3.70920001185047927108779319836E-2;
const A84: f64 = 1.70383925712239993810214054705E-1;
const A85: f64 = 1.07262030446373284651809199168E-1;
const A86: f64 = -1.53194377486244017527936158236E-2;
const A87: f64 = 8.27378916381402288758473766002E-3;
const A91: f64 = 6.24110958716075717114429577812E-1;
const A94: f64 = -3.36089262944694129406857109825E0;
const A95: f64 = -8.68219346841726006818189891453E-1;
const A96: f64 = 2.75920996994467083049415600797E1;
const A97: f64 = 2.01540675504778934086186788979E1;
const A98: f64 = -4.34898841810699588477366255144E1;
const A101: f64 = 4.77662536438264365890433908527E-1;
const A104: f64 = -2.48811461997166764192642586468E0;
const A105: f64 = -5.90290826836842996371446475743E-1;
const A106: f64 = 2.12300514481811942347288949897E1;
const A107: f64 = 1.52792336328824235832596922938E1;
const A108: f64 = -3.32882109689848629194453265587E1;
const A109: f64 = -2.03312017085086261358222928593E-2;
const A111: f64 = -9.3714243008598732571704021658E-1;
const A114: f64 = 5.18637242884406370830023853209E0;
const A115: f64 = 1.09143734899672957818500254654E0;
const A116: f64 = -8.14978701074692612513997267357E0;
const A117: f64 = -1.85200656599969598641566180701E1;
const A118: f64 = 2.27394870993505042818970056734E1;
const A119: f64 = 2.49360555267965238987089396762E0;
const A1110: f64 = -3.0467644718982195003823669022E0;
const A121: f64 = 2.27331014751653820792359768449E0;
const A124: f64 = -1.05344954667372501984066689879E1;
const A125: f64 = -2.00087205822486249909675718444E0;
const A126: f64 = -1.79589318631187989172765950534E1;
const A127: f64 = 2.79488845294199600508499808837E1;
const A128: f64 = -2.85899827713502369474065508674E0;
const A129: f64 = -8.87285693353062954433549289258E0;
const A1210: f64 = 1.23605671757943030647266201528E1;
const A1211: f64 = 6.43392746015763530355970484046E-1;

const B1: f64 = 5.42937341165687622380535766363E-2;
const B6: f64 = 4.45031289275240888144113950566E0;
const B7: f64 = 1.89151789931450038304281599044E0;
const B8: f64 = -5.8012039600105847814672114227E0;
const B9: f64 = 3.1116436695781989440891606237E-1;
const B10: f64 = -1.52160949662516078556178806805E-1;
const B11: f64 = 2.01365400804030348374776537501E-1;
const B12: f64 = 4.47106157277725905176885569043E-2;

const BHH1: f64 = 0.244094488188976377952755905512E+00;
const BHH2: f64 = 0.733846688281611857341361741547E+00;
const BHH3: f64 = 0.220588235294117647058823529412E-01;

const ER1: f64 = 0.1312004499419488073250102996E-01;
const ER6: f64 = -0.1225156446376204440720569753E+01;
const ER7: f64 = -0.4957589496572501915214079952E+00;
const ER8: f64 = 0.1664377182454986536961530415E+01;
const ER9: f64 = -0.3503288487499736816886487290E+00;
const ER10: f64 = 0.3341791187130174790297318841E+00;
const ER11: f64 = 0.8192320648511571246570742613E-01;
const ER12: f64 = -0.2235530786388629525884427845E-01;

// (node, [(stage, coefficient)]) for stages 2..=12; stage indices are zero-based.
const STAGES: [(f64, &[(usize, f64)]); 11] = [
    (C2, &[(0, A21)]),
    (C3, &[(0, A31), (1, A32)]),
    (C4, &[(0, A41), (2, A43)]),
    (C5, &[(0, A51), (2, A53), (3, A54)]),
    (C6, &[(0, A61), (3, A64), (4, A65)]),
    (C7, &[(0, A71), (3, A74), (4, A75), (5, A76)]),
    (C8, &[(0, A81), (3, A84), (4, A85), (5, A86), (6, A87)]),
    (C9, &[(0, A91), (3, A94), (4, A95), (5, A96), (6, A97), (7, A98)]),
    (
        C10,
        &[(0, A101), (3, A104), (4, A105), (5, A106), (6, A107), (7, A108), (8, A109)],
    ),
    (
        C11,
        &[
            (0, A111),
            (3, A114),
            (4, A115),
            (5, A116),
            (6, A117),
            (7, A118),
            (8, A119),
            (9, A1110),
        ],
    ),
    (
        1.0,
        &[
            (0, A121),
            (3, A124),
            (4, A125),
            (5, A126),
            (6, A127),
            (7, A128),
            (8, A129),
            (9, A1210),
            (10, A1211),
        ],
    ),
];

const SAFE: f64 = 0.9;
const FACC1: f64 = 1.0 / 0.333;
const FACC2: f64 = 1.0 / 6.0;
const EXPO1: f64 = 1.0 / 8.0;

/// Integrates `dy/dt = f(t, y)` forward from `t0`, stopping exactly at every
/// time in `outputs` (non-decreasing, all `>= t0`) and calling `on_output`
/// with the output index, time, and state.
pub fn integrate<F, O>(
    f: F,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    opts: &IntegratorOptions,
    on_output: O,
) -> Result<IntegrationStats, IntegrationError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), String>,
    O: FnMut(usize, f64, &[f64]),
{
    integrate_controlled(f, t0, y0, y0.len(), outputs, opts, on_output)
}

/// [`integrate`] with step-size control driven by the first `controlled`
/// components only. The remaining components are carried along without
/// influencing the step sequence.
pub fn integrate_controlled<F, O>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    controlled: usize,
    outputs: &[f64],
    opts: &IntegratorOptions,
    mut on_output: O,
) -> Result<IntegrationStats, IntegrationError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), String>,
    O: FnMut(usize, f64, &[f64]),
{
    if controlled == 0 || controlled > y0.len() {
        return Err(IntegrationError::InvalidOutputTimes(format!(
            "controlled component count {controlled} outside 1..={}",
            y0.len()
        )));
    }
    if outputs.iter().any(|t| !t.is_finite() || *t < t0) {
        return Err(IntegrationError::InvalidOutputTimes(
            "output times must be finite and not before the initial time".into(),
        ));
    }
    if outputs.windows(2).any(|w| w[1] < w[0]) {
        return Err(IntegrationError::InvalidOutputTimes(
            "output times must be non-decreasing".into(),
        ));
    }
    let n = y0.len();
    let mut stats = IntegrationStats::default();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut next = 0;
    while next < outputs.len() && outputs[next] == t {
        on_output(next, t, &y);
        next += 1;
    }
    if next == outputs.len() {
        return Ok(stats);
    }
    let tf = *outputs.last().unwrap();
    let h_max = tf - t0;

    let mut eval = |t: f64, y: &[f64], dy: &mut [f64], stats: &mut IntegrationStats| {
        stats.evaluations += 1;
        f(t, y, dy)
    };
    // Failures are reported against the last accepted epoch, not the stage time.
    let rhs_err = |t: f64| move |message: String| IntegrationError::Rhs { t, message };

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 12];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    eval(t, &y, &mut k[0], &mut stats).map_err(rhs_err(t))?;

    let mut h = initial_step(&mut eval, t, &y, &k[0], controlled, h_max, opts, &mut stats)?;
    let mut last_rejected = false;
    let mut steps = 0usize;

    while next < outputs.len() {
        if steps >= opts.max_steps {
            return Err(IntegrationError::MaxSteps { t, steps });
        }
        if h.abs() <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(IntegrationError::StepSizeTooSmall { t });
        }
        let target = outputs[next];
        let proposed = h;
        let mut clipped = false;
        if t + h >= target || (target - (t + h)) <= 1e-12 * h {
            h = target - t;
            clipped = true;
        }

        for (s, (c, row)) in STAGES.iter().enumerate() {
            for i in 0..n {
                let mut acc = 0.0;
                for &(j, a) in row.iter() {
                    acc += a * k[j][i];
                }
                ytmp[i] = y[i] + h * acc;
            }
            let (_, rest) = k.split_at_mut(s + 1);
            eval(t + c * h, &ytmp, &mut rest[0], &mut stats).map_err(rhs_err(t))?;
        }

        let mut err = 0.0;
        let mut err2 = 0.0;
        for i in 0..n {
            let incr = B1 * k[0][i]
                + B6 * k[5][i]
                + B7 * k[6][i]
                + B8 * k[7][i]
                + B9 * k[8][i]
                + B10 * k[9][i]
                + B11 * k[10][i]
                + B12 * k[11][i];
            ynew[i] = y[i] + h * incr;
            if i >= controlled {
                continue;
            }
            let sk = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            let e3 = incr - BHH1 * k[0][i] - BHH2 * k[8][i] - BHH3 * k[11][i];
            err2 += (e3 / sk).powi(2);
            let e5 = ER1 * k[0][i]
                + ER6 * k[5][i]
                + ER7 * k[6][i]
                + ER8 * k[7][i]
                + ER9 * k[8][i]
                + ER10 * k[9][i]
                + ER11 * k[10][i]
                + ER12 * k[11][i];
            err += (e5 / sk).powi(2);
        }
        let mut deno = err + 0.01 * err2;
        if deno <= 0.0 {
            deno = 1.0;
        }
        let err = h.abs() * err * (1.0 / (deno * controlled as f64)).sqrt();
        steps += 1;

        if !err.is_finite() {
            stats.rejected += 1;
            last_rejected = true;
            h *= 0.1;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        let fac = FACC2.max(FACC1.min(fac11 / SAFE));
        let mut h_new = h / fac;

        if err <= 1.0 {
            stats.accepted += 1;
            let t_new = if clipped { target } else { t + h };
            if ynew.iter().any(|v| !v.is_finite()) {
                return Err(IntegrationError::NonFinite { t });
            }
            std::mem::swap(&mut y, &mut ynew);
            eval(t_new, &y, &mut k[0], &mut stats).map_err(rhs_err(t))?;
            t = t_new;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            if clipped {
                h_new = h_new.max(proposed);
                while next < outputs.len() && outputs[next] == t {
                    on_output(next, t, &y);
                    next += 1;
                }
            }
        } else {
            h_new = h / FACC1.min(fac11 / SAFE);
            stats.rejected += 1;
            last_rejected = true;
        }
        h = h_new.min(h_max);
    }
    Ok(stats)
}

fn initial_step<E>(
    eval: &mut E,
    t: f64,
    y: &[f64],
    f0: &[f64],
    controlled: usize,
    h_max: f64,
    opts: &IntegratorOptions,
    stats: &mut IntegrationStats,
) -> Result<f64, IntegrationError>
where
    E: FnMut(f64, &[f64], &mut [f64], &mut IntegrationStats) -> Result<(), String>,
{
    let n = y.len();
    let sk: Vec<f64> = y[..controlled]
        .iter()
        .map(|v| opts.atol + opts.rtol * v.abs())
        .collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
    let dny: f64 = y.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        (dny / dnf).sqrt() * 0.01
    };
    h = h.min(h_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + h * f).collect();
    let mut f1 = vec![0.0; n];
    eval(t + h, &y1, &mut f1, stats).map_err(|message| IntegrationError::Rhs { t, message })?;
    let der2 = f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt()
        / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(1.0 / 8.0)
    };
    Ok((100.0 * h).min(h1).min(h_max))
}
