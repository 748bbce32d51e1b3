//! Driving styles, empirical population measures and the distances and
//! interaction terms defined on them.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{Matrix2, Vector6};

use crate::dynamics::{project_position, VehicleState};
use crate::error::{Error, Result};

/// Lane width of the default three-lane road; also the default spreading
/// radius of every style.
pub const LANE_WIDTH: f64 = 3.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum StyleLabel {
    Conservative,
    Aggressive,
    Cooperative,
}

impl StyleLabel {
    pub const ALL: [StyleLabel; 3] = [StyleLabel::Conservative, StyleLabel::Aggressive, StyleLabel::Cooperative];

    pub fn index(self) -> usize {
        match self {
            StyleLabel::Conservative => 0,
            StyleLabel::Aggressive => 1,
            StyleLabel::Cooperative => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StyleLabel::Conservative => "conservative",
            StyleLabel::Aggressive => "aggressive",
            StyleLabel::Cooperative => "cooperative",
        }
    }
}

impl fmt::Display for StyleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StyleLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(StyleLabel::Conservative),
            "aggressive" => Ok(StyleLabel::Aggressive),
            "cooperative" => Ok(StyleLabel::Cooperative),
            _ => Err(Error::invalid("style", "expected conservative, aggressive or cooperative")),
        }
    }
}

/// A point of the style space: a discrete label plus the continuous
/// (aggressiveness, reaction time, social awareness) components in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DrivingStyle {
    pub label: StyleLabel,
    pub aggressiveness: f64,
    pub reaction_time: f64,
    pub social_awareness: f64,
}

impl DrivingStyle {
    pub fn new(label: StyleLabel, aggressiveness: f64, reaction_time: f64, social_awareness: f64) -> Result<Self> {
        for (name, v) in [
            ("aggressiveness", aggressiveness),
            ("reaction_time", reaction_time),
            ("social_awareness", social_awareness),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must lie in [0, 1]",
                });
            }
        }
        Ok(Self {
            label,
            aggressiveness,
            reaction_time,
            social_awareness,
        })
    }

    /// Representative continuous components for a label.
    pub fn typical(label: StyleLabel) -> Self {
        let (a, r, s) = match label {
            StyleLabel::Conservative => (0.2, 0.8, 0.6),
            StyleLabel::Aggressive => (0.8, 0.3, 0.2),
            StyleLabel::Cooperative => (0.5, 0.5, 0.8),
        };
        Self {
            label,
            aggressiveness: a,
            reaction_time: r,
            social_awareness: s,
        }
    }

    /// Style parameters for this vehicle: the label defaults with the control
    /// weights scaled by `1 - 0.5 * aggressiveness`.
    pub fn parameters(&self) -> StyleParameters {
        style_defaults(self.label).with_aggressiveness(self.aggressiveness)
    }
}

/// Field amplification, decay and spreading per style, plus the diagonal of
/// the control-cost matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StyleParameters {
    pub alpha_b: f64,
    pub alpha_r: f64,
    pub lambda_b: f64,
    pub lambda_r: f64,
    pub sigma_b: f64,
    pub sigma_r: f64,
    pub r_s: f64,
    pub r_d: f64,
}

pub const DEFAULT_LAMBDA_B: f64 = 155.0;
pub const DEFAULT_LAMBDA_R: f64 = 8.0;

impl StyleParameters {
    pub fn validate(&self) -> Result<()> {
        let entries = [
            ("alpha_b", self.alpha_b),
            ("alpha_r", self.alpha_r),
            ("lambda_b", self.lambda_b),
            ("lambda_r", self.lambda_r),
            ("sigma_b", self.sigma_b),
            ("sigma_r", self.sigma_r),
            ("r_s", self.r_s),
            ("r_d", self.r_d),
        ];
        for (name, v) in entries {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be strictly positive",
                });
            }
        }
        Ok(())
    }

    pub fn with_aggressiveness(mut self, aggressiveness: f64) -> Self {
        let scale = 1.0 - 0.5 * aggressiveness.clamp(0.0, 1.0);
        self.r_s *= scale;
        self.r_d *= scale;
        self
    }

    pub fn control_cost(&self) -> Matrix2<f64> {
        Matrix2::new(self.r_s, 0.0, 0.0, self.r_d)
    }
}

/// Default parameter table. Every label shares the decay lengths
/// `lambda_b = 155`, `lambda_r = 8`; risk amplification is ordered
/// conservative > cooperative > aggressive and benefit amplification the
/// other way round.
pub fn style_defaults(label: StyleLabel) -> StyleParameters {
    let (alpha_b, alpha_r) = match label {
        StyleLabel::Conservative => (0.6, 1.4),
        StyleLabel::Cooperative => (1.0, 1.0),
        StyleLabel::Aggressive => (1.4, 0.7),
    };
    StyleParameters {
        alpha_b,
        alpha_r,
        lambda_b: DEFAULT_LAMBDA_B,
        lambda_r: DEFAULT_LAMBDA_R,
        sigma_b: LANE_WIDTH,
        sigma_r: LANE_WIDTH,
        r_s: 1.0,
        r_d: 1.0,
    }
}

/// Per-label style parameters, indexed by [`StyleLabel::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StyleTable {
    pub params: [StyleParameters; 3],
}

impl Default for StyleTable {
    fn default() -> Self {
        Self {
            params: StyleLabel::ALL.map(style_defaults),
        }
    }
}

impl StyleTable {
    pub fn get(&self, label: StyleLabel) -> &StyleParameters {
        &self.params[label.index()]
    }

    pub fn get_mut(&mut self, label: StyleLabel) -> &mut StyleParameters {
        &mut self.params[label.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vehicle {
    pub id: u32,
    pub state: VehicleState,
    pub style: DrivingStyle,
    pub params: StyleParameters,
    pub is_host: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub id: u32,
    pub state: VehicleState,
    pub weight: f64,
    pub style: StyleLabel,
}

/// Discrete probability measure over vehicle states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PopulationMeasure {
    pub atoms: Vec<Atom>,
}

impl PopulationMeasure {
    /// Uniform measure over the given `(id, state, style)` triples.
    pub fn uniform<I>(items: I) -> Self
    where
        I: IntoIterator<Item = (u32, VehicleState, StyleLabel)>,
    {
        let mut atoms: Vec<Atom> = items
            .into_iter()
            .map(|(id, state, style)| Atom {
                id,
                state,
                weight: 0.0,
                style,
            })
            .collect();
        let w = 1.0 / atoms.len().max(1) as f64;
        for a in &mut atoms {
            a.weight = w;
        }
        Self { atoms }
    }

    pub fn from_vehicles(vehicles: &[Vehicle]) -> Self {
        Self::uniform(vehicles.iter().map(|v| (v.id, v.state, v.style.label)))
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

/// Population split by style label; each part renormalized on its own.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StyleMeasures {
    parts: [PopulationMeasure; 3],
}

impl StyleMeasures {
    pub fn from_atoms<I>(items: I) -> Self
    where
        I: IntoIterator<Item = (u32, VehicleState, StyleLabel)>,
    {
        let mut buckets: [Vec<(u32, VehicleState, StyleLabel)>; 3] = Default::default();
        for item in items {
            buckets[item.2.index()].push(item);
        }
        Self {
            parts: buckets.map(PopulationMeasure::uniform),
        }
    }

    pub fn get(&self, label: StyleLabel) -> &PopulationMeasure {
        &self.parts[label.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (StyleLabel, &PopulationMeasure)> {
        StyleLabel::ALL.into_iter().map(move |l| (l, &self.parts[l.index()]))
    }

    pub fn is_empty(&self) -> bool {
        self.parts.iter().all(|p| p.is_empty())
    }

    pub fn atom_count(&self) -> usize {
        self.parts.iter().map(|p| p.len()).sum()
    }
}

/// Style-restricted measures of all vehicles except `exclude_id`.
pub fn partition_by_style(vehicles: &[Vehicle], exclude_id: Option<u32>) -> StyleMeasures {
    StyleMeasures::from_atoms(
        vehicles
            .iter()
            .filter(|v| Some(v.id) != exclude_id)
            .map(|v| (v.id, v.state, v.style.label)),
    )
}

/// Exhaustive assignment is used up to this many atoms.
const BRUTE_FORCE_LIMIT: usize = 8;

/// Exact 2-Wasserstein distance between two uniform measures with the same
/// number of atoms, using squared Euclidean ground cost on the full state.
pub fn wasserstein2(m1: &PopulationMeasure, m2: &PopulationMeasure) -> Result<f64> {
    let n = m1.len();
    if n != m2.len() {
        return Err(Error::invalid("measures", "atom counts differ"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let uniform = 1.0 / n as f64;
    let is_uniform = |m: &PopulationMeasure| m.atoms.iter().all(|a| (a.weight - uniform).abs() <= 1e-12);
    if !is_uniform(m1) || !is_uniform(m2) {
        return Err(Error::invalid("measures", "only uniform weights are supported"));
    }
    let cost: Vec<f64> = m1
        .atoms
        .iter()
        .flat_map(|a| {
            let x = a.state.to_vector();
            m2.atoms.iter().map(move |b| (x - b.state.to_vector()).norm_squared())
        })
        .collect();
    let total = if n <= BRUTE_FORCE_LIMIT {
        min_assignment_brute(&cost, n)
    } else {
        min_assignment_hungarian(&cost, n)
    };
    Ok(libm::sqrt((total * uniform).max(0.0)))
}

/// Minimum-cost perfect matching by enumerating all permutations (Heap's
/// algorithm).
fn min_assignment_brute(cost: &[f64], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = alloc::vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Hungarian method with row/column potentials, O(n³).
fn min_assignment_hungarian(cost: &[f64], n: usize) -> f64 {
    let inf = f64::INFINITY;
    // 1-based arrays; column 0 is a sentinel.
    let mut u = alloc::vec![0.0; n + 1];
    let mut v = alloc::vec![0.0; n + 1];
    let mut matched_row = alloc::vec![0usize; n + 1];
    let mut way = alloc::vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut min_v = alloc::vec![inf; n + 1];
        let mut used = alloc::vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = matched_row[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost[(r - 1) * n + (col - 1)] - u[r] - v[col];
                if reduced < min_v[col] {
                    min_v[col] = reduced;
                    way[col] = col0;
                }
                if min_v[col] < delta {
                    delta = min_v[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[matched_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_v[col] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            matched_row[col0] = matched_row[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|col| cost[(matched_row[col] - 1) * n + (col - 1)]).sum()
}

/// Pairwise interaction kernel of the population drift.
///
/// `K(x, y) = g * exp(-|p - q| / lambda_r) * (p - q) / |p - q|` in the
/// velocity slots, with `p`, `q` the planar positions of `x`, `y`. A positive
/// gain pushes vehicles apart.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InteractionKernel {
    pub gain: f64,
}

impl Default for InteractionKernel {
    fn default() -> Self {
        Self { gain: 0.0 }
    }
}

/// Mean-field drift `sum_atoms w * K(x, y)` over the style-split population.
pub fn mean_field_drift(
    x: &VehicleState,
    measures: &StyleMeasures,
    styles: &StyleTable,
    kernel: &InteractionKernel,
) -> Vector6<f64> {
    drift_and_jacobian(x, measures, styles, kernel).0
}

/// Drift together with its Jacobian with respect to the planar position
/// `(s, d)`; the Jacobian maps into the `(s_dot, d_dot)` slots.
pub fn drift_and_jacobian(
    x: &VehicleState,
    measures: &StyleMeasures,
    styles: &StyleTable,
    kernel: &InteractionKernel,
) -> (Vector6<f64>, Matrix2<f64>) {
    let mut drift = Vector6::zeros();
    let mut jac = Matrix2::zeros();
    if kernel.gain == 0.0 {
        return (drift, jac);
    }
    let p = project_position(x);
    for (label, measure) in measures.iter() {
        let lambda = styles.get(label).lambda_r;
        for atom in &measure.atoms {
            let q = project_position(&atom.state);
            let (ds, dd) = (p.s - q.s, p.d - q.d);
            let r = libm::hypot(ds, dd);
            if r < 1e-9 {
                continue;
            }
            let amp = kernel.gain * atom.weight * libm::exp(-r / lambda);
            let (us, ud) = (ds / r, dd / r);
            drift[2] += amp * us;
            drift[3] += amp * ud;
            // d/dp [e^{-r/l} (p-q)/r] = e^{-r/l} [ I/r - u u^T (1/r + 1/l) ]
            let c = 1.0 / r + 1.0 / lambda;
            jac[(0, 0)] += amp * (1.0 / r - us * us * c);
            jac[(0, 1)] += amp * (-us * ud * c);
            jac[(1, 0)] += amp * (-us * ud * c);
            jac[(1, 1)] += amp * (1.0 / r - ud * ud * c);
        }
    }
    (drift, jac)
}
