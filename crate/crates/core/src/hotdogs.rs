//! Deferred splitting: each mixand is propagated whole until the last
//! checkpoint at which its weighted split criterion stays below tolerance,
//! then split there, with child expansions built by one of three fidelity
//! variants. Also hosts the immediate-splitting driver used as a baseline.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VectorField;
use crate::gmm::{split_multivariate, GaussianMixture, GmmError, SplitLibraryEntry};
use crate::heuristics::{
    sigma_points, split_direction, statistical_linearization_from_images, whitening_from_parent,
    HeuristicError, HeuristicKind, HeuristicSpec, SplitContext, SplitDirection,
};
use crate::integrator::IntegratorOptions;
use crate::propagation::{
    integrate_flow, propagate_moments_first, propagate_moments_second, stm_between,
    stm_shift_reference, stt_between, symmetrize, FlowExpansion, FlowOrder, Lineage, Mixand,
    PropagationError,
};
use crate::tensorlab::{whitening_factor, Tensor3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HotdogsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty criterion series")]
    EmptySeries,
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("mixand {lineage}: {source}")]
    AtMixand {
        lineage: String,
        #[source]
        source: Box<HotdogsError>,
    },
}

impl HotdogsError {
    fn at(self, lineage: &Lineage) -> Self {
        match self {
            e @ HotdogsError::AtMixand { .. } => e,
            e => HotdogsError::AtMixand {
                lineage: lineage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, without lineage context.
    pub fn root_cause(&self) -> &HotdogsError {
        match self {
            HotdogsError::AtMixand { source, .. } => source.root_cause(),
            e => e,
        }
    }
}

/// Child expansion fidelity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Reference STT kept, STM shifted linearly to the child mean.
    DS1,
    /// Reference STT kept, STM integrated about the child mean.
    DS2,
    /// STM and STT integrated about the child mean.
    DS3,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::DS1 => "DS1",
            Variant::DS2 => "DS2",
            Variant::DS3 => "DS3",
        })
    }
}

impl FromStr for Variant {
    type Err = HotdogsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace('-', "").as_str() {
            "DS1" => Ok(Variant::DS1),
            "DS2" => Ok(Variant::DS2),
            "DS3" => Ok(Variant::DS3),
            _ => Err(HotdogsError::Config(format!(
                "unknown variant {s:?} (expected DS1, DS2 or DS3)"
            ))),
        }
    }
}

/// Which covariance the whitening of a split tree is built from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningPolicy {
    /// The depth-1 root's mapped covariance, shared by every descendant.
    #[default]
    FrozenRoot,
    /// Each mixand's own mapped covariance.
    Refresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotdogsConfig {
    /// Weighted criterion tolerance. Zero splits every mixand at its leg start.
    pub epsilon: f64,
    pub w_min: f64,
    /// Root counts as depth 1.
    pub max_depth: usize,
    pub variant: Variant,
    /// 1 for linear moment mapping, 2 for the second-order Taylor mapping.
    pub moment_order: u8,
    pub heuristic: HeuristicSpec,
    pub l_s: usize,
    pub lambda: f64,
    /// Number of equally spaced checkpoints including both ends.
    pub checkpoints: usize,
    pub whitening: WhiteningPolicy,
    pub integrator: IntegratorOptions,
}

impl HotdogsConfig {
    pub fn new(kind: HeuristicKind, variant: Variant, epsilon: f64, max_depth: usize) -> Self {
        Self {
            epsilon,
            w_min: 0.0,
            max_depth,
            variant,
            moment_order: 1,
            heuristic: HeuristicSpec::new(kind),
            l_s: 3,
            lambda: 1e-4,
            checkpoints: 64,
            whitening: WhiteningPolicy::FrozenRoot,
            integrator: IntegratorOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HotdogsError> {
        if !(self.epsilon >= 0.0) {
            return Err(HotdogsError::Config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if !(0.0..1.0).contains(&self.w_min) {
            return Err(HotdogsError::Config(format!(
                "w_min must lie in [0, 1), got {}",
                self.w_min
            )));
        }
        if self.max_depth == 0 {
            return Err(HotdogsError::Config("max_depth must be at least 1".into()));
        }
        if !matches!(self.moment_order, 1 | 2) {
            return Err(HotdogsError::Config(format!(
                "moment_order must be 1 or 2, got {}",
                self.moment_order
            )));
        }
        if self.checkpoints < 2 {
            return Err(HotdogsError::Config("at least two checkpoints are required".into()));
        }
        self.heuristic.validate()?;
        Ok(())
    }
}

/// Which tensors a split's children recomputed by integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recomputed {
    pub stm: bool,
    pub stt: bool,
}

impl Recomputed {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::DS1 => Self {
                stm: false,
                stt: false,
            },
            Variant::DS2 => Self {
                stm: true,
                stt: false,
            },
            Variant::DS3 => Self {
                stm: true,
                stt: true,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub lineage: Lineage,
    pub depth: usize,
    pub t_s: f64,
    /// Index of `t_s` on the run's checkpoint grid.
    pub checkpoint: usize,
    pub weight: f64,
    pub direction: DVector<f64>,
    /// Unsquared heuristic value of the remaining flow at the split.
    pub value: f64,
    /// Weighted criterion `w·F` at `t_s`.
    pub criterion: f64,
    pub variant: Option<Variant>,
    pub recomputed: Recomputed,
}

/// Weighted criterion `w·F` over one mixand's leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTrace {
    pub lineage: Lineage,
    pub depth: usize,
    pub weight: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub state_integrations: usize,
    pub stm_integrations: usize,
    pub stt_integrations: usize,
}

impl RunStats {
    fn count(&mut self, order: FlowOrder) {
        match order {
            FlowOrder::State => self.state_integrations += 1,
            FlowOrder::Stm => self.stm_integrations += 1,
            FlowOrder::Stt => self.stt_integrations += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mixture: GaussianMixture,
    pub events: Vec<SplitEvent>,
    pub traces: Vec<CriterionTrace>,
    pub stats: RunStats,
}

/// Equally spaced checkpoint times from `t0` to `tf`, both ends exact.
pub fn checkpoint_grid(t0: f64, tf: f64, count: usize) -> Vec<f64> {
    let last = count.saturating_sub(1).max(1);
    (0..=last)
        .map(|k| {
            if k == last {
                tf
            } else {
                t0 + (tf - t0) * (k as f64) / (last as f64)
            }
        })
        .collect()
}

/// Outcome of split-time selection over a leg's criterion series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTime {
    /// Tolerance met at the final checkpoint.
    NoSplit,
    /// Split at this index of the series.
    At(usize),
}

/// Last index whose value is below `epsilon`. A final index means no split;
/// a series violating the tolerance everywhere splits at its first index.
pub fn select_split_time(series: &[f64], epsilon: f64) -> Result<SplitTime, HotdogsError> {
    if series.is_empty() {
        return Err(HotdogsError::EmptySeries);
    }
    match series.iter().rposition(|&v| v < epsilon) {
        Some(k) if k + 1 == series.len() => Ok(SplitTime::NoSplit),
        Some(k) => Ok(SplitTime::At(k)),
        None => Ok(SplitTime::At(0)),
    }
}

/// Flow expansion of one mixand over a suffix of the checkpoint grid,
/// referenced to the suffix's first epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LegExpansion {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub phi: Vec<DMatrix<f64>>,
    pub psi: Option<Vec<Tensor3>>,
}

impl LegExpansion {
    pub fn from_flow(flow: &FlowExpansion) -> Result<Self, PropagationError> {
        let mut phi = Vec::with_capacity(flow.checkpoints.len());
        for c in &flow.checkpoints {
            phi.push(c.stm()?.clone());
        }
        let psi = if flow.order == FlowOrder::Stt {
            Some(
                flow.checkpoints
                    .iter()
                    .map(|c| c.stt().cloned())
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            times: flow.times(),
            states: flow.checkpoints.iter().map(|c| c.state.clone()).collect(),
            phi,
            psi,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn psi_at(&self, k: usize) -> Result<&Tensor3, PropagationError> {
        self.psi
            .as_ref()
            .map(|p| &p[k])
            .ok_or(PropagationError::MissingTensor("STT"))
    }
}

/// Re-references a leg to its checkpoint `split`: `Φ(t, t_s)` and `Ψ(t, t_s)`
/// for every remaining checkpoint, from inverse composition.
pub fn reconstruct_at_split(
    leg: &LegExpansion,
    split: usize,
) -> Result<LegExpansion, PropagationError> {
    if split >= leg.len() {
        return Err(PropagationError::InvalidCheckpoints(format!(
            "split index {split} outside a leg of {} checkpoints",
            leg.len()
        )));
    }
    let phi_s = &leg.phi[split];
    let mut phi = Vec::with_capacity(leg.len() - split);
    for k in split..leg.len() {
        phi.push(if k == split {
            DMatrix::identity(phi_s.nrows(), phi_s.ncols())
        } else {
            stm_between(&leg.phi[k], phi_s)?
        });
    }
    let psi = match &leg.psi {
        None => None,
        Some(psi0) => {
            let psi_s = &psi0[split];
            let mut out = Vec::with_capacity(phi.len());
            for (j, k) in (split..leg.len()).enumerate() {
                out.push(if k == split {
                    Tensor3::zeros(psi_s.dim())
                } else {
                    stt_between(&psi0[k], phi_s, psi_s, &phi[j])?
                });
            }
            Some(out)
        }
    };
    Ok(LegExpansion {
        times: leg.times[split..].to_vec(),
        states: leg.states[split..].to_vec(),
        phi,
        psi,
    })
}

/// Child expansions over the remaining checkpoints, given the parent's leg
/// re-referenced to the split epoch. `child_orders[i]` is what child `i`
/// needs for its own criteria and moment mapping; `central` marks a child
/// that may reuse the parent expansion unchanged.
#[allow(clippy::too_many_arguments)]
pub fn child_expansions<V: VectorField + ?Sized>(
    variant: Variant,
    reference: &LegExpansion,
    parent_mean: &DVector<f64>,
    children: &[Mixand],
    central: Option<usize>,
    child_orders: &[FlowOrder],
    field: &V,
    opts: &IntegratorOptions,
    stats: &mut RunStats,
) -> Result<Vec<LegExpansion>, HotdogsError> {
    let t_s = reference.times[0];
    if child_orders.len() != children.len() {
        return Err(HotdogsError::Config(format!(
            "{} expansion orders for {} children",
            child_orders.len(),
            children.len()
        )));
    }
    let mut out = Vec::with_capacity(children.len());
    for (i, child) in children.iter().enumerate() {
        if Some(i) == central {
            out.push(reference.clone());
            continue;
        }
        let integrate = |order: FlowOrder, stats: &mut RunStats| {
            stats.count(order);
            integrate_flow(field, &child.mean, t_s, &reference.times, order, opts)
        };
        let leg = match variant {
            Variant::DS1 => {
                let flow = integrate(FlowOrder::State, stats)?;
                let dm = &child.mean - parent_mean;
                let mut phi = Vec::with_capacity(reference.len());
                for k in 0..reference.len() {
                    phi.push(stm_shift_reference(&reference.phi[k], reference.psi_at(k)?, &dm));
                }
                LegExpansion {
                    times: flow.times(),
                    states: flow.checkpoints.into_iter().map(|c| c.state).collect(),
                    phi,
                    psi: reference.psi.clone(),
                }
            }
            Variant::DS2 => {
                let mut leg = LegExpansion::from_flow(&integrate(FlowOrder::Stm, stats)?)?;
                leg.psi = reference.psi.clone();
                leg
            }
            Variant::DS3 => LegExpansion::from_flow(&integrate(
                child_orders[i].max(FlowOrder::Stm),
                stats,
            )?)?,
        };
        out.push(leg);
    }
    Ok(out)
}

/// Per-checkpoint whitening matrices for a tree, indexed by grid position.
struct Whitening {
    by_index: Vec<Option<DMatrix<f64>>>,
}

impl Whitening {
    fn get(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.by_index.get(k).and_then(|w| w.as_ref())
    }
}

/// Shared state of one run.
struct Runner<'a, V: VectorField + ?Sized> {
    field: &'a V,
    cfg: &'a HotdogsConfig,
    grid: Vec<f64>,
    lib: SplitLibraryEntry,
    stats: RunStats,
    events: Vec<SplitEvent>,
    traces: Vec<CriterionTrace>,
    leaves: Vec<Mixand>,
}

impl<'a, V: VectorField + ?Sized> Runner<'a, V> {
    fn new(field: &'a V, t0: f64, tf: f64, cfg: &'a HotdogsConfig) -> Result<Self, HotdogsError> {
        cfg.validate()?;
        if !(tf > t0) {
            return Err(HotdogsError::Config(format!("tf = {tf} must exceed t0 = {t0}")));
        }
        let lib = SplitLibraryEntry::load(cfg.l_s, cfg.lambda)?;
        Ok(Self {
            field,
            cfg,
            grid: checkpoint_grid(t0, tf, cfg.checkpoints),
            lib,
            stats: RunStats::default(),
            events: Vec::new(),
            traces: Vec::new(),
            leaves: Vec::new(),
        })
    }

    fn kind(&self) -> HeuristicKind {
        self.cfg.heuristic.kind
    }

    fn can_split(&self, mix: &Mixand) -> bool {
        mix.lineage.depth() < self.cfg.max_depth && mix.weight >= self.cfg.w_min
    }

    /// Expansion order a mixand's own leg needs.
    fn leg_order(&self, mix: &Mixand) -> FlowOrder {
        if self.can_split(mix) || self.cfg.moment_order == 2 {
            FlowOrder::Stt
        } else {
            FlowOrder::Stm
        }
    }

    fn integrate_flow_from(
        &mut self,
        mean: &DVector<f64>,
        start: usize,
        order: FlowOrder,
    ) -> Result<FlowExpansion, HotdogsError> {
        self.stats.count(order);
        Ok(integrate_flow(
            self.field,
            mean,
            self.grid[start],
            &self.grid[start..],
            order,
            &self.cfg.integrator,
        )?)
    }

    fn integrate_leg(
        &mut self,
        mean: &DVector<f64>,
        start: usize,
        order: FlowOrder,
    ) -> Result<LegExpansion, HotdogsError> {
        let flow = self.integrate_flow_from(mean, start, order.max(FlowOrder::Stm))?;
        Ok(LegExpansion::from_flow(&flow)?)
    }

    /// Unscented images of `(m, P)` at every checkpoint from `start` on.
    fn sigma_images(
        &mut self,
        mix: &Mixand,
        start: usize,
    ) -> Result<(crate::heuristics::SigmaPoints, Vec<Vec<DVector<f64>>>), HotdogsError> {
        let sp = sigma_points(&self.cfg.heuristic, &mix.mean, &mix.cov)?;
        let len = self.grid.len() - start;
        let mut by_time = vec![Vec::with_capacity(sp.points.len()); len];
        for x in &sp.points {
            let flow = self.integrate_flow_from(x, start, FlowOrder::State)?;
            for (k, c) in flow.checkpoints.into_iter().enumerate() {
                by_time[k].push(c.state);
            }
        }
        Ok((sp, by_time))
    }

    /// Whitening over the whole grid (or a leg suffix) for the given mixand
    /// and its leg, per the heuristic's whitening source.
    fn whitening_for(
        &mut self,
        mix: &Mixand,
        leg: &LegExpansion,
        start: usize,
    ) -> Result<Whitening, HotdogsError> {
        let mut by_index = vec![None; self.grid.len()];
        if !self.kind().needs_whitening() {
            return Ok(Whitening { by_index });
        }
        if self.kind().whitening_from_unscented() {
            let (sp, images) = self.sigma_images(mix, start)?;
            for (k, imgs) in images.iter().enumerate() {
                let sl = statistical_linearization_from_images(&sp, &mix.mean, &mix.cov, imgs)?;
                by_index[start + k] = Some(
                    whitening_factor(&sl.p_z).map_err(HeuristicError::from)?,
                );
            }
        } else {
            for (k, phi) in leg.phi.iter().enumerate() {
                by_index[start + k] = Some(whitening_from_parent(&mix.cov, phi)?);
            }
        }
        Ok(Whitening { by_index })
    }

    /// Heuristic direction and value for input `(mix)` through the map whose
    /// expansion is `(g, g2)`, with optional whitening and unscented images.
    fn direction(
        &self,
        mix: &Mixand,
        g: &DMatrix<f64>,
        g2: Option<&Tensor3>,
        w: Option<&DMatrix<f64>>,
        stat: Option<&crate::heuristics::StatisticalLinearization>,
    ) -> Result<SplitDirection, HotdogsError> {
        let mut ctx = SplitContext::new(mix).with_stm(g);
        if let Some(g2) = g2 {
            ctx = ctx.with_stt(g2);
        }
        if let Some(w) = w {
            ctx = ctx.with_whitening(w);
        }
        if let Some(s) = stat {
            ctx = ctx.with_statistical(s);
        }
        Ok(split_direction(&self.cfg.heuristic, &ctx)?)
    }

    fn leaf(&mut self, mix: &Mixand, leg: &LegExpansion) -> Result<(), HotdogsError> {
        let last = leg.len() - 1;
        let out = if self.cfg.moment_order == 2 {
            propagate_moments_second(mix, &leg.states[last], &leg.phi[last], leg.psi_at(last)?)?
        } else {
            propagate_moments_first(mix, &leg.states[last], &leg.phi[last])?
        };
        self.leaves.push(out);
        Ok(())
    }

    /// Mixand at checkpoint `k` of its leg under linear covariance mapping.
    fn mapped(mix: &Mixand, leg: &LegExpansion, k: usize) -> Result<Mixand, HotdogsError> {
        let phi = &leg.phi[k];
        Ok(Mixand::new(
            mix.weight,
            leg.states[k].clone(),
            symmetrize(&(phi * &mix.cov * phi.transpose())),
            mix.lineage.clone(),
        )?)
    }

    /// Unscented linearization of the map from checkpoint `from` to the final
    /// checkpoint for the mixand `mix` located at `from`.
    fn remaining_statistical(
        &mut self,
        mix: &Mixand,
        from: usize,
    ) -> Result<Option<crate::heuristics::StatisticalLinearization>, HotdogsError> {
        if !self.kind().needs_statistical() {
            return Ok(None);
        }
        let (sp, images) = self.sigma_images(mix, from)?;
        let last = images.last().expect("legs are never empty");
        Ok(Some(statistical_linearization_from_images(&sp, &mix.mean, &mix.cov, last)?))
    }
}

/// Runs the deferred-splitting recursion for one root mixand from `t0` to `tf`.
pub fn hotdogs_run<V: VectorField + ?Sized>(
    root: &Mixand,
    field: &V,
    t0: f64,
    tf: f64,
    cfg: &HotdogsConfig,
) -> Result<RunResult, HotdogsError> {
    let mut runner = Runner::new(field, t0, tf, cfg)?;
    let order = runner.leg_order(root);
    let leg = runner
        .integrate_leg(&root.mean, 0, order)
        .map_err(|e| e.at(&root.lineage))?;
    let root_whitening = runner
        .whitening_for(root, &leg, 0)
        .map_err(|e| e.at(&root.lineage))?;
    deferred_node(&mut runner, root, leg, 0, &root_whitening).map_err(|e| e.at(&root.lineage))?;
    finish(runner)
}

fn finish<V: VectorField + ?Sized>(runner: Runner<'_, V>) -> Result<RunResult, HotdogsError> {
    let mixture = GaussianMixture::new(runner.leaves)?;
    Ok(RunResult {
        mixture,
        events: runner.events,
        traces: runner.traces,
        stats: runner.stats,
    })
}

fn deferred_node<V: VectorField + ?Sized>(
    runner: &mut Runner<'_, V>,
    mix: &Mixand,
    leg: LegExpansion,
    start: usize,
    tree_whitening: &Whitening,
) -> Result<(), HotdogsError> {
    let kind = runner.kind();
    let splittable = runner.can_split(mix);
    // Leaves record a trace only when it costs no extra integration.
    let traceable = (!kind.needs_stt() || leg.psi.is_some()) && !kind.needs_statistical();
    if !splittable && !traceable {
        return runner.leaf(mix, &leg);
    }

    let own_whitening;
    let whitening = match runner.cfg.whitening {
        WhiteningPolicy::FrozenRoot => tree_whitening,
        WhiteningPolicy::Refresh => {
            own_whitening = runner.whitening_for(mix, &leg, start)?;
            &own_whitening
        }
    };
    let images = if kind.needs_statistical() {
        Some(runner.sigma_images(mix, start)?)
    } else {
        None
    };
    let mut values = Vec::with_capacity(leg.len());
    for k in 0..leg.len() {
        let stat = match &images {
            Some((sp, imgs)) => {
                Some(statistical_linearization_from_images(sp, &mix.mean, &mix.cov, &imgs[k])?)
            }
            None => None,
        };
        let g2 = leg.psi.as_ref().map(|p| &p[k]);
        let d = runner.direction(mix, &leg.phi[k], g2, whitening.get(start + k), stat.as_ref())?;
        values.push(mix.weight * d.value);
    }
    runner.traces.push(CriterionTrace {
        lineage: mix.lineage.clone(),
        depth: mix.lineage.depth(),
        weight: mix.weight,
        times: leg.times.clone(),
        values: values.clone(),
    });
    if !splittable {
        return runner.leaf(mix, &leg);
    }
    let s = match select_split_time(&values, runner.cfg.epsilon)? {
        SplitTime::NoSplit => return runner.leaf(mix, &leg),
        SplitTime::At(s) => s,
    };

    let reference = reconstruct_at_split(&leg, s)?;
    let at_split = Runner::<V>::mapped(mix, &leg, s)?;
    let last = reference.len() - 1;
    let stat = runner.remaining_statistical(&at_split, start + s)?;
    let dir = runner.direction(
        &at_split,
        &reference.phi[last],
        reference.psi.as_ref().map(|p| &p[last]),
        whitening.get(start + s + last),
        stat.as_ref(),
    )?;
    let children = split_multivariate(&at_split, &dir.direction, &runner.lib)?;
    let central = central_child(runner, &children, &at_split);
    runner.events.push(SplitEvent {
        lineage: mix.lineage.clone(),
        depth: mix.lineage.depth(),
        t_s: reference.times[0],
        checkpoint: start + s,
        weight: mix.weight,
        direction: dir.direction.clone(),
        value: dir.value,
        criterion: values[s],
        variant: Some(runner.cfg.variant),
        recomputed: Recomputed::for_variant(runner.cfg.variant),
    });
    let child_orders: Vec<FlowOrder> = children.iter().map(|c| runner.leg_order(c)).collect();
    let legs = child_expansions(
        runner.cfg.variant,
        &reference,
        &at_split.mean,
        &children,
        central,
        &child_orders,
        runner.field,
        &runner.cfg.integrator,
        &mut runner.stats,
    )?;
    for (child, child_leg) in children.iter().zip(legs) {
        deferred_node(runner, child, child_leg, start + s, tree_whitening)
            .map_err(|e| e.at(&child.lineage))?;
    }
    Ok(())
}

/// The child whose mean equals the parent's, when tensor reuse is allowed
/// (odd split, first-order moments).
fn central_child<V: VectorField + ?Sized>(
    runner: &Runner<'_, V>,
    children: &[Mixand],
    parent: &Mixand,
) -> Option<usize> {
    if runner.cfg.moment_order != 1 || runner.lib.l_s.is_multiple_of(2) {
        return None;
    }
    let c = runner.lib.central_index();
    (children.get(c)?.mean == parent.mean).then_some(c)
}

/// Immediate splitting: every split happens at `t0`, each mixand's direction
/// comes from its own expansion over `[t0, tf]`, and the recursion runs to
/// `max_depth`. `epsilon` and `variant` are ignored.
pub fn immediate_run<V: VectorField + ?Sized>(
    root: &Mixand,
    field: &V,
    t0: f64,
    tf: f64,
    cfg: &HotdogsConfig,
) -> Result<RunResult, HotdogsError> {
    let mut runner = Runner::new(field, t0, tf, cfg)?;
    let order = runner.leg_order(root);
    let leg = runner
        .integrate_leg(&root.mean, 0, order)
        .map_err(|e| e.at(&root.lineage))?;
    let root_whitening = runner
        .whitening_for(root, &leg, 0)
        .map_err(|e| e.at(&root.lineage))?;
    immediate_node(&mut runner, root, leg, &root_whitening).map_err(|e| e.at(&root.lineage))?;
    finish(runner)
}

fn immediate_node<V: VectorField + ?Sized>(
    runner: &mut Runner<'_, V>,
    mix: &Mixand,
    leg: LegExpansion,
    tree_whitening: &Whitening,
) -> Result<(), HotdogsError> {
    if !runner.can_split(mix) {
        return runner.leaf(mix, &leg);
    }
    let own_whitening;
    let whitening = match runner.cfg.whitening {
        WhiteningPolicy::FrozenRoot => tree_whitening,
        WhiteningPolicy::Refresh => {
            own_whitening = runner.whitening_for(mix, &leg, 0)?;
            &own_whitening
        }
    };
    let last = leg.len() - 1;
    let stat = runner.remaining_statistical(mix, 0)?;
    let dir = runner.direction(
        mix,
        &leg.phi[last],
        leg.psi.as_ref().map(|p| &p[last]),
        whitening.get(last),
        stat.as_ref(),
    )?;
    let children = split_multivariate(mix, &dir.direction, &runner.lib)?;
    runner.events.push(SplitEvent {
        lineage: mix.lineage.clone(),
        depth: mix.lineage.depth(),
        t_s: leg.times[0],
        checkpoint: 0,
        weight: mix.weight,
        direction: dir.direction.clone(),
        value: dir.value,
        criterion: mix.weight * dir.value,
        variant: None,
        recomputed: Recomputed {
            stm: true,
            stt: true,
        },
    });
    for child in &children {
        let order = runner.leg_order(child);
        let child_leg = runner
            .integrate_leg(&child.mean, 0, order)
            .map_err(|e| e.at(&child.lineage))?;
        immediate_node(runner, child, child_leg, tree_whitening)
            .map_err(|e| e.at(&child.lineage))?;
    }
    Ok(())
}

/// Single Gaussian propagated without splitting.
pub fn unsplit_run<V: VectorField + ?Sized>(
    root: &Mixand,
    field: &V,
    t0: f64,
    tf: f64,
    cfg: &HotdogsConfig,
) -> Result<RunResult, HotdogsError> {
    let single = HotdogsConfig {
        max_depth: 1,
        ..*cfg
    };
    let mut runner = Runner::new(field, t0, tf, &single)?;
    let order = runner.leg_order(root);
    let leg = runner.integrate_leg(&root.mean, 0, order)?;
    runner.leaf(root, &leg)?;
    finish(runner)
}
