//! Filter ranking, selection, and surgery that removes a filter together
//! with every slice that depends on it.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureShape, LayerParams, LayerSpec, ModelGraph};
use crate::tensor::{abs_sum, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Ratio of a filter's absolute mass after and before auxiliary training.
    #[default]
    Stability,
    /// Absolute sum of the filter.
    L1,
    /// Seeded uniform scores.
    Random,
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stability" => Ok(Criterion::Stability),
            "l1" => Ok(Criterion::L1),
            "random" => Ok(Criterion::Random),
            _ => Err(Error::invalid(format!(
                "criterion must be stability, l1 or random, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Stability => "stability",
            Criterion::L1 => "l1",
            Criterion::Random => "random",
        })
    }
}

/// Which end of the score range is pruned first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrder {
    HighestFirst,
    LowestFirst,
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad score `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub filter: usize,
    /// Absolute sum before the perturbation (or of the filter itself for l1/random).
    pub before_abs: f64,
    pub after_abs: f64,
    /// `+inf` when `before_abs == 0` under the stability criterion.
    #[serde(with = "inf_as_string")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    /// Position among the conv layers (0-based).
    pub conv: usize,
    /// Index of the conv layer in the full layer list.
    pub layer: usize,
    pub filters: Vec<FilterScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub criterion: Criterion,
    pub order: ScoreOrder,
    pub layers: Vec<LayerImportance>,
}

impl ImportanceReport {
    /// Filter indices of conv layer `conv`, most prunable first; ties go to the
    /// lower index.
    pub fn prune_order(&self, conv: usize) -> Result<Vec<usize>> {
        let layer = self
            .layers
            .get(conv)
            .ok_or_else(|| Error::invalid(format!("no conv layer {conv} in report")))?;
        let mut idx: Vec<&FilterScore> = layer.filters.iter().collect();
        idx.sort_by(|a, b| {
            let c = match self.order {
                ScoreOrder::HighestFirst => b.score.total_cmp(&a.score),
                ScoreOrder::LowestFirst => a.score.total_cmp(&b.score),
            };
            c.then(a.filter.cmp(&b.filter))
        });
        Ok(idx.into_iter().map(|f| f.filter).collect())
    }

    /// The same scores read from the other end.
    pub fn reversed(&self) -> ImportanceReport {
        ImportanceReport {
            order: match self.order {
                ScoreOrder::HighestFirst => ScoreOrder::LowestFirst,
                ScoreOrder::LowestFirst => ScoreOrder::HighestFirst,
            },
            ..self.clone()
        }
    }
}

/// Filter indices to remove, one sorted list per conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrunedSet {
    pub layers: Vec<Vec<usize>>,
}

impl PrunedSet {
    pub fn empty(convs: usize) -> Self {
        PrunedSet {
            layers: vec![Vec::new(); convs],
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Vec::is_empty)
    }
}

fn conv_weights<E: Element>(model: &ModelGraph<E>) -> Vec<(usize, &Tensor<E>)> {
    model
        .params()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match p {
            LayerParams::Conv { weight, .. } => Some((i, weight)),
            _ => None,
        })
        .collect()
}

fn filter_sums<E: Element>(w: &Tensor<E>) -> Vec<f64> {
    let n = w.shape()[0];
    w.data().chunks_exact(w.len() / n).map(abs_sum).collect()
}

/// Stability ratios `|after_j| / |before_j|` for every filter of every conv layer.
pub fn rank_filters<E: Element>(before: &ModelGraph<E>, after: &ModelGraph<E>) -> Result<ImportanceReport> {
    if before.arch() != after.arch() {
        return Err(Error::Architecture(
            "rank_filters needs two models with the same architecture".into(),
        ));
    }
    let layers = conv_weights(before)
        .into_iter()
        .zip(conv_weights(after))
        .enumerate()
        .map(|(conv, ((layer, fw), (_, mw)))| {
            let filters = filter_sums(fw)
                .into_iter()
                .zip(filter_sums(mw))
                .enumerate()
                .map(|(j, (f, m))| FilterScore {
                    filter: j,
                    before_abs: f,
                    after_abs: m,
                    score: if f == 0.0 { f64::INFINITY } else { m / f },
                })
                .collect();
            LayerImportance { conv, layer, filters }
        })
        .collect();
    Ok(ImportanceReport {
        criterion: Criterion::Stability,
        order: ScoreOrder::HighestFirst,
        layers,
    })
}

/// Filter abs-sums; the smallest are pruned first.
pub fn rank_l1<E: Element>(model: &ModelGraph<E>) -> ImportanceReport {
    let layers = conv_weights(model)
        .into_iter()
        .enumerate()
        .map(|(conv, (layer, w))| LayerImportance {
            conv,
            layer,
            filters: filter_sums(w)
                .into_iter()
                .enumerate()
                .map(|(j, s)| FilterScore {
                    filter: j,
                    before_abs: s,
                    after_abs: s,
                    score: s,
                })
                .collect(),
        })
        .collect();
    ImportanceReport {
        criterion: Criterion::L1,
        order: ScoreOrder::LowestFirst,
        layers,
    }
}

/// Uniform scores in `[0, 1)` drawn from `seed`; the highest are pruned first.
pub fn rank_random<E: Element>(model: &ModelGraph<E>, seed: u64) -> ImportanceReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = rank_l1(model);
    report.criterion = Criterion::Random;
    report.order = ScoreOrder::HighestFirst;
    for l in &mut report.layers {
        for f in &mut l.filters {
            f.score = rng.random::<f64>();
        }
    }
    report
}

/// Picks the `counts[i]` most prunable filters of each conv layer.
pub fn select_filters(report: &ImportanceReport, counts: &[usize]) -> Result<PrunedSet> {
    if counts.len() != report.layers.len() {
        return Err(Error::Pruning(format!(
            "{} prune counts for {} conv layers",
            counts.len(),
            report.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(counts.len());
    for (conv, &p) in counts.iter().enumerate() {
        let width = report.layers[conv].filters.len();
        if p > width {
            return Err(Error::Pruning(format!(
                "cannot prune {p} filters from conv layer {conv} with {width}"
            )));
        }
        let mut chosen: Vec<usize> = report.prune_order(conv)?.into_iter().take(p).collect();
        chosen.sort_unstable();
        layers.push(chosen);
    }
    Ok(PrunedSet { layers })
}

fn keep_list(n: usize, drop: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    drop.iter().for_each(|&j| mask[j] = false);
    (0..n).filter(|&j| mask[j]).collect()
}

/// Keeps blocks `keep` of size `block` along `axis` of a row-major tensor.
fn gather_axis<E: Element>(t: &Tensor<E>, axis: usize, keep: &[usize], block: usize) -> Result<Tensor<E>> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product::<usize>() * block;
    let slabs = shape[axis] / block;
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        let base = o * slabs * inner;
        for &k in keep {
            data.extend_from_slice(&t.data()[base + k * inner..base + (k + 1) * inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len() * block;
    Tensor::from_vec(new_shape, data)
}

/// Removes the selected filters, their biases and batch-norm channels, and the
/// matching input slices of the consuming conv or linear layer.
pub fn surgery<E: Element>(model: &ModelGraph<E>, pruned: &PrunedSet) -> Result<ModelGraph<E>> {
    let convs = model.arch().conv_indices();
    if pruned.layers.len() != convs.len() {
        return Err(Error::Pruning(format!(
            "prune set covers {} conv layers, model has {}",
            pruned.layers.len(),
            convs.len()
        )));
    }
    let shapes = model.arch().shapes()?;
    let (mut arch, mut params) = model.clone().into_parts();

    for (c, (&li, drop)) in convs.iter().zip(&pruned.layers).enumerate() {
        if drop.is_empty() {
            continue;
        }
        let n = shapes[li].output.channels();
        let mut sorted = drop.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != drop.len() {
            return Err(Error::Pruning(format!("duplicate filter index in conv layer {c}")));
        }
        if let Some(&bad) = sorted.iter().find(|&&j| j >= n) {
            return Err(Error::Pruning(format!("filter {bad} out of range for conv layer {c} with {n}")));
        }
        if sorted.len() >= n {
            return Err(Error::Pruning(format!("pruning would remove every filter of conv layer {c}")));
        }
        let keep = keep_list(n, &sorted);

        if let (LayerSpec::Conv2d { out_channels, .. }, LayerParams::Conv { weight, bias }) =
            (&mut arch.layers[li], &mut params[li])
        {
            *weight = gather_axis(weight, 0, &keep, 1)?;
            *bias = gather_axis(bias, 0, &keep, 1)?;
            *out_channels = keep.len();
        }

        // Follow the channel dimension to its consumer.
        let mut block = 1;
        let mut consumed = false;
        for k in li + 1..arch.layers.len() {
            match (&mut arch.layers[k], &mut params[k]) {
                (LayerSpec::BatchNorm2d { channels, .. }, LayerParams::BatchNorm { gain, shift, running_mean, running_var }) => {
                    for t in [gain, shift, running_mean, running_var] {
                        *t = gather_axis(t, 0, &keep, 1)?;
                    }
                    *channels = keep.len();
                }
                (LayerSpec::ReLU | LayerSpec::MaxPool2d { .. }, _) => {}
                (LayerSpec::Flatten, _) => match shapes[k].input {
                    FeatureShape::Map { h, w, .. } => block = h * w,
                    FeatureShape::Flat(_) => block = 1,
                },
                (LayerSpec::Conv2d { .. }, LayerParams::Conv { weight, .. }) => {
                    if block != 1 {
                        return Err(Error::Pruning(format!("conv layer {k} follows a flatten")));
                    }
                    *weight = gather_axis(weight, 1, &keep, 1)?;
                    consumed = true;
                    break;
                }
                (LayerSpec::Linear { in_features, .. }, LayerParams::Linear { weight, .. }) => {
                    *weight = gather_axis(weight, 1, &keep, block)?;
                    *in_features = keep.len() * block;
                    consumed = true;
                    break;
                }
                (spec, _) => {
                    return Err(Error::Pruning(format!(
                        "layer {k} ({}) cannot carry pruned channels of conv layer {c}",
                        spec.kind()
                    )))
                }
            }
        }
        if !consumed {
            return Err(Error::Pruning(format!(
                "no consumer found for the output channels of conv layer {c}"
            )));
        }
    }
    ModelGraph::new(arch, params)
}

/// Per-iteration prune counts plus the phase lengths of every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    /// `iterations[t][i]`: filters removed from conv layer `i` in iteration `t`.
    pub iterations: Vec<Vec<usize>>,
    pub aux_epochs: usize,
    pub finetune_epochs: usize,
    pub lambda: f64,
}

impl PruneSchedule {
    pub fn from_counts(iterations: Vec<Vec<usize>>) -> Self {
        PruneSchedule {
            iterations,
            aux_epochs: 1,
            finetune_epochs: 3,
            lambda: 1e-5,
        }
    }

    /// Each iteration removes `ceil(fraction * remaining gap)` filters from every
    /// layer that has not reached its target yet.
    pub fn toward_targets(widths: &[usize], targets: &[usize], fraction: f64) -> Result<Self> {
        if widths.len() != targets.len() {
            return Err(Error::Pruning(format!(
                "{} targets for {} conv layers",
                targets.len(),
                widths.len()
            )));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
        }
        for (i, (&w, &t)) in widths.iter().zip(targets).enumerate() {
            if t == 0 || t > w {
                return Err(Error::Pruning(format!(
                    "target width {t} for conv layer {i} must be in 1..={w}"
                )));
            }
        }
        let mut cur = widths.to_vec();
        let mut iterations = Vec::new();
        while cur.iter().zip(targets).any(|(c, t)| c > t) {
            let step: Vec<usize> = cur
                .iter()
                .zip(targets)
                .map(|(&c, &t)| ((c - t) as f64 * fraction).ceil() as usize)
                .collect();
            cur.iter_mut().zip(&step).for_each(|(c, s)| *c -= s);
            iterations.push(step);
        }
        Ok(Self::from_counts(iterations))
    }

    /// Default splitter: 20% of the remaining gap per iteration.
    pub fn default_toward(widths: &[usize], targets: &[usize]) -> Result<Self> {
        Self::toward_targets(widths, targets, 0.2)
    }

    pub fn totals(&self, convs: usize) -> Vec<usize> {
        let mut tot = vec![0; convs];
        for it in &self.iterations {
            tot.iter_mut().zip(it).for_each(|(a, b)| *a += b);
        }
        tot
    }

    /// Checks every iteration against the widths it would see.
    pub fn validate(&self, widths: &[usize]) -> Result<()> {
        let mut cur = widths.to_vec();
        for (t, it) in self.iterations.iter().enumerate() {
            if it.len() != cur.len() {
                return Err(Error::Pruning(format!(
                    "iteration {t} has {} counts for {} conv layers",
                    it.len(),
                    cur.len()
                )));
            }
            for (i, (c, &p)) in cur.iter_mut().zip(it).enumerate() {
                if p >= *c {
                    return Err(Error::Pruning(format!(
                        "iteration {t} removes {p} of {c} filters from conv layer {i}; at least one must survive"
                    )));
                }
                *c -= p;
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn final_widths(&self, widths: &[usize]) -> Vec<usize> {
        widths
            .iter()
            .zip(self.totals(widths.len()))
            .map(|(w, t)| w.saturating_sub(t))
            .collect()
    }
}

/// Training phases the pruning loop delegates to.
pub trait PruneHooks<E: Element> {
    /// Trains a copy of the model with the total loss; returns the perturbed model.
    fn aux_train(&mut self, model: ModelGraph<E>, t: usize, epochs: usize, lambda: f64) -> Result<ModelGraph<E>>;

    /// Trains the pruned model with the data loss only.
    fn finetune(&mut self, model: ModelGraph<E>, t: usize, epochs: usize) -> Result<ModelGraph<E>>;

    /// Seed for the random criterion in iteration `t`.
    fn random_seed(&self, t: usize) -> u64 {
        t as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub widths_before: Vec<usize>,
    pub widths_after: Vec<usize>,
    pub pruned: PrunedSet,
    pub importance: ImportanceReport,
}

/// One round: snapshot, perturb, rank, select, cut the snapshot, fine-tune.
pub fn prune_iteration<E: Element, H: PruneHooks<E>>(
    model: ModelGraph<E>,
    schedule: &PruneSchedule,
    t: usize,
    criterion: Criterion,
    hooks: &mut H,
) -> Result<(ModelGraph<E>, IterationRecord)> {
    let counts = schedule
        .iterations
        .get(t)
        .ok_or_else(|| Error::Pruning(format!("iteration {t} is outside the schedule")))?;
    let widths_before = model.conv_widths();
    let importance = match criterion {
        Criterion::Stability => {
            let perturbed = hooks.aux_train(model.clone(), t, schedule.aux_epochs, schedule.lambda)?;
            rank_filters(&model, &perturbed)?
        }
        Criterion::L1 => rank_l1(&model),
        Criterion::Random => rank_random(&model, hooks.random_seed(t)),
    };
    let pruned = select_filters(&importance, counts)?;
    let cut = surgery(&model, &pruned)?;
    drop(model);
    let tuned = hooks.finetune(cut, t, schedule.finetune_epochs)?;
    let record = IterationRecord {
        iteration: t,
        widths_after: tuned.conv_widths(),
        widths_before,
        pruned,
        importance,
    };
    Ok((tuned, record))
}

/// Runs every iteration of `schedule`.
pub fn prune<E: Element, H: PruneHooks<E>>(
    mut model: ModelGraph<E>,
    schedule: &PruneSchedule,
    criterion: Criterion,
    hooks: &mut H,
) -> Result<(ModelGraph<E>, Vec<IterationRecord>)> {
    schedule.validate(&model.conv_widths())?;
    let mut records = Vec::with_capacity(schedule.iterations.len());
    for t in 0..schedule.iterations.len() {
        let (next, rec) = prune_iteration(model, schedule, t, criterion, hooks)?;
        log::info!("prune iteration {t}: widths {:?} -> {:?}", rec.widths_before, rec.widths_after);
        model = next;
        records.push(rec);
    }
    Ok((model, records))
}

/// Which filters an ablation run removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    HighestRatio,
    Random,
    LowestRatio,
}

impl AblationArm {
    pub const ALL: [AblationArm; 3] = [AblationArm::HighestRatio, AblationArm::Random, AblationArm::LowestRatio];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub k: usize,
    pub arm: AblationArm,
    /// Accuracy for each seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

/// Accuracy after removing `k` filters of one conv layer, without fine-tuning,
/// for the three arms. `rank(seed)` must return a stability report; `eval`
/// scores a pruned model.
pub fn ablation<E, R, V>(
    model: &ModelGraph<E>,
    conv: usize,
    ks: &[usize],
    seeds: &[u64],
    mut rank: R,
    mut eval: V,
) -> Result<Vec<AblationPoint>>
where
    E: Element,
    R: FnMut(u64) -> Result<ImportanceReport>,
    V: FnMut(&ModelGraph<E>) -> Result<f64>,
{
    let widths = model.conv_widths();
    let width = *widths
        .get(conv)
        .ok_or_else(|| Error::invalid(format!("model has no conv layer {conv}")))?;
    if let Some(&k) = ks.iter().find(|&&k| k >= width) {
        return Err(Error::Pruning(format!("k = {k} would empty conv layer {conv} of width {width}")));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mut acc = vec![vec![Vec::with_capacity(seeds.len()); AblationArm::ALL.len()]; ks.len()];
    for &seed in seeds {
        let report = rank(seed)?;
        let random = rank_random(model, seed);
        for (ki, &k) in ks.iter().enumerate() {
            for (ai, arm) in AblationArm::ALL.iter().enumerate() {
                let source = match arm {
                    AblationArm::HighestRatio => report.clone(),
                    AblationArm::Random => random.clone(),
                    AblationArm::LowestRatio => report.reversed(),
                };
                let mut counts = vec![0; widths.len()];
                counts[conv] = k;
                let set = select_filters(&source, &counts)?;
                let a = if k == 0 { eval(model)? } else { eval(&surgery(model, &set)?)? };
                acc[ki][ai].push(a);
            }
        }
    }
    let mut points = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        for (ai, &arm) in AblationArm::ALL.iter().enumerate() {
            let per_seed = std::mem::take(&mut acc[ki][ai]);
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            points.push(AblationPoint { k, arm, per_seed, mean });
        }
    }
    Ok(points)
}
