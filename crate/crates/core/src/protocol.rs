//! Embedding, extraction, sealing and verification over whole containers.
//!
//! Per layer, embedding runs in this order:
//!
//! 1. host construction over channels `J[..N]` at pair position `c`;
//! 2. peak/valley choice, dropping carriers that cannot shift by one;
//! 3. sizing the plan; weights in its LSB region `[0, plan_len)` never
//!    carry, so the overwrite cannot disturb a digit pair;
//! 4. framing `(message chunk, original region LSBs)` and histogram-shift
//!    embedding into the digit pairs;
//! 5. writing the plan into the region LSBs.
//!
//! Extraction undoes 5, 4 and 1 in reverse and then re-embeds the recovered
//! layer: a layer is accepted only if that reproduces it bit for bit.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::bits::index_width;
use crate::codec::{
    build_host, check_offset, check_order, candidate_positions, host_symbol, is_candidate,
    pair_value, rewrite_pair, select_pair_position, step_up, with_lsb, CodecError,
    HostSequence, PairEntropy, SymbolStep, DEFAULT_OFFSET, PAIR_POSITIONS,
};
use crate::container::{ContainerError, ConvDims, ModelContainer, ModelDigest};
use crate::hs::{hs_embed, hs_extract, HsError, HsParams};
use crate::payload::{frame_payload, parse_payload, PayloadError, HEADER_BITS};
use crate::sidecar::{
    encode_plan, find_plan, lsb_read, lsb_replace, plan_bit_len, read_plan, EmbedPlan,
    SidecarError,
};

pub const DIGEST_BITS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Hs(#[from] HsError),
    #[error(transparent)]
    Sidecar(#[from] SidecarError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error("layer {0} is not in the manifest")]
    LayerOutOfRange(i64),
    #[error("layer {0} is configured twice or shares its weight tensor")]
    DuplicateLayer(usize),
    #[error("no layers configured")]
    NoLayers,
    #[error("message of {needed} bits exceeds capacity {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("layer {layer} carries no watermark")]
    NotMarked { layer: usize },
    #[error("layer {layer} fails extraction: {reason}")]
    Tampered { layer: usize, reason: String },
    #[error("value {value} for {field} does not fit the plan")]
    FieldOverflow { field: &'static str, value: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairPosition {
    /// Minimum-entropy position; later positions (by entropy) are tried when
    /// the best one yields no usable host.
    #[default]
    Auto,
    Fixed(u8),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerConfig {
    /// Manifest index.
    pub layer: usize,
    /// Channels used (N).
    pub channels: usize,
    /// Channel ranking J; the magnitude-variance fallback when absent.
    pub order: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub layers: Vec<LayerConfig>,
    pub pair_position: PairPosition,
    pub offset: i32,
}

impl EmbedConfig {
    pub fn new(layers: Vec<LayerConfig>) -> Self {
        EmbedConfig {
            layers,
            pair_position: PairPosition::Auto,
            offset: DEFAULT_OFFSET,
        }
    }
}

/// Resolves a possibly negative manifest index (`-1` is the last layer).
pub fn resolve_layer(model: &ModelContainer, index: i64) -> Result<usize, ProtocolError> {
    let len = model.manifest.len() as i64;
    let resolved = if index < 0 { len + index } else { index };
    if (0..len).contains(&resolved) {
        Ok(resolved as usize)
    } else {
        Err(ProtocolError::LayerOutOfRange(index))
    }
}

/// Half the output channels, rounded up.
pub fn default_channels(out_channels: usize) -> usize {
    out_channels.div_ceil(2)
}

/// Channels by ascending variance of `|w|`, ties by index.
pub fn magnitude_variance_order(weights: &[f32], dims: ConvDims) -> Vec<usize> {
    let per = dims.per_channel();
    let var: Vec<f64> = (0..dims.out_channels)
        .map(|o| {
            let ch = &weights[o * per..(o + 1) * per];
            let n = ch.len() as f64;
            let mean = ch.iter().map(|w| w.abs() as f64).sum::<f64>() / n;
            ch.iter()
                .map(|w| (w.abs() as f64 - mean).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    let mut order: Vec<usize> = (0..dims.out_channels).collect();
    order.sort_by(|&a, &b| var[a].total_cmp(&var[b]).then(a.cmp(&b)));
    order
}

fn layer_weights(model: &ModelContainer, layer: usize) -> Result<(&[f32], ConvDims), ProtocolError> {
    let t = model
        .layer_tensor(layer)
        .ok_or(ProtocolError::LayerOutOfRange(layer as i64))?;
    let dims = t.conv_dims().ok_or_else(|| ContainerError::NotConvTensor {
        layer,
        name: t.name.clone(),
    })?;
    Ok((&t.data, dims))
}

fn check_distinct(model: &ModelContainer, layers: &[usize]) -> Result<(), ProtocolError> {
    let mut tensors = Vec::new();
    for &l in layers {
        let spec = model
            .manifest
            .get(l)
            .ok_or(ProtocolError::LayerOutOfRange(l as i64))?;
        if tensors.contains(&spec.weight_tensor) {
            return Err(ProtocolError::DuplicateLayer(l));
        }
        tensors.push(spec.weight_tensor);
    }
    Ok(())
}

/// A carrier of the host sequence.
#[derive(Clone, Copy, Debug)]
struct HostEntry {
    pos: usize,
    symbol: i32,
    /// Weight carrying `symbol + 1`, for carriers in `[peak, valley)`.
    moved: Option<f32>,
}

/// Everything needed to embed into one layer, before the payload is known.
#[derive(Clone, Debug)]
pub struct LayerPlan {
    pub plan: EmbedPlan,
    pub params: HsParams,
    host: Vec<HostEntry>,
}

impl LayerPlan {
    pub fn plan_bits(&self) -> usize {
        self.plan.bit_len()
    }

    /// Message bits that fit after the payload header and LSB backup.
    pub fn message_capacity(&self) -> usize {
        self.params
            .capacity
            .saturating_sub(HEADER_BITS + self.plan_bits())
    }

    pub fn host_len(&self) -> usize {
        self.host.len()
    }

    /// Host symbols in embedding order.
    pub fn host_symbols(&self) -> Vec<i32> {
        self.host.iter().map(|h| h.symbol).collect()
    }
}

struct Candidate {
    slot: usize,
    pos: usize,
    symbol: i32,
    blocked: bool,
}

/// Peak/valley choice maximizing `movable(peak) - cost * listed`, where
/// `listed` counts carriers in `(peak, valley)` that cannot shift by one and
/// so must be listed in the plan. Unmovable peak carriers cost nothing: they
/// stay put, and the reader can re-test them. Blocked carriers are known
/// from the pair alone; fragile ones need a trial rewrite, so bins are
/// verified lazily in order of their upper bound.
fn choose_params(
    cands: &[Candidate],
    weights: &[f32],
    c: u8,
    offset: i32,
    cost: i64,
    steps: &mut [Option<SymbolStep>],
) -> Result<HsParams, ProtocolError> {
    let lo = offset - 99;
    let mut bucket: Vec<Vec<usize>> = vec![Vec::new(); 199];
    for (i, cand) in cands.iter().enumerate() {
        bucket[(cand.symbol - lo) as usize].push(i);
    }
    let count: Vec<i64> = bucket.iter().map(|b| b.len() as i64).collect();
    let blocked: Vec<i64> = bucket
        .iter()
        .map(|b| b.iter().filter(|&&i| cands[i].blocked).count() as i64)
        .collect();
    let mut blocked_prefix = vec![0i64; 200];
    for b in 0..199 {
        blocked_prefix[b + 1] = blocked_prefix[b] + blocked[b];
    }
    let mut nearest_zero = [None; 199];
    let mut next = None;
    for b in (0..199).rev() {
        nearest_zero[b] = next;
        if count[b] == 0 {
            next = Some(b);
        }
    }
    let mut options: Vec<(i64, usize, usize)> = (0..199)
        .filter(|&b| count[b] > 0)
        .filter_map(|b| {
            let v = nearest_zero[b]?;
            let ub = count[b] - blocked[b] - cost * (blocked_prefix[v] - blocked_prefix[b + 1]);
            Some((ub, b, v))
        })
        .collect();
    if options.is_empty() {
        return Err(HsError::NoValley.into());
    }
    options.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut fragile: Vec<Option<i64>> = vec![None; 199];
    let mut fragile_in = |b: usize, steps: &mut [Option<SymbolStep>]| -> i64 {
        *fragile[b].get_or_insert_with(|| {
            let mut n = 0;
            for &i in &bucket[b] {
                if cands[i].blocked {
                    continue;
                }
                let step = step_up(weights[cands[i].pos], c).unwrap_or(SymbolStep::Fragile);
                if !matches!(step, SymbolStep::Movable(_)) {
                    n += 1;
                }
                steps[i] = Some(step);
            }
            n
        })
    };
    let mut best: Option<(i64, usize, usize)> = None;
    for &(ub, b, v) in &options {
        if let Some((bs, bb, _)) = best {
            if ub < bs || (ub == bs && b > bb) {
                break;
            }
        }
        let mut score = ub - fragile_in(b, steps);
        for j in b + 1..v {
            score -= cost * fragile_in(j, steps);
        }
        if best.is_none_or(|(bs, bb, _)| score > bs || (score == bs && b < bb)) {
            best = Some((score, b, v));
        }
    }
    let (_, b, v) = best.expect("at least one option evaluated");
    let capacity = bucket[b]
        .iter()
        .filter(|&&i| matches!(steps[i], Some(SymbolStep::Movable(_))))
        .count();
    Ok(HsParams {
        peak: lo + b as i32,
        valley: lo + v as i32,
        capacity,
    })
}

fn narrow<T: TryFrom<usize>>(field: &'static str, value: usize) -> Result<T, ProtocolError> {
    T::try_from(value).map_err(|_| ProtocolError::FieldOverflow { field, value })
}

/// Builds the embedding plan for one layer at a fixed pair position.
pub fn analyze_layer(
    weights: &[f32],
    dims: ConvDims,
    layer: usize,
    order: &[usize],
    n: usize,
    c: u8,
    offset: i32,
) -> Result<LayerPlan, ProtocolError> {
    check_offset(offset)?;
    if !PAIR_POSITIONS.contains(&c) {
        return Err(CodecError::InvalidPairPosition(c).into());
    }
    if weights.len() != dims.total() {
        return Err(CodecError::ShapeMismatch {
            expected: dims.total(),
            actual: weights.len(),
        }
        .into());
    }
    check_order(order, n, dims.out_channels)?;
    let layer_index: u16 = narrow("layer index", layer)?;
    let out_channels: u16 = narrow("output channels", dims.out_channels)?;
    let span: u32 = narrow("channel span", dims.per_channel())?;

    let positions = candidate_positions(dims, order, n);
    let mut cands = Vec::with_capacity(positions.len());
    for (slot, &pos) in positions.iter().enumerate() {
        let w = weights[pos];
        if !is_candidate(w) {
            continue;
        }
        let pair = pair_value(w, c)?;
        cands.push(Candidate {
            slot,
            pos,
            symbol: host_symbol(w, c, offset)?,
            blocked: if w.is_sign_negative() { pair == 0 } else { pair == 99 },
        });
    }
    if cands.is_empty() {
        return Err(CodecError::NoUsableWeights.into());
    }
    let cost = index_width(positions.len()) as i64;
    let mut steps = vec![None; cands.len()];
    let params = choose_params(&cands, weights, c, offset, cost, &mut steps)?;

    let shifts = |s: i32| s >= params.peak && s < params.valley;
    let moved_of = |i: usize| match steps[i] {
        Some(SymbolStep::Movable(m)) => Some(m),
        _ => None,
    };
    // Unmovable peak carriers stay put and the reader re-tests them; those
    // strictly inside (peak, valley) must be listed.
    let implicit: Vec<bool> = cands
        .iter()
        .enumerate()
        .map(|(i, cand)| cand.symbol == params.peak && moved_of(i).is_none())
        .collect();
    let listed: Vec<bool> = cands
        .iter()
        .enumerate()
        .map(|(i, cand)| shifts(cand.symbol) && !implicit[i] && moved_of(i).is_none())
        .collect();
    let exclusions = listed.iter().filter(|&&x| x).count();
    let plan_len = plan_bit_len(n, dims.out_channels, dims.per_channel(), exclusions);
    if plan_len > weights.len() {
        return Err(SidecarError::PlanTooLarge {
            bits: plan_len,
            weights: weights.len(),
        }
        .into());
    }

    let mut host = Vec::with_capacity(cands.len());
    let mut excluded_slots = Vec::with_capacity(exclusions);
    for (i, cand) in cands.iter().enumerate() {
        if listed[i] {
            excluded_slots.push(cand.slot as u32);
            continue;
        }
        if implicit[i] || cand.pos < plan_len {
            continue;
        }
        host.push(HostEntry {
            pos: cand.pos,
            symbol: cand.symbol,
            moved: if shifts(cand.symbol) { moved_of(i) } else { None },
        });
    }
    let capacity = host.iter().filter(|h| h.symbol == params.peak).count();
    let plan = EmbedPlan {
        layer_index,
        c,
        offset: offset as u16,
        peak: params.peak as u16,
        valley: params.valley as u16,
        out_channels,
        span,
        order: order[..n].iter().map(|&o| o as u16).collect(),
        exclusions: excluded_slots,
    };
    debug_assert_eq!(plan.bit_len(), plan_len);
    Ok(LayerPlan {
        plan,
        params: HsParams { capacity, ..params },
        host,
    })
}

/// Outcome of planning one layer at one pair position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionReport {
    pub entropy: PairEntropy,
    pub outcome: Result<PositionCapacity, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionCapacity {
    pub peak: i32,
    pub valley: i32,
    pub capacity: usize,
    pub plan_bits: usize,
    pub exclusions: usize,
    pub message_capacity: usize,
}

/// Plans a layer at every pair position (ascending entropy first) and picks
/// one: the fixed position, or under `Auto` the first whose host fits
/// `min_message` bits, else the one with the most room.
#[allow(clippy::too_many_arguments)]
pub fn plan_layer(
    weights: &[f32],
    dims: ConvDims,
    layer: usize,
    order: &[usize],
    n: usize,
    position: PairPosition,
    offset: i32,
    min_message: usize,
) -> Result<(LayerPlan, Vec<PositionReport>), ProtocolError> {
    plan_positions(weights, dims, layer, order, n, position, offset, min_message, false)
}

#[allow(clippy::too_many_arguments)]
fn plan_positions(
    weights: &[f32],
    dims: ConvDims,
    layer: usize,
    order: &[usize],
    n: usize,
    position: PairPosition,
    offset: i32,
    min_message: usize,
    stop_early: bool,
) -> Result<(LayerPlan, Vec<PositionReport>), ProtocolError> {
    check_order(order, n, dims.out_channels)?;
    let host_weights: Vec<f32> = candidate_positions(dims, order, n)
        .into_iter()
        .map(|p| weights[p])
        .collect();
    let (_, table) = select_pair_position(&host_weights, PAIR_POSITIONS, offset)?;
    let mut ranked = table.clone();
    ranked.sort_by(|a, b| a.entropy_bits.total_cmp(&b.entropy_bits).then(a.c.cmp(&b.c)));
    let tried: Vec<u8> = match position {
        PairPosition::Fixed(c) => vec![c],
        PairPosition::Auto => ranked.iter().map(|r| r.c).collect(),
    };
    let mut reports = Vec::new();
    let mut first_err = None;
    let mut chosen: Option<LayerPlan> = None;
    let mut fits = false;
    for c in tried {
        let entropy = table.iter().find(|r| r.c == c).copied().unwrap_or(PairEntropy {
            c,
            entropy_bits: f64::NAN,
            usable: 0,
        });
        match analyze_layer(weights, dims, layer, order, n, c, offset) {
            Ok(lp) => {
                reports.push(PositionReport {
                    entropy,
                    outcome: Ok(PositionCapacity {
                        peak: lp.params.peak,
                        valley: lp.params.valley,
                        capacity: lp.params.capacity,
                        plan_bits: lp.plan_bits(),
                        exclusions: lp.plan.exclusions.len(),
                        message_capacity: lp.message_capacity(),
                    }),
                });
                let enough = lp.params.capacity >= HEADER_BITS + lp.plan_bits()
                    && lp.message_capacity() >= min_message;
                let better = chosen
                    .as_ref()
                    .is_none_or(|b| lp.message_capacity() > b.message_capacity());
                if !fits && (enough || better) {
                    chosen = Some(lp);
                    fits = enough;
                }
                if fits && stop_early {
                    break;
                }
            }
            Err(e) => {
                reports.push(PositionReport {
                    entropy,
                    outcome: Err(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    match chosen {
        Some(lp) => Ok((lp, reports)),
        None => Err(first_err.expect("at least one position tried")),
    }
}

/// Embeds `message` (already framed with `lp`'s backup) into the layer.
fn apply_layer(weights: &[f32], lp: &LayerPlan, message: &[bool]) -> Result<Vec<f32>, ProtocolError> {
    let plan_len = lp.plan_bits();
    let backup = lsb_read(weights, plan_len);
    let payload = frame_payload(message, &backup)?;
    if payload.len() > lp.params.capacity {
        return Err(ProtocolError::CapacityExceeded {
            needed: message.len(),
            capacity: lp.message_capacity(),
        });
    }
    let symbols: Vec<i32> = lp.host.iter().map(|h| h.symbol).collect();
    let marked = hs_embed(&symbols, &payload, &lp.params)?;
    let mut out = weights.to_vec();
    for (h, &m) in lp.host.iter().zip(&marked) {
        if m != h.symbol {
            out[h.pos] = h.moved.expect("shifted carriers are movable");
        }
    }
    let plan_bits = encode_plan(&lp.plan)?;
    Ok(lsb_replace(&out, &plan_bits)?.0)
}

struct Resolved {
    layer: usize,
    order: Vec<usize>,
    n: usize,
}

fn resolve_config(model: &ModelContainer, config: &EmbedConfig) -> Result<Vec<Resolved>, ProtocolError> {
    if config.layers.is_empty() {
        return Err(ProtocolError::NoLayers);
    }
    let mut layers: Vec<&LayerConfig> = config.layers.iter().collect();
    layers.sort_by_key(|l| l.layer);
    let indices: Vec<usize> = layers.iter().map(|l| l.layer).collect();
    check_distinct(model, &indices)?;
    layers
        .into_iter()
        .map(|lc| {
            let (weights, dims) = layer_weights(model, lc.layer)?;
            let order = match &lc.order {
                Some(o) => o.clone(),
                None => magnitude_variance_order(weights, dims),
            };
            Ok(Resolved {
                layer: lc.layer,
                order,
                n: lc.channels,
            })
        })
        .collect()
}

fn plan_all(
    model: &ModelContainer,
    config: &EmbedConfig,
    min_message: usize,
) -> Result<Vec<(usize, LayerPlan)>, ProtocolError> {
    let resolved = resolve_config(model, config)?;
    resolved
        .par_iter()
        .map(|r| {
            let (weights, dims) = layer_weights(model, r.layer)?;
            let (lp, _) = plan_positions(
                weights,
                dims,
                r.layer,
                &r.order,
                r.n,
                config.pair_position,
                config.offset,
                min_message,
                true,
            )?;
            Ok((r.layer, lp))
        })
        .collect()
}

fn apply_all(
    model: &ModelContainer,
    plans: &[(usize, LayerPlan)],
    chunks: &[&[bool]],
) -> Result<ModelContainer, ProtocolError> {
    let marked = plans
        .par_iter()
        .zip(chunks.par_iter())
        .map(|((layer, lp), chunk)| {
            let (weights, _) = layer_weights(model, *layer)?;
            apply_layer(weights, lp, chunk)
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let mut out = model.clone();
    for ((layer, _), data) in plans.iter().zip(marked) {
        let t = out.manifest[*layer].weight_tensor;
        out.tensors[t].data = data;
    }
    Ok(out)
}

/// Largest message [`embed_watermark`] accepts for a configuration, in bits.
pub fn capacity(model: &ModelContainer, config: &EmbedConfig) -> Result<usize, ProtocolError> {
    model.validate()?;
    Ok(plan_all(model, config, usize::MAX)?
        .iter()
        .map(|(_, lp)| lp.message_capacity())
        .sum())
}

/// Embeds `message` split greedily over the configured layers in ascending
/// layer order.
pub fn embed_watermark(
    model: &ModelContainer,
    message: &[bool],
    config: &EmbedConfig,
) -> Result<ModelContainer, ProtocolError> {
    model.validate()?;
    let plans = plan_all(model, config, message.len())?;
    let total: usize = plans.iter().map(|(_, lp)| lp.message_capacity()).sum();
    if message.len() > total {
        return Err(ProtocolError::CapacityExceeded {
            needed: message.len(),
            capacity: total,
        });
    }
    if let Some((_, lp)) = plans
        .iter()
        .find(|(_, lp)| lp.params.capacity < HEADER_BITS + lp.plan_bits())
    {
        return Err(ProtocolError::CapacityExceeded {
            needed: HEADER_BITS + lp.plan_bits(),
            capacity: lp.params.capacity,
        });
    }
    let mut rest = message;
    let chunks: Vec<&[bool]> = plans
        .iter()
        .map(|(_, lp)| {
            let (head, tail) = rest.split_at(lp.message_capacity().min(rest.len()));
            rest = tail;
            head
        })
        .collect();
    apply_all(model, &plans, &chunks)
}

/// Embeds the SHA-256 of `model` into every configured layer.
pub fn seal(model: &ModelContainer, config: &EmbedConfig) -> Result<ModelContainer, ProtocolError> {
    let digest = model.digest()?.to_bits();
    let plans = plan_all(model, config, DIGEST_BITS)?;
    for (_, lp) in &plans {
        if lp.message_capacity() < DIGEST_BITS
            || lp.params.capacity < HEADER_BITS + lp.plan_bits()
        {
            return Err(ProtocolError::CapacityExceeded {
                needed: DIGEST_BITS,
                capacity: lp.message_capacity(),
            });
        }
    }
    let chunks = vec![&digest[..]; plans.len()];
    apply_all(model, &plans, &chunks)
}

/// The reader's side of the implicit exclusions: weights in the LSB region
/// and peak carriers that cannot shift by one never carry a bit.
fn drop_unmovable_peaks(host: &mut HostSequence, weights: &[f32], peak: i32, plan_len: usize) {
    let keep: Vec<bool> = host
        .symbols
        .iter()
        .zip(&host.coords)
        .map(|(&s, &pos)| {
            pos >= plan_len
                && (s != peak || matches!(step_up(weights[pos], host.c), Ok(SymbolStep::Movable(_))))
        })
        .collect();
    let mut k = keep.iter();
    host.symbols.retain(|_| *k.next().unwrap());
    let mut k = keep.iter();
    host.coords.retain(|_| *k.next().unwrap());
    let mut k = keep.iter();
    host.slots.retain(|_| *k.next().unwrap());
}

/// Recovered content of one marked layer.
struct Recovered {
    plan: EmbedPlan,
    message: Vec<bool>,
    weights: Vec<f32>,
}

fn recover_layer(weights: &[f32], dims: ConvDims, layer: usize) -> Result<Recovered, ProtocolError> {
    let tampered = |reason: &str| ProtocolError::Tampered {
        layer,
        reason: reason.to_owned(),
    };
    let layer_index: u16 = narrow("layer index", layer)?;
    let plan = match read_plan(weights, layer_index) {
        Ok(p) => p,
        Err(SidecarError::NotMarked) => return Err(ProtocolError::NotMarked { layer }),
        Err(e) => return Err(tampered(&e.to_string())),
    };
    if plan.out_channels as usize != dims.out_channels
        || plan.span as usize != dims.per_channel()
        || plan.order.is_empty()
        || !PAIR_POSITIONS.contains(&plan.c)
        || check_offset(plan.offset as i32).is_err()
    {
        return Err(tampered("plan does not match the layer"));
    }
    let order: Vec<usize> = plan.order.iter().map(|&o| o as usize).collect();
    let n = order.len();
    let mut extra = vec![false; n * dims.per_channel()];
    for &x in &plan.exclusions {
        extra[x as usize] = true;
    }
    let c = plan.c;
    let offset = plan.offset as i32;
    let (mut host, _) = build_host(weights, dims, &order, n, c, offset, Some(&extra))
        .map_err(|e| tampered(&e.to_string()))?;
    let plan_len = plan.bit_len();
    drop_unmovable_peaks(&mut host, weights, plan.peak as i32, plan_len);
    let params = HsParams {
        peak: plan.peak as i32,
        valley: plan.valley as i32,
        capacity: host
            .symbols
            .iter()
            .filter(|&&s| s == plan.peak as i32 || s == plan.peak as i32 + 1)
            .count(),
    };
    let (bits, restored) = hs_extract(&host.symbols, &params);
    let (payload, used) = parse_payload(&bits).map_err(|e| tampered(&e.to_string()))?;
    if bits[used..].iter().any(|&b| b) {
        return Err(tampered("nonzero payload padding"));
    }
    if payload.lsb_backup.len() != plan_len {
        return Err(tampered("LSB backup length differs from the plan"));
    }
    let mut out = weights.to_vec();
    for ((&pos, &marked), &orig) in host.coords.iter().zip(&host.symbols).zip(&restored) {
        if marked == orig {
            continue;
        }
        let w = weights[pos];
        let pair = if w.is_sign_negative() { offset - orig } else { orig - offset };
        let pair = u8::try_from(pair)
            .ok()
            .filter(|&p| p <= 99)
            .ok_or_else(|| tampered("restored pair out of range"))?;
        out[pos] = rewrite_pair(w, c, pair).map_err(|e| tampered(&e.to_string()))?;
    }
    for (w, &b) in out.iter_mut().zip(&payload.lsb_backup) {
        *w = with_lsb(*w, b);
    }
    Ok(Recovered {
        plan,
        message: payload.message,
        weights: out,
    })
}

/// Re-embeds a recovered layer and requires it to reproduce `marked`.
fn confirm_layer(marked: &[f32], dims: ConvDims, layer: usize, rec: &Recovered) -> Result<(), ProtocolError> {
    let order: Vec<usize> = rec.plan.order.iter().map(|&o| o as usize).collect();
    let again = analyze_layer(
        &rec.weights,
        dims,
        layer,
        &order,
        order.len(),
        rec.plan.c,
        rec.plan.offset as i32,
    )
    .and_then(|lp| {
        if lp.plan != rec.plan {
            return Err(ProtocolError::Tampered {
                layer,
                reason: "re-derived plan differs".into(),
            });
        }
        apply_layer(&rec.weights, &lp, &rec.message)
    });
    let same = again.is_ok_and(|w| {
        w.len() == marked.len() && w.iter().zip(marked).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    if same {
        Ok(())
    } else {
        Err(ProtocolError::Tampered {
            layer,
            reason: "re-embedding does not reproduce the marked layer".into(),
        })
    }
}

/// Marked layers: those whose LSBs begin with a plan header for their own
/// index (allowing one damaged bit).
pub fn detect_marked_layers(model: &ModelContainer) -> Vec<usize> {
    (0..model.manifest.len())
        .filter(|&l| {
            let Ok((weights, _)) = layer_weights(model, l) else {
                return false;
            };
            let Ok(idx) = u16::try_from(l) else {
                return false;
            };
            !matches!(read_plan(weights, idx), Err(SidecarError::NotMarked))
        })
        .collect()
}

fn extract_layers(
    model: &ModelContainer,
    layers: &[usize],
    confirm: bool,
) -> Result<Vec<(usize, Recovered)>, ProtocolError> {
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    check_distinct(model, &layers)?;
    layers
        .par_iter()
        .map(|&l| {
            let (weights, dims) = layer_weights(model, l)?;
            let rec = recover_layer(weights, dims, l)?;
            if confirm {
                confirm_layer(weights, dims, l, &rec)?;
            }
            Ok((l, rec))
        })
        .collect()
}

fn restore_into(model: &ModelContainer, recovered: &[(usize, Recovered)]) -> ModelContainer {
    let mut out = model.clone();
    for (l, rec) in recovered {
        let t = out.manifest[*l].weight_tensor;
        out.tensors[t].data = rec.weights.clone();
    }
    out
}

/// Extracts the message from `layers` (ascending order) and restores the
/// original model. An empty list means every marked layer.
pub fn extract_watermark(
    model: &ModelContainer,
    layers: &[usize],
) -> Result<(Vec<bool>, ModelContainer), ProtocolError> {
    model.validate()?;
    let layers = if layers.is_empty() {
        detect_marked_layers(model)
    } else {
        layers.to_vec()
    };
    if layers.is_empty() {
        return Err(ProtocolError::NoLayers);
    }
    let recovered = extract_layers(model, &layers, true)?;
    let message = recovered
        .iter()
        .flat_map(|(_, r)| r.message.iter().copied())
        .collect();
    Ok((message, restore_into(model, &recovered)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Intact,
    Tampered,
    NotSealed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Intact => "INTACT",
            Verdict::Tampered => "TAMPERED",
            Verdict::NotSealed => "NOT_SEALED",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerStatus {
    Intact,
    DigestMismatch,
    NotMarked,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerReport {
    pub layer: usize,
    pub status: LayerStatus,
    pub extracted: Option<ModelDigest>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub verdict: Verdict,
    /// WM2: the digest carried by the first checked layer.
    pub extracted_digest: Option<ModelDigest>,
    /// WM3: the digest of the restored model.
    pub recomputed_digest: Option<ModelDigest>,
    pub layers: Vec<LayerReport>,
    pub note: Option<String>,
}

impl VerifyReport {
    fn failed(verdict: Verdict, note: impl Into<String>) -> Self {
        VerifyReport {
            verdict,
            extracted_digest: None,
            recomputed_digest: None,
            layers: Vec::new(),
            note: Some(note.into()),
        }
    }

    /// `verdict=... wm2=... wm3=... layers=i:status,...`
    pub fn to_record(&self) -> String {
        let hex = |d: &Option<ModelDigest>| d.map_or_else(|| "-".to_owned(), |d| d.to_hex());
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| {
                let s = match &l.status {
                    LayerStatus::Intact => "intact",
                    LayerStatus::DigestMismatch => "mismatch",
                    LayerStatus::NotMarked => "unmarked",
                    LayerStatus::Failed(_) => "failed",
                };
                format!("{}:{s}", l.layer)
            })
            .collect();
        format!(
            "verdict={} wm2={} wm3={} layers={}",
            self.verdict,
            hex(&self.extracted_digest),
            hex(&self.recomputed_digest),
            if layers.is_empty() { "-".to_owned() } else { layers.join(",") }
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("verdict: {}\n", self.verdict);
        if let Some(d) = &self.extracted_digest {
            s += &format!("extracted digest:  {d}\n");
        }
        if let Some(d) = &self.recomputed_digest {
            s += &format!("recomputed digest: {d}\n");
        }
        for l in &self.layers {
            let status = match &l.status {
                LayerStatus::Intact => "intact".to_owned(),
                LayerStatus::DigestMismatch => "digest mismatch".to_owned(),
                LayerStatus::NotMarked => "no watermark".to_owned(),
                LayerStatus::Failed(why) => format!("failed: {why}"),
            };
            s += &format!("layer {}: {status}\n", l.layer);
        }
        if let Some(n) = &self.note {
            s += &format!("note: {n}\n");
        }
        s
    }
}

fn holds_any_plan(model: &ModelContainer) -> bool {
    model.tensors.iter().any(|t| find_plan(&t.data).is_ok())
}

/// Checks a sealed model. With no layers given, every marked layer is
/// checked. Never fails: all problems become verdicts.
pub fn verify(model: &ModelContainer, layers: Option<&[usize]>) -> VerifyReport {
    if let Err(e) = model.validate() {
        return VerifyReport::failed(Verdict::Tampered, e.to_string());
    }
    let layers = match layers {
        Some(l) => l.to_vec(),
        None => detect_marked_layers(model),
    };
    let unsealed = |note: &str| {
        if holds_any_plan(model) {
            VerifyReport::failed(Verdict::Tampered, "a plan exists outside the checked layers")
        } else {
            VerifyReport::failed(Verdict::NotSealed, note)
        }
    };
    if layers.is_empty() {
        return unsealed("no marked layer");
    }
    let mut sorted = layers.clone();
    sorted.sort_unstable();
    if let Err(e) = check_distinct(model, &sorted) {
        return VerifyReport::failed(Verdict::Tampered, e.to_string());
    }

    let attempts: Vec<(usize, Result<Recovered, ProtocolError>)> = sorted
        .par_iter()
        .map(|&l| {
            let r = layer_weights(model, l).and_then(|(w, dims)| recover_layer(w, dims, l));
            (l, r)
        })
        .collect();
    if attempts
        .iter()
        .all(|(_, r)| matches!(r, Err(ProtocolError::NotMarked { .. })))
    {
        return unsealed("no watermark in the checked layers");
    }

    let mut reports = Vec::new();
    let mut recovered = Vec::new();
    for (l, r) in attempts {
        match r {
            Ok(rec) => {
                let extracted = ModelDigest::from_bits(&rec.message);
                reports.push(LayerReport {
                    layer: l,
                    status: LayerStatus::Intact,
                    extracted,
                });
                recovered.push((l, rec));
            }
            Err(ProtocolError::NotMarked { .. }) => reports.push(LayerReport {
                layer: l,
                status: LayerStatus::NotMarked,
                extracted: None,
            }),
            Err(e) => reports.push(LayerReport {
                layer: l,
                status: LayerStatus::Failed(e.to_string()),
                extracted: None,
            }),
        }
    }
    let restored = restore_into(model, &recovered);
    let wm3 = restored.digest().ok();
    for rep in reports.iter_mut() {
        if rep.status == LayerStatus::Intact && (rep.extracted.is_none() || rep.extracted != wm3) {
            rep.status = LayerStatus::DigestMismatch;
        }
    }
    // Only a fully consistent model pays for re-embedding.
    if reports.iter().all(|r| r.status == LayerStatus::Intact) {
        let checks: Vec<Result<(), ProtocolError>> = recovered
            .par_iter()
            .map(|(l, rec)| {
                let (w, dims) = layer_weights(model, *l)?;
                confirm_layer(w, dims, *l, rec)
            })
            .collect();
        for (rep, check) in reports.iter_mut().zip(checks) {
            if let Err(e) = check {
                rep.status = LayerStatus::Failed(e.to_string());
            }
        }
    }
    let intact = reports.iter().all(|r| r.status == LayerStatus::Intact);
    VerifyReport {
        verdict: if intact { Verdict::Intact } else { Verdict::Tampered },
        extracted_digest: reports.iter().find_map(|r| r.extracted),
        recomputed_digest: wm3,
        layers: reports,
        note: None,
    }
}

/// [`verify`] on serialized bytes; a container that does not parse is
/// reported as tampered.
pub fn verify_bytes(bytes: &[u8], layers: Option<&[usize]>) -> VerifyReport {
    match ModelContainer::from_bytes(bytes) {
        Ok(model) => verify(&model, layers),
        Err(e) => VerifyReport::failed(Verdict::Tampered, format!("container does not parse: {e}")),
    }
}
