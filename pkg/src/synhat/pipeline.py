"""Two-stage training and generation.

Stage 1 trains an unconditional denoiser on coarse latent ST traces and
samples new ones from pure noise.  Stage 2 jointly trains the behavior
pattern encoder and a conditional denoiser on per-slot fine segments, with
the slot's coordinate/time broadcast into three extra input channels and the
global context modulating the network; generation runs once per active slot,
in any order, with a per-slot noise stream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .align import VisitHistory, align
from .bpem import BehaviorPatternEncoder
from .diffusion import (
    EMA,
    DiffusionSchedule,
    EventEmphasis,
    SamplerConfig,
    ddim_sample,
    eps_loss,
    forward_noise,
    load_checkpoint,
    save_checkpoint,
)
from .traces import (
    CoordNormalizer,
    FineSegment,
    array_to_segment,
    array_to_trace,
    build_coarse_trace,
    build_fine_segment,
    compress_to_states,
    fine_cells_per_slot,
    most_frequent_poi_coord,
    segment_to_array,
    segments_to_states,
    trace_to_array,
)
from .types import HAT, LatentSTStates, LatentSTTrace, POIIndex, validate_hat
from .unet import LSTUNet, UNetConfig

log = logging.getLogger(__name__)

STAY_THRESHOLD = 0.5
EVENT_THRESHOLD = 0.7
STAGE2_CHANNELS = ("lat", "lon", "mask", "cond_lat", "cond_lon", "cond_time")


@dataclass
class StageTrainConfig:
    """Shared optimiser/diffusion settings (defaults mirror the full-scale run)."""

    epochs: int = 2000
    batch_size: int = 64
    lr: float = 2e-4
    grad_clip: float = 1.0
    ema_decay: float = 0.999
    diffusion_steps: int = 1000
    schedule_kind: str = "cosine"
    base_channels: int = 128
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    blocks_per_scale: int = 2
    embedding_dim: int = 32
    event_emphasis: bool = True
    emphasis: EventEmphasis = field(default_factory=EventEmphasis)
    # stage-2 batching: traces per step, slots drawn per trace
    traces_per_batch: int = 8
    slots_per_trace: int = 8

    def make_schedule(self) -> DiffusionSchedule:
        if self.schedule_kind == "cosine":
            return DiffusionSchedule.cosine(self.diffusion_steps)
        if self.schedule_kind == "linear":
            return DiffusionSchedule.linear(self.diffusion_steps)
        raise ValueError(f"unknown schedule kind: {self.schedule_kind!r}")

    def unet_config(self, in_channels: int, conditional: bool = False,
                    context_dim: int = 0) -> UNetConfig:
        return UNetConfig(
            in_channels=in_channels,
            out_channels=3,
            base_channels=self.base_channels,
            channel_multipliers=tuple(self.channel_multipliers),
            blocks_per_scale=self.blocks_per_scale,
            embedding_dim=self.embedding_dim,
            conditional=conditional,
            context_dim=context_dim,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


@dataclass
class PerturbConfig:
    """Spatio-temporal condition perturbation during stage-2 training.

    The application probability ramps linearly from p_start to p_end over
    the first `ramp_frac` of training, then stays constant (non-decreasing
    by construction).  sigma_s is in normalized coordinate units; sigma_t in
    seconds (converted to normalized slot-time units internally).
    """

    p_start: float = 0.05
    p_end: float = 0.30
    ramp_frac: float = 0.5
    sigma_s: float = 0.05
    sigma_t: float | None = None  # seconds; defaults to 0.1 * granularity

    def __post_init__(self):
        if not (0 <= self.p_start <= 1 and 0 <= self.p_end <= 1):
            raise ValueError("perturbation probabilities must lie in [0, 1]")
        if self.p_end < self.p_start:
            raise ValueError("perturbation probability must be non-decreasing")

    def p_at(self, progress: float) -> float:
        if self.ramp_frac <= 0:
            return self.p_end
        u = min(max(progress / self.ramp_frac, 0.0), 1.0)
        return self.p_start + (self.p_end - self.p_start) * u

    def sigma_t_for(self, granularity: float) -> float:
        return 0.1 * granularity if self.sigma_t is None else self.sigma_t


def perturb_conditions(coords: torch.Tensor, times: torch.Tensor, p: float,
                       sigma_s: float, sigma_t_norm: float,
                       generator: Optional[torch.Generator] = None
                       ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Gaussian-perturb conditioning signals with per-item probability p.

    Returns (coords', times', applied) where applied is the boolean Bernoulli
    outcome per item.  Targets are never touched here.
    """
    b = coords.shape[0]
    applied = torch.rand(b, generator=generator) < p
    sel = applied.to(coords.dtype).unsqueeze(-1)
    coords = coords + sel * sigma_s * torch.randn(coords.shape, generator=generator)
    times = times + applied.to(times.dtype) * sigma_t_norm \
        * torch.randn(times.shape, generator=generator)
    return coords, times, applied


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def _corpus_to_coarse_arrays(corpus: Sequence[HAT], granularity: float,
                             norm: CoordNormalizer,
                             fill: tuple[float, float]) -> torch.Tensor:
    arrays = [
        trace_to_array(build_coarse_trace(h, granularity, fill), norm)
        for h in corpus
    ]
    return torch.from_numpy(np.stack(arrays))


def train_stage1(corpus: Sequence[HAT], granularity: float, cfg: StageTrainConfig,
                 seed: int = 0, resume_from: Optional[dict] = None,
                 log_fn: Optional[Callable[[int, float], None]] = None) -> dict:
    """Train the unconditional coarse-trace denoiser; returns a checkpoint payload."""
    if not corpus:
        raise ValueError("empty training corpus")
    duration = corpus[0].duration
    norm = CoordNormalizer.fit(corpus)
    fill = most_frequent_poi_coord(corpus)
    data = _corpus_to_coarse_arrays(corpus, granularity, norm, fill)
    length = data.shape[-1]
    schedule = cfg.make_schedule()
    torch.manual_seed(seed)  # weight init; training is a pure function of seed
    model = LSTUNet(cfg.unet_config(in_channels=3))

    config = {
        "stage": 1,
        "granularity": granularity,
        "duration": duration,
        "length": length,
        "normalizer": norm.to_dict(),
        "fill_coord": list(fill),
        "train": cfg.to_dict(),
        "seed": seed,
    }
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)
    ema = EMA(model, decay=cfg.ema_decay)
    start_epoch = 0
    losses: list[float] = []
    if resume_from is not None:
        model.load_state_dict(resume_from["model_state"])
        ema.shadow = {k: v.clone() for k, v in resume_from["ema_state"].items()}
        opt.load_state_dict(resume_from["extra"]["optimizer"])
        gen.set_state(resume_from["extra"]["generator"])
        start_epoch = resume_from["extra"]["epoch"]
        losses = list(resume_from["extra"]["loss_history"])

    emphasis = cfg.emphasis if cfg.event_emphasis else None
    for epoch in range(start_epoch, cfg.epochs):
        progress = epoch / max(cfg.epochs, 1)
        epoch_loss = _run_epoch_stage1(model, data, schedule, cfg, opt, ema, gen,
                                       emphasis, progress)
        losses.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            raise RuntimeError(f"stage-1 training diverged at epoch {epoch}: loss={epoch_loss}")
        if log_fn:
            log_fn(epoch, epoch_loss)
        log.debug("stage1 epoch %d loss %.5f", epoch, epoch_loss)

    return {
        "model_state": model.state_dict(),
        "ema_state": ema.state_dict(),
        "schedule": schedule,
        "config": config,
        "extra": {
            "optimizer": opt.state_dict(),
            "generator": gen.get_state(),
            "epoch": cfg.epochs,
            "loss_history": losses,
        },
    }


def _run_epoch_stage1(model, data, schedule, cfg, opt, ema, gen, emphasis,
                      progress) -> float:
    m = data.shape[0]
    perm = torch.randperm(m, generator=gen)
    total, steps = 0.0, 0
    for lo in range(0, m, cfg.batch_size):
        idx = perm[lo:lo + cfg.batch_size]
        x0 = data[idx]
        n = torch.randint(1, schedule.n_steps + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        weights = None
        if emphasis is not None:
            mask01 = (x0[:, 2] + 1.0) / 2.0
            weights = emphasis.weights(mask01, progress)
        loss = eps_loss(schedule, model, x0, n, eps, weights=weights)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        ema.update(model)
        total += loss.item()
        steps += 1
    return total / max(steps, 1)


def stage1_model(payload: dict, use_ema: bool = True) -> LSTUNet:
    cfg = StageTrainConfig(**_train_kwargs(payload["config"]["train"]))
    model = LSTUNet(cfg.unet_config(in_channels=3))
    model.load_state_dict(payload["ema_state"] if use_ema else payload["model_state"])
    model.eval()
    return model


def _train_kwargs(d: dict) -> dict:
    kw = dict(d)
    kw["channel_multipliers"] = tuple(kw["channel_multipliers"])
    emph = kw.get("emphasis")
    if isinstance(emph, dict):
        kw["emphasis"] = EventEmphasis(**emph)
    return kw


def generate_stage1(payload: dict, count: int, seed: int = 0,
                    sampler: Optional[SamplerConfig] = None,
                    use_ema: bool = True) -> list[LatentSTTrace]:
    """Sample coarse latent traces from noise (continuous mask channel)."""
    if count == 0:
        return []
    sampler = sampler or SamplerConfig()
    model = stage1_model(payload, use_ema)
    cfgd = payload["config"]
    norm = CoordNormalizer.from_dict(cfgd["normalizer"])
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        noise = torch.randn((count, 3, cfgd["length"]), generator=gen)
        if sampler.kind == "ddim":
            x0 = ddim_sample(payload["schedule"], model, noise.shape, sampler,
                             generator=gen, initial_noise=noise)
        else:
            from .diffusion import ddpm_sample
            x0 = ddpm_sample(payload["schedule"], model, noise.shape,
                             generator=gen, initial_noise=noise)
    return [array_to_trace(a, cfgd["granularity"], norm) for a in x0.numpy()]


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

class FineDenoiser(nn.Module):
    """Conditional denoiser plus its jointly-trained context encoder."""

    def __init__(self, unet_cfg: UNetConfig, visit_len: int, embed_dim: int = 32):
        super().__init__()
        self.unet = LSTUNet(unet_cfg)
        self.bpem = BehaviorPatternEncoder(visit_len, embed_dim=embed_dim)

    def denoise(self, x_noisy: torch.Tensor, n, cond_channels: torch.Tensor,
                context: Optional[torch.Tensor]) -> torch.Tensor:
        x = torch.cat([x_noisy, cond_channels], dim=1)
        return self.unet(x, n, context)


@dataclass
class _TraceContext:
    """Precomputed stage-2 training material for one HAT."""

    visit: np.ndarray  # (L,) binary mask
    state_coords: np.ndarray  # (K, 2) normalized
    state_ticks: np.ndarray  # (K,) slot indices
    segments: list[np.ndarray]  # (3, F) target per state


def _prepare_stage2(corpus: Sequence[HAT], granularity: float,
                    norm: CoordNormalizer, fill) -> list[_TraceContext]:
    out = []
    for h in corpus:
        coarse = build_coarse_trace(h, granularity, fill)
        states = compress_to_states(coarse)
        if len(states) == 0:
            continue
        segs = [
            segment_to_array(build_fine_segment(h, coarse, int(s)), norm)
            for s in states.ticks
        ]
        out.append(_TraceContext(
            visit=coarse.mask.copy(),
            state_coords=norm.encode(states.coords),
            state_ticks=states.ticks.copy(),
            segments=segs,
        ))
    if not out:
        raise ValueError("no trace in the corpus has any active slot")
    return out


def train_stage2(corpus: Sequence[HAT], granularity: float, cfg: StageTrainConfig,
                 perturb: Optional[PerturbConfig] = None, seed: int = 0,
                 use_context: bool = True,
                 log_fn: Optional[Callable[[int, float], None]] = None) -> dict:
    """Jointly train the fine-segment denoiser and the context encoder.

    `use_context=False` drops the global context entirely (scale/shift fixed
    at zero), leaving only the broadcast slot conditions.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    perturb = perturb or PerturbConfig()
    duration = corpus[0].duration
    norm = CoordNormalizer.fit(corpus)
    fill = most_frequent_poi_coord(corpus)
    prepared = _prepare_stage2(corpus, granularity, norm, fill)
    length = len(prepared[0].visit)
    f_cells = fine_cells_per_slot(granularity)
    schedule = cfg.make_schedule()

    torch.manual_seed(seed)  # weight init; training is a pure function of seed
    net = FineDenoiser(
        cfg.unet_config(in_channels=6, conditional=use_context,
                        context_dim=2 * cfg.embedding_dim if use_context else 0),
        visit_len=length, embed_dim=cfg.embedding_dim,
    )
    sigma_t_norm = perturb.sigma_t_for(granularity) / duration

    config = {
        "stage": 2,
        "granularity": granularity,
        "duration": duration,
        "length": length,
        "fine_cells": f_cells,
        "normalizer": norm.to_dict(),
        "fill_coord": list(fill),
        "train": cfg.to_dict(),
        "perturb": asdict(perturb),
        "use_context": use_context,
        "channels": list(STAGE2_CHANNELS),
        "seed": seed,
    }

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr)
    ema = EMA(net, decay=cfg.ema_decay)
    emphasis = cfg.emphasis if cfg.event_emphasis else None
    losses: list[float] = []
    order = torch.randperm(len(prepared), generator=gen).tolist()
    cursor = 0

    for epoch in range(cfg.epochs):
        progress = epoch / max(cfg.epochs, 1)
        p = perturb.p_at(progress)
        total, steps = 0.0, 0
        n_batches = max(1, math.ceil(len(prepared) / cfg.traces_per_batch))
        for _ in range(n_batches):
            batch_traces = []
            for _ in range(min(cfg.traces_per_batch, len(prepared))):
                if cursor >= len(order):
                    order = torch.randperm(len(prepared), generator=gen).tolist()
                    cursor = 0
                batch_traces.append(prepared[order[cursor]])
                cursor += 1
            loss = _stage2_step(net, batch_traces, schedule, cfg, gen, length,
                                use_context, p, perturb.sigma_s, sigma_t_norm,
                                emphasis, progress)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            ema.update(net)
            total += loss.item()
            steps += 1
        epoch_loss = total / max(steps, 1)
        losses.append(epoch_loss)
        if not math.isfinite(epoch_loss):
            raise RuntimeError(f"stage-2 training diverged at epoch {epoch}: loss={epoch_loss}")
        if log_fn:
            log_fn(epoch, epoch_loss)
        log.debug("stage2 epoch %d loss %.5f", epoch, epoch_loss)

    return {
        "model_state": net.state_dict(),
        "ema_state": ema.state_dict(),
        "schedule": schedule,
        "config": config,
        "extra": {"loss_history": losses, "generator": gen.get_state()},
    }


def _stage2_step(net: FineDenoiser, batch_traces: list[_TraceContext], schedule,
                 cfg: StageTrainConfig, gen, length: int, use_context: bool,
                 p: float, sigma_s: float, sigma_t_norm: float, emphasis,
                 progress: float) -> torch.Tensor:
    xs, conds_c, conds_t, ctxs = [], [], [], []
    for tc in batch_traces:
        k = len(tc.state_ticks)
        if use_context:
            h = net.bpem.encode(tc.state_coords, tc.state_ticks, tc.visit)
            ctx_all = net.bpem.per_state_context(h)
        n_pick = min(cfg.slots_per_trace, k)
        picks = torch.randperm(k, generator=gen)[:n_pick].tolist()
        for j in picks:
            xs.append(torch.from_numpy(tc.segments[j]))
            conds_c.append(torch.tensor(tc.state_coords[j], dtype=torch.float32))
            conds_t.append(torch.tensor((tc.state_ticks[j] + 0.5) / length,
                                        dtype=torch.float32))
            if use_context:
                ctxs.append(ctx_all[j])
    x0 = torch.stack(xs)
    cond_coords = torch.stack(conds_c)
    cond_times = torch.stack(conds_t)
    context = torch.stack(ctxs) if use_context else None

    cond_coords, cond_times, _ = perturb_conditions(
        cond_coords, cond_times, p, sigma_s, sigma_t_norm, gen)
    f = x0.shape[-1]
    cond_channels = torch.cat(
        [cond_coords.unsqueeze(-1).expand(-1, 2, f),
         cond_times.reshape(-1, 1, 1).expand(-1, 1, f)], dim=1,
    )

    b = x0.shape[0]
    n = torch.randint(1, schedule.n_steps + 1, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    weights = None
    if emphasis is not None:
        weights = emphasis.weights((x0[:, 2] + 1.0) / 2.0, progress)

    def denoiser(x_noisy, step, ctx=None):
        return net.denoise(x_noisy, step, cond_channels, ctx)

    if context is not None:
        return eps_loss(schedule, denoiser, x0, n, eps, condition=context,
                        weights=weights)
    return eps_loss(schedule, lambda x, s: denoiser(x, s), x0, n, eps,
                    weights=weights)


def stage2_model(payload: dict, use_ema: bool = True) -> FineDenoiser:
    cfgd = payload["config"]
    cfg = StageTrainConfig(**_train_kwargs(cfgd["train"]))
    use_context = cfgd["use_context"]
    net = FineDenoiser(
        cfg.unet_config(in_channels=6, conditional=use_context,
                        context_dim=2 * cfg.embedding_dim if use_context else 0),
        visit_len=cfgd["length"], embed_dim=cfg.embedding_dim,
    )
    net.load_state_dict(payload["ema_state"] if use_ema else payload["model_state"])
    net.eval()
    return net


def _slot_generator(base_seed: int, trace_key: int, slot: int) -> torch.Generator:
    mix = np.random.SeedSequence([base_seed, trace_key, slot]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(mix))


def generate_fine(traces: Sequence[LatentSTTrace], payload: dict, seed: int = 0,
                  sampler: Optional[SamplerConfig] = None, use_ema: bool = True,
                  stay_threshold: float = STAY_THRESHOLD,
                  event_threshold: float = EVENT_THRESHOLD,
                  trace_keys: Optional[Sequence[int]] = None,
                  chunk_size: int = 256) -> list[LatentSTStates]:
    """Per active slot, conditionally sample one fine segment; threshold the
    generated masks into fine states.

    The context is extracted once per trace; each slot draws its own noise
    stream keyed on (seed, trace, slot), so generation order is irrelevant.
    Slots from different traces are sampled together in chunks.
    """
    sampler = sampler or SamplerConfig()
    net = stage2_model(payload, use_ema)
    cfgd = payload["config"]
    norm = CoordNormalizer.from_dict(cfgd["normalizer"])
    length = cfgd["length"]
    f = cfgd["fine_cells"]
    use_context = cfgd["use_context"]
    schedule = payload["schedule"]
    if trace_keys is None:
        trace_keys = range(len(traces))

    # flatten all (trace, slot) generation jobs; context computed once per trace
    jobs_noise, jobs_cond, jobs_ctx, jobs_owner, jobs_slot = [], [], [], [], []
    segments_by_trace: list[list[FineSegment]] = [[] for _ in traces]
    with torch.no_grad():
        for pos, (key, trace) in enumerate(zip(trace_keys, traces)):
            states = compress_to_states(trace, stay_threshold)
            if len(states) == 0:
                continue
            visit = (trace.mask >= stay_threshold).astype(float)
            coords_norm = norm.encode(states.coords)
            if use_context:
                h = net.bpem.encode(coords_norm, states.ticks, visit)
                context = net.bpem.per_state_context(h)
            slots = states.ticks.astype(int)
            for j, s in enumerate(slots):
                jobs_noise.append(
                    torch.randn((3, f), generator=_slot_generator(seed, key, int(s)))
                )
                cond = torch.cat([
                    torch.tensor(coords_norm[j], dtype=torch.float32)
                        .reshape(2, 1).expand(2, f),
                    torch.full((1, f), (int(s) + 0.5) / length, dtype=torch.float32),
                ])
                jobs_cond.append(cond)
                if use_context:
                    jobs_ctx.append(context[j])
                jobs_owner.append(pos)
                jobs_slot.append(int(s))

        for lo in range(0, len(jobs_noise), chunk_size):
            hi = min(lo + chunk_size, len(jobs_noise))
            noise = torch.stack(jobs_noise[lo:hi])
            cond_channels = torch.stack(jobs_cond[lo:hi])
            context = torch.stack(jobs_ctx[lo:hi]) if use_context else None

            def denoiser(x_noisy, step, ctx=None):
                return net.denoise(x_noisy, step, cond_channels, ctx)

            x0 = ddim_sample(schedule, denoiser, noise.shape, sampler,
                             condition=context, initial_noise=noise)
            for arr, pos, s in zip(x0.numpy(), jobs_owner[lo:hi], jobs_slot[lo:hi]):
                segments_by_trace[pos].append(array_to_segment(arr, s, norm))

    return [
        segments_to_states(segs, cfgd["granularity"], event_threshold)
        if segs else LatentSTStates(coords=np.zeros((0, 2)), ticks=np.zeros(0))
        for segs in segments_by_trace
    ]


# --------------------------------------------------------------------------
# end-to-end synthesis
# --------------------------------------------------------------------------

def synthesize(count: int, stage1: dict, stage2: dict, index: POIIndex,
               history: VisitHistory, seed: int = 0, radius_m: float = 200.0,
               sampler: Optional[SamplerConfig] = None,
               max_retries: int = 10) -> list[HAT]:
    """Full generation chain: coarse traces -> states -> fine states -> HATs.

    Coarse samples whose thresholded mask (or generated fine mask) yields no
    event are discarded and resampled, up to `max_retries` rounds.
    """
    if count == 0:
        return []
    duration = stage1["config"]["duration"]
    results: list[HAT] = []
    rng = np.random.default_rng(seed)
    deficit = count
    for attempt in range(max_retries + 1):
        if deficit == 0:
            break
        traces = generate_stage1(stage1, deficit, seed=seed + 7919 * attempt,
                                 sampler=sampler)
        keys = [attempt * count + i for i in range(len(traces))]
        fine_states = generate_fine(traces, stage2, seed=seed, sampler=sampler,
                                    trace_keys=keys)
        for states in fine_states:
            if len(states) == 0:
                continue
            hat = align(states, index, history, radius_m, rng,
                        trace_id=f"synth-{len(results):05d}", duration=duration)
            if len(hat.events) == 0:
                continue
            violations = validate_hat(hat)
            if violations:
                raise RuntimeError(f"synthesized trace failed validation: {violations}")
            results.append(hat)
            if len(results) == count:
                break
        deficit = count - len(results)
    if deficit:
        raise RuntimeError(
            f"could not synthesize {count} non-empty traces in {max_retries} retries"
        )
    return results
