"""Per-layer and whole-model channel pruning with speed-up budgets."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from prunekit.core import BatchNorm, ModelGraph, count_flops, forward, infer_shapes, merge_batchnorm
from prunekit.core.flops import conv_macs
from prunekit.errors import FormatError, InfeasibleBudgetError
from prunekit.lasso import channel_responses, lambda_max, lasso_solve, select_for_sparsity
from prunekit.reconstruction import fold_final_weights, reconstruct, relative_error, renormalize
from prunekit.sampler import (
    ORIGINAL_MODEL,
    SAME_LAYER,
    SamplePlan,
    residual_last_conv,
    sample_layer,
    sample_residual_last,
)
from prunekit.surgery import effective_producers, input_producer, keep_input_channels

log = logging.getLogger(__name__)

FAST = "fast"
ALTERNATE = "alternate"
# target modes for whole-model pruning: original-model targets vs. the naive current-model ones
TARGET_ORIGINAL = "original"
TARGET_CURRENT = "current"


@dataclass
class PruneConfig:
    mode: str = FAST
    overall_speedup: Optional[float] = None
    per_layer_keep: Optional[dict] = None
    shallow_deep_ratio: float = 1.5
    branch_ratio: tuple = (2.0, 4.0, 3.0)
    frozen_layers: tuple = ()
    plan: SamplePlan = field(default_factory=lambda: SamplePlan(images=5000, samples_per_image=10, seed=0))
    lasso_factor: float = 1.3
    lasso_max_steps: int = 200
    lasso_tol: float = 1e-10
    lasso_max_passes: int = 100_000
    ridge: float = 0.0
    seed: int = 0
    target: str = TARGET_ORIGINAL
    reconstruct: bool = True
    residual_compensation: bool = True
    holdout: int = 32
    stable_patience: int = 2
    max_inner_iterations: int = 10

    def __post_init__(self):
        if self.mode not in (FAST, ALTERNATE):
            raise ValueError(f"mode must be {FAST!r} or {ALTERNATE!r}")
        if (self.overall_speedup is None) == (self.per_layer_keep is None):
            raise ValueError("set exactly one of overall_speedup / per_layer_keep")
        if self.overall_speedup is not None and self.overall_speedup < 1:
            raise ValueError("overall_speedup must be >= 1")
        if self.shallow_deep_ratio <= 0 or any(r <= 0 for r in self.branch_ratio):
            raise ValueError("policy ratios must be positive")
        if self.target not in (TARGET_ORIGINAL, TARGET_CURRENT):
            raise ValueError(f"unknown target {self.target!r}")
        if self.mode == ALTERNATE and not self.reconstruct:
            raise ValueError("alternate mode always reconstructs")
        self.branch_ratio = tuple(float(r) for r in self.branch_ratio)
        self.frozen_layers = tuple(self.frozen_layers)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        plan = d.pop("plan", None) or {}
        seed = int(d.get("seed", 0))
        d["plan"] = SamplePlan(images=int(plan.get("images", 5000)),
                               samples_per_image=int(plan.get("samples_per_image", 10)),
                               seed=int(plan.get("seed", seed)))
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"invalid config: {exc}") from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["branch_ratio"] = list(self.branch_ratio)
        d["frozen_layers"] = list(self.frozen_layers)
        return d

    def solver_kwargs(self) -> dict:
        return dict(factor=self.lasso_factor, max_steps=self.lasso_max_steps, tol=self.lasso_tol,
                    max_passes=self.lasso_max_passes)


@dataclass
class LayerReport:
    name: str
    c: int
    c_prime: int
    kept: list
    lam: float
    mse_unpruned: float
    mse_masked: float
    mse_reconstructed: float
    wall_time: float
    target: str
    upstream: str
    lambda_trace: list = field(default_factory=list)
    gap: int = 0


@dataclass
class PruneReport:
    layers: list
    flops_before: int
    flops_after: int
    speedup: float
    output_rel_mse: float
    holdout_images: int
    budgets: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _layer_plan(cfg: PruneConfig, ordinal: int) -> SamplePlan:
    seed = int(np.random.SeedSequence([cfg.plan.seed, ordinal]).generate_state(1)[0])
    return SamplePlan(cfg.plan.images, cfg.plan.samples_per_image, seed)


def _masked_error(samples, beta, W) -> float:
    Wm = (np.asarray(W, dtype=np.float64) * beta[None, :, None, None]).reshape(samples.n, -1)
    return relative_error(samples.Y, samples.X @ Wm.T)


def _alternate(samples, W, c_prime, cfg):
    """Alternate LASSO and LSQ at each penalty until ||beta||_0 settles."""
    beta, Wn = renormalize(np.ones(samples.c), W)
    trace = []

    def run_at(lam, beta, Wn):
        history = []
        for _ in range(cfg.max_inner_iterations):
            sel = lasso_solve(channel_responses(samples, Wn), lam, warm_start=beta,
                              tol=cfg.lasso_tol, max_passes=cfg.lasso_max_passes)
            masked_beta, masked_W = sel.beta, Wn
            if sel.nnz == 0:
                return sel.beta, Wn, 0, (masked_beta, masked_W)
            rec = reconstruct(samples, sel.beta, sel.active, cfg.ridge)
            beta, Wn = renormalize(sel.beta, rec.W_prime.reshape(W.shape))
            nnz = int(np.count_nonzero(beta))
            history.append(nnz)
            if len(history) >= cfg.stable_patience and len(set(history[-cfg.stable_patience:])) == 1:
                break
        trace.append((float(lam), nnz))
        return beta, Wn, nnz, (masked_beta, masked_W)

    state = run_at(0.0, beta, Wn)
    if state[2] <= c_prime:
        return state, 0.0, trace
    lmax = lambda_max(channel_responses(samples, state[1]))
    lam = 1e-4 * lmax
    lo, lo_lam, hi, hi_lam = state, 0.0, None, None
    for _ in range(cfg.lasso_max_steps):
        st = run_at(lam, lo[0], lo[1])
        if st[2] <= c_prime:
            hi, hi_lam = st, lam
            break
        lo, lo_lam = st, lam
        lam *= cfg.lasso_factor
    if hi is None:
        raise InfeasibleBudgetError(f"alternate search never reached c'={c_prime}")
    best, best_lam = hi, hi_lam
    a_lam, b_lam = lo_lam, hi_lam
    for _ in range(20):
        if best[2] == c_prime:
            break
        mid = 0.5 * (a_lam + b_lam)
        st = run_at(mid, lo[0], lo[1])
        if st[2] > c_prime:
            a_lam = mid
        else:
            b_lam = mid
            if st[2] > best[2] and st[2] > 0:
                best, best_lam = st, mid
    if best[2] == 0:
        # the path jumped from > c' straight to empty: keep the c' strongest responses
        Wn = lo[1]
        resp = channel_responses(samples, Wn)
        top = np.sort(np.argsort(-np.abs(resp.corr), kind="stable")[:c_prime])
        mask = np.zeros(samples.c)
        mask[top] = 1.0
        rec = reconstruct(samples, mask, top, cfg.ridge)
        beta, Wn2 = renormalize(mask, rec.W_prime.reshape(W.shape))
        best = (beta, Wn2, int(np.count_nonzero(beta)), (mask, Wn))
    return best, best_lam, trace


def prune_layer(model_current: ModelGraph, model_original: ModelGraph, layer: str, c_prime: int,
                cfg: PruneConfig, inputs=None, samples=None, plan: Optional[SamplePlan] = None):
    """Select c' input channels of ``layer`` and refit its weights.

    Returns ``(updated model, LayerReport)``; ``model_current`` is not modified.
    """
    t0 = time.perf_counter()
    model = model_current.copy()
    conv = model.conv(layer)
    c = conv.c
    if c_prime < 1:
        raise ValueError(f"{layer}: c'={c_prime} must be at least 1")
    if samples is None:
        if inputs is None:
            raise ValueError("prune_layer needs calibration inputs or a SampleSet")
        mode = ORIGINAL_MODEL if cfg.target == TARGET_ORIGINAL else SAME_LAYER
        samples = sample_layer(model, model_original, layer, inputs, plan or cfg.plan, mode)
    target = samples.meta.get("mode", "")
    W = conv.weight.astype(np.float64)
    ones = np.ones(c)
    mse_unpruned = _masked_error(samples, ones, W)

    if c_prime >= c:
        log.warning("%s: c'=%d >= c=%d, only refitting", layer, c_prime, c)
        rec = reconstruct(samples, ones, range(c), cfg.ridge)
        after = mse_unpruned
        if cfg.reconstruct and rec.residual_rel < mse_unpruned:
            conv.weight = rec.W_prime.reshape(W.shape).astype(np.float32)
            after = rec.residual_rel
        rep = LayerReport(layer, c, c, list(range(c)), 0.0, mse_unpruned, mse_unpruned, after,
                          time.perf_counter() - t0, target, "none")
        return model, rep

    if cfg.mode == FAST:
        resp = channel_responses(samples, W)
        sel = select_for_sparsity(resp, c_prime, **cfg.solver_kwargs())
        beta, lam, trace, gap = sel.beta.copy(), sel.lam, sel.trace, sel.gap
        if sel.nnz == 0:
            # every response dead or killed: keep the c' strongest correlations
            top = np.sort(np.argsort(-np.abs(resp.corr), kind="stable")[:c_prime])
            beta = np.zeros(c)
            beta[top] = 1.0
        active = [int(i) for i in np.flatnonzero(beta)]
        mse_masked = _masked_error(samples, beta, W)
        if cfg.reconstruct:
            rec = reconstruct(samples, beta, active, cfg.ridge)
            new_w, keep = fold_final_weights(beta, rec.W_prime.reshape(W.shape))
            mse_after = rec.residual_rel
        else:
            new_w, keep = fold_final_weights(beta, W)
            mse_after = mse_masked
    else:
        (beta, Wn, nnz, masked), lam, trace = _alternate(samples, W, c_prime, cfg)
        gap = c_prime - nnz
        mse_masked = _masked_error(samples, masked[0], masked[1])
        new_w, keep = fold_final_weights(beta, Wn)
        mse_after = _masked_error(samples, beta, Wn)

    upstream = keep_input_channels(model, layer, keep, new_w)
    model.validate()
    rep = LayerReport(layer, c, len(keep), keep, float(lam), mse_unpruned, mse_masked, mse_after,
                      time.perf_counter() - t0, target, upstream, [list(t) for t in trace], gap)
    return model, rep


def _branch_weight(position: int, count: int, ratio: tuple) -> float:
    if position == 0:
        return ratio[0]
    if position == count - 1:
        return ratio[-1]
    return ratio[len(ratio) // 2]


def policy_weights(model: ModelGraph, cfg: PruneConfig) -> dict:
    """Relative keep weight per prunable conv.

    Outside residual blocks the first half of the convs (by depth) is the
    shallow tier with weight 1 and the rest is deep with ``shallow_deep_ratio``.
    Inside a block, weights follow the branch position (first/middle/last).
    """
    convs = model.conv_names()
    half = len(convs) / 2.0
    weights = {}
    for ordinal, name in enumerate(convs):
        block = model.enclosing_block(name)
        if block is not None:
            branch = model.block_convs(block)
            weights[name] = _branch_weight(branch.index(name), len(branch), cfg.branch_ratio)
        else:
            weights[name] = 1.0 if ordinal < half else cfg.shallow_deep_ratio
    return weights


def branch_keep_fractions(keep: float, ratio=(2, 4, 3), reference: float = 1.5) -> list:
    """Per-position keep fractions for a residual branch at nominal ``keep``.

    A ratio entry equal to ``reference`` keeps exactly ``keep``; 30% with
    2:4:3 gives 40%, 80%, 60%.
    """
    return [min(1.0, keep * r / reference) for r in ratio]


def prunable_layers(model: ModelGraph, cfg: PruneConfig) -> list:
    """Convs that receive a budget: not frozen and not reading the raw model input."""
    out = []
    for name in model.conv_names():
        if name in cfg.frozen_layers:
            continue
        prod = input_producer(model, name)
        if prod.kind == "blocked" and model.enclosing_block(name) is None and \
                prod.reason == "input is the model input":
            continue
        out.append(name)
    return out


def budget_flops(model: ModelGraph, budgets: dict) -> int:
    """MACs of the model after every conv keeps ``budgets[name]`` input channels."""
    shapes = infer_shapes(model)
    producers = effective_producers(model)
    out_width = {}
    for consumer, producer in producers.items():
        out_width[producer] = budgets.get(consumer, model.conv(consumer).c)
    total = 0
    for name in model.conv_names():
        conv = model.conv(name)
        _, (n, ho, wo) = shapes[name]
        total += conv_macs(out_width.get(name, n), budgets.get(name, conv.c),
                           conv.kernel[0], conv.kernel[1], ho, wo)
    return total


def assign_budgets(model: ModelGraph, cfg: PruneConfig) -> dict:
    """Map every conv to its retained input-channel count c'."""
    convs = model.conv_names()
    full = {name: model.conv(name).c for name in convs}
    if cfg.per_layer_keep is not None:
        budgets = dict(full)
        for name, k in cfg.per_layer_keep.items():
            if name not in full:
                raise KeyError(f"per_layer_keep names unknown conv {name!r}")
            budgets[name] = max(1, min(int(k), full[name]))
        return budgets
    target = count_flops(model).total / cfg.overall_speedup
    layers = prunable_layers(model, cfg)
    weights = policy_weights(model, cfg)

    def at(m):
        b = dict(full)
        for name in layers:
            frac = min(1.0, m * weights[name])
            b[name] = max(1, min(full[name], int(round(frac * full[name]))))
        return b

    hi = 1.0 / min([weights[n] for n in layers], default=1.0)
    if budget_flops(model, full) <= target:
        return full
    if not layers or budget_flops(model, at(0.0)) > target:
        raise InfeasibleBudgetError(f"speed-up {cfg.overall_speedup}x is unreachable even at c'=1")
    lo = 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if budget_flops(model, at(mid)) <= target:
            lo = mid
        else:
            hi = mid
    return at(lo)


def _split_inputs(inputs, holdout: int):
    inputs = np.asarray(inputs, dtype=np.float32)
    n = inputs.shape[0]
    if holdout > 0 and n > holdout:
        return inputs[: n - holdout], inputs[n - holdout:], False
    return inputs, inputs, True


def prune_model(model: ModelGraph, cfg: PruneConfig, inputs) -> tuple:
    """Prune every budgeted conv in depth order; returns ``(pruned, PruneReport)``."""
    notes = []
    if any(isinstance(nd, BatchNorm) for nd in model.nodes):
        model = merge_batchnorm(model)
        notes.append("batchnorm merged into convolutions")
    model.validate()
    original = model.copy()
    current = model.copy()
    calib, held, shared = _split_inputs(inputs, cfg.holdout)
    if shared:
        notes.append("calibration batch too small for a disjoint hold-out; evaluated on all inputs")
    budgets = assign_budgets(model, cfg)
    if cfg.overall_speedup is not None:
        notes.append("depth tiers: first half of convs shallow, second half deep")
    flops_before = count_flops(original).total
    layers = []
    for ordinal, name in enumerate(original.conv_names()):
        if name in cfg.frozen_layers:
            continue
        c = current.conv(name).c
        c_prime = budgets.get(name, c)
        if c_prime == c and cfg.overall_speedup is not None and name not in prunable_layers(original, cfg):
            continue
        plan = _layer_plan(cfg, ordinal)
        block = current.enclosing_block(name)
        samples = None
        if (block is not None and cfg.residual_compensation and cfg.target == TARGET_ORIGINAL
                and residual_last_conv(current, block) == name):
            samples = sample_residual_last(current, original, block, calib, plan)
        current, rep = prune_layer(current, original, name, c_prime, cfg, inputs=calib,
                                   samples=samples, plan=plan)
        log.info("%s: c=%d -> %d, rel mse %.4g -> %.4g", name, rep.c, rep.c_prime,
                 rep.mse_masked, rep.mse_reconstructed)
        layers.append(rep)
    current.validate()
    flops_after = count_flops(current).total
    ref = forward(original, held)
    out = forward(current, held)
    report = PruneReport(
        layers=layers,
        flops_before=flops_before,
        flops_after=flops_after,
        speedup=flops_before / flops_after,
        output_rel_mse=relative_error(ref.astype(np.float64), out.astype(np.float64)),
        holdout_images=int(held.shape[0]),
        budgets=budgets,
        notes=notes,
    )
    return current, report

