# tta_sim.py
"""
Desk-scale online test-time adaptation.

A seeded regression stream with scheduled distribution shifts is fed batch by
batch to a toy model: a frozen random tanh feature extractor followed by a
linear head trained on the ridge objective. Each step fingerprints the batch,
asks a merge plugin for the model to start from, takes gradient steps on the
head, and appends the new (fingerprint, checkpoint) pair to the codebook.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from codebook import Codebook
from fingerprint import compute_fingerprint, make_projection, pool_features
from helpers import ConfigError, NumericalError, ParameterError, StorageError, make_rng, require_finite
from merging import SignPolicy
from scoring import ScoringConfig
from tensor_store import Checkpoint, Tensor

logger = logging.getLogger(__name__)

SHIFT_KINDS = ("mean_shift", "covariance_rotation", "label_noise_burst", "feature_dropout")
LABEL_MODES = ("ground_truth", "pseudo_label")
EVAL_MODELS = ("merged", "adapted")
TRACE_FIELDS = ("step", "pre_merge_loss", "post_merge_loss", "evaluated_loss", "selected_steps", "weights")

# Sub-stream ids for make_rng so every random draw has its own generator.
_WORLD, _SEGMENT, _STREAM, _EXTRACTOR, _SOURCE, _PSEUDO, _SELECTION = range(7)


@dataclass(frozen=True)
class ShiftSpec:
    start_step: int
    kind: str
    magnitude: float


DEFAULT_SCHEDULE = (
    ShiftSpec(10, "mean_shift", 3.0),
    ShiftSpec(20, "covariance_rotation", 0.8),
    ShiftSpec(30, "feature_dropout", 0.5),
)


@dataclass(frozen=True)
class StreamConfig:
    d_raw: int = 32
    d: int = 64
    batch_size: int = 32
    n_steps: int = 40
    shift_schedule: tuple = DEFAULT_SCHEDULE
    label_noise_sigma: float = 0.8
    seed: int = 0

    def validate(self):
        for name in ("d_raw", "d", "batch_size", "n_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (math.isfinite(self.label_noise_sigma) and self.label_noise_sigma >= 0):
            raise ConfigError(f"label_noise_sigma must be finite and >= 0, got {self.label_noise_sigma}")
        previous = None
        for spec in self.shift_schedule:
            if spec.kind not in SHIFT_KINDS:
                raise ConfigError(f"unknown shift kind {spec.kind!r}; expected one of {SHIFT_KINDS}")
            if not 0 <= spec.start_step < self.n_steps:
                raise ConfigError(f"shift start {spec.start_step} outside [0, {self.n_steps})")
            if previous is not None and spec.start_step <= previous:
                raise ConfigError("shift starts must be strictly increasing")
            if not math.isfinite(spec.magnitude):
                raise ConfigError(f"shift magnitude must be finite, got {spec.magnitude}")
            if spec.kind == "feature_dropout" and not 0.0 <= spec.magnitude <= 1.0:
                raise ConfigError(f"feature_dropout magnitude is a fraction in [0, 1], got {spec.magnitude}")
            if spec.kind == "label_noise_burst" and spec.magnitude < 0:
                raise ConfigError("label_noise_burst magnitude must be >= 0")
            previous = spec.start_step
        return self

    @property
    def first_shift(self):
        return self.shift_schedule[0].start_step if self.shift_schedule else None


@dataclass(frozen=True)
class SimConfig:
    d_prime: int = 16
    projection_seed: Optional[int] = None
    lr: float = 0.4
    n_grad_steps: int = 200
    head_lambda: float = 1e-3
    fit_bias: bool = True
    label_mode: str = "ground_truth"
    pseudo_label_noise: float = 0.1
    eval_model: str = "merged"
    source_samples: int = 512
    max_entries: Optional[int] = None

    def __post_init__(self):
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.eval_model not in EVAL_MODELS:
            raise ConfigError(f"eval_model must be one of {EVAL_MODELS}, got {self.eval_model!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if int(self.n_grad_steps) < 0:
            raise ConfigError(f"n_grad_steps must be >= 0, got {self.n_grad_steps}")


#############################
# Stream
#############################

def _world(cfg):
    rng = make_rng(cfg.seed, _WORLD)
    scales = np.sqrt(np.linspace(2.0, 0.25, cfg.d_raw))
    beta = rng.standard_normal(cfg.d_raw)
    return scales, beta


def _segment_transform(cfg, index, spec):
    rng = make_rng(cfg.seed, _SEGMENT, index)
    if spec.kind == "mean_shift":
        offset = np.zeros(cfg.d_raw)
        offset[: max(1, cfg.d_raw // 4)] = spec.magnitude
        return {"offset": offset}
    if spec.kind == "covariance_rotation":
        a = rng.standard_normal((cfg.d_raw, cfg.d_raw))
        skew = a - a.T
        norm = np.linalg.norm(skew, 2)
        skew = skew / norm if norm > 0 else skew
        return {"rotation": scipy.linalg.expm(spec.magnitude * skew)}
    if spec.kind == "feature_dropout":
        mask = np.ones(cfg.d_raw)
        dropped = rng.choice(cfg.d_raw, size=int(round(spec.magnitude * cfg.d_raw)), replace=False)
        mask[dropped] = 0.0
        return {"mask": mask}
    return {"extra_noise": spec.magnitude}


def active_segment(cfg, index):
    current = None
    for seg, spec in enumerate(cfg.shift_schedule):
        if spec.start_step <= index:
            current = seg
    return current


def _label(x_clean, beta):
    return x_clean @ beta / np.sqrt(x_clean.shape[1])


def _apply_shifts(x, transforms):
    """Offsets and rotations compose in schedule order; dropout masks multiply."""
    mask = None
    for t in transforms:
        if "offset" in t:
            x = x + t["offset"]
        if "rotation" in t:
            x = x @ t["rotation"].T
        if "mask" in t:
            mask = t["mask"] if mask is None else mask * t["mask"]
    return x, mask


def generate_stream(cfg):
    """
    Return [(inputs, labels), ...], one pair per step; a pure function of cfg.

    Input shifts accumulate: a segment sees its own transform on top of every
    earlier one. A label-noise burst lasts until the next scheduled shift.
    Labels come from the clean inputs, so dropout only hides what the model sees.
    """
    cfg.validate()
    scales, beta = _world(cfg)
    transforms = [_segment_transform(cfg, i, spec) for i, spec in enumerate(cfg.shift_schedule)]
    rng = make_rng(cfg.seed, _STREAM)
    batches = []
    for index in range(cfg.n_steps):
        x = rng.standard_normal((cfg.batch_size, cfg.d_raw)) * scales
        noise = rng.standard_normal(cfg.batch_size)
        seg = active_segment(cfg, index)
        started = transforms[: seg + 1] if seg is not None else []
        x, mask = _apply_shifts(x, started)
        burst = started[-1].get("extra_noise", 0.0) if started else 0.0
        y = _label(x, beta) + (cfg.label_noise_sigma + burst) * noise
        observed = x * mask if mask is not None else x
        batches.append((observed, y))
    return batches


#############################
# Toy model
#############################

@dataclass(frozen=True, eq=False)
class ToyModel:
    extractor_weight: np.ndarray
    extractor_bias: np.ndarray
    head: Checkpoint

    @property
    def d(self):
        return self.extractor_weight.shape[0]

    @property
    def d_raw(self):
        return self.extractor_weight.shape[1]

    def features(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        pre = x @ self.extractor_weight.T / np.sqrt(self.d_raw) + self.extractor_bias
        return np.tanh(pre) / np.sqrt(self.d)

    def with_head(self, head):
        return replace(self, head=head)


def head_checkpoint(w, b, step):
    return Checkpoint(step, {"w": Tensor((len(w),), w), "b": Tensor.scalar(b)})


def head_params(head):
    return head["w"].data.astype(np.float64), float(head["b"].data[0])


def predict(head, Z):
    w, b = head_params(head)
    return Z @ w + b


def mse(head, Z, y):
    return float(np.mean((predict(head, Z) - y) ** 2))


def ridge_objective(w, b, Z, y, lam):
    r = Z @ w + b - y
    return float(np.mean(r ** 2) + lam * np.dot(w, w))


def ridge_gradient(w, b, Z, y, lam):
    n = Z.shape[0]
    r = Z @ w + b - y
    return 2.0 / n * (Z.T @ r) + 2.0 * lam * w, 2.0 / n * r.sum()


def ridge_solution(Z, y, lam, fit_bias=True):
    """Closed-form minimizer of the ridge objective (bias unregularized)."""
    n, d = Z.shape
    if fit_bias:
        z_mean, y_mean = Z.mean(axis=0), y.mean()
        Zc, yc = Z - z_mean, y - y_mean
    else:
        Zc, yc = Z, y
    w = scipy.linalg.solve(Zc.T @ Zc / n + lam * np.eye(d), Zc.T @ yc / n, assume_a="pos")
    b = float(y_mean - z_mean @ w) if fit_bias else 0.0
    return w, b


def make_toy_model(cfg, sim=None):
    """Frozen extractor plus a source head fitted on the unshifted distribution."""
    sim = sim or SimConfig()
    cfg.validate()
    rng = make_rng(cfg.seed, _EXTRACTOR)
    weight = rng.standard_normal((cfg.d, cfg.d_raw))
    bias = 0.5 * rng.standard_normal(cfg.d)
    weight.setflags(write=False)
    bias.setflags(write=False)
    model = ToyModel(weight, bias, head_checkpoint(np.zeros(cfg.d), 0.0, 0))

    scales, beta = _world(cfg)
    src = make_rng(cfg.seed, _SOURCE)
    x = src.standard_normal((sim.source_samples, cfg.d_raw)) * scales
    y = _label(x, beta) + cfg.label_noise_sigma * src.standard_normal(sim.source_samples)
    w, b = ridge_solution(model.features(x), y, sim.head_lambda, fit_bias=sim.fit_bias)
    return model.with_head(head_checkpoint(w, b, 0))


def adapt_step(model, batch, n_grad_steps, lr, *, ridge_lambda=1e-3, fit_bias=True, step=None):
    """Gradient descent on the head only; the extractor is never touched."""
    if not lr > 0:
        raise ParameterError(f"lr must be > 0, got {lr}")
    if int(n_grad_steps) < 0:
        raise ParameterError(f"n_grad_steps must be >= 0, got {n_grad_steps}")
    x, y = batch
    Z = model.features(require_finite(x, "batch inputs"))
    y = require_finite(y, "batch labels").reshape(-1)
    w, b = head_params(model.head)
    for i in range(int(n_grad_steps)):
        gw, gb = ridge_gradient(w, b, Z, y, ridge_lambda)
        w = w - lr * gw
        if fit_bias:
            b = b - lr * gb
        loss = ridge_objective(w, b, Z, y, ridge_lambda)
        if not math.isfinite(loss) or np.max(np.abs(w)) > 1e30 or abs(b) > 1e30:
            raise NumericalError(f"adaptation diverged at gradient step {i + 1} (lr={lr}); use a smaller lr")
    return head_checkpoint(w, b, model.head.step if step is None else step)


#############################
# Adaptation loop
#############################

@dataclass(frozen=True)
class StepRecord:
    step: int
    pre_merge_loss: float
    post_merge_loss: float
    evaluated_loss: float
    selected_steps: tuple
    weights: tuple
    fingerprint: tuple
    merged: Checkpoint = field(repr=False)

    def to_json(self):
        return json.dumps({
            "step": self.step,
            "pre_merge_loss": self.pre_merge_loss,
            "post_merge_loss": self.post_merge_loss,
            "evaluated_loss": self.evaluated_loss,
            "selected_steps": list(self.selected_steps),
            "weights": list(self.weights),
        })


@dataclass
class AdaptationTrace:
    method: str
    records: list
    codebook: Codebook

    def mean_loss(self, after_step=0):
        """Mean evaluated loss over records whose batch index is >= after_step."""
        losses = [r.evaluated_loss for r in self.records if r.step - 1 >= after_step]
        return float(np.mean(losses)) if losses else float("nan")


def post_shift_mean_loss(trace, cfg):
    return trace.mean_loss(cfg.first_shift or 0)


@dataclass
class SimState:
    """Mutable per-run state handed to merge plugins."""
    model: ToyModel
    source: Checkpoint
    latest: Checkpoint
    codebook: Codebook
    scoring: ScoringConfig
    policy: SignPolicy
    sim: SimConfig
    selection_rng: np.random.Generator
    ema: Optional[Checkpoint] = None
    index: int = 0


def run_method(cfg, method, scoring=None, policy=None, sim=None):
    from plugin_registry import plugin_registry

    scoring = scoring or ScoringConfig()
    policy = policy or SignPolicy()
    sim = sim or SimConfig()
    plugin = plugin_registry.get(method)
    if plugin is None or "sim" not in plugin.platforms:
        raise ParameterError(f"unknown simulator method {method!r}")

    batches = generate_stream(cfg)
    model = make_toy_model(cfg, sim)
    seed = cfg.seed if sim.projection_seed is None else sim.projection_seed
    projection = make_projection(cfg.d, sim.d_prime, seed)
    state = SimState(
        model=model,
        source=model.head,
        latest=model.head,
        codebook=Codebook(sim.d_prime, max_entries=sim.max_entries),
        scoring=scoring,
        policy=policy,
        sim=sim,
        selection_rng=make_rng(cfg.seed, _SELECTION),
    )
    pseudo_rng = make_rng(cfg.seed, _PSEUDO)
    plugin.sim_start(state)
    logger.info(f"Simulating {method} for {cfg.n_steps} steps (seed {cfg.seed})")

    records = []
    for index, (x, y) in enumerate(batches):
        step = index + 1
        state.index = index
        Z = model.features(x)
        pooled = pool_features(Z)
        if index == 0:
            # Source anchor: first batch's fingerprint keyed to the source head.
            state.codebook.append(compute_fingerprint(pooled, projection, 0), model.head)
        fp = compute_fingerprint(pooled, projection, step)

        selected, weights, merged = plugin.sim_merge(state, Z)
        pre = mse(state.latest, Z, y)
        post = mse(merged, Z, y)

        if plugin.adapts:
            targets = y
            if sim.label_mode == "pseudo_label":
                targets = predict(merged, Z) + sim.pseudo_label_noise * pseudo_rng.standard_normal(len(y))
            start = merged if plugin.start_from == "merged" else state.latest
            adapted = adapt_step(
                model.with_head(start), (x, targets), sim.n_grad_steps, sim.lr,
                ridge_lambda=sim.head_lambda, fit_bias=sim.fit_bias, step=step,
            )
        else:
            adapted = state.latest
        state.codebook.append(fp, adapted)
        state.latest = adapted
        plugin.sim_update(state, adapted)

        evaluated = post if sim.eval_model == "merged" else mse(adapted, Z, y)
        records.append(StepRecord(
            step=step,
            pre_merge_loss=pre,
            post_merge_loss=post,
            evaluated_loss=evaluated,
            selected_steps=tuple(int(s) for s in selected),
            weights=tuple(float(w) for w in weights),
            fingerprint=tuple(float(v) for v in fp.values),
            merged=merged,
        ))
        logger.debug(f"[{method}] step {step}: pre={pre:.4f} post={post:.4f} selected={list(selected)}")

    logger.info(f"Finished {method}: mean loss {np.mean([r.evaluated_loss for r in records]):.4f}")
    return AdaptationTrace(method=method, records=records, codebook=state.codebook)


def run_codemerge(cfg, scoring=None, policy=None, sim=None):
    return run_method(cfg, "codemerge", scoring=scoring, policy=policy, sim=sim)


def run_baseline(cfg, method, scoring=None, sim=None):
    if method == "codemerge":
        raise ParameterError("codemerge is not a baseline; use run_codemerge")
    return run_method(cfg, method, scoring=scoring, sim=sim)


def write_trace(trace, path):
    header = {"format": "codemerge-trace", "version": 1, "method": trace.method, "fields": list(TRACE_FIELDS)}
    lines = [json.dumps(header)] + [r.to_json() for r in trace.records]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise StorageError(f"could not write trace: {e.strerror or e}", path=path)
    logger.info(f"Wrote {len(trace.records)} trace records to {path}")
