"""Training regimes and the AdamW loop.

Five regimes share one architecture:

* fully_nar  — all positions masked, loss over all positions, one pass.
* iter_v1    — random mask ratio per example, loss at masked positions.
* iter_v2    — pass 1 (no gradients) fills masked positions with argmax
               predictions to build a mixed context; pass 2 masks the mix
               and trains at the pass-2 masked positions against the
               original targets.
* iter_v3    — pass 1 (no gradients) predicts ALL positions from a masked
               input; pass 2 masks the prediction and trains at ALL
               positions, which is what teaches revision.
* ar         — teacher-forced causal baseline.

Optimizer: global-norm gradient clipping at 4.0, AdamW (beta1=0.9,
beta2=0.96, decoupled weight decay 4.5e-2), cosine LR decay with a 2%
linear warmup.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import masking, model
from . import tensor as T
from .masking import Schedule
from .model import ModelBundle

REGIMES = ("fully_nar", "iter_v1", "iter_v2", "iter_v3", "ar")


@dataclass
class OptConfig:
    peak_lr: float = 3e-4
    total_steps: int = 3000
    warmup_ratio: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.96
    weight_decay: float = 4.5e-2
    clip_norm: float = 4.0


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_bundle(cls, bundle: ModelBundle) -> "OptState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in bundle.param_items()},
            v={k: np.zeros_like(p.data) for k, p in bundle.param_items()},
        )


def lr_at(step: int, cfg: OptConfig) -> float:
    """Closed-form schedule: linear warmup to peak, cosine decay to zero."""
    warm = max(int(round(cfg.warmup_ratio * cfg.total_steps)), 1)
    if step < warm:
        return cfg.peak_lr * (step + 1) / warm
    progress = (step - warm) / max(cfg.total_steps - warm, 1)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def optimizer_update(opt: OptState, bundle: ModelBundle, cfg: OptConfig) -> float:
    """One AdamW step from the gradients sitting on the bundle's parameters."""
    grads = {}
    for name, p in bundle.param_items():
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name}")
        if not np.all(np.isfinite(p.grad)):
            raise T.NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = p.grad
    clip_global_norm(grads, cfg.clip_norm)
    lr = lr_at(opt.step, cfg)
    t = opt.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in bundle.param_items():
        g = grads[name]
        m = opt.m[name]
        v = opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * (mhat / (np.sqrt(vhat) + 1e-8)) + lr * cfg.weight_decay * p.data).astype(p.dtype)
    opt.step = t
    return lr


# ---------------------------------------------------------------------------
# per-regime losses


def _pass1_predictions(bundle: ModelBundle, memory_ids: np.ndarray, y: np.ndarray,
                       rng: np.random.Generator, schedule: Schedule,
                       sampled: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """No-gradient first pass: mask y per example, predict, return (y_masked, argmax)."""
    cfg = bundle.config
    n = cfg.seq_len_target
    y_masked = np.empty_like(y)
    for b in range(y.shape[0]):
        r = masking.sample_mask_ratio(rng, schedule)
        k = masking.ratio_to_count(r, n)
        y_masked[b], _ = masking.apply_mask(y[b], k, rng, cfg.mask_id)
    with T.no_grad():
        memory = model.encode(bundle, memory_ids)
        logits = model.decode_parallel(bundle, memory, y_masked)
    if sampled:
        probs = _softmax_np(logits.data)
        flat = probs.reshape(-1, probs.shape[-1])
        picks = np.array([rng.choice(flat.shape[1], p=row / row.sum()) for row in flat])
        pred = picks.reshape(y.shape)
    else:
        pred = logits.data.argmax(axis=-1)
    return y_masked, pred.astype(y.dtype)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _mask_batch(y: np.ndarray, rng: np.random.Generator, schedule: Schedule,
                mask_id: int, force_ratio: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-example ratio sampling; returns (masked batch, boolean mask)."""
    n = y.shape[1]
    y_masked = np.empty_like(y)
    sel = np.zeros(y.shape, dtype=bool)
    for b in range(y.shape[0]):
        r = force_ratio if force_ratio is not None else masking.sample_mask_ratio(rng, schedule)
        k = masking.ratio_to_count(r, n)
        y_masked[b], plan = masking.apply_mask(y[b], k, rng, mask_id)
        sel[b, plan.positions] = True
    return y_masked, sel


@dataclass
class StepResult:
    loss: float
    lr: float


def _finish_step(bundle, opt, opt_cfg, loss, tp) -> StepResult:
    if not np.isfinite(loss.data):
        raise T.NumericError(f"non-finite training loss {loss.data!r}")
    bundle.zero_grads()
    T.backward(loss, tp)
    lr = optimizer_update(opt, bundle, opt_cfg)
    bundle.step += 1
    return StepResult(loss=float(loss.data), lr=lr)


def step_fully_nar(bundle, x, y, opt, opt_cfg, rng, train_schedule=Schedule.LINEAR,
                   dropout_rng=None) -> StepResult:
    cfg = bundle.config
    y_obs = np.full_like(y, cfg.mask_id)
    with T.tape() as tp:
        memory = model.encode(bundle, x, train=True, rng=dropout_rng)
        logits = model.decode_parallel(bundle, memory, y_obs, train=True, rng=dropout_rng)
        loss = T.cross_entropy(logits, y, np.ones(y.shape, dtype=bool))
    return _finish_step(bundle, opt, opt_cfg, loss, tp)


def step_iterative_v1(bundle, x, y, opt, opt_cfg, rng, train_schedule=Schedule.LINEAR,
                      dropout_rng=None, force_ratio=None) -> StepResult:
    cfg = bundle.config
    y_masked, sel = _mask_batch(y, rng, train_schedule, cfg.mask_id, force_ratio)
    with T.tape() as tp:
        memory = model.encode(bundle, x, train=True, rng=dropout_rng)
        logits = model.decode_parallel(bundle, memory, y_masked, train=True, rng=dropout_rng)
        loss = T.cross_entropy(logits, y, sel)
    return _finish_step(bundle, opt, opt_cfg, loss, tp)


def step_iterative_v2(bundle, x, y, opt, opt_cfg, rng, train_schedule=Schedule.LINEAR,
                      dropout_rng=None, sampled_pass1=False) -> StepResult:
    cfg = bundle.config
    y_masked, pred = _pass1_predictions(bundle, x, y, rng, train_schedule, sampled_pass1)
    # mixed context: ground truth where visible, model prediction where masked
    was_masked = y_masked == cfg.mask_id
    y_mix = np.where(was_masked, pred, y)
    y_obs, sel = _mask_batch(y_mix, rng, train_schedule, cfg.mask_id)
    with T.tape() as tp:
        memory = model.encode(bundle, x, train=True, rng=dropout_rng)
        logits = model.decode_parallel(bundle, memory, y_obs, train=True, rng=dropout_rng)
        # targets stay the original ground truth, even where y_mix was wrong
        loss = T.cross_entropy(logits, y, sel)
    return _finish_step(bundle, opt, opt_cfg, loss, tp)


def step_iterative_v3(bundle, x, y, opt, opt_cfg, rng, train_schedule=Schedule.LINEAR,
                      dropout_rng=None, sampled_pass1=False) -> StepResult:
    cfg = bundle.config
    _, y_pred = _pass1_predictions(bundle, x, y, rng, train_schedule, sampled_pass1)
    y_obs, _ = _mask_batch(y_pred, rng, train_schedule, cfg.mask_id)
    with T.tape() as tp:
        memory = model.encode(bundle, x, train=True, rng=dropout_rng)
        logits = model.decode_parallel(bundle, memory, y_obs, train=True, rng=dropout_rng)
        loss = T.cross_entropy(logits, y, np.ones(y.shape, dtype=bool))
    return _finish_step(bundle, opt, opt_cfg, loss, tp)


def step_autoregressive(bundle, x, y, opt, opt_cfg, rng, train_schedule=Schedule.LINEAR,
                        dropout_rng=None) -> StepResult:
    with T.tape() as tp:
        memory = model.encode(bundle, x, train=True, rng=dropout_rng)
        logits = model.decode_causal_teacher_forced(bundle, memory, y, train=True, rng=dropout_rng)
        loss = T.cross_entropy(logits, y, np.ones(y.shape, dtype=bool))
    return _finish_step(bundle, opt, opt_cfg, loss, tp)


STEP_FNS: dict[str, Callable] = {
    "fully_nar": step_fully_nar,
    "iter_v1": step_iterative_v1,
    "iter_v2": step_iterative_v2,
    "iter_v3": step_iterative_v3,
    "ar": step_autoregressive,
}


# ---------------------------------------------------------------------------
# validation losses (no parameter updates)


def val_loss(bundle: ModelBundle, regime: str, records, rng: np.random.Generator,
             train_schedule=Schedule.LINEAR, batch_size: int = 32) -> float:
    """Regime-matched loss on held-out records, gradient-free."""
    cfg = bundle.config
    losses, weights = [], []
    with T.no_grad():
        for lo in range(0, len(records), batch_size):
            chunk = records[lo:lo + batch_size]
            x = np.stack([r.caption for r in chunk])
            y = np.stack([r.grid for r in chunk])
            if regime == "fully_nar":
                y_in, sel = np.full_like(y, cfg.mask_id), np.ones(y.shape, dtype=bool)
            elif regime == "iter_v1":
                y_in, sel = _mask_batch(y, rng, train_schedule, cfg.mask_id)
            elif regime == "iter_v2":
                y_masked, pred = _pass1_predictions(bundle, x, y, rng, train_schedule)
                y_mix = np.where(y_masked == cfg.mask_id, pred, y)
                y_in, sel = _mask_batch(y_mix, rng, train_schedule, cfg.mask_id)
            elif regime == "iter_v3":
                _, y_pred = _pass1_predictions(bundle, x, y, rng, train_schedule)
                y_in, _ = _mask_batch(y_pred, rng, train_schedule, cfg.mask_id)
                sel = np.ones(y.shape, dtype=bool)
            elif regime == "ar":
                memory = model.encode(bundle, x)
                logits = model.decode_causal_teacher_forced(bundle, memory, y)
                losses.append(float(T.cross_entropy(logits, y, np.ones(y.shape, dtype=bool)).data))
                weights.append(y.size)
                continue
            else:
                raise ValueError(f"unknown regime {regime!r}")
            memory = model.encode(bundle, x)
            logits = model.decode_parallel(bundle, memory, y_in)
            losses.append(float(T.cross_entropy(logits, y, sel).data))
            weights.append(int(np.asarray(sel).sum()))
    return float(np.average(losses, weights=weights))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    regime: str = "iter_v3"
    batch_size: int = 32
    total_steps: int = 3000
    train_schedule: Schedule = Schedule.LINEAR
    opt: OptConfig = field(default_factory=OptConfig)
    eval_interval: int = 100
    log_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        self.opt.total_steps = self.total_steps


class Trainer:
    """Owns the parameters, the optimizer state, and the RNG stream.

    All randomness (batch order, mask sampling, dropout) is drawn from one
    generator whose state rides along in checkpoints, so a resumed run is
    bit-identical to an uninterrupted one.
    """

    def __init__(self, bundle: ModelBundle, cfg: TrainConfig,
                 train_records, val_records=None,
                 opt: Optional[OptState] = None,
                 rng: Optional[np.random.Generator] = None):
        self.bundle = bundle
        self.cfg = cfg
        self.train_records = train_records
        self.val_records = val_records or []
        self.opt = opt or OptState.for_bundle(bundle)
        self.rng = rng or np.random.default_rng(cfg.seed)
        self.step_fn = STEP_FNS[cfg.regime]
        bundle.regime = cfg.regime
        self.curve: list[dict] = []
        self._t0 = time.perf_counter()

    def _next_batch(self):
        idx = self.rng.integers(0, len(self.train_records), size=self.cfg.batch_size)
        x = np.stack([self.train_records[i].caption for i in idx])
        y = np.stack([self.train_records[i].grid for i in idx])
        return x, y

    def train_step(self) -> StepResult:
        x, y = self._next_batch()
        return self.step_fn(self.bundle, x, y, self.opt, self.cfg.opt, self.rng,
                            train_schedule=self.cfg.train_schedule, dropout_rng=self.rng)

    def eval_val_loss(self) -> float:
        # dedicated RNG so evaluation never perturbs the training stream
        eval_rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 7, self.bundle.step]))
        return val_loss(self.bundle, self.cfg.regime, self.val_records, eval_rng,
                        self.cfg.train_schedule, self.cfg.batch_size)

    def fit(self, steps: Optional[int] = None, on_log: Optional[Callable[[dict], None]] = None):
        steps = steps if steps is not None else self.cfg.total_steps - self.bundle.step
        for _ in range(steps):
            res = self.train_step()
            s = self.bundle.step
            if s % self.cfg.log_interval == 0 or s == 1:
                row = {"step": s, "train_loss": res.loss, "lr": res.lr,
                       "wall_clock": time.perf_counter() - self._t0}
                if self.val_records and (s % self.cfg.eval_interval == 0 or s == 1):
                    row["val_loss"] = self.eval_val_loss()
                self.curve.append(row)
                if on_log:
                    on_log(row)
        return self
