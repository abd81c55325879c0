"""Inference: iterative mask-predict decoders, the AR rollout, candidate sampling.

Both iterative decoders run exactly T decoder passes after a single encoder
pass. Each iteration chooses tokens at masked positions, scores them by
confidence = log p(chosen) + temp(t) * Gumbel noise with
temp(t) = gumbel_temp * (1 - t/T), and reveals the top-scoring positions
until the kept count reaches keep_count(t). Revealed positions get
p_obs = 1.0 exactly.

* freeze variant: revealed tokens are immutable in value and membership.
* revise variant: every iteration re-predicts ALL positions; revealed
  positions keep membership (never re-masked) but their values follow the
  fresh argmax/sample.

Stored confidences for still-masked positions map the score into [0, 1)
through the logistic function 1 / (1 + exp(-c)); ranking uses the raw
score, which is order-equivalent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import data as synth
from . import masking, model
from . import tensor as T
from .masking import Schedule, keep_counts
from .model import ModelBundle

FREEZE_REGIMES = ("iter_v1", "iter_v2")
REVISE_REGIMES = ("iter_v3",)


@dataclass
class DecodeState:
    y_obs: np.ndarray       # tokens, MASK id where unrevealed
    p_obs: np.ndarray       # confidence in [0, 1]; exactly 1.0 once revealed
    revealed: np.ndarray    # bool membership
    t: int
    T: int
    schedule: Schedule


@dataclass
class DecodeResult:
    tokens: np.ndarray
    reveal_trace: list[int] = field(default_factory=list)   # revealed count after each iteration
    iterations: int = 0
    reveal_step: Optional[np.ndarray] = None                # iteration at which each position was revealed
    confidence_trace: list[np.ndarray] = field(default_factory=list)
    token_trace: list[np.ndarray] = field(default_factory=list)  # y_obs snapshot after each iteration


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))


def _choose_tokens(logits: np.ndarray, rng: Optional[np.random.Generator],
                   sampling: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-position token choice and its log-probability. logits: (n, V)."""
    logp = logits - _logsumexp(logits)
    if sampling == "greedy":
        picks = logits.argmax(axis=-1)
    elif sampling == "sample":
        g = _gumbel(rng, logits.shape)
        picks = (logp + g).argmax(axis=-1)  # Gumbel-max categorical sample, temp 1
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    chosen_logp = np.take_along_axis(logp, picks[:, None], axis=-1)[:, 0]
    return picks, chosen_logp


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _check_regime(bundle: ModelBundle, expected: tuple[str, ...], decoder: str):
    if bundle.regime not in expected and bundle.regime != "untrained":
        warnings.warn(
            f"{decoder} decoding a checkpoint trained under regime "
            f"{bundle.regime!r} (expected one of {expected}); proceeding",
            stacklevel=3)


def _init_state(n: int, T_iters: int, schedule: Schedule, mask_id: int,
                seed_state=None) -> DecodeState:
    y_obs = np.full(n, mask_id, dtype=np.int64)
    p_obs = np.zeros(n)
    revealed = np.zeros(n, dtype=bool)
    if seed_state is not None:
        # test hook: start from a partially revealed (possibly corrupted) state
        y_init, revealed_init = seed_state
        revealed = np.asarray(revealed_init, dtype=bool).copy()
        y_obs[revealed] = np.asarray(y_init)[revealed]
        p_obs[revealed] = 1.0
    return DecodeState(y_obs=y_obs, p_obs=p_obs, revealed=revealed,
                       t=0, T=T_iters, schedule=schedule)


def _decode_iterative(bundle: ModelBundle, x: np.ndarray, T_iters: int,
                      schedule: Schedule, rng: Optional[np.random.Generator],
                      gumbel_temp: float, sampling: str, revise: bool,
                      seed_state=None) -> DecodeResult:
    cfg = bundle.config
    n = cfg.seq_len_target
    if T_iters < 1:
        raise ValueError(f"iteration count T={T_iters} must be >= 1")
    st = _init_state(n, T_iters, schedule, cfg.mask_id, seed_state)
    counts = keep_counts(T_iters, n, schedule)
    result = DecodeResult(tokens=st.y_obs, reveal_step=np.full(n, -1, dtype=np.int64))
    result.reveal_step[st.revealed] = 0

    with T.no_grad():
        memory = model.encode(bundle, x)
        for t in range(1, T_iters + 1):
            st.t = t
            logits = model.decode_parallel(bundle, memory, st.y_obs).data[0]
            picks, chosen_logp = _choose_tokens(logits, rng, sampling)

            if revise:
                # refresh values at revealed positions; membership untouched
                st.y_obs[st.revealed] = picks[st.revealed]

            temp = gumbel_temp * (1.0 - t / T_iters)
            score = chosen_logp.copy()
            if temp > 0.0:
                score += temp * _gumbel(rng, score.shape)

            target = counts[t - 1]
            need = target - int(st.revealed.sum())
            masked_idx = np.flatnonzero(~st.revealed)
            if need > 0:
                order = masked_idx[np.argsort(-score[masked_idx], kind="stable")]
                newly = order[:need]
                st.y_obs[newly] = picks[newly]
                st.revealed[newly] = True
                st.p_obs[newly] = 1.0
                result.reveal_step[newly] = t
            still_masked = np.flatnonzero(~st.revealed)
            st.p_obs[still_masked] = np.minimum(_logistic(score[still_masked]), 1.0 - 1e-9)
            result.reveal_trace.append(int(st.revealed.sum()))
            result.confidence_trace.append(st.p_obs.copy())
            result.token_trace.append(st.y_obs.copy())

    result.tokens = st.y_obs
    result.iterations = T_iters
    return result


def decode_maskpredict_freeze(bundle: ModelBundle, x: np.ndarray, T_iters: int = 16,
                              schedule: Schedule = Schedule.COSINE,
                              rng: Optional[np.random.Generator] = None,
                              gumbel_temp: float = 0.0, sampling: str = "greedy",
                              seed_state=None) -> DecodeResult:
    """Iterative decode where revealed tokens never change."""
    _check_regime(bundle, FREEZE_REGIMES, "freeze")
    return _decode_iterative(bundle, x, T_iters, schedule, rng, gumbel_temp,
                             sampling, revise=False, seed_state=seed_state)


def decode_maskpredict_revise(bundle: ModelBundle, x: np.ndarray, T_iters: int = 16,
                              schedule: Schedule = Schedule.COSINE,
                              rng: Optional[np.random.Generator] = None,
                              gumbel_temp: float = 0.0, sampling: str = "greedy",
                              seed_state=None) -> DecodeResult:
    """Iterative decode that re-predicts every position each round."""
    _check_regime(bundle, REVISE_REGIMES, "revise")
    return _decode_iterative(bundle, x, T_iters, schedule, rng, gumbel_temp,
                             sampling, revise=True, seed_state=seed_state)


def decode_autoregressive(bundle: ModelBundle, x: np.ndarray,
                          sampling: str = "greedy", temperature: float = 1.0,
                          rng: Optional[np.random.Generator] = None) -> DecodeResult:
    """Token-by-token rollout: exactly n decoder passes."""
    cfg = bundle.config
    n = cfg.seq_len_target
    out = np.empty(n, dtype=np.int64)
    with T.no_grad():
        memory = model.encode(bundle, x)
        for i in range(n):
            logits = model.decode_causal_step(bundle, memory, out[:i])
            if sampling == "greedy":
                out[i] = int(logits.argmax())
            elif sampling == "temperature":
                scaled = logits / max(temperature, 1e-12)
                logp = scaled - _logsumexp(scaled[None, :])[0]
                out[i] = int((logp + _gumbel(rng, logp.shape)).argmax())
            else:
                raise ValueError(f"unknown sampling mode {sampling!r}")
    return DecodeResult(tokens=out, reveal_trace=list(range(1, n + 1)), iterations=n)


# ---------------------------------------------------------------------------
# candidate sampling and reranking


@dataclass
class CandidateSet:
    candidates: list[np.ndarray]
    scores: list[float]
    selected: int

    @property
    def best(self) -> np.ndarray:
        return self.candidates[self.selected]


def self_likelihood_score(bundle: ModelBundle, x: np.ndarray, tokens: np.ndarray) -> float:
    """Total log-probability of a mask-free candidate under one parallel pass."""
    with T.no_grad():
        memory = model.encode(bundle, x)
        logits = model.decode_parallel(bundle, memory, tokens[None, :]).data[0]
    logp = logits - _logsumexp(logits)
    return float(np.take_along_axis(logp, tokens[:, None], axis=-1).sum())


def oracle_score(caption: np.ndarray, tokens: np.ndarray, height=8, width=8, vocab=512) -> float:
    """Generator caption-conditional log-likelihood (synthetic corpora only)."""
    return synth.caption_log_likelihood(caption, tokens, height, width, vocab)


def sample_candidates(bundle: ModelBundle, x: np.ndarray, K: int,
                      decode_fn: Callable[..., DecodeResult],
                      rng: np.random.Generator,
                      scorer: Optional[Callable[[np.ndarray], float]] = None,
                      **decode_kwargs) -> CandidateSet:
    """K independent decodes on spawned RNG streams; argmax-score selection."""
    if K < 1:
        raise ValueError(f"candidate count K={K} must be >= 1")
    if scorer is None:
        scorer = lambda tokens: self_likelihood_score(bundle, x, tokens)
    streams = rng.spawn(K)
    candidates = [decode_fn(bundle, x, rng=streams[i], **decode_kwargs).tokens for i in range(K)]
    scores = [scorer(c) for c in candidates]
    return CandidateSet(candidates=candidates, scores=scores,
                        selected=int(np.argmax(scores)))
