"""Quality metrics, latency benchmarking, sweeps, and learning-curve logging.

The image-space FID of the original evaluation protocol is replaced by two
token-space quantities: ``mode_match`` (the output equals some valid
noise-free grid for its caption) and ``bigram_js`` (Jensen-Shannon
divergence between horizontal+vertical token-bigram distributions of
generated vs reference grids, bounded by ln 2). Forward-pass counts are
exact integers taken from the model's instrumentation; wall clock is a
median over repeated runs with warmup excluded.
"""

from __future__ import annotations

import csv
import math
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import data as synth
from . import decoding, masking, model, training
from . import tensor as T
from .decoding import DecodeResult
from .masking import Schedule
from .model import ModelBundle


@dataclass
class MetricReport:
    token_accuracy: float
    exact_match: float
    mode_match: float
    bigram_js: float
    entropy_gap: float
    num_captions: int


@dataclass
class LatencyReport:
    decoder_forward_passes: int
    encoder_forward_passes: int
    wall_clock: float          # seconds, median over repeats
    tokens_per_second: float
    repeats: int = 0


# ---------------------------------------------------------------------------
# bigram JS divergence


def _bigram_counts(grids: list[np.ndarray], height: int, width: int) -> Counter:
    c: Counter = Counter()
    for g in grids:
        a = np.asarray(g).reshape(height, width)
        for pair in zip(a[:, :-1].ravel(), a[:, 1:].ravel()):
            c[("h", int(pair[0]), int(pair[1]))] += 1
        for pair in zip(a[:-1, :].ravel(), a[1:, :].ravel()):
            c[("v", int(pair[0]), int(pair[1]))] += 1
    return c


def bigram_js(generated: list[np.ndarray], reference: list[np.ndarray],
              height: int = 8, width: int = 8) -> float:
    """JS divergence (nats, base-e; <= ln 2) between token-bigram distributions."""
    p = _bigram_counts(generated, height, width)
    q = _bigram_counts(reference, height, width)
    np_, nq = sum(p.values()), sum(q.values())
    js = 0.0
    for key in set(p) | set(q):
        pp = p.get(key, 0) / np_
        qq = q.get(key, 0) / nq
        m = 0.5 * (pp + qq)
        if pp > 0:
            js += 0.5 * pp * math.log(pp / m)
        if qq > 0:
            js += 0.5 * qq * math.log(qq / m)
    return js


# ---------------------------------------------------------------------------
# evaluation


def evaluate(bundle: ModelBundle, decode_fn: Callable[..., DecodeResult],
             test_records: list, K: int = 1, rng: Optional[np.random.Generator] = None,
             scorer: str = "self", height: int = 8, width: int = 8,
             **decode_kwargs) -> MetricReport:
    """Best-of-K decoding per caption, aggregated over the test split."""
    if not test_records:
        raise ValueError("evaluate: empty test corpus")
    rng = rng or np.random.default_rng(0)
    vocab = bundle.config.vocab_image
    tok_acc, exact, mode_hits, gaps = [], [], [], []
    generated, reference = [], []
    for rec in test_records:
        if K == 1:
            out = decode_fn(bundle, rec.caption, rng=rng, **decode_kwargs).tokens
        else:
            sc = None
            if scorer == "oracle":
                sc = lambda tokens, _c=rec.caption: decoding.oracle_score(_c, tokens, height, width, vocab)
            cs = decoding.sample_candidates(bundle, rec.caption, K, decode_fn, rng,
                                            scorer=sc, **decode_kwargs)
            out = cs.best
        generated.append(out)
        reference.append(rec.grid)
        tok_acc.append(float((out == rec.grid).mean()))
        exact.append(float(np.array_equal(out, rec.grid)))
        modes = synth.caption_modes(rec.caption, height, width, vocab)
        mode_hits.append(float(any(np.array_equal(out, m) for m in modes)))
        floor = synth.entropy_floor(rec.caption, height, width, vocab)
        nll = -decoding.oracle_score(rec.caption, out, height, width, vocab)
        gaps.append(nll - floor)
    return MetricReport(
        token_accuracy=float(np.mean(tok_acc)),
        exact_match=float(np.mean(exact)),
        mode_match=float(np.mean(mode_hits)),
        bigram_js=bigram_js(generated, reference, height, width),
        entropy_gap=float(np.mean(gaps)),
        num_captions=len(test_records),
    )


def corruption_correction_rate(bundle: ModelBundle, records: list, n_corrupt: int,
                               rng: np.random.Generator) -> float:
    """Denoise probe: corrupt n_corrupt tokens of the truth, zero MASKs, one
    parallel pass; fraction of corrupted positions whose argmax returns to truth."""
    corrected, total = 0, 0
    with T.no_grad():
        for rec in records:
            y = rec.grid.copy()
            pos = rng.choice(y.shape[0], size=n_corrupt, replace=False)
            y[pos] = (y[pos] + 1 + rng.integers(0, bundle.config.vocab_image - 1,
                                                size=n_corrupt)) % bundle.config.vocab_image
            memory = model.encode(bundle, rec.caption)
            logits = model.decode_parallel(bundle, memory, y[None, :]).data[0]
            pred = logits.argmax(axis=-1)
            corrected += int((pred[pos] == rec.grid[pos]).sum())
            total += n_corrupt
    return corrected / total


def seeded_correction_rate(bundle: ModelBundle, decode_fn: Callable[..., DecodeResult],
                           records: list, n_corrupt: int, rng: np.random.Generator,
                           T_iters: int = 16, **decode_kwargs) -> float:
    """Decode-level denoise probe: start each decode from a state in which
    n_corrupt positions are already revealed with wrong tokens, run the full
    iterative decode, and report the fraction of those positions whose final
    token equals the ground truth.  The freeze decoder can never change a
    revealed token, so its rate is 0 by construction; the revise decoder
    re-predicts revealed values each round and can repair them."""
    corrected, total = 0, 0
    for rec in records:
        n = rec.grid.shape[0]
        pos = rng.choice(n, size=n_corrupt, replace=False)
        y = rec.grid.copy()
        y[pos] = (y[pos] + 1 + rng.integers(0, bundle.config.vocab_image - 1,
                                            size=n_corrupt)) % bundle.config.vocab_image
        revealed = np.zeros(n, dtype=bool)
        revealed[pos] = True
        res = decode_fn(bundle, rec.caption, T_iters=T_iters, rng=rng,
                        seed_state=(y, revealed), **decode_kwargs)
        corrected += int((res.tokens[pos] == rec.grid[pos]).sum())
        total += n_corrupt
    return corrected / total


def mixed_context_val_loss(bundle: ModelBundle, records: list, rng: np.random.Generator,
                           schedule: Schedule = Schedule.LINEAR, batch_size: int = 32) -> float:
    """Validation loss with model-predicted (not ground-truth) visible context,
    i.e. the two-pass mixing protocol regardless of how the bundle was trained."""
    return training.val_loss(bundle, "iter_v2", records, rng, schedule, batch_size)


# ---------------------------------------------------------------------------
# latency


def bench_latency(bundle: ModelBundle, decode_fn: Callable[..., DecodeResult],
                  x: np.ndarray, repeats: int = 5, warmup: int = 2,
                  rng: Optional[np.random.Generator] = None, **decode_kwargs) -> LatencyReport:
    """Single-sequence latency: exact pass counts plus median wall clock."""
    rng = rng or np.random.default_rng(0)
    for _ in range(warmup):
        decode_fn(bundle, x, rng=rng, **decode_kwargs)
    bundle.reset_counters()
    decode_fn(bundle, x, rng=rng, **decode_kwargs)
    dec_passes = bundle.counters["decoder_passes"]
    enc_passes = bundle.counters["encoder_passes"]
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        decode_fn(bundle, x, rng=rng, **decode_kwargs)
        times.append(time.perf_counter() - t0)
    wall = float(np.median(times))
    n = bundle.config.seq_len_target
    return LatencyReport(decoder_forward_passes=dec_passes,
                         encoder_forward_passes=enc_passes,
                         wall_clock=wall,
                         tokens_per_second=n / wall if wall > 0 else float("inf"),
                         repeats=repeats)


# ---------------------------------------------------------------------------
# sweeps


def sweep_iterations(bundle: ModelBundle, test_records: list,
                     T_values=(4, 8, 16, 32), K: int = 1,
                     schedule: Schedule = Schedule.COSINE,
                     rng: Optional[np.random.Generator] = None,
                     decode_fn: Callable = decoding.decode_maskpredict_revise,
                     csv_path=None, height: int = 8, width: int = 8,
                     **decode_kwargs) -> list[dict]:
    """One evaluation + latency row per iteration count."""
    rng = rng or np.random.default_rng(0)
    rows = []
    for T_iters in T_values:
        metrics = evaluate(bundle, decode_fn, test_records, K=K, rng=rng,
                           height=height, width=width,
                           T_iters=T_iters, schedule=schedule, **decode_kwargs)
        lat = bench_latency(bundle, decode_fn, test_records[0].caption,
                            repeats=3, warmup=1, rng=rng,
                            T_iters=T_iters, schedule=schedule, **decode_kwargs)
        rows.append({"T": T_iters, **asdict(metrics),
                     "decoder_forward_passes": lat.decoder_forward_passes,
                     "wall_clock": lat.wall_clock})
    if csv_path:
        write_csv(csv_path, rows)
    return rows


def sweep_schedules(train_records: list, val_records: list, test_records: list,
                    base_config, steps: int = 1500, batch_size: int = 32,
                    regimes=("iter_v1", "iter_v2", "iter_v3"), seed: int = 0,
                    eval_T: int = 16, eval_K: int = 1, csv_path=None,
                    height: int = 8, width: int = 8) -> list[dict]:
    """Short budgeted runs over {regime} x {train schedule}, plus an
    inference-schedule comparison on the trained revise-regime model."""
    rows = []
    trained = {}
    for regime in regimes:
        for sched in (Schedule.LINEAR, Schedule.COSINE):
            cfg = training.TrainConfig(regime=regime, batch_size=batch_size,
                                       total_steps=steps, train_schedule=sched, seed=seed)
            rng = np.random.default_rng(seed)
            bundle = model.init_bundle(base_config, rng, regime=regime)
            tr = training.Trainer(bundle, cfg, train_records, val_records, rng=rng)
            tr.fit()
            vloss = tr.eval_val_loss()
            trained[(regime, sched)] = bundle
            rows.append({"regime": regime, "train_schedule": sched.value,
                         "infer_schedule": "", "val_loss": vloss, "mode_match": ""})
    v3 = trained.get(("iter_v3", Schedule.LINEAR))
    if v3 is not None and test_records:
        for sched in (Schedule.LINEAR, Schedule.COSINE):
            m = evaluate(v3, decoding.decode_maskpredict_revise, test_records,
                         K=eval_K, rng=np.random.default_rng(seed + 1),
                         height=height, width=width,
                         T_iters=eval_T, schedule=sched)
            rows.append({"regime": "iter_v3", "train_schedule": "linear",
                         "infer_schedule": sched.value, "val_loss": "",
                         "mode_match": m.mode_match})
    if csv_path:
        write_csv(csv_path, rows)
    return rows


# ---------------------------------------------------------------------------
# logging helpers


def write_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


class CurveLogger:
    """Appends (step, train loss, val loss, LR, wall clock) rows to a CSV file."""

    HEADER = ["step", "train_loss", "val_loss", "lr", "wall_clock"]

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(self.HEADER)

    def __call__(self, row: dict) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([row.get("step", ""), row.get("train_loss", ""),
                                    row.get("val_loss", ""), row.get("lr", ""),
                                    row.get("wall_clock", "")])
