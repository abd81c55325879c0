"""Synthetic conditional token-grid corpus with controlled multimodality.

Each record pairs a short caption with an h*w grid of image tokens. The
caption pins the pattern family, orientation, period, palette and noise
level; a latent variable (stripe phase, block seed, boundary offset) is
deliberately left out of the caption, so every caption admits several
valid grids ("modes"). A model that factorizes positions independently
given only the caption mixes those modes and cannot reach the joint
conditional entropy floor; that floor is computable in closed form here
and serves as the convergence oracle.

Corpus files are line-oriented text: one record per line with named,
tab-separated fields (caption / grid / prov), greppable and diffable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

FAMILIES = ("stripes", "checker", "blocks", "two-region")
ORIENTATIONS = ("h", "v")
PERIODS = (2, 4, 8)
NOISE_LEVELS = (0.0, 0.05, 0.1)
NUM_PALETTES = 16
BLOCK_SEEDS = 8
TWO_REGION_OFFSETS = (2, 3, 4, 5)

# caption token layout (text vocab, default 64 ids):
#   family          -> 0..3
#   orientation     -> 4..5
#   period index    -> 6..8
#   noise index     -> 9..11
#   palette id      -> 12..27
_FAMILY_BASE = 0
_ORIENT_BASE = 4
_PERIOD_BASE = 6
_NOISE_BASE = 9
_PALETTE_BASE = 12
TEXT_VOCAB_MIN = _PALETTE_BASE + NUM_PALETTES
CAPTION_LEN = 5


@dataclass
class GridSpec:
    """Public caption fields plus the hidden latent for one record."""

    family: str
    orientation: str
    period: int
    palette_id: int
    noise: float
    latent: int
    height: int = 8
    width: int = 8
    vocab: int = 512

    @property
    def n(self) -> int:
        return self.height * self.width


@dataclass
class CorpusRecord:
    caption: np.ndarray   # text-vocab token ids, length CAPTION_LEN
    grid: np.ndarray      # image-token ids, length n
    provenance: dict = field(default_factory=dict)


def palette_tokens(palette_id: int, size: int, vocab: int) -> np.ndarray:
    """Deterministic palette table: distinct token ids per palette slot."""
    base = (37 * palette_id + 5) % vocab
    cols = (base + 11 * np.arange(size)) % vocab
    return cols.astype(np.int64)


def encode_caption(spec: GridSpec) -> np.ndarray:
    fam = FAMILIES.index(spec.family)
    ori = ORIENTATIONS.index(spec.orientation)
    per = PERIODS.index(spec.period)
    noi = NOISE_LEVELS.index(spec.noise)
    return np.array([
        _FAMILY_BASE + fam,
        _ORIENT_BASE + ori,
        _PERIOD_BASE + per,
        _NOISE_BASE + noi,
        _PALETTE_BASE + spec.palette_id,
    ], dtype=np.int64)


def decode_caption(caption: np.ndarray) -> dict:
    """Recover public fields from caption ids (the oracle's entry point)."""
    c = np.asarray(caption)
    return {
        "family": FAMILIES[int(c[0]) - _FAMILY_BASE],
        "orientation": ORIENTATIONS[int(c[1]) - _ORIENT_BASE],
        "period": PERIODS[int(c[2]) - _PERIOD_BASE],
        "noise": NOISE_LEVELS[int(c[3]) - _NOISE_BASE],
        "palette_id": int(c[4]) - _PALETTE_BASE,
    }


def _pattern_grid(spec: GridSpec, latent: int) -> np.ndarray:
    """Noise-free grid for one latent value."""
    h, w, p = spec.height, spec.width, spec.period
    pal = palette_tokens(spec.palette_id, min(p, 4), spec.vocab)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    axis = rows if spec.orientation == "h" else cols

    if spec.family == "stripes":
        g = pal[((axis + latent) % p) % len(pal)]
    elif spec.family == "checker":
        # latent rotates the palette so every period gives >= 2 modes
        s = max(p // 2, 1)
        g = pal[((rows // s + cols // s) + latent) % len(pal)]
    elif spec.family == "blocks":
        # four quadrant blocks colored by a latent-seeded derived stream
        block = (rows // (h // 2)) * 2 + (cols // (w // 2))
        brng = np.random.default_rng(1000003 * latent + 17 * spec.palette_id)
        colors = pal[brng.integers(0, len(pal), size=4)]
        g = colors[block]
    elif spec.family == "two-region":
        off = TWO_REGION_OFFSETS[latent % len(TWO_REGION_OFFSETS)]
        g = np.where(axis < off, pal[0], pal[1 % len(pal)])
    else:
        raise ValueError(f"unknown pattern family {spec.family!r}")
    return g.reshape(-1).astype(np.int64)


def latent_space(family: str, period: int) -> range:
    if family in ("stripes", "checker"):
        return range(period)
    if family == "blocks":
        return range(BLOCK_SEEDS)
    if family == "two-region":
        return range(len(TWO_REGION_OFFSETS))
    raise ValueError(f"unknown pattern family {family!r}")


def caption_modes(caption: np.ndarray, height: int = 8, width: int = 8,
                  vocab: int = 512) -> list[np.ndarray]:
    """All distinct noise-free grids consistent with a caption."""
    f = decode_caption(caption)
    spec = GridSpec(family=f["family"], orientation=f["orientation"], period=f["period"],
                    palette_id=f["palette_id"], noise=f["noise"], latent=0,
                    height=height, width=width, vocab=vocab)
    seen: dict[bytes, np.ndarray] = {}
    for lat in latent_space(f["family"], f["period"]):
        g = _pattern_grid(spec, lat)
        seen.setdefault(g.tobytes(), g)
    return list(seen.values())


def _mode_probabilities(caption: np.ndarray, height: int = 8, width: int = 8,
                        vocab: int = 512) -> tuple[list[np.ndarray], np.ndarray]:
    f = decode_caption(caption)
    spec = GridSpec(family=f["family"], orientation=f["orientation"], period=f["period"],
                    palette_id=f["palette_id"], noise=f["noise"], latent=0,
                    height=height, width=width, vocab=vocab)
    lats = list(latent_space(f["family"], f["period"]))
    grids: dict[bytes, np.ndarray] = {}
    counts: dict[bytes, int] = {}
    for lat in lats:
        g = _pattern_grid(spec, lat)
        key = g.tobytes()
        grids.setdefault(key, g)
        counts[key] = counts.get(key, 0) + 1
    modes = list(grids.values())
    probs = np.array([counts[m.tobytes()] for m in modes], dtype=float) / len(lats)
    return modes, probs


def flip_entropy_per_position(noise: float, vocab: int) -> float:
    """Entropy in nats of one token under flip noise epsilon with uniform replacement."""
    if noise == 0.0:
        return 0.0
    p_keep = (1.0 - noise) + noise / vocab
    p_other = noise / vocab
    return -(p_keep * math.log(p_keep) + (vocab - 1) * p_other * math.log(p_other))


def entropy_floor(caption: np.ndarray, height: int = 8, width: int = 8,
                  vocab: int = 512) -> float:
    """Total conditional entropy H(Y|X) in nats for one caption.

    Mode term (uniform latent, merged duplicates) plus n independent
    flip-noise terms. Exact at noise 0; for noise > 0 the cross-mode
    overlap correction is negligible at V=512 and is ignored.
    """
    modes, probs = _mode_probabilities(caption, height, width, vocab)
    f = decode_caption(caption)
    h_modes = float(-(probs * np.log(probs)).sum())
    return h_modes + height * width * flip_entropy_per_position(f["noise"], vocab)


def caption_log_likelihood(caption: np.ndarray, grid: np.ndarray,
                           height: int = 8, width: int = 8, vocab: int = 512) -> float:
    """log P(grid | caption) under the generator; the oracle reranker score."""
    modes, probs = _mode_probabilities(caption, height, width, vocab)
    f = decode_caption(caption)
    eps = f["noise"]
    p_keep = (1.0 - eps) + eps / vocab
    p_other = max(eps / vocab, 1e-300)
    total = 0.0
    terms = []
    for m, pr in zip(modes, probs):
        agree = int((m == grid).sum())
        disagree = m.size - agree
        ll = math.log(pr) + agree * math.log(p_keep) + disagree * math.log(p_other)
        terms.append(ll)
    mx = max(terms)
    return mx + math.log(sum(math.exp(t - mx) for t in terms))


# ---------------------------------------------------------------------------
# generation


def generate_record(rng: np.random.Generator, height: int = 8, width: int = 8,
                    vocab: int = 512, families: tuple[str, ...] = FAMILIES,
                    noise_levels: tuple[float, ...] = NOISE_LEVELS) -> CorpusRecord:
    family = families[rng.integers(0, len(families))]
    orientation = ORIENTATIONS[rng.integers(0, len(ORIENTATIONS))]
    period = PERIODS[rng.integers(0, len(PERIODS))]
    noise = noise_levels[rng.integers(0, len(noise_levels))]
    palette_id = int(rng.integers(0, NUM_PALETTES))
    lats = latent_space(family, period)
    latent = int(rng.integers(lats.start, lats.stop))
    spec = GridSpec(family=family, orientation=orientation, period=period,
                    palette_id=palette_id, noise=noise, latent=latent,
                    height=height, width=width, vocab=vocab)
    grid = _pattern_grid(spec, latent)
    if noise > 0.0:
        flip = rng.random(grid.shape) < noise
        grid = np.where(flip, rng.integers(0, vocab, size=grid.shape), grid)
    caption = encode_caption(spec)
    prov = {"family": family, "orientation": orientation, "period": period,
            "palette_id": palette_id, "noise": noise, "latent": latent,
            "height": height, "width": width, "vocab": vocab}
    return CorpusRecord(caption=caption, grid=grid.astype(np.int64), provenance=prov)


def generate_corpus(master_seed: int, count: int, start_index: int = 0, **kwargs) -> list[CorpusRecord]:
    """Records with per-index derived seeds: order-independent and reproducible."""
    out = []
    for i in range(start_index, start_index + count):
        rng = np.random.default_rng(np.random.SeedSequence([master_seed, i]))
        out.append(generate_record(rng, **kwargs))
    return out


# ---------------------------------------------------------------------------
# corpus file I/O


class CorpusFormatError(ValueError):
    pass


def write_corpus(records: Iterable[CorpusRecord], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for rec in records:
            cap = " ".join(str(int(v)) for v in rec.caption)
            grd = " ".join(str(int(v)) for v in rec.grid)
            prov = json.dumps(rec.provenance, sort_keys=True)
            f.write(f"caption={cap}\tgrid={grd}\tprov={prov}\n")


def read_corpus(path, expected_n: int | None = None) -> Iterator[CorpusRecord]:
    """Stream records back; malformed lines raise with their line number."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                fields = dict(seg.split("=", 1) for seg in line.split("\t"))
                caption = np.array([int(v) for v in fields["caption"].split()], dtype=np.int64)
                grid = np.array([int(v) for v in fields["grid"].split()], dtype=np.int64)
                prov = json.loads(fields["prov"])
            except (ValueError, KeyError, json.JSONDecodeError) as e:
                raise CorpusFormatError(f"{path}:{lineno}: malformed record ({e})") from e
            if expected_n is not None and grid.shape[0] != expected_n:
                raise CorpusFormatError(
                    f"{path}:{lineno}: grid length {grid.shape[0]} != expected {expected_n}")
            yield CorpusRecord(caption=caption, grid=grid, provenance=prov)


def load_corpus(path, expected_n: int | None = None) -> list[CorpusRecord]:
    return list(read_corpus(path, expected_n))
