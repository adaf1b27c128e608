"""Image tokenizer and the two understanding towers.

The tokenizer is a lossless lookup: token id == cell code, row-major. The
semantic tower is frozen (hand-built features through a fixed random
projection); the spatial tower is an embedding lookup plus a per-cell
positional embedding and is trained with the rest of the model.
"""
from __future__ import annotations

import enum

import numpy as np
import torch

from . import gridworld as gw

CODEBOOK_SIZE = gw.N_CODES
SEMANTIC_DIM = 32
SEMANTIC_SEED = 20240


class InvalidToken(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class FusionMode(str, enum.Enum):
    FULL = "Full"
    NO_SE = "NoSe"
    NO_EN = "NoEn"


def codebook() -> dict:
    """Self-describing codebook/colour map stored in checkpoint headers."""
    entries = []
    for code in range(CODEBOOK_SIZE):
        kind, b, w = gw.decode_cell(code)
        entries.append({
            "id": code,
            "kind": kind,
            "block": None if b is None else gw.COLORS[b],
            "bowl": None if w is None else gw.COLORS[w],
        })
    return {
        "size": CODEBOOK_SIZE,
        "entries": entries,
        "colors": {name: list(rgb) for name, rgb in zip(gw.COLORS, gw.PALETTE)},
        "background": list(gw.BACKGROUND),
    }


def tokenize(state: np.ndarray) -> np.ndarray:
    return np.asarray(state, dtype=np.int64).ravel().copy()


def detokenize(tokens, size: int | None = None) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= CODEBOOK_SIZE):
        bad = tokens[(tokens < 0) | (tokens >= CODEBOOK_SIZE)][0]
        raise InvalidToken(f"token id {int(bad)} outside codebook of size {CODEBOOK_SIZE}")
    size = size or int(round(np.sqrt(tokens.size)))
    if size * size != tokens.size:
        raise DimensionMismatch(f"{tokens.size} tokens do not form a square grid")
    return tokens.reshape(size, size)


# --------------------------------------------------------------------------
# frozen semantic tower


def _cell_contents(raster: np.ndarray, size: int) -> list[tuple[int, int, str, int | None, int | None]]:
    """Recover per-cell objects from pixels by probing the rendered patch layout."""
    p = gw.PIXELS_PER_CELL
    if raster.shape != (size * p, size * p, 3):
        raise DimensionMismatch(f"raster shape {raster.shape} != {(size * p, size * p, 3)}")
    tiles = raster.reshape(size, p, size, p, 3).transpose(0, 2, 1, 3, 4)
    lookup = {tuple(rgb): i for i, rgb in enumerate(gw.PALETTE)}
    out = []
    for r in range(size):
        for c in range(size):
            corner = lookup.get(tuple(tiles[r, c, 0, 0]))
            gap = lookup.get(tuple(tiles[r, c, 1, 1]))
            centre = lookup.get(tuple(tiles[r, c, p // 2, p // 2]))
            if corner is None:
                continue
            if gap is not None:
                out.append((r, c, "block", corner, None))
            elif centre is None:
                out.append((r, c, "bowl", None, corner))
            else:
                out.append((r, c, "block_in_bowl", centre, corner))
    return out


def semantic_features(raster: np.ndarray, size: int = gw.GRID) -> dict[str, np.ndarray]:
    """Unprojected feature blocks: object histogram and per-row/column colour occupancy."""
    C = gw.N_COLORS
    hist = np.zeros((2, C))  # blocks, bowls
    rows = np.zeros((C, size))
    cols = np.zeros((C, size))
    for r, c, kind, b, w in _cell_contents(np.asarray(raster), size):
        for color, slot in ((b, 0), (w, 1)):
            if color is None:
                continue
            hist[slot, color] += 1
            rows[color, r] += 1
            cols[color, c] += 1
    return {"histogram": hist.ravel(), "occupancy": np.concatenate([rows.ravel(), cols.ravel()])}


def _projection(size: int, dim: int = SEMANTIC_DIM) -> np.ndarray:
    n_in = 2 * gw.N_COLORS + 2 * gw.N_COLORS * size
    rng = np.random.default_rng(SEMANTIC_SEED)
    return rng.standard_normal((n_in, dim)) / np.sqrt(n_in)


_PROJECTIONS: dict[int, np.ndarray] = {}


def semantic_encode(raster: np.ndarray, size: int = gw.GRID) -> np.ndarray:
    """Deterministic ``SEMANTIC_DIM`` vector; no trainable parameters."""
    feats = semantic_features(raster, size)
    if size not in _PROJECTIONS:
        _PROJECTIONS[size] = _projection(size)
    x = np.concatenate([feats["histogram"], feats["occupancy"]])
    return x @ _PROJECTIONS[size]


def semantic_encode_state(state: np.ndarray) -> np.ndarray:
    return semantic_encode(gw.render(state), state.shape[0])


# --------------------------------------------------------------------------
# trainable spatial tower and fusion


def spatial_encode(tokens: torch.Tensor, table: torch.Tensor, cell_pos: torch.Tensor) -> torch.Tensor:
    """``(..., N)`` token ids -> ``(..., N, d)``: ``table[token] + cell_pos``."""
    if table.shape[0] != CODEBOOK_SIZE:
        raise DimensionMismatch(f"embedding table has {table.shape[0]} rows, codebook has {CODEBOOK_SIZE}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= table.shape[0]):
        raise InvalidToken("token id outside codebook")
    return table[tokens] + cell_pos


def slot_count(n_cells: int, mode: FusionMode | str) -> int:
    mode = FusionMode(mode)
    return {FusionMode.FULL: n_cells + 1, FusionMode.NO_SE: n_cells, FusionMode.NO_EN: 2}[mode]


def fuse_understanding(sem: torch.Tensor, spat: torch.Tensor, mode: FusionMode | str, sem_proj) -> torch.Tensor:
    """Assemble the image slots fed to the sequence model.

    ``sem`` is ``(B, d_sem)``, ``spat`` is ``(B, N, d)``; ``sem_proj`` is the
    trainable adapter mapping ``d_sem -> d``.
    """
    mode = FusionMode(mode)
    if sem.shape[0] != spat.shape[0]:
        raise DimensionMismatch("semantic and spatial batch sizes differ")
    if mode is FusionMode.NO_SE:
        return spat
    s = sem_proj(sem).unsqueeze(1)
    if s.shape[-1] != spat.shape[-1]:
        raise DimensionMismatch("projected semantic width differs from model width")
    if mode is FusionMode.NO_EN:
        return torch.cat([s, spat.mean(dim=1, keepdim=True)], dim=1)
    return torch.cat([s, spat], dim=1)
