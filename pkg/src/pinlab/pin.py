"""The positional insert: fixed sinusoid table, trainable refiner, additive insert."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class PinConfig:
    out_dim: int
    d_model: int = 64
    depth: int = 2
    hidden: int | None = None  # default 4 * d_model
    variant: str = "sinusoidal"  # sinusoidal | learned-S
    active: bool = True

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the sinusoid table")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.variant not in ("sinusoidal", "learned-S"):
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def hidden_width(self) -> int:
        return self.hidden if self.hidden is not None else 4 * self.d_model


def build_sinusoid(n_positions: int, d_model: int) -> np.ndarray:
    """S[i, 2k] = sin(i / 10000^(2k/d)), S[i, 2k+1] = cos(i / 10000^(2k/d)).

    Positions index row-major flattened patches (1-D layout).
    """
    if d_model % 2 != 0:
        raise ValueError("d_model must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    k = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * k / d_model)
    table = np.zeros((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(np.float32)


@dataclass
class PinBlock:
    fc_w: Tensor
    fc_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    gate_w: Tensor
    val_w: Tensor


@dataclass
class PinParams:
    """S table plus the refiner network; theta = every trainable tensor."""

    config: PinConfig
    n_positions: int
    s_table: Tensor
    blocks: list[PinBlock] = field(default_factory=list)
    final_w: Tensor = None
    final_b: Tensor = None

    def named(self) -> list[tuple[str, Tensor]]:
        out = [("pin/s_table", self.s_table)]
        for i, b in enumerate(self.blocks):
            out += [(f"pin/block{i}.fc_w", b.fc_w), (f"pin/block{i}.fc_b", b.fc_b),
                    (f"pin/block{i}.ln_g", b.ln_g), (f"pin/block{i}.ln_b", b.ln_b),
                    (f"pin/block{i}.gate_w", b.gate_w), (f"pin/block{i}.val_w", b.val_w)]
        out += [("pin/final_w", self.final_w), ("pin/final_b", self.final_b)]
        return out

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named() if t.requires_grad]


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
             dtype=np.float32) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


def init_pin(config: PinConfig, n_positions: int, seed: int,
             dtype=np.float32) -> PinParams:
    """Build S and the refiner; the final FC starts at zero so pi starts at zero."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF1)))
    h = config.hidden_width
    s = build_sinusoid(n_positions, config.d_model).astype(dtype)
    s_table = Tensor(s, requires_grad=(config.variant == "learned-S"))
    blocks = []
    in_dim = config.d_model
    for _ in range(config.depth):
        blocks.append(PinBlock(
            fc_w=_uniform(rng, (in_dim, h), in_dim, dtype),
            fc_b=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
            ln_g=Tensor(np.ones(h, dtype=dtype), requires_grad=True),
            ln_b=Tensor(np.zeros(h, dtype=dtype), requires_grad=True),
            gate_w=_uniform(rng, (h, 2 * h), h, dtype),
            val_w=_uniform(rng, (h, 2 * h), h, dtype),
        ))
        in_dim = 2 * h
    final_w = Tensor(np.zeros((2 * h, config.out_dim), dtype=dtype), requires_grad=True)
    final_b = Tensor(np.zeros(config.out_dim, dtype=dtype), requires_grad=True)
    return PinParams(config=config, n_positions=n_positions, s_table=s_table,
                     blocks=blocks, final_w=final_w, final_b=final_b)


def count_parameters(d_model: int, depth: int, hidden: int, out_dim: int,
                     learned_s: bool = False, n_positions: int = 0) -> int:
    """Analytic trainable-parameter count for the refiner structure."""
    h = hidden
    total = 0
    in_dim = d_model
    for _ in range(depth):
        total += in_dim * h + h      # FC
        total += 2 * h               # LayerNorm gain + bias
        total += 2 * (h * 2 * h)     # SwiGLU gate + value
        in_dim = 2 * h
    total += in_dim * out_dim + out_dim  # final FC
    if learned_s:
        total += n_positions * d_model
    return total


def pin_forward(pin: PinParams) -> Tensor:
    """pi = refiner(S); input-agnostic, shape [n_positions, out_dim]."""
    x = pin.s_table
    for b in pin.blocks:
        x = ad.add(ad.matmul(x, b.fc_w), b.fc_b)
        x = ad.layer_norm(x, b.ln_g, b.ln_b)
        x = ad.swiglu(x, b.gate_w, b.val_w)
    return ad.add(ad.matmul(x, pin.final_w), pin.final_b)


def insert(x_v: Tensor, pi: Tensor, active: bool = True) -> Tensor:
    """x_v + pi when active; untouched features when deactivated."""
    if not active:
        return x_v
    if x_v.shape[-2:] != pi.shape:
        raise ValueError(f"insert shape mismatch: {x_v.shape} vs {pi.shape}")
    return ad.add(x_v, pi)


def similarity_map(pi: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Pairwise cosine similarity of the insert rows."""
    pi = np.asarray(pi, dtype=np.float64)
    norms = np.sqrt((pi * pi).sum(axis=1)) + eps
    unit = pi / norms[:, None]
    return unit @ unit.T


def save_raw(path: str, array: np.ndarray) -> None:
    """Raw 32-bit little-endian export with a one-line text shape header."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in arr.shape) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def load_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        shape = tuple(int(v) for v in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape)


def adjacency_gap(features: np.ndarray) -> float:
    """Mean cosine similarity of 4-adjacent patch pairs minus far pairs.

    Far pairs are those at grid (Chebyshev) distance >= half the grid side.
    Requires a square patch grid.
    """
    n = features.shape[0]
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError("adjacency_gap needs a square patch grid")
    sims = similarity_map(features)
    rows, cols = np.divmod(np.arange(n), g)
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    adjacent = (dr + dc) == 1
    far = np.maximum(dr, dc) >= (g // 2)
    return float(sims[adjacent].mean() - sims[far].mean())
