"""Horizontal/vertical bidirectional LSTM refiner over the patch grid.

Four LSTMs read the same input map: left-to-right and right-to-left along
every row, top-to-bottom and bottom-to-top along every column.  Their
hidden states are concatenated per patch (4 * hidden) and projected back to
the embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ops
from .numerics.tensor import Tensor
from .vit_encoder import EmbeddingMap, Params, uniform_weight, zeros

DIRECTIONS = ("h_fwd", "h_bwd", "v_fwd", "v_bwd")


@dataclass(frozen=True)
class HvBilstmConfig:
    e: int = 64
    hidden: int = 32
    seed: int = 0
    residual: bool = False

    def validate(self) -> None:
        if self.hidden < 1 or self.e < 1:
            raise ValueError("hidden and e must be >= 1")


def init_hv_bilstm(config: HvBilstmConfig) -> Params:
    """Gate rows are stacked (input, forget, output, candidate); forget bias 1."""
    config.validate()
    rng = np.random.default_rng([config.seed, 202])
    e, hd = config.e, config.hidden
    p: Params = {}
    for d in DIRECTIONS:
        pre = f"lstm.{d}."
        p[pre + "w_ih"] = uniform_weight(rng, e, (4 * hd, e), pre + "w_ih")
        p[pre + "w_hh"] = uniform_weight(rng, hd, (4 * hd, hd), pre + "w_hh")
        b = zeros((4 * hd,), pre + "b")
        b.data[hd : 2 * hd] = 1.0
        p[pre + "b"] = b
    p["lstm.proj.w"] = uniform_weight(rng, 4 * hd, (4 * hd, e), "lstm.proj.w")
    p["lstm.proj.b"] = zeros((e,), "lstm.proj.b")
    return p


def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM over (n_seq, T, e) from zero state; returns (n_seq, T, hidden)."""
    n, steps, _ = x.shape
    hd = w_hh.shape[1]
    # input contributions for all steps at once, time-major for cheap slicing
    xw = (x @ w_ih.T + b).transpose(1, 0, 2)
    h = Tensor(np.zeros((n, hd)))
    c = Tensor(np.zeros((n, hd)))
    outs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    w_hh_t = w_hh.T
    for t in order:
        gates = xw[t] + h @ w_hh_t
        sig = ops.sigmoid(gates[:, : 3 * hd])
        i, f, o = sig[:, :hd], sig[:, hd : 2 * hd], sig[:, 2 * hd :]
        g = ops.tanh(gates[:, 3 * hd :])
        c = f * c + i * g
        h = o * ops.tanh(c)
        outs[t] = h
    return ops.stack(outs, axis=1)


def refine_values(values: Tensor, rows: int, cols: int, params: Params, config: HvBilstmConfig) -> Tensor:
    """(batch, s, e) -> (batch, s, e)."""
    b, s, e = values.shape
    if s != rows * cols:
        raise ValueError(f"grid {rows}x{cols} does not match {s} embeddings")
    grid = values.reshape(b, rows, cols, e)

    def run(seq: Tensor, name: str, reverse: bool) -> Tensor:
        pre = f"lstm.{name}."
        return lstm_sequence(seq, params[pre + "w_ih"], params[pre + "w_hh"], params[pre + "b"], reverse)

    horiz = grid.reshape(b * rows, cols, e)
    hf = run(horiz, "h_fwd", False).reshape(b, rows, cols, -1)
    hb = run(horiz, "h_bwd", True).reshape(b, rows, cols, -1)
    vert = grid.transpose(0, 2, 1, 3).reshape(b * cols, rows, e)
    vf = run(vert, "v_fwd", False).reshape(b, cols, rows, -1).transpose(0, 2, 1, 3)
    vb = run(vert, "v_bwd", True).reshape(b, cols, rows, -1).transpose(0, 2, 1, 3)

    hidden = ops.concat([hf, hb, vf, vb], axis=-1).reshape(b, s, 4 * config.hidden)
    out = hidden @ params["lstm.proj.w"] + params["lstm.proj.b"]
    if config.residual:
        out = out + values
    return out


def refine(f_in: EmbeddingMap, params: Params, config: HvBilstmConfig) -> EmbeddingMap:
    if f_in.rows is None or f_in.cols is None:
        raise ValueError("embedding map carries no grid geometry")
    values = f_in.values
    single = values.ndim == 2
    if single:
        values = values.reshape(1, *values.shape)
    out = refine_values(values, f_in.rows, f_in.cols, params, config)
    if single:
        out = out.reshape(out.shape[1], out.shape[2])
    return EmbeddingMap(values=out, rows=f_in.rows, cols=f_in.cols)
