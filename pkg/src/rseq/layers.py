"""One layer: LocalRNN, causal multi-head attention, feedforward.

All functions accept either a single sequence ``[T, d]`` or a batch
``[B, T, d]``; per-position work is vectorised across the leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from rseq import numerics as nx
from rseq.errors import ConfigError, DimensionError, UsageError
from rseq.numerics import Rng, Tensor

CELL_GATES = {"vanilla": 1, "gru": 3, "lstm": 4}
LN_EPS = 1e-5


@dataclass
class RnnCellParams:
    """Recurrent cell weights with gates packed column-wise.

    gru gate order is (reset, update, candidate); lstm is (input, forget, cell, output).
    """

    cell_kind: str
    w_ih: Tensor  # [d_in, G*d_h]
    w_hh: Tensor  # [d_h, G*d_h]
    b: Tensor  # [G*d_h]

    def __post_init__(self):
        if self.cell_kind not in CELL_GATES:
            raise ConfigError(f"unknown cell kind {self.cell_kind!r}")
        gates = CELL_GATES[self.cell_kind]
        d_in, width = self.w_ih.shape
        d_h = width // gates
        if (width != gates * d_h or self.w_hh.shape != (d_h, gates * d_h)
                or self.b.shape != (gates * d_h,)):
            raise DimensionError(
                f"{self.cell_kind} cell weights do not conform: w_ih {self.w_ih.shape}, "
                f"w_hh {self.w_hh.shape}, b {self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_ih", self.w_ih
        yield "w_hh", self.w_hh
        yield "b", self.b


@dataclass
class AttentionParams:
    w_q: Tensor  # [k, d_model, d_head], one slice per head
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # [k*d_head, d_model]

    def __post_init__(self):
        k, d_model, d_head = self.w_q.shape
        if k * d_head != d_model:
            raise DimensionError(f"{k} heads of width {d_head} do not add up to d_model {d_model}")
        for w in (self.w_k, self.w_v):
            if w.shape != self.w_q.shape:
                raise DimensionError(f"projection shape {w.shape} != {self.w_q.shape}")
        if self.w_o.shape != (d_model, d_model):
            raise DimensionError(f"output projection {self.w_o.shape} != {(d_model, d_model)}")

    @property
    def num_heads(self) -> int:
        return self.w_q.shape[0]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "w_q", self.w_q
        yield "w_k", self.w_k
        yield "w_v", self.w_v
        yield "w_o", self.w_o


@dataclass
class LayerParams:
    rnn: RnnCellParams
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_rnn_gain: Tensor
    ln_rnn_bias: Tensor
    ln_attn_gain: Tensor
    ln_attn_bias: Tensor
    ln_ffn_gain: Tensor
    ln_ffn_bias: Tensor
    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window size must be >= 1, got {self.window}")
        d = self.d_model
        if self.rnn.w_ih.shape[0] != d or self.rnn.hidden_size != d:
            raise DimensionError("LocalRNN input and hidden widths must both equal d_model")
        if self.w1.shape[0] != d or self.w2.shape != (self.w1.shape[1], d):
            raise DimensionError(f"feedforward shapes {self.w1.shape}/{self.w2.shape} vs d_model {d}")

    @property
    def d_model(self) -> int:
        return self.attn.w_o.shape[1]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.rnn.named_parameters():
            yield f"rnn.{name}", t
        for name, t in self.attn.named_parameters():
            yield f"attn.{name}", t
        for name in ("w1", "b1", "w2", "b2"):
            yield f"ffn.{name}", getattr(self, name)
        for stage in ("rnn", "attn", "ffn"):
            yield f"ln_{stage}.gain", getattr(self, f"ln_{stage}_gain")
            yield f"ln_{stage}.bias", getattr(self, f"ln_{stage}_bias")


def _uniform(rng: Rng, shape, fan_in: int) -> Tensor:
    a = 1.0 / math.sqrt(fan_in)
    return nx.parameter(rng.uniform(-a, a, shape))


def init_rnn_cell(rng: Rng, d_in: int, d_h: int, cell_kind: str = "gru") -> RnnCellParams:
    if cell_kind not in CELL_GATES:
        raise ConfigError(f"unknown cell kind {cell_kind!r}; expected one of {sorted(CELL_GATES)}")
    g = CELL_GATES[cell_kind]
    return RnnCellParams(cell_kind, _uniform(rng, (d_in, g * d_h), d_in),
                         _uniform(rng, (d_h, g * d_h), d_h), nx.zeros(g * d_h, requires_grad=True))


def init_layer(rng: Rng, d_model: int, num_heads: int, d_ff: int, window: int = 7,
               cell_kind: str = "gru") -> LayerParams:
    if num_heads < 1 or d_model % num_heads:
        raise ConfigError(f"num_heads={num_heads} must divide d_model={d_model}")
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    d_head = d_model // num_heads
    proj = lambda: _uniform(rng, (num_heads, d_model, d_head), d_model)  # noqa: E731
    attn = AttentionParams(proj(), proj(), proj(), _uniform(rng, (d_model, d_model), d_model))
    ones = lambda: nx.ones(d_model, requires_grad=True)  # noqa: E731
    zeros = lambda: nx.zeros(d_model, requires_grad=True)  # noqa: E731
    return LayerParams(
        rnn=init_rnn_cell(rng, d_model, d_model, cell_kind),
        attn=attn,
        w1=_uniform(rng, (d_model, d_ff), d_model),
        b1=nx.zeros(d_ff, requires_grad=True),
        w2=_uniform(rng, (d_ff, d_model), d_ff),
        b2=zeros(),
        ln_rnn_gain=ones(), ln_rnn_bias=zeros(),
        ln_attn_gain=ones(), ln_attn_bias=zeros(),
        ln_ffn_gain=ones(), ln_ffn_bias=zeros(),
        window=window,
    )


# -- LocalRNN -----------------------------------------------------------------

def pad_left(x: Tensor, window: int) -> Tensor:
    """Prepend ``window - 1`` zero positions along the time axis."""
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    return nx.pad_rows(x, window - 1)


def _cell_update(p: RnnCellParams, xw: Tensor, h_prev: Tensor | None, c_prev: Tensor | None):
    """Apply one step given the already-projected input ``xw = x @ w_ih``.

    ``h_prev=None`` stands for the zero state and skips the recurrent matmul.
    """
    d = p.hidden_size
    hw = None if h_prev is None else nx.matmul(h_prev, p.w_hh)
    if p.cell_kind == "vanilla":
        pre = xw + p.b if hw is None else xw + hw + p.b
        return nx.tanh(pre), None

    if p.cell_kind == "gru":
        xb = xw + p.b
        if hw is None:
            z = nx.sigmoid(xb[..., d:2 * d])
            n = nx.tanh(xb[..., 2 * d:])
            return n - z * n, None
        rz = nx.sigmoid(xb[..., :2 * d] + hw[..., :2 * d])
        r, z = rz[..., :d], rz[..., d:]
        n = nx.tanh(xb[..., 2 * d:] + r * hw[..., 2 * d:])
        return n + z * (h_prev - n), None

    gates = xw + p.b if hw is None else xw + hw + p.b
    ifo = nx.sigmoid(nx.concat([gates[..., :2 * d], gates[..., 3 * d:]], axis=-1))
    i, f, o = ifo[..., :d], ifo[..., d:2 * d], ifo[..., 2 * d:]
    g = nx.tanh(gates[..., 2 * d:3 * d])
    c = i * g if c_prev is None else f * c_prev + i * g
    return o * nx.tanh(c), c


def rnn_cell_step(p: RnnCellParams, x_t, h_prev, c_prev=None):
    """One recurrence step. Returns ``(h_t, c_t)``; ``c_t`` is None except for lstm."""
    if p.cell_kind == "lstm" and c_prev is None:
        raise UsageError("lstm step needs the previous cell state c_prev")
    if p.cell_kind != "lstm" and c_prev is not None:
        raise UsageError(f"{p.cell_kind} cell has no cell state; c_prev must be None")
    x_t, h_prev = nx.as_tensor(x_t), nx.as_tensor(h_prev)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t, h_prev = x_t.reshape(1, -1), h_prev.reshape(1, -1)
        if c_prev is not None:
            c_prev = nx.as_tensor(c_prev).reshape(1, -1)
    h, c = _cell_update(p, nx.matmul(x_t, p.w_ih), h_prev, c_prev)
    if squeeze:
        h = h.reshape(-1)
        c = None if c is None else c.reshape(-1)
    return h, c


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def local_rnn(cell: RnnCellParams, x: Tensor, window: int) -> Tensor:
    """Run ``cell`` from the zero state over every length-``window`` slice ending at each position.

    All T windows advance together: step ``j`` feeds padded position ``t + j``
    to window ``t``, so the loop is over the window length, never over T.
    Recorded as one tape node whose backward runs truncated BPTT per window.
    """
    x = nx.as_tensor(x)
    if window < 1:
        raise ConfigError(f"window size must be >= 1, got {window}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"local_rnn needs at least one position, got shape {x.shape}")
    if x.shape[-1] != cell.w_ih.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != cell input width {cell.w_ih.shape[0]}")
    lead, (T, d_in) = x.shape[:-2], x.shape[-2:]
    d = cell.hidden_size
    xp = np.pad(x.data.reshape(-1, T, d_in), ((0, 0), (window - 1, 0), (0, 0)))
    xw = xp @ cell.w_ih.data + cell.b.data  # [N, T+M-1, G*d]
    w_hh = cell.w_hh.data
    kind = cell.cell_kind
    steps = []
    h = c = None
    for j in range(window):
        a = xw[:, j:j + T]
        hw = None if h is None else h @ w_hh
        if kind == "vanilla":
            h_new = np.tanh(a if hw is None else a + hw)
            steps.append((h, h_new))
        elif kind == "gru":
            if hw is None:
                r = None
                z = _sig(a[..., d:2 * d])
                n = np.tanh(a[..., 2 * d:])
                h_new = n - z * n
            else:
                rz = _sig(a[..., :2 * d] + hw[..., :2 * d])
                r, z = rz[..., :d], rz[..., d:]
                n = np.tanh(a[..., 2 * d:] + r * hw[..., 2 * d:])
                h_new = n + z * (h - n)
            steps.append((h, r, z, n, hw))
        else:
            pre = a if hw is None else a + hw
            i, f, o = _sig(pre[..., :d]), _sig(pre[..., d:2 * d]), _sig(pre[..., 3 * d:])
            g = np.tanh(pre[..., 2 * d:3 * d])
            c_new = i * g if c is None else f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            steps.append((h, c, i, f, g, o, tc))
            c = c_new
        h = h_new
    return nx.record("local_rnn", h.reshape(*lead, T, d), (x, cell.w_ih, cell.w_hh, cell.b),
                     kind=kind, window=window, xp=xp, steps=steps)


@nx.backward_rule("local_rnn")
def _local_rnn_bw(gout, node):
    x, w_ih, w_hh, b = node.inputs
    s = node.saved
    kind, window, xp, steps = s["kind"], s["window"], s["xp"], s["steps"]
    N, P, d_in = xp.shape
    T = P - window + 1
    d = w_hh.shape[0]
    wt = w_hh.data.T
    dxw = np.zeros((N, P, w_ih.shape[1]), dtype=gout.dtype)
    dw_hh = np.zeros_like(w_hh.data)
    dh = gout.reshape(N, T, d)
    dc = None
    for j in range(window - 1, -1, -1):
        if kind == "vanilla":
            h_prev, h_new = steps[j]
            da = dh * (1.0 - h_new * h_new)
            dhw = da
            dxw[:, j:j + T] += da
        elif kind == "gru":
            h_prev, r, z, n, hw = steps[j]
            if h_prev is None:
                dn = dh * (1.0 - z)
                dz = -dh * n
            else:
                dn = dh * (1.0 - z)
                dz = dh * (h_prev - n)
            dn_pre = dn * (1.0 - n * n)
            dz_pre = dz * z * (1.0 - z)
            blk = dxw[:, j:j + T]
            blk[..., d:2 * d] += dz_pre
            blk[..., 2 * d:] += dn_pre
            if h_prev is not None:
                dr_pre = dn_pre * hw[..., 2 * d:] * r * (1.0 - r)
                blk[..., :d] += dr_pre
                dhw = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
                direct = dh * z
        else:
            h_prev, c_prev, i, f, g, o, tc = steps[j]
            dct = dh * o * (1.0 - tc * tc) if dc is None else dc + dh * o * (1.0 - tc * tc)
            d_o = dh * tc * o * (1.0 - o)
            d_i = dct * g * i * (1.0 - i)
            d_g = dct * i * (1.0 - g * g)
            d_f = (dct * c_prev * f * (1.0 - f)) if c_prev is not None else np.zeros_like(d_i)
            dhw = np.concatenate([d_i, d_f, d_g, d_o], axis=-1)
            dxw[:, j:j + T] += dhw
            dc = None if c_prev is None else dct * f
        if h_prev is None:
            break
        flat_h = h_prev.reshape(-1, d)
        dw_hh += flat_h.T @ dhw.reshape(-1, dhw.shape[-1])
        dh_prev = dhw @ wt
        dh = dh_prev + direct if kind == "gru" else dh_prev
    flat = dxw.reshape(-1, dxw.shape[-1])
    dw_ih = xp.reshape(-1, d_in).T @ flat
    db = flat.sum(axis=0)
    dx = (dxw[:, window - 1:] @ w_ih.data.T).reshape(x.shape) if x.requires_grad else None
    return dx, dw_ih, dw_hh, db


def local_rnn_forward(p: LayerParams, x: Tensor) -> Tensor:
    return local_rnn(p.rnn, x, p.window)


# -- attention ------------------------------------------------------------------

def scaled_dot_attention(q, keys, values) -> Tensor:
    """Single-query attention: softmax(<q, k_j>/sqrt(d_k)) weighted sum of ``values``."""
    q, keys, values = nx.as_tensor(q), nx.as_tensor(keys), nx.as_tensor(values)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise UsageError(f"attention needs at least one key, got keys of shape {keys.shape}")
    scores = nx.matmul(q.reshape(1, -1), keys.T) * (1.0 / math.sqrt(keys.shape[1]))
    return nx.matmul(nx.softmax(scores), values).reshape(-1)


def multi_head_attention(p: AttentionParams, h: Tensor) -> Tensor:
    """Causal multi-head attention; position t attends to positions 1..t inclusive."""
    h = nx.as_tensor(h)
    single = h.ndim == 2
    if single:
        h = h.reshape(1, *h.shape)
    B, T, d = h.shape
    k = p.num_heads
    d_head = d // k

    def project(w):
        # [k, d, d_head] -> one [d, k*d_head] matmul, then split heads: [B, k, T, d_head]
        flat = w.transpose(1, 0, 2).reshape(d, k * d_head)
        return nx.matmul(h, flat).reshape(B, T, k, d_head).transpose(0, 2, 1, 3)

    q, key, v = project(p.w_q), project(p.w_k), project(p.w_v)
    scores = nx.matmul(q, key.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_head))
    heads = nx.matmul(nx.softmax(scores, causal=True), v)
    u = nx.matmul(heads.transpose(0, 2, 1, 3).reshape(B, T, k * d_head), p.w_o)
    return u.reshape(T, d) if single else u


def feed_forward(p: LayerParams, u: Tensor) -> Tensor:
    return nx.matmul(nx.relu(nx.matmul(u, p.w1) + p.b1), p.w2) + p.b2


# -- composition ----------------------------------------------------------------

def layer_forward(p: LayerParams, x: Tensor, dropout_rate: float = 0.0, training: bool = False,
                  rng: Rng | None = None) -> Tensor:
    """LocalRNN -> add&norm -> attention -> add&norm -> feedforward -> add&norm."""
    x = nx.as_tensor(x)
    active = training and dropout_rate > 0.0
    if active and rng is None:
        raise UsageError("dropout during training needs an Rng")

    def drop(t):
        return nx.dropout(t, dropout_rate, rng) if active else t

    h = local_rnn_forward(p, x)
    h_hat = nx.layer_norm(drop(h) + x, p.ln_rnn_gain, p.ln_rnn_bias, LN_EPS)
    u = multi_head_attention(p.attn, h_hat)
    u_hat = nx.layer_norm(drop(u) + h_hat, p.ln_attn_gain, p.ln_attn_bias, LN_EPS)
    m = feed_forward(p, u_hat)
    return nx.layer_norm(drop(m) + u_hat, p.ln_ffn_gain, p.ln_ffn_bias, LN_EPS)
