"""A small pre-norm transformer encoder over spectrogram patches, with a
projection head, a masked-reconstruction pretraining path, per-group
freezing, and exact hand-written gradients.

Everything runs in float64 numpy; there is no autodiff framework anywhere.
Each primitive is a forward function returning ``(out, cache)`` paired with
a backward function taking ``(d_out, cache)``; the encoder's backward walks
the recorded caches in reverse.  Checkpoints are a single file: one JSON
header line (config, parameter names/shapes, dtype, stage, step) followed by
the raw little-endian parameter blobs in header order.

Parameter groups (the unit of freezing and per-layer learning rates):
``embed`` (patch projection + positional embeddings), ``block0..block{L-1}``,
``head`` (projection MLP), ``mae`` (mask token + reconstruction head).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .data import Fbank
from .errors import CorruptionError, NumericalError, StateError

__all__ = [
    "EncoderConfig",
    "EncoderState",
    "TrainStage",
    "init_state",
    "forward",
    "backward",
    "set_trainable",
    "mae_pretrain_step",
    "save_checkpoint",
    "load_checkpoint",
    "params_snapshot",
]

_GELU_C0 = np.sqrt(2.0 / np.pi)
_GELU_C1 = 0.044715
_LN_EPS = 1e-6
_MLP_RATIO = 4


class TrainStage(str, Enum):
    ALL = "all"
    HEAD_ONLY = "head_only"
    TOP_HALF = "top_half"


@dataclass
class EncoderConfig:
    """Architecture of the encoder and its projection head.

    ``input_t``/``input_f`` pin the spectrogram grid the learned positional
    embeddings are allocated for; inputs must match exactly.
    """

    patch_t: int = 8
    patch_f: int = 8
    depth: int = 4
    dim: int = 32
    heads: int = 4
    head_dims: tuple[int, ...] = (64, 32)
    input_t: int = 64
    input_f: int = 8

    def __post_init__(self) -> None:
        self.head_dims = tuple(int(h) for h in self.head_dims)
        if self.depth < 2:
            raise ValueError("depth must be >= 2 so a top half exists")
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.input_t % self.patch_t != 0 or self.input_f % self.patch_f != 0:
            raise ValueError("input grid must be divisible by the patch size")
        if not self.head_dims:
            raise ValueError("head_dims must list at least the output width")

    @property
    def n_tokens(self) -> int:
        return (self.input_t // self.patch_t) * (self.input_f // self.patch_f)

    @property
    def patch_dim(self) -> int:
        return self.patch_t * self.patch_f

    @property
    def out_dim(self) -> int:
        return self.head_dims[-1]


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; checkpoint blob order."""
    d, pd, hidden = cfg.dim, cfg.patch_dim, _MLP_RATIO * cfg.dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.patch.W", (pd, d)),
        ("embed.patch.b", (d,)),
        ("embed.pos", (cfg.n_tokens, d)),
    ]
    for i in range(cfg.depth):
        p = f"block{i}"
        shapes += [
            (f"{p}.ln1.g", (d,)), (f"{p}.ln1.b", (d,)),
            (f"{p}.attn.Wq", (d, d)), (f"{p}.attn.bq", (d,)),
            (f"{p}.attn.Wk", (d, d)), (f"{p}.attn.bk", (d,)),
            (f"{p}.attn.Wv", (d, d)), (f"{p}.attn.bv", (d,)),
            (f"{p}.attn.Wo", (d, d)), (f"{p}.attn.bo", (d,)),
            (f"{p}.ln2.g", (d,)), (f"{p}.ln2.b", (d,)),
            (f"{p}.mlp.W1", (d, hidden)), (f"{p}.mlp.b1", (hidden,)),
            (f"{p}.mlp.W2", (hidden, d)), (f"{p}.mlp.b2", (d,)),
        ]
    widths = (d,) + cfg.head_dims
    for li in range(len(cfg.head_dims)):
        shapes += [
            (f"head.{li}.W", (widths[li], widths[li + 1])),
            (f"head.{li}.b", (widths[li + 1],)),
        ]
    shapes += [
        ("mae.mask_token", (d,)),
        ("mae.recon.W", (d, pd)),
        ("mae.recon.b", (pd,)),
    ]
    return shapes


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class EncoderState:
    """Parameters plus trainability flags and pipeline bookkeeping."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    stage: str = "init"
    step: int = 0
    _cache: object = field(default=None, repr=False, compare=False)

    @property
    def groups(self) -> list[str]:
        seen: list[str] = []
        for name in self.params:
            g = group_of(name)
            if g not in seen:
                seen.append(g)
        return seen


def init_state(cfg: EncoderConfig, seed: int = 0) -> EncoderState:
    """Fresh state: weight matrices ~ N(0, 1/sqrt(fan_in)), positional and
    mask embeddings ~ N(0, 0.5), zero biases, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
            params[name] = np.zeros(shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        elif name in ("embed.pos", "mae.mask_token"):
            params[name] = rng.normal(0.0, 0.5, size=shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
    trainable = {g: True for g in dict.fromkeys(group_of(n) for n in params)}
    return EncoderState(config=cfg, params=params, trainable=trainable)


def set_trainable(state: EncoderState, stage: TrainStage | str) -> None:
    """Flip per-group trainability for a tuning stage.

    HEAD_ONLY trains the projection head alone; TOP_HALF additionally
    unfreezes the top ceil(L/2) blocks, keeping patch/positional embeddings
    frozen; ALL unfreezes everything (pretraining).
    """
    stage = TrainStage(stage)
    L = state.config.depth
    first_top = L - (L + 1) // 2  # blocks [first_top, L) are the "top half"
    for g in state.trainable:
        if stage is TrainStage.ALL:
            state.trainable[g] = True
        elif g == "head":
            state.trainable[g] = True
        elif stage is TrainStage.TOP_HALF and g.startswith("block"):
            state.trainable[g] = int(g[len("block"):]) >= first_top
        else:
            state.trainable[g] = False


def params_snapshot(state: EncoderState, groups: list[str] | None = None) -> dict[str, np.ndarray]:
    """Deep copy of (a subset of) the parameters, for freeze-contract checks."""
    return {
        n: a.copy()
        for n, a in state.params.items()
        if groups is None or group_of(n) in groups
    }


# ---------------------------------------------------------------------------
# primitives: forward returns (out, cache); backward takes (d_out, cache)
# ---------------------------------------------------------------------------

def _patchify(x: np.ndarray, pt: int, pf: int) -> np.ndarray:
    b, t, f = x.shape
    return (
        x.reshape(b, t // pt, pt, f // pf, pf)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, (t // pt) * (f // pf), pt * pf)
    )


def _unpatchify(p: np.ndarray, t: int, f: int, pt: int, pf: int) -> np.ndarray:
    b = p.shape[0]
    return (
        p.reshape(b, t // pt, f // pf, pt, pf)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, t, f)
    )


def _linear_fwd(x, W, b):
    return x @ W + b, (x, W)


def _linear_bwd(dout, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ W.T, x2.T @ d2, d2.sum(axis=0)


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_bwd(dout, cache):
    xhat, inv, g = cache
    dxhat = dout * g
    lead = tuple(range(dout.ndim - 1))
    dg = (dout * xhat).sum(axis=lead)
    db = dout.sum(axis=lead)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x):
    t = np.tanh(_GELU_C0 * (x + _GELU_C1 * x**3))
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dout, cache):
    x, t = cache
    du = 0.5 * x * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
    return dout * (0.5 * (1.0 + t) + du)


def _l2norm_fwd(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm < 1e-30):
        raise NumericalError("cannot normalize a zero vector")
    y = x / norm
    return y, (y, 1.0 / norm)


def _l2norm_bwd(dout, cache):
    y, inv = cache
    return inv * (dout - y * (dout * y).sum(axis=-1, keepdims=True))


def _softmax_fwd(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(dout, a):
    return a * (dout - (dout * a).sum(axis=-1, keepdims=True))


def _block_fwd(p: dict, prefix: str, x: np.ndarray, heads: int):
    b, n, d = x.shape
    hd = d // heads

    h1, ln1_c = _layernorm_fwd(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    q, q_c = _linear_fwd(h1, p[f"{prefix}.attn.Wq"], p[f"{prefix}.attn.bq"])
    k, k_c = _linear_fwd(h1, p[f"{prefix}.attn.Wk"], p[f"{prefix}.attn.bk"])
    v, v_c = _linear_fwd(h1, p[f"{prefix}.attn.Wv"], p[f"{prefix}.attn.bv"])
    qh = q.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)
    vh = v.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)
    s = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(hd)
    a = _softmax_fwd(s)
    ctx = (a @ vh).transpose(0, 2, 1, 3).reshape(b, n, d)
    ao, o_c = _linear_fwd(ctx, p[f"{prefix}.attn.Wo"], p[f"{prefix}.attn.bo"])
    x2 = x + ao

    h2, ln2_c = _layernorm_fwd(x2, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    u1, l1_c = _linear_fwd(h2, p[f"{prefix}.mlp.W1"], p[f"{prefix}.mlp.b1"])
    g1, g_c = _gelu_fwd(u1)
    u2, l2_c = _linear_fwd(g1, p[f"{prefix}.mlp.W2"], p[f"{prefix}.mlp.b2"])
    x3 = x2 + u2

    cache = (ln1_c, q_c, k_c, v_c, qh, kh, vh, a, o_c, ln2_c, l1_c, g_c, l2_c, heads)
    return x3, cache


def _block_bwd(dx3: np.ndarray, prefix: str, cache, grads: dict):
    ln1_c, q_c, k_c, v_c, qh, kh, vh, a, o_c, ln2_c, l1_c, g_c, l2_c, heads = cache
    b, n, d = dx3.shape
    hd = d // heads

    dg1, dW2, db2 = _linear_bwd(dx3, l2_c)
    grads[f"{prefix}.mlp.W2"] = dW2
    grads[f"{prefix}.mlp.b2"] = db2
    du1 = _gelu_bwd(dg1, g_c)
    dh2, dW1, db1 = _linear_bwd(du1, l1_c)
    grads[f"{prefix}.mlp.W1"] = dW1
    grads[f"{prefix}.mlp.b1"] = db1
    dx2_ln, dg2, db2n = _layernorm_bwd(dh2, ln2_c)
    grads[f"{prefix}.ln2.g"] = dg2
    grads[f"{prefix}.ln2.b"] = db2n
    dx2 = dx3 + dx2_ln

    dctx, dWo, dbo = _linear_bwd(dx2, o_c)
    grads[f"{prefix}.attn.Wo"] = dWo
    grads[f"{prefix}.attn.bo"] = dbo
    dctx_h = dctx.reshape(b, n, heads, hd).transpose(0, 2, 1, 3)
    da = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dctx_h
    ds = _softmax_bwd(da, a) / np.sqrt(hd)
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(b, n, d)
    dh1_q, dWq, dbq = _linear_bwd(dq, q_c)
    dh1_k, dWk, dbk = _linear_bwd(dk, k_c)
    dh1_v, dWv, dbv = _linear_bwd(dv, v_c)
    grads[f"{prefix}.attn.Wq"], grads[f"{prefix}.attn.bq"] = dWq, dbq
    grads[f"{prefix}.attn.Wk"], grads[f"{prefix}.attn.bk"] = dWk, dbk
    grads[f"{prefix}.attn.Wv"], grads[f"{prefix}.attn.bv"] = dWv, dbv
    dx_ln, dg1n, db1n = _layernorm_bwd(dh1_q + dh1_k + dh1_v, ln1_c)
    grads[f"{prefix}.ln1.g"] = dg1n
    grads[f"{prefix}.ln1.b"] = db1n
    return dx2 + dx_ln


# ---------------------------------------------------------------------------
# encoder forward / backward
# ---------------------------------------------------------------------------

def _as_batch(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, Fbank):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (T, F) or (B, T, F), got shape {x.shape}")


def _check_input(cfg: EncoderConfig, x: np.ndarray) -> None:
    t, f = x.shape[-2:]
    if t % cfg.patch_t != 0 or f % cfg.patch_f != 0:
        raise ValueError(f"input {t}x{f} not divisible by patch {cfg.patch_t}x{cfg.patch_f}")
    if (t, f) != (cfg.input_t, cfg.input_f):
        raise ValueError(
            f"input {t}x{f} does not match the configured grid {cfg.input_t}x{cfg.input_f}"
        )


def _encode_fwd(p: dict, cfg: EncoderConfig, x: np.ndarray, mask_idx: np.ndarray | None = None):
    """Patch embed (+ optional mask-token substitution) and run all blocks."""
    patches = _patchify(x, cfg.patch_t, cfg.patch_f)
    emb, pe_c = _linear_fwd(patches, p["embed.patch.W"], p["embed.patch.b"])
    if mask_idx is not None:
        emb = emb.copy()
        rows = np.arange(emb.shape[0])[:, None]
        emb[rows, mask_idx] = p["mae.mask_token"]
    tokens = emb + p["embed.pos"]
    block_caches = []
    for i in range(cfg.depth):
        tokens, c = _block_fwd(p, f"block{i}", tokens, cfg.heads)
        block_caches.append(c)
    return patches, tokens, (pe_c, mask_idx, block_caches)


def _encode_bwd(dtokens: np.ndarray, cfg: EncoderConfig, cache, grads: dict) -> None:
    pe_c, mask_idx, block_caches = cache
    d = dtokens
    for i in reversed(range(cfg.depth)):
        d = _block_bwd(d, f"block{i}", block_caches[i], grads)
    grads["embed.pos"] = d.sum(axis=0)
    demb = d
    if mask_idx is not None:
        demb = demb.copy()
        rows = np.arange(demb.shape[0])[:, None]
        grads["mae.mask_token"] = demb[rows, mask_idx].sum(axis=(0, 1))
        demb[rows, mask_idx] = 0.0
    _, dW, db = _linear_bwd(demb, pe_c)
    grads["embed.patch.W"] = dW
    grads["embed.patch.b"] = db


def _head_fwd(p: dict, cfg: EncoderConfig, pooled: np.ndarray):
    h = pooled
    caches = []
    n_layers = len(cfg.head_dims)
    for li in range(n_layers):
        h, lc = _linear_fwd(h, p[f"head.{li}.W"], p[f"head.{li}.b"])
        gc = None
        if li < n_layers - 1:
            h, gc = _gelu_fwd(h)
        caches.append((lc, gc))
    out, nc = _l2norm_fwd(h)
    return out, (caches, nc)


def _head_bwd(dout: np.ndarray, cfg: EncoderConfig, cache, grads: dict) -> np.ndarray:
    caches, nc = cache
    d = _l2norm_bwd(dout, nc)
    for li in reversed(range(len(cfg.head_dims))):
        lc, gc = caches[li]
        if gc is not None:
            d = _gelu_bwd(d, gc)
        d, dW, db = _linear_bwd(d, lc)
        grads[f"head.{li}.W"] = dW
        grads[f"head.{li}.b"] = db
    return d


def forward(state: EncoderState, fbank, record: bool = False):
    """Encode one fbank (T×F) or a batch (B×T×F).

    Returns ``(tokens, pooled, projected)``: per-patch outputs of the final
    block, their mean (the backbone feature), and the unit-norm projection
    head output.  With ``record=True`` the intermediate values are kept so
    :func:`backward` can run.
    """
    x, squeeze = _as_batch(fbank)
    _check_input(state.config, x)
    _, tokens, enc_c = _encode_fwd(state.params, state.config, x)
    pooled = tokens.mean(axis=1)
    projected, head_c = _head_fwd(state.params, state.config, pooled)
    if record:
        state._cache = (tokens.shape, enc_c, head_c)
    if squeeze:
        return tokens[0], pooled[0], projected[0]
    return tokens, pooled, projected


def _zero_grads(state: EncoderState) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in state.params.items()}


def _mask_frozen(state: EncoderState, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    full = _zero_grads(state)
    for n, g in grads.items():
        if state.trainable[group_of(n)]:
            full[n] = g
    return full


def backward(
    state: EncoderState,
    d_projected: np.ndarray | None = None,
    d_pooled: np.ndarray | None = None,
    d_tokens: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate upstream gradients from the last recorded forward.

    Any combination of gradients w.r.t. the three outputs may be supplied;
    they are summed.  Frozen groups come back as zero tensors.
    """
    if state._cache is None:
        raise StateError("backward called before a recorded forward")
    tokens_shape, enc_c, head_c = state._cache
    b, n, _ = tokens_shape
    grads: dict[str, np.ndarray] = {}
    dpool = np.zeros((b, tokens_shape[2]))
    if d_projected is not None:
        dpool = dpool + _head_bwd(np.atleast_2d(np.asarray(d_projected, dtype=np.float64)),
                                  state.config, head_c, grads)
    if d_pooled is not None:
        dpool = dpool + np.atleast_2d(np.asarray(d_pooled, dtype=np.float64))
    dtok = np.repeat(dpool[:, None, :], n, axis=1) / n
    if d_tokens is not None:
        d_tokens = np.asarray(d_tokens, dtype=np.float64)
        dtok = dtok + (d_tokens[None] if d_tokens.ndim == 2 else d_tokens)
    _encode_bwd(dtok, state.config, enc_c, grads)
    return _mask_frozen(state, grads)


# ---------------------------------------------------------------------------
# masked-reconstruction pretraining
# ---------------------------------------------------------------------------

def sample_mask(n_tokens: int, mask_ratio: float, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Per-item masked token indices, shape (batch, round(ratio * n_tokens))."""
    if not (0.0 < mask_ratio < 1.0):
        raise ValueError("mask_ratio must lie strictly in (0, 1)")
    m = int(np.rint(mask_ratio * n_tokens))
    if m == 0:
        raise ValueError(f"mask_ratio {mask_ratio} masks zero of {n_tokens} patches")
    return np.stack([rng.permutation(n_tokens)[:m] for _ in range(batch)])


def masked_mse(pred: np.ndarray, target: np.ndarray, mask_idx: np.ndarray):
    """MSE over masked patches only; returns (loss, d_loss/d_pred)."""
    rows = np.arange(pred.shape[0])[:, None]
    diff = pred[rows, mask_idx] - target[rows, mask_idx]
    loss = float(np.mean(diff * diff))
    dpred = np.zeros_like(pred)
    dpred[rows, mask_idx] = 2.0 * diff / diff.size
    return loss, dpred


def mae_loss_and_grads(state: EncoderState, batch, mask_idx: np.ndarray):
    """Reconstruction loss for a fixed mask, with parameter gradients."""
    x, _ = _as_batch(batch)
    _check_input(state.config, x)
    p, cfg = state.params, state.config
    patches, tokens, enc_c = _encode_fwd(p, cfg, x, mask_idx=mask_idx)
    pred, rc = _linear_fwd(tokens, p["mae.recon.W"], p["mae.recon.b"])
    loss, dpred = masked_mse(pred, patches, mask_idx)
    grads: dict[str, np.ndarray] = {}
    dtokens, dWr, dbr = _linear_bwd(dpred, rc)
    grads["mae.recon.W"] = dWr
    grads["mae.recon.b"] = dbr
    _encode_bwd(dtokens, cfg, enc_c, grads)
    return loss, _mask_frozen(state, grads)


def mae_pretrain_step(
    state: EncoderState,
    batch,
    mask_ratio: float,
    rng: np.random.Generator,
    lr: float = 1e-3,
) -> float:
    """One masked-reconstruction SGD step; returns the step's loss."""
    x, _ = _as_batch(batch)
    mask_idx = sample_mask(state.config.n_tokens, mask_ratio, x.shape[0], rng)
    loss, grads = mae_loss_and_grads(state, x, mask_idx)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite reconstruction loss {loss}")
    for name, g in grads.items():
        if state.trainable[group_of(name)]:
            state.params[name] -= lr * g
    state.step += 1
    return loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def save_checkpoint(state: EncoderState, path, dtype: str = "f4") -> None:
    """One JSON header line, then the parameter blobs in header order."""
    if dtype not in _DTYPES:
        raise ValueError(f"unknown checkpoint dtype {dtype!r}")
    names = [n for n, _ in _param_shapes(state.config)]
    header = {
        "kind": "mixtune-checkpoint",
        "version": 1,
        "dtype": dtype,
        "stage": state.stage,
        "step": state.step,
        "config": asdict(state.config),
        "params": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(state.params[n], dtype=_DTYPES[dtype]).tobytes())


def load_checkpoint(path) -> EncoderState:
    """Rebuild an :class:`EncoderState` (float64 in memory) from disk."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise CorruptionError(f"unreadable checkpoint header in {path}: {e}") from e
        if header.get("kind") != "mixtune-checkpoint":
            raise CorruptionError(f"{path} is not a checkpoint file")
        dtype = header.get("dtype")
        if dtype not in _DTYPES:
            raise CorruptionError(f"unknown checkpoint dtype {dtype!r}")
        cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in header["config"].items()})
        expected = dict(_param_shapes(cfg))
        itemsize = np.dtype(_DTYPES[dtype]).itemsize
        params: dict[str, np.ndarray] = {}
        for meta in header["params"]:
            name, shape = meta["name"], tuple(meta["shape"])
            if name not in expected or expected[name] != shape:
                raise CorruptionError(f"parameter {name} with shape {shape} does not fit the config")
            raw = fh.read(int(np.prod(shape)) * itemsize)
            if len(raw) != int(np.prod(shape)) * itemsize:
                raise CorruptionError(f"checkpoint truncated at parameter {name}")
            params[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CorruptionError("trailing bytes after the last parameter blob")
    missing = set(expected) - set(params)
    if missing:
        raise CorruptionError(f"checkpoint missing parameters: {sorted(missing)}")
    state = EncoderState(
        config=cfg,
        params=params,
        trainable={g: True for g in dict.fromkeys(group_of(n) for n in params)},
        stage=header.get("stage", "init"),
        step=int(header.get("step", 0)),
    )
    stage_map = {"mae": TrainStage.ALL, "stage1": TrainStage.HEAD_ONLY, "stage2": TrainStage.TOP_HALF}
    if state.stage in stage_map:
        set_trainable(state, stage_map[state.stage])
    return state
