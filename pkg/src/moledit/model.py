"""Bidirectional transformer encoder with three editing heads.

Forward and backward passes are written out by hand on numpy arrays: the
encoder is a stack of post-norm blocks (multi-head self-attention plus a
GELU feed-forward), and each head is a bias-free linear map into a
softmax. Gradients are exact for the composed objective and are verified
against central finite differences in the test suite, which runs the
whole model in float64; training runs in float32.

Head geometry: the deletion head maps hidden states to 2 classes, the
insertion head to ``max_insert`` count classes (how many placeholders to
insert after each position), and the token head to the vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moledit import _kernels
from moledit.tokenizer import BOS_ID, EOS_ID, MASK_ID, PAD_ID, PLACEHOLDER_ID

_NEG = -1e9
_LN_EPS = 1e-5


class LengthExceeded(ValueError):
    pass


class NaNGuard(FloatingPointError):
    """A loss or gradient went non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    max_len: int = 128
    vocab_size: int = 0
    max_insert: int = 256
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by the head count")
        if self.max_insert != 256:
            raise ValueError("the insertion head is fixed at 256 count classes")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded parameter tensors; matrices ~ N(0, 0.02), norms identity."""
    if cfg.vocab_size < 6:
        raise ValueError("vocab_size must be set (>= 6) before initialisation")
    rng = np.random.default_rng(cfg.seed)
    H, F = cfg.hidden, cfg.ffn

    def mat(*shape):
        return (rng.normal(0.0, 0.02, size=shape)).astype(dtype)

    params: dict[str, np.ndarray] = {
        "tok_emb": mat(cfg.vocab_size, H),
        "pos_emb": mat(cfg.max_len, H),
    }
    for layer in range(cfg.layers):
        p = f"L{layer}."
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[p + name] = mat(H, H)
            params[p + name.replace("W", "b")] = np.zeros(H, dtype=dtype)
        params[p + "ln1_g"] = np.ones(H, dtype=dtype)
        params[p + "ln1_b"] = np.zeros(H, dtype=dtype)
        params[p + "W1"] = mat(H, F)
        params[p + "b1"] = np.zeros(F, dtype=dtype)
        params[p + "W2"] = mat(F, H)
        params[p + "b2"] = np.zeros(H, dtype=dtype)
        params[p + "ln2_g"] = np.ones(H, dtype=dtype)
        params[p + "ln2_b"] = np.zeros(H, dtype=dtype)
    params["head_del"] = mat(H, 2)
    params["head_ins"] = mat(H, cfg.max_insert)
    params["head_tok"] = mat(H, cfg.vocab_size)
    return params


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    for k, v in part.items():
        total[k] += v


# --- primitive ops ----------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    return _kernels.softmax_rows(z)


def _layernorm(x, g, b):
    y, xhat, inv = _kernels.ln_fwd(x, g, b, _LN_EPS)
    return y, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dx = _kernels.ln_bwd_dx(dy, g, xhat, inv)
    return dx, dg, db


def _dropout(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x, None
    draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
    keep = (rng.random(x.shape, dtype=draw_dtype) >= rate).astype(x.dtype)
    keep *= 1.0 / (1.0 - rate)
    return x * keep, keep


def _dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


# --- encoder ----------------------------------------------------------------

def encoder_forward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator | None = None,
):
    """Hidden states (B, n, H) for padded id batch ``ids``.

    ``mask`` is True at real positions (sentinels included); padded keys
    are excluded from attention. Dropout fires only when ``rng`` is given.
    Returns (states, cache); feed the cache to encoder_backward.
    """
    B, n = ids.shape
    if n > cfg.max_len:
        raise LengthExceeded(f"sequence length {n} exceeds maximum {cfg.max_len}")
    H, nh, dh = cfg.hidden, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    x = params["tok_emb"][ids] + params["pos_emb"][:n][None, :, :]
    x, emb_keep = _dropout(x, cfg.dropout, rng)
    attn_bias = np.where(mask, 0.0, _NEG).astype(x.dtype)[:, None, None, :]

    layers = []
    for layer in range(cfg.layers):
        p = f"L{layer}."
        x_in = x
        q = x @ params[p + "Wq"] + params[p + "bq"]
        k = x @ params[p + "Wk"] + params[p + "bk"]
        v = x @ params[p + "Wv"] + params[p + "bv"]
        qh = q.reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, n, nh, dh).transpose(0, 2, 1, 3)
        scores = (qh @ kh.swapaxes(-1, -2)) * scale + attn_bias
        probs = _softmax(scores)
        probs_d, attn_keep = _dropout(probs, cfg.dropout, rng)
        ctx = (probs_d @ vh).transpose(0, 2, 1, 3).reshape(B, n, H)
        attn_out = ctx @ params[p + "Wo"] + params[p + "bo"]
        attn_out, attn_out_keep = _dropout(attn_out, cfg.dropout, rng)
        x1, ln1_cache = _layernorm(x_in + attn_out, params[p + "ln1_g"], params[p + "ln1_b"])

        h_pre = x1 @ params[p + "W1"] + params[p + "b1"]
        h_act, h_cdf = _kernels.gelu_fwd(h_pre)
        ffn_out = h_act @ params[p + "W2"] + params[p + "b2"]
        ffn_out, ffn_keep = _dropout(ffn_out, cfg.dropout, rng)
        x2, ln2_cache = _layernorm(x1 + ffn_out, params[p + "ln2_g"], params[p + "ln2_b"])

        layers.append(
            dict(
                x_in=x_in, qh=qh, kh=kh, vh=vh, probs=probs, probs_d=probs_d,
                attn_keep=attn_keep, ctx=ctx, attn_out_keep=attn_out_keep,
                ln1_cache=ln1_cache, x1=x1, h_pre=h_pre, h_cdf=h_cdf, h_act=h_act,
                ffn_keep=ffn_keep, ln2_cache=ln2_cache,
            )
        )
        x = x2

    cache = dict(ids=ids, emb_keep=emb_keep, layers=layers, shape=(B, n))
    return x, cache


def encoder_backward(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    cache: dict,
    dstates: np.ndarray,
) -> dict[str, np.ndarray]:
    """Parameter gradients for d(loss)/d(states) = ``dstates``."""
    B, n = cache["shape"]
    H, nh, dh = cfg.hidden, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    grads = zero_grads(params)
    dx = dstates

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    for layer in range(cfg.layers - 1, -1, -1):
        p = f"L{layer}."
        c = cache["layers"][layer]

        dsum2, dg2, db2 = _layernorm_backward(dx, params[p + "ln2_g"], c["ln2_cache"])
        grads[p + "ln2_g"] += dg2
        grads[p + "ln2_b"] += db2
        dffn_out = _dropout_backward(dsum2, c["ffn_keep"])
        grads[p + "W2"] += flat(c["h_act"]).T @ flat(dffn_out)
        grads[p + "b2"] += flat(dffn_out).sum(axis=0)
        dh_act = dffn_out @ params[p + "W2"].T
        dh_pre = _kernels.gelu_bwd(c["h_pre"], c["h_cdf"], dh_act)
        grads[p + "W1"] += flat(c["x1"]).T @ flat(dh_pre)
        grads[p + "b1"] += flat(dh_pre).sum(axis=0)
        dx1 = dsum2 + dh_pre @ params[p + "W1"].T

        dsum1, dg1, db1 = _layernorm_backward(dx1, params[p + "ln1_g"], c["ln1_cache"])
        grads[p + "ln1_g"] += dg1
        grads[p + "ln1_b"] += db1
        dattn_out = _dropout_backward(dsum1, c["attn_out_keep"])
        grads[p + "Wo"] += flat(c["ctx"]).T @ flat(dattn_out)
        grads[p + "bo"] += flat(dattn_out).sum(axis=0)
        dctx = (dattn_out @ params[p + "Wo"].T).reshape(B, n, nh, dh).transpose(0, 2, 1, 3)

        dprobs_d = dctx @ c["vh"].swapaxes(-1, -2)
        dvh = c["probs_d"].swapaxes(-1, -2) @ dctx
        dprobs = _dropout_backward(dprobs_d, c["attn_keep"])
        # softmax backward over the key axis
        dscores = _kernels.softmax_bwd_rows(c["probs"], dprobs)
        dqh = (dscores @ c["kh"]) * scale
        dkh = (dscores.swapaxes(-1, -2) @ c["qh"]) * scale

        dq = dqh.transpose(0, 2, 1, 3).reshape(B, n, H)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, n, H)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, n, H)
        x_in = c["x_in"]
        grads[p + "Wq"] += flat(x_in).T @ flat(dq)
        grads[p + "bq"] += flat(dq).sum(axis=0)
        grads[p + "Wk"] += flat(x_in).T @ flat(dk)
        grads[p + "bk"] += flat(dk).sum(axis=0)
        grads[p + "Wv"] += flat(x_in).T @ flat(dv)
        grads[p + "bv"] += flat(dv).sum(axis=0)

        dx = (
            dsum1
            + dq @ params[p + "Wq"].T
            + dk @ params[p + "Wk"].T
            + dv @ params[p + "Wv"].T
        )

    dx = _dropout_backward(dx, cache["emb_keep"])
    # Scatter-add via a one-hot GEMM; much faster than np.add.at here.
    flat_ids = cache["ids"].reshape(-1)
    flat_dx = dx.reshape(-1, H)
    onehot = np.zeros((flat_ids.size, grads["tok_emb"].shape[0]), dtype=dx.dtype)
    onehot[np.arange(flat_ids.size), flat_ids] = 1.0
    grads["tok_emb"] += onehot.T @ flat_dx
    grads["pos_emb"][:n] += dx.sum(axis=0)
    return grads


# --- heads ------------------------------------------------------------------

_HEAD_NAMES = {"del": "head_del", "ins": "head_ins", "tok": "head_tok"}

#: Control tokens excluded from the token head at fill time.
FILL_MASKED_IDS = (PAD_ID, BOS_ID, EOS_ID, PLACEHOLDER_ID)


def head_probs(params: dict[str, np.ndarray], states: np.ndarray, head: str) -> np.ndarray:
    """Softmax rows of the requested head; rows sum to 1."""
    return _softmax(states @ params[_HEAD_NAMES[head]])


def predict_deletion(params, states):
    return head_probs(params, states, "del")


def predict_insertion(params, states):
    return head_probs(params, states, "ins")


def predict_tokens(params, states, mask_fill_specials: bool = False):
    logits = states @ params["head_tok"]
    if mask_fill_specials:
        logits = logits.copy()
        logits[..., list(FILL_MASKED_IDS)] = _NEG
    return _softmax(logits)


# --- supervised batches and losses ------------------------------------------

@dataclass
class SubBatch:
    """One padded id batch plus per-position class labels for one head.

    ``mask`` marks real tokens; ``label_mask`` marks the positions that
    contribute to the loss (a subset of ``mask``).
    """

    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray

    @classmethod
    def from_lists(
        cls,
        id_lists: Sequence[Sequence[int]],
        label_lists: Sequence[Sequence[int]],
        flag_lists: Sequence[Sequence[bool]],
        dtype=np.float32,
    ) -> "SubBatch":
        B = len(id_lists)
        n = max(len(x) for x in id_lists)
        ids = np.full((B, n), PAD_ID, dtype=np.int64)
        mask = np.zeros((B, n), dtype=bool)
        labels = np.zeros((B, n), dtype=np.int64)
        label_mask = np.zeros((B, n), dtype=bool)
        for b, (seq, labs, flags) in enumerate(zip(id_lists, label_lists, flag_lists)):
            m = len(seq)
            ids[b, :m] = seq
            mask[b, :m] = True
            labels[b, : len(labs)] = labs
            label_mask[b, : len(flags)] = flags
        return cls(ids, mask, labels, label_mask)


def head_loss_and_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    sub: SubBatch,
    head: str,
    rng: np.random.Generator | None = None,
    want_grads: bool = True,
):
    """Mean cross-entropy of ``sub.labels`` under one head.

    Returns (loss, grads-or-None, stats) where stats carries the number
    of supervised positions, how many were argmax-correct, and the argmax
    predictions at supervised positions (for roll-in construction).
    """
    head_w = params[_HEAD_NAMES[head]]
    positions = np.nonzero(sub.label_mask)
    count = len(positions[0])
    if count == 0:
        stats = {"count": 0, "correct": 0, "argmax": np.zeros(0, dtype=np.int64)}
        return 0.0, (zero_grads(params) if want_grads else None), stats

    states, cache = encoder_forward(params, cfg, sub.ids, sub.mask, rng)
    sel = states[positions]  # (count, H)
    logits = sel @ head_w
    zmax = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - zmax)
    denom = e.sum(axis=-1, keepdims=True)
    labels = sub.labels[positions]
    logp = (logits - zmax) - np.log(denom)
    nll = -logp[np.arange(count), labels]
    loss = float(nll.mean())
    argmax = logits.argmax(axis=-1)
    stats = {"count": count, "correct": int((argmax == labels).sum()), "argmax": argmax}

    if not want_grads:
        return loss, None, stats

    dlogits = e / denom
    dlogits[np.arange(count), labels] -= 1.0
    dlogits /= count
    grads_head = sel.T @ dlogits
    dstates = np.zeros_like(states)
    dstates[positions] = dlogits @ head_w.T
    grads = encoder_backward(params, cfg, cache, dstates)
    grads[_HEAD_NAMES[head]] += grads_head
    return loss, grads, stats


@dataclass
class EditBatch:
    """The four supervised views of one edit-training batch."""

    y0: SubBatch        # corrupted input, deletion labels (dual deletion loss)
    y0p: SubBatch       # after expert deletion, insertion-count labels
    y1: SubBatch        # with placeholders, fill-token labels
    y2: SubBatch | None = None  # roll-in, deletion labels; built from y1 argmax


def multi_head_loss_and_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    tasks: Sequence[tuple[str, SubBatch, str]],
    rng: np.random.Generator | None = None,
    want_grads: bool = True,
):
    """Several (name, sub-batch, head) tasks through ONE encoder pass.

    The sub-batches are stacked row-wise into a single padded batch, so
    the encoder runs forward (and backward) once for all of them. Each
    task's loss is the mean NLL over its own supervised positions,
    identical to running head_loss_and_grads per task.
    """
    B_total = sum(t[1].ids.shape[0] for t in tasks)
    n = max(t[1].ids.shape[1] for t in tasks)
    ids = np.full((B_total, n), PAD_ID, dtype=np.int64)
    mask = np.zeros((B_total, n), dtype=bool)
    row = 0
    slices = []
    for _, sub, _ in tasks:
        b, m = sub.ids.shape
        ids[row : row + b, :m] = sub.ids
        mask[row : row + b, :m] = sub.mask
        slices.append(slice(row, row + b))
        row += b

    states, cache = encoder_forward(params, cfg, ids, mask, rng)
    dstates = np.zeros_like(states) if want_grads else None
    grads = zero_grads(params) if want_grads else None
    losses: dict[str, float] = {}
    stats_all: dict[str, dict] = {}

    for (name, sub, head), sl in zip(tasks, slices):
        head_w = params[_HEAD_NAMES[head]]
        b, m = sub.ids.shape
        rows_, cols = np.nonzero(sub.label_mask)
        count = len(rows_)
        if count == 0:
            losses[name] = 0.0
            stats_all[name] = {"count": 0, "correct": 0, "argmax": np.zeros(0, dtype=np.int64)}
            continue
        sel = states[sl.start + rows_, cols]
        logits = sel @ head_w
        zmax = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - zmax)
        denom = e.sum(axis=-1, keepdims=True)
        labels = sub.labels[rows_, cols]
        logp = (logits - zmax) - np.log(denom)
        nll = -logp[np.arange(count), labels]
        losses[name] = float(nll.mean())
        argmax = logits.argmax(axis=-1)
        stats_all[name] = {
            "count": count,
            "correct": int((argmax == labels).sum()),
            "argmax": argmax,
            "rows": rows_,
            "cols": cols,
        }
        if head == "tok":
            lg = logits.copy()
            lg[:, list(FILL_MASKED_IDS)] = _NEG
            stats_all[name]["argmax_fill"] = lg.argmax(axis=-1)
        if want_grads:
            dlogits = e / denom
            dlogits[np.arange(count), labels] -= 1.0
            dlogits /= count
            grads[_HEAD_NAMES[head]] += sel.T @ dlogits
            dstates[sl.start + rows_, cols] += dlogits @ head_w.T

    if want_grads:
        add_grads(grads, encoder_backward(params, cfg, cache, dstates))
    return losses, grads, stats_all


@dataclass
class HeadTask:
    """Positions and labels for one head over a shared padded batch.

    ``denom`` is the position count used to scale this task's mean NLL;
    it may exceed len(rows) when the task spans several passes.
    """

    name: str
    head: str
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray
    denom: int


def fused_heads_pass(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: np.ndarray,
    mask: np.ndarray,
    tasks: Sequence[HeadTask],
    rng: np.random.Generator | None = None,
    want_grads: bool = True,
):
    """One encoder pass over ``ids`` serving several head tasks at once.

    Each task contributes sum(NLL)/task.denom to its loss; gradients for
    all tasks flow through a single encoder backward.
    """
    states, cache = encoder_forward(params, cfg, ids, mask, rng)
    dstates = np.zeros_like(states) if want_grads else None
    grads = zero_grads(params) if want_grads else None
    results: dict[str, dict] = {}
    for task in tasks:
        head_w = params[_HEAD_NAMES[task.head]]
        count = len(task.rows)
        if count == 0:
            results[task.name] = {
                "nll_sum": 0.0, "count": 0, "correct": 0,
                "argmax": np.zeros(0, dtype=np.int64),
                "argmax_fill": np.zeros(0, dtype=np.int64),
            }
            continue
        sel = states[task.rows, task.cols]
        logits = sel @ head_w
        zmax = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - zmax)
        denom = e.sum(axis=-1, keepdims=True)
        logp = (logits - zmax) - np.log(denom)
        nll = -logp[np.arange(count), task.labels]
        argmax = logits.argmax(axis=-1)
        result = {
            "nll_sum": float(nll.sum()),
            "count": count,
            "correct": int((argmax == task.labels).sum()),
            "argmax": argmax,
        }
        if task.head == "tok":
            lg = logits.copy()
            lg[:, list(FILL_MASKED_IDS)] = _NEG
            result["argmax_fill"] = lg.argmax(axis=-1)
        results[task.name] = result
        if want_grads:
            dlogits = e / denom
            dlogits[np.arange(count), task.labels] -= 1.0
            dlogits /= task.denom
            grads[_HEAD_NAMES[task.head]] += sel.T @ dlogits
            np.add.at(dstates, (task.rows, task.cols), dlogits @ head_w.T)
    if want_grads:
        add_grads(grads, encoder_backward(params, cfg, cache, dstates))
    return results, grads


def loss_and_grads(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    batch: EditBatch,
    rng: np.random.Generator | None = None,
    want_grads: bool = True,
):
    """Total edit objective: dual deletion + insertion + token + roll-in
    deletion, each a mean NLL over its supervised positions.

    ``batch.y2`` must already be built (the trainer fills placeholders
    with model argmax / teacher forcing before calling this).
    """
    if batch.y2 is None:
        raise ValueError("EditBatch.y2 not built")
    tasks = [
        ("dualdel", batch.y0, "del"),
        ("ins", batch.y0p, "ins"),
        ("tok", batch.y1, "tok"),
        ("del", batch.y2, "del"),
    ]
    breakdown, grads, stats_all = multi_head_loss_and_grads(
        params, cfg, tasks, rng=rng, want_grads=want_grads
    )
    for name, loss in breakdown.items():
        if not math.isfinite(loss):
            raise NaNGuard(f"{name} loss is not finite")
    breakdown["total"] = (
        breakdown["dualdel"] + breakdown["ins"] + breakdown["tok"] + breakdown["del"]
    )
    return breakdown, grads, stats_all


# --- iterative decoding -----------------------------------------------------

def decode_iterative(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    ids: Sequence[int],
    max_iters: int = 10,
) -> list[int]:
    """Edit ``ids`` (with sentinels) until fixpoint or ``max_iters``.

    Each round deletes where the deletion head says so (threshold 0.5,
    sentinels immune), inserts argmax placeholder counts per slot capped
    at the length budget, then fills placeholders with the argmax of the
    control-masked token head. Deterministic.
    """
    current = list(ids)
    for _ in range(max_iters):
        before = list(current)

        arr = np.asarray([current], dtype=np.int64)
        mask = np.ones_like(arr, dtype=bool)
        states, _ = encoder_forward(params, cfg, arr, mask)
        pdel = predict_deletion(params, states)[0]
        kept = [
            tid
            for pos, tid in enumerate(current)
            if tid in (BOS_ID, EOS_ID) or pdel[pos, 1] <= 0.5
        ]
        current = kept

        arr = np.asarray([current], dtype=np.int64)
        mask = np.ones_like(arr, dtype=bool)
        states, _ = encoder_forward(params, cfg, arr, mask)
        pins = predict_insertion(params, states)[0]
        counts = pins.argmax(axis=-1)
        budget = cfg.max_len - len(current)
        rebuilt: list[int] = []
        for pos, tid in enumerate(current):
            rebuilt.append(tid)
            if pos == len(current) - 1:
                break  # no insertions after EOS
            take = min(int(counts[pos]), budget)
            rebuilt.extend([PLACEHOLDER_ID] * take)
            budget -= take
        current = rebuilt

        if PLACEHOLDER_ID in current:
            arr = np.asarray([current], dtype=np.int64)
            mask = np.ones_like(arr, dtype=bool)
            states, _ = encoder_forward(params, cfg, arr, mask)
            ptok = predict_tokens(params, states, mask_fill_specials=True)[0]
            fills = ptok.argmax(axis=-1)
            current = [
                int(fills[pos]) if tid == PLACEHOLDER_ID else tid
                for pos, tid in enumerate(current)
            ]

        if current == before:
            break
    return current
