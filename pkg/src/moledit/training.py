"""Training: expert-supervised examples, the pretraining loop, linear
probes, and checkpoint persistence.

Both objectives share the encoder. The edit objective supervises four
views per example (corrupted input, post-deletion input, placeholder
sequence, roll-in sequence); the MLM baseline masks tokens in place and
trains the token head at masked positions only.
"""

from __future__ import annotations

import json
import math
import struct
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from moledit.editops import apply_deletion, apply_insertion, expert_deletion, expert_insertion_plan
from moledit.fragmenter import CorruptionConfig, corrupt
from moledit.model import (
    EditBatch,
    HeadTask,
    ModelConfig,
    NaNGuard,
    SubBatch,
    add_grads,
    encoder_forward,
    fused_heads_pass,
    head_loss_and_grads,
    init_params,
    loss_and_grads,
    multi_head_loss_and_grads,
    predict_tokens,
    zero_grads,
)
from moledit.molgraph import ParseError, parse_smiles, write_smiles
from moledit.tokenizer import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    PLACEHOLDER_ID,
    LexError,
    Vocab,
    build_vocab,
    encode,
    tokenize,
)

_TRAIN_TAG = 0
_VAL_TAG = 1
_ROLLIN_TAG = 2
_MASK_TAG = 3

METRICS_HEADER = "step,lr,loss_total,loss_dualdel,loss_ins,loss_tok,loss_del,acc_tok,acc_mask,seconds"


class ConfigError(ValueError):
    pass


class DegenerateDesign(ValueError):
    """All pooled feature vectors are identical; the probe cannot fit."""


class FormatError(ValueError):
    pass


class VersionError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 64-bit stream seed from integer coordinates."""
    state = np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(2)
    return (int(state[0]) << 32) | int(state[1])


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "edit"
    drop_ratio: float = 0.15
    mask_ratio: float = 0.15
    lr: float = 5e-4
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_tokens: int = 4096
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 100
    rollin_teacher_prob: float = 0.5
    holdout_frac: float = 0.05

    def __post_init__(self):
        if self.objective not in ("edit", "mlm"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        for name in ("drop_ratio", "mask_ratio", "rollin_teacher_prob", "holdout_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} {v} outside [0, 1]")
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be smaller than total_steps")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.batch_tokens < 8:
            raise ConfigError("batch_tokens too small")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak at W, then linear decay to 0 at T."""
    if step <= 0 or cfg.total_steps == 0:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


# --- training examples -------------------------------------------------------

@dataclass
class TrainingExample:
    """Expert supervision for one corruption pair, as padded-ready id lists.

    ``y0`` is the corrupted input, ``ystar`` the target, both with
    sentinels. ``d_labels`` flag expert deletions on y0; ``y0p`` is y0
    after those deletions; ``p_counts`` give placeholder counts per slot
    (BOS anchor through the last kept token); ``t_fills`` are the target
    ids for the placeholders of ``y1`` in order. ``y2`` is the roll-in
    sequence with its mismatch deletion labels, built once placeholder
    fills are known.
    """

    y0: list[int]
    ystar: list[int]
    d_labels: list[int]
    y0p: list[int]
    p_counts: list[int]
    t_fills: list[int]
    y1: list[int]
    y2: list[int] | None = None
    y2_labels: list[int] | None = None

    def rollin(self, fills: Sequence[int], teacher_mask: Sequence[bool]) -> None:
        """Fill y1's placeholders: model prediction, or t* where teacher-forced."""
        chosen = [
            t if forced else int(m)
            for m, t, forced in zip(fills, self.t_fills, teacher_mask)
        ]
        y2, labels, k = [], [], 0
        for tid in self.y1:
            if tid == PLACEHOLDER_ID:
                y2.append(chosen[k])
                labels.append(1 if chosen[k] != self.t_fills[k] else 0)
                k += 1
            else:
                y2.append(tid)
                labels.append(0)
        self.y2 = y2
        self.y2_labels = labels


def _assemble_example(
    target_toks: list[str], corrupted_toks: list[str], vocab: Vocab
) -> TrainingExample:
    """Expert plan for one corruption pair, encoded and ready to batch."""
    d_core = expert_deletion(corrupted_toks, target_toks)
    kept = apply_deletion(corrupted_toks, d_core)
    counts, fills = expert_insertion_plan(kept, target_toks)
    y1_toks = apply_insertion(kept, counts)
    return TrainingExample(
        y0=encode(corrupted_toks, vocab, add_sentinels=True),
        ystar=encode(target_toks, vocab, add_sentinels=True),
        d_labels=[0] + d_core + [0],
        y0p=encode(kept, vocab, add_sentinels=True),
        p_counts=list(counts),
        t_fills=encode(fills, vocab),
        y1=encode(y1_toks, vocab, add_sentinels=True),
    )


def make_training_example(
    smiles: str,
    cfg: CorruptionConfig,
    vocab: Vocab,
    *,
    model_cfg: ModelConfig | None = None,
    params: dict[str, np.ndarray] | None = None,
    tau: float = 0.5,
    rollin_seed: int = 0,
) -> TrainingExample:
    """Corrupt, compute the expert plan, and assemble the id views.

    Without ``params`` the roll-in is fully teacher-forced (as with
    tau=1), so y2 equals the target and its labels are all zero.
    """
    record = corrupt(parse_smiles(smiles), cfg)
    target_toks = list(tokenize(record.original_smiles).tokens)
    y0_toks = list(tokenize(record.corrupted_smiles).tokens)
    ex = _assemble_example(target_toks, y0_toks, vocab)

    n_holes = len(ex.t_fills)
    if params is None or tau >= 1.0 or n_holes == 0:
        ex.rollin(list(ex.t_fills), [True] * n_holes)
        return ex

    ids = np.asarray([ex.y1], dtype=np.int64)
    states, _ = encoder_forward(params, model_cfg, ids, np.ones_like(ids, dtype=bool))
    probs = predict_tokens(params, states, mask_fill_specials=True)[0]
    hole_pos = [i for i, t in enumerate(ex.y1) if t == PLACEHOLDER_ID]
    fills_pred = probs[hole_pos].argmax(axis=-1)
    rng = np.random.default_rng(rollin_seed)
    teacher = rng.random(n_holes) < tau
    ex.rollin(fills_pred, teacher.tolist())
    return ex


class ExampleFactory:
    """Per-line cache of the corruption-independent work: parsed graph,
    fragmentation, and target tokens. Corruption itself stays seeded."""

    def __init__(self, lines: Sequence[str], vocab: Vocab):
        from moledit.fragmenter import fragment

        self.lines = list(lines)
        self.vocab = vocab
        self.graphs = [parse_smiles(l) for l in self.lines]
        self.frag_sets = [fragment(g) for g in self.graphs]
        self.target_toks = [list(tokenize(l).tokens) for l in self.lines]

    def corrupt_line(self, idx: int, drop_ratio: float, seed: int):
        return corrupt(
            self.graphs[idx],
            CorruptionConfig(drop_ratio=drop_ratio, seed=seed),
            frag_set=self.frag_sets[idx],
            original_smiles=self.lines[idx],
        )

    def make(self, idx: int, drop_ratio: float, seed: int) -> TrainingExample:
        record = self.corrupt_line(idx, drop_ratio, seed)
        y0_toks = list(tokenize(record.corrupted_smiles).tokens)
        return _assemble_example(self.target_toks[idx], y0_toks, self.vocab)


def _apply_plan_ids(ex: TrainingExample) -> list[int]:
    """Re-run the environment on the stored plan; must reproduce ystar."""
    core = ex.y0[1:-1]
    kept = [t for t, d in zip(core, ex.d_labels[1:-1]) if not d]
    out: list[int] = [PLACEHOLDER_ID] * ex.p_counts[0]
    for tid, count in zip(kept, ex.p_counts[1:]):
        out.append(tid)
        out.extend([PLACEHOLDER_ID] * count)
    it = iter(ex.t_fills)
    filled = [next(it) if t == PLACEHOLDER_ID else t for t in out]
    return [BOS_ID] + filled + [EOS_ID]


def _core_flags(ids: Sequence[int]) -> list[bool]:
    return [tid not in (BOS_ID, EOS_ID) for tid in ids]


def _static_subbatches(examples: Sequence[TrainingExample]):
    y0 = SubBatch.from_lists(
        [ex.y0 for ex in examples],
        [ex.d_labels for ex in examples],
        [_core_flags(ex.y0) for ex in examples],
    )
    y0p = SubBatch.from_lists(
        [ex.y0p for ex in examples],
        [ex.p_counts + [0] for ex in examples],
        [[True] * (len(ex.y0p) - 1) + [False] for ex in examples],
    )
    y1 = SubBatch.from_lists(
        [ex.y1 for ex in examples],
        [_scatter_fills(ex) for ex in examples],
        [[t == PLACEHOLDER_ID for t in ex.y1] for ex in examples],
    )
    return y0, y0p, y1


def _rollin_y2(
    examples: Sequence[TrainingExample],
    y1: SubBatch,
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    tau: float,
    rollin_rng: np.random.Generator,
) -> SubBatch:
    """Fill y1's placeholders with current-model argmax (teacher-forced
    with probability tau) and pad the resulting roll-in batch."""
    if any(PLACEHOLDER_ID in ex.y1 for ex in examples):
        states, _ = encoder_forward(params, model_cfg, y1.ids, y1.mask)
        probs = predict_tokens(params, states, mask_fill_specials=True)
        preds = probs.argmax(axis=-1)
    else:
        preds = np.zeros_like(y1.ids)
    for b, ex in enumerate(examples):
        hole_pos = [i for i, t in enumerate(ex.y1) if t == PLACEHOLDER_ID]
        fills = [int(preds[b, i]) for i in hole_pos]
        teacher = (rollin_rng.random(len(hole_pos)) < tau).tolist()
        ex.rollin(fills, teacher)
    return SubBatch.from_lists(
        [ex.y2 for ex in examples],
        [ex.y2_labels for ex in examples],
        [_core_flags(ex.y2) for ex in examples],
    )


def build_edit_batch(
    examples: Sequence[TrainingExample],
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    tau: float,
    rollin_rng: np.random.Generator,
) -> EditBatch:
    """Pad the four supervised views; roll-in fills come from one
    forward pass of the token head over the whole y1 batch."""
    y0, y0p, y1 = _static_subbatches(examples)
    y2 = _rollin_y2(examples, y1, params, model_cfg, tau, rollin_rng)
    return EditBatch(y0=y0, y0p=y0p, y1=y1, y2=y2)


def _rollin_from_stats(
    examples: Sequence[TrainingExample],
    tok_stats: dict,
    tau: float,
    rollin_rng: np.random.Generator,
) -> SubBatch:
    """Build the roll-in view from the token-head pass already run for
    the loss (the control-masked argmax at each placeholder)."""
    fills_by_row: dict[int, list[int]] = {}
    if tok_stats["count"]:
        for row, fill in zip(tok_stats["rows"], tok_stats["argmax_fill"]):
            fills_by_row.setdefault(int(row), []).append(int(fill))
    for b, ex in enumerate(examples):
        fills = fills_by_row.get(b, [])
        teacher = (rollin_rng.random(len(fills)) < tau).tolist()
        ex.rollin(fills, teacher)
    return SubBatch.from_lists(
        [ex.y2 for ex in examples],
        [ex.y2_labels for ex in examples],
        [_core_flags(ex.y2) for ex in examples],
    )


class _RowPool:
    """Deduplicates identical id sequences into shared batch rows."""

    def __init__(self):
        self.row_of: dict[tuple[int, ...], int] = {}
        self.seqs: list[list[int]] = []

    def row(self, seq: list[int]) -> int:
        key = tuple(seq)
        idx = self.row_of.get(key)
        if idx is None:
            idx = len(self.seqs)
            self.row_of[key] = idx
            self.seqs.append(seq)
        return idx

    def padded(self):
        n = max(len(s) for s in self.seqs)
        ids = np.full((len(self.seqs), n), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(self.seqs), n), dtype=bool)
        for b, seq in enumerate(self.seqs):
            ids[b, : len(seq)] = seq
            mask[b, : len(seq)] = True
        return ids, mask


def _as_task(name, head, triples, denom):
    rows = np.fromiter((t[0] for t in triples), dtype=np.int64, count=len(triples))
    cols = np.fromiter((t[1] for t in triples), dtype=np.int64, count=len(triples))
    labels = np.fromiter((t[2] for t in triples), dtype=np.int64, count=len(triples))
    return HeadTask(name, head, rows, cols, labels, denom)


def edit_step_losses(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    examples: Sequence[TrainingExample],
    tau: float,
    rollin_rng: np.random.Generator,
    rng: np.random.Generator | None = None,
    want_grads: bool = True,
):
    """The four edit losses in two fused encoder passes.

    Pass 1 serves the corrupted, post-deletion and placeholder views
    (identical sequences share one batch row; a zero-edit example costs
    a single row for all four losses). Pass 2 covers roll-in sequences,
    built from pass 1's token predictions, for examples that actually
    had placeholders to fill.
    """
    pool = _RowPool()
    dualdel: list = []
    ins: list = []
    tok: list = []
    del1: list = []
    tok_meta: list = []
    need_rollin: list[TrainingExample] = []

    denom_del = 0
    for ex in examples:
        denom_del += len(ex.y1) - 2  # y2 always has y1's length
        r0 = pool.row(ex.y0)
        dualdel.extend((r0, pos, ex.d_labels[pos]) for pos in range(1, len(ex.y0) - 1))
        rp = pool.row(ex.y0p)
        ins.extend((rp, pos, ex.p_counts[pos]) for pos in range(len(ex.y0p) - 1))
        if ex.t_fills:
            r1 = pool.row(ex.y1)
            holes = [i for i, t in enumerate(ex.y1) if t == PLACEHOLDER_ID]
            tok.extend((r1, pos, fill) for pos, fill in zip(holes, ex.t_fills))
            tok_meta.append((ex, len(holes)))
            need_rollin.append(ex)
        else:
            ex.rollin([], [])
            r2 = pool.row(ex.y2)
            del1.extend((r2, pos, 0) for pos in range(1, len(ex.y2) - 1))

    ids, mask = pool.padded()
    tasks = [
        _as_task("dualdel", "del", dualdel, max(1, len(dualdel))),
        _as_task("ins", "ins", ins, max(1, len(ins))),
        _as_task("tok", "tok", tok, max(1, len(tok))),
        _as_task("del", "del", del1, max(1, denom_del)),
    ]
    results, grads = fused_heads_pass(
        params, model_cfg, ids, mask, tasks, rng=rng, want_grads=want_grads
    )

    # Distribute pass-1 token predictions to their examples, in order.
    fills_flat = results["tok"].get("argmax_fill", np.zeros(0, dtype=np.int64))
    offset = 0
    rollin_by_ex: dict[int, list[int]] = {}
    for ex, n_holes in tok_meta:
        rollin_by_ex[id(ex)] = [int(x) for x in fills_flat[offset : offset + n_holes]]
        offset += n_holes
    for ex in examples:
        if id(ex) in rollin_by_ex:
            fills = rollin_by_ex[id(ex)]
            teacher = (rollin_rng.random(len(fills)) < tau).tolist()
            ex.rollin(fills, teacher)
        elif ex.y2 is None:  # pragma: no cover - zero-hole examples already rolled
            ex.rollin([], [])

    if need_rollin:
        pool2 = _RowPool()
        del2: list = []
        for ex in need_rollin:
            r2 = pool2.row(ex.y2)
            del2.extend(
                (r2, pos, ex.y2_labels[pos]) for pos in range(1, len(ex.y2) - 1)
            )
        ids2, mask2 = pool2.padded()
        results2, grads2 = fused_heads_pass(
            params, model_cfg, ids2, mask2,
            [_as_task("del", "del", del2, max(1, denom_del))],
            rng=rng, want_grads=want_grads,
        )
        results["del"] = {
            "nll_sum": results["del"]["nll_sum"] + results2["del"]["nll_sum"],
            "count": results["del"]["count"] + results2["del"]["count"],
            "correct": results["del"]["correct"] + results2["del"]["correct"],
            "argmax": np.concatenate([results["del"]["argmax"], results2["del"]["argmax"]]),
        }
        if want_grads:
            add_grads(grads, grads2)

    losses = {}
    stats = {}
    for name in ("dualdel", "ins", "tok", "del"):
        res = results[name]
        denom = denom_del if name == "del" else max(1, res["count"])
        losses[name] = res["nll_sum"] / max(1, denom)
        stats[name] = res
        if not math.isfinite(losses[name]):
            raise NaNGuard(f"{name} loss is not finite")
    losses["total"] = losses["dualdel"] + losses["ins"] + losses["tok"] + losses["del"]
    return losses, grads, stats


def _scatter_fills(ex: TrainingExample) -> list[int]:
    labels = []
    it = iter(ex.t_fills)
    for tid in ex.y1:
        labels.append(next(it) if tid == PLACEHOLDER_ID else 0)
    return labels


def build_mlm_batch(
    lines_ids: Sequence[Sequence[int]],
    mask_ratio: float,
    seeds: Sequence[int],
) -> SubBatch:
    """Mask ceil(mask_ratio * n) core tokens per sequence (at least one,
    never sentinels) and supervise the token head at those positions."""
    masked_ids, labels, flags = [], [], []
    for ids, seed in zip(lines_ids, seeds):
        ids = list(ids)
        core = list(range(1, len(ids) - 1))
        n_mask = max(1, math.ceil(mask_ratio * len(core)))
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(core), size=min(n_mask, len(core)), replace=False)
        positions = sorted(core[i] for i in chosen)
        row_labels = [0] * len(ids)
        row_flags = [False] * len(ids)
        out = list(ids)
        for pos in positions:
            row_labels[pos] = ids[pos]
            row_flags[pos] = True
            out[pos] = MASK_ID
        masked_ids.append(out)
        labels.append(row_labels)
        flags.append(row_flags)
    return SubBatch.from_lists(masked_ids, labels, flags)


# --- optimizer ---------------------------------------------------------------

class Adam:
    """Adam with bias correction and global-norm gradient clipping."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.m = zero_grads(params)
        self.v = zero_grads(params)
        self.t = 0
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = 1e-8
        self.weight_decay = cfg.weight_decay
        self.clip_norm = cfg.clip_norm

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        if self.clip_norm > 0:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                for g in grads.values():
                    g *= scale
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)


# --- metrics -----------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    lr: float
    loss_total: float
    loss_dualdel: float | None
    loss_ins: float | None
    loss_tok: float | None
    loss_del: float | None
    acc_tok: float | None
    acc_mask: float | None
    seconds: float

    def to_csv(self) -> str:
        def fmt(v, spec="{:.9g}"):
            return "" if v is None else spec.format(v)

        return ",".join(
            [
                str(self.step),
                fmt(self.lr),
                fmt(self.loss_total),
                fmt(self.loss_dualdel),
                fmt(self.loss_ins),
                fmt(self.loss_tok),
                fmt(self.loss_del),
                fmt(self.acc_tok),
                fmt(self.acc_mask),
                fmt(self.seconds, "{:.3f}"),
            ]
        )


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(row.to_csv() + "\n")


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"SMED"
_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    train_config: TrainConfig
    vocab: Vocab
    tensors: dict[str, np.ndarray]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, u32 version, u64 header length, JSON header, then packed
    little-endian float32 tensors in manifest order."""
    names = sorted(ckpt.tensors)
    manifest = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "model_config": asdict(ckpt.model_config),
            "train_config": asdict(ckpt.train_config),
            "vocab": list(ckpt.vocab.id_to_token),
            "tensors": manifest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise FormatError("checkpoint truncated before header")
    if data[:4] != _MAGIC:
        raise FormatError("bad magic bytes")
    version = struct.unpack("<I", data[4:8])[0]
    if version != _VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    header_len = struct.unpack("<Q", data[8:16])[0]
    if len(data) < 16 + header_len:
        raise FormatError("checkpoint truncated inside header")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"bad header: {err}") from err
    body = data[16 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + 4 * size
        if end > len(body):
            raise FormatError(f"checkpoint truncated inside tensor {entry['name']}")
        arr = np.frombuffer(body[start:end], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(
        version=version,
        model_config=ModelConfig(**header["model_config"]),
        train_config=TrainConfig(**header["train_config"]),
        vocab=Vocab(tuple(header["vocab"])),
        tensors=tensors,
    )


# --- corpus ingestion --------------------------------------------------------

@dataclass
class PreparedCorpus:
    lines: list[str]          # writer-canonical, parseable, length-filtered
    skipped: int
    vocab: Vocab


def prepare_corpus(raw_lines: Sequence[str], model_cfg: ModelConfig) -> PreparedCorpus:
    """Canonicalize and filter the corpus.

    Unparseable lines are skipped and counted; lines whose token length
    cannot fit ``max_len`` with sentinels are skipped too. '.' is always
    added to the vocabulary because corruption can disconnect retained
    fragments even when no corpus line is multi-component.
    """
    kept: list[str] = []
    skipped = 0
    for line in raw_lines:
        line = line.rstrip()
        if not line or line.startswith("#"):
            continue
        try:
            canon = write_smiles(parse_smiles(line))
        except (LexError, ParseError, ValueError):
            skipped += 1
            continue
        if len(tokenize(canon).tokens) > model_cfg.max_len - 2:
            skipped += 1
            continue
        kept.append(canon)
    vocab = build_vocab(kept + ["."])
    return PreparedCorpus(kept, skipped, vocab)


def split_holdout(lines: Sequence[str], frac: float) -> tuple[list[str], list[str]]:
    """Last ``frac`` of the corpus, by position, is held out."""
    n_val = max(1, int(len(lines) * frac)) if lines else 0
    return list(lines[: len(lines) - n_val]), list(lines[len(lines) - n_val :])


# --- the pretraining loop ----------------------------------------------------

def _batch_indices(
    order: Sequence[int], costs: Sequence[int], budget: int
) -> list[list[int]]:
    batches: list[list[int]] = []
    current: list[int] = []
    used = 0
    for idx in order:
        cost = costs[idx]
        if current and used + cost > budget:
            batches.append(current)
            current, used = [], 0
        current.append(idx)
        used += cost
    if current:
        batches.append(current)
    return batches


class _EditEvaluator:
    """Held-out edit losses with fixed corruption seeds. The expensive
    corruption/expert work happens once; only the roll-in view depends
    on the current parameters."""

    def __init__(self, factory: ExampleFactory, indices: Sequence[int], train_cfg: TrainConfig):
        self.train_cfg = train_cfg
        costs = [len(factory.target_toks[i]) + 2 for i in indices]
        self.batches = []
        for group in _batch_indices(range(len(indices)), costs, train_cfg.batch_tokens):
            examples = [
                factory.make(
                    indices[k],
                    train_cfg.drop_ratio,
                    derive_seed(train_cfg.seed, _VAL_TAG, indices[k]),
                )
                for k in group
            ]
            self.batches.append(examples)

    def run(self, params, model_cfg):
        losses = {"dualdel": 0.0, "ins": 0.0, "tok": 0.0, "del": 0.0}
        weights = {k: 0 for k in losses}
        tok_correct = 0
        tok_count = 0
        for examples in self.batches:
            rng = np.random.default_rng(
                derive_seed(self.train_cfg.seed, _VAL_TAG, _ROLLIN_TAG)
            )
            breakdown, _, stats = edit_step_losses(
                params, model_cfg, examples,
                self.train_cfg.rollin_teacher_prob, rng, want_grads=False,
            )
            for key in losses:
                count = stats[key]["count"]
                losses[key] += breakdown[key] * count
                weights[key] += count
            tok_correct += stats["tok"]["correct"]
            tok_count += stats["tok"]["count"]
        mean = {k: (losses[k] / weights[k] if weights[k] else 0.0) for k in losses}
        acc = tok_correct / tok_count if tok_count else 0.0
        return mean, acc


class _MlmEvaluator:
    """Held-out MLM batches; masks are fixed, so everything is static."""

    def __init__(self, val_ids: Sequence[Sequence[int]], train_cfg: TrainConfig):
        costs = [len(ids) for ids in val_ids]
        self.batches = []
        for group in _batch_indices(range(len(val_ids)), costs, train_cfg.batch_tokens):
            seeds = [derive_seed(train_cfg.seed, _VAL_TAG, _MASK_TAG, i) for i in group]
            self.batches.append(
                build_mlm_batch([val_ids[i] for i in group], train_cfg.mask_ratio, seeds)
            )

    def run(self, params, model_cfg):
        total_loss = 0.0
        total_count = 0
        correct = 0
        for sub in self.batches:
            loss, _, stats = head_loss_and_grads(params, model_cfg, sub, "tok", want_grads=False)
            total_loss += loss * stats["count"]
            total_count += stats["count"]
            correct += stats["correct"]
        loss = total_loss / total_count if total_count else 0.0
        acc = correct / total_count if total_count else 0.0
        return loss, acc


def pretrain(
    raw_corpus: Sequence[str],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, list[MetricsRow]]:
    """Run the configured objective over the corpus.

    Writes ``final.ckpt``, ``best.ckpt`` (lowest validation loss) and
    ``metrics.csv`` under ``out_dir`` when given. Deterministic: the same
    (corpus, configs, seed) triple reproduces the metric values exactly.
    """
    log = log or (lambda msg: print(msg, file=sys.stderr))
    prepared = prepare_corpus(raw_corpus, model_cfg)
    if not prepared.lines:
        raise ConfigError("corpus is empty after parse filtering")
    if prepared.skipped:
        log(f"skipped {prepared.skipped} unusable corpus lines")
    train_lines, val_lines = split_holdout(prepared.lines, train_cfg.holdout_frac)
    vocab = prepared.vocab
    model_cfg = replace(model_cfg, vocab_size=len(vocab))

    params = init_params(model_cfg, dtype=np.float32)
    optimizer = Adam(params, train_cfg)
    rows: list[MetricsRow] = []
    best = {name: arr.copy() for name, arr in params.items()}
    best_loss = math.inf
    start_time = time.monotonic()

    train_ids = [encode(tokenize(l), vocab, add_sentinels=True) for l in train_lines]
    val_ids = [encode(tokenize(l), vocab, add_sentinels=True) for l in val_lines]
    costs = [len(ids) for ids in train_ids]

    if train_cfg.objective == "edit":
        factory = ExampleFactory(train_lines, vocab)
        val_factory = ExampleFactory(val_lines, vocab)
        evaluator = _EditEvaluator(val_factory, range(len(val_lines)), train_cfg)
    else:
        evaluator = _MlmEvaluator(val_ids, train_cfg)

    step = 0
    epoch = -1
    pending: list[tuple[int, int]] = []  # (epoch, line index)
    checked_epoch = -1
    while step < train_cfg.total_steps:
        if not pending:
            epoch += 1
            perm = np.random.default_rng(
                derive_seed(train_cfg.seed, _TRAIN_TAG, epoch)
            ).permutation(len(train_ids))
            # Stable sort into coarse length buckets keeps batches dense
            # while the within-bucket order stays shuffled.
            order = sorted((int(i) for i in perm), key=lambda i: costs[i] // 8)
            pending = [(epoch, i) for i in order]

        batch_refs: list[tuple[int, int]] = []
        used = 0
        while pending:
            ref = pending[0]
            cost = costs[ref[1]]
            if batch_refs and used + cost > train_cfg.batch_tokens:
                break
            pending.pop(0)
            batch_refs.append(ref)
            used += cost
            if used >= train_cfg.batch_tokens:
                break

        step += 1
        lr = lr_schedule(step, train_cfg)

        if train_cfg.objective == "edit":
            examples = [
                factory.make(
                    idx,
                    train_cfg.drop_ratio,
                    derive_seed(train_cfg.seed, _TRAIN_TAG, ep, idx),
                )
                for ep, idx in batch_refs
            ]
            if checked_epoch < epoch:
                # Expert plans must reconstruct the target exactly.
                for ex in examples:
                    if _apply_plan_ids(ex) != ex.ystar:
                        raise RuntimeError("expert plan failed to reconstruct its target")
                checked_epoch = epoch
            rollin_rng = np.random.default_rng(
                derive_seed(train_cfg.seed, _TRAIN_TAG, _ROLLIN_TAG, step)
            )
            drop_rng = np.random.default_rng(derive_seed(train_cfg.seed, _TRAIN_TAG, 7, step))
            _, grads, _ = edit_step_losses(
                params, model_cfg, examples,
                train_cfg.rollin_teacher_prob, rollin_rng, rng=drop_rng,
            )
        else:
            seeds = [
                derive_seed(train_cfg.seed, _TRAIN_TAG, _MASK_TAG, ep, idx)
                for ep, idx in batch_refs
            ]
            sub = build_mlm_batch(
                [train_ids[idx] for _, idx in batch_refs], train_cfg.mask_ratio, seeds
            )
            drop_rng = np.random.default_rng(derive_seed(train_cfg.seed, _TRAIN_TAG, 7, step))
            loss, grads, _ = head_loss_and_grads(params, model_cfg, sub, "tok", rng=drop_rng)
            if not math.isfinite(loss):
                raise NaNGuard("mlm loss is not finite")

        optimizer.step(params, grads, lr)

        if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
            elapsed = time.monotonic() - start_time
            if train_cfg.objective == "edit":
                mean, acc_tok = evaluator.run(params, model_cfg)
                total = mean["dualdel"] + mean["ins"] + mean["tok"] + mean["del"]
                row = MetricsRow(
                    step=step, lr=lr, loss_total=total,
                    loss_dualdel=mean["dualdel"], loss_ins=mean["ins"],
                    loss_tok=mean["tok"], loss_del=mean["del"],
                    acc_tok=acc_tok, acc_mask=None, seconds=elapsed,
                )
            else:
                loss, acc_mask = evaluator.run(params, model_cfg)
                row = MetricsRow(
                    step=step, lr=lr, loss_total=loss,
                    loss_dualdel=None, loss_ins=None, loss_tok=None, loss_del=None,
                    acc_tok=None, acc_mask=acc_mask, seconds=elapsed,
                )
            rows.append(row)
            log(f"step {row.step} loss {row.loss_total:.4f} " +
                (f"acc_tok {row.acc_tok:.3f}" if row.acc_tok is not None else
                 f"acc_mask {row.acc_mask:.3f}" if row.acc_mask is not None else ""))
            if row.loss_total < best_loss:
                best_loss = row.loss_total
                best = {name: arr.copy() for name, arr in params.items()}

    if not rows:
        best = {name: arr.copy() for name, arr in params.items()}

    ckpt = Checkpoint(_VERSION, model_cfg, train_cfg, vocab, params)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "final.ckpt")
        save_checkpoint(Checkpoint(_VERSION, model_cfg, train_cfg, vocab, best), out_dir / "best.ckpt")
        write_metrics_csv(rows, out_dir / "metrics.csv")
    return ckpt, rows


# --- frozen-encoder linear probe ----------------------------------------------

def pooled_states(
    params: dict[str, np.ndarray],
    model_cfg: ModelConfig,
    vocab: Vocab,
    smiles_list: Sequence[str],
    batch_tokens: int = 4096,
) -> np.ndarray:
    """Mean of encoder states over core (non-sentinel) positions, (N, H)."""
    ids_list = [encode(tokenize(s), vocab, add_sentinels=True) for s in smiles_list]
    out = np.zeros((len(ids_list), model_cfg.hidden), dtype=np.float64)
    costs = [len(ids) for ids in ids_list]
    for batch_idx in _batch_indices(range(len(ids_list)), costs, batch_tokens):
        chunk = [ids_list[i] for i in batch_idx]
        n = max(len(c) for c in chunk)
        ids = np.full((len(chunk), n), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), n), dtype=bool)
        for b, seq in enumerate(chunk):
            ids[b, : len(seq)] = seq
            mask[b, : len(seq)] = True
        states, _ = encoder_forward(params, model_cfg, ids, mask)
        core = mask.copy()
        core[:, 0] = False
        for b, seq in enumerate(chunk):
            core[b, len(seq) - 1] = False
        for row, b in enumerate(batch_idx):
            sel = states[row][core[row]]
            out[b] = sel.mean(axis=0) if len(sel) else 0.0
    return out


@dataclass
class LinearProbe:
    weights: np.ndarray  # (H + 1,), last entry is the intercept
    ridge: float
    train_rmse: float
    val_rmse: float

    def predict(self, pooled: np.ndarray) -> np.ndarray:
        X = np.concatenate([pooled, np.ones((len(pooled), 1))], axis=1)
        return X @ self.weights


def fit_probe(
    features: np.ndarray, values: Sequence[float], ridge: float = 1e-3, val_frac: float = 0.2
) -> LinearProbe:
    """Ridge regression of values onto pooled states; the last val_frac
    of rows (by position) measures the validation RMSE."""
    y = np.asarray(values, dtype=np.float64)
    if np.allclose(features.std(axis=0), 0.0):
        raise DegenerateDesign("all pooled feature vectors are identical")
    n_val = int(len(y) * val_frac)
    n_train = len(y) - n_val
    X = np.concatenate([features, np.ones((len(y), 1))], axis=1)
    Xt, yt = X[:n_train], y[:n_train]
    gram = Xt.T @ Xt + ridge * np.eye(X.shape[1])
    w = np.linalg.solve(gram, Xt.T @ yt)
    train_rmse = float(np.sqrt(np.mean((Xt @ w - yt) ** 2)))
    if n_val:
        val_rmse = float(np.sqrt(np.mean((X[n_train:] @ w - y[n_train:]) ** 2)))
    else:
        val_rmse = train_rmse
    return LinearProbe(w, ridge, train_rmse, val_rmse)


def finetune_probe(
    ckpt: Checkpoint,
    pairs: Sequence[tuple[str, float]],
    ridge: float = 1e-3,
    val_frac: float = 0.2,
) -> LinearProbe:
    """Fit a linear probe on the frozen encoder's mean-pooled states."""
    smiles = [s for s, _ in pairs]
    values = [v for _, v in pairs]
    feats = pooled_states(ckpt.tensors, ckpt.model_config, ckpt.vocab, smiles)
    return fit_probe(feats, values, ridge=ridge, val_frac=val_frac)
