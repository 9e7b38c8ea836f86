"""Three-channel literacy-tracing model, its ablation variants, and a DKT baseline.

The model scores each step with three scalar channels and combines them:

* Question channel: per-step concat of question, literacy, and response
  embeddings, run through an LSTM and a causal transformer block, then a
  linear head (score ``alpha``).
* Ability channel: literacy + response embeddings, same LSTM/transformer
  stack (hidden sequence ``b``, score ``beta``).
* Application channel: ``b_t`` concatenated with the NEXT step's question
  and literacy embeddings, projected to model width, transformer, head
  (score ``gamma``).

The predicted probability that step t+1 is answered correctly is
``sigmoid(w1*alpha + w2*beta + w3*gamma + bias)`` at position t.

Variants: ``wo_output`` drops every transformer block (heads read the LSTM
or projection output directly; attention parameters are not allocated),
``wo_head`` runs attention with a single head, ``wo_add`` inserts a width-
preserving two-layer ReLU MLP in front of each transformer block, and
``dkt_baseline`` is an independent LSTM-over-concepts model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import (
    ContractError,
    Tensor,
    add,
    concat,
    matmul,
    relu,
    reshape,
    select_last,
    sigmoid,
)
from .layers import (
    AttentionParams,
    EmbeddingTable,
    LinearHead,
    LstmParams,
    embed_lookup,
    linear_head,
    lstm_forward,
    transformer_block,
    xavier,
    zeros_param,
)
from .seeding import stream


class VariantKind(str, Enum):
    FULL = "full"
    WO_OUTPUT = "wo_output"
    WO_HEAD = "wo_head"
    WO_ADD = "wo_add"
    DKT_BASELINE = "dkt_baseline"


@dataclass(frozen=True)
class ModelConfig:
    """Vocabulary sizes and widths; ids are dense from 1, 0 is padding."""

    n_questions: int
    n_kcs: int
    n_literacy: int
    model_dim: int = 64
    hidden_dim: int = 64
    n_heads: int = 4
    max_seq_len: int = 200
    dropout: float = 0.2

    def __post_init__(self) -> None:
        for name in ("n_questions", "n_kcs", "n_literacy", "model_dim", "hidden_dim", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def effective_heads(variant: VariantKind, n_heads: int) -> int:
    return 1 if variant is VariantKind.WO_HEAD else n_heads


@dataclass
class MlpParams:
    """Width-preserving two-layer ReLU MLP (the wo_add insert)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(dim: int, rng: np.random.Generator) -> "MlpParams":
        return MlpParams(
            w1=xavier(rng, dim, dim),
            b1=zeros_param((dim,)),
            w2=xavier(rng, dim, dim),
            b2=zeros_param((dim,)),
        )


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    h = relu(add(matmul(x, p.w1), p.b1))
    return add(matmul(h, p.w2), p.b2)


@dataclass
class TlsqktParams:
    config: ModelConfig
    variant: VariantKind
    q_table: EmbeddingTable
    l_table: EmbeddingTable
    r_table: EmbeddingTable
    pos_table: EmbeddingTable
    question_lstm: LstmParams
    ability_lstm: LstmParams
    question_tf: AttentionParams | None
    ability_tf: AttentionParams | None
    application_tf: AttentionParams | None
    question_mlp: MlpParams | None
    ability_mlp: MlpParams | None
    application_mlp: MlpParams | None
    app_proj: Tensor
    q_head: LinearHead
    a_head: LinearHead
    app_head: LinearHead
    combine_w: Tensor
    combine_b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return _collect_tensors(self)

    def freeze_padding_rows(self) -> None:
        for table in (self.q_table, self.l_table, self.r_table, self.pos_table):
            table.freeze_padding_row()


@dataclass
class DktParams:
    config: ModelConfig
    kc_table: EmbeddingTable
    r_table: EmbeddingTable
    lstm: LstmParams
    out_w: Tensor
    out_b: Tensor

    def named_parameters(self) -> dict[str, Tensor]:
        return _collect_tensors(self)

    def freeze_padding_rows(self) -> None:
        self.kc_table.freeze_padding_row()
        self.r_table.freeze_padding_row()


def _collect_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk dataclass fields in declaration order and name every Tensor."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, EmbeddingTable):
        out[f"{prefix}.weights"] = obj.weights
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            if f.name in ("config", "variant", "name", "rows", "dim", "n_heads"):
                continue
            child = getattr(obj, f.name)
            if child is None or isinstance(child, (int, float, str, bool)):
                continue
            key = f.name if not prefix else f"{prefix}.{f.name}"
            out.update(_collect_tensors(child, key))
    return out


@dataclass
class TraceOutput:
    """Forward-pass results: probs[b, t] predicts correctness of step t+1."""

    probs: Tensor
    channel_scores: tuple[Tensor, Tensor, Tensor] | None
    literacy_states: Tensor | None


def init_tlsqkt(config: ModelConfig, variant: VariantKind, seed: int) -> TlsqktParams:
    if variant is VariantKind.DKT_BASELINE:
        raise ContractError("dkt_baseline uses init_dkt, not init_tlsqkt")
    rng = stream(seed, "init")
    d, h = config.model_dim, config.hidden_dim
    heads = effective_heads(variant, config.n_heads)
    with_tf = variant is not VariantKind.WO_OUTPUT
    with_mlp = variant is VariantKind.WO_ADD
    return TlsqktParams(
        config=config,
        variant=variant,
        q_table=EmbeddingTable.create(config.n_questions + 1, d, rng, "q_table"),
        l_table=EmbeddingTable.create(config.n_literacy + 1, d, rng, "l_table"),
        r_table=EmbeddingTable.create(3, d, rng, "r_table"),
        pos_table=EmbeddingTable.create(config.max_seq_len + 1, d, rng, "pos_table"),
        question_lstm=LstmParams.create(3 * d, h, rng),
        ability_lstm=LstmParams.create(2 * d, h, rng),
        question_tf=AttentionParams.create(h, heads, rng) if with_tf else None,
        ability_tf=AttentionParams.create(h, heads, rng) if with_tf else None,
        application_tf=AttentionParams.create(d, heads, rng) if with_tf else None,
        question_mlp=MlpParams.create(h, rng) if with_mlp else None,
        ability_mlp=MlpParams.create(h, rng) if with_mlp else None,
        application_mlp=MlpParams.create(d, rng) if with_mlp else None,
        app_proj=xavier(rng, h + 2 * d, d),
        q_head=LinearHead.create(h, rng),
        a_head=LinearHead.create(h, rng),
        app_head=LinearHead.create(d, rng),
        combine_w=Tensor(np.full((3, 1), 1.0 / 3.0), requires_grad=True),
        combine_b=zeros_param((1,)),
    )


def init_dkt(config: ModelConfig, seed: int) -> DktParams:
    rng = stream(seed, "init")
    d, h = config.model_dim, config.hidden_dim
    return DktParams(
        config=config,
        kc_table=EmbeddingTable.create(config.n_kcs + 1, d, rng, "kc_table"),
        r_table=EmbeddingTable.create(3, d, rng, "r_table"),
        lstm=LstmParams.create(2 * d, h, rng),
        out_w=xavier(rng, h, config.n_kcs + 1),
        out_b=zeros_param((config.n_kcs + 1,)),
    )


# ---------------------------------------------------------------------------
# batch validation


def validate_batch(batch, config: ModelConfig) -> None:
    """Reject malformed batches (shape drift, padding holes, misaligned targets)."""
    arrays = {
        "q_ids": batch.q_ids,
        "kc_ids": batch.kc_ids,
        "l_ids": batch.l_ids,
        "responses": batch.responses,
        "q_next": batch.q_next,
        "l_next": batch.l_next,
        "targets": batch.targets,
        "valid_mask": batch.valid_mask,
    }
    shape = batch.q_ids.shape
    if len(shape) != 2 or shape[0] < 1 or shape[1] < 1:
        raise ContractError(f"batch arrays must be non-empty 2-D, got {shape}")
    for name, arr in arrays.items():
        if arr.shape != shape:
            raise ContractError(f"batch.{name} shape {arr.shape} != {shape}")
    if shape[1] > config.max_seq_len:
        raise ContractError(f"window length {shape[1]} exceeds max_seq_len {config.max_seq_len}")
    valid = batch.q_ids > 0
    mask = batch.valid_mask
    ranges = {
        "q_ids": (batch.q_ids, config.n_questions),
        "kc_ids": (batch.kc_ids, config.n_kcs),
        "l_ids": (batch.l_ids, config.n_literacy),
        "q_next": (batch.q_next, config.n_questions),
        "l_next": (batch.l_next, config.n_literacy),
    }
    for name, (arr, hi) in ranges.items():
        if arr.min() < 0 or arr.max() > hi:
            raise ContractError(f"batch.{name} outside [0, {hi}]")
    for name in ("kc_ids", "l_ids"):
        if (arrays[name][valid] == 0).any() or (arrays[name][~valid] != 0).any():
            raise ContractError(f"batch.{name} padding disagrees with q_ids")
    resp = batch.responses
    if not np.isin(resp[valid], (0, 1)).all() or (resp[~valid] != 0).any():
        raise ContractError("batch.responses must be 0/1 at valid steps and 0 at padding")
    if (mask & ~valid).any():
        raise ContractError("valid_mask set at a padding position")
    if (mask[:, :-1] & ~valid[:, 1:]).any():
        raise ContractError("valid_mask set where the next step is padding (target misalignment)")
    if mask[:, -1].any():
        raise ContractError("valid_mask set at the final position (no next step in window)")
    for name in ("q_next", "l_next"):
        arr = arrays[name]
        if (arr[mask] == 0).any() or (arr[~mask] != 0).any():
            raise ContractError(f"batch.{name} must be set exactly at masked positions")
    tg = batch.targets
    if not np.isin(tg[mask], (0.0, 1.0)).all() or (tg[~mask] != 0).any():
        raise ContractError("batch.targets must be 0/1 at masked positions and 0 elsewhere")


# ---------------------------------------------------------------------------
# channel embeddings


def _position_embedding(params, b: int, t: int) -> Tensor:
    pos_ids = np.broadcast_to(np.arange(1, t + 1, dtype=np.int64), (b, t))
    return embed_lookup(params.pos_table, pos_ids)


def _response_ids(batch) -> np.ndarray:
    valid = batch.q_ids > 0
    return np.where(valid, batch.responses + 1, 0).astype(np.int64)


def embed_question_channel(params: TlsqktParams, batch) -> Tensor:
    """Per step: concat of question/literacy/response embeddings, each plus
    the step's positional vector."""
    b, t = batch.q_ids.shape
    pos = _position_embedding(params, b, t)
    qe = add(embed_lookup(params.q_table, batch.q_ids), pos)
    le = add(embed_lookup(params.l_table, batch.l_ids), pos)
    re = add(embed_lookup(params.r_table, _response_ids(batch)), pos)
    return concat([qe, le, re], axis=2)


def embed_literacy_channel(params: TlsqktParams, batch) -> Tensor:
    """Literacy + response embedding concat; no question-id dependence."""
    b, t = batch.l_ids.shape
    pos = _position_embedding(params, b, t)
    le = add(embed_lookup(params.l_table, batch.l_ids), pos)
    re = add(embed_lookup(params.r_table, _response_ids(batch)), pos)
    return concat([le, re], axis=2)


def embed_application_channel(params: TlsqktParams, b_states: Tensor, batch) -> Tensor:
    """Project [ability state, next-question emb, next-literacy emb] to model width."""
    b, t = batch.q_next.shape
    pos = _position_embedding(params, b, t)
    qe = add(embed_lookup(params.q_table, batch.q_next), pos)
    le = add(embed_lookup(params.l_table, batch.l_next), pos)
    mixed = concat([b_states, qe, le], axis=2)
    return matmul(mixed, params.app_proj)


# ---------------------------------------------------------------------------
# forward passes


def _channel_stack(
    x: Tensor,
    tf: AttentionParams | None,
    mlp: MlpParams | None,
    valid: np.ndarray,
    heads: int,
    dropout: float,
    rng,
) -> Tensor:
    if mlp is not None:
        x = mlp_forward(mlp, x)
    if tf is not None:
        x = transformer_block(tf, x, valid, n_heads=heads, dropout=dropout, rng=rng)
    return x


def forward(
    params: TlsqktParams,
    variant: VariantKind,
    batch,
    dropout_rng: np.random.Generator | None = None,
) -> TraceOutput:
    """Run the three channels and combine their scores into probabilities.

    Dropout is active only when ``dropout_rng`` is passed (training mode).
    """
    if variant is VariantKind.DKT_BASELINE:
        raise ContractError("dkt_baseline forward goes through dkt_forward")
    if variant is not params.variant:
        raise ContractError(f"params built for {params.variant.value}, asked for {variant.value}")
    validate_batch(batch, params.config)
    b, t = batch.q_ids.shape
    valid = batch.q_ids > 0
    heads = effective_heads(variant, params.config.n_heads)
    rate = params.config.dropout if dropout_rng is not None else 0.0

    e = embed_question_channel(params, batch)
    a_states = lstm_forward(params.question_lstm, e, valid)
    qx = _channel_stack(a_states, params.question_tf, params.question_mlp, valid, heads, rate, dropout_rng)
    alpha = linear_head(params.q_head, qx)

    m = embed_literacy_channel(params, batch)
    b_states = lstm_forward(params.ability_lstm, m, valid)
    ax = _channel_stack(b_states, params.ability_tf, params.ability_mlp, valid, heads, rate, dropout_rng)
    beta = linear_head(params.a_head, ax)

    y = embed_application_channel(params, b_states, batch)
    yx = _channel_stack(y, params.application_tf, params.application_mlp, valid, heads, rate, dropout_rng)
    gamma = linear_head(params.app_head, yx)

    stacked = concat(
        [reshape(alpha, (b, t, 1)), reshape(beta, (b, t, 1)), reshape(gamma, (b, t, 1))],
        axis=2,
    )
    logits = add(matmul(stacked, params.combine_w), params.combine_b)
    probs = sigmoid(reshape(logits, (b, t)))
    return TraceOutput(probs=probs, channel_scores=(alpha, beta, gamma), literacy_states=b_states)


def kc_next_ids(batch) -> np.ndarray:
    """Next-step concept id at each position (0 where there is no target)."""
    nxt = np.zeros_like(batch.kc_ids)
    nxt[:, :-1] = batch.kc_ids[:, 1:]
    return np.where(batch.valid_mask, nxt, 0)


def dkt_forward(params: DktParams, batch) -> TraceOutput:
    """Concept+response LSTM; position t reads the output unit of the next
    step's concept."""
    validate_batch(batch, params.config)
    valid = batch.q_ids > 0
    ke = embed_lookup(params.kc_table, batch.kc_ids)
    re = embed_lookup(params.r_table, _response_ids(batch))
    x = concat([ke, re], axis=2)
    h = lstm_forward(params.lstm, x, valid)
    logits = add(matmul(h, params.out_w), params.out_b)
    per_concept = sigmoid(logits)
    probs = select_last(per_concept, kc_next_ids(batch))
    return TraceOutput(probs=probs, channel_scores=None, literacy_states=None)


def model_forward(params, batch, dropout_rng=None) -> TraceOutput:
    """Dispatch on the parameter bundle's own variant."""
    if isinstance(params, DktParams):
        return dkt_forward(params, batch)
    return forward(params, params.variant, batch, dropout_rng=dropout_rng)


# ---------------------------------------------------------------------------
# trajectory extraction


def extract_trajectories(params: TlsqktParams, batch) -> list[tuple[str, int, int, float]]:
    """Counterfactual probe: for each literacy dimension, re-run the model
    with every next-step literacy id replaced by that dimension.

    Returns (student_id, step, literacy_id, prob) rows, where step is the
    global index of the PREDICTED step inside the student's sequence. Rows
    are sorted by (student_id, step, literacy_id).
    """
    rows: list[tuple[str, int, int, float]] = []
    for lit in range(1, params.config.n_literacy + 1):
        l_next = np.where(batch.valid_mask, lit, 0).astype(np.int64)
        probe = replace(batch, l_next=l_next)
        out = model_forward(params, probe)
        p = out.probs.data
        for i, (student, start) in enumerate(batch.window_origin):
            for t in np.flatnonzero(batch.valid_mask[i]):
                rows.append((student, int(start + t + 1), lit, float(p[i, t])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: ModelConfig, variant: VariantKind, seed: int) -> str:
    blob = json.dumps(
        {"config": config.to_dict(), "variant": variant.value, "seed": seed}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, params, seed: int, extra_meta: dict | None = None) -> None:
    """Serialize parameters to JSON with bit-exact float64 round-trip."""
    if isinstance(params, DktParams):
        kind, variant = "dkt", VariantKind.DKT_BASELINE
    else:
        kind, variant = "tlsqkt", params.variant
    meta = {
        "kind": kind,
        "variant": variant.value,
        "config": params.config.to_dict(),
        "seed": seed,
        "config_hash": config_hash(params.config, variant, seed),
    }
    if extra_meta:
        meta.update(extra_meta)
    doc = {
        "meta": meta,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in params.named_parameters().items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path):
    """Rebuild a parameter bundle from a checkpoint written by save_checkpoint."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    meta = doc["meta"]
    config = ModelConfig(**meta["config"])
    if meta["kind"] == "dkt":
        params = init_dkt(config, seed=meta["seed"])
    else:
        params = init_tlsqkt(config, VariantKind(meta["variant"]), seed=meta["seed"])
    named = params.named_parameters()
    stored = doc["params"]
    if set(named) != set(stored):
        missing = sorted(set(named) ^ set(stored))
        raise ContractError(f"checkpoint parameter names do not match model: {missing}")
    for name, tensor in named.items():
        entry = stored[name]
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != tensor.shape:
            raise ContractError(f"checkpoint {name} shape {arr.shape} != {tensor.shape}")
        tensor.data = arr
    return params
