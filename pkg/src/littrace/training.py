"""Masked-BCE training with Adam, early stopping on validation AUC, metrics.

The protocol: split students 80/20 into (train+validation)/test, split the
first pool 90/10 into train/validation, window every sequence, run seeded
minibatch Adam on masked binary cross-entropy, track validation AUC each
epoch, stop after ``patience`` epochs without improvement, restore the best
parameters, and score the test split exactly once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autodiff import (
    ContractError,
    Tape,
    Tensor,
    add,
    backward,
    clip,
    log,
    mul,
    scale,
    shift,
    sum_all,
)
from .data import Batch, LoadedDataset, load_canonical, split_students, split_train_val, window_and_pad
from .model import (
    DktParams,
    ModelConfig,
    TlsqktParams,
    VariantKind,
    init_dkt,
    init_tlsqkt,
    model_forward,
)
from .seeding import stream


class UndefinedMetricError(ValueError):
    """Metric is mathematically undefined for the given inputs."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries epoch/batch/grad-norm."""


@dataclass
class TrainConfig:
    dataset: str = ""
    variant: VariantKind = VariantKind.FULL
    max_seq_len: int = 200
    model_dim: int = 64
    hidden_dim: int = 64
    n_heads: int = 4
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.2
    patience: int = 10
    max_epochs: int = 200
    seed: int = 0
    split_seed: int = 0
    limit_students: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.variant, str):
            self.variant = VariantKind(self.variant)
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("model_dim", "hidden_dim", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from string-valued keys (config file / CLI), rejecting unknowns."""
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        kwargs = {}
        for key, raw in mapping.items():
            target = known[key].type
            if isinstance(raw, str):
                if target in ("int", int):
                    kwargs[key] = int(raw)
                elif target in ("float", float):
                    kwargs[key] = float(raw)
                elif key == "variant":
                    kwargs[key] = VariantKind(raw)
                else:
                    kwargs[key] = raw
            else:
                kwargs[key] = raw
        return cls(**kwargs)


@dataclass
class RunReport:
    config: dict
    epochs: list[dict]
    best_epoch: int
    stopped_epoch: int
    test_auc: float
    test_acc: float
    wall_time: float

    def to_dict(self) -> dict:
        # wall_time varies between reruns and is deliberately left out so
        # report artifacts are byte-stable under a fixed config and seed
        return {
            "config": self.config,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "test_auc": self.test_auc,
            "test_acc": self.test_acc,
        }


# ---------------------------------------------------------------------------
# loss


def bce_loss_masked(probs: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over masked cells, probabilities clamped to
    [1e-7, 1 - 1e-7]."""
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if probs.shape != targets.shape or probs.shape != mask.shape:
        raise ContractError(f"shape mismatch: probs {probs.shape}, targets {targets.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("bce_loss_masked needs at least one masked cell")
    p = clip(probs, 1e-7, 1.0 - 1e-7)
    pos = mul(log(p), Tensor(targets * mask))
    neg = mul(log(shift(scale(p, -1.0), 1.0)), Tensor((1.0 - targets) * mask))
    return scale(sum_all(add(pos, neg)), -1.0 / n)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    named_params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    state.t += 1
    t = state.t
    for name, tensor in named_params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        if g.shape != tensor.data.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {tensor.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half.

    Average-rank (Mann-Whitney) formulation over all inputs at once.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores {s.shape} and labels {y.shape} must be equal-length 1-D")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ContractError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pairwise(scores, labels) -> float:
    """O(n^2) pair-counting reference for auc."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC undefined with a single class")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (float(wins) + 0.5 * float(ties)) / (pos.size * neg.size)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ContractError("accuracy needs at least one prediction")
    return float(((s >= threshold).astype(np.int64) == y).mean())


# ---------------------------------------------------------------------------
# early stopping


class EarlyStopper:
    """Stop when the monitored value has not improved for ``patience`` epochs."""

    def __init__(self, patience: int) -> None:
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = 0
        self.last_epoch = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch result; True when it is a strict improvement."""
        self.last_epoch = epoch
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            return True
        return False

    @property
    def should_stop(self) -> bool:
        return self.last_epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# data plumbing for runs


@dataclass
class PreparedData:
    train: Batch
    val: Batch
    test: Batch
    model_config: ModelConfig


def prepare_run_data(config: TrainConfig, dataset: LoadedDataset | None = None) -> PreparedData:
    """Split, window, and size the model for one training run."""
    if dataset is None:
        dataset = load_canonical(config.dataset)
    sequences = dataset.sequences
    if config.limit_students:
        rng = stream(config.split_seed, "subsample")
        order = sorted(sequences, key=lambda s: s.student_id)
        keep = rng.permutation(len(order))[: config.limit_students]
        sequences = [order[i] for i in sorted(keep)]
    train_val, test = split_students(sequences, ratio=0.8, seed=config.split_seed)
    train, val = split_train_val(train_val, seed=config.split_seed)
    stats = dataset.stats
    n_literacy = stats.n_literacy if stats.n_literacy is not None else stats.n_kcs
    model_config = ModelConfig(
        n_questions=stats.n_questions,
        n_kcs=stats.n_kcs,
        n_literacy=n_literacy,
        model_dim=config.model_dim,
        hidden_dim=config.hidden_dim,
        n_heads=config.n_heads,
        max_seq_len=config.max_seq_len,
        dropout=config.dropout,
    )

    def one_batch(seqs, label: str) -> Batch:
        batches = window_and_pad(seqs, config.max_seq_len)
        if not batches:
            raise ContractError(f"{label} split has no usable sequences")
        return batches[0]

    return PreparedData(
        train=one_batch(train, "train"),
        val=one_batch(val, "validation"),
        test=one_batch(test, "test"),
        model_config=model_config,
    )


def init_params(config: TrainConfig, model_config: ModelConfig):
    if config.variant is VariantKind.DKT_BASELINE:
        return init_dkt(model_config, seed=config.seed)
    return init_tlsqkt(model_config, config.variant, seed=config.seed)


def evaluate(params, windows: Batch, batch_size: int = 16) -> tuple[float, float]:
    """AUC/ACC over every masked prediction position, flattened."""
    scores, labels = predict_masked(params, windows, batch_size)
    return auc(scores, labels), accuracy(scores, labels)


def predict_masked(params, windows: Batch, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    scores: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for i in range(0, windows.n_rows, batch_size):
        chunk = windows.take(range(i, min(i + batch_size, windows.n_rows))).trimmed()
        if chunk.n_targets == 0:
            continue
        out = model_forward(params, chunk)
        scores.append(out.probs.data[chunk.valid_mask])
        labels.append(chunk.targets[chunk.valid_mask].astype(np.int64))
    if not scores:
        raise ContractError("no masked prediction positions to evaluate")
    return np.concatenate(scores), np.concatenate(labels)


# ---------------------------------------------------------------------------
# training loop


def _grad_norm(named_params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in named_params.values():
        if t.grad is not None:
            total += float((t.grad**2).sum())
    return float(np.sqrt(total))


def train(
    config: TrainConfig,
    dataset: LoadedDataset | None = None,
    log_fn=None,
) -> tuple[RunReport, TlsqktParams | DktParams]:
    """Run the full protocol; returns the report and best-epoch parameters."""
    started = time.perf_counter()
    prepared = prepare_run_data(config, dataset)
    params = init_params(config, prepared.model_config)
    named = params.named_parameters()
    adam = AdamState()
    shuffle_rng = stream(config.seed, "shuffle")
    dropout_rng = stream(config.seed, "dropout") if config.dropout > 0 else None
    stopper = EarlyStopper(config.patience)
    best_snapshot = {name: t.data.copy() for name, t in named.items()}
    epochs: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(prepared.train.n_rows)
        loss_sum = 0.0
        target_sum = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            chunk = prepared.train.take(idx).trimmed()
            if chunk.n_targets == 0:
                continue
            with Tape():
                out = model_forward(params, chunk, dropout_rng=dropout_rng)
                loss = bce_loss_masked(out.probs, chunk.targets, chunk.valid_mask)
                loss_value = float(loss.data.item())
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}, "
                        f"grad norm {_grad_norm(named):.3e}"
                    )
                backward(loss)
            params.freeze_padding_rows()
            adam_step(named, adam, config.learning_rate, config.beta1, config.beta2, config.eps)
            loss_sum += loss_value * chunk.n_targets
            target_sum += chunk.n_targets
        train_loss = loss_sum / max(target_sum, 1)
        val_auc, val_acc = evaluate(params, prepared.val, config.batch_size)
        epochs.append(
            {"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc, "val_acc": val_acc}
        )
        if stopper.update(epoch, val_auc):
            best_snapshot = {name: t.data.copy() for name, t in named.items()}
        if log_fn is not None:
            log_fn(
                f"epoch {epoch}: train_loss {train_loss:.4f} val_auc {val_auc:.4f} "
                f"val_acc {val_acc:.4f}{' *' if stopper.best_epoch == epoch else ''}"
            )
        if stopper.should_stop:
            break

    for name, tensor in named.items():
        tensor.data = best_snapshot[name]
    test_auc, test_acc = evaluate(params, prepared.test, config.batch_size)
    report = RunReport(
        config=config.to_dict(),
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        stopped_epoch=stopper.last_epoch,
        test_auc=test_auc,
        test_acc=test_acc,
        wall_time=time.perf_counter() - started,
    )
    return report, params


ABLATION_VARIANTS = (
    VariantKind.FULL,
    VariantKind.WO_OUTPUT,
    VariantKind.WO_HEAD,
    VariantKind.WO_ADD,
)


def run_ablation_suite(
    base_config: TrainConfig, dataset: LoadedDataset | None = None, log_fn=None
) -> list[dict]:
    """Train every ablation variant under identical seeds and splits."""
    if dataset is None:
        dataset = load_canonical(base_config.dataset)
    rows = []
    for variant in ABLATION_VARIANTS:
        config = replace(base_config, variant=variant)
        if log_fn is not None:
            log_fn(f"--- variant {variant.value} ---")
        report, _ = train(config, dataset, log_fn=log_fn)
        rows.append(
            {
                "variant": variant.value,
                "auc": report.test_auc,
                "acc": report.test_acc,
                "best_epoch": report.best_epoch,
            }
        )
    return rows
