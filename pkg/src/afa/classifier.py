"""Study-level attention classifier over view-slot tokens.

Each slot is a token (input projection of its features plus a learned
position embedding for its canonical slot index). A learned CLS token is
prepended; unacquired slots are excluded as attention keys everywhere, so
the CLS output depends only on the acquired slots. The CLS token is always
attendable, which makes the empty acquisition legal.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .core import N_CLASSES, AcquisitionState, StudyRecord, code_to_mask, stack_studies
from .metrics import balanced_accuracy
from .neural import (
    Adam,
    CheckpointError,
    Dense,
    EncoderBlock,
    LayerNorm,
    Module,
    _bcast,
    load_checkpoint,
    save_checkpoint,
    softmax,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    n_layers: int = 6
    n_heads: int = 8
    ff_dim: int = 256
    model_dim: int = 64
    n_classes: int = N_CLASSES
    mask_rate_train: float = 0.5
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.mask_rate_train <= 1.0:
            raise ValueError("mask_rate_train must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown classifier keys: {sorted(unknown)}")
        return cls(**d)


class ClassifierModel(Module):
    def __init__(self, config: ClassifierConfig, n_slots: int, dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config, self.n_slots, self.dim = config, n_slots, dim
        dm = config.model_dim
        self.inp = self._child(Dense("input", dim, dm, rng, dtype))
        self.cls = self._param("cls", (0.02 * rng.standard_normal(dm)).astype(dtype))
        self.pos = self._param("pos", (0.02 * rng.standard_normal((n_slots + 1, dm))).astype(dtype))
        self.blocks = [
            self._child(EncoderBlock(f"enc{i}", dm, config.n_heads, config.ff_dim, rng, dtype))
            for i in range(config.n_layers)
        ]
        self.ln_f = self._child(LayerNorm("ln_f", dm, dtype))
        self.head = self._child(Dense("head", dm, config.n_classes, rng, dtype))
        self.train_history: list[dict] = []

    def _check_input(self, features, mask):
        if features.shape[-2:] != (self.n_slots, self.dim):
            raise ValueError(
                f"expected features of shape (..., {self.n_slots}, {self.dim}), got {features.shape}"
            )
        if mask.shape[-1] != self.n_slots:
            raise ValueError(f"mask has {mask.shape[-1]} entries, expected {self.n_slots}")

    def forward(self, features, mask):
        """``features (..., B, N, D)``, ``mask (B, N)`` -> logits ``(..., B, C)``."""
        mask = np.asarray(mask, dtype=bool)
        self._check_input(features, mask)
        tok, c_in = self.inp.forward(features)
        dm = tok.shape[-1]
        cls = np.broadcast_to(_bcast(self.cls.value, 1, tok.ndim), tok.shape[:-2] + (1, dm))
        x = np.concatenate([cls, tok], axis=-2) + _bcast(self.pos.value, 2, tok.ndim)
        key_mask = np.concatenate([np.ones(mask.shape[:-1] + (1,), dtype=bool), mask], axis=-1)
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x, key_mask)
            caches.append(c)
        z, c_ln = self.ln_f.forward(x[..., 0, :])
        logits, c_head = self.head.forward(z)
        return logits, (c_in, caches, c_ln, c_head, x.shape)

    def backward(self, dlogits, cache):
        c_in, caches, c_ln, c_head, x_shape = cache
        dz = self.head.backward(dlogits, c_head)
        dx = np.zeros(x_shape, dtype=dz.dtype)
        dx[..., 0, :] = self.ln_f.backward(dz, c_ln)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(dx, c)
        dm = x_shape[-1]
        self.pos.grad += dx.reshape(-1, self.n_slots + 1, dm).sum(axis=0)
        self.cls.grad += dx[..., 0, :].reshape(-1, dm).sum(axis=0)
        return self.inp.backward(dx[..., 1:, :], c_in)

    def loss(self, batch, lead: int = 0):
        features, mask, labels = batch
        if lead:
            features = np.broadcast_to(features, (lead,) + features.shape)
        logits, _ = self.forward(features, mask)
        return softmax_cross_entropy(logits, labels)[0]

    def loss_and_backward(self, batch) -> float:
        features, mask, labels = batch
        logits, cache = self.forward(features, mask)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.backward(dlogits, cache)
        return float(loss)

    def predict_proba(self, features, mask, chunk: int = 512) -> np.ndarray:
        features = np.asarray(features, dtype=self.dtype)
        mask = np.asarray(mask, dtype=bool)
        out = []
        for s in range(0, features.shape[0], chunk):
            logits, _ = self.forward(features[s:s + chunk], mask[s:s + chunk])
            out.append(softmax(logits))
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes), dtype=self.dtype)

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": "classifier",
            "config": self.config.to_dict(),
            "n_slots": self.n_slots,
            "dim": self.dim,
            "train_history": self.train_history,
        }
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "classifier":
            raise CheckpointError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')!r})")
        model = cls(ClassifierConfig.from_dict(meta["config"]), meta["n_slots"], meta["dim"],
                    np.random.default_rng(0))
        model.load_state_dict(tensors)
        model.train_history = meta.get("train_history", [])
        return model


def classify(model: ClassifierModel, state: AcquisitionState) -> np.ndarray:
    """Class probabilities for one acquisition state."""
    if state.features.shape != (model.n_slots, model.dim):
        raise ValueError(f"state features {state.features.shape} do not match model "
                         f"({model.n_slots}, {model.dim})")
    return model.predict_proba(state.features[None], state.mask[None])[0]


def predict_label(model: ClassifierModel, state: AcquisitionState) -> int:
    return int(np.argmax(classify(model, state)))


def sample_train_masks(rng: np.random.Generator, n_studies: int, n_slots: int, mask_rate: float):
    """Independent per-slot keep/drop draws: a slot is kept with probability ``1 - mask_rate``."""
    return rng.random((n_studies, n_slots)) >= mask_rate


def predict_masked(model: ClassifierModel, studies: Sequence[StudyRecord], masks) -> np.ndarray:
    """Argmax labels for each study under the matching mask row."""
    feats, _ = stack_studies(studies)
    masks = np.asarray(masks, dtype=bool)
    probs = model.predict_proba(feats * masks[:, :, None], masks)
    return probs.argmax(axis=-1)


def full_acquisition_bacc(model: ClassifierModel, studies: Sequence[StudyRecord]) -> float:
    masks = np.ones((len(studies), model.n_slots), dtype=bool)
    preds = predict_masked(model, studies, masks)
    return balanced_accuracy(preds, [s.label for s in studies])


def masked_val_loss(model: ClassifierModel, feats, labels, masks) -> float:
    probs = model.predict_proba(feats * masks[:, :, None], masks)
    picked = probs[np.arange(labels.shape[0]), labels].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def train_classifier(train: Sequence[StudyRecord], val: Sequence[StudyRecord],
                     config: ClassifierConfig | None = None, seed: int = 0) -> ClassifierModel:
    """Masked-token training; returns the epoch with best full-acquisition validation bACC.

    Full-acquisition bACC saturates early on easy data, so ties are broken by
    cross-entropy on validation studies under a fixed set of random masks
    (lower wins), then by epoch order.
    """
    config = config or ClassifierConfig()
    if not train or not val:
        raise ValueError("train and val splits must be non-empty")
    rng = np.random.default_rng(seed)
    n_slots, dim = train[0].n_slots, train[0].dim
    model = ClassifierModel(config, n_slots, dim, rng)
    opt = Adam(model.params(), lr=config.lr)
    X, y = stack_studies(train)
    Xv, yv = stack_studies(val)
    # own stream so the tie-break masks do not shift the training draws
    val_masks = sample_train_masks(np.random.default_rng([seed, 1]), len(val), n_slots,
                                   config.mask_rate_train)
    history, best_key, best_state = [], None, None
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        masks = sample_train_masks(rng, len(train), n_slots, config.mask_rate_train)
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            m = masks[idx]
            model.zero_grad()
            loss = model.loss_and_backward((X[idx] * m[:, :, None], m, y[idx]))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch}")
            opt.step()
            losses.append(loss)
        val_bacc = full_acquisition_bacc(model, val)
        val_loss = masked_val_loss(model, Xv, yv, val_masks)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_bacc": val_bacc,
               "val_masked_loss": val_loss}
        history.append(row)
        log.info("classifier epoch %d loss %.4f val bACC %.4f masked val loss %.4f",
                 epoch, row["train_loss"], val_bacc, val_loss)
        key = (val_bacc, -val_loss)
        if best_key is None or key > best_key:
            best_key, best_state = key, model.state_dict()
    model.load_state_dict(best_state)
    model.train_history = history
    return model


class MaskLabelCache:
    """Frozen-classifier predictions for every (study, mask) pair.

    The classifier is fixed while the agent trains, so rewards only depend on
    the acquired subset. All ``2**N`` masks of each study are evaluated up
    front in one batched pass.
    """

    def __init__(self, labels: np.ndarray, index: dict[str, int], n_slots: int):
        self.labels = labels
        self.index = index
        self.n_slots = n_slots

    @classmethod
    def build(cls, model: ClassifierModel, studies: Sequence[StudyRecord]) -> "MaskLabelCache":
        n = model.n_slots
        all_masks = np.stack([code_to_mask(c, n) for c in range(2**n)])
        feats, _ = stack_studies(studies)
        rep_feats = (feats[:, None] * all_masks[None, :, :, None]).reshape(-1, n, model.dim)
        rep_masks = np.broadcast_to(all_masks, (len(studies),) + all_masks.shape).reshape(-1, n)
        probs = model.predict_proba(rep_feats, rep_masks)
        labels = probs.argmax(axis=-1).reshape(len(studies), 2**n)
        return cls(labels, {s.study_id: i for i, s in enumerate(studies)}, n)

    def merged(self, other: "MaskLabelCache") -> "MaskLabelCache":
        offset = self.labels.shape[0]
        index = dict(self.index)
        index.update({k: v + offset for k, v in other.index.items()})
        return MaskLabelCache(np.concatenate([self.labels, other.labels]), index, self.n_slots)

    def __call__(self, study: StudyRecord, state: AcquisitionState) -> int:
        return int(self.labels[self.index[study.study_id], state.mask_code])

    def label_for(self, study_id: str, mask_code: int) -> int:
        return int(self.labels[self.index[study_id], mask_code])
