"""A small causal transformer with a last-token sequence-classification head.

Pre-norm blocks (layer norm, masked multi-head self-attention, residual;
layer norm, GELU feed-forward, residual), learned token and positional
embeddings, and a linear head over the hidden state at the final sequence
position. Inputs are left-padded, so that position is always a real token.

Positional indices are right-aligned against the model's context length (the
last real token always receives index context_length - 1) and pad positions
are excluded from attention keys. Together these make the classified logits
independent of the amount of left padding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .errors import MetricUndefinedError, NumericalError, PretrainDataMissingError
from .metrics import auroc

INIT_SCALE = 0.02


class TransformerSequenceClassifier(BaseEstimator):
    """Binary classifier over left-padded token-id sequences.

    Parameters follow the toy-scale defaults for the architecture and the
    documented training hyperparameters (4 epochs, learning rate 5e-5, weight
    decay 0.01, batch size 32). ``X`` is an int array of shape (n, seq_len)
    with ``pad_id`` marking left padding; ``y`` holds binary labels.
    """

    def __init__(self, n_layers=4, n_heads=4, d_model=128, d_ff=512,
                 context_length=64, vocab_size=4096, pad_id=0,
                 epochs=4, learning_rate=5e-5, weight_decay=0.01,
                 batch_size=32, seed=0):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.context_length = context_length
        self.vocab_size = vocab_size
        self.pad_id = pad_id
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    # -- construction -----------------------------------------------------

    def _validate_config(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "context_length", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def _init_params(self, rng: np.random.Generator) -> dict[str, ad.Tensor]:
        def weight(*shape):
            return ad.Tensor(rng.normal(0.0, INIT_SCALE, size=shape), requires_grad=True)

        def zeros(*shape):
            return ad.Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return ad.Tensor(np.ones(shape), requires_grad=True)

        params = {
            "tok_emb": weight(self.vocab_size, self.d_model),
            "pos_emb": weight(self.context_length, self.d_model),
            "final_ln_gain": ones(self.d_model),
            "final_ln_bias": zeros(self.d_model),
            "head_w": weight(self.d_model, 2),
            "head_b": zeros(2),
        }
        for i in range(self.n_layers):
            params.update({
                f"block{i}.ln1_gain": ones(self.d_model),
                f"block{i}.ln1_bias": zeros(self.d_model),
                f"block{i}.wq": weight(self.d_model, self.d_model),
                f"block{i}.bq": zeros(self.d_model),
                f"block{i}.wk": weight(self.d_model, self.d_model),
                f"block{i}.bk": zeros(self.d_model),
                f"block{i}.wv": weight(self.d_model, self.d_model),
                f"block{i}.bv": zeros(self.d_model),
                f"block{i}.wo": weight(self.d_model, self.d_model),
                f"block{i}.bo": zeros(self.d_model),
                f"block{i}.ln2_gain": ones(self.d_model),
                f"block{i}.ln2_bias": zeros(self.d_model),
                f"block{i}.ff_w1": weight(self.d_model, self.d_ff),
                f"block{i}.ff_b1": zeros(self.d_ff),
                f"block{i}.ff_w2": weight(self.d_ff, self.d_model),
                f"block{i}.ff_b2": zeros(self.d_model),
            })
        return params

    def initialize(self) -> "TransformerSequenceClassifier":
        """Set up seeded random weights without training (zero-shot path)."""
        self._validate_config()
        self.params_ = self._init_params(np.random.default_rng(self.seed))
        self.loss_trace_ = []
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() or initialize() first")

    def parameter_list(self) -> list[ad.Tensor]:
        self._check_fitted()
        return [self.params_[name] for name in sorted(self.params_)]

    # -- forward ----------------------------------------------------------

    def _attention_bias(self, ids: np.ndarray) -> np.ndarray:
        """(batch, 1, seq, seq) additive bias: 0 where key j <= query i and
        key j is a real token, MASKED_SCORE elsewhere."""
        batch, seq = ids.shape
        causal = np.tril(np.ones((seq, seq), dtype=bool))
        real_keys = (ids != self.pad_id)[:, None, None, :]
        allowed = causal[None, None, :, :] & real_keys
        return np.where(allowed, 0.0, ad.MASKED_SCORE)

    def _forward(self, ids: np.ndarray, collect_hidden: list | None = None) -> ad.Tensor:
        p = self.params_
        batch, seq = ids.shape
        if seq > self.context_length:
            raise ValueError(f"sequence length {seq} exceeds context length {self.context_length}")
        if np.any(ids[:, -1] == self.pad_id):
            raise ValueError("final position must hold a real token (inputs are left-padded)")
        head_dim = self.d_model // self.n_heads
        positions = np.arange(self.context_length - seq, self.context_length)
        bias = self._attention_bias(ids)

        x = ad.add(ad.embedding(p["tok_emb"], ids), ad.embedding(p["pos_emb"], positions))
        if collect_hidden is not None:
            collect_hidden.append(x.data.copy())
        for i in range(self.n_layers):
            h = ad.layer_norm(x, p[f"block{i}.ln1_gain"], p[f"block{i}.ln1_bias"])

            def project(w, b):
                out = ad.add(ad.matmul(h, p[w]), p[b])
                out = ad.reshape(out, (batch, seq, self.n_heads, head_dim))
                return ad.swapaxes(out, 1, 2)

            q = project(f"block{i}.wq", f"block{i}.bq")
            k = project(f"block{i}.wk", f"block{i}.bk")
            v = project(f"block{i}.wv", f"block{i}.bv")
            scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(head_dim))
            weights = ad.softmax(ad.add(scores, bias), axis=-1)
            context = ad.matmul(weights, v)
            context = ad.reshape(ad.swapaxes(context, 1, 2), (batch, seq, self.d_model))
            x = ad.add(x, ad.add(ad.matmul(context, p[f"block{i}.wo"]), p[f"block{i}.bo"]))

            h2 = ad.layer_norm(x, p[f"block{i}.ln2_gain"], p[f"block{i}.ln2_bias"])
            inner = ad.gelu(ad.add(ad.matmul(h2, p[f"block{i}.ff_w1"]), p[f"block{i}.ff_b1"]))
            x = ad.add(x, ad.add(ad.matmul(inner, p[f"block{i}.ff_w2"]), p[f"block{i}.ff_b2"]))
            if collect_hidden is not None:
                collect_hidden.append(x.data.copy())

        x = ad.layer_norm(x, p["final_ln_gain"], p["final_ln_bias"])
        last = ad.last_position(x)
        return ad.add(ad.matmul(last, p["head_w"]), p["head_b"])

    def forward_logits(self, ids: np.ndarray) -> np.ndarray:
        """Class logits, shape (n, 2), without recording gradients."""
        self._check_fitted()
        with ad.no_grad():
            return self._forward(np.asarray(ids, dtype=np.int64)).data

    def forward_hidden_states(self, ids: np.ndarray) -> list[np.ndarray]:
        """Hidden states after the embedding sum and after each block."""
        self._check_fitted()
        hidden: list[np.ndarray] = []
        with ad.no_grad():
            self._forward(np.asarray(ids, dtype=np.int64), collect_hidden=hidden)
        return hidden

    # -- training ---------------------------------------------------------

    def fit(self, X, y, validation=None):
        """Train from fresh seeded weights for ``epochs`` epochs."""
        self._validate_config()
        rng = np.random.default_rng(self.seed)
        self.params_ = self._init_params(rng)
        self.loss_trace_ = []
        self.validation_losses_ = []
        self.validation_aurocs_ = []
        self._train(np.asarray(X, dtype=np.int64), np.asarray(y, dtype=np.int64),
                    self.epochs, rng, validation=validation)
        return self

    def finetune(self, X, y, epochs=None, learning_rate=None, weight_decay=None, seed=None):
        """Continue training the current weights on new examples."""
        self._check_fitted()
        rng = np.random.default_rng(self.seed if seed is None else seed)
        self._train(np.asarray(X, dtype=np.int64), np.asarray(y, dtype=np.int64),
                    self.epochs if epochs is None else epochs, rng,
                    learning_rate=learning_rate, weight_decay=weight_decay)
        return self

    def _train(self, ids, labels, epochs, rng, learning_rate=None, weight_decay=None, validation=None):
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        if len(ids) == 0:
            raise ValueError("cannot train on zero examples")
        optimizer = ad.AdamW(
            self.parameter_list(),
            learning_rate=self.learning_rate if learning_rate is None else learning_rate,
            weight_decay=self.weight_decay if weight_decay is None else weight_decay)
        if not hasattr(self, "loss_trace_"):
            self.loss_trace_ = []
        step = 0
        for _ in range(epochs):
            order = rng.permutation(len(ids))
            epoch_losses = []
            for start in range(0, len(ids), self.batch_size):
                batch = order[start:start + self.batch_size]
                try:
                    loss = ad.cross_entropy(self._forward(ids[batch]), labels[batch])
                    optimizer.zero_grad()
                    ad.backward(loss)
                    optimizer.step()
                except NumericalError as err:
                    raise NumericalError(err.op, step=step) from err
                epoch_losses.append(loss.item())
                step += 1
            self.loss_trace_.append(float(np.mean(epoch_losses)))
            if validation is not None:
                val_ids, val_labels = validation
                probs = self.predict_proba(val_ids)
                true_probs = probs[np.arange(len(val_labels)), np.asarray(val_labels, dtype=np.int64)]
                if not hasattr(self, "validation_losses_"):
                    self.validation_losses_, self.validation_aurocs_ = [], []
                self.validation_losses_.append(float(-np.log(np.clip(true_probs, 1e-300, None)).mean()))
                try:
                    self.validation_aurocs_.append(auroc(probs[:, 1], val_labels))
                except MetricUndefinedError:
                    self.validation_aurocs_.append(None)

    # -- inference --------------------------------------------------------

    def predict_proba(self, X, eval_batch_size: int = 256) -> np.ndarray:
        self._check_fitted()
        ids = np.asarray(X, dtype=np.int64)
        chunks = []
        with ad.no_grad():
            for start in range(0, len(ids), eval_batch_size):
                logits = self._forward(ids[start:start + eval_batch_size])
                chunks.append(ad.softmax(logits, axis=-1).data)
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def predict_positive_probability(self, ids_row: np.ndarray) -> float:
        """Positive-class probability for one left-padded id sequence."""
        return float(self.predict_proba(np.asarray(ids_row)[None, :])[0, 1])

    # -- persistence --------------------------------------------------------

    def save(self, path) -> str:
        """Write weights to the checkpoint container plus a config sidecar.

        Returns the container's sha256 checksum.
        """
        self._check_fitted()
        checksum = ad.save_checkpoint({name: t.data for name, t in self.params_.items()}, path)
        with open(str(path) + ".config.json", "w", encoding="utf-8") as fh:
            json.dump(self.get_params(), fh, indent=2, sort_keys=True)
        return checksum

    @classmethod
    def load(cls, path) -> "TransformerSequenceClassifier":
        with open(str(path) + ".config.json", "r", encoding="utf-8") as fh:
            model = cls(**json.load(fh))
        arrays = ad.load_checkpoint(path)
        model._validate_config()
        model.params_ = {name: ad.Tensor(array, requires_grad=True) for name, array in arrays.items()}
        model.loss_trace_ = []
        return model

    def clone_with_weights(self) -> "TransformerSequenceClassifier":
        """Deep copy of config and weights (for per-cell fine-tuning)."""
        self._check_fitted()
        other = TransformerSequenceClassifier(**self.get_params())
        other.params_ = {name: ad.Tensor(t.data.copy(), requires_grad=True)
                         for name, t in self.params_.items()}
        other.loss_trace_ = list(getattr(self, "loss_trace_", []))
        return other


@dataclass
class PretrainResult:
    classifier: TransformerSequenceClassifier
    train_losses: list[float]
    validation_losses: list[float]
    validation_aurocs: list[float]


def pretrain_on_common(classifier: TransformerSequenceClassifier,
                       X, y, validation_fraction: float = 0.2,
                       seed: int | None = None) -> PretrainResult:
    """Train on the common-tissue pool with a held-out validation split.

    The classifier keeps its final-epoch weights; per-epoch validation loss
    and AUROC are recorded for hyperparameter selection.
    """
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise PretrainDataMissingError("no common-tissue examples to pretrain on")
    rng = np.random.default_rng(classifier.seed if seed is None else seed)
    val_idx: list[int] = []
    for label in (0, 1):
        members = np.flatnonzero(y == label)
        n_val = max(1, int(np.floor(validation_fraction * len(members) + 0.5))) if len(members) > 1 else 0
        if len(members) > n_val:
            val_idx.extend(members[rng.permutation(len(members))[:n_val]])
    val_mask = np.zeros(len(X), dtype=bool)
    val_mask[val_idx] = True
    classifier.fit(X[~val_mask], y[~val_mask], validation=(X[val_mask], y[val_mask]))
    return PretrainResult(
        classifier=classifier,
        train_losses=list(classifier.loss_trace_),
        validation_losses=list(classifier.validation_losses_),
        validation_aurocs=list(classifier.validation_aurocs_),
    )
