"""Tabular comparison models over indexed categorical + continuous features.

Rows are (drug1, drug2, cell line) category indices plus the two sensitivity
values; tissue is deliberately excluded. Categories unseen at encoding time
map to a reserved unknown index. One-hot coding is realized as equality
splits on the index columns, which is equivalent for trees and far smaller.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .errors import NumericalError
from .ingest import LabeledExample

UNKNOWN_INDEX = 0
INIT_SCALE = 0.02


@dataclass
class CategoryVocabularies:
    """Category-to-index maps built from training data only (index 0 = unknown)."""

    drug_to_index: dict[str, int]
    cell_to_index: dict[str, int]
    drug2_to_index: dict[str, int] | None = None
    shared_drug_vocab: bool = True

    @classmethod
    def from_examples(cls, examples: Iterable[LabeledExample], shared_drug_vocab: bool = True) -> "CategoryVocabularies":
        drugs1, drugs2, cells = set(), set(), set()
        for ex in examples:
            drugs1.add(ex.record.drug1)
            drugs2.add(ex.record.drug2)
            cells.add(ex.record.cell_line)
        if shared_drug_vocab:
            drug_map = {name: i + 1 for i, name in enumerate(sorted(drugs1 | drugs2))}
            drug2_map = None
        else:
            drug_map = {name: i + 1 for i, name in enumerate(sorted(drugs1))}
            drug2_map = {name: i + 1 for i, name in enumerate(sorted(drugs2))}
        cell_map = {name: i + 1 for i, name in enumerate(sorted(cells))}
        return cls(drug_map, cell_map, drug2_map, shared_drug_vocab)

    @property
    def n_drug_indices(self) -> int:
        second = len(self.drug2_to_index) if self.drug2_to_index else 0
        return max(len(self.drug_to_index), second) + 1

    @property
    def n_cell_indices(self) -> int:
        return len(self.cell_to_index) + 1

    def drug1_index(self, name: str) -> int:
        return self.drug_to_index.get(name, UNKNOWN_INDEX)

    def drug2_index(self, name: str) -> int:
        table = self.drug_to_index if self.drug2_to_index is None else self.drug2_to_index
        return table.get(name, UNKNOWN_INDEX)

    def cell_index(self, name: str) -> int:
        return self.cell_to_index.get(name, UNKNOWN_INDEX)


def encode_rows(examples: Sequence[LabeledExample], vocabularies: CategoryVocabularies) -> tuple[np.ndarray, np.ndarray]:
    """Encode examples as (n, 5) rows [drug1, drug2, cell, ri1, ri2] plus labels."""
    X = np.zeros((len(examples), 5), dtype=np.float64)
    y = np.zeros(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        r = ex.record
        X[i] = (vocabularies.drug1_index(r.drug1), vocabularies.drug2_index(r.drug2),
                vocabularies.cell_index(r.cell_line), r.ri1, r.ri2)
        y[i] = ex.label
    return X, y


# ---------------------------------------------------------------------------
# Gradient-boosted trees
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    """Split node (equality test for categorical features, threshold for
    continuous) or leaf when ``left`` is None."""

    feature: int = -1
    is_categorical: bool = False
    threshold: float = 0.0
    category: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _sigmoid(s: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-s))


def _log_loss(margins: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margins) - y * margins))


class GradientBoostedTreesClassifier(BaseEstimator):
    """Second-order boosting on logistic loss with exact greedy splits.

    Defaults document the reference configuration (1000 trees, depth 20,
    shrinkage 0.3); tests and the bundled experiment profile use a smaller
    desk-scale setting. Split search is deterministic: features are scanned
    in index order and only strictly better gains replace the incumbent.
    """

    def __init__(self, n_trees=1000, max_depth=20, shrinkage=0.3, reg_lambda=1.0,
                 min_samples_split=2, categorical_features=(0, 1, 2)):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.shrinkage = shrinkage
        self.reg_lambda = reg_lambda
        self.min_samples_split = min_samples_split
        self.categorical_features = categorical_features

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError(f"expected (n, d) features with n labels, got {X.shape} and {y.shape}")
        self.trees_: list[TreeNode] = []
        self.train_loss_trace_: list[float] = []
        prevalence = float(y.mean()) if len(y) else 0.5
        self.base_rate_ = prevalence
        self.degenerate_ = len(y) == 0 or prevalence in (0.0, 1.0)
        if self.degenerate_:
            # Constant model at the base rate; nothing to boost against.
            self.base_score_ = float(np.log(prevalence / (1.0 - prevalence))) if 0.0 < prevalence < 1.0 else 0.0
            return self
        self.base_score_ = float(np.log(prevalence / (1.0 - prevalence)))
        margins = np.full(len(y), self.base_score_)
        self.train_loss_trace_.append(_log_loss(margins, y))
        categorical = set(self.categorical_features)
        for _ in range(self.n_trees):
            p = _sigmoid(margins)
            gradient = p - y
            hessian = p * (1.0 - p)
            tree = self._build_node(X, gradient, hessian, np.arange(len(y)), categorical, depth=0)
            self.trees_.append(tree)
            margins = margins + self.shrinkage * _tree_predict(tree, X)
            self.train_loss_trace_.append(_log_loss(margins, y))
        return self

    def _leaf(self, gradient, hessian, idx) -> TreeNode:
        g = float(gradient[idx].sum())
        h = float(hessian[idx].sum())
        return TreeNode(value=-g / (h + self.reg_lambda))

    def _build_node(self, X, gradient, hessian, idx, categorical, depth) -> TreeNode:
        if depth >= self.max_depth or len(idx) < self.min_samples_split:
            return self._leaf(gradient, hessian, idx)
        split = self._best_split(X, gradient, hessian, idx, categorical)
        if split is None:
            return self._leaf(gradient, hessian, idx)
        feature, is_cat, cut, left_mask = split
        node = TreeNode(feature=feature, is_categorical=is_cat)
        if is_cat:
            node.category = cut
        else:
            node.threshold = cut
        node.left = self._build_node(X, gradient, hessian, idx[left_mask], categorical, depth + 1)
        node.right = self._build_node(X, gradient, hessian, idx[~left_mask], categorical, depth + 1)
        return node

    def _best_split(self, X, gradient, hessian, idx, categorical):
        lam = self.reg_lambda
        g = gradient[idx]
        h = hessian[idx]
        total_g = g.sum()
        total_h = h.sum()
        parent = total_g * total_g / (total_h + lam)
        best = None
        best_gain = 0.0
        for feature in range(X.shape[1]):
            column = X[idx, feature]
            if feature in categorical:
                values, inverse = np.unique(column, return_inverse=True)
                if len(values) < 2:
                    continue
                g_per = np.zeros(len(values))
                h_per = np.zeros(len(values))
                np.add.at(g_per, inverse, g)
                np.add.at(h_per, inverse, h)
                for vi, value in enumerate(values):
                    gain = 0.5 * (g_per[vi] ** 2 / (h_per[vi] + lam)
                                  + (total_g - g_per[vi]) ** 2 / (total_h - h_per[vi] + lam)
                                  - parent)
                    if gain > best_gain:
                        best_gain = gain
                        best = (feature, True, float(value), inverse == vi)
            else:
                order = np.argsort(column, kind="stable")
                sorted_col = column[order]
                cum_g = np.cumsum(g[order])
                cum_h = np.cumsum(h[order])
                distinct = np.flatnonzero(sorted_col[1:] != sorted_col[:-1])
                for cut_pos in distinct:
                    gl, hl = cum_g[cut_pos], cum_h[cut_pos]
                    gain = 0.5 * (gl * gl / (hl + lam)
                                  + (total_g - gl) ** 2 / (total_h - hl + lam)
                                  - parent)
                    if gain > best_gain:
                        threshold = 0.5 * (sorted_col[cut_pos] + sorted_col[cut_pos + 1])
                        best_gain = gain
                        best = (feature, False, float(threshold), column < threshold)
        return best

    def _check_fitted(self):
        if not hasattr(self, "trees_"):
            raise NotFittedError("call fit() first")

    def decision_margin(self, X) -> np.ndarray:
        """Raw additive margin: base score plus shrinkage-scaled leaf sums."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        margins = np.full(len(X), self.base_score_)
        for tree in self.trees_:
            margins += self.shrinkage * _tree_predict(tree, X)
        return margins

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        if self.degenerate_:
            p = np.full(len(X), self.base_rate_)
        else:
            p = _sigmoid(self.decision_margin(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


def _tree_predict(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.zeros(len(X))
    stack = [(tree, np.arange(len(X)))]
    while stack:
        node, idx = stack.pop()
        if not len(idx):
            continue
        if node.is_leaf:
            out[idx] = node.value
            continue
        column = X[idx, node.feature]
        left = column == node.category if node.is_categorical else column < node.threshold
        stack.append((node.left, idx[left]))
        stack.append((node.right, idx[~left]))
    return out


def save_forest(model: GradientBoostedTreesClassifier, path) -> None:
    """Serialize the fitted forest as structured text (exact float round-trip)."""
    model._check_fitted()
    lines = [
        "forest-version 1",
        f"base_score {model.base_score_!r}",
        f"base_rate {model.base_rate_!r}",
        f"shrinkage {model.shrinkage!r}",
        f"degenerate {int(model.degenerate_)}",
        f"n_trees {len(model.trees_)}",
    ]
    for t, tree in enumerate(model.trees_):
        nodes: list[str] = []
        _collect_nodes(tree, nodes)
        lines.append(f"tree {t} {len(nodes)}")
        lines.extend(nodes)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _collect_nodes(node: TreeNode, lines: list[str]) -> int:
    my_id = len(lines)
    lines.append("")  # placeholder until children are numbered
    if node.is_leaf:
        lines[my_id] = f"leaf {my_id} {node.value!r}"
        return my_id
    left_id = _collect_nodes(node.left, lines)
    right_id = _collect_nodes(node.right, lines)
    kind = "cat" if node.is_categorical else "num"
    cut = node.category if node.is_categorical else node.threshold
    lines[my_id] = f"node {my_id} {kind} {node.feature} {cut!r} {left_id} {right_id}"
    return my_id


def load_forest(path) -> GradientBoostedTreesClassifier:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("tree "):
        key, value = lines[i].split(" ", 1)
        header[key] = value
        i += 1
    model = GradientBoostedTreesClassifier(shrinkage=float(header["shrinkage"]))
    model.base_score_ = float(header["base_score"])
    model.base_rate_ = float(header["base_rate"])
    model.degenerate_ = bool(int(header["degenerate"]))
    model.trees_ = []
    model.train_loss_trace_ = []
    while i < len(lines):
        _, _, n_nodes = lines[i].split()
        block = lines[i + 1:i + 1 + int(n_nodes)]
        model.trees_.append(_parse_tree(block))
        i += 1 + int(n_nodes)
    return model


def _parse_tree(block: list[str]) -> TreeNode:
    nodes: dict[int, TreeNode] = {}
    links: dict[int, tuple[int, int]] = {}
    for line in block:
        parts = line.split()
        if parts[0] == "leaf":
            nodes[int(parts[1])] = TreeNode(value=float(parts[2]))
        else:
            node_id = int(parts[1])
            node = TreeNode(feature=int(parts[3]), is_categorical=parts[2] == "cat")
            if node.is_categorical:
                node.category = float(parts[4])
            else:
                node.threshold = float(parts[4])
            nodes[node_id] = node
            links[node_id] = (int(parts[5]), int(parts[6]))
    for node_id, (left_id, right_id) in links.items():
        nodes[node_id].left = nodes[left_id]
        nodes[node_id].right = nodes[right_id]
    return nodes[0]


# ---------------------------------------------------------------------------
# Attention over categorical embeddings
# ---------------------------------------------------------------------------

class TabularAttentionClassifier(BaseEstimator):
    """Self-attention over the three categorical embeddings, then a
    feed-forward head over the contextual embeddings plus the two
    standardized sensitivities.

    ``fit`` trains with an internal stratified validation split and restores
    the weights of the best-validation-loss epoch; ``finetune`` runs extra
    epochs (default 1) on the current weights without reselection.
    """

    def __init__(self, embed_dim=32, n_layers=2, n_heads=2, d_ff=64, hidden_dim=64,
                 epochs=50, learning_rate=1e-4, weight_decay=0.01, batch_size=32,
                 validation_fraction=0.2, drug_vocab_size=None, cell_vocab_size=None,
                 seed=0):
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.drug_vocab_size = drug_vocab_size
        self.cell_vocab_size = cell_vocab_size
        self.seed = seed

    def _init_params(self, rng, n_drugs, n_cells):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim={self.embed_dim} not divisible by n_heads={self.n_heads}")

        def weight(*shape):
            return ad.Tensor(rng.normal(0.0, INIT_SCALE, size=shape), requires_grad=True)

        def zeros(*shape):
            return ad.Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return ad.Tensor(np.ones(shape), requires_grad=True)

        d = self.embed_dim
        params = {
            "drug_emb": weight(n_drugs, d),
            "cell_emb": weight(n_cells, d),
            "column_emb": weight(3, d),
            "final_ln_gain": ones(d),
            "final_ln_bias": zeros(d),
            "mlp_w1": weight(3 * d + 2, self.hidden_dim),
            "mlp_b1": zeros(self.hidden_dim),
            "mlp_w2": weight(self.hidden_dim, 2),
            "mlp_b2": zeros(2),
        }
        for i in range(self.n_layers):
            params.update({
                f"block{i}.ln1_gain": ones(d), f"block{i}.ln1_bias": zeros(d),
                f"block{i}.wq": weight(d, d), f"block{i}.bq": zeros(d),
                f"block{i}.wk": weight(d, d), f"block{i}.bk": zeros(d),
                f"block{i}.wv": weight(d, d), f"block{i}.bv": zeros(d),
                f"block{i}.wo": weight(d, d), f"block{i}.bo": zeros(d),
                f"block{i}.ln2_gain": ones(d), f"block{i}.ln2_bias": zeros(d),
                f"block{i}.ff_w1": weight(d, self.d_ff), f"block{i}.ff_b1": zeros(self.d_ff),
                f"block{i}.ff_w2": weight(self.d_ff, d), f"block{i}.ff_b2": zeros(d),
            })
        return params

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() first")

    def parameter_list(self):
        self._check_fitted()
        return [self.params_[name] for name in sorted(self.params_)]

    def _forward(self, X: np.ndarray) -> ad.Tensor:
        p = self.params_
        batch = len(X)
        d = self.embed_dim
        head_dim = d // self.n_heads
        ids = X[:, :3].astype(np.int64)
        continuous = (X[:, 3:5] - self.continuous_mean_) / self.continuous_std_

        def column(table, col):
            return ad.reshape(ad.embedding(p[table], ids[:, col]), (batch, 1, d))

        x = ad.concat(ad.concat(column("drug_emb", 0), column("drug_emb", 1), axis=1),
                      column("cell_emb", 2), axis=1)
        x = ad.add(x, p["column_emb"])
        for i in range(self.n_layers):
            h = ad.layer_norm(x, p[f"block{i}.ln1_gain"], p[f"block{i}.ln1_bias"])

            def project(w, b):
                out = ad.add(ad.matmul(h, p[w]), p[b])
                out = ad.reshape(out, (batch, 3, self.n_heads, head_dim))
                return ad.swapaxes(out, 1, 2)

            q = project(f"block{i}.wq", f"block{i}.bq")
            k = project(f"block{i}.wk", f"block{i}.bk")
            v = project(f"block{i}.wv", f"block{i}.bv")
            scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / np.sqrt(head_dim))
            context = ad.matmul(ad.softmax(scores, axis=-1), v)
            context = ad.reshape(ad.swapaxes(context, 1, 2), (batch, 3, d))
            x = ad.add(x, ad.add(ad.matmul(context, p[f"block{i}.wo"]), p[f"block{i}.bo"]))
            h2 = ad.layer_norm(x, p[f"block{i}.ln2_gain"], p[f"block{i}.ln2_bias"])
            inner = ad.gelu(ad.add(ad.matmul(h2, p[f"block{i}.ff_w1"]), p[f"block{i}.ff_b1"]))
            x = ad.add(x, ad.add(ad.matmul(inner, p[f"block{i}.ff_w2"]), p[f"block{i}.ff_b2"]))
        x = ad.layer_norm(x, p["final_ln_gain"], p["final_ln_bias"])
        flat = ad.reshape(x, (batch, 3 * d))
        combined = ad.concat(flat, ad.Tensor(continuous), axis=1)
        hidden = ad.gelu(ad.add(ad.matmul(combined, p["mlp_w1"]), p["mlp_b1"]))
        return ad.add(ad.matmul(hidden, p["mlp_w2"]), p["mlp_b2"])

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        n_drugs = self.drug_vocab_size or int(X[:, :2].max()) + 1
        n_cells = self.cell_vocab_size or int(X[:, 2].max()) + 1
        self.params_ = self._init_params(rng, n_drugs, n_cells)
        self._optimizer = None
        self.continuous_mean_ = X[:, 3:5].mean(axis=0)
        self.continuous_std_ = np.maximum(X[:, 3:5].std(axis=0), 1e-8)
        train_idx, val_idx = self._validation_split(y, rng)
        self.train_losses_ = []
        self.validation_losses_ = []
        best_loss = np.inf
        best_params = None
        self.best_epoch_ = -1
        for epoch in range(self.epochs):
            self.train_losses_.append(self._run_epoch(X[train_idx], y[train_idx], rng))
            if len(val_idx):
                val_loss = self._eval_loss(X[val_idx], y[val_idx])
                self.validation_losses_.append(val_loss)
                if val_loss < best_loss:
                    best_loss = val_loss
                    best_params = {k: t.data.copy() for k, t in self.params_.items()}
                    self.best_epoch_ = epoch
        if best_params is not None:
            for name, array in best_params.items():
                self.params_[name].data = array
        return self

    def _validation_split(self, y, rng):
        fraction = self.validation_fraction
        val: list[int] = []
        if fraction > 0:
            for label in (0, 1):
                members = np.flatnonzero(y == label)
                n_val = int(np.floor(fraction * len(members) + 0.5))
                if 1 <= n_val < len(members):
                    val.extend(members[rng.permutation(len(members))[:n_val]])
        mask = np.zeros(len(y), dtype=bool)
        mask[val] = True
        return np.flatnonzero(~mask), np.flatnonzero(mask)

    def _run_epoch(self, X, y, rng) -> float:
        optimizer = getattr(self, "_optimizer", None)
        if optimizer is None:
            optimizer = ad.AdamW(self.parameter_list(),
                                 learning_rate=self.learning_rate,
                                 weight_decay=self.weight_decay)
            self._optimizer = optimizer
            self._step = 0
        order = rng.permutation(len(X))
        losses = []
        for start in range(0, len(X), self.batch_size):
            batch = order[start:start + self.batch_size]
            try:
                loss = ad.cross_entropy(self._forward(X[batch]), y[batch])
                optimizer.zero_grad()
                ad.backward(loss)
                optimizer.step()
            except NumericalError as err:
                raise NumericalError(err.op, step=self._step) from err
            losses.append(loss.item())
            self._step += 1
        return float(np.mean(losses))

    def _eval_loss(self, X, y) -> float:
        probs = self.predict_proba(X)
        true_probs = probs[np.arange(len(y)), y]
        return float(-np.log(np.clip(true_probs, 1e-300, None)).mean())

    def finetune(self, X, y, epochs: int = 1):
        """Run extra epochs at the configured rate; no best-epoch reselection."""
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if len(X) == 0:
            raise ValueError("cannot fine-tune on zero examples")
        rng = np.random.default_rng(self.seed + 1)
        self._optimizer = None  # fresh moments for the adaptation run
        for _ in range(epochs):
            self.train_losses_.append(self._run_epoch(X, y, rng))
        return self

    def predict_proba(self, X, eval_batch_size: int = 512) -> np.ndarray:
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        chunks = []
        with ad.no_grad():
            for start in range(0, len(X), eval_batch_size):
                logits = self._forward(X[start:start + eval_batch_size])
                chunks.append(ad.softmax(logits, axis=-1).data)
        return np.concatenate(chunks, axis=0)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def clone_with_weights(self) -> "TabularAttentionClassifier":
        self._check_fitted()
        other = TabularAttentionClassifier(**self.get_params())
        other.params_ = {k: ad.Tensor(t.data.copy(), requires_grad=True) for k, t in self.params_.items()}
        other.continuous_mean_ = self.continuous_mean_.copy()
        other.continuous_std_ = self.continuous_std_.copy()
        other.train_losses_ = list(self.train_losses_)
        other.validation_losses_ = list(self.validation_losses_)
        other.best_epoch_ = self.best_epoch_
        return other

    def save(self, path) -> str:
        self._check_fitted()
        arrays = {name: t.data for name, t in self.params_.items()}
        arrays["continuous_mean"] = self.continuous_mean_
        arrays["continuous_std"] = self.continuous_std_
        checksum = ad.save_checkpoint(arrays, path)
        with open(str(path) + ".config.json", "w", encoding="utf-8") as fh:
            json.dump(self.get_params(), fh, indent=2, sort_keys=True)
        return checksum

    @classmethod
    def load(cls, path) -> "TabularAttentionClassifier":
        with open(str(path) + ".config.json", "r", encoding="utf-8") as fh:
            model = cls(**json.load(fh))
        arrays = ad.load_checkpoint(path)
        model.continuous_mean_ = arrays.pop("continuous_mean")
        model.continuous_std_ = arrays.pop("continuous_std")
        model.params_ = {name: ad.Tensor(a, requires_grad=True) for name, a in arrays.items()}
        model.train_losses_ = []
        model.validation_losses_ = []
        model.best_epoch_ = -1
        return model
