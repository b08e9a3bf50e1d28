"""Downstream evaluation of frozen backbone features.

Patch-level linear and k-NN probes, slide-level bag classifiers (mean and
gated-attention pooling), and accuracy / macro-AUC / macro-F1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .checkpoint import Checkpoint
from .data import SyntheticWsiDataset
from .errors import InvalidInputError, ShapeMismatchError
from .mathutils import logsumexp, softmax
from .model import ModelParams, encode


@dataclass(frozen=True)
class EvalConfig:
    probe_lr: float = 0.5
    probe_epochs: int = 300
    probe_l2: float = 1e-4
    knn_k: int = 10
    bag_lr: float = 0.05
    bag_epochs: int = 300
    bag_l2: float = 1e-4
    attention_dim: int = 16
    seed: int = 0


@dataclass
class EvaluationReport:
    accuracy: float
    macro_auc: float
    macro_f1: float
    per_class: list[dict]
    n: int
    undefined_auc_classes: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# --- metrics ----------------------------------------------------------------

def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks (ties count one half)."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC undefined without both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(y_true, y_pred, scores, num_classes: int | None = None) -> EvaluationReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(y_true) == 0 or len(y_true) != len(y_pred) or len(scores) != len(y_true):
        raise InvalidInputError("labels, predictions and scores must be non-empty and aligned")
    if scores.ndim == 1:
        scores = np.stack([-scores, scores], axis=1)
    K = num_classes if num_classes is not None else scores.shape[1]
    if scores.shape[1] != K:
        raise ShapeMismatchError(f"scores have {scores.shape[1]} columns for {K} classes")
    if y_true.min() < 0 or y_true.max() >= K or y_pred.min() < 0 or y_pred.max() >= K:
        raise InvalidInputError(f"labels must lie in [0, {K})")

    per_class, aucs, f1s, undefined = [], [], [], []
    for c in range(K):
        t, p = y_true == c, y_pred == c
        tp = int(np.sum(t & p))
        fp = int(np.sum(~t & p))
        fn = int(np.sum(t & ~p))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if t.any() or p.any():
            f1s.append(f1)
        auc = None
        if 0 < t.sum() < len(t):
            auc = binary_auc(t, scores[:, c])
            aucs.append(auc)
        else:
            undefined.append(c)
        per_class.append({"class": c, "support": int(t.sum()), "predicted": int(p.sum()),
                          "precision": precision, "recall": recall, "f1": f1, "auc": auc})
    return EvaluationReport(
        accuracy=float(np.mean(y_true == y_pred)),
        macro_auc=float(np.mean(aucs)) if aucs else float("nan"),
        macro_f1=float(np.mean(f1s)) if f1s else 0.0,
        per_class=per_class,
        n=int(len(y_true)),
        undefined_auc_classes=undefined,
    )


# --- feature extraction -------------------------------------------------------

def extract_features(model, patches) -> np.ndarray:
    """Backbone output z of the query encoder; the projector is not applied."""
    params = model.params_q if isinstance(model, Checkpoint) else model
    if not isinstance(params, ModelParams):
        raise InvalidInputError("expected a Checkpoint or ModelParams")
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    if patches.shape[1] != params.dims.input_dim:
        raise ShapeMismatchError(
            f"patches have dim {patches.shape[1]}, model expects {params.dims.input_dim}"
        )
    return encode(params, patches)


# --- softmax regression -----------------------------------------------------------

@dataclass
class LinearModel:
    weight: np.ndarray   # (K, d)
    bias: np.ndarray     # (K,)
    mean: np.ndarray
    scale: np.ndarray
    losses: list[float]

    def scores(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return softmax(z @ self.weight.T + self.bias, axis=1)


def _standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    return mean, np.where(scale > 1e-8, scale, 1.0)


def fit_softmax_regression(x, y, num_classes: int, lr: float = 0.5, epochs: int = 300,
                           l2: float = 1e-4) -> LinearModel:
    """Full-batch gradient descent on the mean cross-entropy + l2/2 ||W||^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise InvalidInputError("probe training data must contain at least two classes")
    mean, scale = _standardizer(x)
    xs = (x - mean) / scale
    n, d = xs.shape
    W = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    losses = []
    for _ in range(epochs):
        logits = xs @ W.T + b
        lse = logsumexp(logits, axis=1)
        losses.append(float(np.mean(lse - logits[np.arange(n), y]) + 0.5 * l2 * np.sum(W * W)))
        d_logits = (np.exp(logits - lse[:, None]) - onehot) / n
        W -= lr * (d_logits.T @ xs + l2 * W)
        b -= lr * d_logits.sum(axis=0)
    return LinearModel(W, b, mean, scale, losses)


def linear_probe(train_x, train_y, test_x, test_y, config: EvalConfig = EvalConfig(),
                 num_classes: int | None = None) -> EvaluationReport:
    train_y = np.asarray(train_y, dtype=np.int64)
    K = num_classes or int(max(train_y.max(), np.max(test_y)) + 1)
    model = fit_softmax_regression(train_x, train_y, K, config.probe_lr, config.probe_epochs, config.probe_l2)
    s = model.scores(test_x)
    report = compute_metrics(test_y, s.argmax(axis=1), s, K)
    report.meta = {"evaluator": "linear-probe", "final_train_loss": model.losses[-1] if model.losses else None}
    return report


# --- k-nearest neighbours -----------------------------------------------------------

def knn_predict(train_x, train_y, test_x, k: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-distance majority vote.

    Vote ties go to the class whose neighbours have the smallest summed
    distance, then to the lowest class index. Returns (predictions, vote
    fractions).
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise InvalidInputError("empty training set")
    if not 1 <= k <= len(train_x):
        raise InvalidInputError(f"k must lie in [1, {len(train_x)}]")
    a = train_x / np.maximum(np.linalg.norm(train_x, axis=1, keepdims=True), 1e-12)
    test_x = np.atleast_2d(np.asarray(test_x, dtype=np.float64))
    b = test_x / np.maximum(np.linalg.norm(test_x, axis=1, keepdims=True), 1e-12)
    dist = 1.0 - b @ a.T
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(test_x), dtype=np.int64)
    votes = np.zeros((len(test_x), num_classes))
    for r, nb in enumerate(nearest):
        labels = train_y[nb]
        counts = np.bincount(labels, minlength=num_classes)
        dsum = np.bincount(labels, weights=dist[r, nb], minlength=num_classes)
        top = np.flatnonzero(counts == counts.max())
        preds[r] = top[np.lexsort((top, dsum[top]))[0]]
        votes[r] = counts / k
    return preds, votes


def knn_probe(train_x, train_y, test_x, test_y, k: int = 10,
              num_classes: int | None = None) -> EvaluationReport:
    K = num_classes or int(max(np.max(train_y), np.max(test_y)) + 1)
    preds, votes = knn_predict(train_x, train_y, test_x, k, K)
    report = compute_metrics(test_y, preds, votes, K)
    report.meta = {"evaluator": "knn-probe", "k": k}
    return report


# --- bag (slide) classification ------------------------------------------------------

ATTN_PARAMS = ("V", "U", "w", "W", "b")


def init_attention(d: int, attention_dim: int, num_classes: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "V": rng.uniform(-1, 1, (attention_dim, d)) / np.sqrt(d),
        "U": rng.uniform(-1, 1, (attention_dim, d)) / np.sqrt(d),
        "w": rng.uniform(-1, 1, attention_dim) / np.sqrt(attention_dim),
        "W": np.zeros((num_classes, d)),
        "b": np.zeros(num_classes),
    }


def attention_weights(params: dict, bag: np.ndarray) -> np.ndarray:
    gate = np.tanh(bag @ params["V"].T) * _sigmoid(bag @ params["U"].T)
    return softmax(gate @ params["w"])


def attention_loss_and_grads(params: dict, bags, labels, l2: float = 0.0):
    """Mean cross-entropy of gated-attention pooling over bags, with gradients."""
    grads = {n: np.zeros_like(params[n]) for n in ATTN_PARAMS}
    total = 0.0
    for bag, y in zip(bags, labels):
        a_v = np.tanh(bag @ params["V"].T)
        a_u = _sigmoid(bag @ params["U"].T)
        gate = a_v * a_u
        alpha = softmax(gate @ params["w"])
        pooled = alpha @ bag
        logits = params["W"] @ pooled + params["b"]
        lse = float(logsumexp(logits))
        total += lse - logits[y]
        d_logits = np.exp(logits - lse)
        d_logits[y] -= 1.0
        grads["W"] += np.outer(d_logits, pooled)
        grads["b"] += d_logits
        d_alpha = bag @ (params["W"].T @ d_logits)
        d_e = alpha * (d_alpha - alpha @ d_alpha)
        grads["w"] += gate.T @ d_e
        d_gate = np.outer(d_e, params["w"])
        grads["V"] += ((1.0 - a_v ** 2) * d_gate * a_u).T @ bag
        grads["U"] += (a_u * (1.0 - a_u) * d_gate * a_v).T @ bag
    n = len(bags)
    loss = total / n + 0.5 * l2 * np.sum(params["W"] ** 2)
    for name in ATTN_PARAMS:
        grads[name] /= n
    grads["W"] += l2 * params["W"]
    return loss, grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bag_classify(train_bags, train_labels, test_bags, test_labels, pooling: str = "mean",
                 config: EvalConfig = EvalConfig(), num_classes: int | None = None) -> EvaluationReport:
    """Slide-level classification from per-slide patch feature bags."""
    for bag in list(train_bags) + list(test_bags):
        if len(bag) == 0:
            raise InvalidInputError("every bag needs at least one patch")
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    K = num_classes or int(max(train_labels.max(), test_labels.max()) + 1)
    if pooling == "mean":
        tr = np.stack([np.mean(b, axis=0) for b in train_bags])
        te = np.stack([np.mean(b, axis=0) for b in test_bags])
        model = fit_softmax_regression(tr, train_labels, K, config.probe_lr, config.probe_epochs, config.probe_l2)
        s = model.scores(te)
    elif pooling == "attention":
        if len(np.unique(train_labels)) < 2:
            raise InvalidInputError("bag training data must contain at least two classes")
        mean, scale = _standardizer(np.concatenate(list(train_bags)))
        tr = [(np.asarray(b) - mean) / scale for b in train_bags]
        te = [(np.asarray(b) - mean) / scale for b in test_bags]
        params = init_attention(tr[0].shape[1], config.attention_dim, K, config.seed)
        for _ in range(config.bag_epochs):
            _, g = attention_loss_and_grads(params, tr, train_labels, config.bag_l2)
            for name in ATTN_PARAMS:
                params[name] -= config.bag_lr * g[name]
        s = np.stack([softmax(params["W"] @ (attention_weights(params, b) @ b) + params["b"]) for b in te])
    else:
        raise InvalidInputError(f"unknown pooling {pooling!r}")
    report = compute_metrics(test_labels, s.argmax(axis=1), s, K)
    report.meta = {"evaluator": f"bag-{pooling}"}
    return report


# --- full evaluation suite ---------------------------------------------------------

def evaluate_features(features, dataset: SyntheticWsiDataset, splits: dict,
                      config: EvalConfig = EvalConfig()) -> dict[str, EvaluationReport]:
    """Probe suite used by the CLI.

    Patch probes train on lesion patches of training slides and report on
    lesion patches of test slides (lesion flags are used here only). Bag
    classifiers train on training slides and report on test slides.
    """
    features = np.asarray(features, dtype=np.float64)
    K = dataset.num_classes
    labels = dataset.pseudo_labels
    tr = dataset.patch_indices(splits["train"])
    te = dataset.patch_indices(splits["test"])
    tr_l = tr[dataset.lesion[tr]]
    te_l = te[dataset.lesion[te]]
    reports = {
        "lesion_linear": linear_probe(features[tr_l], labels[tr_l], features[te_l], labels[te_l], config, K),
        "lesion_knn": knn_probe(features[tr_l], labels[tr_l], features[te_l], labels[te_l],
                                min(config.knn_k, len(tr_l)), K),
    }

    def bags(slides):
        return [features[dataset.slide_of_patch == s] for s in slides]

    tr_s, te_s = splits["train"], splits["test"]
    for pooling in ("mean", "attention"):
        reports[f"bag_{pooling}"] = bag_classify(
            bags(tr_s), dataset.slide_labels[tr_s], bags(te_s), dataset.slide_labels[te_s],
            pooling, config, K,
        )
    return reports
