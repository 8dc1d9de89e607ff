"""User response (CTR) prediction over sparse binary features.

Linear (SGD and FTRL-proximal logistic regression), Bayesian probit with a
diagonal covariance, factorisation machines, decision trees with gradient
boosting and bagging, tree-to-linear feature encoding, and bid-aware
(importance-weighted) training that corrects auction censorship bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

from .core import FeatureVector
from .landscape import WinFunction

PROBIT_VARIANCE_FLOOR = 1e-8
BID_AWARE_WEIGHT_CAP = 100.0


class ResponseError(ValueError):
    pass


def sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# Logistic regression, SGD flavour
# ---------------------------------------------------------------------------


@dataclass
class LinearModel:
    """Dense-weight logistic regression with L2 decay ``lam``."""

    weights: np.ndarray
    lam: float = 0.0
    skipped_zero_win: int = 0

    @classmethod
    def zeros(cls, dimension: int, lam: float = 0.0) -> "LinearModel":
        return cls(weights=np.zeros(dimension), lam=lam)

    def to_json(self) -> str:
        nonzero = [[int(i), float(w)] for i, w in enumerate(self.weights) if w != 0.0]
        return json.dumps(
            {
                "kind": "linear",
                "lam": self.lam,
                "dimension": int(len(self.weights)),
                "nonzero": nonzero,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        payload = json.loads(text)
        w = np.zeros(int(payload["dimension"]))
        for i, v in payload["nonzero"]:
            w[int(i)] = float(v)
        return cls(weights=w, lam=payload["lam"])

    def predict(self, x: FeatureVector) -> float:
        return lr_predict(self, x)


def lr_predict(model: LinearModel, x: FeatureVector) -> float:
    """sigmoid(w.x) computed over the active indices only."""
    score = float(model.weights[list(x.indices)].sum()) if x.indices else 0.0
    return sigmoid(score)


def lr_sgd_step(model: LinearModel, x: FeatureVector, y: int, eta: float) -> LinearModel:
    """One stochastic step: w <- (1 - eta*lam) w + eta (y - y_hat) x."""
    if eta <= 0:
        raise ResponseError("learning rate must be positive")
    if y not in (0, 1):
        raise ResponseError("label must be 0 or 1")
    y_hat = lr_predict(model, x)
    if model.lam:
        model.weights *= 1.0 - eta * model.lam
    if x.indices:
        model.weights[list(x.indices)] += eta * (y - y_hat)
    return model


def eta_schedule(eta0: float, t: int) -> float:
    """Decayed learning rate eta0 / sqrt(t) for iteration t >= 1."""
    if t < 1:
        raise ResponseError("iteration index starts at 1")
    return eta0 / math.sqrt(t)


# ---------------------------------------------------------------------------
# FTRL-proximal logistic regression
# ---------------------------------------------------------------------------


@dataclass
class FtrlState:
    """Per-coordinate state (z, n) of FTRL-proximal with L1 strength lam1 and
    learning-rate schedule eta_i = alpha / (beta + sqrt(n_i)).

    Coordinates never touched by data stay exactly zero, so state lives in
    dictionaries keyed by feature index.
    """

    lam1: float = 1.0
    alpha: float = 0.1
    beta: float = 1.0
    z: dict[int, float] = field(default_factory=dict)
    n: dict[int, float] = field(default_factory=dict)

    def weight(self, i: int) -> float:
        z = self.z.get(i, 0.0)
        if abs(z) <= self.lam1:
            return 0.0
        eta = self.alpha / (self.beta + math.sqrt(self.n.get(i, 0.0)))
        return -eta * (z - math.copysign(self.lam1, z))

    def dense_weights(self, dimension: int) -> np.ndarray:
        w = np.zeros(dimension)
        for i in self.z:
            w[i] = self.weight(i)
        return w


def ftrl_predict(state: FtrlState, x: FeatureVector) -> float:
    return sigmoid(sum(state.weight(i) for i in x.indices))


def _ftrl_to_json(state: FtrlState, dimension: int) -> str:
    return json.dumps(
        {
            "kind": "ftrl",
            "lam1": state.lam1,
            "alpha": state.alpha,
            "beta": state.beta,
            "dimension": dimension,
            "z": sorted([int(i), float(v)] for i, v in state.z.items()),
            "n": sorted([int(i), float(v)] for i, v in state.n.items()),
        },
        sort_keys=True,
    )


def _ftrl_from_json(payload: dict) -> FtrlState:
    state = FtrlState(lam1=payload["lam1"], alpha=payload["alpha"], beta=payload["beta"])
    state.z = {int(i): float(v) for i, v in payload["z"]}
    state.n = {int(i): float(v) for i, v in payload["n"]}
    return state


def ftrl_step(state: FtrlState, x: FeatureVector, y: int) -> tuple[FtrlState, dict[int, float]]:
    """One online update. Returns the state and the refreshed weights of the
    active coordinates (the closed-form solution after the update)."""
    if y not in (0, 1):
        raise ResponseError("label must be 0 or 1")
    w = {i: state.weight(i) for i in x.indices}
    p = sigmoid(sum(w.values()))
    g = p - y
    g2 = g * g
    for i in x.indices:
        n_old = state.n.get(i, 0.0)
        sigma = (math.sqrt(n_old + g2) - math.sqrt(n_old)) / state.alpha
        state.z[i] = state.z.get(i, 0.0) + g - sigma * w[i]
        state.n[i] = n_old + g2
    return state, {i: state.weight(i) for i in x.indices}


# ---------------------------------------------------------------------------
# Bayesian probit regression (diagonal covariance)
# ---------------------------------------------------------------------------


@dataclass
class ProbitState:
    """Gaussian weight posterior: mean vector and per-coordinate variance."""

    mu: np.ndarray
    var: np.ndarray
    clamp_warnings: int = 0

    @classmethod
    def prior(cls, dimension: int, prior_var: float = 1.0) -> "ProbitState":
        return cls(mu=np.zeros(dimension), var=np.full(dimension, float(prior_var)))

    def __post_init__(self):
        if np.any(self.var <= 0):
            raise ResponseError("variances must stay positive")


def _gaussian_hazard(theta: float) -> float:
    """N(theta) / Phi(theta), computed in log space for tail stability."""
    log_pdf = -0.5 * theta * theta - 0.5 * math.log(2 * math.pi)
    return math.exp(log_pdf - special.log_ndtr(theta))


def probit_step(state: ProbitState, x: FeatureVector, y: int) -> ProbitState:
    """Assumed-density update of the weight posterior for label y in {-1, +1}.

    theta = y x.mu / sqrt(x.Sigma.x + 1); the mean moves by alpha * Sigma x
    and the variance shrinks by beta * (Sigma x)^2, clamped at a small floor
    to preserve positivity.
    """
    if y not in (-1, 1):
        raise ResponseError("probit label must be -1 or +1")
    idx = list(x.indices)
    if not idx:
        return state
    var = state.var[idx]
    total = float(var.sum()) + 1.0
    s = math.sqrt(total)
    theta = y * float(state.mu[idx].sum()) / s
    v = _gaussian_hazard(theta)
    alpha = y * v / s
    beta = v * (v + theta) / s
    state.mu[idx] = state.mu[idx] + alpha * var
    new_var = var - beta * var**2
    clamped = new_var < PROBIT_VARIANCE_FLOOR
    if np.any(clamped):
        state.clamp_warnings += int(np.count_nonzero(clamped))
        new_var = np.maximum(new_var, PROBIT_VARIANCE_FLOOR)
    state.var[idx] = new_var
    return state


def probit_predict(state: ProbitState, x: FeatureVector) -> float:
    """P(y=+1 | x) = Phi(x.mu / sqrt(x.Sigma.x + 1))."""
    idx = list(x.indices)
    if not idx:
        return 0.5
    s = math.sqrt(float(state.var[idx].sum()) + 1.0)
    return float(special.ndtr(float(state.mu[idx].sum()) / s))


# ---------------------------------------------------------------------------
# Factorisation machines
# ---------------------------------------------------------------------------


@dataclass
class FmModel:
    """Second-order FM: bias, linear weights and K-dim latent vectors."""

    w0: float
    w: np.ndarray
    v: np.ndarray  # shape (dimension, K)

    @classmethod
    def zeros(cls, dimension: int, k: int) -> "FmModel":
        if k < 1:
            raise ResponseError("latent dimension K must be >= 1")
        return cls(w0=0.0, w=np.zeros(dimension), v=np.zeros((dimension, k)))


def fm_score(model: FmModel, x: FeatureVector) -> float:
    idx = list(x.indices)
    score = model.w0
    if idx:
        score += float(model.w[idx].sum())
        vx = model.v[idx]  # (M, K)
        sums = vx.sum(axis=0)
        score += 0.5 * float((sums**2 - (vx**2).sum(axis=0)).sum())
    return score


def fm_predict(model: FmModel, x: FeatureVector) -> float:
    """sigmoid of bias + linear + pairwise interactions, via the O(K*M)
    sum-of-squares identity."""
    return sigmoid(fm_score(model, x))


def fm_score_naive(model: FmModel, x: FeatureVector) -> float:
    """Direct double loop over active pairs; oracle for the fast evaluation."""
    idx = list(x.indices)
    score = model.w0 + float(model.w[idx].sum()) if idx else model.w0
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            score += float(model.v[idx[a]] @ model.v[idx[b]])
    return score


# ---------------------------------------------------------------------------
# Decision trees and gradient boosting
# ---------------------------------------------------------------------------


@dataclass
class TreeNode:
    """Binary split on feature presence; leaves carry a weight and ordinal."""

    feature: Optional[int] = None
    present: Optional["TreeNode"] = None
    absent: Optional["TreeNode"] = None
    weight: float = 0.0
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def leaf_count(self) -> int:
        if self.is_leaf:
            return 1
        return self.present.leaf_count() + self.absent.leaf_count()


def tree_leaf(tree: TreeNode, x: FeatureVector) -> TreeNode:
    node = tree
    active = set(x.indices)
    while not node.is_leaf:
        node = node.present if node.feature in active else node.absent
    return node


def tree_predict(tree: TreeNode, x: FeatureVector) -> float:
    return tree_leaf(tree, x).weight


def _leaf_weight(g_sum: float, h_sum: float, lam: float) -> float:
    denom = h_sum + lam
    return -g_sum / denom if denom > 0 else 0.0


def _leaf_score(g_sum: float, h_sum: float, lam: float) -> float:
    denom = h_sum + lam
    return -0.5 * g_sum * g_sum / denom if denom > 0 else 0.0


def split_gain(
    g_left: float, h_left: float, g_right: float, h_right: float, lam: float, gamma: float
) -> float:
    """Objective reduction of a split: the parent's structure score minus the
    children's (scores are -G^2/(2(H+lam)), lower is better), less the
    per-leaf penalty gamma."""
    parent = _leaf_score(g_left + g_right, h_left + h_right, lam)
    children = _leaf_score(g_left, h_left, lam) + _leaf_score(g_right, h_right, lam)
    return parent - children - gamma


def _grow_tree(instances, g, h, lam, gamma, max_depth, depth, counter) -> TreeNode:
    g_sum = float(sum(g[i] for i in instances))
    h_sum = float(sum(h[i] for i in instances))
    best = (0.0, None)
    if depth < max_depth and len(instances) > 1:
        features = sorted({f for i in instances for f in instances[i]})
        for f in features:
            gl = hl = 0.0
            for i in instances:
                if f in instances[i]:
                    gl += g[i]
                    hl += h[i]
            gain = split_gain(gl, hl, g_sum - gl, h_sum - hl, lam, gamma)
            if gain > best[0] + 1e-12:
                best = (gain, f)
    if best[1] is None:
        leaf = TreeNode(weight=_leaf_weight(g_sum, h_sum, lam), leaf_id=counter[0])
        counter[0] += 1
        return leaf
    f = best[1]
    left_idx = {i: s for i, s in instances.items() if f in s}
    right_idx = {i: s for i, s in instances.items() if f not in s}
    node = TreeNode(feature=f)
    node.present = _grow_tree(left_idx, g, h, lam, gamma, max_depth, depth + 1, counter)
    node.absent = _grow_tree(right_idx, g, h, lam, gamma, max_depth, depth + 1, counter)
    return node


@dataclass
class GbdtModel:
    trees: list[TreeNode]
    loss: str
    lam: float
    gamma: float
    max_depth: int
    train_losses: list[float] = field(default_factory=list)

    def predict_raw(self, x: FeatureVector) -> float:
        return sum(tree_predict(t, x) for t in self.trees)

    def predict(self, x: FeatureVector) -> float:
        raw = self.predict_raw(x)
        return sigmoid(raw) if self.loss == "logistic" else raw


def _loss_grads(loss: str, y: np.ndarray, raw: np.ndarray):
    if loss == "squared":
        # L = (y - F)^2, so g = 2 (F - y), h = 2; the leaf optimum is then
        # sum(residual) / (|I| + lam/2)
        return 2.0 * (raw - y), np.full_like(raw, 2.0)
    p = 1.0 / (1.0 + np.exp(-raw))
    return p - y, p * (1.0 - p)


def _loss_values(loss: str, y: np.ndarray, raw: np.ndarray) -> float:
    if loss == "squared":
        return float(np.sum((y - raw) ** 2))
    p = 1.0 / (1.0 + np.exp(-raw))
    eps = 1e-12
    return float(-np.sum(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))


def gbdt_fit(
    data: Sequence[tuple[FeatureVector, float]],
    k: int,
    gamma: float = 0.0,
    lam: float = 0.0,
    loss: str = "squared",
    max_depth: int = 3,
) -> GbdtModel:
    """Forward-stagewise boosting: each tree is fitted to the first- and
    second-order gradients of the running prediction, splits maximise the
    structure-score reduction and leaves take -G/(H + lam).

    Constant labels produce single-leaf trees; that is not an error.
    """
    if k < 1:
        raise ResponseError("need at least one boosting round")
    if not data:
        raise ResponseError("no data")
    if loss not in ("squared", "logistic"):
        raise ResponseError(f"unknown loss {loss!r}")
    instances = {i: frozenset(x.indices) for i, (x, _) in enumerate(data)}
    y = np.array([float(label) for _, label in data])
    raw = np.zeros(len(data))
    model = GbdtModel(trees=[], loss=loss, lam=lam, gamma=gamma, max_depth=max_depth)
    model.train_losses.append(_loss_values(loss, y, raw))
    for _ in range(k):
        g, h = _loss_grads(loss, y, raw)
        tree = _grow_tree(instances, g, h, lam, gamma, max_depth, 0, counter=[0])
        model.trees.append(tree)
        for i, (x, _) in enumerate(data):
            raw[i] += tree_predict(tree, x)
        model.train_losses.append(_loss_values(loss, y, raw))
    return model


def _tree_to_dict(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"weight": node.weight, "leaf_id": node.leaf_id}
    return {
        "feature": node.feature,
        "present": _tree_to_dict(node.present),
        "absent": _tree_to_dict(node.absent),
    }


def _tree_from_dict(payload: dict) -> TreeNode:
    if "feature" not in payload:
        return TreeNode(weight=float(payload["weight"]), leaf_id=int(payload["leaf_id"]))
    return TreeNode(
        feature=int(payload["feature"]),
        present=_tree_from_dict(payload["present"]),
        absent=_tree_from_dict(payload["absent"]),
    )


def gbdt_to_json(model: GbdtModel) -> str:
    return json.dumps(
        {
            "kind": "gbdt",
            "loss": model.loss,
            "lam": model.lam,
            "gamma": model.gamma,
            "max_depth": model.max_depth,
            "trees": [_tree_to_dict(t) for t in model.trees],
        },
        sort_keys=True,
    )


def gbdt_from_json(payload: dict) -> GbdtModel:
    return GbdtModel(
        trees=[_tree_from_dict(t) for t in payload["trees"]],
        loss=payload["loss"],
        lam=payload["lam"],
        gamma=payload["gamma"],
        max_depth=payload["max_depth"],
    )


def load_response_model(text: str):
    """Deserialize any response model JSON by its kind tag."""
    payload = json.loads(text)
    kind = payload.get("kind")
    if kind == "linear":
        return LinearModel.from_json(text)
    if kind == "ftrl":
        return _ftrl_from_json(payload)
    if kind == "gbdt":
        return gbdt_from_json(payload)
    raise ResponseError(f"unknown response model kind {kind!r}")


def model_predict(model, x: FeatureVector) -> float:
    """Probability prediction for any deserialized response model."""
    if isinstance(model, LinearModel):
        return lr_predict(model, x)
    if isinstance(model, FtrlState):
        return ftrl_predict(model, x)
    if isinstance(model, GbdtModel):
        return model.predict(x)
    raise ResponseError(f"cannot predict with {type(model).__name__}")


def gbdt_lr_features(model: GbdtModel, x: FeatureVector) -> FeatureVector:
    """Leaf-index encoding: one active index per tree, flattened as
    (offset of tree k) + (leaf ordinal within tree k). Injective over
    (tree, leaf) pairs by construction."""
    indices = []
    offset = 0
    for tree in model.trees:
        indices.append(offset + tree_leaf(tree, x).leaf_id)
        offset += tree.leaf_count()
    return FeatureVector(indices=tuple(indices), dimension=offset)


# ---------------------------------------------------------------------------
# Bagging
# ---------------------------------------------------------------------------


def bagging_predict(models: Sequence, x: FeatureVector, predict=None) -> float:
    """Average the member predictions: (1/K) sum_k f_k(x)."""
    if not models:
        raise ResponseError("empty ensemble")
    if predict is None:
        predict = lambda m, xi: m.predict(xi)
    return sum(predict(m, x) for m in models) / len(models)


def fit_bagged(
    fit_fn: Callable[[list], object],
    data: Sequence,
    k: int,
    rng: np.random.Generator,
    feature_pool: Optional[Sequence[int]] = None,
    feature_fraction: Optional[float] = None,
):
    """Fit K models on bootstrap resamples (uniform, with replacement).

    With ``feature_fraction`` set, each bag additionally draws a random
    feature subset from ``feature_pool`` (random-subspace flavour) and
    fit_fn receives (sample, features); otherwise just the sample.
    """
    if k < 1:
        raise ResponseError("need at least one bag")
    n = len(data)
    models = []
    for _ in range(k):
        sample = [data[i] for i in rng.integers(0, n, size=n)]
        if feature_fraction is None:
            models.append(fit_fn(sample))
        else:
            pool = list(feature_pool)
            size = max(1, int(round(feature_fraction * len(pool))))
            chosen = sorted(rng.choice(len(pool), size=size, replace=False).tolist())
            models.append(fit_fn(sample, [pool[c] for c in chosen]))
    return models


# ---------------------------------------------------------------------------
# Bid-aware (importance-weighted) training
# ---------------------------------------------------------------------------


def log_loss(labels: Sequence[int], probs: Sequence[float]) -> float:
    """Mean cross entropy of probability predictions against binary labels."""
    y = np.asarray(labels, dtype=float)
    p = np.clip(np.asarray(probs, dtype=float), 1e-15, 1.0 - 1e-15)
    if len(y) == 0:
        raise ResponseError("no data")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Area under the ROC curve via the rank statistic, with tie handling
    (ties contribute half). Requires both classes present."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ResponseError("AUC needs both positive and negative labels")
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    ranks = np.empty(len(order), dtype=float)
    sorted_scores = np.concatenate([pos, neg])[order]
    # average ranks over tie groups
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_ranks = ranks[: len(pos)]
    u = float(pos_ranks.sum()) - len(pos) * (len(pos) + 1) / 2.0
    return u / (len(pos) * len(neg))


def bid_aware_weight(win: WinFunction, bid: float) -> float:
    """Importance weight 1 / w(bid) that restores full-volume statistics from
    auction-censored training data."""
    w = win(bid)
    if w <= 0.0:
        raise ResponseError("cannot reweight an instance with zero win probability")
    return 1.0 / w


def bgd_step(
    model: LinearModel,
    x: FeatureVector,
    y: int,
    bid: float,
    win: WinFunction,
    eta: float,
    weight_cap: float = BID_AWARE_WEIGHT_CAP,
) -> LinearModel:
    """lr_sgd_step with the gradient term scaled by 1/w(bid).

    Instances with w(bid) = 0 cannot be reweighted; they are skipped and
    counted on the model rather than guessed at. The importance weight is
    capped (default 100) to bound its variance.
    """
    if eta <= 0:
        raise ResponseError("learning rate must be positive")
    if y not in (0, 1):
        raise ResponseError("label must be 0 or 1")
    w = win(bid)
    if w <= 0.0:
        model.skipped_zero_win += 1
        return model
    iw = min(1.0 / w, weight_cap)
    y_hat = lr_predict(model, x)
    if model.lam:
        model.weights *= 1.0 - eta * model.lam
    if x.indices:
        model.weights[list(x.indices)] += eta * iw * (y - y_hat)
    return model
