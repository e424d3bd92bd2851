"""Depth-limited CART classification trees for student policies.

Splits are axis-aligned ``x[f] <= t`` tests chosen greedily by weighted Gini
impurity.  Candidate thresholds are midpoints between consecutive distinct
feature values; near-ties between candidates go to the lowest feature index,
then the lowest threshold.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, TreeParseError

LEAF = -1
# relative slack used when comparing impurities, so that rescaled or
# duplicated data picks the same split despite rounding
REL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DecisionTreePolicy:
    """Flat array encoding; node 0 is the root.

    ``feature[j] == LEAF`` marks a leaf whose action is ``action[j]``;
    otherwise samples with ``x[feature[j]] <= threshold[j]`` go to ``left[j]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    action: np.ndarray
    n_features: int
    n_actions: int
    max_depth: int
    agent: int | None = None

    def __eq__(self, other):
        if not isinstance(other, DecisionTreePolicy):
            return NotImplemented
        same_arrays = all(np.array_equal(getattr(self, k), getattr(other, k))
                          for k in ("feature", "threshold", "left", "right", "action"))
        return same_arrays and (self.n_features, self.n_actions, self.max_depth, self.agent) == (
            other.n_features, other.n_actions, other.max_depth, other.agent)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        def walk(j):
            return 0 if self.feature[j] == LEAF else 1 + max(walk(self.left[j]), walk(self.right[j]))
        return walk(0)

    def predict(self, obs) -> int:
        return predict(self, obs)

    def predict_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ContractViolation(f"expected (n, {self.n_features}) inputs, got {X.shape}")
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            inner = f != LEAF
            if not inner.any():
                break
            go_left = X[np.arange(len(X)), np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)
        return self.action[node]


def gini_loss(class_weights) -> float:
    """Weighted Gini impurity ``W * (1 - sum p_c^2)`` of one node (or a batch)."""
    cw = np.asarray(class_weights, dtype=float)
    W = cw.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(W > 0, W - (cw**2).sum(axis=-1) / np.where(W > 0, W, 1.0), 0.0)


def majority(class_weights) -> int:
    cw = np.asarray(class_weights, dtype=float)
    return int(np.argmax(cw >= cw.max() - REL_TOL * max(cw.sum(), 1e-300)))


def split_candidates(X):
    """All midpoint tests as parallel (feature, threshold) arrays, ordered by
    feature then threshold, plus the (n, B) boolean matrix of ``x[f] <= t``."""
    feats, thrs = [], []
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        feats.append(np.full(len(vals) - 1, f))
        thrs.append(0.5 * (vals[:-1] + vals[1:]))
    feats = np.concatenate(feats).astype(np.int64)
    thrs = np.concatenate(thrs)
    Z = X[:, feats] <= thrs[None, :]
    return feats, thrs, Z


def _best_child(parent_loss, sub_loss, valid):
    """min(leaf, best valid split) along the last axis."""
    best = np.where(valid, sub_loss, np.inf).min(axis=-1)
    return np.minimum(parent_loss, best)


def best_split(X, cw_rows, lookahead=2):
    """Choose the split of one node.

    ``cw_rows`` is the (n, C) matrix of per-sample class weights.  With
    ``lookahead=2`` each candidate is scored by the best achievable loss of a
    depth-2 subtree rooted at it; with ``lookahead=1`` by the plain children
    impurity.  Returns (score, feature, threshold) or None.
    """
    feats, thrs, Z = split_candidates(X)
    if len(feats) == 0:
        return None
    Zf = Z.astype(float)
    total = cw_rows.sum(axis=0)
    W = total.sum()
    left = Zf.T @ cw_rows  # (B, C)
    right = total - left
    wl, wr = left.sum(axis=1), right.sum(axis=1)
    valid = (wl > 0) & (wr > 0)
    gl, gr = gini_loss(left), gini_loss(right)
    if lookahead >= 2:
        # pair[i, j] = class weights with x[f_i] <= t_i and x[f_j] <= t_j
        pair = np.einsum("ni,nj,nc->ijc", Zf, Zf, cw_rows, optimize=True)
        ll, lr = pair, left[:, None, :] - pair
        rl = left[None, :, :] - pair
        rr = right[:, None, :] - rl
        ok_l = (ll.sum(-1) > 0) & (lr.sum(-1) > 0)
        ok_r = (rl.sum(-1) > 0) & (rr.sum(-1) > 0)
        gl = _best_child(gl, gini_loss(ll) + gini_loss(lr), ok_l)
        gr = _best_child(gr, gini_loss(rl) + gini_loss(rr), ok_r)
    score = np.where(valid, gl + gr, np.inf)
    if not np.isfinite(score).any():
        return None
    k = int(np.argmax(score <= score.min() + REL_TOL * W))
    return float(score[k]), int(feats[k]), float(thrs[k])


def train_dt(X, y, weights=None, max_depth: int = 4, n_actions: int | None = None,
             agent: int | None = None) -> DecisionTreePolicy:
    """Fit a depth-limited weighted-Gini classification tree.

    Splits are chosen top-down like CART, but each candidate is scored by
    the best depth-2 subtree it admits (one level when only one level of
    depth remains).  Trees of depth <= 2 are therefore loss-optimal among
    all midpoint-threshold trees.  Recursion stops at ``max_depth``, at a
    pure node, or when no candidate lowers the impurity.  Leaves take the
    weighted-majority action.  Zero-weight samples are ignored.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ContractViolation("train_dt needs a nonempty (n, d) feature matrix")
    if y.shape != (len(X),):
        raise ContractViolation("one label per sample required")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(X),) or np.any(w < 0) or not w.sum() > 0:
        raise ContractViolation("weights must be nonnegative with a positive sum")
    if y.min() < 0:
        raise ContractViolation("labels must be nonnegative action indices")
    if max_depth < 0:
        raise ContractViolation("max_depth must be >= 0")
    C = int(y.max()) + 1 if n_actions is None else int(n_actions)
    if y.max() >= C:
        raise ContractViolation(f"label {y.max()} outside 0..{C - 1}")
    d = X.shape[1]

    # collapse duplicate rows into per-class weight vectors
    keep = w > 0
    rows, inv = np.unique(X[keep], axis=0, return_inverse=True)
    cw_rows = np.zeros((len(rows), C))
    np.add.at(cw_rows, (inv.ravel(), y[keep]), w[keep])

    feature, threshold, left, right, action = [], [], [], [], []

    def grow(idx, depth):
        j = len(feature)
        for lst, v in ((feature, LEAF), (threshold, 0.0), (left, -1), (right, -1), (action, 0)):
            lst.append(v)
        cw = cw_rows[idx].sum(axis=0)
        action[j] = majority(cw)
        parent = float(gini_loss(cw))
        tol = REL_TOL * cw.sum()
        if depth >= max_depth or parent <= tol:
            return j
        split = best_split(rows[idx], cw_rows[idx], lookahead=min(2, max_depth - depth))
        if split is None or split[0] >= parent - tol:
            return j
        _, f, t = split
        mask = rows[idx, f] <= t
        feature[j], threshold[j] = f, t
        left[j] = grow(idx[mask], depth + 1)
        right[j] = grow(idx[~mask], depth + 1)
        return j

    grow(np.arange(len(rows)), 0)
    return DecisionTreePolicy(
        feature=np.array(feature, dtype=np.int64), threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        action=np.array(action, dtype=np.int64), n_features=d, n_actions=C,
        max_depth=int(max_depth), agent=agent)


def predict(tree: DecisionTreePolicy, obs) -> int:
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (tree.n_features,):
        raise ContractViolation(f"expected an observation of length {tree.n_features}, got {obs.shape}")
    j = 0
    while tree.feature[j] != LEAF:
        j = tree.left[j] if obs[tree.feature[j]] <= tree.threshold[j] else tree.right[j]
    return int(tree.action[j])


def training_loss(tree: DecisionTreePolicy, X, y, weights=None) -> float:
    """Sum over leaves of the weighted Gini impurity of the samples reaching them."""
    X = np.asarray(X, dtype=float)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    node = np.zeros(len(X), dtype=np.int64)
    for _ in range(tree.n_nodes):
        f = tree.feature[node]
        inner = f != LEAF
        if not inner.any():
            break
        go_left = X[np.arange(len(X)), np.where(inner, f, 0)] <= tree.threshold[node]
        node = np.where(inner, np.where(go_left, tree.left[node], tree.right[node]), node)
    C = max(tree.n_actions, int(np.max(y)) + 1)
    cw = np.zeros((tree.n_nodes, C))
    np.add.at(cw, (node, np.asarray(y)), w)
    return float(gini_loss(cw).sum())


# -- text format ------------------------------------------------------------

def serialize(tree: DecisionTreePolicy, feature_names=None) -> str:
    """Nested s-expression text, e.g. ``(split a0_x <= 0.5 (leaf a0) (leaf a1))``.

    Metadata goes in leading ``;`` comment lines so the text round-trips.
    """
    if feature_names is not None and len(feature_names) != tree.n_features:
        raise ContractViolation("feature_names must match the tree's input dimension")
    names = list(feature_names) if feature_names is not None else [f"f{k}" for k in range(tree.n_features)]
    for nm in names:
        if not re.fullmatch(r"[A-Za-z_][\w.\-]*", nm):
            raise ContractViolation(f"feature name {nm!r} is not a bare identifier")
    head = [f"; agent={'-' if tree.agent is None else tree.agent} max_depth={tree.max_depth} "
            f"n_actions={tree.n_actions} n_features={tree.n_features}"]
    if feature_names is not None:
        head.append("; features=" + ",".join(names))

    def emit(j, indent):
        pad = "  " * indent
        if tree.feature[j] == LEAF:
            return f"{pad}(leaf a{tree.action[j]})"
        return "\n".join([
            f"{pad}(split {names[tree.feature[j]]} <= {float(tree.threshold[j])!r}",
            emit(tree.left[j], indent + 1),
            emit(tree.right[j], indent + 1) + ")",
        ])

    return "\n".join(head + [emit(0, 0)]) + "\n"


_TOKEN = re.compile(r"(;[^\n]*)|(\()|(\))|([^\s()]+)")


def _tokens(text):
    """Yield (kind, value, line, column); kind 1=comment 2='(' 3=')' 4=atom."""
    for m in _TOKEN.finditer(text):
        pos = m.start()
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        yield m.lastindex, m.group(m.lastindex), line, col


def deserialize(text: str) -> DecisionTreePolicy:
    meta, names = {}, None
    toks = []
    for kind, val, line, col in _tokens(text):
        if kind == 1:
            body = val[1:].strip()
            if body.startswith("features="):
                names = body[len("features="):].split(",")
            else:
                for item in body.split():
                    if "=" in item:
                        k, v = item.split("=", 1)
                        meta[k] = v
        else:
            toks.append((kind, val, line, col))
    end = (text.count("\n") + 1, len(text) - text.rfind("\n"))  # just past the last character
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else (None, None, *end)

    def expect(kind, what):
        nonlocal pos
        tok = peek()
        if tok[0] != kind or (what is not None and tok[1] != what):
            raise TreeParseError(f"expected {what or 'a value'}, found {tok[1]!r}", tok[2], tok[3])
        pos += 1
        return tok

    feature, threshold, left, right, action = [], [], [], [], []
    used_features = []

    def node():
        expect(2, "(")
        _, word, line, col = expect(4, None)
        j = len(feature)
        for lst, v in ((feature, LEAF), (threshold, 0.0), (left, -1), (right, -1), (action, 0)):
            lst.append(v)
        if word == "leaf":
            _, lab, line, col = expect(4, None)
            if not re.fullmatch(r"a\d+", lab):
                raise TreeParseError(f"bad action label {lab!r}", line, col)
            action[j] = int(lab[1:])
        elif word == "split":
            _, fname, fl, fc = expect(4, None)
            if names is not None:
                if fname not in names:
                    raise TreeParseError(f"unknown feature {fname!r}", fl, fc)
                f = names.index(fname)
            elif re.fullmatch(r"f\d+", fname):
                f = int(fname[1:])
            else:
                raise TreeParseError(f"unknown feature {fname!r}", fl, fc)
            expect(4, "<=")
            _, thr, tl, tc = expect(4, None)
            try:
                threshold[j] = float(thr)
            except ValueError:
                raise TreeParseError(f"bad threshold {thr!r}", tl, tc) from None
            feature[j] = f
            used_features.append(f)
            left[j] = node()
            right[j] = node()
        else:
            raise TreeParseError(f"expected 'leaf' or 'split', found {word!r}", line, col)
        expect(3, ")")
        return j

    node()
    if pos != len(toks):
        _, val, line, col = toks[pos]
        raise TreeParseError(f"trailing input {val!r}", line, col)

    def meta_int(key, default):
        v = meta.get(key)
        if v is None or v == "-":
            return default
        try:
            return int(v)
        except ValueError:
            raise TreeParseError(f"bad metadata {key}={v!r}", 1, 1) from None

    tree_depth = _depth(feature, left, right)
    n_features = meta_int("n_features", len(names) if names else (max(used_features, default=-1) + 1))
    return DecisionTreePolicy(
        feature=np.array(feature, dtype=np.int64), threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
        action=np.array(action, dtype=np.int64), n_features=n_features,
        n_actions=meta_int("n_actions", max(action) + 1), max_depth=meta_int("max_depth", tree_depth),
        agent=meta_int("agent", None))


def feature_names_of(text: str):
    """Feature names recorded in a serialized tree's header, or None."""
    for kind, val, _, _ in _tokens(text):
        if kind != 1:
            break
        body = val[1:].strip()
        if body.startswith("features="):
            return body[len("features="):].split(",")
    return None


def _depth(feature, left, right, j=0):
    if feature[j] == LEAF:
        return 0
    return 1 + max(_depth(feature, left, right, left[j]), _depth(feature, left, right, right[j]))


def render(tree: DecisionTreePolicy, feature_names=None) -> str:
    """Indented if/else listing for humans."""
    names = list(feature_names) if feature_names is not None else [f"f{k}" for k in range(tree.n_features)]
    out = []

    def walk(j, indent):
        pad = "    " * indent
        if tree.feature[j] == LEAF:
            out.append(f"{pad}action {tree.action[j]}")
            return
        out.append(f"{pad}if {names[tree.feature[j]]} <= {tree.threshold[j]:g}:")
        walk(tree.left[j], indent + 1)
        out.append(f"{pad}else:")
        walk(tree.right[j], indent + 1)

    walk(0, 0)
    return "\n".join(out) + "\n"
