"""Neural terminal-cost approximators trained on stored DP value functions.

Two feature schemas exist.  The traffic-agnostic one (13 inputs) only sees
the ego state, the speed limits and the next signal; the traffic-aware one
appends three lead-vehicle inputs.  The network is a small tanh MLP written
directly in numpy so that its input gradient can be checked analytically.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .dp import DpProblem, ValueFunction, _axis_nodes
from .vehicle import EgoState
from .world import Route

AG_NAMES = ("soc", "v_veh", "v_rlim", "v_rlim_next", "d_tfc", "d_lim_next", "d_rem",
            "x_tfc_0", "x_tfc_5", "x_tfc_10", "x_tfc_15", "x_tfc_20", "x_tfc_25")
AW_NAMES = AG_NAMES + ("d_lead", "v_rel_lead", "t_to_lead")
SCHEMA_VERSION = 1
TFC_OFFSETS = np.arange(6) * 5.0
T_MAX = 100.0
LEAD_RANGE_M = 200.0


class NetError(ValueError):
    pass


class SchemaMismatchError(NetError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# features


def _route_profile(route: Route, x: float):
    """Scalar route-geometry features at position ``x``."""
    d_rem = route.length_m - x
    lim = route.base_limit(x)
    nxt = [(p, v) for p, v in route.speed_limits if p > x]
    if nxt:
        d_lim, lim_next = nxt[0][0] - x, nxt[0][1]
    else:
        d_lim, lim_next = d_rem, lim
    ahead = [lt for lt in route.lights if lt.position_m > x]
    light = ahead[0] if ahead else None
    d_tfc = light.position_m - x if light else d_rem
    return d_rem, lim, lim_next, d_lim, d_tfc, light


def light_status(light, t) -> np.ndarray:
    """+1/-1 phase samples of ``light`` at t + (0, 5, ..., 25) s; all +1 without a light."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if light is None:
        return np.ones((t.size, 6))
    tau = np.mod(t[:, None] + TFC_OFFSETS[None, :] - light.offset_s, light.cycle_s)
    return np.where(tau < light.green_s, 1.0, -1.0)


def features_ag_batch(route: Route, x: float, v, soc, t) -> np.ndarray:
    """Agnostic features for many states sharing one position."""
    v = np.asarray(v, dtype=float)
    n = v.size
    d_rem, lim, lim_next, d_lim, d_tfc, light = _route_profile(route, x)
    out = np.empty((n, 13))
    out[:, 0] = soc
    out[:, 1] = v
    out[:, 2] = v - lim
    out[:, 3] = v - lim_next
    out[:, 4] = d_tfc
    out[:, 5] = d_lim
    out[:, 6] = d_rem
    out[:, 7:] = light_status(light, np.broadcast_to(t, v.shape))
    return out


def lead_features(d_lead, v_ego, v_lead) -> np.ndarray:
    d = np.asarray(d_lead, dtype=float)
    v_rel = np.asarray(v_ego, dtype=float) - np.asarray(v_lead, dtype=float)
    d, v_rel = np.broadcast_arrays(d, v_rel)
    closing = v_rel > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ttl = np.where(closing, d / np.where(closing, v_rel, 1.0), T_MAX)
    ttl = np.where(d <= 0.0, 0.0, np.minimum(ttl, T_MAX))
    return np.stack([d, v_rel, ttl], axis=-1)


def features_aw_batch(route: Route, x: float, v, soc, t, d_lead, v_lead) -> np.ndarray:
    ag = features_ag_batch(route, x, v, soc, t)
    return np.hstack([ag, lead_features(d_lead, v, v_lead).reshape(ag.shape[0], 3)])


def extract_features_ag(route: Route, state: EgoState, s: int) -> np.ndarray:
    if not 0 <= s <= route.n_steps:
        raise NetError(f"step {s} outside route")
    return features_ag_batch(route, s * route.ds_m, [state.v_mps], state.soc_frac, state.time_s)[0]


def extract_features_aw(route: Route, state: EgoState, s: int, lead_obs) -> np.ndarray:
    d_lead, v_lead = lead_obs
    if not np.isfinite(d_lead):
        raise NetError("traffic-aware features need an observed lead")
    return np.concatenate([extract_features_ag(route, state, s), lead_features(d_lead, state.v_mps, v_lead)])


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    source: np.ndarray  # (n, 2): scenario index, step
    variant: str

    @property
    def names(self) -> tuple:
        return AG_NAMES if self.variant == "ag" else AW_NAMES

    def __len__(self) -> int:
        return self.y.size

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.names) + ["label", "scenario", "step"])
            for x, y, src in zip(self.X, self.y, self.source):
                w.writerow([repr(float(a)) for a in x] + [repr(float(y)), int(src[0]), int(src[1])])


@dataclass
class DatasetEntry:
    """One solved scenario: its problem, value function and (aw only) lead trajectory."""

    route: Route
    problem: DpProblem
    vf: ValueFunction
    lead: object = None


def build_dataset(entries: list, variant: str, budget: int | None = 40000, seed: int = 0,
                  lead_range_m: float = 2 * LEAD_RANGE_M) -> Dataset:
    """Pair node features with node values over every finite grid node.

    Nodes are Bernoulli-subsampled per scenario so the expected total stays
    near ``budget``.  Labels are clipped at zero (see the net's output clamp).
    The aw variant keeps only nodes where the lead is on the route ahead,
    within ``lead_range_m``.
    """
    if variant not in ("ag", "aw"):
        raise SchemaMismatchError(f"unknown variant {variant!r}")
    if variant == "aw" and any(e.lead is None for e in entries):
        raise SchemaMismatchError("aw samples need a lead trajectory for every scenario")
    gammas = {e.vf.gamma for e in entries}
    if len(gammas) > 1:
        raise NetError(f"value functions mix discount weights {sorted(gammas)}")
    rng = np.random.default_rng(seed)

    def eligible(e, s):
        # time nodes whose samples belong to this variant
        t = _axis_nodes(e.vf.taxes[s])
        if variant == "ag":
            return np.ones(t.size, dtype=bool)
        d = e.lead.position_at(t) - s * e.route.ds_m
        return (t <= e.lead.t_s[-1]) & (d >= 0.0) & (d <= lead_range_m)

    total = 0
    for e in entries:
        for s, J in enumerate(e.vf.J):
            total += int(np.isfinite(J[:, :, eligible(e, s)]).sum())
    keep = 1.0 if budget is None or total <= budget else budget / total
    Xs, ys, srcs = [], [], []
    for ie, e in enumerate(entries):
        vnodes = _axis_nodes(e.vf.vax)
        snodes = _axis_nodes(e.vf.sax)
        for s, J in enumerate(e.vf.J):
            idx = np.argwhere(np.isfinite(J) & eligible(e, s)[None, None, :])
            if keep < 1.0:
                idx = idx[rng.random(len(idx)) < keep]
            if len(idx) == 0:
                continue
            tnodes = _axis_nodes(e.vf.taxes[s])
            v, soc, t = vnodes[idx[:, 0]], snodes[idx[:, 1]], tnodes[idx[:, 2]]
            x = s * e.route.ds_m
            label = np.maximum(J[idx[:, 0], idx[:, 1], idx[:, 2]], 0.0)
            if variant == "ag":
                X = features_ag_batch(e.route, x, v, soc, t)
            else:
                xl = e.lead.position_at(t)
                X = features_aw_batch(e.route, x, v, soc, t, xl - x, e.lead.velocity_at(t))
            Xs.append(X)
            ys.append(label)
            srcs.append(np.column_stack([np.full(len(label), ie), np.full(len(label), s)]))
    if not Xs:
        raise NetError("dataset is empty")
    return Dataset(np.vstack(Xs), np.concatenate(ys), np.vstack(srcs), variant)


# ---------------------------------------------------------------------------
# network


@dataclass
class TerminalCostNet:
    weights: list
    biases: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    activation: str = "tanh"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise NetError("weights and biases must pair up")
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise NetError("bias length does not match layer width")
        for W0, W1 in zip(self.weights, self.weights[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise NetError("layer dimensions do not chain")
        if self.weights[-1].shape[1] != 1:
            raise NetError("output layer must have one unit")
        if np.any(self.x_scale <= 0) or not self.y_scale > 0:
            raise NetError("normalizer scales must be positive")
        if self.activation != "tanh":
            raise NetError(f"unsupported activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def variant(self) -> str:
        return self.meta.get("variant", "ag" if self.n_inputs == 13 else "aw")

    @property
    def gamma(self):
        return self.meta.get("gamma")

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_inputs:
            raise SchemaMismatchError(f"net expects {self.n_inputs} features, got {X.shape[-1]}")
        return X

    def forward_raw(self, X) -> np.ndarray:
        """De-scaled output before the nonnegativity clamp."""
        X = self._check(X)
        h = (X - self.x_mean) / self.x_scale
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
        out = h @ self.weights[-1] + self.biases[-1]
        return out[..., 0] * self.y_scale + self.y_mean

    def forward(self, X) -> np.ndarray:
        return np.maximum(self.forward_raw(X), 0.0)

    def gradient(self, x) -> np.ndarray:
        """d forward_raw / d x for a single feature vector."""
        x = self._check(x).reshape(-1)
        h = (x - self.x_mean) / self.x_scale
        jac = np.diag(1.0 / self.x_scale)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
            jac = (jac @ W) * (1.0 - h * h)
        return (jac @ self.weights[-1])[:, 0] * self.y_scale

    def save(self, path) -> None:
        path = Path(path)
        arrays = {"x_mean": self.x_mean, "x_scale": self.x_scale,
                  "y_norm": np.array([self.y_mean, self.y_scale])}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        side = {"schema_version": SCHEMA_VERSION, "activation": self.activation,
                "layers": [list(W.shape) for W in self.weights], "meta": self.meta}
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TerminalCostNet":
        path = Path(path)
        side = json.loads(path.with_suffix(".json").read_text())
        if side.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatchError(f"{path}: unsupported schema {side.get('schema_version')}")
        data = np.load(path)
        n = len(side["layers"])
        return cls([data[f"W{i}"] for i in range(n)], [data[f"b{i}"] for i in range(n)], data["x_mean"],
                   data["x_scale"], float(data["y_norm"][0]), float(data["y_norm"][1]), side["activation"],
                   side["meta"])


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    val_split: float = 0.2


@dataclass
class TrainReport:
    train_loss: list
    val_loss: list
    rel_rmse_val: float
    rel_rmse_train: float
    n_train: int
    n_val: int

    def as_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_loss": self.val_loss, "rel_rmse_val": self.rel_rmse_val,
                "rel_rmse_train": self.rel_rmse_train, "n_train": self.n_train, "n_val": self.n_val}


def relative_rmse(pred, y) -> float:
    y = np.asarray(y, dtype=float)
    return float(np.sqrt(np.mean((np.asarray(pred) - y) ** 2)) / np.sqrt(np.mean(y * y)))


def _normalizer(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def train(ds: Dataset, cfg: TrainConfig = TrainConfig(), meta: dict | None = None):
    """Mini-batch SGD with momentum on z-scored inputs and labels.

    Returns ``(net, report)``.  Shuffling, the split and initialization all
    draw from one generator seeded by ``cfg.seed``.
    """
    if len(ds) == 0:
        raise NetError("dataset is empty")
    if not 0.0 < cfg.val_split < 1.0:
        raise NetError("validation split must lie in (0, 1)")
    rng = np.random.default_rng(cfg.seed)
    n = len(ds)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_split * n))
    if n > 1:
        n_val = min(max(n_val, 1), n - 1)
        val, tr = perm[:n_val], perm[n_val:]
    else:
        val = tr = perm
    Xtr, ytr = ds.X[tr], ds.y[tr]
    x_mean, x_scale = _normalizer(Xtr)
    y_mean = float(ytr.mean())
    y_std = float(ytr.std())
    y_scale = y_std if y_std > 1e-12 else 1.0
    Ztr = (Xtr - x_mean) / x_scale
    ttr = (ytr - y_mean) / y_scale
    Zval = (ds.X[val] - x_mean) / x_scale
    tval = (ds.y[val] - y_mean) / y_scale

    sizes = [ds.X.shape[1], *cfg.hidden, 1]
    Ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        Ws.append(rng.uniform(-lim, lim, size=(a, b)))
        bs.append(np.zeros(b))
    vW = [np.zeros_like(W) for W in Ws]
    vb = [np.zeros_like(b) for b in bs]

    def predict(Z):
        h = Z
        for W, b in zip(Ws[:-1], bs[:-1]):
            h = np.tanh(h @ W + b)
        return (h @ Ws[-1] + bs[-1])[:, 0]

    def mse(Z, t):
        return float(np.mean((predict(Z) - t) ** 2))

    train_loss = [mse(Ztr, ttr)]
    val_loss = [mse(Zval, tval)]
    m = len(tr)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * (epoch - 1) / cfg.epochs))
        order = rng.permutation(m)
        for start in range(0, m, cfg.batch_size):
            bi = order[start:start + cfg.batch_size]
            acts = [Ztr[bi]]
            for W, b in zip(Ws[:-1], bs[:-1]):
                acts.append(np.tanh(acts[-1] @ W + b))
            out = (acts[-1] @ Ws[-1] + bs[-1])[:, 0]
            delta = (2.0 / len(bi)) * (out - ttr[bi])[:, None]
            for li in range(len(Ws) - 1, -1, -1):
                gW = acts[li].T @ delta
                gb = delta.sum(axis=0)
                if li > 0:
                    delta = (delta @ Ws[li].T) * (1.0 - acts[li] ** 2)
                vW[li] = cfg.momentum * vW[li] - lr * gW
                vb[li] = cfg.momentum * vb[li] - lr * gb
                Ws[li] += vW[li]
                bs[li] += vb[li]
        tl = mse(Ztr, ttr)
        if not np.isfinite(tl):
            raise TrainingError(epoch, "training loss diverged")
        train_loss.append(tl)
        val_loss.append(mse(Zval, tval))

    meta = dict(meta or {})
    meta.setdefault("variant", ds.variant)
    meta["features"] = list(ds.names)
    meta["seed"] = cfg.seed
    net = TerminalCostNet(Ws, bs, x_mean, x_scale, y_mean, y_scale, cfg.activation, meta)
    rel_val = relative_rmse(net.forward(ds.X[val]), ds.y[val])
    rel_tr = relative_rmse(net.forward(Xtr), ytr)
    return net, TrainReport(train_loss, val_loss, rel_val, rel_tr, len(tr), len(val))


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.X).tobytes())
    h.update(np.ascontiguousarray(ds.y).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# serving


def forward(net: TerminalCostNet, features) -> float | np.ndarray:
    out = net.forward(features)
    return float(out) if np.ndim(out) == 0 else out


def lead_detected(lead_obs, n_h_m: float = LEAD_RANGE_M) -> bool:
    """Inclusive range test on the currently observed gap."""
    if lead_obs is None:
        return False
    d = lead_obs[0]
    return bool(np.isfinite(d) and 0.0 <= d <= n_h_m)


def ensemble_terminal_cost(ag_net: TerminalCostNet, aw_net: TerminalCostNet, route: Route, state: EgoState,
                           s: int, lead_obs=None, n_h_m: float = LEAD_RANGE_M, terminal_lead=None):
    """Switch between the two nets on lead detection; returns ``(cost, branch)``.

    ``lead_obs`` is the currently observed ``(gap, lead speed)`` used for the
    range test; ``terminal_lead`` optionally supplies the lead features at
    the evaluated state and defaults to ``lead_obs``.
    """
    check_pair(ag_net, aw_net)
    if lead_detected(lead_obs, n_h_m):
        obs = terminal_lead if terminal_lead is not None else lead_obs
        return forward(aw_net, extract_features_aw(route, state, s, obs)), "aw"
    return forward(ag_net, extract_features_ag(route, state, s)), "ag"


def check_pair(ag_net: TerminalCostNet, aw_net: TerminalCostNet) -> None:
    if ag_net.n_inputs != len(AG_NAMES) or aw_net.n_inputs != len(AW_NAMES):
        raise SchemaMismatchError("ensemble needs a 13-input ag net and a 16-input aw net")
    if ag_net.gamma != aw_net.gamma:
        raise NetError(f"nets trained for different discount weights: {ag_net.gamma} vs {aw_net.gamma}")


def value_at_nodes(vf: ValueFunction, s: int, v, soc, t) -> np.ndarray:
    """Vectorized interpolated value (inf where unavailable)."""
    v, soc, t = (np.ascontiguousarray(a, dtype=float) for a in np.broadcast_arrays(v, soc, t))
    return K.interp_many(vf.J[s], vf.vax, vf.sax, vf.taxes[s], v.ravel(), soc.ravel(), t.ravel(),
                         vf.mode).reshape(v.shape)
