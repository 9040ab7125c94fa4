"""Diagonal-Gaussian policy and state-value networks.

Two views of the same networks live here: fast numpy forward passes used
while acting, and graph builders used whenever something has to be
differentiated.  Parameter names are ``pi/w0, pi/b0, ..., pi/log_std`` for
the policy and ``v/w0, v/b0, ...`` for the value function.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from trpoppo.autodiff import Graph, ParamVector, Var

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
DEFAULT_HIDDEN = (256, 256)

POLICY_PREFIX = "pi/"
VALUE_PREFIX = "v/"


@dataclass(frozen=True, eq=False)
class GaussianDist:
    """Diagonal Gaussian; ``mean`` may be batched (N, d) against a (d,) log_std."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        if np.shape(self.mean)[-1:] != np.shape(self.log_std)[-1:]:
            raise ValueError(
                f"mean {np.shape(self.mean)} and log_std {np.shape(self.log_std)} disagree"
            )

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def dim(self) -> int:
        return int(np.shape(self.mean)[-1])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(np.shape(self.mean))
        return self.mean + self.std * noise


def log_prob(dist: GaussianDist, action: np.ndarray) -> Union[float, np.ndarray]:
    """Log-density, summed over action dimensions (per row when batched)."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1:] != (dist.dim,):
        raise ValueError(f"action has {action.shape[-1:]} dims, distribution has {dist.dim}")
    z = (action - dist.mean) * np.exp(-dist.log_std)
    out = np.sum(-0.5 * z * z - dist.log_std - HALF_LOG_2PI, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def entropy(dist: GaussianDist) -> float:
    return float(np.sum(0.5 + HALF_LOG_2PI + np.asarray(dist.log_std)))


def kl_divergence(old: GaussianDist, new: GaussianDist) -> Union[float, np.ndarray]:
    """Closed-form KL(old || new) for diagonal Gaussians."""
    if old.dim != new.dim:
        raise ValueError(f"dimension mismatch: {old.dim} vs {new.dim}")
    var_old = np.exp(2.0 * old.log_std)
    inv_var_new = np.exp(-2.0 * new.log_std)
    diff = old.mean - new.mean
    terms = new.log_std - old.log_std + 0.5 * (var_old + diff * diff) * inv_var_new - 0.5
    out = np.sum(terms, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# -- networks ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyNet:
    obs_dim: int
    act_dim: int
    hidden: Tuple[int, ...]
    params: ParamVector

    def with_params(self, params: ParamVector) -> "PolicyNet":
        self.params.check_layout(params)
        return PolicyNet(self.obs_dim, self.act_dim, self.hidden, params)


@dataclass(frozen=True, eq=False)
class ValueNet:
    obs_dim: int
    hidden: Tuple[int, ...]
    params: ParamVector

    def with_params(self, params: ParamVector) -> "ValueNet":
        self.params.check_layout(params)
        return ValueNet(self.obs_dim, self.hidden, params)


def _widths(obs_dim: int, hidden: Sequence[int], out_dim: int) -> list:
    return [int(obs_dim)] + [int(h) for h in hidden] + [int(out_dim)]


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def _mlp_arrays(prefix, widths, rng, out_gain, hidden_gain=math.sqrt(2.0)) -> Dict[str, np.ndarray]:
    arrays = {}
    n_layers = len(widths) - 1
    for i in range(n_layers):
        gain = out_gain if i == n_layers - 1 else hidden_gain
        if rng is None:
            arrays[f"{prefix}w{i}"] = np.zeros((widths[i], widths[i + 1]))
        else:
            arrays[f"{prefix}w{i}"] = _orthogonal(rng, widths[i], widths[i + 1], gain)
        arrays[f"{prefix}b{i}"] = np.zeros(widths[i + 1])
    return arrays


def init_policy(
    obs_dim: int,
    act_dim: int,
    rng: Optional[np.random.Generator],
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    log_std: float = 0.0,
) -> PolicyNet:
    """Orthogonal init with the mean head scaled by 0.01; ``rng=None`` gives all zeros."""
    arrays = _mlp_arrays(POLICY_PREFIX, _widths(obs_dim, hidden, act_dim), rng, out_gain=0.01)
    arrays[POLICY_PREFIX + "log_std"] = np.full(act_dim, float(log_std))
    return PolicyNet(int(obs_dim), int(act_dim), tuple(int(h) for h in hidden), ParamVector.from_arrays(arrays))


def init_value(obs_dim: int, rng: Optional[np.random.Generator], hidden: Sequence[int] = DEFAULT_HIDDEN) -> ValueNet:
    arrays = _mlp_arrays(VALUE_PREFIX, _widths(obs_dim, hidden, 1), rng, out_gain=1.0)
    return ValueNet(int(obs_dim), tuple(int(h) for h in hidden), ParamVector.from_arrays(arrays))


def _check_obs(obs: np.ndarray, obs_dim: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1:] != (obs_dim,) or obs.ndim > 2:
        raise ValueError(f"observation shape {obs.shape} does not match obs_dim {obs_dim}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite values")
    return obs


def _mlp_forward(params: ParamVector, prefix: str, n_layers: int, x: np.ndarray) -> np.ndarray:
    for i in range(n_layers):
        x = x @ params[f"{prefix}w{i}"] + params[f"{prefix}b{i}"]
        if i < n_layers - 1:
            x = np.tanh(x)
    return x


def policy_forward(net: PolicyNet, obs: np.ndarray) -> GaussianDist:
    obs = _check_obs(obs, net.obs_dim)
    mean = _mlp_forward(net.params, POLICY_PREFIX, len(net.hidden) + 1, obs)
    return GaussianDist(mean, np.array(net.params[POLICY_PREFIX + "log_std"]))


def value_forward(net: ValueNet, obs: np.ndarray) -> Union[float, np.ndarray]:
    obs = _check_obs(obs, net.obs_dim)
    out = _mlp_forward(net.params, VALUE_PREFIX, len(net.hidden) + 1, obs)[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def clamp_log_std(params: ParamVector) -> ParamVector:
    """Clamp ``pi/log_std`` into [LOG_STD_MIN, LOG_STD_MAX]; identity if absent or in range."""
    name = POLICY_PREFIX + "log_std"
    if name not in params.names:
        return params
    ls = params[name]
    if np.all((ls >= LOG_STD_MIN) & (ls <= LOG_STD_MAX)):
        return params
    values = params.values.copy()
    for n, shape, offset in params.layout:
        if n == name:
            values[offset : offset + ls.size] = np.clip(ls, LOG_STD_MIN, LOG_STD_MAX)
    return params.with_values(values)


# -- graph builders -----------------------------------------------------------


def _declare_mlp(graph: Graph, prefix: str, widths: Sequence[int], x: Var) -> Var:
    n_layers = len(widths) - 1
    for i in range(n_layers):
        w = graph.param(f"{prefix}w{i}", (widths[i], widths[i + 1]))
        b = graph.param(f"{prefix}b{i}", (widths[i + 1],))
        x = x @ w + b
        if i < n_layers - 1:
            x = x.tanh()
    return x


def build_policy(graph: Graph, net: PolicyNet, obs: Var) -> Tuple[Var, Var]:
    """Declare policy parameters; returns (mean (N, act), log_std (act,))."""
    mean = _declare_mlp(graph, POLICY_PREFIX, _widths(net.obs_dim, net.hidden, net.act_dim), obs)
    log_std = graph.param(POLICY_PREFIX + "log_std", (net.act_dim,))
    return mean, log_std


def build_value(graph: Graph, net: ValueNet, obs: Var) -> Var:
    """Declare value parameters; returns V(s) with shape (N,)."""
    out = _declare_mlp(graph, VALUE_PREFIX, _widths(net.obs_dim, net.hidden, 1), obs)
    return out.sum(axis=-1)


def graph_log_prob(mean: Var, log_std: Var, actions: Var) -> Var:
    z = (actions - mean) * (-log_std).exp()
    return (z.square() * -0.5 - log_std - HALF_LOG_2PI).sum(axis=-1)


def graph_entropy(log_std: Var) -> Var:
    return (log_std + (0.5 + HALF_LOG_2PI)).sum()


def graph_kl(old_mean: Var, old_log_std: Var, mean: Var, log_std: Var) -> Var:
    """Per-row KL(old || new); old quantities should be fed as inputs (constants)."""
    var_old = (old_log_std * 2.0).exp()
    inv_var_new = (log_std * -2.0).exp()
    diff = old_mean - mean
    terms = log_std - old_log_std + (var_old + diff.square()) * inv_var_new * 0.5 - 0.5
    return terms.sum(axis=-1)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"TPCKPT01"


def save_checkpoint(path: Union[str, Path], params: ParamVector, meta: Optional[dict] = None) -> None:
    """Write magic, u64 header length, JSON header, then raw little-endian float64."""
    header = {
        "format": 1,
        "dtype": "<f8",
        "layout": [[n, list(s), o] for n, s, o in params.layout],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(params.values, dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[ParamVector, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[16 + hlen :], dtype="<f8").astype(np.float64)
    layout = tuple((n, tuple(s), o) for n, s, o in header["layout"])
    return ParamVector(values, layout), header.get("meta", {})
