"""Policy, value and reward-signal networks, plus checkpoint files.

All three are plain multilayer perceptrons over flat parameter vectors.
The policy has a categorical head (discrete actions only). The reward
network reads a state vector concatenated with a one-hot action and its
raw scalar output is passed through the active divergence's final
activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .conjugate import FicnnParams
from .diffcore import ParamVector
from .errors import ConfigurationError, NumericError

CHECKPOINT_FORMAT = "fgail-checkpoint"
CHECKPOINT_VERSION = 1

_NP_ACT = {
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
}


@dataclass(frozen=True, eq=False)
class MlpParams:
    vector: ParamVector
    sizes: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.activations) != len(self.sizes) - 2:
            raise ConfigurationError("need one activation per hidden layer")
        for a in self.activations:
            if a not in _NP_ACT:
                raise ConfigurationError(f"unsupported activation {a!r}")

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def with_vector(self, vector):
        return MlpParams(vector, self.sizes, self.activations)

    def with_values(self, values):
        return self.with_vector(self.vector.with_values(values))


def init_mlp(rng, sizes, activations, zero=False) -> MlpParams:
    """Weights and biases uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if zero:
            arrays[f"W{i}"] = np.zeros((fan_in, fan_out))
            arrays[f"b{i}"] = np.zeros(fan_out)
        else:
            arrays[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            arrays[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)
    return MlpParams(ParamVector.from_arrays(arrays), tuple(sizes), tuple(activations))


def mlp_graph(p, x, activations):
    h = dc.as_tensor(x)
    n_layers = len(activations) + 1
    for i in range(n_layers):
        h = h @ p[f"W{i}"] + p[f"b{i}"]
        if i < n_layers - 1:
            h = dc.ACTIVATIONS[activations[i]](h)
    return h


def _check_input(params: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != params.in_dim:
        raise ConfigurationError(
            f"input dimension {x.shape[-1]} does not match network input {params.in_dim}"
        )
    return x


def mlp_apply(params: MlpParams, x) -> np.ndarray:
    """Plain numpy forward pass, batched over rows of ``x``."""
    h = _check_input(params, x)
    v = params.vector
    n_layers = len(params.activations) + 1
    for i in range(n_layers):
        h = h @ v[f"W{i}"] + v[f"b{i}"]
        if i < n_layers - 1:
            h = _NP_ACT[params.activations[i]](h)
    return h


def mlp_jvp(params: MlpParams, x, tangent) -> tuple[np.ndarray, np.ndarray]:
    """Forward-mode product: outputs and their directional derivative along ``tangent``."""
    h = _check_input(params, x)
    dh = np.zeros_like(h)
    v = params.vector
    t = params.vector.with_values(tangent)
    n_layers = len(params.activations) + 1
    for i in range(n_layers):
        W, b = v[f"W{i}"], v[f"b{i}"]
        pre = h @ W + b
        dpre = dh @ W + h @ t[f"W{i}"] + t[f"b{i}"]
        if i < n_layers - 1:
            act = params.activations[i]
            if act == "tanh":
                h = np.tanh(pre)
                dh = (1.0 - h * h) * dpre
            elif act == "relu":
                h = np.maximum(pre, 0.0)
                dh = np.where(pre > 0, dpre, 0.0)
            else:
                h, dh = pre, dpre
        else:
            h, dh = pre, dpre
    return h, dh


def mlp_vjp(params: MlpParams, x, cotangent) -> np.ndarray:
    """Reverse-mode product: gradient of ``sum(outputs * cotangent)`` w.r.t. parameters."""
    tensors = params.vector.tensors()
    out = mlp_graph(tensors, _check_input(params, x), params.activations)
    out.backward(np.asarray(cotangent, dtype=np.float64))
    return params.vector.flatten_grads({k: t.grad for k, t in tensors.items()})


# policy -----------------------------------------------------------------


def policy_net(rng, obs_dim, n_actions, hidden=(100, 100)) -> MlpParams:
    return init_mlp(rng, (obs_dim, *hidden, n_actions), ("tanh",) * len(hidden))


def value_net(rng, obs_dim, hidden=(100, 100)) -> MlpParams:
    return init_mlp(rng, (obs_dim, *hidden, 1), ("tanh",) * len(hidden))


def reward_net(rng, in_dim, hidden=(100, 100, 100), activations=("tanh", "tanh", "identity")):
    return init_mlp(rng, (in_dim, *hidden, 1), activations)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def policy_distribution(params: MlpParams, state) -> np.ndarray:
    """Action probabilities for one state (1-d result) or a batch (2-d)."""
    logits = mlp_apply(params, state)
    if not np.all(np.isfinite(logits)):
        raise NumericError("policy produced non-finite logits")
    probs = softmax(logits)
    return probs[0] if np.ndim(state) == 1 else probs


def log_prob_and_entropy(params: MlpParams, state, action):
    probs = policy_distribution(params, state)
    logp_all = np.log(np.clip(probs, 1e-300, None))
    entropy = -np.sum(np.where(probs > 0, probs * logp_all, 0.0), axis=-1)
    if np.ndim(state) == 1:
        return float(logp_all[int(action)]), float(entropy)
    action = np.asarray(action, dtype=int)
    return logp_all[np.arange(len(action)), action], entropy


def log_prob_graph(p, states, actions, activations):
    """Differentiable log pi(a|s) for a batch; returns a Tensor of shape (n,)."""
    logp = dc.log_softmax(mlp_graph(p, states, activations), axis=-1)
    return logp[np.arange(len(actions)), np.asarray(actions, dtype=int)]


# reward signal ----------------------------------------------------------


def one_hot(actions, n_actions):
    actions = np.asarray(actions, dtype=int).reshape(-1)
    if np.any(actions < 0) or np.any(actions >= n_actions):
        raise ConfigurationError(f"action index out of range for {n_actions} actions")
    out = np.zeros((actions.size, n_actions))
    out[np.arange(actions.size), actions] = 1.0
    return out


def reward_inputs(states, actions, n_actions) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[None, :]
    return np.concatenate([states, one_hot(actions, n_actions)], axis=1)


def reward_graph(p, x, activations, spec):
    """u = final_activation(raw output), as a Tensor of shape (n, 1)."""
    return spec.final_activation(mlp_graph(p, x, activations))


def reward_values(params: MlpParams, x, spec) -> np.ndarray:
    """Batched u values for pre-encoded inputs ``x``; shape (n,)."""
    raw = mlp_apply(params, x)
    u = spec.final_activation(dc.Tensor(raw)).data[:, 0]
    spec.check_domain(u)
    return u


def reward_signal(params: MlpParams, state, action, spec, n_actions=None) -> float:
    """u = T(s, a) for a single state-action pair."""
    if n_actions is None:
        n_actions = params.in_dim - len(np.atleast_1d(state))
    return float(reward_values(params, reward_inputs(state, [action], n_actions), spec)[0])


# checkpoints ------------------------------------------------------------


def _encode(net):
    if isinstance(net, FicnnParams):
        head = {
            "kind": "ficnn",
            "layer_count": net.layer_count,
            "nodes_per_layer": net.nodes_per_layer,
            "output_activation": net.output_activation,
        }
    elif isinstance(net, MlpParams):
        head = {"kind": "mlp", "sizes": list(net.sizes), "activations": list(net.activations)}
    else:
        raise ConfigurationError(f"cannot serialise {type(net).__name__}")
    vec = net.vector
    head["layout"] = [[name, list(seg.shape)] for name, seg in vec.layout.items()]
    head["values"] = vec.values.tolist()
    return head


def _decode(entry):
    arrays = {}
    values = np.asarray(entry["values"], dtype=np.float64)
    pos = 0
    for name, shape in entry["layout"]:
        n = int(np.prod(shape, dtype=int))
        arrays[name] = values[pos : pos + n].reshape(shape)
        pos += n
    vector = ParamVector.from_arrays(arrays)
    if entry["kind"] == "ficnn":
        return FicnnParams(
            vector, entry["layer_count"], entry["nodes_per_layer"], entry["output_activation"]
        )
    return MlpParams(vector, tuple(entry["sizes"]), tuple(entry["activations"]))


def save_checkpoint(path, networks: dict, meta: dict | None = None):
    """Write networks as versioned JSON. Floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "networks": {name: _encode(net) for name, net in networks.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')}")
    nets = {name: _decode(entry) for name, entry in doc["networks"].items()}
    return nets, doc.get("meta", {})
