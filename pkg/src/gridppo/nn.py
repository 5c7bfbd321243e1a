"""Small dense networks in numpy: MLP forward/backward, Gaussian policy head, optimizers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_2PI = np.log(2 * np.pi)
CHECKPOINT_VERSION = 1

_ACT = {
    "relu": lambda z: np.maximum(z, 0.0),
    "sigmoid": lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)),  # overflow-free logistic
    "linear": lambda z: z,
}


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected network; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    @classmethod
    def init(cls, sizes, hidden="relu", output="linear", rng=None) -> "Mlp":
        """He-uniform hidden layers, Glorot-uniform output layer, zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases, acts = [], [], []
        for i, (fin, fout) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            limit = np.sqrt(6.0 / (fin + fout)) if last else np.sqrt(6.0 / fin)
            weights.append(rng.uniform(-limit, limit, size=(fin, fout)))
            biases.append(np.zeros(fout))
            acts.append(output if last else hidden)
        return cls(weights, biases, acts)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))

    def forward(self, x, keep: bool = False):
        """Return outputs for a batch ``x`` of shape (N, in); with ``keep`` also the cache."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[0]:
            raise ValueError(f"expected batch of shape (N, {self.weights[0].shape[0]}), got {x.shape}")
        cache = [(x, None)]
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            a = _ACT[act](z)
            cache.append((a, z))
        return (a, cache) if keep else a

    def backward(self, cache, grad_out) -> list[np.ndarray]:
        """Gradients (same order as :meth:`params`) of ``sum(grad_out * output)``."""
        grad_out = np.asarray(grad_out, dtype=float)
        if grad_out.shape != cache[-1][0].shape:
            raise ValueError(f"upstream gradient shape {grad_out.shape} != output {cache[-1][0].shape}")
        grads = [None] * (2 * len(self.weights))
        delta = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            a, z = cache[i + 1]
            delta = delta * _act_grad(self.activations[i], z, a)
            a_prev = cache[i][0]
            grads[2 * i] = a_prev.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i:
                delta = delta @ self.weights[i].T
        return grads

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "activations": self.activations}


def forward(params: Mlp, batch):
    return params.forward(batch)


def backward(params: Mlp, batch, upstream) -> list[np.ndarray]:
    _, cache = params.forward(batch, keep=True)
    return params.backward(cache, upstream)


# --------------------------------------------------------------------------
# Gaussian policy

def gaussian_log_prob(mean, log_std, action):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    mean, log_std, action = np.broadcast_arrays(
        np.asarray(mean, float), np.asarray(log_std, float), np.asarray(action, float))
    zs = (action - mean) * np.exp(-log_std)
    return np.sum(-0.5 * zs**2 - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))


def sample_action(mean, log_std, rng):
    mean = np.asarray(mean, dtype=float)
    return mean + np.exp(log_std) * rng.standard_normal(mean.shape)


@dataclass
class PolicyParams:
    """Actor MLP producing Gaussian means from the first ``obs_dim`` state columns."""

    actor: Mlp
    log_std: np.ndarray
    obs_dim: int

    @classmethod
    def init(cls, obs_dim, act_dim, hidden=(64, 64), log_std=-1.0, rng=None) -> "PolicyParams":
        actor = Mlp.init([obs_dim, *hidden, act_dim], output="sigmoid", rng=rng)
        return cls(actor, np.full(act_dim, float(log_std)), obs_dim)

    def mean(self, states):
        states = np.atleast_2d(states)
        return self.actor.forward(states[:, :self.obs_dim])

    def params(self) -> list[np.ndarray]:
        return self.actor.params() + [self.log_std]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.actor.copy(), self.log_std.copy(), self.obs_dim)


@dataclass
class CriticParams:
    net: Mlp

    @classmethod
    def init(cls, state_dim, hidden=(64, 64), rng=None) -> "CriticParams":
        return cls(Mlp.init([state_dim, *hidden, 1], output="linear", rng=rng))

    def value(self, states):
        return self.net.forward(np.atleast_2d(states))[:, 0]

    def params(self) -> list[np.ndarray]:
        return self.net.params()

    def copy(self) -> "CriticParams":
        return CriticParams(self.net.copy())


# --------------------------------------------------------------------------
# optimizers (update parameter arrays in place)

def sgd_step(params, grads, lr):
    for p, g in zip(params, grads):
        p -= lr * g


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads, lr):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr):
    state.step(params, grads, lr)
    return params


# --------------------------------------------------------------------------
# checkpoints: a single .npz holding arrays plus a JSON metadata blob

def _pack_mlp(prefix, net: Mlp, arrays):
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}.W{i}"] = w
        arrays[f"{prefix}.b{i}"] = b
    return net.to_dict()


def _unpack_mlp(prefix, spec, z) -> Mlp:
    n = len(spec["sizes"]) - 1
    return Mlp([z[f"{prefix}.W{i}"] for i in range(n)], [z[f"{prefix}.b{i}"] for i in range(n)],
               list(spec["activations"]))


def _pack_adam(prefix, opt: Adam | None, arrays):
    if opt is None or not opt.m:
        return None
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        arrays[f"{prefix}.m{i}"] = m
        arrays[f"{prefix}.v{i}"] = v
    return {"t": opt.t, "n": len(opt.m), "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def _unpack_adam(prefix, spec, z) -> Adam | None:
    if spec is None:
        return None
    return Adam(spec["beta1"], spec["beta2"], spec["eps"], spec["t"],
                [z[f"{prefix}.m{i}"] for i in range(spec["n"])],
                [z[f"{prefix}.v{i}"] for i in range(spec["n"])])


@dataclass
class Checkpoint:
    policy: PolicyParams
    critic: CriticParams | None = None
    actor_opt: Adam | None = None
    critic_opt: Adam | None = None
    meta: dict = field(default_factory=dict)  # normalization constants, case fingerprint, ...


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {"policy.log_std": ckpt.policy.log_std}
    meta = {
        "version": CHECKPOINT_VERSION,
        "actor": _pack_mlp("actor", ckpt.policy.actor, arrays),
        "obs_dim": ckpt.policy.obs_dim,
        "critic": _pack_mlp("critic", ckpt.critic.net, arrays) if ckpt.critic else None,
        "actor_opt": _pack_adam("actor_opt", ckpt.actor_opt, arrays),
        "critic_opt": _pack_adam("critic_opt", ckpt.critic_opt, arrays),
        "meta": ckpt.meta,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        policy = PolicyParams(_unpack_mlp("actor", meta["actor"], z), z["policy.log_std"],
                              meta["obs_dim"])
        critic = CriticParams(_unpack_mlp("critic", meta["critic"], z)) if meta["critic"] else None
        return Checkpoint(policy, critic, _unpack_adam("actor_opt", meta["actor_opt"], z),
                          _unpack_adam("critic_opt", meta["critic_opt"], z), meta["meta"])
