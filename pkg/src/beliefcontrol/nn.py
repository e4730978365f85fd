"""Minimal MLP stack with hand-rolled reverse-mode gradients.

Networks are plain numpy parameter containers.  A QNetwork maps a particle
belief to one value per discrete action: every particle goes through a shared
encoder, the latent vectors are pooled with an elementwise maximum (so the
output is invariant to particle order), and a head maps the pooled latent to
action values.  The max pooling is exact under any index permutation; tests
allow 1e-12 slack anyway.

`dqn_train` fits the action-value function with a standard DQN loop: uniform
replay, target network, epsilon-greedy behavior, Huber TD loss, Adam updates.
Transitions that land in the goal set of beliefs bootstrap with value zero,
which pins the fitted value to zero on the absorbing goal.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from beliefcontrol.belief import ParticleBelief

logger = logging.getLogger(__name__)

_ACTIVATIONS = ("relu", "tanh")
WEIGHTS_MAGIC = b"BCLF-W1\n"


class ShapeError(ValueError):
    """Input/parameter dimensions do not chain."""


class TrainingDivergedError(RuntimeError):
    """Non-finite training loss; carries the offending step for diagnosis."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training loss became non-finite at step {step}: {loss}")


@dataclass
class Mlp:
    """Dense feed-forward net; hidden activation on all but the last layer."""

    weights: list[np.ndarray]  # weights[l]: (dims[l+1], dims[l])
    biases: list[np.ndarray]  # biases[l]: (dims[l+1],)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and parallel")
        for l, (w, bvec) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or bvec.ndim != 1 or w.shape[0] != bvec.size:
                raise ShapeError(f"layer {l}: weight {w.shape} and bias {bvec.shape} disagree")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ShapeError(f"layer {l}: input dim {w.shape[1]} != previous output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(bvec))):
                raise ValueError(f"layer {l}: parameters must be finite")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def mlp_init(layer_dims, activation: str = "relu", rng: np.random.Generator | None = None) -> Mlp:
    """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = rng or np.random.default_rng()
    ws, bs = [], []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        limit = 1.0 / np.sqrt(din)
        ws.append(rng.uniform(-limit, limit, size=(dout, din)))
        bs.append(rng.uniform(-limit, limit, size=dout))
    return Mlp(ws, bs, activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0.0).astype(float) if kind == "relu" else 1.0 - a * a


def _forward(net: Mlp, x: np.ndarray):
    """Batched forward pass; returns output and the per-layer cache."""
    cache = []
    a = x
    last = len(net.weights) - 1
    for l, (w, bvec) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + bvec
        out = z if l == last else _act(z, net.activation)
        cache.append((a, z, out))
        a = out
    return a, cache


def _backward(net: Mlp, cache, g_out: np.ndarray):
    """Gradients of <g_out, output> w.r.t. parameters and the input."""
    dws = [None] * len(net.weights)
    dbs = [None] * len(net.biases)
    g = g_out
    last = len(net.weights) - 1
    for l in range(last, -1, -1):
        a_in, z, out = cache[l]
        if l != last:
            g = g * _act_grad(z, out, net.activation)
        dws[l] = g.T @ a_in
        dbs[l] = g.sum(axis=0)
        g = g @ net.weights[l]
    return dws, dbs, g


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the net on a single input (d,) or a batch (B, d)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != net.weights[0].shape[1]:
        raise ShapeError(f"input dim {xb.shape[1]} != first layer dim {net.weights[0].shape[1]}")
    y, _ = _forward(net, xb)
    return y[0] if single else y


@dataclass
class MlpGrads:
    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]


def mlp_gradients(net: Mlp, x, output_cotangent) -> MlpGrads:
    """Gradients of <cotangent, net(x)> w.r.t. every weight and bias."""
    x = np.asarray(x, dtype=float)
    cot = np.asarray(output_cotangent, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    cb = cot[None, :] if single else cot
    if xb.shape[1] != net.weights[0].shape[1]:
        raise ShapeError(f"input dim {xb.shape[1]} != first layer dim {net.weights[0].shape[1]}")
    if cb.shape != (xb.shape[0], net.weights[-1].shape[0]):
        raise ShapeError(f"cotangent shape {cot.shape} does not match output")
    _, cache = _forward(net, xb)
    dws, dbs, _ = _backward(net, cache, cb)
    return MlpGrads(dws, dbs)


@dataclass
class QNetwork:
    """Permutation-invariant action-value network over particle beliefs.

    encoder maps one particle to a latent vector; latents are max-pooled over
    particles and fed to the head.  With encoder=None the head consumes the
    row-major flattened belief directly (used by the two-particle system).
    gamma is the discount the network was trained with; the Bellman identity
    used by the controller needs it.
    """

    encoder: Mlp | None
    head: Mlp
    action_count: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.head.weights[-1].shape[0] != self.action_count:
            raise ShapeError("head output dim must equal the action count")
        if self.encoder is not None:
            latent = self.encoder.weights[-1].shape[0]
            if self.head.weights[0].shape[1] != latent:
                raise ShapeError("encoder latent dim must equal head input dim")

    def copy(self) -> "QNetwork":
        enc = self.encoder.copy() if self.encoder is not None else None
        return QNetwork(enc, self.head.copy(), self.action_count, self.gamma)


def encode_belief(q: QNetwork, b: ParticleBelief) -> np.ndarray:
    """Elementwise max of per-particle encoder outputs."""
    if q.encoder is None:
        raise ValueError("network has no encoder; beliefs feed the head directly")
    feats = mlp_forward(q.encoder, b.particles)
    return feats.max(axis=0)


def q_values(q: QNetwork, b: ParticleBelief) -> np.ndarray:
    """One value per action for the belief; permutation invariant."""
    if q.encoder is None:
        flat = b.particles.reshape(-1)
        return mlp_forward(q.head, flat)
    return mlp_forward(q.head, encode_belief(q, b))


def q_values_batch(q: QNetwork, particles: np.ndarray) -> np.ndarray:
    """Q values for a stacked batch of beliefs, shape (B, N, d) -> (B, A)."""
    bsz, n, d = particles.shape
    if q.encoder is None:
        return mlp_forward(q.head, particles.reshape(bsz, n * d))
    feats = mlp_forward(q.encoder, particles.reshape(bsz * n, d)).reshape(bsz, n, -1)
    return mlp_forward(q.head, feats.max(axis=1))


def _q_batch_cached(q: QNetwork, particles: np.ndarray):
    bsz, n, d = particles.shape
    if q.encoder is None:
        y, head_cache = _forward(q.head, particles.reshape(bsz, n * d))
        return y, (None, None, head_cache)
    feats, enc_cache = _forward(q.encoder, particles.reshape(bsz * n, d))
    feats = feats.reshape(bsz, n, -1)
    arg = feats.argmax(axis=1)  # (B, L) winning particle per latent dim
    pooled = np.take_along_axis(feats, arg[:, None, :], axis=1)[:, 0, :]
    y, head_cache = _forward(q.head, pooled)
    return y, (enc_cache, arg, head_cache)


def _q_batch_backward(q: QNetwork, particles: np.ndarray, caches, g_q: np.ndarray):
    """Parameter gradients of <g_q, Q(batch)>; routes pooled grads to argmax rows."""
    bsz, n, d = particles.shape
    enc_cache, arg, head_cache = caches
    head_dw, head_db, g_in = _backward(q.head, head_cache, g_q)
    if q.encoder is None:
        return None, None, head_dw, head_db
    latent = g_in.shape[1]
    g_feats = np.zeros((bsz, n, latent))
    rows = np.repeat(np.arange(bsz)[:, None], latent, axis=1)
    cols = np.tile(np.arange(latent)[None, :], (bsz, 1))
    g_feats[rows, arg, cols] = g_in
    enc_dw, enc_db, _ = _backward(q.encoder, enc_cache, g_feats.reshape(bsz * n, latent))
    return enc_dw, enc_db, head_dw, head_db


# --- training -------------------------------------------------------------


@dataclass
class DqnConfig:
    """Training hyperparameters.

    The defaults are toolkit decisions: step budgets, replay capacity and
    learning rates are not pinned by the environment definitions.
    gamma=0 is allowed for myopic sanity runs even though the controller
    itself needs gamma in (0,1).
    """

    gamma: float = 0.99
    learning_rate: float = 5e-4
    batch_size: int = 32
    target_sync_period: int = 500
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 20_000
    episodes: int = 1_500
    max_steps_per_episode: int = 100
    replay_capacity: int = 20_000
    warmup_steps: int = 1_000
    grad_clip: float = 10.0
    log_every: int = 1_000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        for name in (
            "batch_size",
            "target_sync_period",
            "epsilon_decay_steps",
            "episodes",
            "max_steps_per_episode",
            "replay_capacity",
            "warmup_steps",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def epsilon(self, step: int) -> float:
        frac = min(1.0, step / self.epsilon_decay_steps)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


class ReplayBuffer:
    """Fixed-capacity ring of belief transitions; float32 particle storage."""

    def __init__(self, capacity: int, n_particles: int, state_dim: int):
        self.capacity = capacity
        self.beliefs = np.zeros((capacity, n_particles, state_dim), dtype=np.float32)
        self.next_beliefs = np.zeros_like(self.beliefs)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def push(self, belief, action, reward, next_belief, terminal):
        i = self._head
        self.beliefs[i] = belief
        self.next_beliefs[i] = next_belief
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminals[i] = terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return (
            self.beliefs[idx].astype(np.float64),
            self.actions[idx],
            self.rewards[idx],
            self.next_beliefs[idx].astype(np.float64),
            self.terminals[idx],
        )


class Adam:
    """Adam over a flat list of parameter arrays (default moment coefficients)."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


class BeliefEnv(Protocol):
    """What dqn_train needs from an environment."""

    n_actions: int

    def reset(self, rng: np.random.Generator): ...

    def step(self, belief, aux, action: int, rng: np.random.Generator): ...

    def network_arch(self) -> dict: ...


def build_q_network(arch: dict, gamma: float, rng: np.random.Generator) -> QNetwork:
    """Instantiate a QNetwork from an environment's architecture description."""
    action_count = int(arch["actions"])
    if arch.get("encoder"):
        enc_dims = [arch["particle_dim"], *arch["encoder"], arch["latent"]]
        encoder = mlp_init(enc_dims, "relu", rng)
        head_in = arch["latent"]
    else:
        encoder = None
        head_in = arch["particle_dim"] * arch["n_particles"]
    head = mlp_init([head_in, *arch["head"], action_count], "relu", rng)
    return QNetwork(encoder, head, action_count, gamma)


def _params(q: QNetwork) -> list[np.ndarray]:
    out = []
    if q.encoder is not None:
        out += q.encoder.weights + q.encoder.biases
    out += q.head.weights + q.head.biases
    return out


def _huber_grad(td: np.ndarray) -> np.ndarray:
    return np.clip(td, -1.0, 1.0)


def _huber(td: np.ndarray) -> np.ndarray:
    a = np.abs(td)
    return np.where(a <= 1.0, 0.5 * td * td, a - 0.5)


def dqn_train(env, config: DqnConfig, rng: np.random.Generator, q: QNetwork | None = None) -> QNetwork:
    """Fit the action-value network on the environment's belief transitions.

    Epsilon-greedy behavior policy, target network synced every
    `target_sync_period` environment steps, Huber loss on the TD error,
    Adam updates.  Terminal transitions bootstrap with value zero.
    Raises TrainingDivergedError on a non-finite loss.
    """
    if q is None:
        q = build_q_network(env.network_arch(), config.gamma, rng)
    target = q.copy()
    params = _params(q)
    opt = Adam(params, config.learning_rate)

    probe_belief, _ = env.reset(rng)
    buffer = ReplayBuffer(config.replay_capacity, probe_belief.n, probe_belief.state_dim)

    step = 0
    for _episode in range(config.episodes):
        belief, aux = env.reset(rng)
        for _ in range(config.max_steps_per_episode):
            if rng.uniform() < config.epsilon(step):
                action = int(rng.integers(env.n_actions))
            else:
                action = int(np.argmax(q_values(q, belief)))
            next_belief, next_aux, reward, terminal = env.step(belief, aux, action, rng)
            buffer.push(belief.particles, action, reward, next_belief.particles, terminal)
            if terminal:
                # absorbing goal: zero reward forever pins the fitted value of
                # in-goal beliefs to zero rather than leaving it extrapolated
                for a in range(env.n_actions):
                    buffer.push(next_belief.particles, a, 0.0, next_belief.particles, True)
            belief, aux = next_belief, next_aux
            step += 1

            if buffer.size >= config.warmup_steps:
                loss = _train_step(q, target, buffer, config, opt, rng)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(step, float(loss))
                logger.debug("step=%d loss=%.6f epsilon=%.3f", step, loss, config.epsilon(step))
                if config.log_every and step % config.log_every == 0:
                    logger.info("step=%d loss=%.6f epsilon=%.3f", step, loss, config.epsilon(step))
            if step % config.target_sync_period == 0:
                target = q.copy()
            if terminal:
                break
    return q


def _train_step(q, target, buffer, config, opt, rng) -> float:
    beliefs, actions, rewards, next_beliefs, terminals = buffer.sample(config.batch_size, rng)
    next_q = q_values_batch(target, next_beliefs)
    bootstrap = np.where(terminals, 0.0, next_q.max(axis=1))
    targets = rewards + config.gamma * bootstrap

    qvals, caches = _q_batch_cached(q, beliefs)
    picked = qvals[np.arange(len(actions)), actions]
    td = picked - targets
    loss = float(np.mean(_huber(td)))

    g_q = np.zeros_like(qvals)
    g_q[np.arange(len(actions)), actions] = _huber_grad(td) / len(actions)
    enc_dw, enc_db, head_dw, head_db = _q_batch_backward(q, beliefs, caches, g_q)
    grads = []
    if q.encoder is not None:
        grads += enc_dw + enc_db
    grads += head_dw + head_db

    if config.grad_clip:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if norm > config.grad_clip:
            grads = [g * (config.grad_clip / norm) for g in grads]
    opt.step(grads)
    return loss


# --- weights file ----------------------------------------------------------


def _mlp_header(net: Mlp | None, prefix: str):
    if net is None:
        return None, []
    arrays = []
    for l, (w, bvec) in enumerate(zip(net.weights, net.biases)):
        arrays.append((f"{prefix}.w{l}", w))
        arrays.append((f"{prefix}.b{l}", bvec))
    return {"layer_dims": net.layer_dims, "activation": net.activation}, arrays


def save_weights(q: QNetwork, path) -> None:
    """Versioned container: magic, JSON header, row-major float64 arrays."""
    enc_meta, enc_arrays = _mlp_header(q.encoder, "encoder")
    head_meta, head_arrays = _mlp_header(q.head, "head")
    arrays = enc_arrays + head_arrays
    header = {
        "format": 1,
        "action_count": q.action_count,
        "gamma": q.gamma,
        "encoder": enc_meta,
        "head": head_meta,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path) -> QNetwork:
    with open(path, "rb") as f:
        magic = f.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"not a weights file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != 1:
            raise ValueError(f"unsupported weights format {header.get('format')}")
        arrays = {}
        for meta in header["arrays"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            arrays[meta["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    def unpack(prefix, meta):
        if meta is None:
            return None
        n_layers = len(meta["layer_dims"]) - 1
        ws = [arrays[f"{prefix}.w{l}"] for l in range(n_layers)]
        bs = [arrays[f"{prefix}.b{l}"] for l in range(n_layers)]
        return Mlp(ws, bs, meta["activation"])

    return QNetwork(
        encoder=unpack("encoder", header["encoder"]),
        head=unpack("head", header["head"]),
        action_count=int(header["action_count"]),
        gamma=float(header["gamma"]),
    )
