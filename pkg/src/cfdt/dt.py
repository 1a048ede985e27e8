"""Discrete-action Decision Transformer built on :mod:`cfdt.nn`.

Tokens are interleaved per timestep as ``[R_t, s_t, a_t]``; the action for step
``t`` is predicted from the hidden state at the ``s_t`` token, which under the
causal mask sees every earlier triplet plus the current return-to-go and state.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Batch, WeightedDataset, sample_batch
from .gridworld import N_ACTIONS, GridLayout, RewardSpec, observe, reset, step
from .nn import checkpoint
from .seeding import STREAM_TRAIN, make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class DTConfig:
    obs_dim: int = 8 * 8 * 4 + 4
    n_actions: int = N_ACTIONS
    context_len: int = 20
    embed_dim: int = 64
    n_layers: int = 3
    n_heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.1
    max_timestep: int = 100
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    grad_clip: float = 1.0
    batch_size: int = 64
    training_steps: int = 10_000
    log_every: int = 100
    target_return: float = 1.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.context_len < 1:
            raise ValueError("context_len must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DTConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class DTModel:
    def __init__(self, cfg: DTConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg)
        dtype = np.dtype(cfg.dtype)
        self.params = {k: nn.Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
                       for k, v in sorted(params.items())}

    def parameters(self) -> list[nn.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __getitem__(self, name: str) -> nn.Tensor:
        return self.params[name]


def init_params(cfg: DTConfig) -> dict[str, np.ndarray]:
    rng = make_rng(cfg.seed, STREAM_TRAIN, 0)
    E, D, A = cfg.embed_dim, cfg.obs_dim, cfg.n_actions
    hidden = cfg.mlp_ratio * E
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.n_layers)
    p = {
        "embed_return.w": rng.normal(0, std, (1, E)),
        "embed_return.b": np.zeros(E),
        "embed_obs.w": rng.normal(0, std, (D, E)),
        "embed_obs.b": np.zeros(E),
        "embed_action": rng.normal(0, std, (A, E)),
        "embed_time": rng.normal(0, std, (cfg.max_timestep, E)),
        "ln_in.g": np.ones(E), "ln_in.b": np.zeros(E),
        "ln_f.g": np.ones(E), "ln_f.b": np.zeros(E),
        "head.w": rng.normal(0, std, (E, A)),
        "head.b": np.zeros(A),
    }
    for i in range(cfg.n_layers):
        b = f"block{i}."
        p.update({
            b + "ln1.g": np.ones(E), b + "ln1.b": np.zeros(E),
            b + "q.w": rng.normal(0, std, (E, E)), b + "q.b": np.zeros(E),
            b + "k.w": rng.normal(0, std, (E, E)), b + "k.b": np.zeros(E),
            b + "v.w": rng.normal(0, std, (E, E)), b + "v.b": np.zeros(E),
            b + "o.w": rng.normal(0, proj_std, (E, E)), b + "o.b": np.zeros(E),
            b + "ln2.g": np.ones(E), b + "ln2.b": np.zeros(E),
            b + "fc.w": rng.normal(0, std, (E, hidden)), b + "fc.b": np.zeros(hidden),
            b + "proj.w": rng.normal(0, proj_std, (hidden, E)), b + "proj.b": np.zeros(E),
        })
    return p


def forward(model: DTModel, returns, obs, actions, timesteps, mask,
            training: bool = False, rng: np.random.Generator | None = None) -> nn.Tensor:
    """Action logits of shape ``(B, K, n_actions)`` for a batch of K-windows."""
    cfg = model.cfg
    P = model.params
    dtype = np.dtype(cfg.dtype)
    returns = np.asarray(returns, dtype=dtype)
    obs = np.asarray(obs, dtype=dtype)
    if returns.ndim != 2 or obs.shape != returns.shape + (cfg.obs_dim,):
        raise nn.ShapeError(f"returns {returns.shape} / obs {obs.shape} do not match obs_dim "
                            f"{cfg.obs_dim}")
    B, K = returns.shape
    if K > cfg.context_len:
        raise nn.ShapeError(f"window of {K} exceeds context_len {cfg.context_len}")
    timesteps = np.minimum(np.asarray(timesteps), cfg.max_timestep - 1)
    mask = np.asarray(mask, dtype=bool)
    E = cfg.embed_dim
    p_drop = cfg.dropout if training else 0.0

    t_emb = nn.embedding(P["embed_time"], timesteps)
    r = nn.add(nn.linear(returns[..., None], P["embed_return.w"], P["embed_return.b"]), t_emb)
    s = nn.add(nn.linear(obs, P["embed_obs.w"], P["embed_obs.b"]), t_emb)
    a = nn.add(nn.embedding(P["embed_action"], actions), t_emb)
    x = nn.reshape(nn.stack([r, s, a], axis=2), (B, 3 * K, E))
    x = nn.layer_norm(x, P["ln_in.g"], P["ln_in.b"])
    x = nn.dropout(x, p_drop, rng, training)
    token_mask = np.repeat(mask, 3, axis=1)

    for i in range(cfg.n_layers):
        b = f"block{i}."
        h = nn.layer_norm(x, P[b + "ln1.g"], P[b + "ln1.b"])
        q = nn.linear(h, P[b + "q.w"], P[b + "q.b"])
        k = nn.linear(h, P[b + "k.w"], P[b + "k.b"])
        v = nn.linear(h, P[b + "v.w"], P[b + "v.b"])
        att = nn.causal_masked_attention(q, k, v, token_mask, cfg.n_heads)
        x = nn.add(x, nn.dropout(nn.linear(att, P[b + "o.w"], P[b + "o.b"]), p_drop, rng, training))
        h = nn.layer_norm(x, P[b + "ln2.g"], P[b + "ln2.b"])
        h = nn.gelu(nn.linear(h, P[b + "fc.w"], P[b + "fc.b"]))
        x = nn.add(x, nn.dropout(nn.linear(h, P[b + "proj.w"], P[b + "proj.b"]), p_drop, rng, training))

    x = nn.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
    state_tokens = nn.getitem(nn.reshape(x, (B, K, 3, E)), (slice(None), slice(None), 1))
    return nn.linear(state_tokens, P["head.w"], P["head.b"])


def forward_batch(model: DTModel, batch: Batch, training: bool = False, rng=None) -> nn.Tensor:
    return forward(model, batch.returns, batch.obs, batch.actions, batch.timesteps, batch.mask,
                   training, rng)


def batch_loss(model: DTModel, batch: Batch, training: bool = False, rng=None) -> nn.Tensor:
    logits = forward_batch(model, batch, training, rng)
    return nn.cross_entropy(logits, batch.actions, batch.mask)


def train(model: DTModel, ds: WeightedDataset, cfg: DTConfig | None = None,
          steps: int | None = None, callback=None) -> tuple[DTModel, list[tuple[int, float]]]:
    """Weighted behaviour cloning of actions. Returns the model and a loss trace
    with one ``(step, mean loss over the last log_every steps)`` entry per interval.

    ``callback(step, model)`` runs at every log interval; returning True stops early.
    """
    cfg = cfg or model.cfg
    steps = cfg.training_steps if steps is None else steps
    if len(ds) == 0:
        raise TrainingError("cannot train on an empty dataset")
    rng = make_rng(cfg.seed, STREAM_TRAIN, 1)
    params = model.parameters()
    opt = nn.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    dtype = np.dtype(cfg.dtype)
    trace: list[tuple[int, float]] = []
    window: list[float] = []
    for it in range(1, steps + 1):
        batch = sample_batch(ds, cfg.batch_size, cfg.context_len, rng, dtype)
        opt.zero_grad()
        loss = batch_loss(model, batch, training=True, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            last = trace[-1] if trace else None
            raise TrainingError(f"loss became {value} at step {it}; last logged (step, loss) = {last}")
        nn.backward(loss)
        if cfg.grad_clip:
            nn.clip_grad_norm(params, cfg.grad_clip)
        if cfg.warmup_steps:
            opt.state.lr = cfg.lr * min(1.0, it / cfg.warmup_steps)
        opt.step()
        window.append(value)
        if it % cfg.log_every == 0:
            trace.append((it, float(np.mean(window))))
            window = []
            log.debug("step %d loss %.4f", it, trace[-1][1])
            if callback is not None and callback(it, model):
                break
    return model, trace


def _window_arrays(history, current_obs, R_current, K: int, obs_dim: int, dtype):
    recent = list(history)[-(K - 1):] if K > 1 else []
    t0 = len(history) - len(recent)
    n = len(recent) + 1
    pad = K - n
    returns = np.zeros((1, K), dtype=dtype)
    obs = np.zeros((1, K, obs_dim), dtype=dtype)
    actions = np.zeros((1, K), dtype=np.int64)
    timesteps = np.zeros((1, K), dtype=np.int64)
    mask = np.zeros((1, K), dtype=bool)
    for j, (R, o, a) in enumerate(recent):
        returns[0, pad + j], obs[0, pad + j], actions[0, pad + j] = R, o, a
    returns[0, -1], obs[0, -1] = R_current, current_obs
    timesteps[0, pad:] = np.arange(t0, t0 + n)
    mask[0, pad:] = True
    return returns, obs, actions, timesteps, mask


def act_dt(model: DTModel, history, current_obs, R_current: float) -> int:
    """Greedy action given past ``(R, obs, action)`` triplets and the current state.

    Only the last ``K - 1`` history triplets fit in the window next to the current
    state; timesteps are absolute (``len(history)`` for the current state).
    """
    cfg = model.cfg
    arrays = _window_arrays(history, current_obs, R_current, cfg.context_len, cfg.obs_dim,
                            np.dtype(cfg.dtype))
    logits = forward(model, *arrays).data
    return int(np.argmax(logits[0, -1]))


@dataclass(frozen=True)
class EpisodeResult:
    layout_id: str
    total_return: float
    length: int
    reached_goal: bool


def evaluate(model: DTModel, layouts: list[GridLayout], reward_spec: RewardSpec,
             cfg: DTConfig | None = None) -> list[EpisodeResult]:
    """One greedy episode per layout, conditioned on ``cfg.target_return``.

    All episodes advance in lockstep so each environment step is one batched
    forward pass; results equal running :func:`act_dt` episode by episode.
    """
    cfg = cfg or model.cfg
    dtype = np.dtype(cfg.dtype)
    n, K, T = len(layouts), cfg.context_len, reward_spec.horizon
    states = [reset(l) for l in layouts]
    R_hist = np.zeros((n, T), dtype=dtype)
    obs_hist = np.zeros((n, T, cfg.obs_dim), dtype=dtype)
    act_hist = np.zeros((n, T), dtype=np.int64)
    R_now = np.full(n, cfg.target_return, dtype=np.float64)
    totals = np.zeros(n)
    lengths = np.zeros(n, dtype=np.int64)
    goals = np.zeros(n, dtype=bool)
    active = list(range(n))
    t = 0
    while active:
        for i in active:
            obs_hist[i, t] = observe(states[i])
            R_hist[i, t] = R_now[i]
        lo = max(0, t - K + 1)
        width = t + 1 - lo
        idx = np.asarray(active)
        returns = np.zeros((len(idx), K), dtype=dtype)
        obs = np.zeros((len(idx), K, cfg.obs_dim), dtype=dtype)
        actions = np.zeros((len(idx), K), dtype=np.int64)
        timesteps = np.zeros((len(idx), K), dtype=np.int64)
        mask = np.zeros((len(idx), K), dtype=bool)
        returns[:, K - width:] = R_hist[idx, lo:t + 1]
        obs[:, K - width:] = obs_hist[idx, lo:t + 1]
        actions[:, K - width:] = act_hist[idx, lo:t + 1]
        actions[:, -1] = 0
        timesteps[:, K - width:] = np.arange(lo, t + 1)
        mask[:, K - width:] = True
        logits = forward(model, returns, obs, actions, timesteps, mask).data
        chosen = np.argmax(logits[:, -1], axis=1)
        still = []
        for row, i in enumerate(active):
            a = int(chosen[row])
            act_hist[i, t] = a
            states[i], r, done, _ = step(states[i], a, reward_spec)
            totals[i] += r
            R_now[i] -= r
            lengths[i] += 1
            if done:
                goals[i] = states[i].pos == layouts[i].goal
            else:
                still.append(i)
        active = still
        t += 1
    return [EpisodeResult(layouts[i].layout_id, float(totals[i]), int(lengths[i]), bool(goals[i]))
            for i in range(n)]


def save_model(model: DTModel, path, extra: dict | None = None) -> None:
    checkpoint.save(path, model.state_dict(), model.cfg.to_dict(), extra)


def load_model(path) -> tuple[DTModel, dict]:
    params, config, extra = checkpoint.load(path)
    cfg = DTConfig.from_dict(config)
    return DTModel(cfg, params), extra
