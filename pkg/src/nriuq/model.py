"""Factorised NRI encoder/decoder with a learned per-coordinate uncertainty head.

The encoder reads a trajectory window and emits, for every ordered particle
pair and every factor (springs, charges), logits over edge types. The decoder
is a one-step Markov MLP: pairwise message functions are gated by the sampled
edge types, summed at receivers, and a node MLP produces a residual update of
the state. The state carries ``(x, y, vx, vy)`` plus 0, 1, 2 or 4 raw sigma
channels which are mapped to positive values with a sharpened softplus.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from nriuq import autodiff as ad
from nriuq.autodiff import MLP, Linear, Module, Tensor

SIGMA_CHANNELS = {"fixed": 0, "isotropic": 1, "semi-isotropic": 2, "anisotropic": 4}
# Keeps softplus outputs strictly positive where exp underflows.
SIGMA_FLOOR = 1e-12


@dataclass
class ModelConfig:
    n_particles: int = 5
    hidden_dim: int = 32
    n_edge_factors: int = 2
    edge_types_per_factor: int = 2
    tau: float = 0.5
    encoder_window: int = 50
    decoder_window: int = 50
    teacher_force_every: int = 10
    sigma_mode: str = "fixed"
    sigma0: float = float(np.sqrt(5e-5))
    beta: float = 5.0
    # Edge type 0 of every factor sends no message ("no interaction").
    skip_first: bool = True
    zero_init_logits: bool = False
    zero_init_output: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_CHANNELS:
            raise ValueError(f"sigma_mode must be one of {sorted(SIGMA_CHANNELS)}, got {self.sigma_mode!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not (self.sigma0 > 0 and self.beta > 0):
            raise ValueError("sigma0 and beta must be positive")
        for name in ("encoder_window", "decoder_window", "teacher_force_every", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_sigma(self) -> int:
        return SIGMA_CHANNELS[self.sigma_mode]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in types:
                raise KeyError(f"unknown model key {key!r}")
            t = types[key]
            if t == "bool":
                value = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
            elif t == "int":
                value = int(value)
            elif t == "float":
                value = float(value)
            kwargs[key] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class SigmaTransform:
    """Maps raw network outputs to positive uncertainties and back."""

    sigma0: float
    beta: float

    def inverse(self, sigma=None) -> np.ndarray:
        sigma = self.sigma0 if sigma is None else sigma
        s = np.asarray(sigma, dtype=np.float64) - SIGMA_FLOOR
        return np.log(np.abs(np.expm1(self.beta * s))) / self.beta

    def forward(self, raw) -> Tensor:
        return ad.softplus(raw, self.beta) + SIGMA_FLOOR

    def __call__(self, raw) -> Tensor:
        return self.forward(raw)


@dataclass
class PredictionWithUncertainty:
    mean: Tensor  # (B, T, N, 4)
    sigma: Tensor  # (B, T, N, m); m = 1 in fixed mode
    mode: str


def edge_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Senders and receivers of all ordered pairs ``i != j`` in row-major order."""
    send, recv = np.nonzero(~np.eye(n, dtype=bool))
    return send, recv


def edge_labels(springs: np.ndarray, charges: np.ndarray) -> np.ndarray:
    """Ground-truth ``(..., E, 2)`` edge labels: spring on/off, charge product on/off."""
    springs = np.asarray(springs, dtype=bool)
    charges = np.asarray(charges, dtype=bool)
    send, recv = edge_index(charges.shape[-1])
    spring = springs[..., send, recv]
    charge = charges[..., send] & charges[..., recv]
    return np.stack([spring, charge], axis=-1).astype(np.int64)


def gumbel_softmax_sample(logits, tau: float, rng: np.random.Generator | None = None,
                          noise: np.ndarray | None = None) -> Tensor:
    """Concrete relaxation ``softmax((logits + g) / tau)`` over the last axis."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    logits = ad.as_tensor(logits)
    if noise is None:
        u = rng.random(logits.shape)
        noise = -np.log(-np.log(u + 1e-20) + 1e-20)
    return ad.softmax((logits + noise) * (1.0 / tau), axis=-1)


def hard_sample(logits) -> Tensor:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return Tensor(np.eye(data.shape[-1])[np.argmax(data, axis=-1)])


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.hidden_dim
        self.cfg = cfg
        n_in = cfg.encoder_window * 4
        self.mlp1 = MLP(n_in, h, h, rng)
        self.mlp2 = MLP(2 * h, h, h, rng)
        self.mlp3 = MLP(h, h, h, rng)
        self.mlp4 = MLP(3 * h, h, h, rng)
        self.fc_out = Linear(h, cfg.n_edge_factors * cfg.edge_types_per_factor, rng,
                             zero_init=cfg.zero_init_logits)
        send, recv = edge_index(cfg.n_particles)
        eye = np.eye(cfg.n_particles)
        self.rel_send = eye[send]
        self.rel_rec = eye[recv]

    def node2edge(self, x):
        return ad.concat([ad.matmul(self.rel_send, x), ad.matmul(self.rel_rec, x)], axis=-1)

    def edge2node(self, e):
        return ad.matmul(self.rel_rec.T, e) * (1.0 / self.cfg.n_particles)

    def forward(self, window) -> Tensor:
        """``window`` is ``(B, T, N, 4)``; returns logits ``(B, E, F, K)``."""
        window = ad.as_tensor(window)
        b, t, n, d = window.shape
        if t != self.cfg.encoder_window:
            raise ValueError(f"encoder expects {self.cfg.encoder_window} steps, got {t}")
        x = ad.swapaxes(window, 1, 2).reshape(b, n, t * d)
        x = self.mlp1(x)
        x = self.mlp2(self.node2edge(x))
        skip = x
        x = self.mlp3(self.edge2node(x))
        x = self.mlp4(ad.concat([self.node2edge(x), skip], axis=-1))
        logits = self.fc_out(x)
        return logits.reshape(b, logits.shape[1], self.cfg.n_edge_factors, self.cfg.edge_types_per_factor)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.hidden_dim
        self.cfg = cfg
        self.state_dim = 4 + cfg.n_sigma
        self.first_type = 1 if cfg.skip_first else 0
        self.msg_fc1 = []
        self.msg_fc2 = []
        for _ in range(cfg.n_edge_factors):
            for _ in range(self.first_type, cfg.edge_types_per_factor):
                self.msg_fc1.append(Linear(2 * self.state_dim, h, rng))
                self.msg_fc2.append(Linear(h, h, rng))
        self.out_fc1 = Linear(self.state_dim + h, h, rng)
        self.out_fc2 = Linear(h, h, rng)
        self.out_fc3 = Linear(h, self.state_dim, rng, zero_init=cfg.zero_init_output)
        send, recv = edge_index(cfg.n_particles)
        eye = np.eye(cfg.n_particles)
        self.rel_send = eye[send]
        self.rel_rec = eye[recv]
        self.transform = SigmaTransform(cfg.sigma0, cfg.beta)

    def step(self, x, z) -> Tensor:
        """Advance the full state ``(B, N, 4 + m)`` by one sampled step."""
        pre = ad.concat([ad.matmul(self.rel_send, x), ad.matmul(self.rel_rec, x)], axis=-1)
        msgs = None
        i = 0
        for f in range(self.cfg.n_edge_factors):
            for k in range(self.first_type, self.cfg.edge_types_per_factor):
                m = ad.elu(self.msg_fc1[i](pre))
                m = ad.elu(self.msg_fc2[i](m))
                m = m * z[:, :, f, k:k + 1]
                msgs = m if msgs is None else msgs + m
                i += 1
        agg = ad.matmul(self.rel_rec.T, msgs)
        h = ad.elu(self.out_fc1(ad.concat([x, agg], axis=-1)))
        h = ad.elu(self.out_fc2(h))
        return x + self.out_fc3(h)

    def initial_state(self, mean) -> Tensor:
        mean = ad.as_tensor(mean)
        if self.cfg.n_sigma == 0:
            return mean
        raw = np.full(mean.shape[:-1] + (self.cfg.n_sigma,), self.transform.inverse())
        return ad.concat([mean, Tensor(raw)], axis=-1)

    def split(self, states) -> tuple[Tensor, Tensor]:
        """Separate stacked states into ``(mean, sigma)``."""
        mean = states[..., :4]
        if self.cfg.n_sigma == 0:
            sigma = Tensor(np.full(mean.shape[:-1] + (1,), self.cfg.sigma0))
        else:
            sigma = self.transform(states[..., 4:])
        return mean, sigma

    def decode_step(self, state, z) -> tuple[Tensor, Tensor]:
        return self.split(self.step(state, z))

    def rollout(self, initial, z, n_steps: int, teacher=None) -> PredictionWithUncertainty:
        """Iterate :meth:`step` from ``initial`` (B, N, 4).

        With ``teacher`` (B, >= n_steps, N, 4), the mean part of the input
        state is replaced by ground truth every ``teacher_force_every`` steps;
        ``teacher[:, s]`` is the true state fed in before predicting step ``s``.
        The sigma channels keep running through forced steps.
        """
        if teacher is not None:
            teacher = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher)
            if teacher.shape[1] < n_steps:
                raise ValueError("teacher sequence shorter than n_steps")
        if n_steps == 0:
            b, n = initial.shape[0], initial.shape[1]
            m = max(self.cfg.n_sigma, 1)
            return PredictionWithUncertainty(Tensor(np.zeros((b, 0, n, 4))),
                                             Tensor(np.zeros((b, 0, n, m))), self.cfg.sigma_mode)
        x = self.initial_state(initial)
        out = []
        every = self.cfg.teacher_force_every
        for s in range(n_steps):
            if teacher is not None and s > 0 and s % every == 0:
                forced = Tensor(teacher[:, s])
                x = forced if self.cfg.n_sigma == 0 else ad.concat([forced, x[..., 4:]], axis=-1)
            x = self.step(x, z)
            out.append(x)
        mean, sigma = self.split(ad.stack(out, axis=1))
        return PredictionWithUncertainty(mean, sigma, self.cfg.sigma_mode)


@dataclass
class ForwardOutput:
    logits: Tensor
    z: Tensor
    prediction: PredictionWithUncertainty
    target: np.ndarray


class FNRI(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def encode(self, window) -> Tensor:
        return self.encoder(window)

    def forward(self, states, rng: np.random.Generator | None = None, teacher: bool | None = None) -> ForwardOutput:
        """Encode the first window, decode the next one.

        ``states`` is a normalized ``(B, T, N, 4)`` batch with
        ``T >= encoder_window + decoder_window``. In training mode edges are
        relaxed concrete samples and teacher forcing is on; in eval mode edges
        are the posterior argmax and the rollout runs free.
        """
        cfg = self.cfg
        states = np.asarray(states, dtype=np.float64)
        we, wd = cfg.encoder_window, cfg.decoder_window
        if states.shape[1] < we + wd:
            raise ValueError(f"need {we + wd} steps, got {states.shape[1]}")
        logits = self.encoder(states[:, :we])
        if self.training:
            z = gumbel_softmax_sample(logits, cfg.tau, rng)
        else:
            z = hard_sample(logits)
        use_teacher = self.training if teacher is None else teacher
        guide = states[:, we - 1:we - 1 + wd] if use_teacher else None
        pred = self.decoder.rollout(states[:, we - 1], z, wd, teacher=guide)
        return ForwardOutput(logits, z, pred, states[:, we:we + wd])
