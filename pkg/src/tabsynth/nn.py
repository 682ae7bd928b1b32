"""Generator and packed critic networks, gradient penalty and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError

TRAIN = "train"
EVAL = "eval"


@dataclass(frozen=True)
class Head:
    """Output head over ``[start, start + width)``: ``tanh`` scalar or ``softmax`` one-hot block."""

    kind: str
    start: int
    width: int


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden: tuple = (256, 256)
    activation: str = "relu"
    slope: float = 0.2
    residual: bool = False
    dropout: float = 0.0
    output_width: int = 1
    heads: tuple = ()
    tau: float = 0.2
    pac: int = 1

    def __post_init__(self):
        if self.heads and sum(h.width for h in self.heads) != self.output_width:
            raise ValidationError("head widths must sum to the output width")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        d["heads"] = [[h.kind, h.start, h.width] for h in self.heads]
        return d

    @classmethod
    def from_dict(cls, d) -> "MlpSpec":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["heads"] = tuple(Head(*h) for h in d["heads"])
        return cls(**d)


def generator_spec(noise_dim: int, cond_width: int, heads, hidden=(256, 256), tau: float = 0.2) -> MlpSpec:
    heads = tuple(heads)
    return MlpSpec(
        input_width=noise_dim + cond_width,
        hidden=tuple(hidden),
        activation="relu",
        residual=True,
        output_width=sum(h.width for h in heads),
        heads=heads,
        tau=tau,
    )


def critic_spec(row_width: int, pac: int, hidden=(256, 256), slope: float = 0.2, dropout: float = 0.5) -> MlpSpec:
    return MlpSpec(
        input_width=row_width * pac,
        hidden=tuple(hidden),
        activation="leaky_relu",
        slope=slope,
        dropout=dropout,
        output_width=1,
        pac=pac,
    )


class Mlp:
    """Fully connected network holding its parameters as named leaf tensors.

    Residual layers concatenate their activation with their input, so each
    hidden width adds to the next layer's input width.
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, params=None):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        shapes = self.param_shapes()
        if params is not None:
            for name, shape in shapes:
                a = np.asarray(params[name], dtype=np.float64)
                if a.shape != shape:
                    raise ValidationError(f"parameter {name} has shape {a.shape}, expected {shape}")
                self.params[name] = Tensor(a.copy(), requires_grad=True)
            return
        rng = rng if rng is not None else np.random.default_rng(0)
        for name, shape in shapes:
            fan_in = shapes[[n for n, _ in shapes].index(name.replace(".b", ".w"))][1][0]
            bound = 1.0 / np.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def param_shapes(self) -> list[tuple[str, tuple]]:
        spec, shapes, width = self.spec, [], self.spec.input_width
        for i, h in enumerate(spec.hidden):
            shapes += [(f"layer{i}.w", (width, h)), (f"layer{i}.b", (h,))]
            width = h + width if spec.residual else h
        shapes += [("out.w", (width, spec.output_width)), ("out.b", (spec.output_width,))]
        return shapes

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x, mode: str = EVAL, rng: np.random.Generator | None = None, raw: bool = False):
        """Run the network.

        With ``raw`` the pre-activation logits are returned alongside the
        head outputs (generator only). Train mode draws dropout masks and
        Gumbel noise from ``rng``.
        """
        spec = self.spec
        x = ad.as_tensor(x)
        if spec.pac > 1:
            if x.shape[0] % spec.pac:
                raise ValidationError(f"batch of {x.shape[0]} rows is not divisible by pac {spec.pac}")
            x = ad.reshape(x, (x.shape[0] // spec.pac, x.shape[1] * spec.pac))
        if x.ndim != 2 or x.shape[1] != spec.input_width:
            raise ValidationError(f"input width {x.shape[-1]} does not match network input {spec.input_width}")
        if mode == TRAIN and rng is None and (spec.dropout > 0 or spec.heads):
            raise ValidationError("train mode needs a random stream")
        h = x
        for i in range(len(spec.hidden)):
            z = h @ self.params[f"layer{i}.w"] + self.params[f"layer{i}.b"]
            z = ad.relu(z) if spec.activation == "relu" else ad.leaky_relu(z, spec.slope)
            if spec.dropout > 0 and mode == TRAIN:
                keep = (rng.random(z.shape) >= spec.dropout) / (1.0 - spec.dropout)
                z = z * keep
            h = ad.concat([z, h], axis=1) if spec.residual else z
        logits = h @ self.params["out.w"] + self.params["out.b"]
        if not spec.heads:
            return logits
        out = apply_heads(logits, spec.heads, spec.tau, rng if mode == TRAIN else None)
        return (out, logits) if raw else out

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def gumbel_softmax(logits: Tensor, tau: float, rng: np.random.Generator | None) -> Tensor:
    """Softmax of ``(logits + g) / tau`` with standard Gumbel noise ``g`` (none without ``rng``)."""
    if rng is not None:
        u = rng.random(logits.shape)
        g = -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))
        logits = logits + g
    return ad.softmax(logits * (1.0 / tau), axis=1)


def apply_heads(logits: Tensor, heads, tau: float, rng) -> Tensor:
    parts = []
    for h in heads:
        block = logits[:, h.start : h.start + h.width]
        parts.append(ad.tanh(block) if h.kind == "tanh" else gumbel_softmax(block, tau, rng))
    return ad.concat(parts, axis=1)


def harden(logits: np.ndarray, heads, rng: np.random.Generator | None = None) -> np.ndarray:
    """Numeric head outputs with one-hot blocks replaced by argmax indicators.

    With ``rng`` the argmax is taken over Gumbel-perturbed logits, which is a
    sample from the softmax of the logits.
    """
    out = np.empty_like(logits)
    for h in heads:
        block = logits[:, h.start : h.start + h.width]
        if h.kind == "tanh":
            out[:, h.start : h.start + h.width] = np.tanh(block)
            continue
        if rng is not None:
            u = np.clip(rng.random(block.shape), 1e-20, 1.0 - 1e-12)
            block = block - np.log(-np.log(u))
        hard = np.zeros_like(block)
        hard[np.arange(block.shape[0]), np.argmax(block, axis=1)] = 1.0
        out[:, h.start : h.start + h.width] = hard
    return out


def grad_norm_penalty(critic: Mlp, x_hat, mode: str = EVAL, rng=None) -> Tensor:
    """Mean over pac groups of ``(||grad_x C(x)|| - 1)^2`` at ``x_hat``.

    The input gradient is obtained with a recorded reverse sweep, so the
    result is differentiable with respect to the critic parameters.
    """
    x = Tensor(np.asarray(ad.as_tensor(x_hat).data), requires_grad=True)
    scores = critic.forward(x, mode, rng)
    (gx,) = ad.grad(ad.sum_(scores), [x], create_graph=True)
    pac = critic.spec.pac
    grouped = ad.reshape(gx, (gx.shape[0] // pac, gx.shape[1] * pac))
    dev = ad.row_norm(grouped) - 1.0
    return ad.mean(dev * dev)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_step(params, grads, state: AdamState, config: AdamConfig) -> AdamState:
    """In-place Adam update with bias correction; weight decay is added to the gradient."""
    params = list(params)
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state
