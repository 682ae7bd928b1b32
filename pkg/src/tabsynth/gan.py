"""Conditional WGAN-GP training with a packed critic, sampling and serialization.

Each training iteration draws a batch of condition vectors, real encoded
rows matching them, and standard normal noise. The critic minimizes
``mean C(fake) - mean C(real) + gp_weight * penalty`` where the penalty is
taken at per-pac-group random interpolates of real and fake rows. The
generator minimizes ``-mean C(fake)`` plus the cross-entropy between its
logits for the conditioned column and the requested level.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FREQUENCY_MODES, TRUE_FREQUENCY, ConditionSampler, RealRowSampler, RowEncoder
from .errors import ConfigError, FormatError, TrainingError, ValidationError
from .nn import (
    EVAL,
    TRAIN,
    AdamConfig,
    AdamState,
    Head,
    Mlp,
    MlpSpec,
    adam_step,
    critic_spec,
    generator_spec,
    grad_norm_penalty,
    harden,
)
from .table import Table, subsample

log = logging.getLogger(__name__)

MAGIC = b"TABSYNTH"
FORMAT_VERSION = 1
FULL = "full"
GENERATOR_ONLY = "generator-only"
_CHUNK = 5000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 500
    critic_steps: int = 1
    gp_weight: float = 10.0
    pac: int = 10
    frequency_mode: str = TRUE_FREQUENCY
    seed: int = 0
    threads: int = 1
    subsample_cap: int | None = None
    noise_dim: int = 128
    generator_hidden: tuple = (256, 256)
    critic_hidden: tuple = (256, 256)
    critic_dropout: float = 0.5
    leaky_slope: float = 0.2
    tau: float = 0.2
    cond_loss_weight: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.9
    critic_weight_decay: float = 1e-6
    max_modes: int = 10
    weight_threshold: float = 0.005
    discrete_threshold: int | None = None
    generator_ema: float | None = 0.995

    def __post_init__(self):
        object.__setattr__(self, "generator_hidden", tuple(self.generator_hidden))
        object.__setattr__(self, "critic_hidden", tuple(self.critic_hidden))
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 1 or self.pac < 1 or self.critic_steps < 1:
            raise ConfigError("batch_size, pac and critic_steps must be positive")
        if self.batch_size % self.pac:
            raise ConfigError(f"batch size {self.batch_size} is not divisible by pac {self.pac}")
        if self.subsample_cap is not None and self.subsample_cap < self.batch_size:
            raise ConfigError("subsample cap must be at least the batch size")
        if self.frequency_mode not in FREQUENCY_MODES:
            raise ConfigError(f"frequency_mode must be one of {FREQUENCY_MODES}")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.generator_ema is not None and not 0 <= self.generator_ema < 1:
            raise ConfigError("generator_ema must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator_hidden"] = list(self.generator_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def _heads(encoder: RowEncoder) -> list[Head]:
    heads = []
    for seg in encoder.segments:
        if seg.kind == "continuous":
            heads.append(Head("tanh", seg.start, 1))
            heads.append(Head("softmax", seg.start + 1, seg.width - 1))
        else:
            heads.append(Head("softmax", seg.start, seg.width))
    return heads


class Synthesizer:
    """Trained generator plus encoder state; the critic is absent in generator-only form."""

    def __init__(self, encoder: RowEncoder, generator: Mlp, critic: Mlp | None, config: TrainConfig, history=None):
        if generator.spec.output_width != encoder.width:
            raise ValidationError("generator output width does not match the encoded row width")
        self.encoder = encoder
        self.generator = generator
        self.critic = critic
        self.config = config
        self.history = list(history or [])
        self.format_version = FORMAT_VERSION

    @property
    def conditional(self) -> bool:
        return self.encoder.cond_width > 0

    @property
    def schema(self):
        return self.encoder.schema

    def generate(self, n: int, seed: int) -> Table:
        return generate(self, n, seed)

    def save(self, path, mode: str = FULL) -> None:
        save(self, path, mode)


def _build(encoder: RowEncoder, config: TrainConfig, rng: np.random.Generator):
    gen = Mlp(generator_spec(config.noise_dim, encoder.cond_width, _heads(encoder), config.generator_hidden, config.tau), rng)
    crit = Mlp(
        critic_spec(encoder.width + encoder.cond_width, config.pac, config.critic_hidden, config.leaky_slope, config.critic_dropout),
        rng,
    )
    return gen, crit


def _cond_cross_entropy(logits: Tensor, encoder: RowEncoder, cond: np.ndarray) -> Tensor:
    total = None
    n = cond.shape[0]
    for gseg, cseg in zip([s for s in encoder.segments if s.kind == "categorical"], encoder.cond_segments):
        target = cond[:, cseg.start : cseg.stop]
        if not target.any():
            continue
        ls = ad.log_softmax(logits[:, gseg.start : gseg.stop], axis=1)
        term = ad.sum_(ls * target)
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total * (-1.0 / n)


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


def train(table: Table, config: TrainConfig, synth: Synthesizer | None = None, callback=None) -> Synthesizer:
    """Fit (or continue fitting) a synthesizer on an already pre-processed table.

    Deterministic for fixed data, config (including ``seed``) and
    ``threads``. When ``synth`` is given, training resumes from its
    parameters with fresh optimizer state; generator-only synthesizers are
    rejected. ``callback(synth)`` is invoked after every epoch.
    """
    if len(table) == 0:
        raise ValidationError("cannot train on an empty table")
    if synth is not None and synth.critic is None:
        raise ConfigError("critic absent: generator-only synthesizers cannot be trained further")
    ss = np.random.SeedSequence(config.seed)
    s_sub, s_enc, s_init, s_train = ss.spawn(4)
    table = subsample(table, config.subsample_cap, int(s_sub.generate_state(1)[0]))

    with threadpool_limits(limits=config.threads):
        if synth is None:
            encoder = RowEncoder.fit(
                table,
                config.max_modes,
                config.weight_threshold,
                int(s_enc.generate_state(1)[0]),
                config.discrete_threshold,
            )
            gen, crit = _build(encoder, config, np.random.default_rng(s_init))
            history = []
        else:
            if table.schema != synth.encoder.schema:
                raise ValidationError("table schema differs from the synthesizer's schema")
            encoder, gen, crit, history = synth.encoder, synth.generator, synth.critic, list(synth.history)

        rng = np.random.default_rng(s_train)
        encoded = encoder.encode(table, rng)
        n = len(table)
        if config.batch_size > n:
            log.warning("batch size %d exceeds %d training rows; sampling with replacement", config.batch_size, n)
        sampler = ConditionSampler(encoder, config.frequency_mode) if encoder.cond_width else None
        rows = RealRowSampler(table, encoder) if sampler else None
        opt_g, opt_c = AdamState(), AdamState()
        cfg_g = AdamConfig(config.lr, config.beta1, config.beta2)
        cfg_c = AdamConfig(config.lr, config.beta1, config.beta2, weight_decay=config.critic_weight_decay)
        bs, pac = config.batch_size, config.pac
        steps = max(n // bs, 1)
        ema = {k: v.data.copy() for k, v in gen.params.items()} if config.generator_ema is not None else None

        def averaged():
            if ema is None:
                return gen
            return Mlp(gen.spec, params=ema)

        def draw():
            if sampler is None:
                return np.zeros((bs, 0)), rng.integers(n, size=bs)
            cols, levels, cond = sampler.sample(bs, rng)
            return cond, rows.sample(cols, levels, rng)

        for epoch in range(config.epochs):
            loss_c_sum = loss_g_sum = 0.0
            for step in range(steps):
                for _ in range(config.critic_steps):
                    cond, idx = draw()
                    z = rng.standard_normal((bs, config.noise_dim))
                    with ad.no_grad():
                        fake = gen.forward(np.hstack([z, cond]), TRAIN, rng).data
                    real = encoded[idx]
                    fake_in = np.hstack([fake, cond])
                    real_in = np.hstack([real, cond])
                    wdist = ad.mean(crit.forward(fake_in, TRAIN, rng)) - ad.mean(crit.forward(real_in, TRAIN, rng))
                    eps = np.repeat(rng.random(bs // pac), pac)[:, None]
                    x_hat = eps * real_in + (1 - eps) * fake_in
                    penalty = grad_norm_penalty(crit, x_hat, TRAIN, rng)
                    loss_c = wdist + penalty * config.gp_weight
                    _check_finite(loss_c.item(), "critic loss", epoch, step)
                    adam_step(crit.parameters(), ad.grad(loss_c, crit.parameters()), opt_c, cfg_c)

                cond = sampler.sample(bs, rng)[2] if sampler else np.zeros((bs, 0))
                z = rng.standard_normal((bs, config.noise_dim))
                fake, logits = gen.forward(np.hstack([z, cond]), TRAIN, rng, raw=True)
                score = crit.forward(ad.concat([fake, Tensor(cond)], axis=1), TRAIN, rng)
                loss_g = -ad.mean(score)
                if sampler is not None and config.cond_loss_weight:
                    loss_g = loss_g + _cond_cross_entropy(logits, encoder, cond) * config.cond_loss_weight
                _check_finite(loss_g.item(), "generator loss", epoch, step)
                adam_step(gen.parameters(), ad.grad(loss_g, gen.parameters()), opt_g, cfg_g)
                if ema is not None:
                    d = config.generator_ema
                    for k, v in gen.params.items():
                        ema[k] *= d
                        ema[k] += (1 - d) * v.data
                loss_c_sum += loss_c.item()
                loss_g_sum += loss_g.item()
            history.append({"epoch": len(history), "critic_loss": loss_c_sum / steps, "generator_loss": loss_g_sum / steps})
            log.debug("epoch %d: critic %.4f generator %.4f", epoch, loss_c_sum / steps, loss_g_sum / steps)
            if callback is not None:
                callback(Synthesizer(encoder, averaged(), crit, config, history))

    return Synthesizer(encoder, averaged(), crit, config, history)


def _generate_encoded(synth: Synthesizer, cond: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gen = synth.generator
    out = np.empty((cond.shape[0], synth.encoder.width))
    with threadpool_limits(limits=synth.config.threads), ad.no_grad():
        for lo in range(0, cond.shape[0], _CHUNK):
            c = cond[lo : lo + _CHUNK]
            z = rng.standard_normal((c.shape[0], synth.config.noise_dim))
            _, logits = gen.forward(np.hstack([z, c]), EVAL, raw=True)
            out[lo : lo + _CHUNK] = harden(logits.data, gen.spec.heads, rng)
    return out


def _conditions(synth: Synthesizer, n: int, rng: np.random.Generator):
    if not synth.conditional:
        return None, None, np.zeros((n, 0))
    return ConditionSampler(synth.encoder, synth.config.frequency_mode).sample(n, rng)


def generate(synth: Synthesizer, n: int, seed: int) -> Table:
    """Generate ``n`` rows in the pre-processed space of the training table.

    Conditions follow the synthesizer's frequency mode; categorical and
    mode one-hot blocks are hardened by argmax over Gumbel-perturbed
    logits. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = np.random.default_rng(seed)
    _, _, cond = _conditions(synth, n, rng)
    return synth.encoder.decode(_generate_encoded(synth, cond, rng))


def condition_adherence(synth: Synthesizer, m: int, seed: int) -> float:
    """Fraction of ``m`` conditioned generations whose conditioned column has the requested level."""
    if m < 1:
        raise ValidationError("m must be at least 1")
    if not synth.conditional:
        raise ConfigError("condition adherence needs at least one categorical column")
    rng = np.random.default_rng(seed)
    cols, levels, cond = _conditions(synth, m, rng)
    table = synth.encoder.decode(_generate_encoded(synth, cond, rng))
    names = [s.column for s in synth.encoder.cond_segments]
    hits = 0
    for j, name in enumerate(names):
        sel = cols == j
        got = table.data[name][sel]
        if name in synth.encoder.discrete:
            got = np.searchsorted(np.asarray(synth.encoder.discrete[name]), got)
        hits += int(np.sum(got == levels[sel]))
    return hits / m


# -- serialization ----------------------------------------------------------
#
# Layout (little endian):
#   8 bytes   magic "TABSYNTH"
#   uint32    format version
#   uint64    metadata length L, then L bytes of UTF-8 JSON
#   uint64    parameter section length P, then P bytes:
#     uint32  tensor count, then per tensor:
#       uint16 name length, name (UTF-8), uint8 ndim, uint32 * ndim shape,
#       float64 * prod(shape) row-major values


def _pack_params(named) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name, a in named:
        b = name.encode("utf-8")
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack("<H", len(b)) + b + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def _unpack_params(buf: bytes) -> dict[str, np.ndarray]:
    out, pos = {}, 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated parameter section")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise FormatError("trailing bytes in parameter section")
    return out


def save(synth: Synthesizer, path, mode: str = FULL) -> None:
    if mode not in (FULL, GENERATOR_ONLY):
        raise ConfigError(f"unknown save mode {mode!r}")
    with_critic = mode == FULL and synth.critic is not None
    meta = {
        "format_version": FORMAT_VERSION,
        "library_version": __version__,
        "mode": FULL if with_critic else GENERATOR_ONLY,
        "config": synth.config.to_dict(),
        "encoder": synth.encoder.to_dict(),
        "generator_spec": synth.generator.spec.to_dict(),
        "critic_spec": synth.critic.spec.to_dict() if with_critic else None,
        "history": synth.history,
    }
    named = [(f"generator/{k}", v) for k, v in synth.generator.state().items()]
    if with_critic:
        named += [(f"critic/{k}", v) for k, v in synth.critic.state().items()]
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    params_b = _pack_params(named)
    blob = (
        MAGIC
        + struct.pack("<I", FORMAT_VERSION)
        + struct.pack("<Q", len(meta_b))
        + meta_b
        + struct.pack("<Q", len(params_b))
        + params_b
    )
    Path(path).write_bytes(blob)
    Path(str(path) + ".meta.json").write_text(json.dumps(run_metadata(synth, mode), indent=2, sort_keys=True) + "\n")


def run_metadata(synth: Synthesizer, mode: str = FULL) -> dict:
    """Self-describing run record written next to every saved model."""
    return {
        "library_version": __version__,
        "format_version": FORMAT_VERSION,
        "mode": mode,
        "seed": synth.config.seed,
        "threads": synth.config.threads,
        "config": synth.config.to_dict(),
        "epochs_trained": len(synth.history),
        "encoded_width": synth.encoder.width,
        "condition_width": synth.encoder.cond_width,
        "defaulted_settings": [
            "network sizes, noise width, optimizer settings and epochs are library defaults, not values from the source study",
            "batch normalization omitted; residual concatenation only",
            "one-hot outputs hardened by argmax over Gumbel-perturbed logits at generation time",
        ],
    }


def load(path) -> Synthesizer:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a synthesizer file")
    if len(buf) < 20:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack("<I", buf[8:12])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (mlen,) = struct.unpack("<Q", buf[12:20])
    pos = 20 + mlen
    if pos + 8 > len(buf):
        raise FormatError(f"{path}: truncated metadata")
    meta = json.loads(buf[20:pos].decode("utf-8"))
    (plen,) = struct.unpack("<Q", buf[pos : pos + 8])
    if pos + 8 + plen != len(buf):
        raise FormatError(f"{path}: truncated or oversized parameter section")
    params = _unpack_params(buf[pos + 8 :])
    encoder = RowEncoder.from_dict(meta["encoder"])
    config = TrainConfig.from_dict(meta["config"])
    gen = Mlp(
        MlpSpec.from_dict(meta["generator_spec"]),
        params={k.split("/", 1)[1]: v for k, v in params.items() if k.startswith("generator/")},
    )
    crit = None
    if meta["critic_spec"] is not None:
        crit = Mlp(
            MlpSpec.from_dict(meta["critic_spec"]),
            params={k.split("/", 1)[1]: v for k, v in params.items() if k.startswith("critic/")},
        )
    return Synthesizer(encoder, gen, crit, config, meta.get("history"))
