"""Row encoding for GAN training.

Continuous columns use mode-specific normalization: a one-dimensional
variational Gaussian mixture is fitted per column, each value is assigned a
mode sampled from the posterior responsibilities, and encoded as the scalar
``alpha = (x - mean) / (4 * std)`` (clipped to [-1, 1]) followed by a
one-hot of the mode. Categorical columns are one-hot encoded.

The condition vector concatenates one one-hot block per categorical column;
exactly one coordinate is set. Conditions are drawn by picking a
categorical column uniformly and a level by its true frequency or by its
normalized log-frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .errors import ConfigError, ValidationError
from .table import CATEGORICAL, CONTINUOUS, Column, Schema, Table

TRUE_FREQUENCY = "true"
LOG_FREQUENCY = "log"
FREQUENCY_MODES = (TRUE_FREQUENCY, LOG_FREQUENCY)

MAX_MODES = 10
WEIGHT_THRESHOLD = 0.005
CONCENTRATION = 1e-3
MAX_ITER = 200
TOL = 1e-6
STD_FLOOR = 1e-6
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class VgmColumnModel:
    """Fitted mixture for one column.

    ``weights``, ``means`` and ``stds`` cover all fitted components; ``active``
    holds the indices of components whose weight reaches the threshold, and
    the encoded mode one-hot indexes into ``active``.
    """

    column: str
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    active: np.ndarray
    trace: tuple = ()
    converged: bool = True

    @property
    def n_modes(self) -> int:
        return int(self.active.size)

    def responsibilities(self, values) -> np.ndarray:
        """Posterior mode probabilities over the active set, shape (n, n_modes)."""
        x = np.asarray(values, dtype=np.float64)[:, None]
        w, mu, sd = (a[self.active] for a in (self.weights, self.means, self.stds))
        logp = np.log(w) - np.log(sd) - 0.5 * LOG_2PI - 0.5 * ((x - mu) / sd) ** 2
        return np.exp(logp - logsumexp(logp, axis=1, keepdims=True))

    def to_dict(self) -> dict:
        return {
            "column": self.column,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "active": self.active.tolist(),
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d) -> "VgmColumnModel":
        return cls(
            d["column"],
            np.asarray(d["weights"], dtype=np.float64),
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["stds"], dtype=np.float64),
            np.asarray(d["active"], dtype=np.int64),
            converged=d.get("converged", True),
        )


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(x.size)]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        c = x[rng.choice(x.size, p=d2 / total)]
        centers.append(c)
        d2 = np.minimum(d2, (x - c) ** 2)
    return np.asarray(centers)


def fit_vgm(
    values,
    max_modes: int = MAX_MODES,
    weight_threshold: float = WEIGHT_THRESHOLD,
    seed: int = 0,
    column: str = "",
    concentration: float = CONCENTRATION,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
    std_floor: float = STD_FLOOR,
) -> VgmColumnModel:
    """Fit a one-dimensional Gaussian mixture by variational EM.

    Priors: symmetric Dirichlet(``concentration``) on the weights, and a
    Gaussian-Gamma prior on each (mean, precision) centred on the data mean
    with unit mean-precision scale, one degree of freedom and scale set from
    the data variance. The evidence lower bound is recorded after every
    M-step in ``trace``; coordinate ascent makes it nondecreasing.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValidationError("fit_vgm needs at least two values")
    if max_modes < 1:
        raise ValidationError("max_modes must be positive")
    rng = np.random.default_rng(seed)
    n = x.size
    var = x.var()
    if var <= std_floor**2 or np.ptp(x) == 0:
        return VgmColumnModel(
            column, np.ones(1), np.array([x.mean()]), np.array([std_floor]), np.zeros(1, dtype=np.int64)
        )

    k = max_modes
    centers = _kmeanspp(x, k, rng)
    k = centers.size
    resp = np.zeros((n, k))
    resp[np.arange(n), np.argmin((x[:, None] - centers) ** 2, axis=1)] = 1.0

    alpha0, beta0, nu0, m0 = concentration, 1.0, 1.0, x.mean()
    w0_inv = var  # inverse scale of the Gamma prior on the precision
    eps = 10 * np.finfo(np.float64).eps

    def log_b(w_inv, nu):
        # log normaliser of a one-dimensional Wishart (Gamma) with scale 1/w_inv
        return 0.5 * nu * np.log(w_inv) - 0.5 * nu * np.log(2) - gammaln(0.5 * nu)

    trace = []
    converged = False
    for _ in range(max_iter):
        # M-step: update q(pi), q(mu, lambda) from responsibilities
        nk = resp.sum(axis=0) + eps
        xbar = resp.T @ x / nk
        sk = (resp * (x[:, None] - xbar) ** 2).sum(axis=0)
        alpha = alpha0 + nk
        beta = beta0 + nk
        m = (beta0 * m0 + nk * xbar) / beta
        w_inv = w0_inv + sk + beta0 * nk / (beta0 + nk) * (xbar - m0) ** 2
        nu = nu0 + nk
        w = 1.0 / w_inv

        e_log_pi = digamma(alpha) - digamma(alpha.sum())
        e_log_lam = digamma(0.5 * nu) + np.log(2) + np.log(w)
        sq = 1.0 / beta + nu * w * (x[:, None] - m) ** 2

        # evidence lower bound at the current (responsibilities, parameters)
        log_px = 0.5 * np.sum(resp * (e_log_lam - sq - LOG_2PI))
        log_pz = np.sum(resp @ e_log_pi)
        log_ppi = gammaln(k * alpha0) - k * gammaln(alpha0) + (alpha0 - 1) * e_log_pi.sum()
        log_pml = np.sum(
            0.5 * (np.log(beta0 / (2 * np.pi)) + e_log_lam - beta0 / beta - beta0 * nu * w * (m - m0) ** 2)
            + log_b(w0_inv, nu0)
            + 0.5 * (nu0 - 2) * e_log_lam
            - 0.5 * nu * w * w0_inv
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            log_qz = np.sum(np.where(resp > 0, resp * np.log(resp), 0.0))
        log_qpi = gammaln(alpha.sum()) - gammaln(alpha).sum() + ((alpha - 1) * e_log_pi).sum()
        entropy_lam = -log_b(w_inv, nu) - 0.5 * (nu - 2) * e_log_lam + 0.5 * nu
        log_qml = np.sum(0.5 * e_log_lam + 0.5 * np.log(beta / (2 * np.pi)) - 0.5 - entropy_lam)
        bound = log_px + log_pz + log_ppi + log_pml - log_qz - log_qpi - log_qml
        if trace and abs(bound - trace[-1]) <= tol * abs(trace[-1]):
            trace.append(bound)
            converged = True
            break
        trace.append(bound)

        # E-step
        log_rho = e_log_pi + 0.5 * e_log_lam - 0.5 * LOG_2PI - 0.5 * sq
        resp = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))

    weights = alpha / alpha.sum()
    stds = np.maximum(np.sqrt(w_inv / nu), std_floor)
    active = np.flatnonzero(weights >= weight_threshold)
    if active.size == 0:
        active = np.array([int(np.argmax(weights))])
    return VgmColumnModel(column, weights, m, stds, active.astype(np.int64), tuple(trace), converged)


def encode_continuous(model: VgmColumnModel, values, rng: np.random.Generator):
    """Encode values as (alpha, mode index into the active set).

    Scalar input gives a scalar pair; array input gives two arrays.
    """
    scalar = np.ndim(values) == 0
    x = np.atleast_1d(np.asarray(values, dtype=np.float64))
    probs = model.responsibilities(x)
    u = rng.random(x.size)[:, None]
    mode = np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), model.n_modes - 1)
    comp = model.active[mode]
    alpha = np.clip((x - model.means[comp]) / (4 * model.stds[comp]), -1.0, 1.0)
    if scalar:
        return float(alpha[0]), int(mode[0])
    return alpha, mode


def decode_continuous(model: VgmColumnModel, alpha, mode):
    mode = np.asarray(mode)
    if np.any(mode < 0) or np.any(mode >= model.n_modes):
        raise ValidationError(f"mode index outside the {model.n_modes} active modes of {model.column!r}")
    comp = model.active[mode]
    out = model.means[comp] + 4 * model.stds[comp] * np.asarray(alpha, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Segment:
    """One column's slice of the encoded row.

    For continuous columns ``start`` holds alpha and the following
    ``width - 1`` entries the mode one-hot; for categorical columns the
    whole slice is the level one-hot.
    """

    column: str
    kind: str
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass(frozen=True)
class ConditionVector:
    column: str
    level: int
    dense: np.ndarray


class RowEncoder:
    """Fitted per-column encoders plus encoded-row and condition-vector layouts.

    ``discrete`` lists continuous columns encoded as categoricals over their
    observed unique values (low-cardinality handling, off by default).
    """

    def __init__(self, schema: Schema, models: dict, discrete: dict, frequencies: dict):
        self.schema = schema
        self.models = models
        self.discrete = discrete
        self.frequencies = frequencies
        segments, cond, pos, cpos = [], [], 0, 0
        for col in schema:
            if col.name in models:
                width = 1 + models[col.name].n_modes
                segments.append(Segment(col.name, CONTINUOUS, pos, width))
            else:
                width = len(self._levels(col.name))
                segments.append(Segment(col.name, CATEGORICAL, pos, width))
                cond.append(Segment(col.name, CATEGORICAL, cpos, width))
                cpos += width
            pos += width
        self.segments = segments
        self.cond_segments = cond
        self.width = pos
        self.cond_width = cpos

    def _levels(self, name):
        if name in self.discrete:
            return self.discrete[name]
        return self.schema[name].levels

    @classmethod
    def fit(
        cls,
        table: Table,
        max_modes: int = MAX_MODES,
        weight_threshold: float = WEIGHT_THRESHOLD,
        seed: int = 0,
        discrete_threshold: int | None = None,
    ) -> "RowEncoder":
        if len(table) == 0:
            raise ValidationError("cannot fit an encoder on an empty table")
        ss = np.random.SeedSequence(seed)
        col_seeds = ss.spawn(len(table.schema))
        models, discrete, freqs = {}, {}, {}
        for col, cs in zip(table.schema, col_seeds):
            x = table.data[col.name]
            if col.is_categorical:
                counts = np.bincount(x, minlength=len(col.levels))
            else:
                uniq = np.unique(x)
                if discrete_threshold is not None and uniq.size <= discrete_threshold:
                    discrete[col.name] = [float(u) for u in uniq]
                    counts = np.bincount(np.searchsorted(uniq, x), minlength=uniq.size)
                else:
                    models[col.name] = fit_vgm(
                        x, max_modes, weight_threshold, int(cs.generate_state(1)[0]), column=col.name
                    )
                    continue
            freqs[col.name] = counts.astype(np.int64)
        return cls(table.schema, models, discrete, freqs)

    def encode(self, table: Table, rng: np.random.Generator) -> np.ndarray:
        if table.schema != self.schema:
            raise ValidationError("table schema differs from the encoder's schema")
        out = np.zeros((len(table), self.width))
        rows = np.arange(len(table))
        for seg in self.segments:
            x = table.data[seg.column]
            if seg.column in self.models:
                alpha, mode = encode_continuous(self.models[seg.column], x, rng)
                out[:, seg.start] = alpha
                out[rows, seg.start + 1 + mode] = 1.0
            else:
                if seg.column in self.discrete:
                    x = np.searchsorted(np.asarray(self.discrete[seg.column]), x)
                out[rows, seg.start + x] = 1.0
        return out

    def decode(self, encoded: np.ndarray) -> Table:
        """Decode rows; one-hot parts are read by argmax so soft outputs are accepted."""
        encoded = np.asarray(encoded, dtype=np.float64)
        if encoded.ndim != 2 or encoded.shape[1] != self.width:
            raise ValidationError(f"encoded width {encoded.shape[-1]} does not match layout width {self.width}")
        data = {}
        for seg in self.segments:
            block = encoded[:, seg.start : seg.stop]
            if seg.column in self.models:
                mode = np.argmax(block[:, 1:], axis=1)
                data[seg.column] = decode_continuous(self.models[seg.column], np.clip(block[:, 0], -1, 1), mode)
            elif seg.column in self.discrete:
                data[seg.column] = np.asarray(self.discrete[seg.column])[np.argmax(block, axis=1)]
            else:
                data[seg.column] = np.argmax(block, axis=1)
        return Table(self.schema, data)

    def encode_row(self, row, rng: np.random.Generator) -> np.ndarray:
        """Encode a single row given as raw values (level strings for categoricals)."""
        return self.encode(_row_table(self.schema, row), rng)[0]

    def decode_row(self, vector) -> tuple:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.width,):
            raise ValidationError(f"vector width {vector.shape} does not match layout width {self.width}")
        return self.decode(vector[None, :]).rows()[0]

    def condition_probabilities(self, mode: str) -> dict[str, np.ndarray]:
        return {seg.column: level_weights(self.frequencies[seg.column], mode) for seg in self.cond_segments}

    def condition_sampler(self, mode: str) -> "ConditionSampler":
        return ConditionSampler(self, mode)

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "models": {k: m.to_dict() for k, m in self.models.items()},
            "discrete": self.discrete,
            "frequencies": {k: v.tolist() for k, v in self.frequencies.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "RowEncoder":
        return cls(
            Schema.from_dict(d["schema"]),
            {k: VgmColumnModel.from_dict(m) for k, m in d["models"].items()},
            {k: list(v) for k, v in d["discrete"].items()},
            {k: np.asarray(v, dtype=np.int64) for k, v in d["frequencies"].items()},
        )


def _row_table(schema: Schema, row) -> Table:
    cols = [Column(c.name, c.kind, c.levels) for c in schema]
    t = Table.from_records(Schema(cols), [row])
    if t.schema != schema:
        raise ValidationError("row has levels outside the encoder's schema")
    return t


def level_weights(counts, mode: str) -> np.ndarray:
    """Level sampling probabilities from raw counts.

    ``true``: proportional to counts. ``log``: proportional to ``log(1 + count)``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if mode == TRUE_FREQUENCY:
        w = counts
    elif mode == LOG_FREQUENCY:
        w = np.log1p(counts)
    else:
        raise ConfigError(f"unknown frequency mode {mode!r}")
    total = w.sum()
    if total <= 0:
        return np.full(w.size, 1.0 / w.size)
    return w / total


class ConditionSampler:
    """Draws condition vectors and matching real rows for training-by-sampling."""

    def __init__(self, encoder: RowEncoder, mode: str):
        if not encoder.cond_segments:
            raise ConfigError("no categorical columns: condition vectors are unavailable, train unconditionally")
        self.encoder = encoder
        self.mode = mode
        self.probs = encoder.condition_probabilities(mode)
        self.segments = encoder.cond_segments
        self._cum = [np.cumsum(self.probs[s.column]) for s in self.segments]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw ``n`` conditions: (column index, level index, dense vectors)."""
        cols = rng.integers(len(self.segments), size=n)
        u = rng.random(n)
        levels = np.empty(n, dtype=np.int64)
        for j, cum in enumerate(self._cum):
            sel = cols == j
            levels[sel] = np.minimum(np.searchsorted(cum, u[sel] * cum[-1], side="right"), cum.size - 1)
        dense = np.zeros((n, self.encoder.cond_width))
        starts = np.array([s.start for s in self.segments])
        dense[np.arange(n), starts[cols] + levels] = 1.0
        return cols, levels, dense

    def sample_one(self, rng: np.random.Generator) -> ConditionVector:
        cols, levels, dense = self.sample(1, rng)
        return ConditionVector(self.segments[cols[0]].column, int(levels[0]), dense[0])


class RealRowSampler:
    """Uniform with-replacement sampling of rows matching a (column, level) condition."""

    def __init__(self, table: Table, encoder: RowEncoder):
        self.index = {}
        for seg in encoder.cond_segments:
            x = table.data[seg.column]
            if seg.column in encoder.discrete:
                x = np.searchsorted(np.asarray(encoder.discrete[seg.column]), x)
            order = np.argsort(x, kind="stable")
            bounds = np.searchsorted(x[order], np.arange(seg.width + 1))
            self.index[seg.column] = [order[bounds[i] : bounds[i + 1]] for i in range(seg.width)]
        self.columns = [s.column for s in encoder.cond_segments]
        self.n = len(table)

    def matching(self, column: str, level: int) -> np.ndarray:
        return self.index[column][level]

    def sample(self, cols: np.ndarray, levels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Row indices, one per requested condition; -1 where no row matches."""
        out = np.empty(cols.size, dtype=np.int64)
        u = rng.random(cols.size)
        for i, (c, lv) in enumerate(zip(cols, levels)):
            rows = self.index[self.columns[c]][lv]
            out[i] = rows[int(u[i] * rows.size)] if rows.size else -1
        return out


def sample_condition(frequencies, mode: str, rng: np.random.Generator) -> ConditionVector:
    """Draw one condition from per-column level counts.

    ``frequencies`` maps categorical column name to a sequence of level
    counts (or probabilities) in level order.
    """
    if not frequencies:
        raise ConfigError("no categorical columns: condition vectors are unavailable, train unconditionally")
    names = list(frequencies)
    j = int(rng.integers(len(names)))
    w = level_weights(frequencies[names[j]], mode)
    level = int(min(np.searchsorted(np.cumsum(w), rng.random(), side="right"), w.size - 1))
    widths = [len(frequencies[k]) for k in names]
    dense = np.zeros(sum(widths))
    dense[sum(widths[:j]) + level] = 1.0
    return ConditionVector(names[j], level, dense)


def sample_real_matching(
    table: Table, encoded: np.ndarray, condition: ConditionVector, batch: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform with-replacement batch of encoded rows whose conditioned column equals the level."""
    rows = np.flatnonzero(table.data[condition.column] == condition.level)
    if rows.size == 0:
        raise ValidationError(f"no rows with {condition.column} level {condition.level}")
    return encoded[rows[rng.integers(rows.size, size=batch)]]
