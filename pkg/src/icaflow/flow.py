"""Invertible map from observations to latents.

A stack of masked-autoregressive layers. Each layer permutes the coordinates,
runs a masked MLP whose output for coordinate i depends on coordinates
1..i-1 only, and transforms every coordinate with a monotone piecewise
rational-quadratic spline (linear tails outside [-B, B]).

The single-pass direction is observation -> latent; that is the direction
training differentiates. Inversion is sequential per coordinate and is used
for sampling and round-trip checks only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import GraphError, NumericalError

MIN_DERIVATIVE = 1e-3
MIN_BIN_FRACTION = 1e-3      # of the uniform bin size 2B/K
CONDITIONER_SLOPE = 0.1      # leaky-relu slope in the masked MLP

__all__ = [
    "SplineParams", "FlowModel", "rq_spline_forward", "rq_spline_inverse",
    "flow_forward", "flow_inverse",
]


def _identity_raw_derivative() -> float:
    # softplus(raw) + MIN_DERIVATIVE == 1  =>  raw = log(expm1(1 - min))
    return float(np.log(np.expm1(1.0 - MIN_DERIVATIVE)))


@dataclass
class SplineParams:
    """Raw (unnormalized) spline parameters for a batch of coordinates.

    Shapes: raw_widths and raw_heights are (..., K), raw_derivs (..., K-1).
    Normalization maps any finite raw values to a valid monotone spline:
    widths and heights are softmax-scaled to sum to 2B with a floor of
    MIN_BIN_FRACTION * 2B/K, interior derivatives are
    MIN_DERIVATIVE + softplus(raw), and both boundary derivatives are pinned
    to 1 so the linear tails join smoothly.
    """

    raw_widths: np.ndarray
    raw_heights: np.ndarray
    raw_derivs: np.ndarray
    tail_bound: float = 5.0

    def __post_init__(self):
        self.raw_widths = np.asarray(self.raw_widths, dtype=np.float64)
        self.raw_heights = np.asarray(self.raw_heights, dtype=np.float64)
        self.raw_derivs = np.asarray(self.raw_derivs, dtype=np.float64)
        if self.tail_bound <= 0:
            raise ValueError("tail_bound must be positive")
        k = self.raw_widths.shape[-1]
        if self.raw_heights.shape[-1] != k or self.raw_derivs.shape[-1] != k - 1:
            raise ValueError("expected K widths, K heights, K-1 derivatives")

    @property
    def bins(self) -> int:
        return self.raw_widths.shape[-1]

    @classmethod
    def identity(cls, bins: int, shape=(), tail_bound: float = 5.0):
        """Raw values whose normalized spline is the identity map."""
        shape = tuple(shape)
        return cls(
            raw_widths=np.zeros(shape + (bins,)),
            raw_heights=np.zeros(shape + (bins,)),
            raw_derivs=np.full(shape + (bins - 1,), _identity_raw_derivative()),
            tail_bound=tail_bound,
        )


def _knots_graph(rw: Tensor, rh: Tensor, rd: Tensor, tail_bound: float):
    """Normalize raw parameters into knot tensors.

    Returns (kx, ky, dv, widths, heights): knot positions (..., K+1), knot
    values (..., K+1), derivatives at knots (..., K+1) with boundaries 1.
    """
    k = rw.value.shape[-1]
    span = 2.0 * tail_bound
    min_bin = MIN_BIN_FRACTION * span / k
    lead = rw.value.shape[:-1]
    left = constant(np.full(lead + (1,), -tail_bound))
    one = constant(np.ones(lead + (1,)))

    widths = ad.softmax(rw) * (span - k * min_bin) + min_bin
    heights = ad.softmax(rh) * (span - k * min_bin) + min_bin
    kx = ad.concat_last([left, ad.cumsum(widths) - tail_bound])
    ky = ad.concat_last([left, ad.cumsum(heights) - tail_bound])
    dv = ad.concat_last([one, ad.softplus(rd) + MIN_DERIVATIVE, one])
    return kx, ky, dv, widths, heights


def _one_hot(idx: np.ndarray, depth: int) -> np.ndarray:
    return (idx[..., None] == np.arange(depth)).astype(np.float64)


def _gather(t: Tensor, one_hot: np.ndarray) -> Tensor:
    return ad.tsum(t * constant(one_hot), axis=-1)


def _bin_index(x: np.ndarray, edges: np.ndarray, bins: int) -> np.ndarray:
    # edges (..., K+1); x inside [-B, B]; ties at the right edge land in the
    # last bin
    return np.clip((x[..., None] >= edges).sum(axis=-1) - 1, 0, bins - 1)


def _spline_forward_graph(x: Tensor, rw: Tensor, rh: Tensor, rd: Tensor,
                          tail_bound: float):
    """Per-coordinate spline transform of `x` with per-coordinate log dy/dx.

    Outside [-B, B] the map is the identity with unit derivative. The bin
    selection is recorded as a constant (its derivative is zero almost
    everywhere); the transform itself is differentiable in x and in the raw
    parameters.
    """
    if not np.all(np.isfinite(x.value)):
        raise GraphError(f"non-finite spline input at node '{x.name}'")
    k = rw.value.shape[-1]
    kx, ky, dv, widths, heights = _knots_graph(rw, rh, rd, tail_bound)

    inside = (np.abs(x.value) <= tail_bound).astype(np.float64)
    m = constant(inside)
    x_in = x * m  # out-of-range entries probe the spline at 0

    idx = _bin_index(x_in.value, kx.value, k)
    sel = _one_hot(idx, k)
    sel_lo = _one_hot(idx, k + 1)
    sel_hi = _one_hot(idx + 1, k + 1)

    wk = _gather(widths, sel)
    hk = _gather(heights, sel)
    xk = _gather(kx, sel_lo)
    yk = _gather(ky, sel_lo)
    d0 = _gather(dv, sel_lo)
    d1 = _gather(dv, sel_hi)

    s = hk / wk
    xi = (x_in - xk) / wk
    om = 1.0 - xi
    cross = xi * om
    den = s + (d1 + d0 - 2.0 * s) * cross
    y_in = yk + hk * (s * ad.square(xi) + d0 * cross) / den
    deriv = (ad.square(s)
             * (d1 * ad.square(xi) + 2.0 * s * cross + d0 * ad.square(om))
             / ad.square(den))
    if np.any(deriv.value <= 0.0):
        raise NumericalError(
            "internal consistency failure: non-positive spline derivative")

    y = m * y_in + (1.0 - inside) * x
    log_deriv = m * ad.log(deriv)
    return y, log_deriv


def rq_spline_forward(x, params: SplineParams):
    """Apply the monotone spline elementwise; x has the raw params' leading shape.

    Returns (y, log_abs_det) with log_abs_det summed over the last axis,
    i.e. one value per vector.
    """
    xt = constant(np.asarray(x, dtype=np.float64))
    with np.errstate(all="ignore"):
        y, log_deriv = _spline_forward_graph(
            xt, constant(params.raw_widths), constant(params.raw_heights),
            constant(params.raw_derivs), params.tail_bound)
        lad = ad.tsum(log_deriv, axis=-1)
    return y.value.copy(), lad.value.copy()


def _knot_values(params: SplineParams):
    with np.errstate(all="ignore"):
        kx, ky, dv, _, _ = _knots_graph(
            constant(params.raw_widths), constant(params.raw_heights),
            constant(params.raw_derivs), params.tail_bound)
    return kx.value, ky.value, dv.value


def _spline_inverse_values(y: np.ndarray, kx: np.ndarray, ky: np.ndarray,
                           dv: np.ndarray, tail_bound: float):
    """Numpy inverse via the stable quadratic root; returns (x, log dy/dx at x)."""
    if not np.all(np.isfinite(y)):
        raise GraphError("non-finite spline inverse input")
    k = kx.shape[-1] - 1
    inside = np.abs(y) <= tail_bound
    y_in = np.where(inside, y, 0.0)

    idx = _bin_index(y_in, ky, k)
    take = lambda arr, i: np.take_along_axis(arr, i[..., None], axis=-1)[..., 0]
    xk = take(kx, idx)
    yk = take(ky, idx)
    wk = take(kx, idx + 1) - xk
    hk = take(ky, idx + 1) - yk
    d0 = take(dv, idx)
    d1 = take(dv, idx + 1)

    s = hk / wk
    t = y_in - yk
    q = d1 + d0 - 2.0 * s
    a = hk * (s - d0) + t * q
    b = hk * d0 - t * q
    c = -s * t
    disc = b * b - 4.0 * a * c
    if np.any(disc < 0.0):
        raise NumericalError(
            "internal consistency failure: negative discriminant in spline "
            "inverse")
    xi = np.where(t == 0.0, 0.0, 2.0 * c / (-b - np.sqrt(disc)))
    x_in = xk + xi * wk

    om = 1.0 - xi
    cross = xi * om
    den = s + q * cross
    deriv = (s * s * (d1 * xi * xi + 2.0 * s * cross + d0 * om * om)
             / (den * den))
    x = np.where(inside, x_in, y)
    log_deriv = np.where(inside, np.log(deriv), 0.0)
    return x, log_deriv


def rq_spline_inverse(y, params: SplineParams):
    """Invert the spline; log_abs_det is the negative of the forward value at x."""
    y = np.asarray(y, dtype=np.float64)
    kx, ky, dv = _knot_values(params)
    x, log_deriv = _spline_inverse_values(y, kx, ky, dv, params.tail_bound)
    return x, -log_deriv.sum(axis=-1)


# ---------------------------------------------------------------------------
# masked autoregressive conditioner
# ---------------------------------------------------------------------------

def _made_masks(dim: int, hidden: tuple[int, ...], out_per_dim: int):
    """Connectivity masks making output block i depend on inputs < i only."""
    in_deg = np.arange(1, dim + 1)
    max_hidden_deg = max(dim - 1, 1)
    degrees = [in_deg]
    for width in hidden:
        degrees.append(np.arange(width) % max_hidden_deg + 1)
    out_deg = np.repeat(np.arange(1, dim + 1), out_per_dim)

    masks = []
    for prev, cur in zip(degrees[:-1], degrees[1:]):
        masks.append((cur[None, :] >= prev[:, None]).astype(np.float64))
    masks.append((out_deg[None, :] > degrees[-1][:, None]).astype(np.float64))
    return masks


class MaskedConditioner:
    """Masked MLP emitting raw spline parameters per coordinate.

    The first coordinate has no inputs; its raw parameters are the trainable
    bias of the output layer. Initialization is the identity spline: output
    weights zero, output bias set to the identity raw values.
    """

    def __init__(self, dim: int, bins: int, hidden: tuple[int, ...],
                 prefix: str, rng: np.random.Generator):
        self.dim = dim
        self.bins = bins
        self.hidden = tuple(hidden)
        self.prefix = prefix
        self.out_per_dim = 3 * bins - 1
        self.masks = _made_masks(dim, self.hidden, self.out_per_dim)

        sizes = [dim, *self.hidden, dim * self.out_per_dim]
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last:
                w = np.zeros((fan_in, fan_out))
                b = self._identity_bias()
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
                b = np.zeros(fan_out)
            self.params[f"{self.prefix}.W{i}"] = w
            self.params[f"{self.prefix}.b{i}"] = b

    def _identity_bias(self) -> np.ndarray:
        per_dim = np.concatenate([
            np.zeros(self.bins), np.zeros(self.bins),
            np.full(self.bins - 1, _identity_raw_derivative())])
        return np.tile(per_dim, self.dim)

    def raw_params_graph(self, pt, x: Tensor) -> Tensor:
        """(batch, dim) -> (batch, dim, 3K-1) raw spline parameters."""
        h = x
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            w = pt[f"{self.prefix}.W{i}"] * constant(self.masks[i])
            h = ad.matmul(h, w) + pt[f"{self.prefix}.b{i}"]
            if i < n_layers - 1:
                h = ad.leaky_relu(h, slope=CONDITIONER_SLOPE)
        batch = x.value.shape[0]
        return ad.reshape(h, (batch, self.dim, self.out_per_dim))


class FlowModel:
    """Stack of masked-autoregressive spline layers with inter-layer
    coordinate reversals.

    Freshly constructed models are the identity map (zero log-determinant);
    reversals contribute nothing to the determinant. The instance owns its
    parameters in `params` (flat name -> float64 array); forward/inverse are
    read-only and thread-safe, updates belong to a single trainer.
    """

    def __init__(self, dim: int, num_layers: int = 10, bins: int = 8,
                 tail_bound: float = 5.0, hidden: tuple[int, ...] = (64, 64),
                 seed: int = 0):
        if dim < 1 or num_layers < 1 or bins < 2:
            raise ValueError("need dim >= 1, num_layers >= 1, bins >= 2")
        self.dim = dim
        self.num_layers = num_layers
        self.bins = bins
        self.tail_bound = float(tail_bound)
        self.hidden = tuple(hidden)
        self.seed = seed

        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.permutations = [
            np.arange(dim) if i == 0 else np.arange(dim)[::-1].copy()
            for i in range(num_layers)]
        self.conditioners = [
            MaskedConditioner(dim, bins, self.hidden, f"flow.l{i}", rng)
            for i in range(num_layers)]
        self.params: dict[str, np.ndarray] = {}
        for cond in self.conditioners:
            self.params.update(cond.params)

    @property
    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def _perm_matrix(self, i: int) -> np.ndarray:
        mat = np.zeros((self.dim, self.dim))
        mat[self.permutations[i], np.arange(self.dim)] = 1.0
        return mat

    def _split_raw(self, raw3: Tensor):
        k = self.bins
        return (ad.slice_last(raw3, 0, k),
                ad.slice_last(raw3, k, 2 * k),
                ad.slice_last(raw3, 2 * k, 3 * k - 1))

    def forward_graph(self, pt, x: Tensor):
        """x -> (z, log |det dz/dx|), differentiable in the parameters."""
        if x.value.ndim != 2 or x.value.shape[1] != self.dim:
            raise GraphError(
                f"flow expects (batch, {self.dim}) input, got {x.value.shape}")
        z = x
        total = None
        for i, cond in enumerate(self.conditioners):
            with ad.scope(f"flow.l{i}"):
                z = ad.matmul(z, constant(self._perm_matrix(i)))
                rw, rh, rd = self._split_raw(cond.raw_params_graph(pt, z))
                z, log_deriv = _spline_forward_graph(
                    z, rw, rh, rd, self.tail_bound)
                lad = ad.tsum(log_deriv, axis=-1)
            total = lad if total is None else total + lad
        return z, total

    def _constant_params(self) -> dict[str, Tensor]:
        return {k: constant(v, name=k) for k, v in self.params.items()}

    def _layer_knots(self, i: int, x: np.ndarray):
        """Knot values emitted by layer i's conditioner at input x."""
        pt = {k: constant(v, name=k)
              for k, v in self.conditioners[i].params.items()}
        raw3 = self.conditioners[i].raw_params_graph(pt, constant(x))
        rw, rh, rd = self._split_raw(raw3)
        kx, ky, dv, _, _ = _knots_graph(rw, rh, rd, self.tail_bound)
        return kx.value, ky.value, dv.value

    def invert(self, z: np.ndarray) -> np.ndarray:
        """Sequential inverse, one coordinate at a time in autoregressive order."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise GraphError(
                f"flow expects (batch, {self.dim}) input, got {z.shape}")
        x = z
        with np.errstate(all="ignore"):
            for i in reversed(range(self.num_layers)):
                xp = np.zeros_like(x)
                for d in range(self.dim):
                    kx, ky, dv = self._layer_knots(i, xp)
                    col, _ = _spline_inverse_values(
                        x[:, d], kx[:, d], ky[:, d], dv[:, d],
                        self.tail_bound)
                    xp[:, d] = col
                undone = np.empty_like(xp)
                undone[:, self.permutations[i]] = xp
                x = undone
        return x

    def randomize(self, seed: int, scale: float = 0.3) -> None:
        """Replace all parameters with Gaussian noise (valid by construction);
        used to build nontrivial transforms in tests."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        for name in self.params:
            self.params[name] = rng.normal(0.0, scale, self.params[name].shape)

    def structure(self) -> dict:
        return {"dim": self.dim, "num_layers": self.num_layers,
                "bins": self.bins, "tail_bound": self.tail_bound,
                "hidden": list(self.hidden), "seed": self.seed}

    @classmethod
    def from_structure(cls, spec: dict) -> "FlowModel":
        return cls(dim=spec["dim"], num_layers=spec["num_layers"],
                   bins=spec["bins"], tail_bound=spec["tail_bound"],
                   hidden=tuple(spec["hidden"]), seed=spec["seed"])


def flow_forward(model: FlowModel, x):
    """Map observations to latents; returns (z, log_abs_det per sample)."""
    xt = constant(np.asarray(x, dtype=np.float64))
    with np.errstate(all="ignore"):
        z, lad = model.forward_graph(model._constant_params(), xt)
    return z.value.copy(), lad.value.copy()


def flow_inverse(model: FlowModel, z) -> np.ndarray:
    """Map latents back to observations."""
    return model.invert(z)
