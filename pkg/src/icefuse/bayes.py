"""Uncertainty machinery: variational attention weights with closed-form KL,
reparameterized sampling, and the three predictive estimators (weight
sampling, MC dropout, epoch ensembles) sharing one aggregation path.
"""

from dataclasses import dataclass

import numpy as np

from . import model as mdl
from . import numkernel as nk
from .gridstore import Grid
from .util import derived_rng, parallel_map

DROPOUT_SITES = ("gloformer", "loformer", "glo_mlp", "lo_mlp")


@dataclass
class VariationalTensor:
    """Diagonal-Gaussian posterior over a weight tensor; sigma = softplus(rho)."""

    mu: nk.Tensor
    rho: nk.Tensor

    def __post_init__(self):
        if self.mu.shape != self.rho.shape:
            raise nk.ContractError("mu and rho must share a shape")

    @property
    def shape(self):
        return self.mu.shape

    def sigma(self):
        return np.logaddexp(0.0, self.rho.data)


@dataclass(frozen=True)
class DropoutSpec:
    keep_prob: float
    sites: tuple = DROPOUT_SITES

    def __post_init__(self):
        if not 0 < self.keep_prob <= 1:
            raise nk.ContractError(f"keep probability must be in (0,1], got {self.keep_prob}")


@dataclass
class UncertaintyResult:
    mean: Grid
    std: Grid
    n_samples: int
    estimator: str


def kl_diag_gaussian(v):
    """KL(q || N(0,I)) for a diagonal Gaussian: sum of 0.5(mu^2 + s^2 - 1 - ln s^2)."""
    s = nk.softplus(v.rho)
    inner = nk.add(nk.mul(v.mu, v.mu), nk.mul(s, s))
    inner = nk.sub(nk.shift(inner, -1.0), nk.scale(nk.log(s), 2.0))
    return nk.scale(nk.tsum(inner), 0.5)


def total_kl(params):
    """Sum of KL terms over every variational tensor in a parameter store."""
    total = None
    for name in sorted(params):
        p = params[name]
        if isinstance(p, VariationalTensor):
            term = kl_diag_gaussian(p)
            total = term if total is None else nk.add(total, term)
    return total if total is not None else nk.Tensor(0.0)


def sample_weights(v, seed, *stream_keys):
    """Reparameterized draw mu + softplus(rho) * eps, eps keyed by (seed, keys)."""
    eps = derived_rng(seed, "weights", *stream_keys).standard_normal(v.mu.shape)
    return nk.add(v.mu, nk.mul(nk.softplus(v.rho), nk.Tensor(eps)))


def make_variational(params, cfg, rho_init=-5.0):
    """Wrap the attention projection weights as diagonal-Gaussian posteriors."""
    for name in mdl.attention_param_names(cfg):
        mu = params[name]
        rho = nk.Tensor(np.full(mu.shape, rho_init), requires_grad=mu.requires_grad)
        params[name] = VariationalTensor(mu=mu, rho=rho)
    return params


def materialize(params, mode="mean", seed=0, *stream_keys):
    """Resolve a parameter store to plain tensors (posterior mean or a sample)."""
    out = {}
    for name, p in params.items():
        if isinstance(p, VariationalTensor):
            if mode == "mean":
                out[name] = p.mu
            elif mode == "sample":
                out[name] = sample_weights(p, seed, *stream_keys, name)
            else:
                raise ValueError(f"unknown materialization mode {mode!r}")
        else:
            out[name] = p
    return out


def flatten_params(params):
    """Parameter store -> flat name/tensor mapping for SICW checkpoints."""
    flat = {}
    for name, p in params.items():
        if isinstance(p, VariationalTensor):
            flat[f"{name}.mu"] = p.mu
            flat[f"{name}.rho"] = p.rho
        else:
            flat[name] = p
    return flat


def unflatten_params(entries):
    """Re-pair <name>.mu / <name>.rho checkpoint entries."""
    params = {}
    rhos = {}
    for name, tensor in entries.items():
        if name.endswith(".mu"):
            params[name[:-3]] = VariationalTensor(mu=tensor, rho=tensor)  # rho fixed below
        elif name.endswith(".rho"):
            rhos[name[:-4]] = tensor
        else:
            params[name] = tensor
    for base, rho in rhos.items():
        if base not in params or not isinstance(params[base], VariationalTensor):
            raise mdl.ConfigError(f"checkpoint has {base}.rho without {base}.mu")
        params[base] = VariationalTensor(mu=params[base].mu, rho=rho)
    for base, p in params.items():
        if isinstance(p, VariationalTensor) and p.mu is p.rho:
            raise mdl.ConfigError(f"checkpoint has {base}.mu without {base}.rho")
    return params


def predictive_stats(samples, estimator="deterministic"):
    """Per-cell mean and population standard deviation of sample grids."""
    if not samples:
        raise nk.ContractError("predictive_stats requires at least one sample")
    first = samples[0]
    mask = first.mask
    for g in samples[1:]:
        if g.shape != first.shape or not np.array_equal(g.mask, mask):
            raise nk.ContractError("samples must share shape and nodata mask")
    stack = np.stack([g.values for g in samples])
    mean = stack.mean(axis=0)
    std = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    mean[~mask] = np.nan
    std[~mask] = np.nan
    return UncertaintyResult(mean=Grid(mean), std=Grid(std),
                             n_samples=len(samples), estimator=estimator)


def _check_weights(weights, cfg):
    w = weights.get("embed.w")
    mu = w.mu if isinstance(w, VariationalTensor) else w
    if mu is None or mu.shape != (cfg.channels * cfg.patch ** 2, cfg.hidden):
        raise mdl.ConfigError("checkpoint shapes do not match the model config")


def _forward_grid(x, weights, cfg, dropout=None):
    out = mdl.forward(x[None, ...], weights, cfg, dropout=dropout)
    return Grid(out.data[0, 0])


def bbb_infer(params, x, cfg, n=30, seed=0):
    """n forward passes under independent posterior samples; inference i uses
    the (seed, i) stream, so results are order- and parallelism-independent."""
    if n < 1:
        raise nk.ContractError("n must be >= 1")
    _check_weights(params, cfg)

    def one(i):
        weights = materialize(params, "sample", seed, i)
        return _forward_grid(x, weights, cfg)

    grids = parallel_map(one, range(n))
    return predictive_stats(grids, estimator="bbb")


def mc_dropout_infer(params, x, cfg, spec, n=30, seed=0):
    """n forward passes with fresh inverted Bernoulli masks at the four sites."""
    if n < 1:
        raise nk.ContractError("n must be >= 1")
    _check_weights(params, cfg)
    weights = materialize(params, "mean")

    def one(i):
        dropout = mdl.DropoutState(spec.keep_prob, derived_rng(seed, "dropout", i))
        return _forward_grid(x, weights, cfg, dropout=dropout)

    grids = parallel_map(one, range(n))
    return predictive_stats(grids, estimator="mc_dropout")


def epoch_ensemble_infer(checkpoints, x, cfg):
    """One deterministic forward per checkpoint, treated as ensemble members."""
    if not checkpoints:
        raise nk.ContractError("epoch ensemble requires at least one checkpoint")

    def one(params):
        _check_weights(params, cfg)
        return _forward_grid(x, materialize(params, "mean"), cfg)

    grids = parallel_map(one, checkpoints)
    return predictive_stats(grids, estimator="epoch_ensemble")


def deterministic_infer(params, x, cfg):
    _check_weights(params, cfg)
    grid = _forward_grid(x, materialize(params, "mean"), cfg)
    return predictive_stats([grid], estimator="deterministic")
