"""Parametric generation of BFI2 item responses from facet summary statistics.

The generator assumes normally distributed facet scores and item errors,
linear (correlational) dependence between facets of the same domain, and
independent domains. Each item is modelled as ``facet + error`` with error
variance ``sd_f**2 * (1 - rho) / rho`` so that two items of the same facet
correlate ``rho`` in expectation:

    corr(x1, x2) = var_f / (var_f + var_e) = rho
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .scales import ResponseVector, ScaleDefinition, ScaleError

log = logging.getLogger(__name__)

RIDGE_BUDGET = 1e-6
# blocks whose eigenvalue ratio falls below this are ridged before factoring
NEAR_SINGULAR = 1e-3


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationParams:
    facets: tuple[str, ...]
    domains: tuple[str, ...]
    facet_means: tuple[float, ...]
    facet_sds: tuple[float, ...]
    facet_corr: tuple[tuple[float, ...], ...]
    intra_facet_item_corr: Mapping[str, float]
    n_agents: int
    seed: int

    def __post_init__(self):
        for name in ("facets", "domains", "facet_means", "facet_sds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "facet_corr", tuple(tuple(float(v) for v in row) for row in self.facet_corr))
        object.__setattr__(self, "intra_facet_item_corr", dict(self.intra_facet_item_corr))
        k = len(self.facets)
        if not (len(self.domains) == len(self.facet_means) == len(self.facet_sds) == k):
            raise SimulationError("facets, domains, facet_means and facet_sds must have equal length")
        if any(sd < 0 or not np.isfinite(sd) for sd in self.facet_sds):
            raise SimulationError("facet_sds must be finite and non-negative")
        if self.n_agents < 0:
            raise SimulationError("n_agents must be non-negative")
        R = self.corr_matrix
        if R.shape != (k, k):
            raise SimulationError(f"facet_corr must be {k}x{k}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise SimulationError("facet_corr is not symmetric")
        if not np.allclose(np.diag(R), 1.0):
            raise SimulationError("facet_corr must have a unit diagonal")
        if np.any(np.abs(R) > 1):
            raise SimulationError("facet_corr entries must lie in [-1, 1]")
        dom = np.asarray(self.domains)
        cross = dom[:, None] != dom[None, :]
        if np.any(R[cross] != 0):
            i, j = np.argwhere(cross & (R != 0))[0]
            raise SimulationError(
                f"cross-domain correlation between {self.facets[i]!r} and {self.facets[j]!r} "
                "must be zero (domains are independent)"
            )

    @property
    def corr_matrix(self) -> np.ndarray:
        return np.array(self.facet_corr, dtype=float)

    @property
    def means(self) -> np.ndarray:
        return np.array(self.facet_means, dtype=float)

    @property
    def sds(self) -> np.ndarray:
        return np.array(self.facet_sds, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["facet_corr"] = [list(r) for r in self.facet_corr]
        for key in ("facets", "domains", "facet_means", "facet_sds"):
            d[key] = list(d[key])
        return d


def params_from_dict(doc: Mapping, **overrides) -> SimulationParams:
    fields = dict(
        facets=doc["facets"],
        domains=doc["domains"],
        facet_means=doc["facet_means"],
        facet_sds=doc["facet_sds"],
        facet_corr=doc["facet_corr"],
        intra_facet_item_corr=doc["intra_facet_item_corr"],
        n_agents=int(doc.get("n_agents", 200)),
        seed=int(doc.get("seed", 0)),
    )
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return SimulationParams(**fields)


def load_params(path: str | Path, **overrides) -> SimulationParams:
    return params_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), **overrides)


def build_covariance(params: SimulationParams) -> tuple[np.ndarray, np.ndarray]:
    """Covariance ``sd_i * sd_j * corr_ij`` and its lower Cholesky factor.

    A near-singular diagonal correlation block (eigenvalue ratio below
    ``NEAR_SINGULAR``) gets a ridge of ``RIDGE_BUDGET``; a block that stays
    indefinite after the ridge raises.
    Zero-SD facets are handled by factoring only the non-degenerate part.
    """
    R = params.corr_matrix.copy()
    sds = params.sds
    dom = np.asarray(params.domains)
    for d in dict.fromkeys(params.domains):
        idx = np.flatnonzero(dom == d)
        block = R[np.ix_(idx, idx)]
        eig = np.linalg.eigvalsh(block)
        if eig[0] >= NEAR_SINGULAR * eig[-1]:
            continue
        if eig[0] + RIDGE_BUDGET <= 0:
            raise SimulationError(
                f"correlation block for domain {d} is not positive definite "
                f"(min eigenvalue {eig[0]:.3g}); ridge budget {RIDGE_BUDGET:g} exceeded"
            )
        log.warning(
            "near-singular correlation block for domain %s (min eigenvalue %.3g); ridge %g added",
            d, eig[0], RIDGE_BUDGET,
        )
        R[np.ix_(idx, idx)] = block + RIDGE_BUDGET * np.eye(len(idx))

    cov = np.outer(sds, sds) * R
    L = np.zeros_like(cov)
    live = np.flatnonzero(sds > 0)
    if live.size:
        L[np.ix_(live, live)] = np.linalg.cholesky(cov[np.ix_(live, live)])
    return cov, L


def sample_facets(params: SimulationParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``n_agents`` facet-score rows as ``mean + L @ z``."""
    if rng is None:
        rng = np.random.default_rng(params.seed)
    _, L = build_covariance(params)
    z = rng.standard_normal((params.n_agents, len(params.facets)))
    return params.means + z @ L.T


def error_variance(facet_sd: float, rho: float) -> float:
    if not 0 < rho <= 1:
        raise SimulationError(f"intra-facet item correlation must lie in (0, 1], got {rho}")
    return facet_sd**2 * (1 - rho) / rho


def generate_continuous(
    latent: np.ndarray,
    scale: ScaleDefinition,
    params: SimulationParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pre-rounding item values on the positively keyed direction (n_agents x n_items)."""
    facet_index = {f: k for k, f in enumerate(params.facets)}
    for f in scale.facets:
        if f not in facet_index:
            raise SimulationError(f"facet {f!r} of {scale.name} missing from params")
    n = latent.shape[0]
    out = np.empty((n, len(scale.items)))
    noise = rng.standard_normal((n, len(scale.items)))
    for j, it in enumerate(scale.items):
        if it.facet is None:
            raise SimulationError(f"item {it.id!r} has no facet")
        k = facet_index[it.facet]
        rho = params.intra_facet_item_corr.get(it.facet)
        if rho is None:
            raise SimulationError(f"no intra-facet item correlation for {it.facet!r}")
        sd_e = np.sqrt(error_variance(params.facet_sds[k], rho))
        out[:, j] = latent[:, k] + sd_e * noise[:, j]
    return out


def discretize(continuous: np.ndarray, scale: ScaleDefinition) -> np.ndarray:
    """Reflect reversed items, round to the nearest integer, clamp to range."""
    lo, hi = scale.response_min, scale.response_max
    vals = continuous.copy()
    rev = np.array([it.reversed for it in scale.items])
    vals[:, rev] = lo + hi - vals[:, rev]
    return np.clip(np.floor(vals + 0.5), lo, hi).astype(int)


def generate_items(
    latent: np.ndarray,
    scale: ScaleDefinition,
    params: SimulationParams,
    rng: np.random.Generator | None = None,
) -> list[ResponseVector]:
    if rng is None:
        rng = np.random.default_rng([params.seed, 1])
    ints = discretize(generate_continuous(latent, scale, params, rng), scale)
    ids = scale.item_ids
    return [ResponseVector(scale.name, dict(zip(ids, map(int, row)))) for row in ints]


@dataclass
class SimulatedDataset:
    latent_facets: np.ndarray
    responses: list[ResponseVector]
    params_echo: SimulationParams
    continuous_items: np.ndarray = field(repr=False, default=None)

    @property
    def agent_ids(self) -> list[str]:
        return [f"sim_{k:04d}" for k in range(len(self.responses))]


def simulate_bfi2(params: SimulationParams, scale: ScaleDefinition) -> SimulatedDataset:
    """Facet sampling followed by item generation, all from ``params.seed``.

    Facets and item errors use independent child streams of the seed, so
    changing the scale cannot perturb the latent draws.
    """
    if scale.name != "BFI2":
        raise ScaleError(f"simulation targets the BFI2 item bank, got {scale.name!r}")
    facet_ss, item_ss = np.random.SeedSequence(params.seed).spawn(2)
    latent = sample_facets(params, np.random.default_rng(facet_ss))
    cont = generate_continuous(latent, scale, params, np.random.default_rng(item_ss))
    ints = discretize(cont, scale)
    ids = scale.item_ids
    responses = [ResponseVector(scale.name, dict(zip(ids, map(int, row)))) for row in ints]
    return SimulatedDataset(latent, responses, params, cont)


def write_provenance(path: str | Path, params: SimulationParams, version: str) -> None:
    doc = {"params": params.to_dict(), "seed": params.seed, "toolkit_version": version}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
