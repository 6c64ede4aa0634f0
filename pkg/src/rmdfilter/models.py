"""Inflation model families expressed over :mod:`rmdfilter.statespace`
"""
from __future__ import annotations
from dataclasses import dataclass
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import expit, logit

from rmdfilter.common import ModelTag, InvalidInputError
from rmdfilter.statespace import LinearGaussianModel, MeasurementMixture

__all__ = (
    'ModelFamily', 'instantiate', 'ar_params', 't_scale_mixture',
    'naive_two_percent', 'NAIVE_TARGET', 'T_MIXTURE_SIZE',
)

NAIVE_TARGET: float = 2.0
"""Inflation target used by :func:`naive_two_percent` and the ARMF family"""

T_MIXTURE_SIZE: int = 10
"""Number of Gaussian components approximating the Student-t measurement"""

_PARAM_NAMES = {
    ModelTag.UC: ('state_sd', 'obs_sd'),
    ModelTag.AR: ('state_sd', 'obs_sd', 'mu', 'kappa'),
    ModelTag.ARMF: ('state_sd', 'obs_sd', 'kappa'),
    ModelTag.UC_T: ('state_sd', 'obs_sd', 'dof'),
}

_MIN_OBS = {
    ModelTag.UC: 3,
    ModelTag.AR: 5,
    ModelTag.ARMF: 4,
    ModelTag.UC_T: 4,
}


@dataclass(frozen=True)
class ModelFamily:
    """A model family and its fixed settings

    The parameter vector ``theta`` for each family is ordered as in
    :attr:`param_names`:

    ======== =========================================
    tag      theta
    ======== =========================================
    uc       ``(state_sd, obs_sd)``
    ar       ``(state_sd, obs_sd, mu, kappa)``
    armf     ``(state_sd, obs_sd, kappa)``
    uc-t     ``(state_sd, obs_sd, dof)``
    ======== =========================================

    The UC state is a random walk (``state_coef == 1``). Some descriptions of
    the AR family call UC the ``kappa = 0`` case; in the parameterization used
    here UC is the ``kappa -> 1`` limit with an unidentified mean.

    >>> fam = ModelFamily.create('armf')
    >>> fam.fixed_mu
    2.0
    >>> fam.param_names
    ('state_sd', 'obs_sd', 'kappa')
    """
    tag: ModelTag
    fixed_mu: Optional[float] = None #: The fixed long-run mean (ARMF only)
    t_dof: Optional[float] = None
    """Default (prior center) degrees of freedom for UC-T"""

    def __post_init__(self):
        tag = ModelTag.from_str(self.tag)
        object.__setattr__(self, 'tag', tag)
        if tag == ModelTag.ARMF and self.fixed_mu is None:
            raise InvalidInputError('ARMF requires fixed_mu')
        if tag == ModelTag.UC_T:
            if self.t_dof is None:
                raise InvalidInputError('UC-T requires t_dof')
            if not self.t_dof > 2:
                raise InvalidInputError('t_dof must be > 2', self.t_dof)

    @classmethod
    def create(cls, tag, **kwargs) -> ModelFamily:
        """Create a family with the default settings for ``tag``"""
        tag = ModelTag.from_str(tag)
        if tag == ModelTag.ARMF:
            kwargs.setdefault('fixed_mu', NAIVE_TARGET)
        elif tag == ModelTag.UC_T:
            kwargs.setdefault('t_dof', 10.)
        return cls(tag, **kwargs)

    @property
    def param_names(self) -> Tuple[str, ...]:
        return _PARAM_NAMES[self.tag]

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def min_obs(self) -> int:
        """Fewest included observations the family can be fit to"""
        return _MIN_OBS[self.tag]

    @property
    def is_mean_reverting(self) -> bool:
        return self.tag in (ModelTag.AR, ModelTag.ARMF)

    def check_theta(self, theta: Sequence[float]) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise InvalidInputError(
                f'{self.tag} expects {self.n_params} parameters', theta.shape,
            )
        if not np.isfinite(theta).all():
            raise InvalidInputError('Parameters must be finite', theta)
        return theta

    def to_unconstrained(self, theta: Sequence[float]) -> np.ndarray:
        """Map ``theta`` to the space used by the optimizer and the MCMC moves

        Standard deviations are log-transformed, ``kappa`` goes through a
        logit and ``dof`` through ``log(dof - 2)``
        """
        theta = self.check_theta(theta)
        with np.errstate(divide='ignore'):
            out = [math.log(theta[0]) if theta[0] > 0 else -np.inf,
                   math.log(theta[1]) if theta[1] > 0 else -np.inf]
        if self.tag == ModelTag.AR:
            out.extend([theta[2], float(logit(theta[3]))])
        elif self.tag == ModelTag.ARMF:
            out.append(float(logit(theta[2])))
        elif self.tag == ModelTag.UC_T:
            out.append(math.log(theta[2] - 2))
        return np.array(out)

    def from_unconstrained(self, z: Sequence[float]) -> np.ndarray:
        """Inverse of :meth:`to_unconstrained`"""
        z = np.asarray(z, dtype=float)
        out = [math.exp(z[0]), math.exp(z[1])]
        if self.tag == ModelTag.AR:
            out.extend([z[2], float(expit(z[3]))])
        elif self.tag == ModelTag.ARMF:
            out.append(float(expit(z[2])))
        elif self.tag == ModelTag.UC_T:
            out.append(2 + math.exp(z[2]))
        return np.array(out)

    def __str__(self):
        return self.tag.to_str()


def t_scale_mixture(dof: float, n: int = T_MIXTURE_SIZE) -> MeasurementMixture:
    """Gaussian scale mixture approximating a unit-variance Student-t

    The t density is an integral over Gaussians whose precision follows a
    gamma distribution. Generalized Gauss-Laguerre quadrature on that gamma
    gives the nodes and weights. They are taken from the eigen-decomposition
    of the Laguerre Jacobi matrix, which stays finite for any ``dof`` (the
    closed-form weights overflow for large ``dof``). The scales are
    renormalized so the mixture variance is exactly 1.

    >>> mix = t_scale_mixture(8.)
    >>> len(mix)
    10
    >>> round(float(np.dot(mix.weights, mix.scales)), 12)
    1.0
    >>> mix = t_scale_mixture(5000.)
    >>> bool(np.isfinite(mix.weights).all()), round(float(mix.weights.sum()), 12)
    (True, 1.0)
    """
    if not (math.isfinite(dof) and dof > 2):
        raise InvalidInputError('dof must be finite and > 2', dof)
    alpha = dof / 2 - 1
    k = np.arange(n)
    diag = 2 * k + alpha + 1
    off = np.sqrt(k[1:] * (k[1:] + alpha))
    nodes, vecs = eigh_tridiagonal(diag, off)
    weights = vecs[0] ** 2
    # precision of each component is 2u/dof; unit-variance t scale is (dof-2)/dof
    scales = (dof - 2) / (2 * nodes)
    return MeasurementMixture(weights, scales)

def instantiate(family: ModelFamily, theta: Sequence[float],
                init_mean: float = 0., init_var: float = 100.) -> LinearGaussianModel:
    """Build the state-space model for the given parameter vector

    >>> fam = ModelFamily.create('uc')
    >>> m = instantiate(fam, [0.35, 0.144])
    >>> m.state_const, m.state_coef
    (0.0, 1.0)
    >>> m = instantiate(ModelFamily.create('ar'), [0.3, 0.2, 2., 0.])
    >>> m.state_const, m.state_coef
    (2.0, 0.0)

    Raises:
        InvalidInputError: On a dimension mismatch, ``kappa`` outside
            ``[0, 1)`` or ``dof <= 2``
    """
    theta = family.check_theta(theta)
    state_sd, obs_sd = float(theta[0]), float(theta[1])
    mixture = None
    if family.tag in (ModelTag.UC, ModelTag.UC_T):
        c, a = 0., 1.
        if family.tag == ModelTag.UC_T:
            mixture = t_scale_mixture(float(theta[2]))
    else:
        if family.tag == ModelTag.AR:
            mu, kappa = float(theta[2]), float(theta[3])
        else:
            mu, kappa = float(family.fixed_mu), float(theta[2])
        if not 0 <= kappa < 1:
            raise InvalidInputError('kappa must be in [0, 1)', kappa)
        c, a = mu * (1 - kappa), kappa
    return LinearGaussianModel(
        state_const=c, state_coef=a, state_sd=state_sd, obs_sd=obs_sd,
        init_mean=init_mean, init_var=init_var, obs_mixture=mixture,
    )

def ar_params(model: LinearGaussianModel) -> Tuple[float, float]:
    """Recover ``(mu, kappa)`` from a mean-reverting model

    >>> m = instantiate(ModelFamily.create('ar'), [1., 1., 2.5, 0.8])
    >>> mu, kappa = ar_params(m)
    >>> round(mu, 12), round(kappa, 12)
    (2.5, 0.8)
    """
    kappa = model.state_coef
    if not 0 <= kappa < 1:
        raise InvalidInputError('Model is not mean-reverting', kappa)
    return model.state_const / (1 - kappa), kappa

def naive_two_percent(h: int) -> float:
    """Point forecast of the 2% inflation target at every horizon

    >>> naive_two_percent(1), naive_two_percent(12)
    (2.0, 2.0)
    """
    return NAIVE_TARGET
