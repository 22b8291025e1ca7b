"""Guess-and-verify piecewise-linear solver for the model with an occasionally binding bound.

At each date the current shocks are known and future innovations are expected
to be zero, so the path over the horizon is deterministic. Given a guessed
sequence of binding periods the path is solved backwards from the unconstrained
rules at the horizon; the guess is updated from the implied Taylor rate until
it reproduces itself.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from app.DSGE.dsge import DSGEParams, ModelState, ShockInput, SimPath, shock_matrix, solve_linear_re
from app.errors import ConvergenceError, HorizonTooShortError, SingularityError

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 200
DEFAULT_MAX_ITER = 100


def _backward(params: DSGEParams, regimes: np.ndarray, z: np.ndarray, eps_i: float,
              terminal: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Affine rules v_s = a_s + b_s * i_eff_{s-1}, v = (y, pi, i_taylor, i_eff), for s = 0..H-1."""
    H = regimes.size
    s_inv = 1.0 / params.sigma
    xi, bound = params.xi_star, params.b
    a_next, b_next = terminal
    consts = np.zeros((H, 4))
    slopes = np.zeros((H, 4))
    r1 = np.array([0.0, 0.0, params.rho_i, 0.0])
    for s in range(H - 1, -1, -1):
        ay, api = a_next[0], a_next[1]
        by, bpi = b_next[0], b_next[1]
        binding = regimes[s]
        ie_const, ie_coef = ((1.0 - xi) * bound, xi) if binding else (0.0, 1.0)
        M = np.array([
            [1.0, 0.0, 0.0, -by + (1.0 - bpi) * s_inv],
            [-params.kappa, 1.0, 0.0, -params.delta * bpi],
            [-(1.0 - params.rho_i) * params.r_y, -(1.0 - params.rho_i) * params.r_pi, 1.0, 0.0],
            [0.0, 0.0, -ie_coef, 1.0],
        ])
        r0 = np.array([
            ay + api * s_inv - params.chi_b * z[s, 1],
            params.delta * api - params.chi_a * z[s, 0],
            eps_i if s == 0 else 0.0,
            ie_const,
        ])
        try:
            lu = linalg.lu_factor(M)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularityError(f"period {s} system is singular") from exc
        consts[s] = linalg.lu_solve(lu, r0)
        slopes[s] = linalg.lu_solve(lu, r1)
        a_next, b_next = consts[s], slopes[s]
    return consts, slopes


def _forward(consts: np.ndarray, slopes: np.ndarray, ie_prev: float) -> np.ndarray:
    path = np.zeros_like(consts)
    for s in range(consts.shape[0]):
        path[s] = consts[s] + slopes[s] * ie_prev
        ie_prev = path[s, 3]
    return path


def _solve_date(params: DSGEParams, ie_prev: float, z0: np.ndarray, eps_i: float, guess: np.ndarray,
                max_iter: int) -> Tuple[np.ndarray, np.ndarray, int]:
    H = guess.size
    rho = np.array([params.rho_a, params.rho_b])
    z = z0[None, :] * rho[None, :] ** np.arange(H + 1)[:, None]
    rules = solve_linear_re(params)
    zH = z[H]
    # unconstrained rules at the horizon: y_H = C (i_eff_{H-1}, z_{H-1}) with z_{H-1} folded into z_H
    d = rules.D
    terminal_const = np.array([d[0, 1] * zH[0] + d[0, 2] * zH[1], d[1, 1] * zH[0] + d[1, 2] * zH[1], 0.0, 0.0])
    terminal_slope = np.array([rules.C[0, 0], rules.C[1, 0], 0.0, 0.0])
    regimes = guess.copy()
    for iteration in range(1, max_iter + 1):
        consts, slopes = _backward(params, regimes, z[:H], eps_i, (terminal_const, terminal_slope))
        path = _forward(consts, slopes, ie_prev)
        implied = path[:, 2] < params.b
        if np.array_equal(implied, regimes):
            if regimes[-1]:
                raise HorizonTooShortError(f"ELB spell reaches the {H}-period horizon")
            return path, regimes, iteration
        regimes = implied
    raise ConvergenceError(f"regime sequence did not settle in {max_iter} iterations")


def solve_occbin(params: DSGEParams, init: Optional[ModelState] = None, shocks: ShockInput = None,
                 T: Optional[int] = None, horizon: int = DEFAULT_HORIZON,
                 max_iter: int = DEFAULT_MAX_ITER) -> SimPath:
    """Simulate by re-solving the perfect-foresight regime problem at every date."""
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    eps = shock_matrix(shocks, T)
    init = init or ModelState()
    T = eps.shape[0]
    names = ("y", "pi", "i", "i_star", "i_taylor", "i_eff", "z_a", "z_b")
    cols = {name: np.zeros(T) for name in names}
    elb = np.zeros(T, dtype=bool)
    expected = np.zeros((T, 2))
    ie_prev, za, zb = init.i_eff, init.z_a, init.z_b
    guess = np.zeros(horizon, dtype=bool)
    bound, alpha = params.b, params.alpha
    iterations = 0
    for t in range(T):
        za = params.rho_a * za + eps[t, 1]
        zb = params.rho_b * zb + eps[t, 2]
        path, regimes, n = _solve_date(params, ie_prev, np.array([za, zb]), eps[t, 0], guess, max_iter)
        iterations += n
        y, pi, i_taylor, ie = path[0]
        if regimes[0]:
            i, i_star = bound, -alpha * bound + (1.0 + alpha) * i_taylor
        else:
            i = i_star = i_taylor
        for name, value in zip(names, (y, pi, i, i_star, i_taylor, ie, za, zb)):
            cols[name][t] = value
        elb[t] = regimes[0]
        expected[t] = path[1, :2]
        ie_prev = ie
        guess = np.concatenate([regimes[1:], [False]])
    logger.debug("occbin: %d periods, %d regime iterations, %d at the bound", T, iterations, int(elb.sum()))
    return SimPath(**cols, elb=elb, method="occbin", shocks=eps, expected=expected, init=init, bound=bound)
