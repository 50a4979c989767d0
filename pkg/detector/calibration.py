import enum
import typing
import logging
import functools
from dataclasses import dataclass

import numpy as np
import tenacity

from detector import config, profiles


logger = logging.getLogger(__name__)

# E[X^k] para X ~ Unif(0, 1), k = 0..4
UNIFORM_MOMENTS = (1.0, 1.0 / 2, 1.0 / 3, 1.0 / 4, 1.0 / 5)

CALIBRATION_TOLERANCE = 1e-8


class UnsupportedVariant(Exception):
    pass


class DegenerateOrthogonalization(Exception):
    pass


class DegeneratePolynomial(Exception):
    pass


class InfeasibleCalibration(Exception):
    pass


class Convexity(enum.Enum):
    CONVEX = "convex"
    NONCONVEX = "nonconvex"
    # nu <= 0, apenas para alvos com rho(f, h) <= 0
    NEGATIVE = "negative"

    def admits(self, nu: float) -> bool:
        if self is Convexity.CONVEX:
            return 0.0 < nu < 1.0
        elif self is Convexity.NONCONVEX:
            return nu > 1.0
        return nu <= 0.0


def _check_same_length(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape or a.ndim != 1:
        raise profiles.DimensionMismatch(
            f"Vetores de coeficientes incompatíveis: {a.shape} e {b.shape}"
        )


def _check_square(A: np.ndarray):
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise profiles.DimensionMismatch(f"Matriz não quadrada: {A.shape}")


def cov_linear(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    _check_same_length(a, b)
    return float(a @ b) / 12.0


def cov_quadratic_linear(A, b) -> float:
    A, b = np.asarray(A, dtype=float), np.asarray(b, dtype=float)
    _check_square(A)
    if A.shape[0] != b.size:
        raise profiles.DimensionMismatch(
            f"Matriz {A.shape} incompatível com vetor de tamanho {b.size}"
        )
    return float(np.sum((A + A.T) @ b)) / 24.0


def mean_quadratic(A) -> float:
    A = np.asarray(A, dtype=float)
    _check_square(A)
    return float(np.trace(A)) / 12.0 + float(A.sum()) / 4.0


@functools.lru_cache(maxsize=32)
def fourth_moment_tensor(d: int) -> np.ndarray:
    """Tensor ``E[X_i X_j X_k X_l]`` de dimensão d^4.

    Cada entrada é o produto, sobre os índices distintos da tupla, do
    momento uniforme de ordem igual à multiplicidade do índice.
    """
    idx = np.indices((d,) * 4).reshape(4, -1)
    tensor = np.ones(idx.shape[1])
    for p in range(4):
        counts = sum((idx[q] == idx[p]).astype(int) for q in range(4))
        first = np.ones(idx.shape[1], dtype=bool)
        for q in range(p):
            first &= idx[q] != idx[p]
        moments = np.take(UNIFORM_MOMENTS, counts)
        tensor *= np.where(first, moments, 1.0)
    tensor = tensor.reshape((d,) * 4)
    tensor.setflags(write=False)
    return tensor


def coefficient_matrix(i: int, j: int, d: int) -> np.ndarray:
    """Matriz C(i, j) de coeficientes aplicada entrada a entrada em B."""
    return np.array(fourth_moment_tensor(d)[i, j])


def cov_quadratic_quadratic(A, B) -> float:
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    _check_square(A)
    _check_square(B)
    if A.shape != B.shape:
        raise profiles.DimensionMismatch(f"Matrizes incompatíveis: {A.shape} e {B.shape}")
    d = A.shape[0]
    moments = fourth_moment_tensor(d).reshape(d * d, d * d)
    cross = float(A.ravel() @ moments @ B.ravel())
    return cross - mean_quadratic(A) * mean_quadratic(B)


def _polynomial_parts(fn) -> typing.Tuple[np.ndarray, np.ndarray]:
    if isinstance(fn, profiles.Linear):
        return np.zeros((fn.dimension, fn.dimension)), fn.coeffs
    elif isinstance(fn, profiles.Quadratic):
        return fn.matrix, fn.coeffs
    elif isinstance(fn, profiles.Mixture):
        A_left, a_left = _polynomial_parts(fn.left)
        A_right, a_right = _polynomial_parts(fn.right)
        return (
            fn.nu * A_left + (1 - fn.nu) * A_right,
            fn.nu * a_left + (1 - fn.nu) * a_right,
        )
    raise UnsupportedVariant(
        f"{type(fn).__name__} não possui forma fechada; use Monte Carlo"
    )


def cov_functions(f, g) -> float:
    if f.dimension != g.dimension:
        raise profiles.DimensionMismatch(
            f"Funções com dimensões {f.dimension} e {g.dimension}"
        )
    if isinstance(f, profiles.Mixture):
        return f.nu * cov_functions(f.left, g) + (1 - f.nu) * cov_functions(f.right, g)
    if isinstance(g, profiles.Mixture):
        return g.nu * cov_functions(f, g.left) + (1 - g.nu) * cov_functions(f, g.right)

    A, a = _polynomial_parts(f)
    B, b = _polynomial_parts(g)
    return (
        cov_quadratic_quadratic(A, B)
        + cov_quadratic_linear(A, b)
        + cov_quadratic_linear(B, a)
        + cov_linear(a, b)
    )


def var_function(fn) -> float:
    return cov_functions(fn, fn)


def orthogonalize(f0, h0_star):
    """Um passo de Gram-Schmidt modificado na norma ``sqrt(Var)``."""
    A, a = _polynomial_parts(f0)
    B, b = _polynomial_parts(h0_star)
    projection = cov_functions(f0, h0_star) / var_function(f0)

    if isinstance(f0, profiles.Linear) and isinstance(h0_star, profiles.Linear):
        residual = profiles.Linear(b - projection * a)
    else:
        residual = profiles.Quadratic(B - projection * A, b - projection * a)

    residual_var = var_function(residual)
    if residual_var < 1e-12:
        raise DegenerateOrthogonalization(
            "h0* é paralela a f0; sorteie outro polinômio"
        )
    return residual.scaled(1.0 / np.sqrt(residual_var))


def random_unit_polynomial(d: int, degree: int, rng):
    return _draw_unit_polynomial(d, degree, np.random.default_rng(rng))


@tenacity.retry(
    stop=tenacity.stop_after_attempt(config.get_int("EIGVCC_POLY_RETRIES")),
    retry=tenacity.retry_if_exception_type(DegeneratePolynomial),
    reraise=True,
)
def _draw_unit_polynomial(d: int, degree: int, rng: np.random.Generator):
    if d < 1:
        raise profiles.DimensionMismatch(f"Dimensão inválida: {d}")
    if degree not in (1, 2):
        raise profiles.InvalidProfileFunction(f"Grau não suportado: {degree}")

    if degree == 1:
        fn = profiles.Linear(rng.normal(size=d))
    else:
        fn = profiles.Quadratic(rng.normal(size=(d, d)), rng.normal(size=d))

    variance = var_function(fn)
    if variance < 1e-12:
        logger.debug("Polinômio sorteado com variância %g, sorteando novamente", variance)
        raise DegeneratePolynomial()
    return fn.scaled(1.0 / np.sqrt(variance))


@dataclass(frozen=True)
class CalibrationTarget:
    var_f: float
    snr: float
    rho_fh: float
    convexity: Convexity = Convexity.CONVEX
    noise_var: float = 1.0
    # "lower" ou "upper"; obrigatório quando as duas raízes de nu caem no mesmo ramo
    root: str = None

    @property
    def var_delta(self) -> float:
        return self.snr * self.noise_var

    @property
    def minimum_correlation(self) -> float:
        if self.var_f > self.var_delta:
            return float(np.sqrt(1.0 - self.var_delta / self.var_f))
        return -1.0


@dataclass(frozen=True, eq=False)
class CalibratedPair:
    f: profiles.ProfileFunction
    h: profiles.ProfileFunction
    nu: float
    c_f: float
    c_h: float
    f0: profiles.ProfileFunction
    h0: profiles.ProfileFunction

    def to_dict(self) -> dict:
        return {
            "nu": self.nu,
            "c_f": self.c_f,
            "c_h": self.c_h,
            "f0": self.f0.to_dict(),
            "h0": self.h0.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibratedPair":
        f0 = profiles.from_dict(data["f0"])
        h0 = profiles.from_dict(data["h0"])
        f = f0.scaled(data["c_f"])
        h = profiles.Mixture(data["nu"], f, h0.scaled(data["c_h"]))
        return cls(f, h, data["nu"], data["c_f"], data["c_h"], f0, h0)


def rho_of_nu(nu: float, var_delta: float, var_f: float) -> float:
    denominator = 2 * nu - 1 + var_delta / var_f
    if denominator <= 0:
        raise InfeasibleCalibration(f"nu={nu} não produz correlação definida")
    return nu / np.sqrt(denominator)


def nu_of_rho(rho: float, var_delta: float, var_f: float) -> typing.Tuple[float, float]:
    rho_sq = rho * rho
    discriminant = rho_sq * rho_sq + rho_sq * (var_delta / var_f - 1.0)
    if discriminant < 0:
        raise InfeasibleCalibration(
            f"Discriminante negativo ({discriminant:.3g}) para rho={rho}"
        )
    root = np.sqrt(discriminant)
    return rho_sq + root, rho_sq - root


def c_h_of_nu(nu: float, var_delta: float, var_f: float) -> float:
    if abs(1.0 - nu) < 1e-12:
        raise InfeasibleCalibration("nu = 1 implica h proporcional a f e Var(delta) = 0")
    c_h_sq = var_delta / (1.0 - nu) ** 2 - var_f
    if c_h_sq < -1e-12:
        raise InfeasibleCalibration(f"C_h^2 negativo ({c_h_sq:.3g}) para nu={nu}")
    return float(np.sqrt(max(c_h_sq, 0.0)))


def _select_root(target: CalibrationTarget) -> float:
    candidates = []
    for nu in nu_of_rho(target.rho_fh, target.var_delta, target.var_f):
        if not target.convexity.admits(nu):
            continue
        try:
            rho = rho_of_nu(nu, target.var_delta, target.var_f)
        except InfeasibleCalibration:
            continue
        if abs(rho - target.rho_fh) <= CALIBRATION_TOLERANCE:
            candidates.append(float(nu))

    candidates = sorted(set(candidates))
    if not candidates:
        raise InfeasibleCalibration(
            f"Nenhuma raiz de nu no ramo {target.convexity.value} para {target}"
        )
    if len(candidates) == 1:
        return candidates[0]
    if target.root not in ("lower", "upper"):
        raise InfeasibleCalibration(
            f"Duas raízes admissíveis no ramo {target.convexity.value}: "
            f"nu={candidates[0]:.6f} e nu={candidates[-1]:.6f}; escolha root=lower ou upper"
        )
    logger.debug("Duas raízes no ramo %s: %s", target.convexity.value, candidates)
    return candidates[0] if target.root == "lower" else candidates[-1]


def check_feasible(target: CalibrationTarget) -> typing.Tuple[float, float]:
    """(nu, C_h) do alvo, ou InfeasibleCalibration. Não depende de f0 e h0."""
    if target.var_f <= 0 or target.snr <= 0:
        raise InfeasibleCalibration("Var(f) e SNR devem ser positivos")
    if not -1.0 <= target.rho_fh <= 1.0:
        raise InfeasibleCalibration(f"Correlação fora de [-1, 1]: {target.rho_fh}")
    if target.rho_fh < target.minimum_correlation:
        raise InfeasibleCalibration(
            f"Correlação {target.rho_fh} abaixo do mínimo atingível "
            f"{target.minimum_correlation:.6f}"
        )

    nu = _select_root(target)
    return nu, c_h_of_nu(nu, target.var_delta, target.var_f)


def solve_calibration(target: CalibrationTarget, f0, h0) -> CalibratedPair:
    nu, c_h = check_feasible(target)
    c_f = float(np.sqrt(target.var_f))

    f = f0.scaled(c_f)
    h = profiles.Mixture(nu, f, h0.scaled(c_h))
    pair = CalibratedPair(f, h, nu, c_f, c_h, f0, h0)

    var_f, var_h, cov_fh = var_function(f), var_function(h), cov_functions(f, h)
    snr = (var_f + var_h - 2 * cov_fh) / target.noise_var
    if abs(snr - target.snr) > CALIBRATION_TOLERANCE * max(1.0, target.snr):
        raise InfeasibleCalibration(f"SNR obtido {snr} difere do alvo {target.snr}")
    if var_h > 0:
        rho = cov_fh / np.sqrt(var_f * var_h)
        if abs(rho - target.rho_fh) > CALIBRATION_TOLERANCE:
            raise InfeasibleCalibration(f"rho obtido {rho} difere do alvo {target.rho_fh}")

    logger.debug("Calibração: nu=%.6f C_f=%.6f C_h=%.6f", nu, c_f, c_h)
    return pair


def random_calibrated_pair(target: CalibrationTarget, d: int, degree: int, rng) -> CalibratedPair:
    rng = np.random.default_rng(rng)
    f0 = random_unit_polynomial(d, degree, rng)
    h0 = orthogonalize(f0, random_unit_polynomial(d, degree, rng))
    return solve_calibration(target, f0, h0)


@dataclass(frozen=True)
class MonteCarloMoments:
    mean: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    samples: int


def monte_carlo_moments(
    fns: typing.Sequence, d: int, samples: int, rng, chunk: int = None
) -> MonteCarloMoments:
    """Média e covariância das funções sob Unif([0,1]^d) por médias de lotes.

    O erro padrão vem da dispersão entre lotes de mesmo tamanho (ao menos 10).
    """
    rng = np.random.default_rng(rng)
    chunk = chunk or config.get_int("EIGVCC_MC_CHUNK")
    chunk = max(2, min(chunk, samples // 10))
    batches = samples // chunk
    means, covs = [], []
    for _ in range(batches):
        X = rng.uniform(0.0, 1.0, size=(chunk, d))
        values = np.stack([np.asarray(fn(X), dtype=float) for fn in fns])
        means.append(values.mean(axis=1))
        covs.append(np.atleast_2d(np.cov(values)))
    means, covs = np.array(means), np.array(covs)
    return MonteCarloMoments(
        mean=means.mean(axis=0),
        cov=covs.mean(axis=0),
        se=covs.std(axis=0, ddof=1) / np.sqrt(batches),
        samples=batches * chunk,
    )
