import enum
import math
import typing
import logging
from dataclasses import dataclass

import numpy as np
import tenacity

from detector import config


logger = logging.getLogger(__name__)


class DegenerateIterate(Exception):
    pass


class InvalidStructure(Exception):
    pass


class ExitReason(enum.Enum):
    RAYLEIGH_EXCEEDED = "rayleigh_exceeded"
    CONVERGED_TO_REFERENCE = "converged_to_reference"
    MAX_ITER = "max_iter"


@dataclass(frozen=True, eq=False)
class EigenResult:
    q: np.ndarray
    iterations: int
    exit_reason: ExitReason


def default_max_iter(w: int) -> int:
    return 10 * w + 100


def random_unit_vector(w: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=w)
    return q / np.linalg.norm(q)


def _power_iteration(
    M: np.ndarray,
    v_ref: np.ndarray,
    zeta: float,
    rng: np.random.Generator,
    max_iter: int,
) -> EigenResult:
    reference = abs(float(v_ref @ M @ v_ref))
    q = random_unit_vector(M.shape[0], rng)

    iteration = 0
    while True:
        Mq = M @ q
        if abs(float(q @ Mq)) > reference:
            return EigenResult(q, iteration, ExitReason.RAYLEIGH_EXCEEDED)
        if float(v_ref @ q) ** 2 >= 1.0 - zeta:
            return EigenResult(q, iteration, ExitReason.CONVERGED_TO_REFERENCE)
        if iteration >= max_iter:
            logger.debug("Iteração de potência sem convergência após %d passos", iteration)
            return EigenResult(q, iteration, ExitReason.MAX_ITER)

        norm = math.sqrt(float(Mq @ Mq))
        if not norm > 0:
            logger.debug("Mq nulo na iteração %d; reiniciando", iteration)
            raise DegenerateIterate()
        q = Mq / norm
        iteration += 1


@tenacity.retry(
    stop=tenacity.stop_after_attempt(max(1, config.get_int("EIGVCC_MAX_RESTARTS") - 1)),
    retry=tenacity.retry_if_exception_type(DegenerateIterate),
    reraise=True,
)
def _restarted_power_iteration(M, v_ref, zeta, rng, max_iter) -> EigenResult:
    return _power_iteration(M, v_ref, zeta, rng, max_iter)


def power_iteration_detector(
    M: np.ndarray,
    v_ref: np.ndarray,
    zeta: float,
    rng: np.random.Generator,
    max_iter: int = None,
) -> EigenResult:
    """Iteração de potência com parada antecipada.

    Sai assim que o quociente de Rayleigh de q supera o da referência
    (a referência não é o autovetor dominante) ou quando q fica a
    ``zeta`` da referência. Um iterado nulo reinicia de outro ponto
    aleatório, até EIGVCC_MAX_RESTARTS tentativas ao todo.
    """
    max_iter = default_max_iter(M.shape[0]) if max_iter is None else max_iter
    try:
        return _power_iteration(M, v_ref, zeta, rng, max_iter)
    except DegenerateIterate:
        return _restarted_power_iteration(M, v_ref, zeta, rng, max_iter)


@dataclass(frozen=True, eq=False)
class EigenStack:
    Q: np.ndarray
    iterations: np.ndarray
    exit_reasons: typing.List[ExitReason]

    def __len__(self) -> int:
        return self.Q.shape[0]

    def rayleigh_at_start(self) -> np.ndarray:
        return np.array(
            [reason is ExitReason.RAYLEIGH_EXCEEDED for reason in self.exit_reasons]
        ) & (self.iterations == 0)


_EXIT_CODES = (ExitReason.RAYLEIGH_EXCEEDED, ExitReason.CONVERGED_TO_REFERENCE, ExitReason.MAX_ITER)


def power_iteration_stack(
    Ms: np.ndarray,
    v_ref: np.ndarray,
    zeta: float,
    rng: np.random.Generator,
    max_iter: int = None,
) -> EigenStack:
    """``power_iteration_detector`` aplicado a uma pilha (L, w, w) de matrizes.

    Cada linha guarda o iterado do passo em que atingiu o próprio critério
    de saída. Um iterado nulo numa linha ainda ativa levanta DegenerateIterate.
    """
    L, w, _ = Ms.shape
    max_iter = default_max_iter(w) if max_iter is None else max_iter
    reference = np.abs((Ms @ v_ref) @ v_ref)
    bound = 1.0 - zeta

    q = rng.normal(size=(L, w))
    q /= np.sqrt(np.einsum("ki,ki->k", q, q))[:, None]
    Q = np.empty_like(q)
    iterations = np.zeros(L, dtype=int)
    codes = np.full(L, 2)
    active = np.ones(L, dtype=bool)

    for iteration in range(max_iter + 1):
        Mq = np.matmul(Ms, q[:, :, None])[:, :, 0]
        rayleigh = np.abs(np.einsum("ki,ki->k", q, Mq)) > reference
        converged = (q @ v_ref) ** 2 >= bound
        done = active & (rayleigh | converged)
        if iteration == max_iter:
            done = active
        if done.any():
            Q[done] = q[done]
            iterations[done] = iteration
            codes[done & converged] = 1
            codes[done & rayleigh] = 0
            active &= ~done
            if not active.any():
                break

        norms = np.sqrt(np.einsum("ki,ki->k", Mq, Mq))
        if not norms.min() > 0:
            if not np.all(norms[active] > 0):
                logger.debug("Mq nulo na iteração %d", iteration)
                raise DegenerateIterate()
            norms[norms == 0] = 1.0
        q = Mq / norms[:, None]

    return EigenStack(Q, iterations, [_EXIT_CODES[code] for code in codes])


def perturbation_statistic(q: np.ndarray, w: int) -> float:
    sign = -1.0 if q.sum() < 0 else 1.0
    return float(np.linalg.norm(sign * q - 1.0 / np.sqrt(w)))


def perturbation_statistics(Q: np.ndarray) -> np.ndarray:
    w = Q.shape[1]
    signs = np.where(Q.sum(axis=1) < 0, -1.0, 1.0)
    return np.linalg.norm(signs[:, None] * Q - 1.0 / np.sqrt(w), axis=1)


@dataclass(frozen=True)
class StructuredEigs:
    xi_plus: float = None
    xi_minus: float = None
    lambda_plus: float = None
    lambda_minus: float = None
    lambda1: float = None
    lambda_rest: float = None

    @property
    def ratio(self) -> float:
        return self.lambda_rest / self.lambda1


def xi(
    k1: int, k2: int, gamma1: float, gamma2: float, gamma12: float
) -> typing.Tuple[float, float]:
    if k1 < 1 or k2 < 1:
        raise InvalidStructure(f"Blocos vazios: k1={k1} k2={k2}")
    if gamma12 == 0:
        raise InvalidStructure("gamma12 = 0 desacopla os blocos; xi indefinido")
    b = (k1 - 1) * gamma1 - (k2 - 1) * gamma2
    root = np.sqrt(b * b + 4 * k1 * k2 * gamma12 * gamma12)
    return (b + root) / (2 * k1 * gamma12), (b - root) / (2 * k1 * gamma12)


def structured_eigs(
    k1: int, k2: int, gamma1: float, gamma2: float, gamma12: float
) -> StructuredEigs:
    xi_plus, xi_minus = xi(k1, k2, gamma1, gamma2, gamma12)
    base = 1 + (k2 - 1) * gamma2
    return StructuredEigs(
        xi_plus=xi_plus,
        xi_minus=xi_minus,
        lambda_plus=xi_plus * k1 * gamma12 + base,
        lambda_minus=xi_minus * k1 * gamma12 + base,
    )


def expected_leading_eigenvector(
    k1: int, k2: int, gamma1: float, gamma2: float, gamma12: float
) -> np.ndarray:
    xi_plus, _ = xi(k1, k2, gamma1, gamma2, gamma12)
    v = np.concatenate([np.full(k1, xi_plus), np.ones(k2)])
    return v / np.linalg.norm(v)


def structured_lambdas(gamma1: float, w: int) -> StructuredEigs:
    if w < 2:
        raise InvalidStructure(f"Janela deve ter ao menos 2 perfis: {w}")
    if not -1.0 / (w - 1) < gamma1 < 1.0:
        raise InvalidStructure(
            f"gamma1={gamma1} fora da faixa semidefinida positiva para w={w}"
        )
    return StructuredEigs(lambda1=1 + gamma1 * (w - 1), lambda_rest=1 - gamma1)


def predicted_iterations(gamma1: float, w: int, zeta: float) -> float:
    ratio = structured_lambdas(gamma1, w).ratio
    return float(np.log(zeta) / np.log(ratio))
