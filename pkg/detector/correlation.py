import typing
import logging
from dataclasses import dataclass

import numpy as np

from detector import profiles


logger = logging.getLogger(__name__)

# rótulo de slot ocupado por perfil observado (t >= 1)
OBSERVED = -1


class DegenerateProfile(Exception):
    pass


class InsufficientHistory(Exception):
    pass


class InvalidWindow(Exception):
    pass


class InsufficientPool(Exception):
    pass


class IndexCollision(Exception):
    pass


def _as_array(y) -> np.ndarray:
    if isinstance(y, profiles.ResponseVector):
        return y.y
    return np.asarray(y, dtype=float)


def normalize_response(y) -> np.ndarray:
    """Centraliza e normaliza o perfil; o produto interno de dois perfis
    normalizados é a correlação de Pearson."""
    y = _as_array(y)
    if y.ndim != 1 or y.size < 2:
        raise DegenerateProfile(f"Perfil deve ter ao menos 2 respostas: {y.shape}")
    centered = y - y.mean()
    norm = np.linalg.norm(centered)
    if not norm > 0 or not np.isfinite(norm):
        raise DegenerateProfile("Perfil com variância amostral nula (resposta constante)")
    return centered / norm


def correlation_from_normalized(Z: np.ndarray) -> np.ndarray:
    gram = Z @ Z.T
    R = np.triu(gram, 1)
    R = R + R.T
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


def pearson(y1, y2) -> float:
    y1, y2 = _as_array(y1), _as_array(y2)
    if y1.shape != y2.shape:
        raise profiles.DimensionMismatch(
            f"Perfis de tamanhos diferentes: {y1.size} e {y2.size}"
        )
    return float(np.clip(normalize_response(y1) @ normalize_response(y2), -1.0, 1.0))


def correlation_matrix(responses: typing.Sequence) -> np.ndarray:
    return correlation_from_normalized(np.stack([normalize_response(y) for y in responses]))


@dataclass(frozen=True, eq=False)
class HistoricalBank:
    responses: np.ndarray
    Z: np.ndarray
    R_star: np.ndarray
    f_hat: np.ndarray
    sigma_hat_sq: float

    @property
    def m(self) -> int:
        return self.responses.shape[0]

    @property
    def n(self) -> int:
        return self.responses.shape[1]


def build_bank(historical: typing.Sequence) -> HistoricalBank:
    responses = np.stack([_as_array(y) for y in historical]) if len(historical) else None
    if responses is None or responses.shape[0] < 2:
        raise InsufficientHistory("Perfis históricos insuficientes (mínimo 2)")

    Z = np.stack([normalize_response(y) for y in responses])
    m, n = responses.shape
    f_hat = responses.mean(axis=0)
    sigma_hat_sq = float(np.sum((responses - f_hat) ** 2) / (n * (m - 1)))
    for array in (responses, Z):
        array.setflags(write=False)

    R_star = correlation_from_normalized(Z)
    R_star.setflags(write=False)
    logger.debug("Banco histórico: m=%d n=%d sigma2=%.6g", m, n, sigma_hat_sq)
    return HistoricalBank(responses, Z, R_star, f_hat, sigma_hat_sq)


def _clip(values: np.ndarray) -> np.ndarray:
    np.minimum(values, 1.0, out=values)
    np.maximum(values, -1.0, out=values)
    return values


class CorrelationWindow:
    """Janela deslizante dos últimos w perfis normalizados e sua matriz R.

    Linhas e colunas seguem a ordem cronológica (mais antigo primeiro).
    ``sources`` guarda o índice histórico de cada slot, ou OBSERVED.
    """

    def __init__(self, bank: HistoricalBank, w: int):
        if not 2 <= w <= bank.m:
            raise InvalidWindow(f"Tamanho de janela {w} fora de [2, {bank.m}]")
        self.bank = bank
        self.w = w
        self.dot_products = 0
        self.reset()

    @property
    def n(self) -> int:
        return self.bank.n

    def reset(self):
        m, w = self.bank.m, self.w
        self.Z = np.array(self.bank.Z[m - w:])
        self.R = np.array(self.bank.R_star[m - w:, m - w:])
        self.sources = np.arange(m - w, m)
        self.T = 0

    def snapshot(self) -> tuple:
        return (self.Z.tobytes(), self.R.tobytes(), self.sources.tobytes(), self.T)

    def push(self, y) -> "CorrelationWindow":
        y = _as_array(y)
        if y.shape != (self.n,):
            raise profiles.DimensionMismatch(
                f"Perfil com {y.size} respostas; esperado {self.n}"
            )
        z = normalize_response(y)

        row = _clip(self.Z[1:] @ z)
        self.dot_products += self.w - 1

        self.R[:-1, :-1] = self.R[1:, 1:]
        self.R[-1, :-1] = row
        self.R[:-1, -1] = row
        self.R[-1, -1] = 1.0
        self.Z[:-1] = self.Z[1:]
        self.Z[-1] = z
        self.sources[:-1] = self.sources[1:]
        self.sources[-1] = OBSERVED
        self.T += 1
        return self


def init_window(bank: HistoricalBank, w: int) -> CorrelationWindow:
    return CorrelationWindow(bank, w)


def push(window: CorrelationWindow, y) -> CorrelationWindow:
    return window.push(y)


def replacement_pool_size(T: int, w: int, k1: int, m: int) -> int:
    if T >= w - k1:
        return m
    return m - w + k1 + T


def sample_replacement_stack(T: int, w: int, K, m: int, rng) -> np.ndarray:
    """Composição da janela substituída para cada k1 de K.

    Linha i, de tamanho w: os K[i] primeiros slots recebem índices históricos
    distintos e ordenados, sorteados entre os que não estão mais na janela;
    os demais ficam OBSERVED (mantêm o conteúdo da janela).
    """
    K = np.asarray(K, dtype=int).reshape(-1)
    if K.size == 0 or K.min() < 1 or K.max() > w - 1:
        raise InvalidWindow(f"K={K.tolist()} fora de [1, {w - 1}]")
    pools = np.where(T >= w - K, m, m - w + K + T)
    if np.any(pools < K):
        raise InsufficientPool(
            f"Conjunto de {pools.min()} perfis históricos para k1={K[np.argmin(pools - K)]}"
        )

    keys = rng.random((K.size, m))
    keys[np.arange(m) >= pools[:, None]] = np.inf
    columns = min(m, w)
    drawn = np.full((K.size, w), m)
    drawn[:, :columns] = np.argsort(keys, axis=1)[:, :columns]

    lead = np.arange(w) < K[:, None]
    drawn = np.sort(np.where(lead, drawn, m), axis=1)
    return np.where(lead, drawn, OBSERVED)


def sample_replacement_indices(T: int, w: int, k1: int, m: int, rng) -> np.ndarray:
    """Índices históricos (base zero) que não estão mais fisicamente na janela."""
    if not 1 <= k1 <= w - 1:
        raise InvalidWindow(f"k1={k1} fora de [1, {w - 1}]")
    return sample_replacement_stack(T, w, [k1], m, rng)[0, :k1]


def gather_substituted(C: np.ndarray, sources: np.ndarray, r: int) -> np.ndarray:
    """Submatrizes de C escolhidas por ``sources``; OBSERVED no slot j vira r + j."""
    w = sources.shape[1]
    ids = np.where(sources != OBSERVED, sources, r + np.arange(w))
    return C[ids[:, :, None], ids[:, None, :]]


def _check_collisions(window: CorrelationWindow, sources: np.ndarray, lead: np.ndarray):
    # os slots históricos restantes cobrem a faixa contínua sources[k1], ..., m - 1
    k1s = lead.sum(axis=1)
    first = window.sources[k1s]
    top = np.where(lead, sources, OBSERVED).max(axis=1)
    clash = (first != OBSERVED) & (top >= first)
    if clash.any():
        row = int(np.argmax(clash))
        raise IndexCollision(
            f"Índices {sources[row, :k1s[row]]} ainda presentes na janela "
            f"{window.sources[k1s[row]:]}"
        )


def substitute_stack(
    window: CorrelationWindow, bank: HistoricalBank, sources: np.ndarray
) -> np.ndarray:
    """Matrizes R(k1) empilhadas, uma por linha de ``sources``.

    Correlações entre perfis históricos saem de R*; só os pares
    (sorteado, observado) são calculados na hora.
    """
    sources = np.asarray(sources, dtype=int)
    w = window.w
    if sources.ndim != 2 or sources.shape[1] != w:
        raise InvalidWindow(f"Composição com forma {sources.shape}; esperado (L, {w})")
    lead = sources != OBSERVED
    if window.T < w:
        _check_collisions(window, sources, lead)

    rows = np.unique(sources[lead])
    r = rows.size
    observed = window.sources == OBSERVED
    cross = np.empty((r, w))
    if observed.any():
        cross[:, observed] = _clip(bank.Z[rows] @ window.Z[observed].T)
    if not observed.all():
        cross[:, ~observed] = bank.R_star[rows[:, None], window.sources[~observed]]

    C = np.empty((r + w, r + w))
    C[:r, :r] = bank.R_star[rows[:, None], rows]
    C[:r, r:] = cross
    C[r:, :r] = cross.T
    C[r:, r:] = window.R
    return gather_substituted(C, np.where(lead, np.searchsorted(rows, sources), OBSERVED), r)


@dataclass(frozen=True, eq=False)
class SubstitutedMatrix:
    Rk: np.ndarray
    k1: int
    sampled_indices: np.ndarray
    fresh_entries: int

    @property
    def k2(self) -> int:
        return self.Rk.shape[0] - self.k1


def substitute(
    window: CorrelationWindow, bank: HistoricalBank, k1: int, indices
) -> SubstitutedMatrix:
    indices = np.asarray(indices, dtype=int)
    w = window.w
    if indices.shape != (k1,) or not 1 <= k1 <= w - 1:
        raise InvalidWindow(f"Substituição com k1={k1} e índices {indices}")
    if np.unique(indices).size != k1:
        raise InvalidWindow(f"Índices repetidos na substituição: {indices}")

    sources = np.full((1, w), OBSERVED)
    sources[0, :k1] = np.sort(indices)
    Rk = substitute_stack(window, bank, sources)[0]
    # slot i volta a corresponder a indices[i]
    slots = np.concatenate([np.argsort(np.argsort(indices)), np.arange(k1, w)])
    Rk = Rk[np.ix_(slots, slots)]
    observed = int((window.sources[k1:] == OBSERVED).sum())
    return SubstitutedMatrix(Rk, k1, indices, k1 * observed)


def expected_R(gamma1: float, gamma2: float, gamma12: float, k1: int, k2: int) -> np.ndarray:
    for gamma in (gamma1, gamma2, gamma12):
        if not -1.0 < gamma < 1.0:
            raise InvalidWindow(f"Correlação {gamma} fora de (-1, 1)")
    if k1 < 0 or k2 < 0 or k1 + k2 < 2:
        raise InvalidWindow(f"Blocos inválidos: k1={k1} k2={k2}")

    R = np.full((k1 + k2, k1 + k2), float(gamma12))
    R[:k1, :k1] = gamma1
    R[k1:, k1:] = gamma2
    np.fill_diagonal(R, 1.0)
    return R
