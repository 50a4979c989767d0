import json
import collections
import typing
import hashlib
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize, special
from tqdm import tqdm

from detector import config, correlation, eigen


logger = logging.getLogger(__name__)

BOOTSTRAP_SOURCES = ("pool", "bank")


class DegenerateBank(Exception):
    pass


class InvalidChartConfig(Exception):
    pass


def make_K(w: int, L: int) -> typing.Tuple[int, ...]:
    if w < 2 or L < 1:
        raise InvalidChartConfig(f"Parâmetros inválidos para K: w={w} L={L}")
    step = w // L
    values = {1, w - 1} | {j * step for j in range(1, L - 1)}
    return tuple(sorted(k for k in values if 1 <= k <= w - 1))


@dataclass(frozen=True)
class ChartConfig:
    w: int
    K: typing.Tuple[int, ...]
    zeta: float = 1e-3
    c: float = 1e-14
    N: int = 1000
    N0: int = 5000
    max_iter: int = None
    seed: int = None
    bootstrap_source: str = "pool"
    # saída por convergência à referência conta como perturbação nula
    converged_as_zero: bool = True

    def __post_init__(self):
        K = tuple(sorted(set(int(k) for k in self.K)))
        if not K or K[0] < 1 or K[-1] > self.w - 1:
            raise InvalidChartConfig(f"K={self.K} deve ser subconjunto não vazio de [1, {self.w - 1}]")
        if not self.zeta > 0:
            raise InvalidChartConfig(f"zeta deve ser positivo: {self.zeta}")
        if not 0 < self.c < 1:
            raise InvalidChartConfig(f"c deve estar em (0, 1): {self.c}")
        if self.bootstrap_source not in BOOTSTRAP_SOURCES:
            raise InvalidChartConfig(f"Fonte de bootstrap inválida: {self.bootstrap_source}")
        object.__setattr__(self, "K", K)
        if self.max_iter is None:
            object.__setattr__(self, "max_iter", eigen.default_max_iter(self.w))

    @classmethod
    def build(cls, w: int, K=None, L: int = None, **kwargs) -> "ChartConfig":
        """Configuração com padrões lidos de ``detector.config``."""
        if K is None:
            K = make_K(w, L or config.get_int("EIGVCC_K_COUNT"))
        kwargs.setdefault("zeta", config.get_float("EIGVCC_ZETA"))
        kwargs.setdefault("c", config.get_float("EIGVCC_TAIL_MASS"))
        kwargs.setdefault("N", config.get_int("EIGVCC_BOOTSTRAP_N"))
        kwargs.setdefault("N0", config.get_int("EIGVCC_BOOTSTRAP_N0"))
        return cls(w=w, K=tuple(K), **kwargs)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["K"] = list(self.K)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ChartConfig":
        data = dict(data)
        w = int(data.pop("w"))
        return cls.build(w, K=data.pop("K", None), L=data.pop("L", None), **data)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def normal_upper_quantile(c: float) -> float:
    """z com ``P(Z > z) = c`` por bisseção na cauda complementar (erfc)."""
    if not 0 < c < 1:
        raise InvalidChartConfig(f"Massa de cauda fora de (0, 1): {c}")
    if c == 0.5:
        return 0.0
    return optimize.bisect(
        lambda z: 0.5 * special.erfc(z / np.sqrt(2.0)) - c,
        -40.0,
        40.0,
        xtol=1e-15,
        maxiter=500,
    )


@dataclass(frozen=True)
class ControlLimit:
    U: float
    mu_S: float
    sd_S: float
    c: float
    config_digest: str = ""
    seed: int = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ControlLimit":
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


def control_limit_from_fit(mu_S: float, sd_S: float, c: float, **kwargs) -> ControlLimit:
    if sd_S == 0:
        logger.warning(
            "Desvio padrão das estatísticas de bootstrap é zero; U = média + %g",
            config.get_float("EIGVCC_SD_FLOOR"),
        )
        U = mu_S + config.get_float("EIGVCC_SD_FLOOR")
    else:
        U = mu_S + sd_S * normal_upper_quantile(c)
    return ControlLimit(float(U), float(mu_S), float(sd_S), c, **kwargs)


def leading_perturbation(
    Rk: np.ndarray,
    zeta: float,
    rng: np.random.Generator,
    max_iter: int,
    converged_as_zero: bool = True,
) -> typing.Tuple[float, eigen.ExitReason]:
    w = Rk.shape[0]
    v_ref = np.full(w, 1.0 / np.sqrt(w))
    result = eigen.power_iteration_detector(Rk, v_ref, zeta, rng, max_iter)
    if converged_as_zero and result.exit_reason is eigen.ExitReason.CONVERGED_TO_REFERENCE:
        return 0.0, result.exit_reason
    return eigen.perturbation_statistic(result.q, w), result.exit_reason


def leading_perturbations(
    Rks: np.ndarray,
    zeta: float,
    rng: np.random.Generator,
    max_iter: int,
    converged_as_zero: bool = True,
) -> typing.Tuple[np.ndarray, eigen.EigenStack]:
    """Estatística de cada matriz da pilha (L, w, w) e o resultado da iteração."""
    w = Rks.shape[1]
    v_ref = np.full(w, 1.0 / np.sqrt(w))
    try:
        result = eigen.power_iteration_stack(Rks, v_ref, zeta, rng, max_iter)
    except eigen.DegenerateIterate:
        logger.debug("Iterado nulo na pilha; refazendo matriz a matriz com reinício")
        rows = [eigen.power_iteration_detector(Rk, v_ref, zeta, rng, max_iter) for Rk in Rks]
        result = eigen.EigenStack(
            np.stack([row.q for row in rows]),
            np.array([row.iterations for row in rows]),
            [row.exit_reason for row in rows],
        )

    statistics = eigen.perturbation_statistics(result.Q)
    if converged_as_zero:
        converged = np.array(
            [reason is eigen.ExitReason.CONVERGED_TO_REFERENCE for reason in result.exit_reasons]
        )
        statistics[converged] = 0.0
    return statistics, result


def _normalized_rows(Y: np.ndarray) -> np.ndarray:
    centered = Y - Y.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    if not np.all(norms > 0):
        raise correlation.DegenerateProfile("Perfil de bootstrap com variância nula")
    return centered / norms


def minimum_pool_size(chart_config: ChartConfig) -> int:
    if chart_config.bootstrap_source == "pool":
        return chart_config.w + max(chart_config.K)
    return chart_config.w


def bootstrap_statistics(
    bank: correlation.HistoricalBank,
    chart_config: ChartConfig,
    rng,
    progress: bool = False,
) -> np.ndarray:
    """Estatísticas sob controle de N janelas sintéticas ``f_hat + ruído``.

    Cada réplica sorteia w perfis do conjunto de N0; os k1 substitutos vêm
    dos perfis restantes do conjunto (``pool``) ou do banco (``bank``).
    """
    rng = np.random.default_rng(rng)
    w, K = chart_config.w, chart_config.K
    if not bank.sigma_hat_sq > 0:
        raise DegenerateBank("Variância do ruído estimada é zero; banco degenerado")
    if chart_config.N < 2:
        raise InvalidChartConfig(f"N deve ser ao menos 2: {chart_config.N}")
    minimum = minimum_pool_size(chart_config)
    if chart_config.N0 < minimum:
        raise InvalidChartConfig(
            f"N0={chart_config.N0} insuficiente para w={w} e K={K} (mínimo {minimum})"
        )

    noise = rng.normal(0.0, np.sqrt(bank.sigma_hat_sq), size=(chart_config.N0, bank.n))
    pool = _normalized_rows(bank.f_hat + noise)
    from_pool = chart_config.bootstrap_source == "pool"
    extra = max(K) if from_pool else 0

    statistics = np.empty(chart_config.N)
    counts = collections.Counter()
    with tqdm(total=chart_config.N, ascii=True, disable=not progress) as pbar:
        for l in range(chart_config.N):
            drawn = rng.choice(chart_config.N0, size=w + extra, replace=False)
            if from_pool:
                # substitutos primeiro, depois a réplica
                joint, r = pool[np.concatenate([drawn[w:], drawn[:w]])], extra
            else:
                joint, r = np.vstack([bank.Z, pool[drawn]]), bank.m
            C = correlation.correlation_from_normalized(joint)
            sources = correlation.sample_replacement_stack(w, w, K, r, rng)
            values, result = leading_perturbations(
                correlation.gather_substituted(C, sources, r),
                chart_config.zeta,
                rng,
                chart_config.max_iter,
                chart_config.converged_as_zero,
            )
            counts.update(reason.value for reason in result.exit_reasons)
            statistics[l] = values.max()
            pbar.update(1)
    logger.debug("Saídas da iteração no bootstrap: %s", dict(counts))
    return statistics


def bootstrap_control_limit(
    bank: correlation.HistoricalBank,
    chart_config: ChartConfig,
    rng=None,
    progress: bool = False,
) -> ControlLimit:
    seed = chart_config.seed if rng is None else None
    statistics = bootstrap_statistics(
        bank, chart_config, rng if rng is not None else seed, progress
    )
    mu_S, sd_S = statistics.mean(), statistics.std(ddof=1)
    limit = control_limit_from_fit(
        mu_S, sd_S, chart_config.c, config_digest=chart_config.digest(), seed=chart_config.seed
    )
    logger.info(
        "Limite de controle: U=%.6f (media=%.6f dp=%.6f c=%g)",
        limit.U, limit.mu_S, limit.sd_S, limit.c,
    )
    return limit


@dataclass(frozen=True)
class MonitoringOutcome:
    t: int
    statistic: float
    argmax_k1: int
    alarm: bool
    per_k1: typing.List[typing.Tuple[int, float, str]] = field(default_factory=list)

    def to_dict(self, verbose: bool = False) -> dict:
        data = {
            "t": self.t,
            "statistic": self.statistic,
            "argmax_k1": self.argmax_k1,
            "alarm": self.alarm,
        }
        if verbose:
            data["per_k1"] = [list(item) for item in self.per_k1]
        return data


RAYLEIGH_AT_START = "rayleigh_at_start"


class EigenvectorChart:
    """Gráfico de perturbação do autovetor (fase II).

    Um único gerador, semeado por ``config.seed``, alimenta os sorteios de
    todos os passos; reexecutar com a mesma semente e o mesmo fluxo
    reproduz cada estatística.
    """

    def __init__(
        self,
        bank: correlation.HistoricalBank,
        chart_config: ChartConfig,
        limit: ControlLimit,
    ):
        self.bank = bank
        self.config = chart_config
        self.limit = limit
        self.window = correlation.init_window(bank, chart_config.w)
        self.rng = np.random.default_rng(chart_config.seed)
        self.exit_counts = collections.Counter()
        self.t = 0

    @property
    def U(self) -> float:
        return self.limit.U

    def reset(self):
        """Volta a janela ao estado histórico inicial sem reiniciar o relógio."""
        self.window.reset()

    def _tally(self, result: eigen.EigenStack):
        self.exit_counts.update(reason.value for reason in result.exit_reasons)
        at_start = int(result.rayleigh_at_start().sum())
        if at_start:
            if not self.exit_counts[RAYLEIGH_AT_START]:
                logger.warning(
                    "Saída por Rayleigh na iteração 0 em t=%d (%d de %d valores de k1)",
                    self.t, at_start, len(result),
                )
            self.exit_counts[RAYLEIGH_AT_START] += at_start

    def monitor_step(self, y) -> MonitoringOutcome:
        self.t += 1
        self.window.push(y)

        sources = correlation.sample_replacement_stack(
            self.window.T, self.window.w, self.config.K, self.bank.m, self.rng
        )
        statistics, result = leading_perturbations(
            correlation.substitute_stack(self.window, self.bank, sources),
            self.config.zeta,
            self.rng,
            self.config.max_iter,
            self.config.converged_as_zero,
        )
        self._tally(result)

        best = int(np.argmax(statistics))
        statistic, k1 = float(statistics[best]), self.config.K[best]
        per_k1 = [
            (k, float(value), reason.value)
            for k, value, reason in zip(self.config.K, statistics, result.exit_reasons)
        ]
        outcome = MonitoringOutcome(self.t, statistic, k1, statistic > self.U, per_k1)
        logger.debug(
            "t=%d S=%.6f k1=%d alarme=%s", outcome.t, statistic, k1, outcome.alarm
        )
        return outcome

    def run(
        self, stream: typing.Iterable
    ) -> typing.Tuple[typing.Optional[int], typing.List[MonitoringOutcome]]:
        log = []
        alarm = None
        for y in stream:
            outcome = self.monitor_step(y)
            log.append(outcome)
            if outcome.alarm:
                logger.info("Alarme em t=%d (S=%.6f > U=%.6f)", outcome.t, outcome.statistic, self.U)
                alarm = outcome.t
                break
        if self.exit_counts[RAYLEIGH_AT_START]:
            logger.warning(
                "%d saídas por Rayleigh na iteração 0 em %d passos",
                self.exit_counts[RAYLEIGH_AT_START], self.t,
            )
        return alarm, log


def monitor_step(chart: EigenvectorChart, y) -> MonitoringOutcome:
    return chart.monitor_step(y)


def run_chart(
    bank: correlation.HistoricalBank,
    chart_config: ChartConfig,
    limit: ControlLimit,
    stream: typing.Iterable,
) -> typing.Tuple[typing.Optional[int], typing.List[MonitoringOutcome]]:
    return EigenvectorChart(bank, chart_config, limit).run(stream)
