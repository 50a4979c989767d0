import time
import typing
import logging
import functools
import itertools
import concurrent.futures
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from detector import calibration, chart, config, correlation, eigen, profiles


logger = logging.getLogger(__name__)

ROBUSTNESS_CORRELATIONS = (-1.0, -0.75, -0.5, -0.3, 0.0, 0.3, 0.5)


class CensoredRecords(Exception):
    pass


class UnreachableSNR(Exception):
    pass


class UnknownStudy(Exception):
    pass


@dataclass(frozen=True)
class Cell:
    """Um ponto do planejamento fatorial."""

    study: str
    tau: int
    n: int
    m: int
    w: int
    snr: float
    d: int = 3
    pair: int = None
    var_f: float = None
    rho_fh: float = None
    convexity: str = None
    sigma_sq: float = 1.0
    horizon: int = 1000
    L: int = None
    zeta: float = None
    c: float = None
    N: int = None
    N0: int = None
    root: str = None

    @property
    def cell_id(self) -> str:
        if self.pair is not None:
            factors = f"pair{self.pair}-snr{self.snr:g}"
        else:
            factors = (
                f"varf{self.var_f:g}-snr{self.snr:g}-rho{self.rho_fh:g}-{self.convexity}"
            )
        return f"{self.study}-tau{self.tau}-n{self.n}-m{self.m}-w{self.w}-{factors}"

    def chart_config(self, seed: int = None) -> chart.ChartConfig:
        overrides = {
            key: getattr(self, key)
            for key in ("zeta", "c", "N", "N0")
            if getattr(self, key) is not None
        }
        return chart.ChartConfig.build(self.w, L=self.L, seed=seed, **overrides)

    def targets(self) -> typing.List[calibration.CalibrationTarget]:
        """Alvos candidatos; ``auto`` tenta os ramos compatíveis com o sinal de rho."""
        if self.convexity == "auto":
            if self.rho_fh <= 0:
                branches = [calibration.Convexity.NEGATIVE]
            else:
                branches = [calibration.Convexity.CONVEX, calibration.Convexity.NONCONVEX]
        else:
            branches = [calibration.Convexity(self.convexity)]
        return [
            calibration.CalibrationTarget(
                self.var_f, self.snr, self.rho_fh, branch, self.sigma_sq, self.root
            )
            for branch in branches
        ]

    def feasible_target(self) -> calibration.CalibrationTarget:
        errors = []
        for target in self.targets():
            try:
                calibration.check_feasible(target)
            except calibration.InfeasibleCalibration as exc:
                errors.append(str(exc))
            else:
                return target
        raise calibration.InfeasibleCalibration("; ".join(errors))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrialRecord:
    cell_id: str
    trial: int
    tau: int
    seed: int
    false_alarm_times: typing.List[int] = field(default_factory=list)
    true_alarm_time: int = None
    control_limit_digest: str = ""
    U: float = None
    nu: float = None
    rho_ff: float = None
    rho_hh: float = None
    rho_fh_noisy: float = None
    exits_rayleigh: int = 0
    exits_converged: int = 0
    exits_max_iter: int = 0
    rayleigh_at_start: int = 0

    def set_exit_counts(self, counts: typing.Mapping[str, int]):
        self.exits_rayleigh = counts.get(eigen.ExitReason.RAYLEIGH_EXCEEDED.value, 0)
        self.exits_converged = counts.get(eigen.ExitReason.CONVERGED_TO_REFERENCE.value, 0)
        self.exits_max_iter = counts.get(eigen.ExitReason.MAX_ITER.value, 0)
        self.rayleigh_at_start = counts.get(chart.RAYLEIGH_AT_START, 0)

    @property
    def censored(self) -> bool:
        return self.true_alarm_time is None

    @property
    def run_length(self) -> typing.Optional[int]:
        return None if self.censored else self.true_alarm_time - self.tau

    def to_row(self) -> dict:
        row = asdict(self)
        row["false_alarm_times"] = ";".join(str(t) for t in self.false_alarm_times)
        row["n_false_alarms"] = len(self.false_alarm_times)
        row["run_length"] = self.run_length
        return row


def study1_cells(
    tau: int = 30, n: int = 256, m: int = 20, w: int = 10, **overrides
) -> typing.List[Cell]:
    return [
        Cell("study1", tau, n, m, w, snr, d=3, pair=pair, **overrides)
        for pair, snr in itertools.product(range(1, 5), (3.0, 5.0))
    ]


# raiz de nu adotada quando as duas soluções caem no mesmo ramo
STUDY_ROOT = "lower"


def study2_cells(
    full_scale: bool = False, d: int = 25, include_n64: bool = False, **overrides
) -> typing.List[Cell]:
    long_tau = 10_000 if full_scale else 1_000
    ns = (64, 128, 256, 512) if include_n64 else (128, 256, 512)
    cells = []
    for tau, n, m, ratio, snr, var_f, rho, convexity in itertools.product(
        (0, 30, long_tau), ns, (20, 40), (1, 2), (3.0, 5.0),
        (2.0, 4.0, 6.0), (0.75, 0.9), ("convex", "nonconvex"),
    ):
        cells.append(
            Cell(
                "study2", tau, n, m, m // ratio, snr, d=d, var_f=var_f,
                rho_fh=rho, convexity=convexity, root=STUDY_ROOT, **overrides,
            )
        )
    return cells


def robustness_cells(
    correlations: typing.Sequence[float] = ROBUSTNESS_CORRELATIONS,
    tau: int = 30, n: int = 256, m: int = 20, w: int = 10,
    snr: float = 5.0, var_f: float = 4.0, d: int = 25, **overrides,
) -> typing.List[Cell]:
    return [
        Cell(
            "study2", tau, n, m, w, snr, d=d, var_f=var_f,
            rho_fh=rho, convexity="auto", root=STUDY_ROOT, **overrides,
        )
        for rho in correlations
    ]


STUDIES = ("study1", "study2", "robustness", "custom")


def build_cells(
    study: str,
    full_scale: bool = False,
    include_n64: bool = False,
    overrides: dict = None,
    custom_cells: typing.Sequence[dict] = None,
) -> typing.List[Cell]:
    """Células do estudo com sobrescritas aplicadas a todas elas."""
    overrides = dict(overrides or {})
    unknown = set(overrides) - (set(Cell.__dataclass_fields__) - {"study"})
    if unknown:
        raise ValueError(f"Sobrescritas desconhecidas: {sorted(unknown)}")

    if study == "study1":
        cells = study1_cells()
    elif study == "study2":
        cells = study2_cells(full_scale=full_scale, include_n64=include_n64)
    elif study == "robustness":
        cells = robustness_cells()
    elif study == "custom":
        if not custom_cells:
            raise ValueError("Estudo custom exige a lista de células")
        try:
            cells = [Cell(**{"study": "custom", **data}) for data in custom_cells]
        except TypeError as exc:
            raise ValueError(f"Célula inválida: {exc}") from None
    else:
        raise UnknownStudy(f"Estudo desconhecido: {study}. Opções: {', '.join(STUDIES)}")
    return [replace(cell, **overrides) for cell in cells]


def far_estimate(n_alarm: int, n_trials: int) -> float:
    return n_alarm / (n_trials + n_alarm)


def arl1_estimate(records: typing.Sequence[TrialRecord]) -> float:
    finished = [record for record in records if not record.censored]
    censored = len(records) - len(finished)
    if censored:
        logger.warning("%d tentativas censuradas excluídas do ARL1", censored)
    if not finished:
        raise CensoredRecords("Nenhuma tentativa com alarme verdadeiro para estimar ARL1")
    return float(np.mean([record.run_length for record in finished]))


@dataclass(frozen=True)
class CensoredARL0:
    arl0_star: typing.Optional[float]
    finished: int
    lower_bound: float


def arl0_censored(
    alarm_times: typing.Sequence[typing.Optional[int]], horizon: int
) -> CensoredARL0:
    """``None`` marca corrida sem alarme até ``horizon``."""
    if horizon < 1:
        raise ValueError(f"Horizonte deve ser positivo: {horizon}")
    finished = [t for t in alarm_times if t is not None]
    imputed = finished + [horizon + 1] * (len(alarm_times) - len(finished))
    arl0_star = float(np.mean(finished)) if finished else None
    if arl0_star is None:
        logger.warning("Nenhuma corrida terminou até %d; ARL0* indefinido", horizon)
    lower_bound = float(np.mean(imputed)) if imputed else float(horizon + 1)
    return CensoredARL0(arl0_star, len(finished), lower_bound)


def population_correlations(f, h, sigma_sq: float = 1.0) -> typing.Tuple[float, float, float]:
    var_f = calibration.var_function(f)
    var_h = calibration.var_function(h)
    rho_ff = var_f / (var_f + sigma_sq)
    rho_hh = var_h / (var_h + sigma_sq)
    rho_fh = calibration.cov_functions(f, h) / np.sqrt(var_f * var_h)
    return rho_ff, rho_hh, float(rho_fh * np.sqrt(rho_ff) * np.sqrt(rho_hh))


@dataclass(frozen=True)
class SNRSolution:
    nu: float
    var_fg: float
    se: float


def snr_solve_forcing(
    f, g, target_snr: float, sigma_sq: float = 1.0, samples: int = None, rng=None
) -> SNRSolution:
    """nu tal que ``(1 - nu)^2 Var(f - g) = SNR * sigma^2`` (Monte Carlo).

    Quando ``Var(f - g)`` é menor que o alvo, nu fica negativo e h extrapola
    f para longe de g.
    """
    if not target_snr > 0:
        raise UnreachableSNR(f"SNR alvo deve ser positivo: {target_snr}")
    samples = samples or config.get_int("EIGVCC_MC_SAMPLES")
    moments = calibration.monte_carlo_moments(
        [lambda X: f(X) - g(X)], f.dimension, samples, rng
    )
    var_fg, se = float(moments.cov[0, 0]), float(moments.se[0, 0])
    if not var_fg > 0:
        raise UnreachableSNR("Var(f - g) nula; f e g coincidem")
    nu = 1.0 - np.sqrt(target_snr * sigma_sq / var_fg)
    if nu < 0:
        logger.warning(
            "Var(f - g) = %.4f abaixo do SNR %g; usando nu=%.6f < 0", var_fg, target_snr, nu
        )
    logger.debug("SNR %g: nu=%.6f Var(f-g)=%.6f (ep %.2g)", target_snr, nu, var_fg, se)
    return SNRSolution(float(nu), var_fg, se)


@functools.lru_cache(maxsize=64)
def _forcing_mixture(pair: int, snr: float, sigma_sq: float, samples: int, seed: int):
    f, g = profiles.forcing_pairs()[pair - 1]
    solution = snr_solve_forcing(f, g, snr, sigma_sq, samples, np.random.default_rng(seed))
    return f, profiles.Mixture(solution.nu, f, g), solution.nu


def cell_functions(cell: Cell, rng, mc_seed: int = 0):
    """(f, h, nu) da célula. Pares com função de forçamento são calibrados uma vez por célula."""
    if cell.pair is not None:
        return _forcing_mixture(
            cell.pair, cell.snr, cell.sigma_sq, config.get_int("EIGVCC_MC_SAMPLES"), mc_seed
        )
    pair = calibration.random_calibrated_pair(cell.feasible_target(), cell.d, 2, rng)
    return pair.f, pair.h, pair.nu


@dataclass(frozen=True, eq=False)
class PreparedTrial:
    f: profiles.ProfileFunction
    h: profiles.ProfileFunction
    nu: float
    X: profiles.FixedDesign
    bank: correlation.HistoricalBank
    chart_config: chart.ChartConfig
    limit: chart.ControlLimit
    stream_rng: np.random.Generator

    def detector(self) -> chart.EigenvectorChart:
        return chart.EigenvectorChart(self.bank, self.chart_config, self.limit)


def prepare_trial(cell: Cell, seed: int) -> PreparedTrial:
    """Desenho fixo, m perfis históricos e limite de bootstrap da tentativa."""
    design_ss, function_ss, history_ss, boot_ss, stream_ss, chart_ss = (
        np.random.SeedSequence(seed).spawn(6)
    )
    f, h, nu = cell_functions(cell, np.random.default_rng(function_ss))
    X = profiles.random_design(cell.n, cell.d, np.random.default_rng(design_ss))
    sigma = np.sqrt(cell.sigma_sq)

    history_rng = np.random.default_rng(history_ss)
    bank = correlation.build_bank(
        [profiles.generate_profile(f, X, sigma, history_rng, t) for t in range(1 - cell.m, 1)]
    )
    chart_config = cell.chart_config(seed=int(chart_ss.generate_state(1)[0]))
    limit = chart.bootstrap_control_limit(bank, chart_config, np.random.default_rng(boot_ss))
    return PreparedTrial(
        f, h, nu, X, bank, chart_config, limit, np.random.default_rng(stream_ss)
    )


def run_trial(cell: Cell, seed: int, trial: int = 0) -> TrialRecord:
    prepared = prepare_trial(cell, seed)
    detector = prepared.detector()

    record = TrialRecord(
        cell.cell_id, trial, cell.tau, seed, U=prepared.limit.U, nu=prepared.nu,
        control_limit_digest=prepared.chart_config.digest(),
    )
    if cell.pair is None:
        record.rho_ff, record.rho_hh, record.rho_fh_noisy = population_correlations(
            prepared.f, prepared.h, cell.sigma_sq
        )

    stream = profiles.generate_stream(
        prepared.f, prepared.h, prepared.X, np.sqrt(cell.sigma_sq), cell.tau,
        prepared.stream_rng,
    )
    for y in stream:
        outcome = detector.monitor_step(y)
        if outcome.alarm:
            if outcome.t <= cell.tau:
                logger.debug("Falso alarme em t=%d; reiniciando monitoramento", outcome.t)
                record.false_alarm_times.append(outcome.t)
                detector.reset()
                continue
            record.true_alarm_time = outcome.t
            break
        if outcome.t >= cell.tau + cell.horizon:
            logger.warning("Tentativa %d de %s censurada em t=%d", trial, cell.cell_id, outcome.t)
            break
    record.set_exit_counts(detector.exit_counts)
    if record.rayleigh_at_start:
        logger.warning(
            "Tentativa %d de %s: %d saídas por Rayleigh na iteração 0",
            trial, cell.cell_id, record.rayleigh_at_start,
        )
    return record


def run_until_first_alarm(cell: Cell, seed: int, horizon: int) -> typing.Optional[int]:
    """Corrida sob controle sem reinício; ``None`` se não houve alarme até ``horizon``."""
    prepared = prepare_trial(cell, seed)
    stream = itertools.islice(
        profiles.generate_stream(
            prepared.f, prepared.f, prepared.X, np.sqrt(cell.sigma_sq), horizon,
            prepared.stream_rng,
        ),
        horizon,
    )
    alarm_time, _ = prepared.detector().run(stream)
    return alarm_time


def arl0_censored_runs(
    cell: Cell, horizon: int, runs: int, master_seed: int, cell_index: int = 0
) -> CensoredARL0:
    alarm_times = [
        run_until_first_alarm(cell, trial_seed(master_seed, cell_index, run), horizon)
        for run in range(runs)
    ]
    return arl0_censored(alarm_times, horizon)


def trial_seed(master_seed: int, cell_index: int, trial: int) -> int:
    sequence = np.random.SeedSequence(master_seed, spawn_key=(cell_index, trial))
    return int(sequence.generate_state(1)[0])


def summarize(cell: Cell, records: typing.Sequence[TrialRecord]) -> dict:
    n_alarm = sum(len(record.false_alarm_times) for record in records)
    try:
        arl1 = arl1_estimate(records)
    except CensoredRecords:
        arl1 = None
    return {
        "cell_id": cell.cell_id,
        "factors": cell.to_dict(),
        "feasible": True,
        "trials": len(records),
        "false_alarms": n_alarm,
        "FAR": far_estimate(n_alarm, len(records)) if records else None,
        "ARL1": arl1,
        "censored": sum(record.censored for record in records),
        "exit_counts": {
            key: sum(getattr(record, key) for record in records)
            for key in EXIT_COLUMNS
        },
        "seeds": [record.seed for record in records],
    }


def infeasible_summary(cell: Cell, reason: str) -> dict:
    return {
        "cell_id": cell.cell_id,
        "factors": cell.to_dict(),
        "feasible": False,
        "reason": reason,
        "trials": 0,
    }


class PoisonPill:
    def __init__(self):
        self.poisoned = False


class JobExecutor:
    """Distribui tentativas independentes entre threads.

    Cada tentativa recebe sua própria semente, portanto a ordem de conclusão
    não altera os registros.
    """

    def __init__(
        self,
        func: callable,
        max_workers: int = 1,
        on_result: callable = (lambda *k: k),
        on_error: callable = (lambda *k: k),
        on_done: callable = (lambda *k: k),
    ):
        self.poison_pill = PoisonPill()
        self.func = func
        self.max_workers = max(1, max_workers)
        self.on_result = on_result
        self.on_error = on_error
        self.on_done = on_done

    def run(self, jobs: typing.Sequence[dict] = ()):
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            pending = {
                pool.submit(self.func, **job, poison_pill=self.poison_pill): job
                for job in jobs
            }
            try:
                for future in concurrent.futures.as_completed(pending):
                    job = pending[future]
                    try:
                        self.on_result(future.result(), job)
                    except Exception as exc:
                        self.on_error(exc, job)
                    finally:
                        self.on_done()
            except KeyboardInterrupt:
                logger.info("Interrompendo as tentativas pendentes...")
                self.poison_pill.poisoned = True
                for future in pending:
                    future.cancel()
                raise


def execute_trial(
    cell: Cell,
    seed: int,
    trial: int,
    cell_index: int = None,
    poison_pill: PoisonPill = PoisonPill(),
):
    if poison_pill.poisoned:
        return
    return run_trial(cell, seed, trial)


def log_exception(exception, job, logger=logger):
    logger.error(
        "Não foi possível executar a tentativa %d de '%s': '%s'.",
        job["trial"],
        job["cell"].cell_id,
        exception,
    )


def run_study(
    cells: typing.Sequence[Cell],
    trials: int,
    master_seed: int,
    jobs: int = 1,
    progress: bool = True,
) -> typing.Tuple[typing.List[TrialRecord], typing.List[dict]]:
    """Executa as tentativas de todas as células viáveis.

    Retorna os registros ordenados por (célula, tentativa) e um resumo por
    célula, incluindo as inviáveis.
    """
    summaries = {}
    work = []
    for index, cell in enumerate(cells):
        try:
            if cell.pair is None:
                cell.feasible_target()
        except calibration.InfeasibleCalibration as exc:
            logger.info("Célula inviável %s: %s", cell.cell_id, exc)
            summaries[index] = infeasible_summary(cell, str(exc))
            continue
        for trial in range(trials):
            work.append(
                {
                    "cell": cell,
                    "seed": trial_seed(master_seed, index, trial),
                    "trial": trial,
                    "cell_index": index,
                }
            )

    results = {}
    with tqdm(total=len(work), ascii=True, disable=not progress) as pbar:

        def update_bar(pbar=pbar):
            pbar.update(1)

        def store_result(result, job):
            results[(job["cell_index"], job["trial"])] = result

        executor = JobExecutor(
            execute_trial,
            max_workers=jobs,
            on_result=store_result,
            on_error=log_exception,
            on_done=update_bar,
        )
        executor.run(work)

    records = [results[key] for key in sorted(results) if results[key] is not None]
    for index, cell in enumerate(cells):
        if index in summaries:
            continue
        cell_records = [
            results[(index, trial)] for trial in range(trials) if (index, trial) in results
        ]
        summaries[index] = summarize(cell, cell_records)
    return records, [summaries[index] for index in sorted(summaries)]


@dataclass(frozen=True)
class TimingSummary:
    minimum: float
    median: float
    maximum: float
    blocks: int
    steps_per_block: int


def runtime_probe(
    chart_config: chart.ChartConfig,
    bank: correlation.HistoricalBank,
    stream: typing.Iterator,
    blocks: int = 10,
    steps_per_block: int = 100,
) -> TimingSummary:
    """Tempo de parede de blocos de ``steps_per_block`` chamadas a monitor_step."""
    limit = chart.ControlLimit(np.inf, 0.0, 0.0, chart_config.c)
    detector = chart.EigenvectorChart(bank, chart_config, limit)
    detector.monitor_step(next(stream))

    timings = []
    for _ in range(blocks):
        profiles_block = [next(stream) for _ in range(steps_per_block)]
        start = time.perf_counter()
        for y in profiles_block:
            detector.monitor_step(y)
        timings.append(time.perf_counter() - start)
    timings = np.array(timings)
    return TimingSummary(
        float(timings.min()), float(np.median(timings)), float(timings.max()),
        blocks, steps_per_block,
    )


EXIT_COLUMNS = ("exits_rayleigh", "exits_converged", "exits_max_iter", "rayleigh_at_start")


TRIAL_COLUMNS = [
    "cell_id", "trial", "tau", "seed", "n_false_alarms", "false_alarm_times",
    "true_alarm_time", "run_length", "U", "nu", "rho_ff", "rho_hh",
    "rho_fh_noisy", "control_limit_digest", *EXIT_COLUMNS,
]


def records_frame(records: typing.Sequence[TrialRecord], **constants) -> pd.DataFrame:
    """Uma linha por tentativa; ``constants`` viram colunas repetidas."""
    frame = pd.DataFrame([record.to_row() for record in records], columns=TRIAL_COLUMNS)
    for key, value in constants.items():
        frame[key] = value
    return frame


def report_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Agrega tentativas por célula: FAR, ARL1 e censuras."""
    if frame.empty:
        return pd.DataFrame(
            columns=["cell_id", "trials", "false_alarms", "FAR", "ARL1", "censored", "rho_fh_noisy"]
        )
    grouped = frame.groupby("cell_id", sort=True)
    report = pd.DataFrame(
        {
            "trials": grouped["trial"].count(),
            "false_alarms": grouped["n_false_alarms"].sum(),
            "ARL1": grouped["run_length"].mean(),
            "censored": grouped["run_length"].apply(lambda values: int(values.isna().sum())),
            "rho_fh_noisy": grouped["rho_fh_noisy"].mean(),
        }
    )
    report["FAR"] = report["false_alarms"] / (report["trials"] + report["false_alarms"])
    report = report.reset_index()
    return report[["cell_id", "trials", "false_alarms", "FAR", "ARL1", "censored", "rho_fh_noisy"]]
