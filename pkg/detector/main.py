import sys
import json
import typing
import logging
import argparse
import pathlib
import itertools

import numpy as np
import pandas as pd

from detector import calibration, chart, config, correlation, profiles, simulation, utils


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DEGENERATE = 2
EXIT_ALARM = 3

DEGENERATE_ERRORS = (
    correlation.InsufficientHistory,
    correlation.DegenerateProfile,
    chart.DegenerateBank,
)

INPUT_ERRORS = (
    utils.InputFormatError,
    utils.ManifestError,
    OSError,
    profiles.DimensionMismatch,
    profiles.InvalidProfileFunction,
    profiles.InvalidNoiseLevel,
    profiles.InvalidDesign,
    calibration.InfeasibleCalibration,
    calibration.UnsupportedVariant,
    chart.InvalidChartConfig,
    correlation.InvalidWindow,
    correlation.InsufficientPool,
    simulation.UnknownStudy,
)

CHART_OPTIONS = {
    "window": "w",
    "k_count": "L",
    "zeta": "zeta",
    "tail_mass": "c",
    "bootstrap_n": "N",
    "bootstrap_n0": "N0",
    "max_iter": "max_iter",
    "bootstrap_source": "bootstrap_source",
}


def _path(value) -> typing.Optional[str]:
    return None if value is None else str(value)


def _base(args) -> dict:
    if getattr(args, "manifest", None):
        return utils.load_json(args.manifest)
    return {}


def _pick(args, base: dict, name: str, default=None):
    """Argumento da linha de comando, senão o valor do manifesto."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return base.get(name, default)


def _require(manifest: dict, *names):
    missing = [name for name in names if manifest.get(name) is None]
    if missing:
        raise utils.ManifestError(f"Parâmetros obrigatórios ausentes: {', '.join(missing)}")


def calibrate_manifest(args) -> dict:
    base = _base(args)
    config_data = dict(base.get("config", {}))
    for option, key in CHART_OPTIONS.items():
        value = getattr(args, option, None)
        if value is not None:
            config_data[key] = value
    if args.k_values:
        config_data["K"] = utils.parse_int_list(args.k_values)
        config_data.pop("L", None)
    elif args.k_count is not None:
        config_data.pop("K", None)
    if "w" not in config_data:
        raise utils.ManifestError("Informe o tamanho da janela (--window)")

    seed = utils.resolve_seed(args.seed, base.get("seed", config_data.get("seed")))
    config_data["seed"] = seed
    manifest = {
        "command": "calibrate",
        "historical": _path(_pick(args, base, "historical")),
        "format": _pick(args, base, "format"),
        "config": chart.ChartConfig.from_dict(config_data).to_dict(),
        "seed": seed,
        "output": _path(_pick(args, base, "output")),
    }
    _require(manifest, "historical")
    return manifest


def monitor_manifest(args) -> dict:
    base = _base(args)
    manifest = {
        "command": "monitor",
        "historical": _path(_pick(args, base, "historical")),
        "format": _pick(args, base, "format"),
        "limit": _path(_pick(args, base, "limit")),
        "stream": _path(_pick(args, base, "stream", "-")),
        "stream_format": _pick(args, base, "stream_format"),
        "verbose": bool(_pick(args, base, "verbose", False)),
        "output": _path(_pick(args, base, "output")),
    }
    _require(manifest, "historical", "limit")
    limit_seed = utils.load_json(manifest["limit"]).get("seed")
    manifest["seed"] = utils.resolve_seed(args.seed, base.get("seed", limit_seed))
    return manifest


def simulate_manifest(args) -> dict:
    base = _base(args)
    overrides = dict(base.get("overrides", {}))
    overrides.update(utils.parse_overrides(args.set))
    cells = utils.load_json(args.cells) if args.cells else base.get("cells")
    manifest = {
        "command": "simulate",
        "study": _pick(args, base, "study"),
        "trials": _pick(args, base, "trials", 100),
        "full_scale": bool(_pick(args, base, "full_scale", False)),
        "include_n64": bool(_pick(args, base, "include_n64", False)),
        "overrides": overrides,
        "cells": cells,
        "arl0_horizon": _pick(args, base, "arl0_horizon"),
        "seed": utils.resolve_seed(args.seed, base.get("seed")),
        "output": _path(_pick(args, base, "output")),
        "summary": _path(_pick(args, base, "summary")),
    }
    _require(manifest, "study")
    if int(manifest["trials"]) < 1:
        raise utils.ManifestError(f"Número de tentativas deve ser positivo: {manifest['trials']}")
    return manifest


def profile_gen_manifest(args) -> dict:
    base = _base(args)
    functions = utils.load_json(args.functions) if args.functions else base.get("functions")
    target = None
    if functions is None:
        target = {
            "var_f": _pick(args, base, "var_f"),
            "snr": _pick(args, base, "snr"),
            "rho_fh": _pick(args, base, "rho_fh"),
            "convexity": _pick(args, base, "convexity", "convex"),
            "root": _pick(args, base, "root"),
            "degree": _pick(args, base, "degree", 2),
        }
        _require(target, "var_f", "snr", "rho_fh")
    manifest = {
        "command": "profile-gen",
        "functions": functions,
        "target": target,
        "n": _pick(args, base, "n"),
        "d": _pick(args, base, "d", 3),
        "m": _pick(args, base, "m", 0),
        "length": _pick(args, base, "length"),
        "tau": _pick(args, base, "tau", 0),
        "sigma": _pick(args, base, "sigma", 1.0),
        "format": _pick(args, base, "format", "csv"),
        "seed": utils.resolve_seed(args.seed, base.get("seed")),
        "output": _path(_pick(args, base, "output")),
        "historical_output": _path(_pick(args, base, "historical_output")),
        "pair_output": _path(_pick(args, base, "pair_output")),
    }
    _require(manifest, "n", "length")
    return manifest


def report_manifest(args) -> dict:
    base = _base(args)
    inputs = [str(path) for path in args.inputs] or base.get("inputs", [])
    if not inputs:
        raise utils.ManifestError("Informe ao menos um CSV de tentativas")
    return {
        "command": "report",
        "inputs": inputs,
        "output": _path(_pick(args, base, "output")),
    }


def replay_manifest(args) -> dict:
    echo = utils.load_json(args.echo)
    manifest = echo.get("manifest") if isinstance(echo, dict) else None
    if not isinstance(manifest, dict):
        raise utils.ManifestError(f"Arquivo {args.echo} não é um eco de manifesto")
    manifest = dict(manifest)
    if manifest.get("command") not in COMMANDS:
        raise utils.ManifestError(f"Comando desconhecido no manifesto: {manifest.get('command')}")
    if args.output is not None:
        manifest["output"] = str(args.output)
    logger.info("Reexecutando manifesto %s", utils.manifest_digest(manifest))
    return manifest


def write_manifest_echo(manifest: dict, manifest_out=None):
    echo = utils.manifest_echo(manifest)
    if manifest_out is None and manifest.get("output") not in (None, "-"):
        manifest_out = f"{manifest['output']}.manifest.json"
    if manifest_out is None:
        logger.info("Manifesto: %s", json.dumps(echo, sort_keys=True))
        return
    logger.debug("Gravando eco do manifesto em %s", manifest_out)
    utils.write_json(manifest_out, echo)


def cmd_calibrate(manifest: dict, progress: bool = False, **kwargs) -> int:
    bank = correlation.build_bank(
        utils.read_profiles(manifest["historical"], manifest.get("format"))
    )
    chart_config = chart.ChartConfig.from_dict(manifest["config"])
    if chart_config.w > bank.m:
        raise correlation.InvalidWindow(
            f"Janela w={chart_config.w} maior que o número de perfis históricos ({bank.m})"
        )
    limit = chart.bootstrap_control_limit(bank, chart_config, progress=progress)
    echo = utils.manifest_echo(manifest)
    utils.write_json(
        manifest.get("output"),
        {
            "limit": limit.to_dict(),
            "config": chart_config.to_dict(),
            "manifest_digest": echo["manifest_digest"],
            "seed": echo["seed"],
        },
    )
    return EXIT_OK


def load_limit(path) -> typing.Tuple[chart.ControlLimit, dict]:
    data = utils.load_json(path)
    try:
        return chart.ControlLimit.from_dict(data["limit"]), dict(data["config"])
    except (KeyError, TypeError) as exc:
        raise utils.ManifestError(f"Arquivo de limite inválido {path}: {exc}") from None


def cmd_monitor(manifest: dict, **kwargs) -> int:
    limit, config_data = load_limit(manifest["limit"])
    config_data["seed"] = manifest["seed"]
    chart_config = chart.ChartConfig.from_dict(config_data)
    bank = correlation.build_bank(
        utils.read_profiles(manifest["historical"], manifest.get("format"))
    )
    detector = chart.EigenvectorChart(bank, chart_config, limit)
    digest = utils.manifest_digest(manifest)
    stream_format = utils.profile_format(manifest["stream"], manifest.get("stream_format"))

    with utils.open_input(manifest["stream"]) as fp_in:
        with utils.open_output(manifest.get("output")) as fp_out:
            for row_number, y in utils.iter_profiles(fp_in, stream_format):
                try:
                    outcome = detector.monitor_step(y)
                except profiles.DimensionMismatch as exc:
                    raise utils.InputFormatError(f"Linha {row_number}: {exc}") from None
                record = outcome.to_dict(manifest.get("verbose", False))
                record["manifest_digest"] = digest
                fp_out.write(json.dumps(record) + "\n")
                fp_out.flush()
                if outcome.alarm:
                    logger.info("Alarme em t=%d (linha %d)", outcome.t, row_number)
                    return EXIT_ALARM
    logger.info("Fim do fluxo sem alarme após %d perfis", detector.t)
    return EXIT_OK


def _arl0_summaries(cells, manifest: dict) -> typing.List[dict]:
    summaries = []
    horizon = int(manifest["arl0_horizon"])
    for index, cell in enumerate(cells):
        try:
            censored = simulation.arl0_censored_runs(
                cell, horizon, int(manifest["trials"]), manifest["seed"], index
            )
        except calibration.InfeasibleCalibration as exc:
            summaries.append(simulation.infeasible_summary(cell, str(exc)))
            continue
        summaries.append(
            {
                "cell_id": cell.cell_id,
                "factors": cell.to_dict(),
                "feasible": True,
                "runs": int(manifest["trials"]),
                "horizon": horizon,
                "ARL0_star": censored.arl0_star,
                "finished": censored.finished,
                "ARL0_lower_bound": censored.lower_bound,
            }
        )
    return summaries


def cmd_simulate(manifest: dict, jobs: int = 1, progress: bool = False, **kwargs) -> int:
    try:
        cells = simulation.build_cells(
            manifest["study"],
            manifest.get("full_scale", False),
            manifest.get("include_n64", False),
            manifest.get("overrides"),
            manifest.get("cells"),
        )
    except ValueError as exc:
        raise utils.ManifestError(str(exc)) from None
    logger.info("Estudo %s: %d células", manifest["study"], len(cells))

    echo = utils.manifest_echo(manifest)
    constants = {"manifest_digest": echo["manifest_digest"], "master_seed": echo["seed"]}
    if manifest.get("arl0_horizon"):
        records, summaries = [], _arl0_summaries(cells, manifest)
    else:
        records, summaries = simulation.run_study(
            cells, int(manifest["trials"]), manifest["seed"], jobs, progress
        )

    frame = simulation.records_frame(records, **constants)
    with utils.open_output(manifest.get("output")) as fp:
        frame.to_csv(fp, index=False, lineterminator="\n")
    if manifest.get("summary"):
        utils.write_json(manifest["summary"], {**constants, "cells": summaries})
    infeasible = sum(not summary["feasible"] for summary in summaries)
    if infeasible:
        logger.info("%d células inviáveis sinalizadas no resumo", infeasible)
    return EXIT_OK


def load_functions(data: dict) -> typing.Tuple[profiles.ProfileFunction, profiles.ProfileFunction]:
    """Par (f, h) de ``{"f": ..., "h": ...}`` ou de um CalibratedPair serializado."""
    try:
        if "f0" in data:
            pair = calibration.CalibratedPair.from_dict(data)
            return pair.f, pair.h
        f = profiles.from_dict(data["f"])
        return f, profiles.from_dict(data["h"]) if data.get("h") else f
    except (KeyError, TypeError) as exc:
        raise utils.ManifestError(f"Descrição das funções inválida: {exc}") from None


def cmd_profile_gen(manifest: dict, **kwargs) -> int:
    digest = utils.manifest_digest(manifest)
    design_ss, function_ss, history_ss, stream_ss = np.random.SeedSequence(
        manifest["seed"]
    ).spawn(4)
    d = int(manifest["d"])
    if manifest.get("functions") is not None:
        f, h = load_functions(manifest["functions"])
        d = f.dimension
    else:
        target_data = dict(manifest["target"])
        degree = int(target_data.pop("degree"))
        target_data["convexity"] = calibration.Convexity(target_data["convexity"])
        target = calibration.CalibrationTarget(
            noise_var=float(manifest["sigma"]) ** 2, **target_data
        )
        pair = calibration.random_calibrated_pair(
            target, d, degree, np.random.default_rng(function_ss)
        )
        f, h = pair.f, pair.h
        if manifest.get("pair_output"):
            utils.write_json(manifest["pair_output"], pair.to_dict())

    X = profiles.random_design(int(manifest["n"]), d, np.random.default_rng(design_ss))
    sigma = float(manifest["sigma"])
    m = int(manifest["m"])
    if m and manifest.get("historical_output"):
        history_rng = np.random.default_rng(history_ss)
        historical = [
            profiles.generate_profile(f, X, sigma, history_rng, t).y for t in range(1 - m, 1)
        ]
        with utils.open_output(manifest["historical_output"]) as fp:
            utils.write_profiles(
                fp, historical, manifest["format"], start=1 - m, manifest_digest=digest
            )

    stream = profiles.generate_stream(
        f, h, X, sigma, int(manifest["tau"]), np.random.default_rng(stream_ss)
    )
    with utils.open_output(manifest.get("output")) as fp:
        utils.write_profiles(
            fp, (y.y for y in itertools.islice(stream, int(manifest["length"]))),
            manifest["format"],
            manifest_digest=digest,
        )
    return EXIT_OK


def cmd_report(manifest: dict, **kwargs) -> int:
    frames = []
    for path in manifest["inputs"]:
        try:
            frames.append(pd.read_csv(path))
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise utils.InputFormatError(f"CSV inválido {path}: {exc}") from None
    frame = pd.concat(frames, ignore_index=True)
    missing = set(simulation.TRIAL_COLUMNS) - set(frame.columns)
    if missing:
        raise utils.InputFormatError(f"Colunas ausentes: {sorted(missing)}")
    report = simulation.report_frame(frame)
    with utils.open_output(manifest.get("output")) as fp:
        report.to_csv(fp, index=False, lineterminator="\n")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "monitor": cmd_monitor,
    "simulate": cmd_simulate,
    "profile-gen": cmd_profile_gen,
    "report": cmd_report,
}

BUILDERS = {
    "calibrate": calibrate_manifest,
    "monitor": monitor_manifest,
    "simulate": simulate_manifest,
    "profile-gen": profile_gen_manifest,
    "report": report_manifest,
    "replay": replay_manifest,
}


def report_error(exc: Exception, exit_code: int) -> int:
    logger.error("%s: %s", type(exc).__name__, exc)
    sys.stderr.write(
        json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code})
        + "\n"
    )
    return exit_code


def manifest_parser():
    """Opções comuns a todos os comandos que produzem artefatos"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "--manifest",
        type=pathlib.Path,
        help="Manifesto JSON com valores padrão; argumentos explícitos têm precedência",
    )
    parser.add_argument(
        "--seed",
        type=int,
        help="Semente mestre (precedência: argumento > EIGVCC_SEED > manifesto)",
    )
    parser.add_argument(
        "--manifest-out",
        type=pathlib.Path,
        dest="manifest_out",
        help="Caminho do eco do manifesto (padrão: <output>.manifest.json)",
    )
    parser.add_argument(
        "--output",
        type=pathlib.Path,
        help="Arquivo de saída (padrão: saída padrão)",
    )
    return parser


def profile_source_parser():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "--historical",
        type=pathlib.Path,
        help="Perfis históricos sob controle (CSV ou NDJSON, um perfil por linha)",
    )
    parser.add_argument(
        "--format",
        choices=("csv", "ndjson"),
        help="Formato dos perfis históricos (padrão: pela extensão)",
    )
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Gráfico de controle por perturbação do autovetor para perfis",
        epilog="Formatos de arquivo descritos em FORMATS.md",
    )
    parser.add_argument("--loglevel", default="INFO")

    subparsers = parser.add_subparsers(title="Comandos", dest="command")
    common = [manifest_parser()]

    calibrate_parser = subparsers.add_parser(
        "calibrate",
        help="Estima o limite de controle por bootstrap paramétrico",
        parents=common + [profile_source_parser()],
    )
    calibrate_parser.add_argument("--window", type=int, help="Tamanho da janela w")
    calibrate_parser.add_argument(
        "--k-values", dest="k_values", help="Tamanhos de substituição K (ex.: 1,2,4,9)"
    )
    calibrate_parser.add_argument(
        "--k-count", dest="k_count", type=int,
        help=f"Número L de tamanhos de substituição (padrão {config.get('EIGVCC_K_COUNT')})",
    )
    calibrate_parser.add_argument("--zeta", type=float, help="Tolerância da iteração de potência")
    calibrate_parser.add_argument(
        "--tail-mass", dest="tail_mass", type=float, help="Massa de cauda c do limite"
    )
    calibrate_parser.add_argument(
        "--bootstrap-n", dest="bootstrap_n", type=int, help="Réplicas de bootstrap N"
    )
    calibrate_parser.add_argument(
        "--bootstrap-n0", dest="bootstrap_n0", type=int, help="Tamanho do conjunto N0"
    )
    calibrate_parser.add_argument("--max-iter", dest="max_iter", type=int)
    calibrate_parser.add_argument(
        "--bootstrap-source", dest="bootstrap_source", choices=chart.BOOTSTRAP_SOURCES,
        help="Origem dos perfis substitutos no bootstrap",
    )
    calibrate_parser.add_argument("--progress", action="store_true")

    monitor_parser = subparsers.add_parser(
        "monitor",
        help="Monitora um fluxo de perfis e emite NDJSON por passo",
        parents=common + [profile_source_parser()],
    )
    monitor_parser.add_argument(
        "--limit", type=pathlib.Path, help="Arquivo JSON produzido por calibrate"
    )
    monitor_parser.add_argument(
        "--stream", type=pathlib.Path, help="Fluxo de perfis (padrão: entrada padrão)"
    )
    monitor_parser.add_argument(
        "--stream-format", dest="stream_format", choices=("csv", "ndjson")
    )
    monitor_parser.add_argument(
        "--verbose", action="store_true", default=None,
        help="Inclui a estatística de cada k1 nos registros",
    )

    simulate_parser = subparsers.add_parser(
        "simulate", help="Executa um estudo de simulação", parents=common,
    )
    simulate_parser.add_argument(
        "study", nargs="?", help="study1, study2, robustness ou custom"
    )
    simulate_parser.add_argument("--trials", type=int, help="Tentativas por célula (padrão 100)")
    simulate_parser.add_argument(
        "--jobs", type=int, default=config.get_int("EIGVCC_JOBS"),
        help="Tentativas executadas em paralelo",
    )
    simulate_parser.add_argument(
        "--full-scale", dest="full_scale", action="store_true", default=None,
        help="Usa tau = 10^4 nas células longas do estudo 2",
    )
    simulate_parser.add_argument(
        "--include-n64", dest="include_n64", action="store_true", default=None,
    )
    simulate_parser.add_argument(
        "--set", action="append", default=[], metavar="CAMPO=VALOR",
        help="Sobrescreve um campo de todas as células (ex.: tau=0)",
    )
    simulate_parser.add_argument(
        "--cells", type=pathlib.Path, help="Lista JSON de células (estudo custom)"
    )
    simulate_parser.add_argument(
        "--arl0-horizon", dest="arl0_horizon", type=int,
        help="Executa sondas de ARL0 censuradas com este horizonte",
    )
    simulate_parser.add_argument(
        "--summary", type=pathlib.Path, help="Resumo JSON por célula"
    )
    simulate_parser.add_argument("--progress", action="store_true")

    profile_parser = subparsers.add_parser(
        "profile-gen", help="Gera perfis sintéticos", parents=common,
    )
    profile_parser.add_argument(
        "--functions", type=pathlib.Path,
        help="JSON com f e h (ou um par calibrado serializado)",
    )
    profile_parser.add_argument("--var-f", dest="var_f", type=float)
    profile_parser.add_argument("--snr", type=float)
    profile_parser.add_argument("--rho", dest="rho_fh", type=float)
    profile_parser.add_argument(
        "--convexity", choices=[item.value for item in calibration.Convexity]
    )
    profile_parser.add_argument("--root", choices=("lower", "upper"))
    profile_parser.add_argument("--degree", type=int, choices=(1, 2))
    profile_parser.add_argument("--n", type=int, help="Respostas por perfil")
    profile_parser.add_argument("--d", type=int, help="Número de preditores")
    profile_parser.add_argument("--m", type=int, help="Perfis históricos a gerar")
    profile_parser.add_argument("--length", type=int, help="Perfis monitorados a gerar")
    profile_parser.add_argument("--tau", type=int, help="Último instante sob controle")
    profile_parser.add_argument("--sigma", type=float, help="Desvio padrão do ruído")
    profile_parser.add_argument("--format", choices=("csv", "ndjson"))
    profile_parser.add_argument(
        "--historical-output", dest="historical_output", type=pathlib.Path
    )
    profile_parser.add_argument("--pair-output", dest="pair_output", type=pathlib.Path)

    report_parser = subparsers.add_parser(
        "report", help="Agrega CSVs de tentativas por célula", parents=common,
    )
    report_parser.add_argument("inputs", nargs="*", type=pathlib.Path)

    replay_parser = subparsers.add_parser(
        "replay", help="Reexecuta um eco de manifesto",
    )
    replay_parser.add_argument("echo", type=pathlib.Path)
    replay_parser.add_argument("--output", type=pathlib.Path)

    return parser


def main(sargs) -> int:
    parser = build_parser()
    args = parser.parse_args(sargs)

    # Change Logger level
    level = getattr(logging, args.loglevel.upper())
    logging.basicConfig(level=level, **config.INITIAL_LOG_CONFIG)
    logger = logging.getLogger()
    logger.setLevel(level)

    if not args.command:
        parser.print_help()
        return EXIT_INPUT

    try:
        manifest = BUILDERS[args.command](args)
        write_manifest_echo(manifest, _path(getattr(args, "manifest_out", None)))
        return COMMANDS[manifest["command"]](
            manifest,
            jobs=getattr(args, "jobs", None) or config.get_int("EIGVCC_JOBS"),
            progress=getattr(args, "progress", False),
        )
    except DEGENERATE_ERRORS as exc:
        return report_error(exc, EXIT_DEGENERATE)
    except INPUT_ERRORS as exc:
        return report_error(exc, EXIT_INPUT)
