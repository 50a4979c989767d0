import sys
import csv
import json
import typing
import hashlib
import pathlib
import contextlib

import numpy as np

from detector import config


# chaves que apenas dizem onde gravar; não entram no digest do manifesto
OUTPUT_KEYS = ("output", "summary", "historical_output", "pair_output", "manifest_out")

NDJSON_SUFFIXES = (".ndjson", ".jsonl")
COMMENT_PREFIX = "#"


class InputFormatError(Exception):
    pass


class ManifestError(Exception):
    pass


def profile_format(path, fmt: str = None) -> str:
    if fmt:
        if fmt not in ("csv", "ndjson"):
            raise InputFormatError(f"Formato de perfis desconhecido: {fmt}")
        return fmt
    if str(path) != "-" and pathlib.Path(path).suffix.lower() in NDJSON_SUFFIXES:
        return "ndjson"
    return "csv"


@contextlib.contextmanager
def open_input(path):
    """``-`` lê da entrada padrão."""
    if str(path) == "-":
        yield sys.stdin
    else:
        with open(path, encoding="utf-8", newline="") as fp:
            yield fp


@contextlib.contextmanager
def open_output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fp:
            yield fp


def _parse_csv_row(row: typing.List[str], row_number: int) -> np.ndarray:
    try:
        return np.array([float(value) for value in row], dtype=float)
    except ValueError:
        raise InputFormatError(
            f"Linha {row_number}: valor não numérico em {row}"
        ) from None


def _is_number(value: str) -> bool:
    try:
        float(value)
    except ValueError:
        return False
    return True


def _iter_csv(fp) -> typing.Iterator[typing.Tuple[int, np.ndarray]]:
    first = True
    for row_number, row in enumerate(csv.reader(fp), start=1):
        if not row or all(not value.strip() for value in row):
            continue
        if row[0].lstrip().startswith(COMMENT_PREFIX):
            continue
        if first:
            first = False
            # cabeçalho opcional: só células não numéricas
            if not any(_is_number(value) for value in row):
                continue
        yield row_number, _parse_csv_row(row, row_number)


def _iter_ndjson(fp) -> typing.Iterator[typing.Tuple[int, np.ndarray]]:
    for row_number, line in enumerate(fp, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            y = np.array(record["y"], dtype=float)
        except (ValueError, KeyError, TypeError) as exc:
            raise InputFormatError(f"Linha {row_number}: registro inválido ({exc})") from None
        if y.ndim != 1:
            raise InputFormatError(f"Linha {row_number}: 'y' deve ser uma lista de números")
        yield row_number, y


def iter_profiles(fp, fmt: str = "csv") -> typing.Iterator[typing.Tuple[int, np.ndarray]]:
    """Gera ``(número da linha, respostas)``; consome o arquivo sob demanda."""
    reader = _iter_ndjson if fmt == "ndjson" else _iter_csv
    n = None
    for row_number, y in reader(fp):
        if not np.all(np.isfinite(y)):
            raise InputFormatError(f"Linha {row_number}: valores não finitos")
        if n is None:
            n = y.size
        elif y.size != n:
            raise InputFormatError(
                f"Linha {row_number}: {y.size} respostas; esperado {n}"
            )
        yield row_number, y


def read_profiles(path, fmt: str = None) -> typing.List[np.ndarray]:
    fmt = profile_format(path, fmt)
    with open_input(path) as fp:
        return [y for _, y in iter_profiles(fp, fmt)]


def write_profiles(
    fp, rows: typing.Iterable, fmt: str = "csv", start: int = 1, manifest_digest: str = None
):
    """Com ``manifest_digest``, o CSV ganha uma linha de comentário inicial e
    cada registro NDJSON ganha a chave de mesmo nome."""
    if fmt == "ndjson":
        for t, y in enumerate(rows, start=start):
            record = {"t": t, "y": [float(v) for v in y]}
            if manifest_digest is not None:
                record["manifest_digest"] = manifest_digest
            fp.write(json.dumps(record) + "\n")
        return
    if manifest_digest is not None:
        fp.write(f"{COMMENT_PREFIX} manifest_digest={manifest_digest}\n")
    writer = csv.writer(fp, lineterminator="\n")
    for y in rows:
        writer.writerow([repr(float(v)) for v in y])


def dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path, data):
    with open_output(path) as fp:
        fp.write(dumps(data))


def load_json(path) -> dict:
    try:
        with open_input(path) as fp:
            return json.load(fp)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"JSON inválido em {path}: {exc}") from None


def manifest_digest(manifest: dict) -> str:
    payload = {key: value for key, value in manifest.items() if key not in OUTPUT_KEYS}
    data = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(data).hexdigest()[:16]


def manifest_echo(manifest: dict) -> dict:
    return {
        "manifest": manifest,
        "manifest_digest": manifest_digest(manifest),
        "seed": manifest.get("seed"),
    }


def resolve_seed(flag_seed=None, manifest_seed=None) -> int:
    """Precedência: argumento > EIGVCC_SEED > manifesto > nova entropia."""
    for candidate in (flag_seed, config.get("EIGVCC_SEED"), manifest_seed):
        if candidate is None or candidate == "":
            continue
        try:
            return int(candidate)
        except (TypeError, ValueError):
            raise ManifestError(f"Semente inválida: {candidate}") from None
    return int(np.random.SeedSequence().generate_state(1)[0])


def parse_overrides(items: typing.Sequence[str]) -> dict:
    """``chave=valor``; o valor é lido como JSON quando possível."""
    overrides = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ManifestError(f"Sobrescrita inválida (esperado chave=valor): {item}")
        try:
            overrides[key.strip()] = json.loads(value)
        except ValueError:
            overrides[key.strip()] = value
    return overrides


def parse_int_list(value: str) -> typing.List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ManifestError(f"Lista de inteiros inválida: {value}") from None
