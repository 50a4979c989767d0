import sys
import logging

from .main import main as main_cli
from .chart import (
    ChartConfig,
    ControlLimit,
    EigenvectorChart,
    bootstrap_control_limit,
    run_chart,
)
from .correlation import build_bank

__all__ = [
    "ChartConfig",
    "ControlLimit",
    "EigenvectorChart",
    "bootstrap_control_limit",
    "build_bank",
    "run_chart",
]


logger = logging.getLogger(__name__)


def run_cli():
    try:
        sys.exit(main_cli(sys.argv[1:]))
    except KeyboardInterrupt:
        # É convencionado no shell que o programa finalizado pelo signal de
        # código N deve retornar o código N + 128.
        sys.exit(130)
    except Exception as exc:
        logger.exception(
            "erro durante a execução da função 'main' com os args %s",
            sys.argv[1:],
        )
        sys.exit("Um erro inesperado ocorreu: %s" % exc)
